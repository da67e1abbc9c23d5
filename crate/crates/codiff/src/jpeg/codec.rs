//! DCT-domain JPEG degradation: the deterministic lossy round trip used to
//! synthesize training pairs, without entropy coding.

use crate::error::{Error, Result};
use crate::image::ImagePatch;

use super::tables::{quant_table_for_qf, QualityFactor};

/// Chroma subsampling mode for the degradation codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ChromaSampling {
    /// No subsampling.
    S444,
    /// 2x2 chroma subsampling, the common encoder default.
    S420,
}

impl Default for ChromaSampling {
    fn default() -> Self {
        ChromaSampling::S420
    }
}

/// A single image plane with f32 storage holding integer-valued samples.
struct Plane {
    data: Vec<f32>,
    h: usize,
    w: usize,
}

impl Plane {
    fn new(h: usize, w: usize) -> Self {
        Plane {
            data: vec![0.0; h * w],
            h,
            w,
        }
    }

    #[inline]
    fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.w + x] = v;
    }
}

/// Mirror index for reflect padding (period 2n-2, endpoints not repeated).
fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let i = i % period;
    if i < n {
        i
    } else {
        period - i
    }
}

/// Reflect-pads a plane on the bottom/right to the given dimensions.
fn pad_reflect(p: &Plane, h: usize, w: usize) -> Plane {
    let mut out = Plane::new(h, w);
    for y in 0..h {
        let sy = mirror(y, p.h);
        for x in 0..w {
            out.set(y, x, p.at(sy, mirror(x, p.w)));
        }
    }
    out
}

const PI: f64 = std::f64::consts::PI;

fn dct_basis() -> [[f64; 8]; 8] {
    let mut cos = [[0.0f64; 8]; 8];
    for (u, row) in cos.iter_mut().enumerate() {
        for (x, c) in row.iter_mut().enumerate() {
            *c = ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
        }
    }
    cos
}

/// Forward 8x8 DCT-II with orthonormal scaling.
fn fdct8x8(block: &[f64; 64], cos: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut out = [0.0f64; 64];
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for x in 0..8 {
                for y in 0..8 {
                    acc += block[x * 8 + y] * cos[u][x] * cos[v][y];
                }
            }
            let cu = if u == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            let cv = if v == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            out[u * 8 + v] = 0.25 * cu * cv * acc;
        }
    }
    out
}

/// Inverse 8x8 DCT.
fn idct8x8(coef: &[f64; 64], cos: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut out = [0.0f64; 64];
    for x in 0..8 {
        for y in 0..8 {
            let mut acc = 0.0;
            for u in 0..8 {
                for v in 0..8 {
                    let cu = if u == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
                    let cv = if v == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
                    acc += cu * cv * coef[u * 8 + v] * cos[u][x] * cos[v][y];
                }
            }
            out[x * 8 + y] = 0.25 * acc;
        }
    }
    out
}

/// Quantize/dequantize every 8x8 block of a level-shifted plane in place.
fn lossy_plane(p: &mut Plane, table: &[u8; 64], cos: &[[f64; 8]; 8]) {
    debug_assert!(p.h % 8 == 0 && p.w % 8 == 0);
    let mut block = [0.0f64; 64];
    for by in (0..p.h).step_by(8) {
        for bx in (0..p.w).step_by(8) {
            for i in 0..8 {
                for j in 0..8 {
                    block[i * 8 + j] = p.at(by + i, bx + j) as f64 - 128.0;
                }
            }
            let coef = fdct8x8(&block, cos);
            let mut deq = [0.0f64; 64];
            for k in 0..64 {
                let q = table[k] as f64;
                deq[k] = (coef[k] / q).round() * q;
            }
            let rec = idct8x8(&deq, cos);
            for i in 0..8 {
                for j in 0..8 {
                    let v = (rec[i * 8 + j] + 128.0).round().clamp(0.0, 255.0);
                    p.set(by + i, bx + j, v as f32);
                }
            }
        }
    }
}

fn rgb_to_ycbcr_planes(img: &ImagePatch) -> (Plane, Plane, Plane) {
    let (h, w) = (img.height(), img.width());
    let mut yp = Plane::new(h, w);
    let mut cb = Plane::new(h, w);
    let mut cr = Plane::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let r = (img.get(y, x, 0) * 255.0).round() as f64;
            let g = (img.get(y, x, 1) * 255.0).round() as f64;
            let b = (img.get(y, x, 2) * 255.0).round() as f64;
            let yy = 0.299 * r + 0.587 * g + 0.114 * b;
            let pb = -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0;
            let pr = 0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0;
            yp.set(y, x, yy.round().clamp(0.0, 255.0) as f32);
            cb.set(y, x, pb.round().clamp(0.0, 255.0) as f32);
            cr.set(y, x, pr.round().clamp(0.0, 255.0) as f32);
        }
    }
    (yp, cb, cr)
}

fn ycbcr_to_rgb(yp: &Plane, cb: &Plane, cr: &Plane, h: usize, w: usize) -> ImagePatch {
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let yy = yp.at(y, x) as f64;
            let pb = cb.at(y, x) as f64 - 128.0;
            let pr = cr.at(y, x) as f64 - 128.0;
            let r = yy + 1.402 * pr;
            let g = yy - 0.344_136 * pb - 0.714_136 * pr;
            let b = yy + 1.772 * pb;
            for v in [r, g, b] {
                pixels.push((v.round().clamp(0.0, 255.0) / 255.0) as f32);
            }
        }
    }
    ImagePatch::new(pixels, h, w).expect("values clamped to range")
}

/// 2x2 box downsample with rounding to the nearest integer sample.
fn downsample2(p: &Plane) -> Plane {
    let (h2, w2) = (p.h / 2, p.w / 2);
    let mut out = Plane::new(h2, w2);
    for y in 0..h2 {
        for x in 0..w2 {
            let s = p.at(2 * y, 2 * x)
                + p.at(2 * y, 2 * x + 1)
                + p.at(2 * y + 1, 2 * x)
                + p.at(2 * y + 1, 2 * x + 1);
            out.set(y, x, (s as f64 / 4.0).round() as f32);
        }
    }
    out
}

/// Nearest-neighbour upsample by 2 in both dimensions.
fn upsample2(p: &Plane) -> Plane {
    let mut out = Plane::new(p.h * 2, p.w * 2);
    for y in 0..out.h {
        for x in 0..out.w {
            out.set(y, x, p.at(y / 2, x / 2));
        }
    }
    out
}

/// Runs the full JPEG degradation round trip: RGB→YCbCr, optional 4:2:0
/// subsampling, blockwise DCT quantization at the given quality factor,
/// reconstruction, and clamping. Deterministic for identical inputs.
///
/// Images whose dimensions are not multiples of the sampling block are
/// reflect-padded internally and cropped back.
pub fn jpeg_round_trip(
    image: &ImagePatch,
    qf: QualityFactor,
    sampling: ChromaSampling,
) -> Result<ImagePatch> {
    let (h, w) = (image.height(), image.width());
    if h < 2 || w < 2 {
        return Err(Error::domain(
            "image too small for codec operations (needs at least 2x2)",
        ));
    }
    let mcu = match sampling {
        ChromaSampling::S444 => 8,
        ChromaSampling::S420 => 16,
    };
    let ph = h.div_ceil(mcu) * mcu;
    let pw = w.div_ceil(mcu) * mcu;

    let tables = quant_table_for_qf(qf);
    let cos = dct_basis();

    let (yp, cb, cr) = rgb_to_ycbcr_planes(image);
    let mut yp = pad_reflect(&yp, ph, pw);
    let cb = pad_reflect(&cb, ph, pw);
    let cr = pad_reflect(&cr, ph, pw);

    lossy_plane(&mut yp, &tables.luma, &cos);

    let (cb, cr) = match sampling {
        ChromaSampling::S444 => {
            let mut cb = cb;
            let mut cr = cr;
            lossy_plane(&mut cb, &tables.chroma, &cos);
            lossy_plane(&mut cr, &tables.chroma, &cos);
            (cb, cr)
        }
        ChromaSampling::S420 => {
            let mut cb2 = downsample2(&cb);
            let mut cr2 = downsample2(&cr);
            lossy_plane(&mut cb2, &tables.chroma, &cos);
            lossy_plane(&mut cr2, &tables.chroma, &cos);
            (upsample2(&cb2), upsample2(&cr2))
        }
    };

    let full = ycbcr_to_rgb(&yp, &cb, &cr, ph, pw);
    full.crop(0, 0, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mid_gray(h: usize, w: usize) -> ImagePatch {
        ImagePatch::constant(128.0 / 255.0, h, w).unwrap()
    }

    #[test]
    fn constant_mid_gray_survives_any_qf() {
        let img = mid_gray(16, 16);
        for q in [1u8, 5, 10, 50, 95, 100] {
            let out =
                jpeg_round_trip(&img, QualityFactor::new(q).unwrap(), ChromaSampling::S420)
                    .unwrap();
            assert_eq!(out, img, "qf {q}");
        }
    }

    #[test]
    fn deterministic() {
        let img = crate::data::synthetic::textured_image(64, 64, 7);
        let qf = QualityFactor::new(10).unwrap();
        let a = jpeg_round_trip(&img, qf, ChromaSampling::S420).unwrap();
        let b = jpeg_round_trip(&img, qf, ChromaSampling::S420).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_in_unit_range() {
        let img = crate::data::synthetic::textured_image(40, 56, 3);
        for q in [1u8, 20, 95] {
            let out =
                jpeg_round_trip(&img, QualityFactor::new(q).unwrap(), ChromaSampling::S420)
                    .unwrap();
            assert!(out.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn psnr_non_increasing_as_qf_drops() {
        let img = crate::data::synthetic::textured_image(64, 64, 11);
        let mut last = f64::INFINITY;
        for q in [95u8, 50, 20, 10, 5, 1] {
            let out =
                jpeg_round_trip(&img, QualityFactor::new(q).unwrap(), ChromaSampling::S420)
                    .unwrap();
            let mse = img.mse(&out).unwrap();
            let psnr = if mse == 0.0 { 99.0 } else { -10.0 * mse.log10() };
            assert!(
                psnr <= last + 1e-9,
                "psnr increased from {last} to {psnr} at qf {q}"
            );
            last = psnr;
        }
    }

    #[test]
    fn non_multiple_of_eight_dimensions() {
        let img = crate::data::synthetic::textured_image(37, 45, 5);
        let out = jpeg_round_trip(&img, QualityFactor::new(20).unwrap(), ChromaSampling::S420)
            .unwrap();
        assert_eq!(out.height(), 37);
        assert_eq!(out.width(), 45);
    }

    #[test]
    fn dct_matches_direct_formula() {
        // independent scalar evaluation of the DCT-II definition
        let mut block = [0.0f64; 64];
        for (i, b) in block.iter_mut().enumerate() {
            *b = ((i * 37 + 11) % 256) as f64 - 128.0;
        }
        let cos = dct_basis();
        let got = fdct8x8(&block, &cos);
        for u in 0..8 {
            for v in 0..8 {
                let mut acc = 0.0;
                for x in 0..8 {
                    for y in 0..8 {
                        acc += block[x * 8 + y]
                            * ((2.0 * x as f64 + 1.0) * u as f64 * PI / 16.0).cos()
                            * ((2.0 * y as f64 + 1.0) * v as f64 * PI / 16.0).cos();
                    }
                }
                let cu = if u == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
                let cv = if v == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
                let want = 0.25 * cu * cv * acc;
                assert!((got[u * 8 + v] - want).abs() < 1e-9);
            }
        }
        // inverse recovers the block
        let back = idct8x8(&got, &cos);
        for i in 0..64 {
            assert!((back[i] - block[i]).abs() < 1e-9);
        }
    }
}
