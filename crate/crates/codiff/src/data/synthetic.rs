//! Procedural image generation for desk-scale corpora. The images mix smooth
//! gradients, hard-edged shapes and fine texture so that aggressive JPEG
//! compression produces visible blocking and ringing.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::ImagePatch;

/// Deterministic textured test image. Distinct seeds give distinct content.
pub fn textured_image(height: usize, width: usize, seed: u64) -> ImagePatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut px = vec![0.0f32; height * width * 3];

    // smooth base: a few low-frequency sinusoids per channel
    let mut waves = Vec::new();
    for _ in 0..3 {
        let n = rng.gen_range(2..5);
        let mut ch = Vec::new();
        for _ in 0..n {
            ch.push((
                rng.gen_range(0.01..0.06f64), // fy
                rng.gen_range(0.01..0.06f64), // fx
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.08..0.22f64), // amplitude
            ));
        }
        waves.push(ch);
    }
    let base: [f64; 3] = [
        rng.gen_range(0.3..0.7),
        rng.gen_range(0.3..0.7),
        rng.gen_range(0.3..0.7),
    ];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let mut v = base[c];
                for &(fy, fx, ph, amp) in &waves[c] {
                    v += amp
                        * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + ph).sin();
                }
                px[(y * width + x) * 3 + c] = v as f32;
            }
        }
    }

    // hard-edged rectangles
    let n_rects = rng.gen_range(4..9);
    for _ in 0..n_rects {
        let rh = rng.gen_range(height / 8..height / 2);
        let rw = rng.gen_range(width / 8..width / 2);
        let top = rng.gen_range(0..height - rh);
        let left = rng.gen_range(0..width - rw);
        let delta: [f32; 3] = [
            rng.gen_range(-0.35..0.35),
            rng.gen_range(-0.35..0.35),
            rng.gen_range(-0.35..0.35),
        ];
        for y in top..top + rh {
            for x in left..left + rw {
                for c in 0..3 {
                    px[(y * width + x) * 3 + c] += delta[c];
                }
            }
        }
    }

    // fine texture patches: high-frequency modulation over random regions
    let n_tex = rng.gen_range(3..6);
    for _ in 0..n_tex {
        let rh = rng.gen_range(height / 4..height);
        let rw = rng.gen_range(width / 4..width);
        let top = rng.gen_range(0..=height - rh);
        let left = rng.gen_range(0..=width - rw);
        let fy = rng.gen_range(0.2..0.48f64);
        let fx = rng.gen_range(0.2..0.48f64);
        let amp = rng.gen_range(0.06..0.16f64);
        let ph = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in top..top + rh {
            for x in left..left + rw {
                let t = amp
                    * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + ph).sin();
                for c in 0..3 {
                    px[(y * width + x) * 3 + c] += t as f32;
                }
            }
        }
    }

    for p in px.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    ImagePatch::new(px, height, width).expect("clamped pixels are valid")
}

/// Writes `count` deterministic PNG images of the given size into `dir`.
pub fn write_corpus(
    dir: &std::path::Path,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> crate::error::Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let img = textured_image(height, width, seed.wrapping_add(i as u64));
        let path = dir.join(format!("img_{i:04}.png"));
        img.save_png(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = textured_image(32, 32, 5);
        let b = textured_image(32, 32, 5);
        let c = textured_image(32, 32, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn jpeg_at_low_qf_degrades_texture() {
        // the corpus must be rich enough that QF=10 visibly hurts
        let img = textured_image(64, 64, 0);
        let lq = crate::jpeg::jpeg_round_trip(
            &img,
            crate::jpeg::QualityFactor::new(10).unwrap(),
            crate::jpeg::ChromaSampling::S420,
        )
        .unwrap();
        let mse = img.mse(&lq).unwrap();
        let psnr = -10.0 * mse.log10();
        assert!(psnr < 32.0, "QF=10 should degrade the corpus, psnr={psnr}");
    }
}
