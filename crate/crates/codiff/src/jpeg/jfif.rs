//! Baseline JFIF export via a reference encoder, plus a DQT segment parser.
//! Used for cross-checking the internal degradation codec against an
//! independently implemented JPEG encoder.

use crate::error::{Error, Result};
use crate::image::ImagePatch;

use super::codec::ChromaSampling;
use super::tables::QualityFactor;

/// Encodes a patch as a baseline JFIF byte stream with the reference encoder.
pub fn encode_reference_jfif(
    image: &ImagePatch,
    qf: QualityFactor,
    sampling: ChromaSampling,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = jpeg_encoder::Encoder::new(&mut out, qf.value());
    enc.set_sampling_factor(match sampling {
        ChromaSampling::S444 => jpeg_encoder::SamplingFactor::F_1_1,
        ChromaSampling::S420 => jpeg_encoder::SamplingFactor::F_2_2,
    });
    enc.encode(
        &image.to_rgb8(),
        image.width() as u16,
        image.height() as u16,
        jpeg_encoder::ColorType::Rgb,
    )
    .map_err(|e| Error::domain(format!("reference encoder failed: {e}")))?;
    Ok(out)
}

/// Extracts the quantization tables from the DQT segments of a JFIF stream.
/// Returns (table_id, 64 values in natural row-major order) per table.
pub fn parse_dqt_tables(jfif: &[u8]) -> Result<Vec<(u8, [u8; 64])>> {
    // zig-zag scan order -> natural order
    const ZIGZAG: [usize; 64] = [
        0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34,
        27, 20, 13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44,
        51, 58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
    ];
    let mut tables = Vec::new();
    let mut i = 2; // skip SOI
    while i + 4 <= jfif.len() {
        if jfif[i] != 0xFF {
            return Err(Error::domain("malformed JFIF: expected marker"));
        }
        let marker = jfif[i + 1];
        if marker == 0xDA {
            break; // start of scan; all DQT segments precede it
        }
        let len = u16::from_be_bytes([jfif[i + 2], jfif[i + 3]]) as usize;
        if marker == 0xDB {
            let mut j = i + 4;
            let end = i + 2 + len;
            while j < end {
                let pq_tq = jfif[j];
                if pq_tq >> 4 != 0 {
                    return Err(Error::domain("16-bit quantization tables unsupported"));
                }
                let mut table = [0u8; 64];
                for (k, &z) in ZIGZAG.iter().enumerate() {
                    table[z] = jfif[j + 1 + k];
                }
                tables.push((pq_tq & 0x0F, table));
                j += 65;
            }
        }
        i += 2 + len;
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jpeg::tables::quant_table_for_qf;

    #[test]
    fn reference_encoder_tables_match_ours() {
        let img = crate::data::synthetic::textured_image(32, 32, 1);
        for q in [1u8, 5, 10, 20, 50, 95] {
            let qf = QualityFactor::new(q).unwrap();
            let jfif = encode_reference_jfif(&img, qf, ChromaSampling::S444).unwrap();
            let parsed = parse_dqt_tables(&jfif).unwrap();
            let ours = quant_table_for_qf(qf);
            let luma = parsed.iter().find(|(id, _)| *id == 0).expect("luma table");
            let chroma = parsed.iter().find(|(id, _)| *id == 1).expect("chroma table");
            assert_eq!(luma.1, ours.luma, "luma tables at qf {q}");
            assert_eq!(chroma.1, ours.chroma, "chroma tables at qf {q}");
        }
    }
}
