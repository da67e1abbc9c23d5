//! Metrics, the two diagnostic analyses (embedding separability and
//! unseen-QF generalization), analytic complexity counting, and ablation
//! runners.

use std::io::Write;
use std::ops::Add;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cave::CaVE;
use crate::data::ImageStore;
use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::jpeg::{jpeg_round_trip, sample_rng, ChromaSampling, QualityFactor};
use crate::nn::LayerSpec;
use crate::objectives::{dists, DistsExtractor};
use crate::training::{self, LearningMode, LossToggles, Stage, TrainConfig};

pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub sample_id: usize,
    pub qf: u8,
    pub psnr: f64,
    pub ssim: f64,
    pub dists: f64,
}

fn check_shapes(x: &ImagePatch, y: &ImagePatch) -> Result<()> {
    if x.height() != y.height() || x.width() != y.width() {
        return Err(Error::domain(format!(
            "shape mismatch: {}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio on the [0,1] scale, capped at 99 dB.
pub fn psnr(x: &ImagePatch, y: &ImagePatch) -> Result<f64> {
    check_shapes(x, y)?;
    let mse = x
        .pixels()
        .iter()
        .zip(y.pixels())
        .map(|(a, b)| {
            let d = (*a - *b) as f64;
            d * d
        })
        .sum::<f64>()
        / x.pixels().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mean structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5), averaged over channels and valid window positions.
pub fn ssim(x: &ImagePatch, y: &ImagePatch) -> Result<f64> {
    check_shapes(x, y)?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::domain(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for top in 0..=h - SSIM_WINDOW {
            for left in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my) = (0.0f64, 0.0f64);
                let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let g = win[dy] * win[dx];
                        let a = x.get(top + dy, left + dx, c) as f64;
                        let b = y.get(top + dy, left + dx, c) as f64;
                        mx += g * a;
                        my += g * b;
                        sxx += g * a * a;
                        syy += g * b * b;
                        sxy += g * a * b;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Full metric row for one restored/reference pair.
pub fn metric_record(
    sample_id: usize,
    qf: u8,
    restored: &ImagePatch,
    reference: &ImagePatch,
    extractor: &DistsExtractor,
) -> Result<MetricRecord> {
    let device = Device::Cpu;
    let a = restored.to_tensor(&device, DType::F32)?.unsqueeze(0)?;
    let b = reference.to_tensor(&device, DType::F32)?.unsqueeze(0)?;
    let d = dists(&a, &b, extractor)?
        .to_dtype(DType::F64)?
        .to_vec0::<f64>()?;
    Ok(MetricRecord {
        sample_id,
        qf,
        psnr: psnr(restored, reference)?,
        ssim: ssim(restored, reference)?,
        dists: d,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub params: usize,
    pub macs: usize,
}

impl Add for ComplexityReport {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            params: self.params + rhs.params,
            macs: self.macs + rhs.macs,
        }
    }
}

/// Analytic parameter and multiply-accumulate counts over layer shape
/// descriptors. Channelwise affines carry parameters but are folded into the
/// preceding convolution at inference, so they contribute no MACs.
pub fn count_complexity(specs: &[LayerSpec]) -> Result<ComplexityReport> {
    let mut report = ComplexityReport { params: 0, macs: 0 };
    for spec in specs {
        let (p, m) = match spec {
            LayerSpec::Conv2d {
                kernel,
                c_in,
                c_out,
                h_out,
                w_out,
            } => (
                kernel * kernel * c_in * c_out + c_out,
                kernel * kernel * c_in * c_out * h_out * w_out,
            ),
            LayerSpec::Dense {
                in_dim,
                out_dim,
                positions,
            } => (in_dim * out_dim + out_dim, in_dim * out_dim * positions),
            LayerSpec::MatMul { m, k, n } => (0, m * k * n),
            LayerSpec::ChannelAffine { channels } => (2 * channels, 0),
            LayerSpec::Opaque { kind } => {
                return Err(Error::UnsupportedLayer(kind.clone()))
            }
        };
        report.params += p;
        report.macs += m;
    }
    Ok(report)
}

/// Pooled embeddings and QF class labels for a (dataset x qfs) grid.
/// Deterministic in (seed, sample index).
pub fn collect_embeddings(
    cave: &CaVE,
    data: &ImageStore,
    qfs: &[u8],
    patch_size: usize,
    chroma: ChromaSampling,
    seed: u64,
) -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
    let device = Device::Cpu;
    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    for (class, &qf) in qfs.iter().enumerate() {
        for i in 0..data.len() {
            let mut rng = sample_rng(seed ^ (qf as u64) << 32, i as u64);
            let img = data.get(i);
            let size = patch_size.min(img.height()).min(img.width());
            let top = rand::Rng::gen_range(&mut rng, 0..=img.height() - size);
            let left = rand::Rng::gen_range(&mut rng, 0..=img.width() - size);
            let hq = img.crop(top, left, size, size)?;
            let lq = jpeg_round_trip(&hq, QualityFactor::new(qf)?, chroma)?;
            let x = lq.to_tensor(&device, DType::F32)?.unsqueeze(0)?;
            let pooled = cave.encode_opts(&x, false, false)?.pooled;
            embeddings.push(pooled.squeeze(0)?.to_vec1::<f32>()?);
            labels.push(class);
        }
    }
    Ok((embeddings, labels))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
}

const PROBE_EPOCHS: usize = 400;
const PROBE_LR: f64 = 0.5;

/// Multinomial logistic probe on frozen embeddings with a fixed 80/20
/// split. Full-batch gradient descent from zero init; deterministic in
/// (embeddings, labels, split seed).
pub fn linear_probe(
    embeddings: &[Vec<f32>],
    labels: &[usize],
    split_seed: u64,
) -> Result<ProbeResult> {
    if embeddings.len() != labels.len() {
        return Err(Error::domain("embedding/label count mismatch"));
    }
    let n = embeddings.len();
    if n == 0 {
        return Err(Error::domain("no samples"));
    }
    let n_classes = labels.iter().copied().max().unwrap() + 1;
    if n_classes < 2 {
        return Err(Error::domain("probe needs at least two classes"));
    }
    for c in 0..n_classes {
        let count = labels.iter().filter(|&&l| l == c).count();
        if count < 2 {
            return Err(Error::domain(format!(
                "class {c} has {count} sample(s); need at least 2"
            )));
        }
    }
    let d = embeddings[0].len();

    // stratified 80/20 split so every class appears in both halves
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    let mut rng = sample_rng(split_seed, 0);
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() / 5).max(1);
        test_idx.extend_from_slice(&idx[..n_test]);
        train_idx.extend_from_slice(&idx[n_test..]);
    }

    // feature standardization from training statistics only
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for &i in &train_idx {
        for (j, v) in embeddings[i].iter().enumerate() {
            mean[j] += *v as f64;
        }
    }
    for m in &mut mean {
        *m /= train_idx.len() as f64;
    }
    for &i in &train_idx {
        for (j, v) in embeddings[i].iter().enumerate() {
            let dv = *v as f64 - mean[j];
            var[j] += dv * dv;
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v / train_idx.len() as f64).sqrt().max(1e-8))
        .collect();
    let feat = |i: usize| -> Vec<f64> {
        embeddings[i]
            .iter()
            .enumerate()
            .map(|(j, v)| (*v as f64 - mean[j]) * scale[j])
            .collect()
    };

    let mut w = DMatrix::<f64>::zeros(d, n_classes);
    let mut b = vec![0.0f64; n_classes];
    let xs: Vec<Vec<f64>> = train_idx.iter().map(|&i| feat(i)).collect();
    let inv_n = 1.0 / train_idx.len() as f64;
    for _ in 0..PROBE_EPOCHS {
        let mut gw = DMatrix::<f64>::zeros(d, n_classes);
        let mut gb = vec![0.0f64; n_classes];
        for (x, &i) in xs.iter().zip(&train_idx) {
            let mut logits: Vec<f64> = (0..n_classes)
                .map(|c| b[c] + (0..d).map(|j| x[j] * w[(j, c)]).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let mut z = 0.0;
            for l in &mut logits {
                *l = (*l - max).exp();
                z += *l;
            }
            for c in 0..n_classes {
                let p = logits[c] / z - if labels[i] == c { 1.0 } else { 0.0 };
                gb[c] += p;
                for j in 0..d {
                    gw[(j, c)] += p * x[j];
                }
            }
        }
        for c in 0..n_classes {
            b[c] -= PROBE_LR * gb[c] * inv_n;
            for j in 0..d {
                w[(j, c)] -= PROBE_LR * gw[(j, c)] * inv_n;
            }
        }
    }

    let accuracy = |idx: &[usize]| -> f64 {
        let mut hits = 0usize;
        for &i in idx {
            let x = feat(i);
            let pred = (0..n_classes)
                .map(|c| b[c] + (0..d).map(|j| x[j] * w[(j, c)]).sum::<f64>())
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            if pred == labels[i] {
                hits += 1;
            }
        }
        hits as f64 / idx.len() as f64
    };

    Ok(ProbeResult {
        train_accuracy: accuracy(&train_idx),
        test_accuracy: accuracy(&test_idx),
        n_train: train_idx.len(),
        n_test: test_idx.len(),
        n_classes,
    })
}

/// First two principal components of the embedding cloud, for scatter
/// export.
pub fn pca_2d(embeddings: &[Vec<f32>]) -> Result<Vec<[f64; 2]>> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::domain("PCA needs at least two samples"));
    }
    let d = embeddings[0].len();
    let mut x = DMatrix::<f64>::zeros(n, d);
    for (i, e) in embeddings.iter().enumerate() {
        for (j, v) in e.iter().enumerate() {
            x[(i, j)] = *v as f64;
        }
    }
    for j in 0..d {
        let mean = x.column(j).mean();
        for i in 0..n {
            x[(i, j)] -= mean;
        }
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let mut coords = Vec::with_capacity(n);
    for i in 0..n {
        coords.push([
            u[(i, 0)] * svd.singular_values[0],
            u[(i, 1.min(svd.singular_values.len() - 1))]
                * svd.singular_values[1.min(svd.singular_values.len() - 1)],
        ]);
    }
    Ok(coords)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub probe: ProbeResult,
    pub tsv_path: PathBuf,
    pub embeddings_path: PathBuf,
}

/// Fig. 3-style analysis: probe accuracy on frozen pooled embeddings plus a
/// 2-D PCA export (TSV: x, y, qf) and a raw-embedding dump.
pub fn embedding_separability(
    cave: &CaVE,
    data: &ImageStore,
    qfs: &[u8],
    patch_size: usize,
    chroma: ChromaSampling,
    seed: u64,
    out_dir: &Path,
) -> Result<SeparabilityReport> {
    let (embeddings, labels) = collect_embeddings(cave, data, qfs, patch_size, chroma, seed)?;
    let probe = linear_probe(&embeddings, &labels, seed)?;
    std::fs::create_dir_all(out_dir)?;

    let coords = pca_2d(&embeddings)?;
    let tsv_path = out_dir.join("embedding_pca.tsv");
    let mut f = std::fs::File::create(&tsv_path)?;
    writeln!(f, "x\ty\tqf")?;
    for (c, &l) in coords.iter().zip(&labels) {
        writeln!(f, "{:.6}\t{:.6}\t{}", c[0], c[1], qfs[l])?;
    }

    let embeddings_path = out_dir.join("embeddings.tsv");
    let mut f = std::fs::File::create(&embeddings_path)?;
    for (e, &l) in embeddings.iter().zip(&labels) {
        let row: Vec<String> = e.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(f, "{}\t{}", qfs[l], row.join("\t"))?;
    }

    Ok(SeparabilityReport {
        probe,
        tsv_path,
        embeddings_path,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QfGenRow {
    pub qf: u8,
    pub explicit_mse: f64,
    pub dual_mse: f64,
}

/// Mean squared QF-prediction error for one embedder over the evaluation
/// set at a fixed quality factor.
pub fn qf_prediction_mse(
    cave: &CaVE,
    data: &ImageStore,
    qf: u8,
    patch_size: usize,
    chroma: ChromaSampling,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    let device = Device::Cpu;
    let mut total = 0.0;
    for i in 0..data.len() {
        let mut rng = sample_rng(seed ^ (qf as u64) << 32, i as u64);
        let img = data.get(i);
        let size = patch_size.min(img.height()).min(img.width());
        let top = rand::Rng::gen_range(&mut rng, 0..=img.height() - size);
        let left = rand::Rng::gen_range(&mut rng, 0..=img.width() - size);
        let hq = img.crop(top, left, size, size)?;
        let lq = jpeg_round_trip(&hq, QualityFactor::new(qf)?, chroma)?;
        let x = lq.to_tensor(&device, DType::F32)?.unsqueeze(0)?;
        let features = cave.encode_opts(&x, false, false)?;
        let pred = cave
            .predict_qf(&features)?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?[0];
        let err = pred - qf as f64;
        total += err * err;
    }
    Ok(total / data.len() as f64)
}

/// Fig. 6-style analysis: per-QF prediction MSE for explicit- and
/// dual-trained embedders on the same data, written as CSV and a bar plot.
pub fn qf_generalization_eval(
    explicit_ckpt: &Path,
    dual_ckpt: &Path,
    data: &ImageStore,
    qfs: &[u8],
    patch_size: usize,
    chroma: ChromaSampling,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<QfGenRow>> {
    let (_es, explicit) = training::load_cave(explicit_ckpt)?;
    let (_ds, dual) = training::load_cave(dual_ckpt)?;
    let mut rows = Vec::with_capacity(qfs.len());
    for &qf in qfs {
        rows.push(QfGenRow {
            qf,
            explicit_mse: qf_prediction_mse(&explicit, data, qf, patch_size, chroma, seed)?,
            dual_mse: qf_prediction_mse(&dual, data, qf, patch_size, chroma, seed)?,
        });
    }
    std::fs::create_dir_all(out_dir)?;
    let mut f = std::fs::File::create(out_dir.join("qf_generalization.csv"))?;
    writeln!(f, "qf,explicit_mse,dual_mse")?;
    for r in &rows {
        writeln!(f, "{},{:.6e},{:.6e}", r.qf, r.explicit_mse, r.dual_mse)?;
    }
    let pairs: Vec<(String, Vec<f64>)> = rows
        .iter()
        .map(|r| (format!("QF{}", r.qf), vec![r.explicit_mse, r.dual_mse]))
        .collect();
    grouped_bar_plot(&pairs)?.save_png(&out_dir.join("qf_generalization.png"))?;
    Ok(rows)
}

const PLOT_H: usize = 200;
const BAR_W: usize = 16;
const SERIES_COLORS: [[f32; 3]; 2] = [[0.85, 0.33, 0.1], [0.0, 0.45, 0.74]];

/// Minimal grouped bar chart raster; value axis scaled to the data maximum.
pub fn grouped_bar_plot(groups: &[(String, Vec<f64>)]) -> Result<ImagePatch> {
    if groups.is_empty() {
        return Err(Error::domain("nothing to plot"));
    }
    let series = groups[0].1.len();
    let max = groups
        .iter()
        .flat_map(|(_, vs)| vs.iter())
        .cloned()
        .fold(f64::MIN, f64::max)
        .max(1e-12);
    let group_w = series * BAR_W + BAR_W;
    let width = groups.len() * group_w + BAR_W;
    let mut img = ImagePatch::constant(1.0, PLOT_H, width)?;
    for (g, (_, vs)) in groups.iter().enumerate() {
        for (s, v) in vs.iter().enumerate() {
            let h = ((v / max) * (PLOT_H as f64 - 10.0)).round() as usize;
            let x0 = BAR_W + g * group_w + s * BAR_W;
            let color = SERIES_COLORS[s % SERIES_COLORS.len()];
            for y in PLOT_H - h.max(1)..PLOT_H {
                for x in x0..x0 + BAR_W - 2 {
                    for c in 0..3 {
                        img.set(y, x, c, color[c]);
                    }
                }
            }
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    Empty,
    Learnable,
    Cave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    PromptSource,
    LearningMode,
    LossSet,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt_source" => Ok(Self::PromptSource),
            "learning_mode" => Ok(Self::LearningMode),
            "loss_set" => Ok(Self::LossSet),
            other => Err(Error::domain(format!("unknown ablation axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub qf_mse: f64,
    pub psnr: f64,
    pub final_loss: f64,
}

/// The learning-mode ablation (Table 4 structure): trains one embedder per
/// mode with a shared seed and reports QF-prediction MSE on held-out QFs.
pub fn ablate_learning_mode(
    cfg: &TrainConfig,
    data: &ImageStore,
    eval_qfs: &[u8],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for mode in [
        LearningMode::Explicit,
        LearningMode::Implicit,
        LearningMode::Dual,
    ] {
        let mut arm_cfg = cfg.clone();
        arm_cfg.stage = Stage::Cave;
        arm_cfg.mode = mode;
        let arm_name = format!("{mode:?}").to_lowercase();
        let arm_dir = out_dir.join(&arm_name);
        let out = training::train_cave(&arm_cfg, data, &arm_dir, None)?;
        let (_s, cave) = training::load_cave(&out.checkpoint.dir)?;
        let mut mse = 0.0;
        for &qf in eval_qfs {
            mse += qf_prediction_mse(
                &cave,
                data,
                qf,
                arm_cfg.patch_size,
                arm_cfg.chroma,
                arm_cfg.seed,
            )?;
        }
        rows.push(AblationRow {
            arm: arm_name,
            qf_mse: mse / eval_qfs.len() as f64,
            psnr: f64::NAN,
            final_loss: out.final_loss,
        });
    }
    write_ablation_csv(&rows, &out_dir.join("learning_mode.csv"))?;
    Ok(rows)
}

/// The loss-set ablation (Table 5 structure): the four stage-2 loss
/// combinations, each trained briefly with a shared seed, scored by PSNR
/// against held-out pairs.
pub fn ablate_loss_set(
    cfg: &TrainConfig,
    data: &ImageStore,
    cave_ckpt: &Path,
    vae_ckpt: &Path,
    eval_qf: u8,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    let combos = [
        ("l2", LossToggles { dists: false, gan: false }),
        ("l2_gan", LossToggles { dists: false, gan: true }),
        ("l2_dists", LossToggles { dists: true, gan: false }),
        ("l2_dists_gan", LossToggles { dists: true, gan: true }),
    ];
    let mut rows = Vec::new();
    for (name, losses) in combos {
        let mut arm_cfg = cfg.clone();
        arm_cfg.stage = Stage::Osd;
        arm_cfg.losses = losses;
        let arm_dir = out_dir.join(name);
        let out = training::train_osd(&arm_cfg, data, cave_ckpt, vae_ckpt, &arm_dir, None)?;
        let models = training::load_generator(&out.checkpoint.dir, cave_ckpt)?;
        let pairs = training::eval_pairs(
            data,
            arm_cfg.patch_size,
            QualityFactor::new(eval_qf)?,
            arm_cfg.chroma,
            arm_cfg.seed,
        )?;
        let mut total = 0.0;
        for (lq, hq) in &pairs {
            let restored = models.generator.generate(lq, &models.cave)?;
            total += psnr(&restored, hq)?;
        }
        rows.push(AblationRow {
            arm: name.to_string(),
            qf_mse: f64::NAN,
            psnr: total / pairs.len() as f64,
            final_loss: out.final_loss,
        });
    }
    write_ablation_csv(&rows, &out_dir.join("loss_set.csv"))?;
    Ok(rows)
}

fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "arm,qf_mse,psnr,final_loss")?;
    for r in rows {
        writeln!(
            f,
            "{},{:.6e},{:.6e},{:.6e}",
            r.arm, r.qf_mse, r.psnr, r.final_loss
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::textured_image;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn psnr_identity_hits_cap_and_ssim_is_one() {
        let x = textured_image(24, 24, 1);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_uniform_error_matches_analytic_value() {
        let x = ImagePatch::constant(0.5, 16, 16).unwrap();
        let y = ImagePatch::constant(0.5 + 1.0 / 255.0, 16, 16).unwrap();
        let expected = 20.0 * 255.0f64.log10();
        // scalar-loop oracle on the same pair
        let mut se = 0.0f64;
        for (a, b) in x.pixels().iter().zip(y.pixels()) {
            se += ((a - b) as f64).powi(2);
        }
        let oracle = 10.0 * (1.0 / (se / x.pixels().len() as f64)).log10();
        let got = psnr(&x, &y).unwrap();
        assert!((got - expected).abs() < 1e-3, "{got} vs {expected}");
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let x = textured_image(32, 32, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let noisy = |amp: f32, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut y = x.clone();
            for yy in 0..32 {
                for xx in 0..32 {
                    for c in 0..3 {
                        let v = y.get(yy, xx, c) + rng.gen_range(-amp..amp);
                        y.set(yy, xx, c, v.clamp(0.0, 1.0));
                    }
                }
            }
            y
        };
        let p1 = psnr(&x, &noisy(0.01, &mut rng)).unwrap();
        let p2 = psnr(&x, &noisy(0.05, &mut rng)).unwrap();
        let p3 = psnr(&x, &noisy(0.1, &mut rng)).unwrap();
        assert!(p1 > p2 && p2 > p3, "{p1} {p2} {p3}");
    }

    #[test]
    fn ssim_prefers_small_shift_over_inversion() {
        let x = textured_image(24, 24, 4);
        let mut inverted = x.clone();
        let mut shifted = x.clone();
        for y in 0..24 {
            for xx in 0..24 {
                for c in 0..3 {
                    inverted.set(y, xx, c, 1.0 - x.get(y, xx, c));
                    shifted.set(y, xx, c, (x.get(y, xx, c) + 0.01).min(1.0));
                }
            }
        }
        assert!(ssim(&x, &inverted).unwrap() < ssim(&x, &shifted).unwrap());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = textured_image(16, 16, 5);
        let b = textured_image(16, 24, 5);
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn complexity_matches_hand_products() {
        let dense = count_complexity(&[LayerSpec::Dense {
            in_dim: 512,
            out_dim: 512,
            positions: 1,
        }])
        .unwrap();
        assert_eq!(dense.macs, 262_144);
        let conv = count_complexity(&[LayerSpec::Conv2d {
            kernel: 3,
            c_in: 8,
            c_out: 16,
            h_out: 32,
            w_out: 32,
        }])
        .unwrap();
        assert_eq!(conv.macs, 1_179_648);
        assert_eq!(conv.params, 3 * 3 * 8 * 16 + 16);
    }

    #[test]
    fn conv_macs_match_unrolled_scalar_count() {
        // 3x3 conv on a 4x4 output, c_in=2, c_out=3: count every multiply
        // in the naive nested loop.
        let mut mults = 0usize;
        for _oc in 0..3 {
            for _oy in 0..4 {
                for _ox in 0..4 {
                    for _ic in 0..2 {
                        for _ky in 0..3 {
                            for _kx in 0..3 {
                                mults += 1;
                            }
                        }
                    }
                }
            }
        }
        let report = count_complexity(&[LayerSpec::Conv2d {
            kernel: 3,
            c_in: 2,
            c_out: 3,
            h_out: 4,
            w_out: 4,
        }])
        .unwrap();
        assert_eq!(report.macs, mults);
    }

    #[test]
    fn conv_macs_scale_quadratically_with_side() {
        let at = |side: usize| {
            count_complexity(&[LayerSpec::Conv2d {
                kernel: 3,
                c_in: 4,
                c_out: 4,
                h_out: side,
                w_out: side,
            }])
            .unwrap()
            .macs
        };
        assert_eq!(at(16), 4 * at(8));
    }

    #[test]
    fn complexity_is_additive() {
        let a = [LayerSpec::Dense {
            in_dim: 10,
            out_dim: 20,
            positions: 2,
        }];
        let b = [LayerSpec::MatMul { m: 3, k: 4, n: 5 }];
        let both: Vec<LayerSpec> = a.iter().chain(b.iter()).cloned().collect();
        let sum = count_complexity(&a).unwrap() + count_complexity(&b).unwrap();
        assert_eq!(count_complexity(&both).unwrap(), sum);
    }

    #[test]
    fn opaque_layer_kind_rejected_by_name() {
        let err = count_complexity(&[LayerSpec::Opaque {
            kind: "softmax".into(),
        }])
        .unwrap_err();
        assert!(err.to_string().contains("softmax"));
    }

    fn blob_embeddings(n_per: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
        // three well-separated Gaussian blobs in 6-D
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for class in 0..3usize {
            for _ in 0..n_per {
                let mut v = vec![0.0f32; 6];
                for (j, vj) in v.iter_mut().enumerate() {
                    *vj = if j == class * 2 { 4.0 } else { 0.0 } + rng.gen_range(-0.5..0.5);
                }
                xs.push(v);
                ys.push(class);
            }
        }
        (xs, ys)
    }

    #[test]
    fn probe_separates_blobs_and_chance_on_shuffled_labels() {
        let (xs, ys) = blob_embeddings(30, 7);
        let res = linear_probe(&xs, &ys, 11).unwrap();
        assert!(res.test_accuracy > 0.95, "{res:?}");

        let mut shuffled = ys.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        shuffled.shuffle(&mut rng);
        let res = linear_probe(&xs, &shuffled, 11).unwrap();
        // chance level 1/3; binomial SE over the test split
        let n = res.n_test as f64;
        let se = ((1.0 / 3.0) * (2.0 / 3.0) / n).sqrt();
        assert!(
            (res.test_accuracy - 1.0 / 3.0).abs() < 3.0 * se + 1e-9,
            "{res:?} se={se}"
        );
    }

    #[test]
    fn probe_accuracy_invariant_under_rotation() {
        let (xs, ys) = blob_embeddings(25, 9);
        let base = linear_probe(&xs, &ys, 13).unwrap();

        // random rotation from QR of a Gaussian matrix
        let d = xs[0].len();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let g = DMatrix::<f64>::from_fn(d, d, |_, _| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
        });
        let qr = g.qr();
        let q = qr.q();
        let rotated: Vec<Vec<f32>> = xs
            .iter()
            .map(|x| {
                (0..d)
                    .map(|j| (0..d).map(|k| q[(j, k)] * x[k] as f64).sum::<f64>() as f32)
                    .collect()
            })
            .collect();
        let rot = linear_probe(&rotated, &ys, 13).unwrap();
        assert!(
            (base.test_accuracy - rot.test_accuracy).abs() <= 0.02 + 1e-9,
            "{} vs {}",
            base.test_accuracy,
            rot.test_accuracy
        );
    }

    #[test]
    fn probe_rejects_single_class_and_tiny_classes() {
        let (xs, _) = blob_embeddings(5, 3);
        let single = vec![0usize; xs.len()];
        assert!(linear_probe(&xs, &single, 1).is_err());
        let mut labels = vec![0usize; xs.len()];
        labels[0] = 1; // class 1 has a single sample
        assert!(linear_probe(&xs, &labels, 1).is_err());
    }

    #[test]
    fn pca_projects_line_onto_first_component() {
        // points along a fixed direction: second coordinate collapses
        let xs: Vec<Vec<f32>> = (0..10)
            .map(|i| vec![i as f32, 2.0 * i as f32, -i as f32])
            .collect();
        let coords = pca_2d(&xs).unwrap();
        for c in &coords {
            assert!(c[1].abs() < 1e-6, "{c:?}");
        }
        // spread along the first component survives
        assert!(coords.iter().any(|c| c[0].abs() > 1.0));
    }

    #[test]
    fn bar_plot_emits_expected_canvas() {
        let img = grouped_bar_plot(&[
            ("a".into(), vec![1.0, 2.0]),
            ("b".into(), vec![3.0, 0.5]),
        ])
        .unwrap();
        assert_eq!(img.height(), PLOT_H);
        // tallest bar reaches near the top
        let has_tall = (0..img.width()).any(|x| img.get(15, x, 0) < 0.99);
        assert!(has_tall);
    }
}
