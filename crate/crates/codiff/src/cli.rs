//! Command-line front end: config resolution (preset -> file -> env ->
//! flags), run-stamped output directories, and command dispatch.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::data::{self, DatasetManifest, ImageStore, Split};
use crate::error::{Error, Result};
use crate::evaluation::{self, count_complexity, ComplexityReport};
use crate::image::ImagePatch;
use crate::jpeg::QualityFactor;
use crate::nn::store::ParamStore;
use crate::objectives::DistsExtractor;
use crate::training::{self, Stage, TrainConfig};

/// Environment variables `CODIFF_SEED`, `CODIFF_OUT`, `CODIFF_WORKERS`, and
/// `CODIFF_PRESET` override config-file values; command-line flags override
/// both.
pub const ENV_PREFIX: &str = "CODIFF_";

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the image corpus and its manifest.
    pub dir: PathBuf,
    pub split_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Quality factors for metric tables and the generalization analysis.
    pub qfs: Vec<u8>,
    pub patch_size: usize,
}

/// The full resolved run configuration; serialized into every run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
    pub data: DataConfig,
    pub train_vae: TrainConfig,
    pub train_cave: TrainConfig,
    pub train_osd: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            workers: 1,
            data: DataConfig {
                dir: PathBuf::from("data"),
                split_ratio: 0.9,
            },
            train_vae: TrainConfig::desk(Stage::Vae),
            train_cave: TrainConfig::desk(Stage::Cave),
            train_osd: TrainConfig::desk(Stage::Osd),
            eval: EvalConfig {
                qfs: vec![1, 5, 10, 20],
                patch_size: 64,
            },
        }
    }

    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.train_vae = TrainConfig::paper(Stage::Vae);
        cfg.train_cave = TrainConfig::paper(Stage::Cave);
        cfg.train_osd = TrainConfig::paper(Stage::Osd);
        cfg.eval.patch_size = 256;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected `desk` or `paper`)"
            ))),
        }
    }
}

/// Recursively overlays `patch` onto `base`; tables merge key-by-key,
/// everything else replaces.
fn merge_toml(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Builds the effective config: preset defaults, then the optional TOML
/// file, then environment variables, then flags. Unknown keys anywhere in
/// the file are rejected with their path.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let preset_name = cli
        .preset
        .clone()
        .or_else(|| std::env::var("CODIFF_PRESET").ok())
        .unwrap_or_else(|| "desk".to_string());
    let base = RunConfig::preset(&preset_name)?;

    let mut doc = toml::Value::try_from(&base)
        .map_err(|e| Error::Config(format!("preset serialization: {e}")))?;
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(path.clone()))?;
        let patch: toml::Value = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge_toml(&mut doc, patch);
    }
    let mut cfg: RunConfig = doc
        .try_into()
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;

    if let Ok(v) = std::env::var("CODIFF_SEED") {
        cfg.seed = v
            .parse()
            .map_err(|_| Error::Config(format!("CODIFF_SEED=`{v}` is not an integer")))?;
    }
    if let Ok(v) = std::env::var("CODIFF_OUT") {
        cfg.out = PathBuf::from(v);
    }
    if let Ok(v) = std::env::var("CODIFF_WORKERS") {
        cfg.workers = v
            .parse()
            .map_err(|_| Error::Config(format!("CODIFF_WORKERS=`{v}` is not an integer")))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if cfg.workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }

    // the global seed feeds every stage unless the file pinned one explicitly
    cfg.train_vae.seed = cfg.seed;
    cfg.train_cave.seed = cfg.seed;
    cfg.train_osd.seed = cfg.seed;
    Ok(cfg)
}

fn config_hash(cfg: &RunConfig) -> Result<String> {
    let json = serde_json::to_string(cfg)?;
    let digest = sha2::Sha256::digest(json.as_bytes());
    Ok(format!("{digest:x}")[..8].to_string())
}

/// Creates `out/<command>-<confighash>-<timestamp>`; never reuses an
/// existing directory.
pub fn create_run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let dir = cfg
        .out
        .join(format!("{command}-{}-{stamp}", config_hash(cfg)?));
    if dir.exists() {
        return Err(Error::Config(format!(
            "run directory {} already exists",
            dir.display()
        )));
    }
    std::fs::create_dir_all(&dir)?;
    let toml_text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
    std::fs::write(dir.join("resolved_config.toml"), toml_text)?;
    Ok(dir)
}

#[derive(Debug, Parser)]
#[command(
    name = "codiff",
    about = "Compression-aware one-step diffusion pipeline for JPEG artifact removal",
    after_help = "Environment overrides: CODIFF_PRESET, CODIFF_SEED, CODIFF_OUT, CODIFF_WORKERS."
)]
pub struct Cli {
    /// TOML config file overlaid on the preset defaults
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Base preset: `desk` (CPU-scale) or `paper` (published scale)
    #[arg(long, global = true)]
    pub preset: Option<String>,

    /// Global RNG seed (overrides config)
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output root for run directories
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads for per-sample evaluation
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic lossless corpus and its manifest
    SynthData {
        /// Number of images
        #[arg(long, default_value_t = 120)]
        count: usize,
        /// Square image side in pixels
        #[arg(long, default_value_t = 96)]
        size: usize,
    },
    /// Stage 0: latent autoencoder pretraining
    TrainVae {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 1: compression-aware embedder training
    TrainCave {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: one-step restorer fine-tuning
    TrainOsd {
        #[arg(long)]
        cave_ckpt: PathBuf,
        #[arg(long)]
        vae_ckpt: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Restore a single compressed image
    Restore {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        osd_ckpt: PathBuf,
        #[arg(long)]
        cave_ckpt: PathBuf,
        /// Clean reference; enables metric output
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Metric tables over the validation split at the configured QFs
    Eval {
        #[arg(long)]
        osd_ckpt: PathBuf,
        #[arg(long)]
        cave_ckpt: PathBuf,
    },
    /// Embedding separability analysis (probe accuracy + PCA export)
    AnalyzeEmbeddings {
        #[arg(long)]
        cave_ckpt: PathBuf,
    },
    /// Ablation grids over learning modes or loss sets
    Ablate {
        /// `learning_mode` or `loss_set`
        #[arg(long)]
        axis: String,
        #[arg(long)]
        cave_ckpt: Option<PathBuf>,
        #[arg(long)]
        vae_ckpt: Option<PathBuf>,
    },
    /// Analytic parameter/MAC counts for the configured models
    Complexity {
        /// Input side length for MAC counting
        #[arg(long, default_value_t = 64)]
        side: usize,
    },
}

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.data.dir.join("manifest.json")
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = manifest_path(cfg);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    DatasetManifest::load(&path)
}

fn load_images(cfg: &RunConfig, split: Split) -> Result<ImageStore> {
    ImageStore::new(load_manifest(cfg)?.load_split(split)?)
}

fn require_ckpt(path: &Path) -> Result<&Path> {
    if !path.join("meta.json").exists() {
        return Err(Error::MissingArtifact(path.join("meta.json")));
    }
    Ok(path)
}

/// Ordered parallel map over sample indices; results come back in input
/// order regardless of worker count.
pub fn par_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = workers.max(1).min(n.max(1));
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    let slots_mutex = std::sync::Mutex::new(&mut slots);
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots_mutex.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}

fn restore_patch(models: &training::OsdModels, lq: &ImagePatch) -> Result<ImagePatch> {
    models.generator.generate(lq, &models.cave)
}

fn cmd_synth_data(cfg: &RunConfig, count: usize, size: usize) -> Result<()> {
    crate::data::synthetic::write_corpus(&cfg.data.dir, count, size, size, cfg.seed)?;
    let manifest = data::ingest(&cfg.data.dir, cfg.data.split_ratio, cfg.seed)?;
    manifest.save(&manifest_path(cfg))?;
    println!(
        "wrote {} images to {} ({} train / {} val)",
        count,
        cfg.data.dir.display(),
        manifest.split_paths(Split::Train).len(),
        manifest.split_paths(Split::Val).len()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, osd_ckpt: &Path, cave_ckpt: &Path, run_dir: &Path) -> Result<()> {
    require_ckpt(osd_ckpt)?;
    require_ckpt(cave_ckpt)?;
    let models = training::load_generator(osd_ckpt, cave_ckpt)?;
    let data = load_images(cfg, Split::Val)?;
    let extractor = DistsExtractor::new(cfg.seed ^ 3, &candle_core::Device::Cpu, candle_core::DType::F32)?;

    let mut metrics = std::fs::File::create(run_dir.join("metrics.csv"))?;
    writeln!(metrics, "sample_id,qf,which,psnr,ssim,dists")?;
    let mut summary = std::fs::File::create(run_dir.join("summary.csv"))?;
    writeln!(
        summary,
        "qf,input_psnr,restored_psnr,input_ssim,restored_ssim,input_dists,restored_dists"
    )?;
    for &qf in &cfg.eval.qfs {
        let pairs = training::eval_pairs(
            &data,
            cfg.eval.patch_size,
            QualityFactor::new(qf)?,
            cfg.train_osd.chroma,
            cfg.seed,
        )?;
        let rows = par_map(pairs.len(), cfg.workers, |i| {
            let (lq, hq) = &pairs[i];
            let restored = restore_patch(&models, lq)?;
            let input = evaluation::metric_record(i, qf, lq, hq, &extractor)?;
            let output = evaluation::metric_record(i, qf, &restored, hq, &extractor)?;
            Ok((input, output))
        })?;
        let mut sums = [0.0f64; 6];
        for (input, output) in &rows {
            writeln!(
                metrics,
                "{},{},input,{:.4},{:.6},{:.6}",
                input.sample_id, qf, input.psnr, input.ssim, input.dists
            )?;
            writeln!(
                metrics,
                "{},{},restored,{:.4},{:.6},{:.6}",
                output.sample_id, qf, output.psnr, output.ssim, output.dists
            )?;
            sums[0] += input.psnr;
            sums[1] += output.psnr;
            sums[2] += input.ssim;
            sums[3] += output.ssim;
            sums[4] += input.dists;
            sums[5] += output.dists;
        }
        let n = rows.len() as f64;
        writeln!(
            summary,
            "{qf},{:.4},{:.4},{:.6},{:.6},{:.6},{:.6}",
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n,
            sums[4] / n,
            sums[5] / n
        )?;
    }
    println!("metrics written to {}", run_dir.display());
    Ok(())
}

fn cmd_restore(
    cfg: &RunConfig,
    input: &Path,
    osd_ckpt: &Path,
    cave_ckpt: &Path,
    ground_truth: Option<&Path>,
    run_dir: &Path,
) -> Result<()> {
    require_ckpt(osd_ckpt)?;
    require_ckpt(cave_ckpt)?;
    if !input.exists() {
        return Err(Error::MissingArtifact(input.to_path_buf()));
    }
    let models = training::load_generator(osd_ckpt, cave_ckpt)?;
    let lq = ImagePatch::load_png(input)?;
    // both the embedder (x8) and the autoencoder need divisible sides
    let align = 8 * models.generator.vae.spatial_factor() / gcd(8, models.generator.vae.spatial_factor());
    let h = lq.height() / align * align;
    let w = lq.width() / align * align;
    if h == 0 || w == 0 {
        return Err(Error::domain(format!(
            "input {}x{} smaller than the {align}-pixel alignment",
            lq.height(),
            lq.width()
        )));
    }
    let lq = lq.crop(0, 0, h, w)?;
    let restored = restore_patch(&models, &lq)?;
    let out_path = run_dir.join("restored.png");
    restored.save_png(&out_path)?;
    println!("restored image written to {}", out_path.display());

    if let Some(gt_path) = ground_truth {
        let gt = ImagePatch::load_png(gt_path)?.crop(0, 0, h, w)?;
        let extractor =
            DistsExtractor::new(cfg.seed ^ 3, &candle_core::Device::Cpu, candle_core::DType::F32)?;
        let record = evaluation::metric_record(0, 0, &restored, &gt, &extractor)?;
        let mut f = std::fs::File::create(run_dir.join("metrics.csv"))?;
        writeln!(f, "sample_id,qf,psnr,ssim,dists")?;
        writeln!(
            f,
            "0,,{:.4},{:.6},{:.6}",
            record.psnr, record.ssim, record.dists
        )?;
        println!(
            "psnr {:.2} dB, ssim {:.4}, dists {:.4}",
            record.psnr, record.ssim, record.dists
        );
    }
    Ok(())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn cmd_complexity(cfg: &RunConfig, side: usize, run_dir: &Path) -> Result<()> {
    if side == 0 || side % 8 != 0 {
        return Err(Error::Config("side must be a positive multiple of 8".into()));
    }
    let device = candle_core::Device::Cpu;
    let store = ParamStore::new(cfg.seed, device, candle_core::DType::F32);
    let cave = crate::cave::CaVE::new(&store, &cfg.train_cave.cave)?;
    let vae = crate::osd::VaeNet::new(&store, &cfg.train_osd.vae, None)?;
    let unet = crate::osd::UNet::new(
        &store,
        &crate::osd::UNetConfig {
            in_channels: cfg.train_osd.vae.latent_channels,
            base_width: cfg.train_osd.unet_base_width,
            ctx_dim: cfg.train_osd.cave.embed_dim(),
        },
        None,
    )?;
    let latent_side = side / cfg.train_osd.vae.spatial_factor();
    let reports = [
        ("cave", count_complexity(&cave.complexity_specs(side, side))?),
        ("vae", count_complexity(&vae.complexity_specs(side, side))?),
        (
            "unet",
            count_complexity(&unet.complexity_specs(latent_side, latent_side))?,
        ),
    ];
    let total: ComplexityReport = reports
        .iter()
        .fold(ComplexityReport { params: 0, macs: 0 }, |acc, (_, r)| acc + *r);
    let mut f = std::fs::File::create(run_dir.join("complexity.csv"))?;
    writeln!(f, "model,params,macs,input_side")?;
    for (name, r) in &reports {
        writeln!(f, "{name},{},{},{side}", r.params, r.macs)?;
        println!("{name:>6}: {:>12} params {:>16} MACs", r.params, r.macs);
    }
    writeln!(f, "total,{},{},{side}", total.params, total.macs)?;
    println!(" total: {:>12} params {:>16} MACs", total.params, total.macs);
    Ok(())
}

fn cmd_ablate(
    cfg: &RunConfig,
    axis: &str,
    cave_ckpt: Option<&Path>,
    vae_ckpt: Option<&Path>,
    run_dir: &Path,
) -> Result<()> {
    let axis: evaluation::AblationAxis = axis.parse()?;
    let data = load_images(cfg, Split::Train)?;
    match axis {
        evaluation::AblationAxis::LearningMode => {
            let rows =
                evaluation::ablate_learning_mode(&cfg.train_cave, &data, &cfg.eval.qfs, run_dir)?;
            for r in &rows {
                println!("{:>10}: qf_mse {:.4}", r.arm, r.qf_mse);
            }
        }
        evaluation::AblationAxis::LossSet => {
            let cave = cave_ckpt.ok_or_else(|| {
                Error::Config("loss_set ablation needs --cave-ckpt".into())
            })?;
            let vae = vae_ckpt
                .ok_or_else(|| Error::Config("loss_set ablation needs --vae-ckpt".into()))?;
            require_ckpt(cave)?;
            require_ckpt(vae)?;
            let rows = evaluation::ablate_loss_set(
                &cfg.train_osd,
                &data,
                cave,
                vae,
                10,
                run_dir,
            )?;
            for r in &rows {
                println!("{:>14}: psnr {:.2} dB", r.arm, r.psnr);
            }
        }
        evaluation::AblationAxis::PromptSource => {
            return Err(Error::Config(
                "prompt_source ablation requires pretrained backbone variants; \
                 use learning_mode or loss_set"
                    .into(),
            ));
        }
    }
    Ok(())
}

/// Dispatches a parsed invocation; returns the run directory for commands
/// that produce artifacts.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::SynthData { count, size } => cmd_synth_data(&cfg, *count, *size),
        Command::TrainVae { resume } => {
            let run_dir = create_run_dir(&cfg, "train-vae")?;
            let data = load_images(&cfg, Split::Train)?;
            let out = training::train_vae(&cfg.train_vae, &data, &run_dir, resume.as_deref())?;
            println!(
                "final loss {:.6}; checkpoint at {}",
                out.final_loss,
                out.checkpoint.dir.display()
            );
            Ok(())
        }
        Command::TrainCave { resume } => {
            let run_dir = create_run_dir(&cfg, "train-cave")?;
            let data = load_images(&cfg, Split::Train)?;
            let out = training::train_cave(&cfg.train_cave, &data, &run_dir, resume.as_deref())?;
            println!(
                "final loss {:.6}; checkpoint at {}",
                out.final_loss,
                out.checkpoint.dir.display()
            );
            Ok(())
        }
        Command::TrainOsd {
            cave_ckpt,
            vae_ckpt,
            resume,
        } => {
            require_ckpt(cave_ckpt)?;
            require_ckpt(vae_ckpt)?;
            let run_dir = create_run_dir(&cfg, "train-osd")?;
            let data = load_images(&cfg, Split::Train)?;
            let out = training::train_osd(
                &cfg.train_osd,
                &data,
                cave_ckpt,
                vae_ckpt,
                &run_dir,
                resume.as_deref(),
            )?;
            println!(
                "final loss {:.6}; checkpoint at {}",
                out.final_loss,
                out.checkpoint.dir.display()
            );
            Ok(())
        }
        Command::Restore {
            input,
            osd_ckpt,
            cave_ckpt,
            ground_truth,
        } => {
            let run_dir = create_run_dir(&cfg, "restore")?;
            cmd_restore(
                &cfg,
                input,
                osd_ckpt,
                cave_ckpt,
                ground_truth.as_deref(),
                &run_dir,
            )
        }
        Command::Eval {
            osd_ckpt,
            cave_ckpt,
        } => {
            let run_dir = create_run_dir(&cfg, "eval")?;
            cmd_eval(&cfg, osd_ckpt, cave_ckpt, &run_dir)
        }
        Command::AnalyzeEmbeddings { cave_ckpt } => {
            require_ckpt(cave_ckpt)?;
            let run_dir = create_run_dir(&cfg, "analyze-embeddings")?;
            let (_store, cave) = training::load_cave(cave_ckpt)?;
            let data = load_images(&cfg, Split::Val)?;
            let report = evaluation::embedding_separability(
                &cave,
                &data,
                &cfg.eval.qfs,
                cfg.eval.patch_size,
                cfg.train_cave.chroma,
                cfg.seed,
                &run_dir,
            )?;
            println!(
                "probe accuracy: train {:.3}, test {:.3} over {} classes",
                report.probe.train_accuracy, report.probe.test_accuracy, report.probe.n_classes
            );
            println!("pca export at {}", report.tsv_path.display());
            Ok(())
        }
        Command::Ablate {
            axis,
            cave_ckpt,
            vae_ckpt,
        } => {
            let run_dir = create_run_dir(&cfg, "ablate")?;
            cmd_ablate(
                &cfg,
                axis,
                cave_ckpt.as_deref(),
                vae_ckpt.as_deref(),
                &run_dir,
            )
        }
        Command::Complexity { side } => {
            let run_dir = create_run_dir(&cfg, "complexity")?;
            cmd_complexity(&cfg, *side, &run_dir)
        }
    }
}

/// Maps an error to the documented exit code: 1 for usage/config problems,
/// 2 for runtime failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}
