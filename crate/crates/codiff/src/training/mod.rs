//! Training loops for the three stages: latent autoencoder pretraining,
//! embedder dual learning, and adversarial one-step restorer fine-tuning.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cave::{loss_qf, loss_rec, CaVE, CaVEConfig};
use crate::data::ImageStore;
use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::jpeg::{jpeg_round_trip, sample_rng, ChromaSampling, QualityFactor};
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::store::ParamStore;
use crate::objectives::{
    dists, loss_gan, Discriminator, DiscriminatorConfig, DistsExtractor, LossWeights,
};
use crate::osd::{build_schedule, DiffusionSchedule, Generator, UNet, UNetConfig, Vae, VaeNet};

pub use checkpoint::{
    load_meta, load_optim, load_store, load_store_prefix, save_checkpoint, Checkpoint,
    CheckpointMeta, FORMAT_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Vae,
    Cave,
    Osd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningMode {
    Explicit,
    Implicit,
    Dual,
}

/// Stage-2 loss toggles; the four combinations reproduce the loss-ablation
/// grid (plain L2, +GAN, +DISTS, full).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossToggles {
    pub dists: bool,
    pub gan: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            dists: true,
            gan: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub patch_size: usize,
    pub mode: LearningMode,
    pub losses: LossToggles,
    pub cave: CaVEConfig,
    pub vae: crate::osd::VaeConfig,
    pub unet_base_width: usize,
    pub lora_rank: usize,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub restore_step: usize,
    pub chroma: ChromaSampling,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: small widths, 64x64 patches, CPU-friendly
    /// iteration counts.
    pub fn desk(stage: Stage) -> Self {
        let (iterations, batch_size, learning_rate, weight_decay) = match stage {
            Stage::Vae => (3000, 8, 1e-3, 0.0),
            Stage::Cave => (2000, 8, 1e-3, 0.0),
            Stage::Osd => (2000, 4, 2e-4, 1e-5),
        };
        Self {
            stage,
            iterations,
            batch_size,
            learning_rate,
            weight_decay,
            weights: LossWeights::default(),
            seed: 0,
            patch_size: 64,
            mode: LearningMode::Dual,
            losses: LossToggles::default(),
            cave: CaVEConfig::toy(),
            vae: crate::osd::VaeConfig::toy(),
            unet_base_width: 16,
            // full-rank adapters don't fit the narrow toy convolutions
            lora_rank: 4,
            schedule_steps: 1000,
            beta_start: crate::osd::schedule::DEFAULT_BETA_START,
            beta_end: crate::osd::schedule::DEFAULT_BETA_END,
            restore_step: crate::osd::schedule::DEFAULT_RESTORE_STEP,
            chroma: ChromaSampling::S420,
            checkpoint_every: 0,
            log_every: 10,
        }
    }

    /// Reference-scale settings (not runnable on a desk CPU): full widths,
    /// 256x256 patches, the published iteration counts and rates.
    pub fn paper(stage: Stage) -> Self {
        let mut cfg = Self::desk(stage);
        cfg.patch_size = 256;
        cfg.cave = CaVEConfig::full();
        cfg.vae = crate::osd::VaeConfig::full();
        cfg.unet_base_width = 128;
        cfg.lora_rank = crate::osd::DEFAULT_RANK;
        match stage {
            Stage::Vae => {
                cfg.iterations = 100_000;
                cfg.batch_size = 32;
                cfg.learning_rate = 1e-4;
            }
            Stage::Cave => {
                cfg.iterations = 200_000;
                cfg.batch_size = 128;
                cfg.learning_rate = 2e-5;
            }
            Stage::Osd => {
                cfg.iterations = 100_000;
                cfg.batch_size = 32;
                cfg.learning_rate = 5e-5;
                cfg.weight_decay = 1e-5;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::domain("iterations must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch size must be at least 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::domain("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<DiffusionSchedule> {
        build_schedule(
            self.schedule_steps,
            self.beta_start,
            self.beta_end,
            self.restore_step,
        )
    }
}

struct CsvLog {
    file: std::fs::File,
}

impl CsvLog {
    fn create(path: &Path, header: &str) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{header}")?;
        Ok(Self { file })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.file, "{}", fields.join(","))?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6e}")
}

fn check_finite(step: usize, name: &str, v: f64) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{name} = {v} at iteration {step}")));
    }
    Ok(v)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_vec0::<f64>()?)
}

/// Stacks per-sample image tensors into a (B, 3, H, W) batch.
fn batch_tensor(patches: &[&ImagePatch], device: &Device) -> Result<Tensor> {
    let mut ts = Vec::with_capacity(patches.len());
    for p in patches {
        ts.push(p.to_tensor(device, DType::F32)?);
    }
    Ok(Tensor::stack(&ts, 0)?)
}

/// Deterministic clean-crop batch for stage 0: per-sample RNG picks the
/// source image and crop offset.
fn clean_batch(
    data: &ImageStore,
    cfg: &TrainConfig,
    iteration: usize,
    device: &Device,
) -> Result<Tensor> {
    let mut crops = Vec::with_capacity(cfg.batch_size);
    for j in 0..cfg.batch_size {
        let idx = (iteration * cfg.batch_size + j) as u64;
        let mut rng = sample_rng(cfg.seed, idx);
        let img = data.get(rng.gen_range(0..data.len()));
        let top = rng.gen_range(0..=img.height() - cfg.patch_size);
        let left = rng.gen_range(0..=img.width() - cfg.patch_size);
        crops.push(img.crop(top, left, cfg.patch_size, cfg.patch_size)?);
    }
    let refs: Vec<&ImagePatch> = crops.iter().collect();
    batch_tensor(&refs, device)
}

/// Deterministic degraded batch: (lq, hq, qf) with QF uniform in [8, 95].
fn degraded_batch(
    data: &ImageStore,
    cfg: &TrainConfig,
    iteration: usize,
    device: &Device,
) -> Result<(Tensor, Tensor, Tensor)> {
    let mut lqs = Vec::with_capacity(cfg.batch_size);
    let mut hqs = Vec::with_capacity(cfg.batch_size);
    let mut qfs = Vec::with_capacity(cfg.batch_size);
    for j in 0..cfg.batch_size {
        let idx = (iteration * cfg.batch_size + j) as u64;
        let mut rng = sample_rng(cfg.seed, idx);
        let img = data.get(rng.gen_range(0..data.len()));
        let pair = crate::jpeg::synthesize_training_pair(img, cfg.patch_size, cfg.chroma, &mut rng)?;
        qfs.push(pair.qf.value() as f32);
        lqs.push(pair.lq);
        hqs.push(pair.hq);
    }
    let lq_refs: Vec<&ImagePatch> = lqs.iter().collect();
    let hq_refs: Vec<&ImagePatch> = hqs.iter().collect();
    Ok((
        batch_tensor(&lq_refs, device)?,
        batch_tensor(&hq_refs, device)?,
        Tensor::from_vec(qfs, (cfg.batch_size,), device)?,
    ))
}

fn base_meta(cfg: &TrainConfig, stage: &str, iteration: usize) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        version: FORMAT_VERSION,
        stage: stage.to_string(),
        iteration,
        config: serde_json::to_value(cfg)?,
        schedule: None,
        store_seeds: BTreeMap::new(),
        optim_steps: BTreeMap::new(),
        final_loss: None,
    })
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub final_loss: f64,
    pub log_path: PathBuf,
}

const KL_WEIGHT: f64 = 1e-6;

/// Stage 0: autoencoder pretraining on clean patches with L2 + small KL.
pub fn train_vae(
    cfg: &TrainConfig,
    data: &ImageStore,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    let device = Device::Cpu;
    let store = ParamStore::new(cfg.seed, device.clone(), DType::F32);
    let vae = VaeNet::new(&store, &cfg.vae, None)?;
    let mut optim = Adam::new(
        store.named_vars(),
        AdamConfig::adamw(cfg.learning_rate, cfg.weight_decay),
    )?;

    let mut start = 0;
    if let Some(dir) = resume {
        let meta = load_meta(dir)?;
        load_store(dir, "vae", &store)?;
        load_optim(dir, "main", &mut optim, meta.optim_steps["main"])?;
        start = meta.iteration;
    }

    let log_path = out_dir.join("train_log.csv");
    let mut log = CsvLog::create(&log_path, "step,l2,kl,total,grad_norm")?;
    let mut last = f64::NAN;
    for it in start..cfg.iterations {
        let x = clean_batch(data, cfg, it, &device)?;
        // deterministic bottleneck: sampling noise swamps the signal at
        // desk widths, so the posterior mean feeds the decoder directly
        let (mu, logvar) = vae.encode_dist(&x, true)?;
        let recon = vae.decode(&mu, true)?;
        let l2 = (recon - &x)?.sqr()?.mean_all()?;
        let kl = ((mu.sqr()? + logvar.exp()?)? - 1.0)?
            .sub(&logvar)?
            .mean_all()?
            .affine(0.5, 0.0)?;
        let total = (&l2 + (&kl * KL_WEIGHT)?)?;
        let grads = total.backward()?;
        let norm = optim.step(&grads)?;
        last = check_finite(it, "vae loss", scalar(&total)?)?;
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            log.row(&[
                it.to_string(),
                fmt(scalar(&l2)?),
                fmt(scalar(&kl)?),
                fmt(last),
                fmt(norm),
            ])?;
        }
        maybe_midpoint_checkpoint(cfg, it, out_dir, &[("vae", &store)], &[("main", &optim)], "vae")?;
    }

    let mut meta = base_meta(cfg, "vae", cfg.iterations)?;
    meta.store_seeds.insert("vae".into(), cfg.seed);
    meta.optim_steps.insert("main".into(), optim.step_count());
    meta.final_loss = Some(last);
    let ckpt = save_checkpoint(
        &out_dir.join("checkpoint"),
        &[("vae", &store)],
        &[("main", &optim)],
        &meta,
    )?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        final_loss: last,
        log_path,
    })
}

fn maybe_midpoint_checkpoint(
    cfg: &TrainConfig,
    it: usize,
    out_dir: &Path,
    stores: &[(&str, &ParamStore)],
    optims: &[(&str, &Adam)],
    stage: &str,
) -> Result<()> {
    if cfg.checkpoint_every == 0 || it == 0 || it % cfg.checkpoint_every != 0 {
        return Ok(());
    }
    let mut meta = base_meta(cfg, stage, it)?;
    for (name, store) in stores {
        meta.store_seeds.insert((*name).into(), store.seed());
    }
    for (name, optim) in optims {
        meta.optim_steps.insert((*name).into(), optim.step_count());
    }
    save_checkpoint(&out_dir.join(format!("checkpoint_{it:06}")), stores, optims, &meta)?;
    Ok(())
}

/// Stage 1: embedder training. `mode` selects explicit (QF loss only),
/// implicit (reconstruction only), or dual.
pub fn train_cave(
    cfg: &TrainConfig,
    data: &ImageStore,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    let device = Device::Cpu;
    let store = ParamStore::new(cfg.seed, device.clone(), DType::F32);
    let cave = CaVE::new(&store, &cfg.cave)?;
    let mut optim = Adam::new(store.named_vars(), AdamConfig::adam(cfg.learning_rate))?;

    let mut start = 0;
    if let Some(dir) = resume {
        let meta = load_meta(dir)?;
        load_store(dir, "cave", &store)?;
        load_optim(dir, "main", &mut optim, meta.optim_steps["main"])?;
        start = meta.iteration;
    }

    let log_path = out_dir.join("train_log.csv");
    let mut log = CsvLog::create(&log_path, "step,qf,rec,total,grad_norm")?;
    let mut last = f64::NAN;
    for it in start..cfg.iterations {
        let (lq, hq, qf) = degraded_batch(data, cfg, it, &device)?;
        let with_decoder = cfg.mode != LearningMode::Explicit;
        let features = cave.encode_opts(&lq, true, with_decoder)?;
        let (total, qf_l, rec_l) = match cfg.mode {
            LearningMode::Explicit => {
                let preds = cave.predict_qf(&features)?;
                let q = loss_qf(&preds, &qf)?;
                (q.clone(), scalar(&q)?, 0.0)
            }
            LearningMode::Implicit => {
                let recon = cave.reconstruct(&features, true)?;
                let r = loss_rec(&recon, &hq)?;
                ((&r * cfg.weights.lambda)?, 0.0, scalar(&r)?)
            }
            LearningMode::Dual => {
                let preds = cave.predict_qf(&features)?;
                let recon = cave.reconstruct(&features, true)?;
                let (t, q, r) =
                    crate::cave::loss_cave(&preds, &qf, &recon, &hq, cfg.weights.lambda)?;
                (t, scalar(&q)?, scalar(&r)?)
            }
        };
        let grads = total.backward()?;
        let norm = optim.step(&grads)?;
        last = check_finite(it, "cave loss", scalar(&total)?)?;
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            log.row(&[
                it.to_string(),
                fmt(qf_l),
                fmt(rec_l),
                fmt(last),
                fmt(norm),
            ])?;
        }
        maybe_midpoint_checkpoint(cfg, it, out_dir, &[("cave", &store)], &[("main", &optim)], "cave")?;
    }

    let mut meta = base_meta(cfg, "cave", cfg.iterations)?;
    meta.store_seeds.insert("cave".into(), cfg.seed);
    meta.optim_steps.insert("main".into(), optim.step_count());
    meta.final_loss = Some(last);
    let ckpt = save_checkpoint(
        &out_dir.join("checkpoint"),
        &[("cave", &store)],
        &[("main", &optim)],
        &meta,
    )?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        final_loss: last,
        log_path,
    })
}

/// Rebuilds an embedder from a stage-1 checkpoint; the architecture comes
/// from the stored config snapshot.
pub fn load_cave(dir: &Path) -> Result<(ParamStore, CaVE)> {
    let meta = load_meta(dir)?;
    let cfg: TrainConfig = serde_json::from_value(meta.config.clone())
        .map_err(|e| Error::Checkpoint(format!("bad config snapshot: {e}")))?;
    let store = ParamStore::new(meta.store_seeds.get("cave").copied().unwrap_or(0), Device::Cpu, DType::F32);
    let cave = CaVE::new(&store, &cfg.cave)?;
    load_store(dir, "cave", &store)?;
    Ok((store, cave))
}

/// Rebuilds the stage-0 autoencoder from its checkpoint.
pub fn load_vae(dir: &Path) -> Result<(ParamStore, crate::osd::VaeConfig)> {
    let meta = load_meta(dir)?;
    let cfg: TrainConfig = serde_json::from_value(meta.config.clone())
        .map_err(|e| Error::Checkpoint(format!("bad config snapshot: {e}")))?;
    let store = ParamStore::new(meta.store_seeds.get("vae").copied().unwrap_or(0), Device::Cpu, DType::F32);
    VaeNet::new(&store, &cfg.vae, None)?;
    load_store(dir, "vae", &store)?;
    Ok((store, cfg.vae))
}

pub struct OsdModels {
    pub gen_store: ParamStore,
    pub adapter_store: ParamStore,
    pub generator: Generator,
    pub cave_store: ParamStore,
    pub cave: CaVE,
}

/// Rebuilds the full restorer (base weights + adapters + embedder) from a
/// stage-2 checkpoint.
pub fn load_generator(osd_dir: &Path, cave_dir: &Path) -> Result<OsdModels> {
    let meta = load_meta(osd_dir)?;
    let cfg: TrainConfig = serde_json::from_value(meta.config.clone())
        .map_err(|e| Error::Checkpoint(format!("bad config snapshot: {e}")))?;
    let (cave_store, cave) = load_cave(cave_dir)?;
    let gen_store = ParamStore::new(
        meta.store_seeds.get("base").copied().unwrap_or(cfg.seed),
        Device::Cpu,
        DType::F32,
    );
    let adapter_store = ParamStore::new(cfg.seed ^ 1, Device::Cpu, DType::F32);
    let vae = VaeNet::new(&gen_store, &cfg.vae, Some((&adapter_store, cfg.lora_rank)))?;
    let unet = UNet::new(
        &gen_store,
        &UNetConfig {
            in_channels: cfg.vae.latent_channels,
            base_width: cfg.unet_base_width,
            ctx_dim: cfg.cave.embed_dim(),
        },
        Some((&adapter_store, cfg.lora_rank)),
    )?;
    load_store(osd_dir, "base", &gen_store)?;
    load_store(osd_dir, "adapters", &adapter_store)?;
    let schedule = meta
        .schedule
        .clone()
        .ok_or_else(|| Error::Checkpoint("stage-2 checkpoint lacks schedule".into()))?;
    Ok(OsdModels {
        generator: Generator {
            vae: Vae::Learned(vae),
            unet,
            schedule,
        },
        gen_store,
        adapter_store,
        cave_store,
        cave,
    })
}

/// Stage 2: adversarial one-step restorer fine-tuning. The embedder is
/// frozen; only low-rank adapters and the discriminator receive updates.
/// One generator update then one discriminator update per iteration.
pub fn train_osd(
    cfg: &TrainConfig,
    data: &ImageStore,
    cave_ckpt: &Path,
    vae_ckpt: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    let device = Device::Cpu;

    let (cave_store, cave) = load_cave(cave_ckpt)?;
    let cave_checksum = cave_store.checksum()?;

    // base weights: pretrained autoencoder + randomly initialized denoiser
    let gen_store = ParamStore::new(cfg.seed, device.clone(), DType::F32);
    let adapter_store = ParamStore::new(cfg.seed ^ 1, device.clone(), DType::F32);
    let vae = VaeNet::new(&gen_store, &cfg.vae, Some((&adapter_store, cfg.lora_rank)))?;
    // adapter-free view over the same variables, for encoding the clean
    // target through the frozen base encoder
    let vae_base = VaeNet::new(&gen_store, &cfg.vae, None)?;
    let unet = UNet::new(
        &gen_store,
        &UNetConfig {
            in_channels: cfg.vae.latent_channels,
            base_width: cfg.unet_base_width,
            ctx_dim: cfg.cave.embed_dim(),
        },
        Some((&adapter_store, cfg.lora_rank)),
    )?;
    checkpoint::load_store_prefix(vae_ckpt, "vae", &gen_store, "vae.")?;
    let base_checksum = gen_store.checksum()?;

    let disc_store = ParamStore::new(cfg.seed ^ 2, device.clone(), DType::F32);
    let disc = Discriminator::new(
        &disc_store,
        &DiscriminatorConfig::toy(cfg.vae.latent_channels),
    )?;
    let extractor = DistsExtractor::new(cfg.seed ^ 3, &device, DType::F32)?;
    let schedule = cfg.build_schedule()?;
    let generator = Generator {
        vae: Vae::Learned(vae),
        unet,
        schedule: schedule.clone(),
    };

    let mut g_optim = Adam::new(
        adapter_store.named_vars(),
        AdamConfig::adamw(cfg.learning_rate, cfg.weight_decay),
    )?;
    let mut d_optim = Adam::new(
        disc_store.named_vars(),
        AdamConfig::adamw(cfg.learning_rate, cfg.weight_decay),
    )?;

    let mut start = 0;
    if let Some(dir) = resume {
        let meta = load_meta(dir)?;
        load_store(dir, "base", &gen_store)?;
        load_store(dir, "adapters", &adapter_store)?;
        load_store(dir, "disc", &disc_store)?;
        load_optim(dir, "gen", &mut g_optim, meta.optim_steps["gen"])?;
        load_optim(dir, "disc", &mut d_optim, meta.optim_steps["disc"])?;
        start = meta.iteration;
    }

    let log_path = out_dir.join("train_log.csv");
    let mut log = CsvLog::create(&log_path, "step,l2,dists,gan_g,gan_d,total,grad_norm")?;
    let mut last = f64::NAN;
    for it in start..cfg.iterations {
        let (lq, hq, _) = degraded_batch(data, cfg, it, &device)?;
        // frozen prompt embeddings; detached so no graph reaches the embedder
        let ctx = cave.encode_opts(&lq, false, false)?.embeddings.detach();

        // generator update
        let z_hat = generator.restore_latent(&lq, &ctx, false)?;
        let pred = generator.vae.decode(&z_hat, false)?;
        let l2 = (&pred - &hq)?.sqr()?.mean_all()?;
        let mut total = l2.clone();
        let mut dists_v = 0.0;
        if cfg.losses.dists {
            let d = dists(&pred, &hq, &extractor)?;
            dists_v = scalar(&d)?;
            total = (total + (d * cfg.weights.lambda_d)?)?;
        }
        let mut gan_g = 0.0;
        if cfg.losses.gan {
            let d_fake = disc.forward(&z_hat, false)?;
            let ones = d_fake.detach();
            let (g, _) = loss_gan(&d_fake, &ones)?;
            gan_g = scalar(&g)?;
            total = (total + (g * cfg.weights.lambda_g)?)?;
        }
        let grads = total.backward()?;
        let norm = g_optim.step(&grads)?;
        last = check_finite(it, "generator loss", scalar(&total)?)?;

        // discriminator update on detached latents
        let mut gan_d = 0.0;
        if cfg.losses.gan {
            let z_fake = z_hat.detach();
            let z_real = vae_base.encode(&hq, false)?.detach();
            let d_fake = disc.forward(&z_fake, false)?;
            let d_real = disc.forward(&z_real, false)?;
            let (_, d_loss) = loss_gan(&d_fake, &d_real)?;
            gan_d = check_finite(it, "discriminator loss", scalar(&d_loss)?)?;
            let d_grads = d_loss.backward()?;
            d_optim.step(&d_grads)?;
        }

        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            log.row(&[
                it.to_string(),
                fmt(scalar(&l2)?),
                fmt(dists_v),
                fmt(gan_g),
                fmt(gan_d),
                fmt(last),
                fmt(norm),
            ])?;
        }
        maybe_midpoint_checkpoint(
            cfg,
            it,
            out_dir,
            &[
                ("base", &gen_store),
                ("adapters", &adapter_store),
                ("disc", &disc_store),
            ],
            &[("gen", &g_optim), ("disc", &d_optim)],
            "osd",
        )?;
    }

    if cave_store.checksum()? != cave_checksum {
        return Err(Error::Checkpoint(
            "embedder parameters changed during stage 2".into(),
        ));
    }
    if gen_store.checksum()? != base_checksum {
        return Err(Error::Checkpoint(
            "base generator weights changed during stage 2".into(),
        ));
    }

    let mut meta = base_meta(cfg, "osd", cfg.iterations)?;
    meta.schedule = Some(schedule);
    meta.store_seeds.insert("base".into(), cfg.seed);
    meta.store_seeds.insert("adapters".into(), cfg.seed ^ 1);
    meta.store_seeds.insert("disc".into(), cfg.seed ^ 2);
    meta.optim_steps.insert("gen".into(), g_optim.step_count());
    meta.optim_steps.insert("disc".into(), d_optim.step_count());
    meta.final_loss = Some(last);
    let ckpt = save_checkpoint(
        &out_dir.join("checkpoint"),
        &[
            ("base", &gen_store),
            ("adapters", &adapter_store),
            ("disc", &disc_store),
        ],
        &[("gen", &g_optim), ("disc", &d_optim)],
        &meta,
    )?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        final_loss: last,
        log_path,
    })
}

/// Evaluation pairs at a fixed QF from the validation images, deterministic
/// in (seed, index).
pub fn eval_pairs(
    data: &ImageStore,
    patch_size: usize,
    qf: QualityFactor,
    chroma: ChromaSampling,
    seed: u64,
) -> Result<Vec<(ImagePatch, ImagePatch)>> {
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let mut rng = sample_rng(seed, i as u64);
        let img = data.get(i);
        let size = patch_size.min(img.height()).min(img.width());
        let top = rng.gen_range(0..=img.height() - size);
        let left = rng.gen_range(0..=img.width() - size);
        let hq = img.crop(top, left, size, size)?;
        let lq = jpeg_round_trip(&hq, qf, chroma)?;
        out.push((lq, hq));
    }
    Ok(out)
}
