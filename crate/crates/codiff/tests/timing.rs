use codiff::data::synthetic::textured_image;
use codiff::data::ImageStore;
use codiff::evaluation::{metric_record, psnr};
use codiff::jpeg::QualityFactor;
use codiff::objectives::DistsExtractor;
use codiff::training::{self, Stage, TrainConfig};
use candle_core::{DType, Device};
use std::path::Path;
use std::time::Instant;

#[test]
fn a6_pilot() {
    let cache = Path::new("/tmp/pilot-cache");
    std::fs::create_dir_all(cache).unwrap();
    let train: Vec<_> = (0..40).map(|i| textured_image(96, 96, i)).collect();
    let val: Vec<_> = (100..110).map(|i| textured_image(96, 96, i)).collect();
    let train = ImageStore::new(train).unwrap();
    let val = ImageStore::new(val).unwrap();

    let vae_dir = cache.join("vae");
    if !vae_dir.join("checkpoint").join("meta.json").exists() {
        let mut vcfg = TrainConfig::desk(Stage::Vae);
        vcfg.patch_size = 32;
        vcfg.iterations = 3000;
        vcfg.log_every = 100;
        let t0 = Instant::now();
        let o = training::train_vae(&vcfg, &train, &vae_dir, None).unwrap();
        println!("vae done loss {:.5} in {:.0}s", o.final_loss, t0.elapsed().as_secs_f64());
    }
    let cave_dir = cache.join("cave");
    if !cave_dir.join("checkpoint").join("meta.json").exists() {
        let mut ccfg = TrainConfig::desk(Stage::Cave);
        ccfg.patch_size = 32;
        ccfg.iterations = 400;
        ccfg.log_every = 100;
        let t0 = Instant::now();
        let o = training::train_cave(&ccfg, &train, &cave_dir, None).unwrap();
        println!("cave done loss {:.5} in {:.0}s", o.final_loss, t0.elapsed().as_secs_f64());
    }

    let tmp = tempfile::tempdir().unwrap();
    let mut ocfg = TrainConfig::desk(Stage::Osd);
    ocfg.patch_size = 32;
    ocfg.iterations = 3000;
    ocfg.learning_rate = 1e-3;
    ocfg.restore_step = 49;
    ocfg.lora_rank = 8;
    ocfg.log_every = 100;
    let t0 = Instant::now();
    let oout = training::train_osd(
        &ocfg,
        &train,
        &cave_dir.join("checkpoint"),
        &vae_dir.join("checkpoint"),
        &tmp.path().join("osd"),
        None,
    )
    .unwrap();
    println!("osd done loss {:.5} in {:.0}s", oout.final_loss, t0.elapsed().as_secs_f64());

    let models = training::load_generator(&oout.checkpoint.dir, &cave_dir.join("checkpoint")).unwrap();
    let qf = QualityFactor::new(10).unwrap();
    let pairs = training::eval_pairs(&val, 32, qf, ocfg.chroma, 999).unwrap();
    let extractor = DistsExtractor::new(17, &Device::Cpu, DType::F32).unwrap();
    let (mut p_in, mut p_out, mut d_in, mut d_out) = (0.0, 0.0, 0.0, 0.0);
    for (i, (hq, lq)) in pairs.iter().enumerate() {
        let restored = models.generator.generate(lq, &models.cave).unwrap();
        p_in += psnr(lq, hq).unwrap();
        p_out += psnr(&restored, hq).unwrap();
        d_in += metric_record(i, qf.value(), lq, hq, &extractor).unwrap().dists;
        d_out += metric_record(i, qf.value(), &restored, hq, &extractor).unwrap().dists;
    }
    let n = pairs.len() as f64;
    println!(
        "qf10: input psnr {:.2} restored psnr {:.2} | input dists {:.4} restored dists {:.4}",
        p_in / n, p_out / n, d_in / n, d_out / n
    );
}
