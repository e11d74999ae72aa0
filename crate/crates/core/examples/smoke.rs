//! Trains the codec, the image-to-video model and the interpolator on small
//! synthetic corpora and reports loss drops and timings.
//!
//! cargo run -p magicvid-core --example smoke -- [codec_steps] [codec_batch] [joint_steps] [vfi_steps] [vfi_batch]

use std::time::Instant;

use candle_core::{DType, Device};
use magicvid_core::codec::{CodecConfig, LatentCodec};
use magicvid_core::diffusion::{NoiseSchedule, ScheduleConfig};
use magicvid_core::image::{mean_abs_diff, psnr};
use magicvid_core::stages::{i2v, unconditioned_video, I2vSettings, SamplerSettings, StageGeometry};
use magicvid_core::model::{VideoModel, VideoModelConfig};
use magicvid_core::synthetic::{make_corpus, CorpusKind, CorpusShape};
use magicvid_core::trainer::{encode_corpus, joint_train, loss_drop, train_codec, CodecTrainConfig, JointTrainConfig};
use magicvid_core::vfi::{train_vfi, VfiConfig, VfiModel, VfiTrainConfig};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> magicvid_core::Result<()> {
    let dev = Device::Cpu;
    let shape = CorpusShape { size: 64, frames: 8 };

    let t = Instant::now();
    let images = make_corpus(CorpusKind::ShapesImage, 256, 1, shape)?.into_samples()?;
    let flat: Vec<_> = images.iter().map(|s| s.frames[0].clone()).collect();
    let mut codec = LatentCodec::new(CodecConfig::default(), 0, DType::F32, &dev)?;
    let cfg = CodecTrainConfig {
        steps: arg(1, 300),
        batch: arg(2, 4),
        ..Default::default()
    };
    let log = train_codec(&mut codec, &flat, &cfg)?;
    let losses: Vec<f64> = log.iter().map(|r| r.loss).collect();
    let recon = codec.decode(&codec.encode(&flat[0])?)?;
    println!(
        "codec: drop {:.3} last {:.5} psnr {:.2} scale {:.3} in {:.1}s",
        loss_drop(&losses, 10, 50),
        losses.last().unwrap(),
        psnr(&flat[0], &recon),
        codec.latent_scale(),
        t.elapsed().as_secs_f64()
    );

    let t = Instant::now();
    let videos = make_corpus(CorpusKind::ShapesVideo, 128, 2, shape)?.into_samples()?;
    let ienc = encode_corpus(&codec, &images)?;
    let venc = encode_corpus(&codec, &videos)?;
    let schedule = NoiseSchedule::linear(&ScheduleConfig::default())?;
    let model = VideoModel::new(VideoModelConfig::default(), 0, DType::F32, &dev)?;
    let jcfg = JointTrainConfig {
        steps: arg(3, 300),
        ..Default::default()
    };
    let log = joint_train(&model, &schedule, &ienc, &venc, &jcfg)?;
    let losses: Vec<f64> = log.iter().map(|r| r.loss).collect();
    println!(
        "joint: drop {:.3} first {:.4} last50 {:.4} in {:.1}s",
        loss_drop(&losses, 10, 50),
        losses[..10].iter().sum::<f64>() / 10.0,
        losses[losses.len() - 50..].iter().sum::<f64>() / 50.0,
        t.elapsed().as_secs_f64()
    );

    let t = Instant::now();
    let triplets = make_corpus(CorpusKind::Triplets, 256, 3, CorpusShape { size: 32, frames: 8 })?.into_triplets()?;
    let vfi = VfiModel::new(VfiConfig::default(), 0, DType::F32, &dev)?;
    let vcfg = VfiTrainConfig {
        steps: arg(4, 300),
        batch: arg(5, 8),
        ..Default::default()
    };
    let log = train_vfi(&vfi, &triplets, &vcfg)?;
    let l1: Vec<f64> = log.iter().map(|r| r.l1).collect();
    println!(
        "vfi: l1 drop {:.3} first {:.4} last50 {:.4} in {:.1}s",
        loss_drop(&l1, 10, 50),
        l1[..10].iter().sum::<f64>() / 10.0,
        l1[l1.len() - 50..].iter().sum::<f64>() / 50.0,
        t.elapsed().as_secs_f64()
    );

    let t = Instant::now();
    let geometry = StageGeometry::desk();
    let settings = I2vSettings {
        sampler: SamplerSettings { steps: 10, guidance: 3.0, clip_x0: None },
        ..Default::default()
    };
    let held_out = make_corpus(CorpusKind::ShapesImage, 20, 99, shape)?.into_samples()?;
    let mut wins = 0;
    for (k, s) in held_out.iter().enumerate() {
        let reference = &s.frames[0];
        let seed = 1000 + k as u64;
        let cond = i2v(&model, &codec, &schedule, reference, &s.caption, seed, &geometry, &settings)?;
        let unc = unconditioned_video(&model, &codec, &schedule, &s.caption, seed, &geometry, &settings.sampler)?;
        let a = mean_abs_diff(&codec.decode(&cond.frame(0)?)?, reference);
        let b = mean_abs_diff(&codec.decode(&unc.frame(0)?)?, reference);
        wins += (a < b) as usize;
        println!("  pair {k}: cond {a:.4} uncond {b:.4}");
    }
    println!("affinity: {wins}/20 in {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
