//! `train`: optimize the conditional denoiser on a generated dataset.
//!
//! Targets are the domain-transform coefficients of normalized
//! high-resolution fields; conditions are the coefficients of the
//! bicubic-upsampled low-resolution fields under the same statistics. The
//! loss CSV records one row per step (`wall_ms` is the only
//! non-deterministic column). The final checkpoint carries weights, EMA
//! weights, optimizer state, and enough metadata to sample or resume
//! without the original config.

use std::io::Write as _;
use std::time::Instant;

use downwave_core::io::{read_checkpoint, read_wgf1, write_checkpoint, Checkpoint};
use downwave_core::train::{shuffled_batches, CoeffDataset, Trainer};
use downwave_core::{CoreError, PairSample, Result};

use crate::config::RunConfig;
use crate::manifest::DatasetManifest;

pub fn run(config: &RunConfig, resume: bool) -> Result<()> {
    let data_dir = &config.paths.data_dir;
    let manifest = DatasetManifest::load(data_dir)?;
    let transform = config.model.transform()?;

    // The dataset on disk, not the config's data section, is authoritative
    // for geometry; the transform/network must be compatible with it.
    let (sh, sw) = transform
        .state_dims(manifest.hr_height, manifest.hr_width)
        .map_err(|e| CoreError::Config(format!("transform vs dataset dims: {e}")))?;
    let arch = config.model.arch()?;
    let div = arch.spatial_divisor();
    if sh % div != 0 || sw % div != 0 {
        return Err(CoreError::Config(format!(
            "dataset state dims {sh}x{sw} not divisible by network divisor {div}"
        )));
    }

    let train_dir = data_dir.join("train");
    let mut pairs = Vec::with_capacity(manifest.train.len());
    for stem in &manifest.train {
        let hr = read_wgf1(&train_dir.join(format!("{stem}.hr.wgf1")))?;
        let lr = read_wgf1(&train_dir.join(format!("{stem}.lr.wgf1")))?;
        pairs.push(PairSample::new(hr, lr, manifest.factor)?);
    }
    let stats = manifest.stats;
    let dataset = CoeffDataset::from_pairs(&pairs, &stats, &transform)?;

    let mut trainer = if resume {
        let ckpt = read_checkpoint(&config.paths.checkpoint)?;
        if ckpt.transform_name != transform.name() {
            return Err(CoreError::Config(format!(
                "checkpoint was trained with transform {}, config requests {}",
                ckpt.transform_name,
                transform.name()
            )));
        }
        if ckpt.stats != stats || ckpt.factor != manifest.factor {
            return Err(CoreError::Config(
                "checkpoint statistics/factor disagree with the dataset manifest".into(),
            ));
        }
        Trainer::from_parts(
            ckpt.params,
            ckpt.adam,
            config.training.clone(),
            ckpt.schedule,
            transform.clone(),
        )?
    } else {
        Trainer::new(
            &arch,
            config.training.clone(),
            config.schedule,
            transform.clone(),
        )?
    };

    let n = dataset.len();
    let bsz = config.training.batch_size.min(n).max(1);
    let batches_per_epoch = n.div_ceil(bsz) as u64;
    // Checkpoints land on epoch boundaries, so the completed-epoch count is
    // exactly the step counter divided by batches per epoch.
    let start_epoch = trainer.step_count() / batches_per_epoch;
    let target_epochs = config.training.epochs as u64;

    let log_path = &config.paths.log;
    if let Some(parent) = log_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let fresh_log = !(resume && log_path.exists());
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(!fresh_log)
            .truncate(fresh_log)
            .write(true)
            .open(log_path)?,
    );
    if fresh_log {
        writeln!(log, "step,cond,tv,total,sigma,wall_ms")?;
    }

    for epoch in start_epoch..target_epochs {
        let mut epoch_total = 0.0;
        let mut epoch_batches = 0usize;
        for batch in shuffled_batches(n, bsz, config.training.seed, epoch) {
            let (c0, cond) = dataset.take(&batch);
            let step = trainer.step_count();
            let t0 = Instant::now();
            let b = trainer.train_step(&c0, &cond)?;
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            writeln!(
                log,
                "{step},{:.8e},{:.8e},{:.8e},{:.6},{wall_ms:.3}",
                b.cond, b.tv, b.total, b.sigma
            )?;
            epoch_total += b.total;
            epoch_batches += 1;
        }
        println!(
            "train: epoch {:>3}/{target_epochs} mean total loss {:.6}",
            epoch + 1,
            epoch_total / epoch_batches.max(1) as f64
        );
    }
    log.flush()?;

    if let Some(parent) = config.paths.checkpoint.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_checkpoint(
        &config.paths.checkpoint,
        &Checkpoint {
            params: trainer.params.clone(),
            adam: trainer.adam.clone(),
            stats,
            schedule: trainer.schedule,
            transform_name: transform.name(),
            factor: manifest.factor,
            hr_dims: (manifest.hr_height, manifest.hr_width),
            train_config: config.training.clone(),
        },
    )?;
    let echo_dir = config
        .paths
        .checkpoint
        .parent()
        .unwrap_or(std::path::Path::new("."));
    config.echo_into(echo_dir, "train")?;

    println!(
        "train: {} steps total, checkpoint at {}",
        trainer.step_count(),
        config.paths.checkpoint.display()
    );
    Ok(())
}
