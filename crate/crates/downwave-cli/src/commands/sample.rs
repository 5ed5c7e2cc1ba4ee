//! `sample`: super-resolve low-resolution fields with a trained checkpoint.
//!
//! Inputs are processed in deterministic name order and batched for the
//! sampler; each batch draws noise from its own derived seed, so a run is
//! fully determined by the configuration's seed and the input file set.
//! Sampling always uses the EMA weights.

use downwave_core::io::{read_checkpoint, read_wgf1, write_pgm, write_wgf1};
use downwave_core::rng::derive_seed;
use downwave_core::{diffusion, CoreError, DomainTransform, Result};

use crate::commands::list_with_suffix;
use crate::config::RunConfig;

pub fn run(config: &RunConfig) -> Result<()> {
    let ckpt = read_checkpoint(&config.paths.checkpoint)?;
    let transform = config.model.transform()?;
    if transform.name() != ckpt.transform_name {
        return Err(CoreError::Config(format!(
            "config transform {} does not match checkpoint transform {}",
            transform.name(),
            ckpt.transform_name
        )));
    }
    let transform = DomainTransform::parse(&ckpt.transform_name)?;
    let net = ckpt.params.rebuild_net()?;

    let input_dir = config
        .paths
        .input_dir
        .clone()
        .unwrap_or_else(|| config.paths.data_dir.join("test"));
    // Prefer explicitly marked low-resolution files; fall back to any grid
    // file so externally produced inputs work too.
    let mut inputs = list_with_suffix(&input_dir, ".lr.wgf1")?;
    if inputs.is_empty() {
        inputs = list_with_suffix(&input_dir, ".wgf1")?;
    }
    if inputs.is_empty() {
        return Err(CoreError::Config(format!(
            "no .wgf1 inputs in {}",
            input_dir.display()
        )));
    }

    let (hh, hw) = ckpt.hr_dims;
    let mut fields = Vec::with_capacity(inputs.len());
    for (stem, path) in &inputs {
        let lr = read_wgf1(path)?;
        if lr.height() * ckpt.factor != hh || lr.width() * ckpt.factor != hw {
            return Err(CoreError::Config(format!(
                "{stem}: input {}x{} times factor {} does not give the \
                 checkpoint's {hh}x{hw} target",
                lr.height(),
                lr.width(),
                ckpt.factor
            )));
        }
        fields.push(lr);
    }

    let out_dir = &config.paths.output_dir;
    std::fs::create_dir_all(out_dir)?;
    let bsz = config.sampling.batch.max(1);
    for (k, chunk) in fields.chunks(bsz).enumerate() {
        let seed = derive_seed(config.sampling.seed, "sample-batch", k as u64);
        let outputs = diffusion::downscale_batch(
            chunk,
            &net,
            &ckpt.params.ema,
            &ckpt.schedule,
            &transform,
            &ckpt.stats,
            ckpt.factor,
            config.sampling.steps,
            seed,
        )?;
        for (i, field) in outputs.iter().enumerate() {
            let stem = &inputs[k * bsz + i].0;
            write_wgf1(&out_dir.join(format!("{stem}.sr.wgf1")), field)?;
            write_pgm(&out_dir.join(format!("{stem}.sr.pgm")), field)?;
        }
    }
    config.echo_into(out_dir, "sample")?;

    println!(
        "sample: {} fields ({}x{} -> {hh}x{hw}, {} steps, {}) in {}",
        fields.len(),
        hh / ckpt.factor,
        hw / ckpt.factor,
        config.sampling.steps,
        transform.name(),
        out_dir.display()
    );
    Ok(())
}
