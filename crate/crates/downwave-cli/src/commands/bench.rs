//! `bench`: wall-time comparison of the domain transforms.
//!
//! All three configurations (identity, haar-1, haar-2) run the identical
//! sampler with identical stage widths and step counts on the same inputs;
//! only the transform and its implied channel/resolution trade-off differ.
//! Weights are randomly initialized — wall time does not depend on their
//! values — so benchmarking needs no trained checkpoints.

use std::fmt::Write as _;
use std::time::Instant;

use downwave_core::grid::block_average_downsample;
use downwave_core::model::DenoiserParams;
use downwave_core::rng::derive_seed;
use downwave_core::synth::synth_storm_field;
use downwave_core::{diffusion, DomainTransform, GridField, NormStats, Result};

use crate::config::RunConfig;

/// Timing summary for one transform configuration.
#[derive(Debug, Clone)]
pub struct BenchResult {
    pub transform: String,
    pub parameters: usize,
    pub repetitions: usize,
    pub mean_s: f64,
    pub std_s: f64,
    /// identity mean time / this mean time (1.0 for identity itself).
    pub speedup_vs_identity: f64,
}

/// Times `repetitions` full sampling runs for one transform; the first,
/// untimed run warms caches and the allocator.
fn time_transform(
    config: &RunConfig,
    transform: &DomainTransform,
    lrs: &[GridField],
) -> Result<(usize, Vec<f64>)> {
    let b = &config.bench;
    let arch = config.model.arch_for(transform)?;
    let (net, params) = DenoiserParams::init(&arch, b.seed)?;
    let stats = NormStats::new(0.0, 1.0)?;
    let factor = config.data.factor;

    let run = |seed: u64| -> Result<f64> {
        let t0 = Instant::now();
        let out = diffusion::downscale_batch(
            lrs,
            &net,
            &params.ema,
            &config.schedule,
            transform,
            &stats,
            factor,
            b.steps,
            seed,
        )?;
        let dt = t0.elapsed().as_secs_f64();
        debug_assert_eq!(out.len(), lrs.len());
        Ok(dt)
    };

    run(derive_seed(b.seed, "bench-warmup", 0))?;
    let times = (0..b.repetitions)
        .map(|r| run(derive_seed(b.seed, "bench-rep", r as u64)))
        .collect::<Result<Vec<f64>>>()?;
    Ok((params.count_params(), times))
}

pub fn measure(config: &RunConfig) -> Result<Vec<BenchResult>> {
    let b = &config.bench;
    let factor = config.data.factor;

    // One shared input batch: HR fields from the generator, coarsened to LR.
    let lrs = (0..b.batch)
        .map(|i| {
            let seed = derive_seed(b.seed, "bench-field", i as u64);
            let hr = synth_storm_field(seed, b.size, b.size, &config.data.storm)?;
            block_average_downsample(&hr, factor)
        })
        .collect::<Result<Vec<GridField>>>()?;

    let mut results = Vec::new();
    for name in ["identity", "haar-1", "haar-2"] {
        let transform = DomainTransform::parse(name)?;
        let (parameters, times) = time_transform(config, &transform, &lrs)?;
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        results.push(BenchResult {
            transform: name.to_string(),
            parameters,
            repetitions: times.len(),
            mean_s: mean,
            std_s: var.sqrt(),
            speedup_vs_identity: f64::NAN, // filled below
        });
    }
    let identity_mean = results[0].mean_s;
    for r in &mut results {
        r.speedup_vs_identity = identity_mean / r.mean_s;
    }
    Ok(results)
}

pub fn to_csv(results: &[BenchResult]) -> String {
    let mut out = String::from(
        "transform,parameters,repetitions,mean_s,std_s,speedup_vs_identity\n",
    );
    for r in results {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.4}",
            r.transform, r.parameters, r.repetitions, r.mean_s, r.std_s, r.speedup_vs_identity
        )
        .expect("string write");
    }
    out
}

pub fn run(config: &RunConfig) -> Result<()> {
    let results = measure(config)?;
    let path = &config.paths.bench_report;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, to_csv(&results))?;
    let echo_dir = path.parent().unwrap_or(std::path::Path::new("."));
    config.echo_into(echo_dir, "bench")?;

    for r in &results {
        println!(
            "bench: {:<9} {:>9} params  {:.3}s ± {:.3}s  ({:.2}x vs identity)",
            r.transform, r.parameters, r.mean_s, r.std_s, r.speedup_vs_identity
        );
    }
    println!("bench: report at {}", path.display());
    Ok(())
}
