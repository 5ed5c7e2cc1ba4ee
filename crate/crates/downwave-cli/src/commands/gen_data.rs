//! `gen-data`: synthesize an event-filtered paired dataset.
//!
//! High-resolution storm fields are drawn from the deterministic generator,
//! kept only when they pass the wet-fraction event filter, and coarsened by
//! block averaging to produce the matching low-resolution inputs.
//! Normalization statistics are computed over the training split alone and
//! recorded in the manifest so every later stage reuses them verbatim.

use downwave_core::grid::passes_event_filter;
use downwave_core::io::write_wgf1;
use downwave_core::rng::derive_seed;
use downwave_core::synth::synth_storm_field;
use downwave_core::{CoreError, NormStats, PairSample, Result};

use crate::config::RunConfig;
use crate::manifest::DatasetManifest;

pub fn run(config: &RunConfig) -> Result<()> {
    let d = &config.data;
    let data_dir = &config.paths.data_dir;
    let train_dir = data_dir.join("train");
    let test_dir = data_dir.join("test");
    std::fs::create_dir_all(&train_dir)?;
    std::fs::create_dir_all(&test_dir)?;

    let total = d.train_count + d.test_count;
    // Bounded rejection sampling: candidate fields come from a deterministic
    // seed sequence, so acceptance is reproducible and order-independent.
    let limit = 200 + 50 * total;
    let mut accepted: Vec<PairSample> = Vec::with_capacity(total);
    let mut candidate = 0usize;
    while accepted.len() < total {
        if candidate >= limit {
            return Err(CoreError::Config(format!(
                "event filter (fraction {}) accepted only {} of {candidate} \
                 candidate fields; need {total} — relax the filter or the \
                 generator parameters",
                d.filter_fraction,
                accepted.len()
            )));
        }
        let seed = derive_seed(d.seed, "dataset-field", candidate as u64);
        let hr = synth_storm_field(seed, d.hr_height, d.hr_width, &d.storm)?;
        candidate += 1;
        if passes_event_filter(&hr, d.filter_fraction) {
            accepted.push(PairSample::from_hr(hr, d.factor)?);
        }
    }

    let (train, test) = accepted.split_at(d.train_count);
    let stats = NormStats::from_fields(train.iter().map(|p| &p.hr))?;

    let write_split = |dir: &std::path::Path, pairs: &[PairSample]| -> Result<Vec<String>> {
        let mut stems = Vec::with_capacity(pairs.len());
        for (i, pair) in pairs.iter().enumerate() {
            let stem = format!("pair_{i:04}");
            write_wgf1(&dir.join(format!("{stem}.hr.wgf1")), &pair.hr)?;
            write_wgf1(&dir.join(format!("{stem}.lr.wgf1")), &pair.lr)?;
            stems.push(stem);
        }
        Ok(stems)
    };
    let train_stems = write_split(&train_dir, train)?;
    let test_stems = write_split(&test_dir, test)?;

    DatasetManifest {
        hr_height: d.hr_height,
        hr_width: d.hr_width,
        factor: d.factor,
        filter_fraction: d.filter_fraction,
        seed: d.seed,
        storm: d.storm.clone(),
        stats,
        train: train_stems,
        test: test_stems,
    }
    .save(data_dir)?;
    config.echo_into(data_dir, "gen-data")?;

    println!(
        "gen-data: {} train + {} test pairs ({}x{} -> {}x{}) in {} \
         [{} candidates, stats mean={:.4} std={:.4}]",
        d.train_count,
        d.test_count,
        d.hr_height,
        d.hr_width,
        d.hr_height / d.factor,
        d.hr_width / d.factor,
        data_dir.display(),
        candidate,
        stats.mean,
        stats.std
    );
    Ok(())
}
