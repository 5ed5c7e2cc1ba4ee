//! Deterministic synthetic storm-field generator.
//!
//! Stands in for archived radar composites at desk scale. Each field is a
//! sum of large-scale anisotropic Gaussian rain bands and compact
//! exponential convective cells, modulated by multiplicative log-normal
//! texture, floored to create realistic dry regions, and clipped to the
//! physical range. The large-scale structure survives coarsening, so a
//! conditional model has genuine signal to learn, while cell interiors and
//! texture carry the sharp gradients that plain interpolation cannot
//! recover.
//!
//! All randomness comes from a single ChaCha stream seeded per field, so
//! generation is bit-reproducible and order-independent.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::grid::GridField;
use crate::rng;

/// Tunable knobs of the storm generator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct StormParams {
    /// Inclusive range for the number of large-scale rain bands.
    pub bands: (usize, usize),
    /// Inclusive range for the number of compact convective cells.
    pub cells: (usize, usize),
    /// Peak amplitude range for bands (dBZ).
    pub band_amplitude: (f32, f32),
    /// Peak amplitude range for cells (dBZ).
    pub cell_amplitude: (f32, f32),
    /// e-folding radius range for cells (pixels).
    pub cell_radius: (f32, f32),
    /// Standard deviation of the log-normal multiplicative texture.
    pub texture_sigma: f32,
    /// Reflectivity subtracted before clamping at zero; carves dry regions.
    pub zero_floor: f32,
    /// When positive, the floor adapts so at least this fraction of pixels
    /// stays non-zero (provided the raw field has any mass at all).
    pub min_nonzero_fraction: f32,
    /// Physical ceiling (dBZ).
    pub value_max: f32,
}

impl Default for StormParams {
    fn default() -> Self {
        Self {
            bands: (1, 2),
            cells: (3, 6),
            band_amplitude: (14.0, 30.0),
            cell_amplitude: (26.0, 50.0),
            cell_radius: (2.5, 6.0),
            texture_sigma: 0.20,
            zero_floor: 7.0,
            min_nonzero_fraction: 0.5,
            value_max: crate::grid::DEFAULT_VALUE_MAX,
        }
    }
}

impl StormParams {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.bands.0 > self.bands.1 || self.cells.0 > self.cells.1 {
            return Err("count ranges must be (lo, hi) with lo <= hi".into());
        }
        for (name, (lo, hi)) in [
            ("band_amplitude", self.band_amplitude),
            ("cell_amplitude", self.cell_amplitude),
            ("cell_radius", self.cell_radius),
        ] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                return Err(format!("{name} range must satisfy 0 <= lo <= hi"));
            }
        }
        if !(self.texture_sigma >= 0.0 && self.texture_sigma.is_finite()) {
            return Err("texture_sigma must be non-negative".into());
        }
        if !(self.zero_floor >= 0.0 && self.zero_floor.is_finite()) {
            return Err("zero_floor must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.min_nonzero_fraction) {
            return Err("min_nonzero_fraction must lie in [0, 1]".into());
        }
        if !(self.value_max > 0.0 && self.value_max.is_finite()) {
            return Err("value_max must be positive".into());
        }
        Ok(())
    }
}

/// Samples uniformly from an inclusive integer range.
fn draw_count(rng: &mut impl Rng, range: (usize, usize)) -> usize {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..=range.1)
    }
}

fn draw_uniform(rng: &mut impl Rng, range: (f32, f32)) -> f32 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Generates one storm field, deterministic in `seed`.
pub fn synth_storm_field(
    seed: u64,
    height: usize,
    width: usize,
    params: &StormParams,
) -> Result<GridField> {
    if height < 16 || width < 16 {
        return Err(CoreError::Dimension(format!(
            "generator needs dims >= 16, got {height}x{width}"
        )));
    }
    params.validate().map_err(CoreError::Argument)?;
    let mut rng = rng::stream(seed, "storm-field", 0);
    let scale = height.min(width) as f32;
    let mut raw = Array2::<f32>::zeros((height, width));

    // --- Large-scale anisotropic rain bands -----------------------------
    let n_bands = draw_count(&mut rng, params.bands);
    for _ in 0..n_bands {
        let cy = rng.gen_range(0.0..height as f32);
        let cx = rng.gen_range(0.0..width as f32);
        let theta = rng.gen_range(0.0..std::f32::consts::PI);
        let sig_along = scale * rng.gen_range(0.25..0.50);
        let sig_across = scale * rng.gen_range(0.06..0.15);
        let amp = draw_uniform(&mut rng, params.band_amplitude);
        let (sin_t, cos_t) = theta.sin_cos();
        for i in 0..height {
            for j in 0..width {
                let dy = i as f32 - cy;
                let dx = j as f32 - cx;
                let along = dx * cos_t + dy * sin_t;
                let across = -dx * sin_t + dy * cos_t;
                let q = (along / sig_along).powi(2) + (across / sig_across).powi(2);
                raw[[i, j]] += amp * (-0.5 * q).exp();
            }
        }
    }

    // --- Compact convective cells (sharp exponential domes) -------------
    let n_cells = draw_count(&mut rng, params.cells);
    for _ in 0..n_cells {
        let cy = rng.gen_range(0.0..height as f32);
        let cx = rng.gen_range(0.0..width as f32);
        let radius = draw_uniform(&mut rng, params.cell_radius).max(0.5);
        let amp = draw_uniform(&mut rng, params.cell_amplitude);
        // Cells decay fast; only touch a bounded neighborhood.
        let reach = (6.0 * radius).ceil() as isize;
        let (ci, cj) = (cy.round() as isize, cx.round() as isize);
        for i in (ci - reach).max(0)..(ci + reach + 1).min(height as isize) {
            for j in (cj - reach).max(0)..(cj + reach + 1).min(width as isize) {
                let dy = i as f32 - cy;
                let dx = j as f32 - cx;
                let d = (dx * dx + dy * dy).sqrt();
                raw[[i as usize, j as usize]] += amp * (-d / radius).exp();
            }
        }
    }

    // --- Multiplicative log-normal texture -------------------------------
    if params.texture_sigma > 0.0 {
        let sigma = params.texture_sigma;
        let noise = Array2::<f32>::from_shape_fn((height, width), |_| {
            let z: f32 = StandardNormal.sample(&mut rng);
            sigma * z
        });
        // 3x3 box smoothing (replicated borders) gives the texture a short
        // correlation length; averaging 9 iid draws shrinks the variance to
        // sigma^2/9, which the mean-one correction below accounts for.
        let smoothed_var = sigma * sigma / 9.0;
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        for i in 0..height {
            for j in 0..width {
                let mut acc = 0.0f32;
                for di in -1..=1isize {
                    for dj in -1..=1isize {
                        acc += noise[[clamp(i as isize + di, height), clamp(j as isize + dj, width)]];
                    }
                }
                let ln = acc / 9.0 - 0.5 * smoothed_var;
                raw[[i, j]] *= ln.exp();
            }
        }
    }

    // --- Dry-region floor -------------------------------------------------
    let mut floor = params.zero_floor;
    let raw_max = raw.iter().cloned().fold(0.0f32, f32::max);
    if params.min_nonzero_fraction > 0.0 && raw_max > 0.0 {
        // k-th largest raw value that must stay strictly above the floor.
        let n = height * width;
        let k = ((n as f32 * params.min_nonzero_fraction).ceil() as usize).clamp(1, n);
        let mut sorted: Vec<f32> = raw.iter().cloned().collect();
        sorted.sort_unstable_by(|a, b| b.total_cmp(a));
        let kth = sorted[k - 1];
        if kth > 0.0 {
            // Leave a small gap so the k-th pixel stays strictly positive.
            floor = floor.min(0.95 * kth);
        } else {
            floor = 0.0;
        }
    }
    let value_max = params.value_max;
    let out = raw.mapv(|v| (v - floor).clamp(0.0, value_max));
    GridField::new(out, value_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::passes_event_filter;

    #[test]
    fn same_seed_is_bit_identical() {
        let p = StormParams::default();
        let a = synth_storm_field(99, 32, 32, &p).unwrap();
        let b = synth_storm_field(99, 32, 32, &p).unwrap();
        assert_eq!(a.values(), b.values());
        let c = synth_storm_field(100, 32, 32, &p).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn zero_components_give_all_zero_field() {
        let p = StormParams {
            bands: (0, 0),
            cells: (0, 0),
            min_nonzero_fraction: 0.0,
            ..StormParams::default()
        };
        let f = synth_storm_field(3, 16, 16, &p).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_params_respect_range_and_wet_fraction() {
        let p = StormParams::default();
        let mut filtered = 0usize;
        let trials = 200;
        for seed in 0..trials {
            let f = synth_storm_field(seed, 64, 64, &p).unwrap();
            assert!(f.is_physical(), "values must stay in [0, value_max]");
            if passes_event_filter(&f, 0.5) {
                filtered += 1;
            }
        }
        assert!(
            filtered as f32 >= 0.9 * trials as f32,
            "only {filtered}/{trials} fields reached 50% wet fraction"
        );
    }

    #[test]
    fn small_dims_are_rejected() {
        let p = StormParams::default();
        assert!(synth_storm_field(0, 8, 32, &p).is_err());
    }
}
