//! Evaluation battery over (generated, ground-truth) field pairs: pixel
//! error metrics, structural similarity, categorical skill at reflectivity
//! thresholds, high-intensity error, and empirical-quantile errors, plus
//! aggregation of a whole evaluation set into one report.
//!
//! Undefined cases (no event pixels for CSI, no high pixels for HI-MSE,
//! infinite PSNR on identical fields) are reported as sentinels and excluded
//! from aggregate means with explicit exclusion counts — never imputed.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::GridField;

/// Reflectivity thresholds (dBZ) for categorical skill scores.
pub const CSI_THRESHOLDS: [f64; 9] = [20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0];

/// Quantile ranges anchored at the climatological percentiles of 20, 40 and
/// 50 dBZ (68.3%, 93.6%, 97.5%).
pub const QUANTILE_RANGES: [(f64, f64); 3] = [(0.683, 0.936), (0.936, 0.975), (0.975, 1.0)];

/// Grid step for quantile-error integration.
pub const QUANTILE_GRID_STEP: f64 = 0.001;

// =========================================================================
// Configuration
// =========================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Dynamic-range constant L (dBZ) for PSNR and the SSIM stabilizers.
    pub max_val: f64,
    /// Side length of the uniform SSIM window.
    pub ssim_window: usize,
    /// PSNR numerator: `10·log10(MAX/MSE)` by default; setting this switches
    /// to the conventional `10·log10(MAX²/MSE)` for external comparison.
    pub psnr_squared_max: bool,
    /// High-intensity threshold τ for [`hi_mse`].
    pub hi_mse_threshold: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            max_val: 80.0,
            ssim_window: 7,
            psnr_squared_max: false,
            hi_mse_threshold: 55.0,
        }
    }
}

fn check_shapes(pred: &GridField, truth: &GridField) -> Result<()> {
    if pred.values().dim() != truth.values().dim() {
        return Err(CoreError::Dimension(format!(
            "prediction {:?} vs truth {:?}",
            pred.values().dim(),
            truth.values().dim()
        )));
    }
    Ok(())
}

// =========================================================================
// Pixel-wise metrics
// =========================================================================

pub fn mae(pred: &GridField, truth: &GridField) -> Result<f64> {
    check_shapes(pred, truth)?;
    let n = pred.values().len() as f64;
    let sum: f64 = pred
        .values()
        .iter()
        .zip(truth.values().iter())
        .map(|(&p, &t)| (p as f64 - t as f64).abs())
        .sum();
    Ok(sum / n)
}

fn mse(pred: &GridField, truth: &GridField) -> Result<f64> {
    check_shapes(pred, truth)?;
    let n = pred.values().len() as f64;
    let sum: f64 = pred
        .values()
        .iter()
        .zip(truth.values().iter())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok(sum / n)
}

pub fn rmse(pred: &GridField, truth: &GridField) -> Result<f64> {
    Ok(mse(pred, truth)?.sqrt())
}

/// `10·log10(MAX/MSE)` (or `MAX²` with `squared_max`). Identical fields give
/// the +∞ sentinel, which aggregation excludes with a count.
pub fn psnr(pred: &GridField, truth: &GridField, max_val: f64, squared_max: bool) -> Result<f64> {
    let mse = mse(pred, truth)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let num = if squared_max { max_val * max_val } else { max_val };
    Ok(10.0 * (num / mse).log10())
}

// =========================================================================
// Structural similarity
// =========================================================================

/// Mean SSIM over all fully valid uniform windows, computed as the literal
/// product of luminance, contrast and structure terms with
/// C1 = (0.01·L)², C2 = (0.03·L)², C3 = C2/2.
pub fn ssim(pred: &GridField, truth: &GridField, window: usize, max_val: f64) -> Result<f64> {
    check_shapes(pred, truth)?;
    let (h, w) = pred.values().dim();
    if window == 0 || h < window || w < window {
        return Err(CoreError::Dimension(format!(
            "field {h}x{w} smaller than SSIM window {window}"
        )));
    }
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let c3 = c2 / 2.0;
    let n = (window * window) as f64;
    let p = pred.values();
    let t = truth.values();

    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..=h - window {
        for j in 0..=w - window {
            let (mut sp, mut st, mut spp, mut stt, mut spt) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..window {
                for dj in 0..window {
                    let a = p[[i + di, j + dj]] as f64;
                    let b = t[[i + di, j + dj]] as f64;
                    sp += a;
                    st += b;
                    spp += a * a;
                    stt += b * b;
                    spt += a * b;
                }
            }
            let mu_p = sp / n;
            let mu_t = st / n;
            let var_p = (spp / n - mu_p * mu_p).max(0.0);
            let var_t = (stt / n - mu_t * mu_t).max(0.0);
            let cov = spt / n - mu_p * mu_t;
            let (sd_p, sd_t) = (var_p.sqrt(), var_t.sqrt());

            let l = (2.0 * mu_p * mu_t + c1) / (mu_p * mu_p + mu_t * mu_t + c1);
            let c = (2.0 * sd_p * sd_t + c2) / (var_p + var_t + c2);
            let s = (cov + c3) / (sd_p * sd_t + c3);
            acc += l * c * s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

// =========================================================================
// Categorical and high-intensity metrics
// =========================================================================

/// Critical success index H/(H+M+F) with strict-inequality events
/// (value > τ). `None` when neither field has any event pixel.
pub fn csi(pred: &GridField, truth: &GridField, tau: f64) -> Result<Option<f64>> {
    check_shapes(pred, truth)?;
    let (mut hits, mut misses, mut false_alarms) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.values().iter().zip(truth.values().iter()) {
        let pe = p as f64 > tau;
        let te = t as f64 > tau;
        match (pe, te) {
            (true, true) => hits += 1,
            (false, true) => misses += 1,
            (true, false) => false_alarms += 1,
            (false, false) => {}
        }
    }
    let denom = hits + misses + false_alarms;
    if denom == 0 {
        return Ok(None);
    }
    Ok(Some(hits as f64 / denom as f64))
}

/// MSE restricted to pixels where the truth exceeds τ. `None` when no pixel
/// qualifies.
pub fn hi_mse(pred: &GridField, truth: &GridField, tau: f64) -> Result<Option<f64>> {
    check_shapes(pred, truth)?;
    let mut acc = 0.0;
    let mut count = 0u64;
    for (&p, &t) in pred.values().iter().zip(truth.values().iter()) {
        if t as f64 > tau {
            let d = p as f64 - t as f64;
            acc += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(acc / count as f64))
}

// =========================================================================
// Quantile errors
// =========================================================================

/// Empirical quantile with linear interpolation on sorted values:
/// position h = q·(n−1), Q = v⌊h⌋·(1−frac) + v⌊h⌋₊₁·frac.
fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = (h.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Mean |Q_pred(q) − Q_truth(q)| over the grid q ∈ {q_lo, q_lo+δ, …, q_hi}
/// with δ = 0.001.
pub fn quantile_abs_error(
    pred: &GridField,
    truth: &GridField,
    range: (f64, f64),
) -> Result<f64> {
    let (q_lo, q_hi) = range;
    if !(0.0..=1.0).contains(&q_lo) || !(0.0..=1.0).contains(&q_hi) || q_lo >= q_hi {
        return Err(CoreError::Argument(format!(
            "quantile range must satisfy 0 ≤ lo < hi ≤ 1, got ({q_lo}, {q_hi})"
        )));
    }
    if pred.values().is_empty() || truth.values().is_empty() {
        return Err(CoreError::Argument("quantile error of an empty field".into()));
    }
    let mut p: Vec<f64> = pred.values().iter().map(|&v| v as f64).collect();
    let mut t: Vec<f64> = truth.values().iter().map(|&v| v as f64).collect();
    p.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    t.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));

    let mut acc = 0.0;
    let mut count = 0usize;
    let mut k = 0usize;
    loop {
        let q = q_lo + k as f64 * QUANTILE_GRID_STEP;
        if q > q_hi + 1e-12 {
            break;
        }
        acc += (empirical_quantile(&p, q.min(1.0)) - empirical_quantile(&t, q.min(1.0))).abs();
        count += 1;
        k += 1;
    }
    Ok(acc / count as f64)
}

// =========================================================================
// Set-level evaluation
// =========================================================================

/// Metrics for one (prediction, truth) pair. `psnr` may be the +∞ sentinel;
/// `None` marks undefined categorical/high-intensity cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub hi_mse: Option<f64>,
    /// One entry per [`CSI_THRESHOLDS`] value.
    pub csi: Vec<Option<f64>>,
    /// One entry per [`QUANTILE_RANGES`] entry.
    pub quantile_errors: Vec<f64>,
}

/// Per-pair metrics plus aggregate means with sentinel-exclusion counts.
/// Note: despite the name, hi_mse is an error — lower is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: MetricConfig,
    pub pairs: Vec<PairMetrics>,
    pub mae_mean: f64,
    pub rmse_mean: f64,
    pub ssim_mean: f64,
    pub psnr_mean: Option<f64>,
    pub psnr_excluded: usize,
    pub hi_mse_mean: Option<f64>,
    pub hi_mse_excluded: usize,
    /// Per-threshold means over pairs where the score is defined.
    pub csi_mean: Vec<Option<f64>>,
    pub csi_excluded: Vec<usize>,
    /// Mean of the defined per-threshold means — the "average CSI across all
    /// thresholds" headline number.
    pub csi_avg: Option<f64>,
    pub quantile_mean: Vec<f64>,
}

/// Evaluates every pair and aggregates. `pairs` holds (prediction, truth).
pub fn evaluate_set(pairs: &[(GridField, GridField)], config: &MetricConfig) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(CoreError::Argument("evaluate_set needs at least one pair".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for (pred, truth) in pairs {
        let csi_row = CSI_THRESHOLDS
            .iter()
            .map(|&tau| csi(pred, truth, tau))
            .collect::<Result<Vec<_>>>()?;
        let quantile_errors = QUANTILE_RANGES
            .iter()
            .map(|&r| quantile_abs_error(pred, truth, r))
            .collect::<Result<Vec<_>>>()?;
        rows.push(PairMetrics {
            mae: mae(pred, truth)?,
            rmse: rmse(pred, truth)?,
            psnr: psnr(pred, truth, config.max_val, config.psnr_squared_max)?,
            ssim: ssim(pred, truth, config.ssim_window, config.max_val)?,
            hi_mse: hi_mse(pred, truth, config.hi_mse_threshold)?,
            csi: csi_row,
            quantile_errors,
        });
    }

    let n = rows.len() as f64;
    let mae_mean = rows.iter().map(|r| r.mae).sum::<f64>() / n;
    let rmse_mean = rows.iter().map(|r| r.rmse).sum::<f64>() / n;
    let ssim_mean = rows.iter().map(|r| r.ssim).sum::<f64>() / n;

    let finite_psnr: Vec<f64> = rows.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect();
    let psnr_excluded = rows.len() - finite_psnr.len();
    let psnr_mean = (!finite_psnr.is_empty())
        .then(|| finite_psnr.iter().sum::<f64>() / finite_psnr.len() as f64);

    let defined_hi: Vec<f64> = rows.iter().filter_map(|r| r.hi_mse).collect();
    let hi_mse_excluded = rows.len() - defined_hi.len();
    let hi_mse_mean =
        (!defined_hi.is_empty()).then(|| defined_hi.iter().sum::<f64>() / defined_hi.len() as f64);

    let mut csi_mean = Vec::with_capacity(CSI_THRESHOLDS.len());
    let mut csi_excluded = Vec::with_capacity(CSI_THRESHOLDS.len());
    for k in 0..CSI_THRESHOLDS.len() {
        let defined: Vec<f64> = rows.iter().filter_map(|r| r.csi[k]).collect();
        csi_excluded.push(rows.len() - defined.len());
        csi_mean
            .push((!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64));
    }
    let defined_means: Vec<f64> = csi_mean.iter().flatten().copied().collect();
    let csi_avg = (!defined_means.is_empty())
        .then(|| defined_means.iter().sum::<f64>() / defined_means.len() as f64);

    let quantile_mean = (0..QUANTILE_RANGES.len())
        .map(|k| rows.iter().map(|r| r.quantile_errors[k]).sum::<f64>() / n)
        .collect();

    Ok(MetricReport {
        config: config.clone(),
        pairs: rows,
        mae_mean,
        rmse_mean,
        ssim_mean,
        psnr_mean,
        psnr_excluded,
        hi_mse_mean,
        hi_mse_excluded,
        csi_mean,
        csi_excluded,
        csi_avg,
        quantile_mean,
    })
}

impl MetricReport {
    /// Stable CSV rendering: one row per pair, one aggregate row, fixed
    /// column set, exclusion counts in trailing comments.
    pub fn to_csv(&self) -> String {
        fn cell(v: f64) -> String {
            if v.is_infinite() {
                "inf".into()
            } else {
                format!("{v:.6}")
            }
        }
        fn opt_cell(v: Option<f64>) -> String {
            v.map(cell).unwrap_or_default()
        }

        let mut out = String::new();
        out.push_str(&format!(
            "# quantile grid step = {QUANTILE_GRID_STEP}; hi_mse: lower is better (tau = {})\n",
            self.config.hi_mse_threshold
        ));
        out.push_str("pair,mae,rmse,psnr,ssim,hi_mse");
        for tau in CSI_THRESHOLDS {
            out.push_str(&format!(",csi_{tau:.0}"));
        }
        out.push_str(",csi_avg");
        for (lo, hi) in QUANTILE_RANGES {
            out.push_str(&format!(",qerr_{lo:.3}_{hi:.3}"));
        }
        out.push('\n');

        for (i, r) in self.pairs.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{},{}",
                cell(r.mae),
                cell(r.rmse),
                cell(r.psnr),
                cell(r.ssim),
                opt_cell(r.hi_mse)
            ));
            for v in &r.csi {
                out.push(',');
                out.push_str(&opt_cell(*v));
            }
            let defined: Vec<f64> = r.csi.iter().flatten().copied().collect();
            let pair_avg = (!defined.is_empty())
                .then(|| defined.iter().sum::<f64>() / defined.len() as f64);
            out.push(',');
            out.push_str(&opt_cell(pair_avg));
            for v in &r.quantile_errors {
                out.push(',');
                out.push_str(&cell(*v));
            }
            out.push('\n');
        }

        out.push_str(&format!(
            "mean,{},{},{},{},{}",
            cell(self.mae_mean),
            cell(self.rmse_mean),
            opt_cell(self.psnr_mean),
            cell(self.ssim_mean),
            opt_cell(self.hi_mse_mean)
        ));
        for v in &self.csi_mean {
            out.push(',');
            out.push_str(&opt_cell(*v));
        }
        out.push(',');
        out.push_str(&opt_cell(self.csi_avg));
        for v in &self.quantile_mean {
            out.push(',');
            out.push_str(&cell(*v));
        }
        out.push('\n');

        out.push_str(&format!(
            "# excluded: psnr={} hi_mse={}",
            self.psnr_excluded, self.hi_mse_excluded
        ));
        for (k, tau) in CSI_THRESHOLDS.iter().enumerate() {
            out.push_str(&format!(" csi_{tau:.0}={}", self.csi_excluded[k]));
        }
        out.push('\n');
        out
    }

    /// CSI-vs-threshold curve for external plotting.
    pub fn csi_curve_csv(&self) -> String {
        let mut out = String::from("threshold,csi_mean,defined_pairs\n");
        for (k, tau) in CSI_THRESHOLDS.iter().enumerate() {
            out.push_str(&format!(
                "{tau:.0},{},{}\n",
                self.csi_mean[k].map(|v| format!("{v:.6}")).unwrap_or_default(),
                self.pairs.len() - self.csi_excluded[k]
            ));
        }
        out
    }
}

// =========================================================================
// Tests
// =========================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array2;
    use rand::Rng;

    fn field(values: Array2<f32>) -> GridField {
        GridField::new(values, 80.0).unwrap()
    }

    fn random_field(seed: u64, h: usize, w: usize, lo: f32, hi: f32) -> GridField {
        let mut rng = stream(seed, "metric-field", 0);
        let mut a = Array2::zeros((h, w));
        a.mapv_inplace(|_| rng.gen_range(lo..hi));
        field(a)
    }

    // ---- mae / rmse / psnr ----------------------------------------------

    #[test]
    fn pixel_metrics_trivial_cases() {
        let t = random_field(1, 8, 8, 0.0, 80.0);
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);

        let zero = field(Array2::zeros((8, 8)));
        let two = field(Array2::from_elem((8, 8), 2.0));
        assert!((mae(&two, &zero).unwrap() - 2.0).abs() < 1e-12);
        assert!((rmse(&two, &zero).unwrap() - 2.0).abs() < 1e-12);

        let bad = field(Array2::zeros((8, 9)));
        assert!(mae(&two, &bad).is_err());
    }

    #[test]
    fn mae_never_exceeds_rmse() {
        for s in 0..20 {
            let a = random_field(s, 16, 16, 0.0, 80.0);
            let b = random_field(s + 100, 16, 16, 0.0, 80.0);
            assert!(mae(&a, &b).unwrap() <= rmse(&a, &b).unwrap() + 1e-12);
        }
    }

    #[test]
    fn psnr_max_numerator_default_and_flag() {
        // MSE = 1 by construction: unit offset everywhere.
        let zero = field(Array2::zeros((8, 8)));
        let one = field(Array2::ones((8, 8)));
        let p = psnr(&one, &zero, 80.0, false).unwrap();
        assert!((p - 10.0 * 80.0f64.log10()).abs() < 1e-12);
        assert!((p - 19.0309).abs() < 1e-4);
        // Conventional MAX² form.
        let p2 = psnr(&one, &zero, 80.0, true).unwrap();
        assert!((p2 - 10.0 * 6400.0f64.log10()).abs() < 1e-12);

        // MSE = 80 → 0 dB.
        let v = field(Array2::from_elem((8, 8), 80.0f32.sqrt()));
        assert!(psnr(&v, &zero, 80.0, false).unwrap().abs() < 1e-6);

        // Identical → +∞ sentinel.
        assert!(psnr(&zero, &zero, 80.0, false).unwrap().is_infinite());
    }

    // ---- ssim ------------------------------------------------------------

    /// Independent naive implementation: recompute each window from the
    /// definition with explicit mean-subtracted sums.
    fn ssim_oracle(pred: &GridField, truth: &GridField, window: usize, max_val: f64) -> f64 {
        let (h, w) = pred.values().dim();
        let c1 = (0.01 * max_val).powi(2);
        let c2 = (0.03 * max_val).powi(2);
        let c3 = c2 / 2.0;
        let n = (window * window) as f64;
        let mut vals = Vec::new();
        for i in 0..=h - window {
            for j in 0..=w - window {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for di in 0..window {
                    for dj in 0..window {
                        xs.push(pred.values()[[i + di, j + dj]] as f64);
                        ys.push(truth.values()[[i + di, j + dj]] as f64);
                    }
                }
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / n;
                let vy = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / n;
                let cov = xs
                    .iter()
                    .zip(ys.iter())
                    .map(|(x, y)| (x - mx) * (y - my))
                    .sum::<f64>()
                    / n;
                let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                let c = (2.0 * vx.sqrt() * vy.sqrt() + c2) / (vx + vy + c2);
                let s = (cov + c3) / (vx.sqrt() * vy.sqrt() + c3);
                vals.push(l * c * s);
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn ssim_identity_symmetry_and_oracle() {
        let a = random_field(3, 16, 16, 0.0, 80.0);
        let b = random_field(4, 16, 16, 0.0, 80.0);
        assert!((ssim(&a, &a, 7, 80.0).unwrap() - 1.0).abs() < 1e-9);
        let ab = ssim(&a, &b, 7, 80.0).unwrap();
        let ba = ssim(&b, &a, 7, 80.0).unwrap();
        assert!((ab - ba).abs() < 1e-9, "asymmetry {ab} vs {ba}");
        assert!((-1.0..=1.0).contains(&ab));
        assert!((ab - ssim_oracle(&a, &b, 7, 80.0)).abs() < 1e-6);
        assert!(ssim(&a, &b, 17, 80.0).is_err(), "window larger than field");
    }

    #[test]
    fn ssim_detects_anticorrelation() {
        // Zero-mean 7×7 truth vs its negation (plus a constant so values stay
        // physical): structure term is negative, so SSIM must go negative.
        let mut t = Array2::<f32>::zeros((7, 7));
        for i in 0..7 {
            for j in 0..7 {
                t[[i, j]] = if (i + j) % 2 == 0 { 30.0 } else { -30.0 };
            }
        }
        let pred = field(t.mapv(|v| -v + 40.0));
        let truth = field(t.mapv(|v| v + 40.0));
        let v = ssim(&pred, &truth, 7, 80.0).unwrap();
        assert!(v < 0.0, "anti-correlated SSIM {v}");
    }

    // ---- csi / hi-mse ------------------------------------------------------

    #[test]
    fn csi_hand_cases() {
        let all_hi = field(Array2::from_elem((4, 4), 50.0));
        assert_eq!(csi(&all_hi, &all_hi, 40.0).unwrap(), Some(1.0));

        let lo = field(Array2::from_elem((4, 4), 10.0));
        assert_eq!(csi(&lo, &all_hi, 40.0).unwrap(), Some(0.0));
        assert_eq!(csi(&lo, &lo, 40.0).unwrap(), None, "no event anywhere");

        // 2 hits, 1 miss, 1 false alarm on four pixels → 0.5.
        let pred = field(Array2::from_shape_vec((2, 2), vec![50.0, 50.0, 10.0, 50.0]).unwrap());
        let truth = field(Array2::from_shape_vec((2, 2), vec![50.0, 50.0, 50.0, 10.0]).unwrap());
        assert_eq!(csi(&pred, &truth, 40.0).unwrap(), Some(0.5));

        // Strictness: exactly τ is not an event.
        let at = field(Array2::from_elem((2, 2), 40.0));
        assert_eq!(csi(&at, &at, 40.0).unwrap(), None);
    }

    #[test]
    fn csi_improves_when_false_alarm_removed() {
        let mut rng = stream(8, "csi-mono", 0);
        for _ in 0..50 {
            let mut p = Array2::<f32>::zeros((8, 8));
            p.mapv_inplace(|_| rng.gen_range(0.0..80.0));
            let mut t = Array2::<f32>::zeros((8, 8));
            t.mapv_inplace(|_| rng.gen_range(0.0..80.0));
            let tau = 40.0;
            let pred = field(p.clone());
            let truth = field(t.clone());
            let before = csi(&pred, &truth, tau).unwrap();
            // Fix one false alarm if any exists.
            let fa = p
                .indexed_iter()
                .find(|(idx, &v)| v > tau as f32 && t[*idx] <= tau as f32)
                .map(|(idx, _)| idx);
            if let Some(idx) = fa {
                let mut fixed = p.clone();
                fixed[idx] = 0.0;
                let after = csi(&field(fixed), &truth, tau).unwrap();
                match (before, after) {
                    (Some(b), Some(a)) => assert!(a >= b, "CSI degraded {b} → {a}"),
                    _ => panic!("events exist, CSI must be defined"),
                }
            }
        }
    }

    #[test]
    fn hi_mse_cases() {
        let t60 = field(Array2::from_elem((4, 4), 60.0));
        let p58 = field(Array2::from_elem((4, 4), 58.0));
        assert_eq!(hi_mse(&p58, &t60, 55.0).unwrap(), Some(4.0));

        let low = field(Array2::from_elem((4, 4), 30.0));
        assert_eq!(hi_mse(&p58, &low, 55.0).unwrap(), None);

        // Masked double-loop oracle on a random pair.
        let a = random_field(5, 16, 16, 0.0, 80.0);
        let b = random_field(6, 16, 16, 30.0, 80.0);
        let got = hi_mse(&a, &b, 55.0).unwrap().unwrap();
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                let tv = b.values()[[i, j]] as f64;
                if tv > 55.0 {
                    let d = a.values()[[i, j]] as f64 - tv;
                    acc += d * d;
                    cnt += 1.0;
                }
            }
        }
        assert!((got - acc / cnt).abs() < 1e-9);
    }

    // ---- quantile errors --------------------------------------------------

    #[test]
    fn quantile_error_permutation_and_shift() {
        let a = random_field(7, 8, 8, 0.0, 80.0);
        // Spatial permutation: transpose has the same value multiset.
        let perm = field(a.values().t().to_owned());
        for &range in &QUANTILE_RANGES {
            assert!(quantile_abs_error(&perm, &a, range).unwrap().abs() < 1e-9);
        }
        let shifted = field(a.values().mapv(|v| v + 2.0));
        for &range in &QUANTILE_RANGES {
            let e = quantile_abs_error(&shifted, &a, range).unwrap();
            assert!((e - 2.0).abs() < 1e-5, "range {range:?}: {e}");
        }
        assert!(quantile_abs_error(&a, &a, (0.9, 0.2)).is_err());
    }

    #[test]
    fn quantile_error_matches_sort_oracle() {
        let a = random_field(9, 16, 16, 0.0, 80.0);
        let b = random_field(10, 16, 16, 0.0, 80.0);
        let got = quantile_abs_error(&a, &b, (0.683, 0.936)).unwrap();

        let mut xs: Vec<f64> = a.values().iter().map(|&v| v as f64).collect();
        let mut ys: Vec<f64> = b.values().iter().map(|&v| v as f64).collect();
        xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
        ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let quant = |v: &[f64], q: f64| -> f64 {
            let h = q * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(v.len() - 1);
            v[lo] + (v[hi] - v[lo]) * (h - lo as f64)
        };
        let mut acc = 0.0;
        let mut k = 0;
        let mut count = 0;
        loop {
            let q = 0.683 + k as f64 * 0.001;
            if q > 0.936 + 1e-12 {
                break;
            }
            acc += (quant(&xs, q) - quant(&ys, q)).abs();
            count += 1;
            k += 1;
        }
        assert!((got - acc / count as f64).abs() < 1e-9);
        assert_eq!(count, 254, "grid includes both endpoints");
    }

    // ---- evaluate_set -------------------------------------------------------

    #[test]
    fn evaluate_set_aggregates() {
        let cfg = MetricConfig::default();
        assert!(evaluate_set(&[], &cfg).is_err());

        let a = random_field(11, 16, 16, 0.0, 80.0);
        let b = random_field(12, 16, 16, 0.0, 80.0);
        let single = evaluate_set(&[(a.clone(), b.clone())], &cfg).unwrap();
        assert_eq!(single.pairs.len(), 1);
        assert_eq!(single.mae_mean, single.pairs[0].mae);
        assert_eq!(single.rmse_mean, single.pairs[0].rmse);

        // Duplicating the list leaves every aggregate unchanged.
        let doubled = evaluate_set(
            &[(a.clone(), b.clone()), (a.clone(), b.clone())],
            &cfg,
        )
        .unwrap();
        assert!((doubled.mae_mean - single.mae_mean).abs() < 1e-12);
        assert!((doubled.rmse_mean - single.rmse_mean).abs() < 1e-12);
        assert_eq!(doubled.csi_avg, single.csi_avg);

        // Identical pair contributes the PSNR sentinel and is excluded.
        let with_identical = evaluate_set(
            &[(a.clone(), b.clone()), (a.clone(), a.clone())],
            &cfg,
        )
        .unwrap();
        assert_eq!(with_identical.psnr_excluded, 1);
        assert_eq!(with_identical.psnr_mean, single.psnr_mean);

        let csv = with_identical.to_csv();
        assert!(csv.contains("pair,mae,rmse,psnr,ssim,hi_mse,csi_20"));
        assert!(csv.lines().any(|l| l.starts_with("mean,")));
        assert!(csv.contains("# excluded: psnr=1"));
        let curve = with_identical.csi_curve_csv();
        assert_eq!(curve.lines().count(), 1 + CSI_THRESHOLDS.len());
    }

    #[test]
    fn evaluate_set_matches_hand_means() {
        let cfg = MetricConfig::default();
        let trios: Vec<(GridField, GridField)> = (0..3)
            .map(|k| {
                (
                    random_field(20 + k, 16, 16, 0.0, 80.0),
                    random_field(40 + k, 16, 16, 0.0, 80.0),
                )
            })
            .collect();
        let report = evaluate_set(&trios, &cfg).unwrap();
        let hand_mae: f64 = trios.iter().map(|(p, t)| mae(p, t).unwrap()).sum::<f64>() / 3.0;
        assert!((report.mae_mean - hand_mae).abs() < 1e-12);
        let hand_ssim: f64 = trios
            .iter()
            .map(|(p, t)| ssim(p, t, 7, 80.0).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((report.ssim_mean - hand_ssim).abs() < 1e-12);
    }
}
