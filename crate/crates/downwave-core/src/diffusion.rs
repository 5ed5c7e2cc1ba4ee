//! Forward corruption, exact kernel scores, score↔denoiser conversions,
//! Tweedie one-step estimates, and the Euler–Maruyama reverse sampler.
//!
//! The forward process is the variance-preserving SDE
//! `dx = −½β(t)·x dt + √β(t) dW` whose marginal has the closed form
//! `x_t = √ᾱ(t)·x0 + √(1−ᾱ(t))·ε`. Writing s = √ᾱ and σ = √((1−ᾱ)/ᾱ) this is
//! `x_t = s·(x0 + σ·ε)`: the *scaled* variable `x_σ = x_t/s` follows the
//! constant-signal noising that the preconditioned denoiser is trained on.
//! Scores convert between the two variables as
//! `score_t(x_t) = score_σ(x_σ)/s` (chain rule through x_σ = x_t/s applied to
//! the log-density, which also picks up only an x-independent normalization).
//!
//! Everything here is generic over the domain transform — states are plain
//! channel×height×width tensors whether they hold pixels or wavelet packet
//! coefficients.

use ndarray::{Array3, Array4, ArrayView3, Axis, Dimension};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::grid::{bicubic_upsample, normalize, GridField, NormStats};
use crate::model::{Elem, ParamStore, UNet};
use crate::rng::stream;
use crate::schedule::NoiseSchedule;
use crate::wavelet::DomainTransform;

// =========================================================================
// Closed-form pieces
// =========================================================================

/// Draws from the forward marginal: `x_t = √ᾱ(t)·x0 + √(1−ᾱ(t))·noise`.
pub fn forward_sample<T: Elem, D: Dimension>(
    x0: &ndarray::Array<T, D>,
    noise: &ndarray::Array<T, D>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<ndarray::Array<T, D>> {
    if x0.shape() != noise.shape() {
        return Err(CoreError::Dimension(format!(
            "x0 shape {:?} vs noise shape {:?}",
            x0.shape(),
            noise.shape()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let a = T::of_f64(ab.sqrt());
    let b = T::of_f64((1.0 - ab).max(0.0).sqrt());
    let mut out = x0.clone();
    out.zip_mut_with(noise, |x, &n| *x = a * *x + b * n);
    Ok(out)
}

/// Score of the Gaussian forward kernel `p(x_t | x0)`:
/// `−(x_t − √ᾱ·x0)/(1−ᾱ)`.
pub fn kernel_score<T: Elem, D: Dimension>(
    x_t: &ndarray::Array<T, D>,
    x0: &ndarray::Array<T, D>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<ndarray::Array<T, D>> {
    if x_t.shape() != x0.shape() {
        return Err(CoreError::Dimension(format!(
            "x_t shape {:?} vs x0 shape {:?}",
            x_t.shape(),
            x0.shape()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let var = 1.0 - ab;
    if var <= 0.0 {
        return Err(CoreError::Argument(format!(
            "kernel score is singular at t={t} (zero variance)"
        )));
    }
    let a = T::of_f64(ab.sqrt());
    let inv = T::of_f64(1.0 / var);
    let mut out = x_t.clone();
    out.zip_mut_with(x0, |s, &x| *s = -(*s - a * x) * inv);
    Ok(out)
}

/// Converts a denoiser output to a score in the scaled variable:
/// `score_σ(x_σ) = (D − x_σ)/σ²`.
pub fn denoiser_to_score<T: Elem, D: Dimension>(
    d_out: &ndarray::Array<T, D>,
    x_sigma: &ndarray::Array<T, D>,
    sigma: f64,
) -> Result<ndarray::Array<T, D>> {
    if d_out.shape() != x_sigma.shape() {
        return Err(CoreError::Dimension(format!(
            "denoised shape {:?} vs state shape {:?}",
            d_out.shape(),
            x_sigma.shape()
        )));
    }
    if !(sigma > 0.0) {
        return Err(CoreError::Argument(format!(
            "score conversion is singular at sigma={sigma}"
        )));
    }
    let inv = T::of_f64(1.0 / (sigma * sigma));
    let mut out = d_out.clone();
    out.zip_mut_with(x_sigma, |d, &x| *d = (*d - x) * inv);
    Ok(out)
}

/// One-step posterior-mean estimate from a time-domain score:
/// `x̂0 = (x_t + (1−ᾱ)·score)/√ᾱ`.
///
/// With the kernel score this recovers x0 exactly; with a denoiser-derived
/// score it recovers the denoiser output exactly, because under σ² = (1−ᾱ)/ᾱ
/// and x_t = s·x_σ the composition collapses:
/// `(s·x_σ + (1−ᾱ)(D−x_σ)/(σ²·s))/s = x_σ + (D−x_σ)·(1−ᾱ)/(σ²ᾱ) = D`.
pub fn tweedie_estimate<T: Elem, D: Dimension>(
    x_t: &ndarray::Array<T, D>,
    score: &ndarray::Array<T, D>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<ndarray::Array<T, D>> {
    if x_t.shape() != score.shape() {
        return Err(CoreError::Dimension(format!(
            "x_t shape {:?} vs score shape {:?}",
            x_t.shape(),
            score.shape()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(CoreError::Argument(format!(
            "Tweedie estimate is singular at t={t} (ᾱ ≤ 0)"
        )));
    }
    let var = T::of_f64(1.0 - ab);
    let inv_a = T::of_f64(1.0 / ab.sqrt());
    let mut out = x_t.clone();
    out.zip_mut_with(score, |x, &s| *x = (*x + var * s) * inv_a);
    Ok(out)
}

// =========================================================================
// Reverse sampler
// =========================================================================

/// A conditional score field in the *time* variable, evaluated on a batch of
/// states at a shared time.
pub trait ScoreFn<T: Elem> {
    /// Returns `∇_x log p_t(x | condition)` with the same shape as `states`.
    fn score(&self, states: &Array4<T>, conds: &Array4<T>, t: f64) -> Result<Array4<T>>;
}

impl<T: Elem, F> ScoreFn<T> for F
where
    F: Fn(&Array4<T>, &Array4<T>, f64) -> Result<Array4<T>>,
{
    fn score(&self, states: &Array4<T>, conds: &Array4<T>, t: f64) -> Result<Array4<T>> {
        self(states, conds, t)
    }
}

/// Integrates the reverse-time SDE with Euler–Maruyama on a uniform time
/// grid, starting from a standard-normal state at t = T.
///
/// Per step i (from N down to 1) with discrete β_i = 1 − ᾱ(t_i)/ᾱ(t_{i−1}):
/// `x ← x + β_i·(x/2 + score(x, t_i)) + √β_i·z`. The final step targets
/// t = 0 exactly and omits the stochastic term so no unremovable noise is
/// added. Per-sample noise comes from RNG streams derived from
/// (seed, sample index), so results do not depend on batching or worker
/// count.
pub fn reverse_sample_batch<T: Elem, S: ScoreFn<T>>(
    score_fn: &S,
    conds: &Array4<T>,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Array4<T>> {
    if steps < 2 {
        return Err(CoreError::Argument(format!(
            "reverse sampling needs at least 2 steps, got {steps}"
        )));
    }
    let (bsz, _, _, _) = conds.dim();
    let betas = schedule.discrete_betas(steps)?;

    let mut rngs: Vec<_> = (0..bsz)
        .map(|b| stream(seed, "sampler-trajectory", b as u64))
        .collect();

    let mut x = Array4::<T>::zeros(conds.raw_dim());
    for (b, rng) in rngs.iter_mut().enumerate() {
        x.index_axis_mut(Axis(0), b)
            .mapv_inplace(|_| T::of_f64(rng.sample(StandardNormal)));
    }

    for i in (1..=steps).rev() {
        let t_i = schedule.t_total * i as f64 / steps as f64;
        let beta = betas[i - 1];
        let score = score_fn.score(&x, conds, t_i)?;
        if !score.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Divergence {
                step: steps - i + 1,
                detail: format!("non-finite score at t={t_i:.6}"),
            });
        }
        let half = T::of_f64(0.5);
        let b_t = T::of_f64(beta);
        x.zip_mut_with(&score, |xv, &sv| *xv = *xv + b_t * (*xv * half + sv));
        if i > 1 {
            let noise_scale = T::of_f64(beta.sqrt());
            for (b, rng) in rngs.iter_mut().enumerate() {
                x.index_axis_mut(Axis(0), b).mapv_inplace(|v| {
                    v + noise_scale * T::of_f64(rng.sample(StandardNormal))
                });
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Divergence {
                step: steps - i + 1,
                detail: format!("non-finite state after update at t={t_i:.6}"),
            });
        }
    }
    Ok(x)
}

/// Single-sample convenience wrapper around [`reverse_sample_batch`].
pub fn reverse_sample<T: Elem, S: ScoreFn<T>>(
    score_fn: &S,
    cond: &Array3<T>,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Array3<T>> {
    let conds = cond.clone().insert_axis(Axis(0));
    let out = reverse_sample_batch(score_fn, &conds, schedule, steps, seed)?;
    Ok(out.index_axis(Axis(0), 0).to_owned())
}

// =========================================================================
// Network-backed score
// =========================================================================

/// Adapts the preconditioned denoiser to the sampler's time-variable score
/// contract.
pub struct NetScore<'a, T: Elem> {
    pub net: &'a UNet,
    pub params: &'a ParamStore<T>,
    pub schedule: &'a NoiseSchedule,
}

impl<T: Elem> ScoreFn<T> for NetScore<'_, T> {
    fn score(&self, states: &Array4<T>, conds: &Array4<T>, t: f64) -> Result<Array4<T>> {
        // Change of variables: the sampler integrates x_t = s·(x0 + σ·ε) but
        // the denoiser sees x_σ = x_t/s, so
        //   score_t(x_t) = score_σ(x_σ)/s = (D(x_σ) − x_σ)/(σ²·s).
        let (sigma_raw, scale) = self.schedule.sigma_and_scale(t)?;
        let sigma = sigma_raw.max(crate::schedule::SIGMA_FLOOR);
        let inv_scale = T::of_f64(1.0 / scale);
        let x_sigma = states.mapv(|v| v * inv_scale);
        let bsz = states.dim().0;
        let (d, _) = self
            .net
            .denoise(self.params, self.schedule, &x_sigma, conds, &vec![sigma; bsz], false)?;
        let inv = T::of_f64(1.0 / (sigma * sigma * scale));
        let mut score = d;
        score.zip_mut_with(&x_sigma, |dv, &xv| *dv = (*dv - xv) * inv);
        Ok(score)
    }
}

// =========================================================================
// End-to-end conditional generation
// =========================================================================

/// Super-resolves a batch of coarse fields: bicubic upsample → normalize →
/// domain transform → conditional reverse diffusion → inverse transform →
/// denormalize → clip to the physical range. All fields in the batch must
/// share dimensions.
#[allow(clippy::too_many_arguments)]
pub fn downscale_batch(
    lrs: &[GridField],
    net: &UNet,
    params: &ParamStore<f32>,
    schedule: &NoiseSchedule,
    transform: &DomainTransform,
    stats: &NormStats,
    factor: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<GridField>> {
    let first = lrs.first().ok_or_else(|| {
        CoreError::Argument("downscale_batch needs at least one input field".into())
    })?;
    let (lh, lw) = (first.height(), first.width());
    let (hh, hw) = (lh * factor, lw * factor);
    let div = 1usize << transform.level();
    if hh % div != 0 || hw % div != 0 {
        return Err(CoreError::Config(format!(
            "target dims {hh}x{hw} not divisible by 2^{} for {}",
            transform.level(),
            transform.name()
        )));
    }
    let channels = transform.channels();
    if net.arch.state_channels != channels || net.arch.cond_channels != channels {
        return Err(CoreError::Config(format!(
            "model expects {}+{} channels but {} yields {channels}",
            net.arch.state_channels,
            net.arch.cond_channels,
            transform.name()
        )));
    }

    let (sh, sw) = transform.state_dims(hh, hw)?;
    let mut conds = Array4::<f32>::zeros((lrs.len(), channels, sh, sw));
    for (b, lr) in lrs.iter().enumerate() {
        if lr.height() != lh || lr.width() != lw {
            return Err(CoreError::Dimension(format!(
                "field {b} is {}x{}, batch is {lh}x{lw}",
                lr.height(),
                lr.width()
            )));
        }
        let up = bicubic_upsample(lr, factor)?;
        let coeffs = transform.forward(&normalize(&up, stats))?;
        conds.index_axis_mut(Axis(0), b).assign(&coeffs);
    }

    let score = NetScore {
        net,
        params,
        schedule,
    };
    let states = reverse_sample_batch(&score, &conds, schedule, steps, seed)?;

    let mut out = Vec::with_capacity(lrs.len());
    for (b, lr) in lrs.iter().enumerate() {
        let coeffs: ArrayView3<f32> = states.index_axis(Axis(0), b);
        let field = transform.inverse(&coeffs.to_owned(), hh, hw)?;
        let denorm = crate::grid::denormalize(&field, stats);
        let restored = GridField::new(denorm.into_values(), lr.value_max())?;
        out.push(restored.clip_physical());
    }
    Ok(out)
}

/// Single-field convenience wrapper around [`downscale_batch`].
#[allow(clippy::too_many_arguments)]
pub fn downscale(
    lr: &GridField,
    net: &UNet,
    params: &ParamStore<f32>,
    schedule: &NoiseSchedule,
    transform: &DomainTransform,
    stats: &NormStats,
    factor: usize,
    steps: usize,
    seed: u64,
) -> Result<GridField> {
    Ok(downscale_batch(
        std::slice::from_ref(lr),
        net,
        params,
        schedule,
        transform,
        stats,
        factor,
        steps,
        seed,
    )?
    .pop()
    .expect("one output per input"))
}

// =========================================================================
// Tests
// =========================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array1, Array2};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn randn2(rng: &mut impl Rng, h: usize, w: usize) -> Array2<f64> {
        let mut a = Array2::zeros((h, w));
        a.mapv_inplace(|_| rng.sample(StandardNormal));
        a
    }

    #[test]
    fn forward_sample_boundaries() {
        let s = sched();
        let mut rng = stream(1, "fwd", 0);
        let x0 = randn2(&mut rng, 4, 4);
        let eps = randn2(&mut rng, 4, 4);

        // t = 0: identity.
        let xt = forward_sample(&x0, &eps, 0.0, &s).unwrap();
        for (a, b) in xt.iter().zip(x0.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // x0 = 0, t = T: essentially pure noise.
        let zero = Array2::<f64>::zeros((4, 4));
        let xt = forward_sample(&zero, &eps, s.t_total, &s).unwrap();
        for (a, b) in xt.iter().zip(eps.iter()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        // Shape mismatch.
        let bad = Array2::<f64>::zeros((4, 5));
        assert!(forward_sample(&x0, &bad, 0.5, &s).is_err());
    }

    #[test]
    fn forward_sample_monte_carlo_variance() {
        let s = sched();
        let t = 0.5;
        let want = 1.0 - s.alpha_bar(t).unwrap();
        let mut rng = stream(2, "fwd-mc", 0);
        let n = 100_000;
        let zero = Array1::<f64>::zeros(n);
        let mut eps = Array1::<f64>::zeros(n);
        eps.mapv_inplace(|_| rng.sample(StandardNormal));
        let xt = forward_sample(&zero, &eps, t, &s).unwrap();
        let var = xt.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!(
            (var - want).abs() / want < 0.02,
            "MC variance {var} vs analytic {want}"
        );
    }

    #[test]
    fn kernel_score_mode_linearity_and_singularity() {
        let s = sched();
        let mut rng = stream(3, "ks", 0);
        let x0 = randn2(&mut rng, 3, 3);
        let t = 0.4;
        let ab = s.alpha_bar(t).unwrap();

        // At the kernel mode the score vanishes.
        let mode = x0.mapv(|v| v * ab.sqrt());
        let sc = kernel_score(&mode, &x0, t, &s).unwrap();
        assert!(sc.iter().all(|v| v.abs() < 1e-12));

        // Linearity: doubling the deviation doubles the score.
        let dev = randn2(&mut rng, 3, 3);
        let x1 = &mode + &dev;
        let x2 = &mode + &(&dev * 2.0);
        let s1 = kernel_score(&x1, &x0, t, &s).unwrap();
        let s2 = kernel_score(&x2, &x0, t, &s).unwrap();
        for (a, b) in s2.iter().zip(s1.iter()) {
            assert_abs_diff_eq!(a, &(b * 2.0), epsilon = 1e-10);
        }

        // Zero-variance singularity at t = 0.
        assert!(kernel_score(&x1, &x0, 0.0, &s).is_err());
    }

    #[test]
    fn kernel_score_matches_log_density_gradient() {
        // log p(x_t|x0) = −‖x_t − √ᾱ x0‖²/(2(1−ᾱ)) + const.
        let s = sched();
        let mut rng = stream(4, "ks-fd", 0);
        let x0 = randn2(&mut rng, 2, 2);
        let xt = randn2(&mut rng, 2, 2);
        let t = 0.7;
        let ab = s.alpha_bar(t).unwrap();
        let logp = |x: &Array2<f64>| -> f64 {
            let mut acc = 0.0;
            for (a, b) in x.iter().zip(x0.iter()) {
                let d = a - ab.sqrt() * b;
                acc += d * d;
            }
            -acc / (2.0 * (1.0 - ab))
        };
        let analytic = kernel_score(&xt, &x0, t, &s).unwrap();
        let h = 1e-6;
        for idx in 0..4 {
            let (i, j) = (idx / 2, idx % 2);
            let mut xp = xt.clone();
            xp[[i, j]] += h;
            let mut xm = xt.clone();
            xm[[i, j]] -= h;
            let fd = (logp(&xp) - logp(&xm)) / (2.0 * h);
            assert!(
                (fd - analytic[[i, j]]).abs() < 1e-4,
                "fd {fd} vs analytic {}",
                analytic[[i, j]]
            );
        }
    }

    #[test]
    fn denoiser_score_round_trips_through_tweedie() {
        let s = sched();
        let mut rng = stream(5, "rt", 0);
        for &t in &[0.05, 0.3, 0.5, 0.8, 0.99] {
            let (sigma, scale) = s.sigma_and_scale(t).unwrap();
            let x_sigma = randn2(&mut rng, 3, 3);
            let d_out = randn2(&mut rng, 3, 3);

            // Scaled-variable score, converted to the time variable.
            let score_sigma = denoiser_to_score(&d_out, &x_sigma, sigma).unwrap();
            let score_t = score_sigma.mapv(|v| v / scale);
            let x_t = x_sigma.mapv(|v| v * scale);

            let recovered = tweedie_estimate(&x_t, &score_t, t, &s).unwrap();
            for (a, b) in recovered.iter().zip(d_out.iter()) {
                assert!((a - b).abs() < 1e-5, "t={t}: {a} vs {b}");
            }
        }
        // Trivial cases and the σ=0 singularity.
        let x = randn2(&mut rng, 2, 2);
        assert!(denoiser_to_score(&x.clone(), &x, 1.0)
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-12));
        assert!(denoiser_to_score(&x, &x, 0.0).is_err());
    }

    #[test]
    fn tweedie_recovers_x0_from_kernel_score() {
        let s = sched();
        let mut rng = stream(6, "tw", 0);
        for k in 0..10 {
            let t = 0.05 + 0.09 * k as f64;
            let x0 = randn2(&mut rng, 4, 4);
            let eps = randn2(&mut rng, 4, 4);
            let xt = forward_sample(&x0, &eps, t, &s).unwrap();
            let score = kernel_score(&xt, &x0, t, &s).unwrap();
            let est = tweedie_estimate(&xt, &score, t, &s).unwrap();
            for (a, b) in est.iter().zip(x0.iter()) {
                assert!((a - b).abs() < 1e-6, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn tweedie_with_gaussian_prior_matches_posterior_mean() {
        // x0 ~ N(μ, τ²) ⇒ x_t ~ N(√ᾱ μ, ᾱτ² + 1−ᾱ) with score
        // −(x_t − √ᾱμ)/V; Tweedie must return the shrinkage posterior mean
        // μ + √ᾱτ²/V·(x_t − √ᾱμ).
        let s = sched();
        let (mu, tau) = (1.5, 0.7);
        let mut rng = stream(7, "tw-prior", 0);
        for k in 0..10 {
            let t = 0.08 + 0.09 * k as f64;
            let ab = s.alpha_bar(t).unwrap();
            let v = ab * tau * tau + (1.0 - ab);
            let xt = randn2(&mut rng, 3, 3).mapv(|z| ab.sqrt() * mu + v.sqrt() * z);
            let score = xt.mapv(|x| -(x - ab.sqrt() * mu) / v);
            let est = tweedie_estimate(&xt, &score, t, &s).unwrap();
            for (e, x) in est.iter().zip(xt.iter()) {
                let want = mu + ab.sqrt() * tau * tau / v * (x - ab.sqrt() * mu);
                assert!((e - want).abs() < 1e-5, "t={t}: {e} vs {want}");
            }
        }
    }

    #[test]
    fn reverse_sampler_is_deterministic() {
        let s = sched();
        // Standard-normal target: data N(0,1) gives marginal variance
        // ᾱ + 1 − ᾱ = 1 at every t, so score(x) = −x exactly.
        let score = |x: &Array4<f64>, _c: &Array4<f64>, _t: f64| -> Result<Array4<f64>> {
            Ok(x.mapv(|v| -v))
        };
        let conds = Array4::<f64>::zeros((3, 1, 2, 2));
        let a = reverse_sample_batch(&score, &conds, &s, 50, 99).unwrap();
        let b = reverse_sample_batch(&score, &conds, &s, 50, 99).unwrap();
        assert_eq!(a, b);
        let c = reverse_sample_batch(&score, &conds, &s, 50, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn reverse_sampler_preserves_standard_normal() {
        let s = sched();
        let score = |x: &Array4<f64>, _c: &Array4<f64>, _t: f64| -> Result<Array4<f64>> {
            Ok(x.mapv(|v| -v))
        };
        // 1024 scalar chains, 100 steps: stationary law is N(0,1).
        let conds = Array4::<f64>::zeros((1024, 1, 1, 1));
        let out = reverse_sample_batch(&score, &conds, &s, 100, 7).unwrap();
        let n = out.len() as f64;
        let mean = out.sum() / n;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((0.9..=1.1).contains(&var), "variance {var}");
    }

    #[test]
    fn reverse_sampler_reports_divergence_step() {
        let s = sched();
        let score = |x: &Array4<f64>, _c: &Array4<f64>, t: f64| -> Result<Array4<f64>> {
            // Blow up once integration passes the halfway point.
            if t < 0.5 {
                Ok(x.mapv(|_| f64::NAN))
            } else {
                Ok(x.mapv(|v| -v))
            }
        };
        let conds = Array4::<f64>::zeros((1, 1, 1, 1));
        match reverse_sample_batch(&score, &conds, &s, 10, 1) {
            Err(CoreError::Divergence { step, .. }) => {
                // t_i = i/10 < 0.5 first at i = 4, i.e. step 10−4+1 = 7.
                assert_eq!(step, 7);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        assert!(matches!(
            reverse_sample_batch(&score, &conds, &s, 1, 1),
            Err(CoreError::Argument(_))
        ));
    }

    #[test]
    fn single_sample_wrapper_matches_batch_row() {
        let s = sched();
        let score = |x: &Array4<f64>, _c: &Array4<f64>, _t: f64| -> Result<Array4<f64>> {
            Ok(x.mapv(|v| -v))
        };
        let cond = Array3::<f64>::zeros((1, 2, 2));
        let single = reverse_sample(&score, &cond, &s, 20, 5).unwrap();
        let batch = reverse_sample_batch(&score, &cond.clone().insert_axis(Axis(0)), &s, 20, 5)
            .unwrap();
        assert_eq!(single, batch.index_axis(Axis(0), 0).to_owned());
    }
}
