//! Noise/time parameterization of the variance-preserving diffusion.
//!
//! The forward process `dx = −½β(t)x dt + √β(t) dW` has the closed-form
//! marginal `x_t = √ᾱ(t)·x0 + √(1−ᾱ(t))·ε`. We pin ᾱ(t) with the standard
//! cosine profile and derive everything else from it:
//!
//! - noise level   σ(t) = √((1−ᾱ)/ᾱ)   (std of noise per unit signal),
//! - signal scale  s(t) = √ᾱ = 1/√(1+σ²),
//! - discrete steps β_i = 1 − ᾱ(t_i)/ᾱ(t_{i−1}) on a uniform grid.
//!
//! The change of variables x_t = s(t)·(x0 + σ(t)·ε) connects the
//! variance-preserving trajectory to the unscaled noisy variable
//! x_σ = x0 + σ·ε that the denoiser network sees. The preconditioning
//! coefficients returned by [`NoiseSchedule::precond_coeffs`] normalize the
//! denoiser's input/output statistics and the loss weight across σ so one
//! network handles all noise levels on an equal footing.

use crate::error::{CoreError, Result};

/// Floor applied to σ inside the logarithmic noise-level embedding (and to
/// σ values drawn for training) so ln(σ) stays finite.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Clamp bounds for ᾱ: the upper bound is exact signal, the lower bound
/// keeps σ(t) finite at the terminal time.
const ALPHA_BAR_MIN: f64 = 1e-6;
const ALPHA_BAR_MAX: f64 = 1.0;

/// Input/output scalings and loss weight for the preconditioned denoiser.
///
/// `D(x_σ) = c_skip·x_σ + c_out·net(c_in·x_σ, c_noise)`, trained with
/// per-σ loss weight `weight`; `weight·c_out² = 1` exactly, so every noise
/// level contributes a unit-scale regression problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecondCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
    pub weight: f64,
}

/// The cosine noise schedule plus its discretization.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NoiseSchedule {
    /// Total diffusion time T (dimensionless; the σ/s reparameterization
    /// makes the absolute scale immaterial).
    pub t_total: f64,
    /// Number of uniform discretization steps for the reverse sampler.
    pub n_steps: usize,
    /// Data standard deviation after normalization (1 by construction).
    pub sigma_data: f64,
    /// Small offset of the cosine profile; keeps β bounded near t = 0.
    pub s_shift: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            t_total: 1.0,
            n_steps: 300,
            sigma_data: 1.0,
            s_shift: 0.008,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.t_total > 0.0 && self.t_total.is_finite()) {
            return Err("t_total must be positive".into());
        }
        if self.n_steps < 2 {
            return Err("n_steps must be >= 2".into());
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err("sigma_data must be positive".into());
        }
        if !(self.s_shift > 0.0 && self.s_shift < 1.0) {
            return Err("s_shift must lie in (0, 1)".into());
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.t_total).contains(&t) || !t.is_finite() {
            return Err(CoreError::Argument(format!(
                "time {t} outside [0, {}]",
                self.t_total
            )));
        }
        Ok(())
    }

    /// Cumulative signal fraction ᾱ(t): the squared cosine profile
    /// normalized to ᾱ(0) = 1, clamped to [1e-6, 1]. Strictly decreasing
    /// in between, with ᾱ(T) small enough that x_T is almost pure noise.
    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let s = self.s_shift;
        let f = |u: f64| (((u + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let v = f(t / self.t_total) / f(0.0);
        Ok(v.clamp(ALPHA_BAR_MIN, ALPHA_BAR_MAX))
    }

    /// Noise level σ(t) and signal scale s(t) of the variance-preserving
    /// marginal: σ = √((1−ᾱ)/ᾱ), s = √ᾱ = 1/√(1+σ²).
    pub fn sigma_and_scale(&self, t: f64) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        let sigma = ((1.0 - ab) / ab).max(0.0).sqrt();
        Ok((sigma, ab.sqrt()))
    }

    /// σ clamped from below so logarithms and score conversions stay finite;
    /// training draws use this.
    pub fn sigma_floored(&self, t: f64) -> Result<f64> {
        Ok(self.sigma_and_scale(t)?.0.max(SIGMA_FLOOR))
    }

    /// Denoiser preconditioning coefficients for noise level σ.
    pub fn precond_coeffs(&self, sigma: f64) -> Result<PrecondCoeffs> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(CoreError::Argument(format!(
                "sigma must be non-negative, got {sigma}"
            )));
        }
        let sd = self.sigma_data;
        let s2 = sigma * sigma;
        let sd2 = sd * sd;
        let denom = s2 + sd2;
        Ok(PrecondCoeffs {
            c_skip: sd2 / denom,
            c_out: sigma * sd / denom.sqrt(),
            c_in: 1.0 / denom.sqrt(),
            c_noise: sigma.max(SIGMA_FLOOR).ln() / 4.0,
            weight: denom / (sigma * sd).powi(2).max(f64::MIN_POSITIVE),
        })
    }

    /// Discrete noise increments β_i = 1 − ᾱ(t_i)/ᾱ(t_{i−1}) on the uniform
    /// grid t_i = i·T/n, clipped to (0, 0.999]. Their product telescopes:
    /// ∏(1−β_i) = ᾱ(T) whenever the clip is inactive.
    pub fn discrete_betas(&self, n: usize) -> Result<Vec<f64>> {
        if n < 2 {
            return Err(CoreError::Argument(format!("need n >= 2 steps, got {n}")));
        }
        let mut prev = self.alpha_bar(0.0)?;
        let mut betas = Vec::with_capacity(n);
        for i in 1..=n {
            let t = self.t_total * i as f64 / n as f64;
            let ab = self.alpha_bar(t)?;
            let beta = (1.0 - ab / prev).clamp(1e-12, 0.999);
            betas.push(beta);
            prev = ab;
        }
        Ok(betas)
    }
}
