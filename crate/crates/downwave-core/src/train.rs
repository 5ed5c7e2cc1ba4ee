//! The training objective — preconditioned conditional denoising score
//! matching plus total-variation regularization of the one-step Tweedie
//! estimate on detail channels — with Adam optimization and EMA tracking.
//!
//! Per batch: draw σ, corrupt `x_σ = c0 + σ·ε`, evaluate the preconditioned
//! denoiser D, and minimize `weight(σ)·mean‖D − c0‖² + λ·TV(ĉ0)` where ĉ0 is
//! the Tweedie posterior-mean estimate computed from D. Under the
//! correspondence ᾱ = 1/(1+σ²) the Tweedie chain collapses to ĉ0 = D with
//! unit Jacobian, but both passes route through the literal operations so the
//! regularizer matches its definition rather than a simplification.

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::{bicubic_upsample, normalize, NormStats, PairSample};
use crate::model::{ArchDescriptor, DenoiserParams, Elem, GradStore, ParamId, ParamStore, UNet};
use crate::rng::stream;
use crate::schedule::{NoiseSchedule, SIGMA_FLOOR};
use crate::wavelet::{CoeffTensor, DomainTransform};

// =========================================================================
// Configuration and reporting types
// =========================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// TV regularization weight λ.
    pub lambda_tv: f64,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Decoupled weight decay; off by default.
    pub weight_decay: f64,
    /// Draw one σ per sample instead of one per batch.
    pub per_sample_sigma: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_tv: 1e-5,
            learning_rate: 1e-4,
            ema_decay: 0.999,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            weight_decay: 0.0,
            per_sample_sigma: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.lambda_tv < 0.0 || !self.lambda_tv.is_finite() {
            return Err(format!("lambda_tv must be ≥ 0, got {}", self.lambda_tv));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(format!("ema_decay must lie in (0,1), got {}", self.ema_decay));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(format!("weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// One training step's loss components; `total = cond + λ·tv` always.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cond: f64,
    pub tv: f64,
    /// σ drawn for this step (mean over the batch when per-sample).
    pub sigma: f64,
}

// =========================================================================
// Loss components
// =========================================================================

/// Score-matching loss given an already-computed denoiser output:
/// `(1/B)·Σ_b weight(σ_b)·mean‖D_b − c0_b‖²`. With one σ per batch this is
/// exactly `weight(σ)·mean‖D − c0‖²` over all elements.
pub fn cond_loss_from_denoised<T: Elem>(
    denoised: &Array4<T>,
    c0: &Array4<T>,
    sigmas: &[f64],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let (bsz, c, h, w) = c0.dim();
    if denoised.dim() != c0.dim() {
        return Err(CoreError::Dimension(format!(
            "denoised {:?} vs target {:?}",
            denoised.dim(),
            c0.dim()
        )));
    }
    if sigmas.len() != bsz || bsz == 0 {
        return Err(CoreError::Argument(format!(
            "{} noise levels for batch of {bsz}",
            sigmas.len()
        )));
    }
    let m = (c * h * w) as f64;
    let mut acc = 0.0;
    for b in 0..bsz {
        let weight = schedule.precond_coeffs(sigmas[b])?.weight;
        let mut sq = 0.0;
        for (d, t) in denoised
            .index_axis(Axis(0), b)
            .iter()
            .zip(c0.index_axis(Axis(0), b).iter())
        {
            let r = (*d - *t).into_f64();
            sq += r * r;
        }
        acc += weight * sq / m;
    }
    Ok(acc / bsz as f64)
}

/// Anisotropic total variation of the detail channels of a coefficient
/// tensor: for every channel except the pure-approximation channel 0, the
/// mean |forward difference| along each axis, summed. Zero iff every detail
/// channel is constant.
pub fn tv_regularizer(coeffs: &CoeffTensor) -> Result<f64> {
    if coeffs.level == 0 {
        return Err(CoreError::Argument(
            "TV regularizer requires a wavelet representation (level ≥ 1)".into(),
        ));
    }
    Ok(tv_detail_channels(&coeffs.data.view().insert_axis(Axis(0)).to_owned(), 1))
}

/// Batched TV over detail channels, averaged over the batch. `skip` channels
/// at the front are excluded — the channel ordering puts the sole
/// pure-approximation channel (averaging filters at every level) at index 0,
/// so `skip = 1` covers every decomposition depth.
fn tv_detail_channels<T: Elem>(batch: &Array4<T>, skip: usize) -> f64 {
    let (bsz, channels, h, w) = batch.dim();
    debug_assert!(skip >= 1, "approximation channel must be excluded");
    let mut acc = 0.0;
    for b in 0..bsz {
        for c in skip..channels {
            let plane = batch.slice(ndarray::s![b, c, .., ..]);
            let mut rows = 0.0;
            let mut cols = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let v = plane[[i, j]].into_f64();
                    if i + 1 < h {
                        rows += (plane[[i + 1, j]].into_f64() - v).abs();
                    }
                    if j + 1 < w {
                        cols += (plane[[i, j + 1]].into_f64() - v).abs();
                    }
                }
            }
            if h > 1 {
                acc += rows / ((h - 1) * w) as f64;
            }
            if w > 1 {
                acc += cols / (h * (w - 1)) as f64;
            }
        }
    }
    acc / bsz as f64
}

/// Gradient of [`tv_detail_channels`] with respect to the batch, scaled by
/// `lambda`, accumulated into `dout`. Subgradient convention: sign(0) = 0.
fn tv_detail_channels_backward<T: Elem>(batch: &Array4<T>, skip: usize, lambda: f64, dout: &mut Array4<T>) {
    let (bsz, channels, h, w) = batch.dim();
    let scale = lambda / bsz as f64;
    for b in 0..bsz {
        for c in skip..channels {
            let plane = batch.slice(ndarray::s![b, c, .., ..]);
            let row_norm = if h > 1 { scale / ((h - 1) * w) as f64 } else { 0.0 };
            let col_norm = if w > 1 { scale / (h * (w - 1)) as f64 } else { 0.0 };
            for i in 0..h {
                for j in 0..w {
                    let v = plane[[i, j]].into_f64();
                    if i + 1 < h {
                        let d = plane[[i + 1, j]].into_f64() - v;
                        let s = if d > 0.0 { row_norm } else if d < 0.0 { -row_norm } else { 0.0 };
                        dout[[b, c, i + 1, j]] = dout[[b, c, i + 1, j]] + T::of_f64(s);
                        dout[[b, c, i, j]] = dout[[b, c, i, j]] - T::of_f64(s);
                    }
                    if j + 1 < w {
                        let d = plane[[i, j + 1]].into_f64() - v;
                        let s = if d > 0.0 { col_norm } else if d < 0.0 { -col_norm } else { 0.0 };
                        dout[[b, c, i, j + 1]] = dout[[b, c, i, j + 1]] + T::of_f64(s);
                        dout[[b, c, i, j]] = dout[[b, c, i, j]] - T::of_f64(s);
                    }
                }
            }
        }
    }
}

/// Tweedie estimate ĉ0 from the denoiser output, routed through the literal
/// chain: x_t = s·x_σ, score_σ = (D−x_σ)/σ², score_t = score_σ/s,
/// ĉ0 = (x_t + (1−ᾱ)·score_t)/√ᾱ with ᾱ = 1/(1+σ²) and s = √ᾱ. The chain
/// collapses algebraically to ĉ0 = x_σ + k·(D−x_σ) with
/// k = (1−ᾱ)/(σ²·ᾱ) = 1, so the Jacobian dĉ0/dD is the (float-rounded)
/// scalar k per sample.
fn tweedie_from_denoised<T: Elem>(
    denoised: &Array4<T>,
    x_sigma: &Array4<T>,
    sigmas: &[f64],
) -> (Array4<T>, Vec<f64>) {
    let mut c0_hat = denoised.clone();
    let mut ks = Vec::with_capacity(sigmas.len());
    for (b, &sigma) in sigmas.iter().enumerate() {
        let alpha_bar = 1.0 / (1.0 + sigma * sigma);
        let k = (1.0 - alpha_bar) / (sigma * sigma * alpha_bar);
        ks.push(k);
        let kt = T::of_f64(k);
        let mut plane = c0_hat.index_axis_mut(Axis(0), b);
        plane.zip_mut_with(&x_sigma.index_axis(Axis(0), b), |d, &x| {
            *d = x + kt * (*d - x);
        });
    }
    (c0_hat, ks)
}

/// Channels the TV term applies to: all but the pure-approximation channel
/// for wavelet representations, nothing for the identity transform (pixel
/// fields have no detail-channel split, so tv = 0 there by definition).
fn tv_skip_channels(transform: &DomainTransform) -> Option<usize> {
    match transform {
        DomainTransform::Identity => None,
        DomainTransform::Haar { .. } => Some(1),
    }
}

/// Full objective on one batch, forward only.
#[allow(clippy::too_many_arguments)]
pub fn wdm_loss<T: Elem>(
    net: &UNet,
    ps: &ParamStore<T>,
    schedule: &NoiseSchedule,
    transform: &DomainTransform,
    c0: &Array4<T>,
    cond: &Array4<T>,
    sigmas: &[f64],
    noise: &Array4<T>,
    lambda: f64,
) -> Result<LossBreakdown> {
    wdm_loss_impl(net, ps, schedule, transform, c0, cond, sigmas, noise, lambda, None)
}

/// Full objective plus parameter gradients of `total`.
#[allow(clippy::too_many_arguments)]
pub fn wdm_loss_grad<T: Elem>(
    net: &UNet,
    ps: &ParamStore<T>,
    schedule: &NoiseSchedule,
    transform: &DomainTransform,
    c0: &Array4<T>,
    cond: &Array4<T>,
    sigmas: &[f64],
    noise: &Array4<T>,
    lambda: f64,
    grads: &mut GradStore<T>,
) -> Result<LossBreakdown> {
    wdm_loss_impl(
        net, ps, schedule, transform, c0, cond, sigmas, noise, lambda,
        Some(grads),
    )
}

#[allow(clippy::too_many_arguments)]
fn wdm_loss_impl<T: Elem>(
    net: &UNet,
    ps: &ParamStore<T>,
    schedule: &NoiseSchedule,
    transform: &DomainTransform,
    c0: &Array4<T>,
    cond: &Array4<T>,
    sigmas: &[f64],
    noise: &Array4<T>,
    lambda: f64,
    grads: Option<&mut GradStore<T>>,
) -> Result<LossBreakdown> {
    let (bsz, c, h, w) = c0.dim();
    if noise.dim() != c0.dim() {
        return Err(CoreError::Dimension(format!(
            "noise {:?} vs target {:?}",
            noise.dim(),
            c0.dim()
        )));
    }
    if sigmas.len() != bsz || bsz == 0 {
        return Err(CoreError::Argument(format!(
            "{} noise levels for batch of {bsz}",
            sigmas.len()
        )));
    }
    for &s in sigmas {
        if !(s > 0.0 && s.is_finite()) {
            return Err(CoreError::Argument(format!("sigma must be positive, got {s}")));
        }
    }

    // x_σ = c0 + σ·ε in the scaled variable the denoiser operates on.
    let mut x_sigma = c0.clone();
    for (b, &sigma) in sigmas.iter().enumerate() {
        let s = T::of_f64(sigma);
        x_sigma
            .index_axis_mut(Axis(0), b)
            .zip_mut_with(&noise.index_axis(Axis(0), b), |x, &n| *x = *x + s * n);
    }

    let record = grads.is_some();
    let (denoised, tape) = net.denoise(ps, schedule, &x_sigma, cond, sigmas, record)?;

    let cond_term = cond_loss_from_denoised(&denoised, c0, sigmas, schedule)?;
    let (tv_term, c0_hat, ks) = match tv_skip_channels(transform) {
        Some(skip) => {
            let (c0_hat, ks) = tweedie_from_denoised(&denoised, &x_sigma, sigmas);
            (tv_detail_channels(&c0_hat, skip), Some((c0_hat, skip)), ks)
        }
        None => (0.0, None, Vec::new()),
    };
    let total = cond_term + lambda * tv_term;

    if let Some(grads) = grads {
        let m = (c * h * w) as f64;
        // d cond / dD = 2·weight_b·(D − c0)/(B·M).
        let mut d_out = Array4::<T>::zeros(c0.raw_dim());
        for b in 0..bsz {
            let weight = schedule.precond_coeffs(sigmas[b])?.weight;
            let factor = T::of_f64(2.0 * weight / (bsz as f64 * m));
            let mut plane = d_out.index_axis_mut(Axis(0), b);
            for ((dv, &d), &t) in plane
                .iter_mut()
                .zip(denoised.index_axis(Axis(0), b).iter())
                .zip(c0.index_axis(Axis(0), b).iter())
            {
                *dv = factor * (d - t);
            }
        }
        // d (λ·tv) / dD = λ·(d tv / dĉ0)·k_b via the Tweedie chain.
        if let Some((c0_hat, skip)) = &c0_hat {
            let mut d_c0_hat = Array4::<T>::zeros(c0.raw_dim());
            tv_detail_channels_backward(c0_hat, *skip, lambda, &mut d_c0_hat);
            for (b, &k) in ks.iter().enumerate() {
                let kt = T::of_f64(k);
                d_out
                    .index_axis_mut(Axis(0), b)
                    .zip_mut_with(&d_c0_hat.index_axis(Axis(0), b), |o, &g| {
                        *o = *o + kt * g
                    });
            }
        }
        net.denoise_backward(ps, tape.as_ref().expect("recorded"), &d_out, grads);
    }

    let sigma_mean = sigmas.iter().sum::<f64>() / bsz as f64;
    Ok(LossBreakdown {
        total,
        cond: cond_term,
        tv: tv_term,
        sigma: sigma_mean,
    })
}

// =========================================================================
// Dataset preparation
// =========================================================================

/// Transform-domain training tensors: targets from the high-resolution
/// fields, conditions from bicubic-upsampled low-resolution fields, both
/// normalized with shared statistics before the transform.
#[derive(Debug, Clone)]
pub struct CoeffDataset {
    pub c0: Array4<f32>,
    pub cond: Array4<f32>,
}

impl CoeffDataset {
    pub fn from_pairs(
        pairs: &[PairSample],
        stats: &NormStats,
        transform: &DomainTransform,
    ) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| CoreError::Argument("dataset needs at least one pair".into()))?;
        let (hh, hw) = (first.hr.height(), first.hr.width());
        let channels = transform.channels();
        let (sh, sw) = transform.state_dims(hh, hw)?;
        let mut c0 = Array4::<f32>::zeros((pairs.len(), channels, sh, sw));
        let mut cond = Array4::<f32>::zeros((pairs.len(), channels, sh, sw));
        for (i, pair) in pairs.iter().enumerate() {
            if pair.hr.height() != hh || pair.hr.width() != hw {
                return Err(CoreError::Dimension(format!(
                    "pair {i} is {}x{}, dataset is {hh}x{hw}",
                    pair.hr.height(),
                    pair.hr.width()
                )));
            }
            c0.index_axis_mut(Axis(0), i)
                .assign(&transform.forward(&normalize(&pair.hr, stats))?);
            let up = bicubic_upsample(&pair.lr, pair.factor)?;
            cond.index_axis_mut(Axis(0), i)
                .assign(&transform.forward(&normalize(&up, stats))?);
        }
        Ok(Self { c0, cond })
    }

    pub fn len(&self) -> usize {
        self.c0.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gathers a batch by index list.
    pub fn take(&self, idx: &[usize]) -> (Array4<f32>, Array4<f32>) {
        let (_, c, h, w) = self.c0.dim();
        let mut c0 = Array4::<f32>::zeros((idx.len(), c, h, w));
        let mut cond = Array4::<f32>::zeros((idx.len(), c, h, w));
        for (row, &i) in idx.iter().enumerate() {
            c0.index_axis_mut(Axis(0), row)
                .assign(&self.c0.index_axis(Axis(0), i));
            cond.index_axis_mut(Axis(0), row)
                .assign(&self.cond.index_axis(Axis(0), i));
        }
        (c0, cond)
    }
}

/// Deterministically shuffled batch index lists for one epoch.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, "epoch-shuffle", epoch));
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

// =========================================================================
// Optimizer and trainer
// =========================================================================

/// Adam moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: GradStore<f32>,
    pub v: GradStore<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(ps: &ParamStore<f32>) -> Self {
        Self {
            m: GradStore::zeros_like(ps),
            v: GradStore::zeros_like(ps),
            step: 0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub struct Trainer {
    pub net: UNet,
    pub params: DenoiserParams,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub transform: DomainTransform,
    grads: GradStore<f32>,
}

impl Trainer {
    pub fn new(
        arch: &ArchDescriptor,
        config: TrainConfig,
        schedule: NoiseSchedule,
        transform: DomainTransform,
    ) -> Result<Self> {
        config.validate().map_err(CoreError::Config)?;
        schedule.validate().map_err(CoreError::Config)?;
        let (net, params) = DenoiserParams::init(arch, config.seed)?;
        let adam = AdamState::new(&params.store);
        let grads = GradStore::zeros_like(&params.store);
        Ok(Self {
            net,
            params,
            adam,
            config,
            schedule,
            transform,
            grads,
        })
    }

    /// Rebuilds a trainer around restored state (checkpoint resume).
    pub fn from_parts(
        params: DenoiserParams,
        adam: AdamState,
        config: TrainConfig,
        schedule: NoiseSchedule,
        transform: DomainTransform,
    ) -> Result<Self> {
        config.validate().map_err(CoreError::Config)?;
        let net = params.rebuild_net()?;
        let grads = GradStore::zeros_like(&params.store);
        Ok(Self {
            net,
            params,
            adam,
            config,
            schedule,
            transform,
            grads,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// Draws the per-batch (or per-sample) noise levels for a step:
    /// t ~ U(0, T] mapped through the schedule, floored at σ = 1e-4.
    fn draw_sigmas(&self, bsz: usize, step: u64) -> Result<Vec<f64>> {
        let mut rng = stream(self.config.seed, "train-sigma", step);
        let n = if self.config.per_sample_sigma { bsz } else { 1 };
        let mut sigmas = Vec::with_capacity(bsz);
        for _ in 0..n {
            let u: f64 = rng.gen_range(0.0..1.0);
            let t = self.schedule.t_total * (1.0 - u);
            sigmas.push(self.schedule.sigma_floored(t)?.max(SIGMA_FLOOR));
        }
        while sigmas.len() < bsz {
            sigmas.push(sigmas[0]);
        }
        Ok(sigmas)
    }

    /// One optimization step on a batch. Deterministic given (state, batch,
    /// step counter).
    pub fn train_step(&mut self, c0: &Array4<f32>, cond: &Array4<f32>) -> Result<LossBreakdown> {
        let step = self.adam.step;
        let bsz = c0.dim().0;
        let sigmas = self.draw_sigmas(bsz, step)?;

        let mut noise = Array4::<f32>::zeros(c0.raw_dim());
        let mut rng = stream(self.config.seed, "train-noise", step);
        noise.mapv_inplace(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z as f32
        });

        self.grads.reset();
        let breakdown = wdm_loss_grad(
            &self.net,
            &self.params.store,
            &self.schedule,
            &self.transform,
            c0,
            cond,
            &sigmas,
            &noise,
            self.config.lambda_tv,
            &mut self.grads,
        )?;

        if !breakdown.total.is_finite() || !self.grads.all_finite() {
            return Err(CoreError::Divergence {
                step: step as usize,
                detail: format!(
                    "non-finite training gradient (cond={:.6e}, tv={:.6e}, sigma={:.4})",
                    breakdown.cond, breakdown.tv, breakdown.sigma
                ),
            });
        }

        self.apply_adam();
        self.update_ema();
        self.adam.step += 1;
        Ok(breakdown)
    }

    /// Bias-corrected Adam with optional decoupled weight decay.
    fn apply_adam(&mut self) {
        let t = (self.adam.step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let lr = self.config.learning_rate;
        let wd = self.config.weight_decay;
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);

        for i in 0..self.params.store.len() {
            let id = ParamId(i);
            let g = self.grads.get(id).clone();
            let m = self.adam.m.get_mut(id);
            m.zip_mut_with(&g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let m = m.clone();
            let v = self.adam.v.get_mut(id);
            v.zip_mut_with(&g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let v = v.clone();

            let p = self.params.store.get_mut(id);
            ndarray::Zip::from(p)
                .and(&m)
                .and(&v)
                .for_each(|p, &m, &v| {
                    let mhat = m as f64 / bc1;
                    let vhat = v as f64 / bc2;
                    let update = mhat / (vhat.sqrt() + ADAM_EPS) + wd * (*p as f64);
                    *p -= (lr * update) as f32;
                });
        }
    }

    fn update_ema(&mut self) {
        let d = self.config.ema_decay as f32;
        for i in 0..self.params.store.len() {
            let id = ParamId(i);
            let p = self.params.store.get(id).clone();
            self.params
                .ema
                .get_mut(id)
                .zip_mut_with(&p, |e, &p| *e = d * *e + (1.0 - d) * p);
        }
    }

    /// Loss on a fixed batch with deterministic σ and noise — for validation
    /// tracking; does not touch optimizer state.
    pub fn validation_loss(
        &self,
        c0: &Array4<f32>,
        cond: &Array4<f32>,
        sigma: f64,
        noise_seed: u64,
    ) -> Result<LossBreakdown> {
        let bsz = c0.dim().0;
        let mut noise = Array4::<f32>::zeros(c0.raw_dim());
        let mut rng = stream(noise_seed, "validation-noise", 0);
        noise.mapv_inplace(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z as f32
        });
        wdm_loss(
            &self.net,
            &self.params.store,
            &self.schedule,
            &self.transform,
            c0,
            cond,
            &vec![sigma; bsz],
            &noise,
            self.config.lambda_tv,
        )
    }
}

// =========================================================================
// Tests
// =========================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridField;
    use crate::synth::{synth_storm_field, StormParams};
    use ndarray::Array3;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn tiny_arch(channels: usize) -> ArchDescriptor {
        ArchDescriptor {
            state_channels: channels,
            cond_channels: channels,
            widths: vec![8, 16],
            blocks_per_stage: 1,
            embed_dim: 8,
            groups: 4,
            attention: false,
            periodic_padding: false,
        }
    }

    fn randn4(seed: u64, dims: (usize, usize, usize, usize)) -> Array4<f32> {
        let mut rng = stream(seed, "test-randn", 0);
        let mut a = Array4::zeros(dims);
        a.mapv_inplace(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z as f32
        });
        a
    }

    // ---- cond loss -----------------------------------------------------

    #[test]
    fn oracle_denoiser_gives_zero_cond_loss() {
        let c0 = randn4(1, (3, 4, 4, 4));
        let loss = cond_loss_from_denoised(&c0, &c0, &[0.5, 0.5, 0.5], &sched()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn cond_loss_is_batch_order_invariant() {
        let s = sched();
        let c0 = randn4(2, (4, 2, 4, 4));
        let d = randn4(3, (4, 2, 4, 4));
        let sigmas = [0.7; 4];
        let a = cond_loss_from_denoised(&d, &c0, &sigmas, &s).unwrap();

        let perm = [2usize, 0, 3, 1];
        let mut c0p = c0.clone();
        let mut dp = d.clone();
        for (row, &src) in perm.iter().enumerate() {
            c0p.index_axis_mut(Axis(0), row).assign(&c0.index_axis(Axis(0), src));
            dp.index_axis_mut(Axis(0), row).assign(&d.index_axis(Axis(0), src));
        }
        let b = cond_loss_from_denoised(&dp, &c0p, &sigmas, &s).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn zero_init_model_matches_skip_only_oracle() {
        // With a zero-initialized head the denoiser returns c_skip·x_σ, so
        // the loss must equal weight·mean‖c_skip·x_σ − c0‖² computed directly.
        let s = sched();
        let arch = tiny_arch(1);
        let (net, params) = DenoiserParams::init(&arch, 7).unwrap();
        let c0 = randn4(4, (2, 1, 8, 8));
        let cond = randn4(5, (2, 1, 8, 8));
        let noise = randn4(6, (2, 1, 8, 8));
        let sigma = s.sigma_data; // σ = σ_d per the example
        let sigmas = [sigma, sigma];

        let breakdown = wdm_loss(
            &net,
            &params.store,
            &s,
            &DomainTransform::Identity,
            &c0,
            &cond,
            &sigmas,
            &noise,
            0.0,
        )
        .unwrap();

        let coeff = s.precond_coeffs(sigma).unwrap();
        let mut sq = 0.0;
        for (&x, &n) in c0.iter().zip(noise.iter()) {
            let x_sigma = x as f64 + sigma * n as f64;
            let r = coeff.c_skip * x_sigma - x as f64;
            sq += r * r;
        }
        let oracle = coeff.weight * sq / c0.len() as f64;
        assert!(
            (breakdown.cond - oracle).abs() / oracle.max(1e-12) < 1e-5,
            "loss {} vs oracle {oracle}",
            breakdown.cond
        );
        assert_eq!(breakdown.total, breakdown.cond);
        assert_eq!(breakdown.tv, 0.0);
    }

    #[test]
    fn conditional_mean_minimizes_cond_loss() {
        // Toy problem: c0 ∈ {−1, +1} equally likely. The conditional mean 0
        // must lower-bound every constant predictor on the two-outcome batch.
        let s = sched();
        let mut c0 = Array4::<f32>::zeros((2, 1, 2, 2));
        c0.index_axis_mut(Axis(0), 0).fill(-1.0);
        c0.index_axis_mut(Axis(0), 1).fill(1.0);
        let sigmas = [0.8, 0.8];
        let best = cond_loss_from_denoised(&Array4::zeros(c0.raw_dim()), &c0, &sigmas, &s).unwrap();
        for k in -20..=20 {
            let a = k as f32 * 0.1;
            let pred = Array4::from_elem(c0.raw_dim(), a);
            let loss = cond_loss_from_denoised(&pred, &c0, &sigmas, &s).unwrap();
            assert!(
                loss >= best - 1e-9,
                "predictor {a} beat the conditional mean: {loss} < {best}"
            );
        }
    }

    // ---- TV regularizer ------------------------------------------------

    #[test]
    fn tv_of_constant_coefficients_is_zero() {
        let data = Array3::from_elem((4, 8, 8), 3.25f32);
        let coeffs = CoeffTensor::new(1, 16, 16, data).unwrap();
        assert_eq!(tv_regularizer(&coeffs).unwrap(), 0.0);
    }

    #[test]
    fn tv_of_unit_step_matches_hand_count() {
        // One detail channel carries a unit step along axis 1 on an n×n
        // plane: n step edges out of n·(n−1) differences → 1/(n−1).
        let n = 8;
        let mut data = Array3::<f32>::zeros((4, n, n));
        for i in 0..n {
            for j in n / 2..n {
                data[[1, i, j]] = 1.0;
            }
        }
        let coeffs = CoeffTensor::new(1, 2 * n, 2 * n, data).unwrap();
        let tv = tv_regularizer(&coeffs).unwrap();
        let want = 1.0 / (n as f64 - 1.0);
        assert!((tv - want).abs() < 1e-9, "tv {tv} vs {want}");
    }

    #[test]
    fn tv_is_one_homogeneous_and_ignores_approximation() {
        let mut rng = stream(9, "tv", 0);
        let mut data = Array3::<f32>::zeros((4, 6, 6));
        data.mapv_inplace(|_| rng.gen_range(-1.0f32..1.0));
        let coeffs = CoeffTensor::new(1, 12, 12, data.clone()).unwrap();
        let tv = tv_regularizer(&coeffs).unwrap();

        let doubled = CoeffTensor::new(1, 12, 12, data.mapv(|v| 2.0 * v)).unwrap();
        assert!((tv_regularizer(&doubled).unwrap() - 2.0 * tv).abs() < 1e-6);

        // Blowing up the approximation channel must not move TV at all.
        let mut spiked = data.clone();
        for i in 0..6 {
            for j in 0..6 {
                spiked[[0, i, j]] = ((i * 7 + j) as f32).sin() * 1e4;
            }
        }
        let spiked = CoeffTensor::new(1, 12, 12, spiked).unwrap();
        assert_eq!(tv_regularizer(&spiked).unwrap(), tv);

        // Pixel fields have no detail-channel split; the validating
        // constructor already rejects level 0, and the regularizer refuses a
        // hand-built one too.
        assert!(CoeffTensor::new(0, 6, 6, Array3::zeros((1, 6, 6))).is_err());
        let pix = CoeffTensor {
            level: 0,
            base_height: 6,
            base_width: 6,
            data: Array3::zeros((1, 6, 6)),
        };
        assert!(tv_regularizer(&pix).is_err());
    }

    // ---- wdm loss ------------------------------------------------------

    #[test]
    fn lambda_zero_reduces_to_cond() {
        let s = sched();
        let arch = tiny_arch(4);
        let (net, params) = DenoiserParams::init(&arch, 1).unwrap();
        let c0 = randn4(10, (2, 4, 4, 4));
        let cond = randn4(11, (2, 4, 4, 4));
        let noise = randn4(12, (2, 4, 4, 4));
        let transform = DomainTransform::Haar { level: 1 };
        let sigmas = [0.4, 1.1];
        let b0 = wdm_loss(&net, &params.store, &s, &transform, &c0, &cond, &sigmas, &noise, 0.0)
            .unwrap();
        assert_eq!(b0.total, b0.cond);
        let b1 = wdm_loss(&net, &params.store, &s, &transform, &c0, &cond, &sigmas, &noise, 1e-5)
            .unwrap();
        assert!((b1.total - (b1.cond + 1e-5 * b1.tv)).abs() < 1e-6);
        assert_eq!(b0.cond, b1.cond);
        assert!(b1.tv > 0.0, "random coefficients have nonzero TV");
    }

    #[test]
    fn wdm_gradients_match_finite_differences_including_tv() {
        // f64 model so central differences resolve the TV subgradients.
        let s = sched();
        let arch = tiny_arch(4);
        let mut ps = ParamStore::<f64>::new();
        let net = UNet::new(&arch, &mut ps, &mut stream(21, "init", 0)).unwrap();
        let mut rng = stream(21, "probe", 0);
        for i in 0..ps.len() {
            ps.get_mut(ParamId(i))
                .mapv_inplace(|v| v + rng.gen_range(-0.05..0.05));
        }

        let dims = (2, 4, 4, 4);
        let mut c0 = Array4::<f64>::zeros(dims);
        c0.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let mut cond = Array4::<f64>::zeros(dims);
        cond.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let mut noise = Array4::<f64>::zeros(dims);
        noise.mapv_inplace(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z
        });
        let transform = DomainTransform::Haar { level: 1 };
        let sigmas = [0.6, 1.3];
        let lambda = 1e-2; // large enough that the TV path carries signal

        let loss = |ps: &ParamStore<f64>| -> f64 {
            wdm_loss(&net, ps, &s, &transform, &c0, &cond, &sigmas, &noise, lambda)
                .unwrap()
                .total
        };

        let mut grads = GradStore::zeros_like(&ps);
        let breakdown = wdm_loss_grad(
            &net, &ps, &s, &transform, &c0, &cond, &sigmas, &noise, lambda, &mut grads,
        )
        .unwrap();
        assert!(breakdown.tv > 0.0);

        for probe in 0..20 {
            let id = ParamId(rng.gen_range(0..ps.len()));
            let idx = rng.gen_range(0..ps.get(id).len());
            let h = 1e-5;
            let orig = ps.get(id).as_slice().unwrap()[idx];
            ps.get_mut(id).as_slice_mut().unwrap()[idx] = orig + h;
            let lp = loss(&ps);
            ps.get_mut(id).as_slice_mut().unwrap()[idx] = orig - h;
            let lm = loss(&ps);
            ps.get_mut(id).as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.get(id).as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "probe {probe} param {} [{idx}]: fd={fd:.4e} analytic={an:.4e}",
                ps.name(id)
            );
        }
    }

    // ---- trainer -------------------------------------------------------

    fn toy_dataset(n: usize, seed: u64) -> CoeffDataset {
        let params = StormParams::default();
        let fields: Vec<GridField> = (0..n)
            .map(|i| synth_storm_field(seed + i as u64, 16, 16, &params).unwrap())
            .collect();
        let stats = NormStats::from_fields(fields.iter()).unwrap();
        let pairs: Vec<PairSample> = fields
            .into_iter()
            .map(|f| PairSample::from_hr(f, 2).unwrap())
            .collect();
        CoeffDataset::from_pairs(&pairs, &stats, &DomainTransform::Haar { level: 1 }).unwrap()
    }

    #[test]
    fn smoke_training_decreases_validation_loss() {
        let data = toy_dataset(16, 100);
        let config = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 8,
            seed: 42,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(
            &tiny_arch(4),
            config,
            sched(),
            DomainTransform::Haar { level: 1 },
        )
        .unwrap();

        let (val_c0, val_cond) = data.take(&[0, 1, 2, 3]);
        let before = trainer.validation_loss(&val_c0, &val_cond, 0.5, 7).unwrap();
        for step in 0..200 {
            let batch = shuffled_batches(data.len(), 8, 42, step / 2);
            let (c0, cond) = data.take(&batch[(step % 2) as usize]);
            trainer.train_step(&c0, &cond).unwrap();
        }
        let after = trainer.validation_loss(&val_c0, &val_cond, 0.5, 7).unwrap();
        assert!(
            after.total < before.total,
            "validation loss went {} → {}",
            before.total,
            after.total
        );
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_dataset(8, 200);
        let mk = || {
            let config = TrainConfig {
                batch_size: 4,
                seed: 5,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(
                &tiny_arch(4),
                config,
                sched(),
                DomainTransform::Haar { level: 1 },
            )
            .unwrap();
            for step in 0..10 {
                let batches = shuffled_batches(data.len(), 4, 5, step);
                let (c0, cond) = data.take(&batches[0]);
                t.train_step(&c0, &cond).unwrap();
            }
            t
        };
        let a = mk();
        let b = mk();
        for i in 0..a.params.store.len() {
            let id = ParamId(i);
            assert_eq!(a.params.store.get(id), b.params.store.get(id));
            assert_eq!(a.params.ema.get(id), b.params.ema.get(id));
        }
    }

    #[test]
    fn ema_one_step_matches_hand_computation() {
        // From ema = params = w, one step gives ema' = w − (1−decay)·Δ where
        // Δ is the Adam update actually applied.
        let data = toy_dataset(4, 300);
        let config = TrainConfig {
            batch_size: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(
            &tiny_arch(4),
            config.clone(),
            sched(),
            DomainTransform::Haar { level: 1 },
        )
        .unwrap();
        let w0 = trainer.params.store.clone_values();
        let (c0, cond) = data.take(&[0, 1, 2, 3]);
        trainer.train_step(&c0, &cond).unwrap();

        for i in 0..w0.len() {
            let id = ParamId(i);
            let w = w0.get(id);
            let p = trainer.params.store.get(id);
            let e = trainer.params.ema.get(id);
            for ((&w, &p), &e) in w.iter().zip(p.iter()).zip(e.iter()) {
                let delta = w - p;
                let want = w - (1.0 - config.ema_decay as f32) * delta;
                assert!(
                    (e - want).abs() <= 1e-6 * want.abs().max(1.0),
                    "ema {e} vs {want}"
                );
            }
        }
    }

    #[test]
    fn dataset_shapes_follow_transform() {
        let data = toy_dataset(3, 400);
        assert_eq!(data.c0.dim(), (3, 4, 8, 8));
        assert_eq!(data.cond.dim(), (3, 4, 8, 8));
        assert_eq!(data.len(), 3);
        let (c0, cond) = data.take(&[2, 0]);
        assert_eq!(c0.dim(), (2, 4, 8, 8));
        assert_eq!(cond.index_axis(Axis(0), 1), data.cond.index_axis(Axis(0), 0));
    }

    #[test]
    fn shuffled_batches_partition_and_vary_by_epoch() {
        let batches = shuffled_batches(10, 4, 1, 0);
        assert_eq!(batches.iter().map(|b| b.len()).sum::<usize>(), 10);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_ne!(shuffled_batches(10, 4, 1, 0), shuffled_batches(10, 4, 1, 1));
    }

    #[test]
    fn sigma_draws_respect_floor_and_mode() {
        let config = TrainConfig {
            per_sample_sigma: true,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(
            &tiny_arch(1),
            config,
            sched(),
            DomainTransform::Identity,
        )
        .unwrap();
        for step in 0..50 {
            let sigmas = trainer.draw_sigmas(4, step).unwrap();
            assert_eq!(sigmas.len(), 4);
            assert!(sigmas.iter().all(|&s| s >= SIGMA_FLOOR));
            // Per-sample mode: distinct draws (almost surely).
            assert!(sigmas.windows(2).any(|w| w[0] != w[1]) || step > 0);
        }
        let per_batch = Trainer::new(
            &tiny_arch(1),
            TrainConfig::default(),
            sched(),
            DomainTransform::Identity,
        )
        .unwrap();
        let sigmas = per_batch.draw_sigmas(4, 0).unwrap();
        assert!(sigmas.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn loss_breakdown_identity_holds_in_training() {
        let data = toy_dataset(4, 500);
        let mut trainer = Trainer::new(
            &tiny_arch(4),
            TrainConfig {
                batch_size: 4,
                seed: 3,
                ..TrainConfig::default()
            },
            sched(),
            DomainTransform::Haar { level: 1 },
        )
        .unwrap();
        let (c0, cond) = data.take(&[0, 1, 2, 3]);
        for _ in 0..5 {
            let b = trainer.train_step(&c0, &cond).unwrap();
            assert!((b.total - (b.cond + trainer.config.lambda_tv * b.tv)).abs() < 1e-6);
            assert!(b.sigma >= SIGMA_FLOOR);
        }
    }

    #[test]
    fn identity_transform_never_pays_tv() {
        let s = sched();
        let arch = tiny_arch(1);
        let (net, params) = DenoiserParams::init(&arch, 4).unwrap();
        let c0 = randn4(30, (2, 1, 8, 8));
        let cond = randn4(31, (2, 1, 8, 8));
        let noise = randn4(32, (2, 1, 8, 8));
        let b = wdm_loss(
            &net,
            &params.store,
            &s,
            &DomainTransform::Identity,
            &c0,
            &cond,
            &[0.5, 0.5],
            &noise,
            1e-5,
        )
        .unwrap();
        assert_eq!(b.tv, 0.0);
        assert_eq!(b.total, b.cond);
    }

    #[test]
    fn tweedie_chain_factor_is_unity() {
        let d = randn4(40, (2, 1, 4, 4));
        let x = randn4(41, (2, 1, 4, 4));
        let (c0_hat, ks) = tweedie_from_denoised(&d, &x, &[0.3, 2.0]);
        for &k in &ks {
            assert!((k - 1.0).abs() < 1e-12, "chain factor {k}");
        }
        for (a, b) in c0_hat.iter().zip(d.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

}
