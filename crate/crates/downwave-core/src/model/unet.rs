//! The conditional denoiser network: a convolutional encoder–decoder with
//! residual blocks, skip connections, optional bottleneck self-attention,
//! and noise-level conditioning via per-channel affine modulation.
//!
//! The same trunk serves every domain transform — only the input/output
//! channel counts change (pixel: 1+1 channels, one-level packet: 4+4,
//! two-level: 16+16). Downsampling is a stride-2 convolution, upsampling is
//! nearest-neighbor followed by a convolution, and the final output
//! convolution starts at zero so an untrained denoiser reduces to its skip
//! path.

use ndarray::{Array2, Array4, Axis};

use crate::error::{CoreError, Result};
use crate::model::attn::{AttnCache, SelfAttention2d};
use crate::model::embed::{TimeEmbedCache, TimeEmbedding};
use crate::model::ops::{
    concat_channels, silu, silu_backward, split_channels, upsample2_backward, upsample2_forward,
    Conv2d, ConvCache, Elem, GnCache, GroupNorm, Init, Linear, LinearCache, PadMode,
};
use crate::model::params::{GradStore, ParamStore};
use crate::model::ArchDescriptor;

// =========================================================================
// Residual block
// =========================================================================

/// norm → silu → conv, modulated norm → silu → conv, plus a (possibly
/// projected) shortcut. The noise-level embedding enters between the two
/// convolutions as `h·(1+scale) + shift` with per-channel scale/shift.
#[derive(Debug, Clone)]
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    film: Linear, // embed → 2·c_out (scale ‖ shift)
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    c_out: usize,
}

pub struct ResBlockCache<T> {
    gn1: GnCache<T>,
    h1: Array4<T>, // gn1 output (silu input)
    conv1: ConvCache<T>,
    film: LinearCache<T>,
    scale: Array2<T>, // (B, c_out)
    gn2: GnCache<T>,
    h2: Array4<T>, // gn2 output
    m: Array4<T>,  // modulated pre-activation
    conv2: ConvCache<T>,
    skip: Option<ConvCache<T>>,
}

impl ResBlock {
    pub fn new<T: Elem>(
        ps: &mut ParamStore<T>,
        rng: &mut impl rand::Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        embed_dim: usize,
        groups: usize,
        mode: PadMode,
    ) -> Self {
        let gn1 = GroupNorm::new(ps, &format!("{name}.gn1"), c_in, groups);
        let conv1 = Conv2d::new(
            ps,
            rng,
            &format!("{name}.conv1"),
            c_in,
            c_out,
            3,
            1,
            mode,
            Init::Scaled { gain: 2f64.sqrt() },
        );
        // Zero-initialized modulation: blocks start unmodulated.
        let film = Linear::new(
            ps,
            rng,
            &format!("{name}.film"),
            embed_dim,
            2 * c_out,
            Init::Zero,
        );
        let gn2 = GroupNorm::new(ps, &format!("{name}.gn2"), c_out, groups);
        let conv2 = Conv2d::new(
            ps,
            rng,
            &format!("{name}.conv2"),
            c_out,
            c_out,
            3,
            1,
            mode,
            Init::Scaled { gain: 2f64.sqrt() },
        );
        let skip = (c_in != c_out).then(|| {
            Conv2d::new(
                ps,
                rng,
                &format!("{name}.skip"),
                c_in,
                c_out,
                1,
                1,
                mode,
                Init::Scaled { gain: 1.0 },
            )
        });
        Self {
            gn1,
            conv1,
            film,
            gn2,
            conv2,
            skip,
            c_out,
        }
    }

    pub fn forward<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        x: &Array4<T>,
        emb: &Array2<T>,
        record: bool,
    ) -> (Array4<T>, Option<ResBlockCache<T>>) {
        let (h1, gn1_cache) = self.gn1.forward(ps, x, record);
        let a1 = silu(&h1);
        let (c1, conv1_cache) = self.conv1.forward(ps, &a1, record);

        let (ss, film_cache) = self.film.forward(ps, emb, record);
        let (bsz, _, hh, ww) = c1.dim();
        let (h2, gn2_cache) = self.gn2.forward(ps, &c1, record);
        let mut m = h2.clone();
        let mut scale = Array2::<T>::zeros((bsz, self.c_out));
        for b in 0..bsz {
            for c in 0..self.c_out {
                let sc = ss[[b, c]];
                let sh = ss[[b, self.c_out + c]];
                scale[[b, c]] = sc;
                let mut plane = m.slice_mut(ndarray::s![b, c, .., ..]);
                plane.mapv_inplace(|v| v * (T::one() + sc) + sh);
            }
        }
        let a2 = silu(&m);
        let (c2, conv2_cache) = self.conv2.forward(ps, &a2, record);

        let (shortcut, skip_cache) = match &self.skip {
            Some(conv) => {
                let (s, c) = conv.forward(ps, x, record);
                (s, c)
            }
            None => (x.clone(), None),
        };
        let y = shortcut + &c2;
        debug_assert_eq!(y.dim(), (bsz, self.c_out, hh, ww));

        let cache = record.then(|| ResBlockCache {
            gn1: gn1_cache.expect("recorded"),
            h1,
            conv1: conv1_cache.expect("recorded"),
            film: film_cache.expect("recorded"),
            scale,
            gn2: gn2_cache.expect("recorded"),
            h2,
            m,
            conv2: conv2_cache.expect("recorded"),
            skip: skip_cache,
        });
        (y, cache)
    }

    /// Returns (dx, demb).
    pub fn backward<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        cache: &ResBlockCache<T>,
        dy: &Array4<T>,
        grads: &mut GradStore<T>,
    ) -> (Array4<T>, Array2<T>) {
        let (bsz, _, _, _) = dy.dim();

        // Main branch: conv2 → silu → modulation → gn2 → conv1 → silu → gn1.
        let da2 = self.conv2.backward(ps, &cache.conv2, dy, grads);
        let dm = silu_backward(&cache.m, &da2);

        let mut dh2 = dm.clone();
        let mut dss = Array2::<T>::zeros((bsz, 2 * self.c_out));
        for b in 0..bsz {
            for c in 0..self.c_out {
                let sc = cache.scale[[b, c]];
                let mut dscale = T::zero();
                let mut dshift = T::zero();
                {
                    let dplane = dm.slice(ndarray::s![b, c, .., ..]);
                    let hplane = cache.h2.slice(ndarray::s![b, c, .., ..]);
                    for (&d, &h) in dplane.iter().zip(hplane.iter()) {
                        dscale = dscale + d * h;
                        dshift = dshift + d;
                    }
                }
                dss[[b, c]] = dscale;
                dss[[b, self.c_out + c]] = dshift;
                let mut plane = dh2.slice_mut(ndarray::s![b, c, .., ..]);
                plane.mapv_inplace(|v| v * (T::one() + sc));
            }
        }
        let demb = self.film.backward(ps, &cache.film, &dss, grads);

        let dc1 = self.gn2.backward(ps, &cache.gn2, &dh2, grads);
        let da1 = self.conv1.backward(ps, &cache.conv1, &dc1, grads);
        let dh1 = silu_backward(&cache.h1, &da1);
        let mut dx = self.gn1.backward(ps, &cache.gn1, &dh1, grads);

        // Shortcut.
        match (&self.skip, &cache.skip) {
            (Some(conv), Some(c)) => {
                let ds = conv.backward(ps, c, dy, grads);
                dx.zip_mut_with(&ds, |a, &b| *a = *a + b);
            }
            _ => {
                dx.zip_mut_with(dy, |a, &b| *a = *a + b);
            }
        }
        (dx, demb)
    }
}

// =========================================================================
// Full network
// =========================================================================

#[derive(Debug, Clone)]
pub struct UNet {
    pub arch: ArchDescriptor,
    time: TimeEmbedding,
    stem: Conv2d,
    enc: Vec<Vec<ResBlock>>,
    downs: Vec<Conv2d>,
    mid1: ResBlock,
    attn: Option<SelfAttention2d>,
    mid2: ResBlock,
    ups: Vec<Conv2d>, // ups[s]: widths[s+1] → widths[s]
    dec: Vec<Vec<ResBlock>>,
    head_norm: GroupNorm,
    head: Conv2d,
}

pub struct TrunkTape<T> {
    stem: ConvCache<T>,
    enc: Vec<Vec<ResBlockCache<T>>>,
    downs: Vec<ConvCache<T>>,
    mid1: ResBlockCache<T>,
    attn: Option<AttnCache<T>>,
    mid2: ResBlockCache<T>,
    ups: Vec<ConvCache<T>>,
    dec: Vec<Vec<ResBlockCache<T>>>,
    head_gn: GnCache<T>,
    head_pre: Array4<T>,
    head_conv: ConvCache<T>,
    time: TimeEmbedCache<T>,
}

impl UNet {
    /// Builds the network, registering every parameter in a fixed order.
    pub fn new<T: Elem>(
        arch: &ArchDescriptor,
        ps: &mut ParamStore<T>,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        arch.validate().map_err(CoreError::Config)?;
        let mode = if arch.periodic_padding {
            PadMode::Periodic
        } else {
            PadMode::Zero
        };
        let w = &arch.widths;
        let stages = w.len();
        let r = arch.blocks_per_stage;

        let time = TimeEmbedding::new(ps, rng, "time", arch.embed_dim);
        let stem = Conv2d::new(
            ps,
            rng,
            "stem",
            arch.state_channels + arch.cond_channels,
            w[0],
            3,
            1,
            mode,
            Init::Scaled { gain: 1.0 },
        );

        let mut enc = Vec::new();
        let mut downs = Vec::new();
        for s in 0..stages {
            let blocks = (0..r)
                .map(|b| {
                    ResBlock::new(
                        ps,
                        rng,
                        &format!("enc{s}.block{b}"),
                        w[s],
                        w[s],
                        arch.embed_dim,
                        arch.groups,
                        mode,
                    )
                })
                .collect();
            enc.push(blocks);
            if s + 1 < stages {
                downs.push(Conv2d::new(
                    ps,
                    rng,
                    &format!("down{s}"),
                    w[s],
                    w[s + 1],
                    3,
                    2,
                    mode,
                    Init::Scaled { gain: 1.0 },
                ));
            }
        }

        let wl = w[stages - 1];
        let mid1 = ResBlock::new(ps, rng, "mid.block0", wl, wl, arch.embed_dim, arch.groups, mode);
        let attn = arch
            .attention
            .then(|| SelfAttention2d::new(ps, rng, "mid.attn", wl, arch.groups));
        let mid2 = ResBlock::new(ps, rng, "mid.block1", wl, wl, arch.embed_dim, arch.groups, mode);

        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for s in (0..stages - 1).rev() {
            ups.push(Conv2d::new(
                ps,
                rng,
                &format!("up{s}"),
                w[s + 1],
                w[s],
                3,
                1,
                mode,
                Init::Scaled { gain: 1.0 },
            ));
            let blocks = (0..r)
                .map(|b| {
                    let c_in = if b == 0 { 2 * w[s] } else { w[s] };
                    ResBlock::new(
                        ps,
                        rng,
                        &format!("dec{s}.block{b}"),
                        c_in,
                        w[s],
                        arch.embed_dim,
                        arch.groups,
                        mode,
                    )
                })
                .collect();
            dec.push(blocks);
        }
        // Stored coarse-to-fine; index by target stage for clarity.
        ups.reverse();
        dec.reverse();

        let head_norm = GroupNorm::new(ps, "head.norm", w[0], arch.groups);
        let head = Conv2d::new(
            ps,
            rng,
            "head.conv",
            w[0],
            arch.state_channels,
            3,
            1,
            mode,
            Init::Zero,
        );

        Ok(Self {
            arch: arch.clone(),
            time,
            stem,
            enc,
            downs,
            mid1,
            attn,
            mid2,
            ups,
            dec,
            head_norm,
            head,
        })
    }

    /// Raw trunk evaluation on a pre-assembled input (scaled noisy state
    /// concatenated with the condition) and per-sample `c_noise` values.
    pub fn forward_trunk<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        input: &Array4<T>,
        c_noise: &[f64],
        record: bool,
    ) -> Result<(Array4<T>, Option<TrunkTape<T>>)> {
        let (bsz, c_in, h, w) = input.dim();
        let stages = self.arch.widths.len();
        let down_factor = 1usize << (stages - 1);
        if c_in != self.arch.state_channels + self.arch.cond_channels {
            return Err(CoreError::Dimension(format!(
                "trunk expects {} input channels, got {c_in}",
                self.arch.state_channels + self.arch.cond_channels
            )));
        }
        if h % down_factor != 0 || w % down_factor != 0 {
            return Err(CoreError::Dimension(format!(
                "spatial dims {h}x{w} must be divisible by {down_factor} ({stages} stages)"
            )));
        }
        if c_noise.len() != bsz {
            return Err(CoreError::Dimension(format!(
                "{} noise levels for batch of {bsz}",
                c_noise.len()
            )));
        }

        let (emb, time_cache) = self.time.forward(ps, c_noise, record);

        let (mut x, stem_cache) = self.stem.forward(ps, input, record);
        let mut enc_caches = Vec::new();
        let mut down_caches = Vec::new();
        let mut skips: Vec<Array4<T>> = Vec::new();
        for s in 0..stages {
            let mut stage_caches = Vec::new();
            for block in &self.enc[s] {
                let (y, c) = block.forward(ps, &x, &emb, record);
                x = y;
                if let Some(c) = c {
                    stage_caches.push(c);
                }
            }
            enc_caches.push(stage_caches);
            if s + 1 < stages {
                skips.push(x.clone());
                let (y, c) = self.downs[s].forward(ps, &x, record);
                x = y;
                if let Some(c) = c {
                    down_caches.push(c);
                }
            }
        }

        let (y, mid1_cache) = self.mid1.forward(ps, &x, &emb, record);
        x = y;
        let mut attn_cache = None;
        if let Some(attn) = &self.attn {
            let (y, c) = attn.forward(ps, &x, record);
            x = y;
            attn_cache = c;
        }
        let (y, mid2_cache) = self.mid2.forward(ps, &x, &emb, record);
        x = y;

        let mut up_caches: Vec<Option<ConvCache<T>>> = (0..stages - 1).map(|_| None).collect();
        let mut dec_caches: Vec<Vec<ResBlockCache<T>>> = (0..stages - 1).map(|_| Vec::new()).collect();
        for s in (0..stages - 1).rev() {
            x = upsample2_forward(&x);
            let (y, c) = self.ups[s].forward(ps, &x, record);
            up_caches[s] = c;
            x = concat_channels(&y, &skips[s]);
            for block in &self.dec[s] {
                let (y, c) = block.forward(ps, &x, &emb, record);
                x = y;
                if let Some(c) = c {
                    dec_caches[s].push(c);
                }
            }
        }

        let (hn, head_gn_cache) = self.head_norm.forward(ps, &x, record);
        let ha = silu(&hn);
        let (out, head_conv_cache) = self.head.forward(ps, &ha, record);

        let tape = record.then(|| TrunkTape {
            stem: stem_cache.expect("recorded"),
            enc: enc_caches,
            downs: down_caches,
            mid1: mid1_cache.expect("recorded"),
            attn: attn_cache,
            mid2: mid2_cache.expect("recorded"),
            ups: up_caches.into_iter().map(|c| c.expect("recorded")).collect(),
            dec: dec_caches,
            head_gn: head_gn_cache.expect("recorded"),
            head_pre: hn,
            head_conv: head_conv_cache.expect("recorded"),
            time: time_cache.expect("recorded"),
        });
        Ok((out, tape))
    }

    /// Backpropagates trunk gradients into `grads`; activations come from
    /// the tape recorded by [`Self::forward_trunk`].
    pub fn backward_trunk<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        tape: &TrunkTape<T>,
        dout: &Array4<T>,
        grads: &mut GradStore<T>,
    ) {
        let stages = self.arch.widths.len();
        let bsz = dout.dim().0;
        let mut demb_total = Array2::<T>::zeros((bsz, self.arch.embed_dim));

        // Head.
        let dha = self.head.backward(ps, &tape.head_conv, dout, grads);
        let dhn = silu_backward(&tape.head_pre, &dha);
        let mut dx = self.head_norm.backward(ps, &tape.head_gn, &dhn, grads);

        // Decoder, fine to coarse (reverse of forward's coarse-to-fine).
        let mut dskips: Vec<Option<Array4<T>>> = (0..stages - 1).map(|_| None).collect();
        for s in 0..stages - 1 {
            for b in (0..self.dec[s].len()).rev() {
                let (d, demb) = self.dec[s][b].backward(ps, &tape.dec[s][b], &dx, grads);
                dx = d;
                demb_total.zip_mut_with(&demb, |a, &b| *a = *a + b);
            }
            let w_s = self.arch.widths[s];
            let (dup, dskip) = split_channels(&dx, w_s);
            dskips[s] = Some(dskip);
            let dafter_up = self.ups[s].backward(ps, &tape.ups[s], &dup, grads);
            dx = upsample2_backward(&dafter_up);
        }

        // Bottleneck.
        let (d, demb) = self.mid2.backward(ps, &tape.mid2, &dx, grads);
        dx = d;
        demb_total.zip_mut_with(&demb, |a, &b| *a = *a + b);
        if let (Some(attn), Some(cache)) = (&self.attn, &tape.attn) {
            dx = attn.backward(ps, cache, &dx, grads);
        }
        let (d, demb) = self.mid1.backward(ps, &tape.mid1, &dx, grads);
        dx = d;
        demb_total.zip_mut_with(&demb, |a, &b| *a = *a + b);

        // Encoder, coarse to fine.
        for s in (0..stages).rev() {
            if s + 1 < stages {
                dx = self.downs[s].backward(ps, &tape.downs[s], &dx, grads);
                if let Some(dskip) = &dskips[s] {
                    dx.zip_mut_with(dskip, |a, &b| *a = *a + b);
                }
            }
            for b in (0..self.enc[s].len()).rev() {
                let (d, demb) = self.enc[s][b].backward(ps, &tape.enc[s][b], &dx, grads);
                dx = d;
                demb_total.zip_mut_with(&demb, |a, &b| *a = *a + b);
            }
        }

        let _ = self.stem.backward(ps, &tape.stem, &dx, grads);
        self.time.backward(ps, &tape.time, &demb_total, grads);
    }
}

// =========================================================================
// Preconditioned denoiser interface
// =========================================================================

pub struct DenoiseTape<T> {
    trunk: TrunkTape<T>,
    c_out: Vec<f64>,
}

impl UNet {
    /// Evaluates the preconditioned denoiser
    /// `D(x_σ) = c_skip·x_σ + c_out·net(concat(c_in·x_σ, cond), emb(c_noise))`
    /// with one noise level per sample. Only the noisy state is rescaled by
    /// `c_in`; the condition enters unscaled.
    pub fn denoise<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        schedule: &crate::schedule::NoiseSchedule,
        x_sigma: &Array4<T>,
        cond: &Array4<T>,
        sigmas: &[f64],
        record: bool,
    ) -> Result<(Array4<T>, Option<DenoiseTape<T>>)> {
        let (bsz, sc, h, w) = x_sigma.dim();
        let (cb, cc, ch, cw) = cond.dim();
        if sc != self.arch.state_channels || cc != self.arch.cond_channels {
            return Err(CoreError::Dimension(format!(
                "denoise expects {}+{} channels, got {sc}+{cc}",
                self.arch.state_channels, self.arch.cond_channels
            )));
        }
        if cb != bsz || ch != h || cw != w {
            return Err(CoreError::Dimension(format!(
                "condition {cb}x{cc}x{ch}x{cw} does not match state {bsz}x{sc}x{h}x{w}"
            )));
        }
        if sigmas.len() != bsz {
            return Err(CoreError::Dimension(format!(
                "{} noise levels for batch of {bsz}",
                sigmas.len()
            )));
        }

        let coeffs: Vec<_> = sigmas
            .iter()
            .map(|&s| schedule.precond_coeffs(s))
            .collect::<Result<_>>()?;

        let mut scaled = x_sigma.clone();
        for (b, co) in coeffs.iter().enumerate() {
            let c_in = T::of_f64(co.c_in);
            scaled
                .index_axis_mut(Axis(0), b)
                .mapv_inplace(|v| v * c_in);
        }
        let input = concat_channels(&scaled, cond);
        let c_noise: Vec<f64> = coeffs.iter().map(|c| c.c_noise).collect();
        let (net, trunk) = self.forward_trunk(ps, &input, &c_noise, record)?;

        let mut out = net;
        for (b, co) in coeffs.iter().enumerate() {
            let c_skip = T::of_f64(co.c_skip);
            let c_out = T::of_f64(co.c_out);
            let mut plane = out.index_axis_mut(Axis(0), b);
            plane.zip_mut_with(&x_sigma.index_axis(Axis(0), b), |o, &x| {
                *o = c_out * *o + c_skip * x;
            });
        }

        let tape = trunk.map(|trunk| DenoiseTape {
            trunk,
            c_out: coeffs.iter().map(|c| c.c_out).collect(),
        });
        Ok((out, tape))
    }

    /// Backpropagates `∂loss/∂D` into parameter gradients. Gradients with
    /// respect to the noisy state are not needed by any caller (the state is
    /// data, not a parameter) and are discarded.
    pub fn denoise_backward<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        tape: &DenoiseTape<T>,
        d_out: &Array4<T>,
        grads: &mut GradStore<T>,
    ) {
        let mut dnet = d_out.clone();
        for (b, &c_out) in tape.c_out.iter().enumerate() {
            let c = T::of_f64(c_out);
            dnet.index_axis_mut(Axis(0), b).mapv_inplace(|v| v * c);
        }
        self.backward_trunk(ps, &tape.trunk, &dnet, grads);
    }
}

// =========================================================================
// Tests
// =========================================================================
