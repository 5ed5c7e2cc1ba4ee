//! Noise-level conditioning: fixed Fourier features of the logarithmic
//! noise level, refined by a small MLP, then injected into every residual
//! block through per-channel affine modulation (scale and shift).

use ndarray::{Array1, Array2};

use crate::model::ops::{silu, silu_backward, Elem, Init, Linear, LinearCache};
use crate::model::params::{GradStore, ParamStore};

/// Fixed log-spaced frequency bank: `dim/2` frequencies spanning
/// [1, 1000]. The embedded scalar (c_noise = ln σ / 4) varies over a few
/// units, so this bank resolves both slow trends and fine σ differences.
#[derive(Debug, Clone)]
pub struct FourierFeatures {
    pub dim: usize,
    freqs: Vec<f64>,
}

impl FourierFeatures {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
        let half = dim / 2;
        let (f_min, f_max) = (1.0f64, 1000.0f64);
        let freqs = (0..half)
            .map(|k| {
                if half == 1 {
                    f_min
                } else {
                    f_min * (f_max / f_min).powf(k as f64 / (half - 1) as f64)
                }
            })
            .collect();
        Self { dim, freqs }
    }

    /// [sin(c·f_0), …, sin(c·f_{h−1}), cos(c·f_0), …, cos(c·f_{h−1})]
    pub fn embed<T: Elem>(&self, c_noise: f64) -> Array1<T> {
        let half = self.dim / 2;
        let mut out = Array1::<T>::zeros(self.dim);
        for (k, &f) in self.freqs.iter().enumerate() {
            let (s, c) = (c_noise * f).sin_cos();
            out[k] = T::of_f64(s);
            out[half + k] = T::of_f64(c);
        }
        out
    }
}

/// Fourier features followed by a two-layer MLP: (B,) σ values → (B, dim)
/// conditioning vectors shared by all residual blocks.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    pub features: FourierFeatures,
    pub l1: Linear,
    pub l2: Linear,
}

pub struct TimeEmbedCache<T> {
    l1: LinearCache<T>,
    h_pre: Array2<T>,
    l2: LinearCache<T>,
}

impl TimeEmbedding {
    pub fn new<T: Elem>(
        ps: &mut ParamStore<T>,
        rng: &mut impl rand::Rng,
        name: &str,
        dim: usize,
    ) -> Self {
        let features = FourierFeatures::new(dim);
        let l1 = Linear::new(ps, rng, &format!("{name}.l1"), dim, dim, Init::Scaled { gain: 1.0 });
        let l2 = Linear::new(ps, rng, &format!("{name}.l2"), dim, dim, Init::Scaled { gain: 1.0 });
        Self { features, l1, l2 }
    }

    /// `c_noise` values per batch element → (B, dim) embeddings.
    pub fn forward<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        c_noise: &[f64],
        record: bool,
    ) -> (Array2<T>, Option<TimeEmbedCache<T>>) {
        let bsz = c_noise.len();
        let mut raw = Array2::<T>::zeros((bsz, self.features.dim));
        for (b, &cn) in c_noise.iter().enumerate() {
            raw.row_mut(b).assign(&self.features.embed::<T>(cn));
        }
        let (h_pre, l1_cache) = self.l1.forward(ps, &raw, record);
        let h = silu(&h_pre);
        let (out, l2_cache) = self.l2.forward(ps, &h, record);
        let cache = record.then(|| TimeEmbedCache {
            l1: l1_cache.expect("cache recorded"),
            h_pre,
            l2: l2_cache.expect("cache recorded"),
        });
        (out, cache)
    }

    pub fn backward<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        cache: &TimeEmbedCache<T>,
        dout: &Array2<T>,
        grads: &mut GradStore<T>,
    ) {
        let dh = self.l2.backward(ps, &cache.l2, dout, grads);
        let dh_pre = silu_backward(&cache.h_pre, &dh);
        // Gradient stops at the fixed Fourier features.
        let _ = self.l1.backward(ps, &cache.l1, &dh_pre, grads);
    }
}
