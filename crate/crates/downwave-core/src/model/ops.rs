//! Differentiable tensor operations for the denoiser network.
//!
//! Every op comes as a forward pass that optionally records a cache and a
//! backward pass that consumes the cache, accumulates parameter gradients
//! into a [`GradStore`], and returns the input gradient. Gradients are
//! derived by hand; a finite-difference harness validates them end to end.
//!
//! Convolutions lower onto GEMM via im2col so the single-threaded matrix
//! kernel does the heavy lifting. All ops are generic over `f32`/`f64`:
//! training runs in `f32`, gradient checks in `f64`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::model::params::{GradStore, ParamId, ParamStore};

/// Scalar element of all model tensors.
pub trait Elem:
    ndarray::NdFloat + ndarray::LinalgScalar + num_traits::FromPrimitive + std::iter::Sum
{
    fn of_f64(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }
    fn into_f64(self) -> f64;
}

impl Elem for f32 {
    fn into_f64(self) -> f64 {
        self as f64
    }
}
impl Elem for f64 {
    fn into_f64(self) -> f64 {
        self
    }
}

/// Border handling of convolutions. `Periodic` wraps indices (used by the
/// translation-equivariance tests); `Zero` is the training default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Periodic,
}

/// Weight initialization flavors.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with std = gain/√fan_in.
    Scaled { gain: f64 },
    /// All zeros (output layers start as the identity/skip path).
    Zero,
}

fn draw_tensor<T: Elem>(rng: &mut impl rand::Rng, shape: Vec<usize>, init: Init) -> ndarray::ArrayD<T> {
    match init {
        Init::Zero => ndarray::ArrayD::zeros(shape),
        Init::Scaled { gain } => {
            let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
            let std = gain / (fan_in as f64).sqrt();
            ndarray::ArrayD::from_shape_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of_f64(z * std)
            })
        }
    }
}

/// Square C×C weight matrix for 1×1 projections.
pub fn draw_matrix<T: Elem>(
    rng: &mut impl rand::Rng,
    channels: usize,
    init: Init,
) -> ndarray::ArrayD<T> {
    draw_tensor(rng, vec![channels, channels], init)
}

/// C = A·B allocated fresh.
pub fn matmul<T: Elem>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Array2<T> {
    let mut c = Array2::<T>::zeros((a.nrows(), b.ncols()));
    general_mat_mul(T::one(), a, b, T::zero(), &mut c);
    c
}

// =========================================================================
// im2col / col2im
// =========================================================================

/// Unfolds x (B, C, H, W) into columns (C·k·k, B·Ho·Wo) so convolution
/// becomes one GEMM. Out-of-range taps read zero (`Zero`) or wrap
/// (`Periodic`).
#[allow(clippy::too_many_arguments)]
fn im2col<T: Elem>(
    x: &Array4<T>,
    k: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    ho: usize,
    wo: usize,
) -> Array2<T> {
    let (bsz, c_in, h, w) = x.dim();
    let mut cols = Array2::<T>::zeros((c_in * k * k, bsz * ho * wo));
    let xs = x.as_slice().expect("input is standard layout");
    let cols_w = bsz * ho * wo;
    let cs = cols.as_slice_mut().expect("fresh array is standard layout");

    for row in 0..c_in * k * k {
        let c = row / (k * k);
        let ki = (row / k) % k;
        let kj = row % k;
        let row_off = row * cols_w;
        for b in 0..bsz {
            let x_plane = (b * c_in + c) * h * w;
            let col_b = row_off + b * ho * wo;
            for i in 0..ho {
                let si = (i * stride + ki) as isize - pad as isize;
                let si = match mode {
                    PadMode::Zero => {
                        if si < 0 || si >= h as isize {
                            continue; // stays zero
                        }
                        si as usize
                    }
                    PadMode::Periodic => si.rem_euclid(h as isize) as usize,
                };
                let x_row = x_plane + si * w;
                let col_row = col_b + i * wo;
                match mode {
                    PadMode::Zero => {
                        // Contiguous for stride 1; strided gather otherwise.
                        for j in 0..wo {
                            let sj = (j * stride + kj) as isize - pad as isize;
                            if sj >= 0 && sj < w as isize {
                                cs[col_row + j] = xs[x_row + sj as usize];
                            }
                        }
                    }
                    PadMode::Periodic => {
                        for j in 0..wo {
                            let sj = ((j * stride + kj) as isize - pad as isize)
                                .rem_euclid(w as isize) as usize;
                            cs[col_row + j] = xs[x_row + sj];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Elem>(
    dcols: &Array2<T>,
    shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    ho: usize,
    wo: usize,
) -> Array4<T> {
    let (bsz, c_in, h, w) = shape;
    let mut dx = Array4::<T>::zeros(shape);
    let ds = dcols.as_slice().expect("gradient columns are standard layout");
    let cols_w = bsz * ho * wo;
    let dxs = dx.as_slice_mut().expect("fresh array is standard layout");

    for row in 0..c_in * k * k {
        let c = row / (k * k);
        let ki = (row / k) % k;
        let kj = row % k;
        let row_off = row * cols_w;
        for b in 0..bsz {
            let x_plane = (b * c_in + c) * h * w;
            let col_b = row_off + b * ho * wo;
            for i in 0..ho {
                let si = (i * stride + ki) as isize - pad as isize;
                let si = match mode {
                    PadMode::Zero => {
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        si as usize
                    }
                    PadMode::Periodic => si.rem_euclid(h as isize) as usize,
                };
                let x_row = x_plane + si * w;
                let col_row = col_b + i * wo;
                for j in 0..wo {
                    let sj = (j * stride + kj) as isize - pad as isize;
                    let sj = match mode {
                        PadMode::Zero => {
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            sj as usize
                        }
                        PadMode::Periodic => sj.rem_euclid(w as isize) as usize,
                    };
                    dxs[x_row + sj] = dxs[x_row + sj] + ds[col_row + j];
                }
            }
        }
    }
    dx
}

// =========================================================================
// Conv2d
// =========================================================================

/// 2D convolution with square kernel and bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

/// Cached forward inputs for the backward pass (columns are recomputed to
/// keep the activation tape small).
pub struct ConvCache<T> {
    x: Array4<T>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Elem>(
        ps: &mut ParamStore<T>,
        rng: &mut impl rand::Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        mode: PadMode,
        init: Init,
    ) -> Self {
        let w = ps.register(
            format!("{name}.w"),
            draw_tensor(rng, vec![c_out, c_in, k, k], init),
        );
        let b = ps.register(format!("{name}.b"), ndarray::ArrayD::zeros(vec![c_out]));
        Self {
            w,
            b,
            c_in,
            c_out,
            k,
            stride,
            pad: k / 2,
            mode,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match self.mode {
            PadMode::Zero => (
                (h + 2 * self.pad - self.k) / self.stride + 1,
                (w + 2 * self.pad - self.k) / self.stride + 1,
            ),
            // Circular "same" convolution downsamples exactly by the stride.
            PadMode::Periodic => (h / self.stride, w / self.stride),
        }
    }

    pub fn forward<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        x: &Array4<T>,
        record: bool,
    ) -> (Array4<T>, Option<ConvCache<T>>) {
        let (bsz, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "conv input channels");
        let (ho, wo) = self.out_dims(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad, self.mode, ho, wo);
        let w2 = ps
            .get(self.w)
            .view()
            .into_shape_with_order((self.c_out, self.c_in * self.k * self.k))
            .expect("weights are standard layout");
        let mut y2 = matmul(&w2, &cols.view());
        let bias = ps.get(self.b);
        for (c, mut row) in y2.rows_mut().into_iter().enumerate() {
            let bc = bias[[c]];
            row.mapv_inplace(|v| v + bc);
        }
        // (Cout, B·Ho·Wo) → (B, Cout, Ho, Wo)
        let y = y2
            .into_shape_with_order((self.c_out, bsz, ho, wo))
            .expect("gemm output is standard layout")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned();
        let cache = record.then(|| ConvCache { x: x.clone() });
        (y, cache)
    }

    pub fn backward<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        cache: &ConvCache<T>,
        dy: &Array4<T>,
        grads: &mut GradStore<T>,
    ) -> Array4<T> {
        let (bsz, _, h, w) = cache.x.dim();
        let (_, c_out, ho, wo) = dy.dim();
        assert_eq!(c_out, self.c_out);

        // (B, Cout, Ho, Wo) → (Cout, B·Ho·Wo)
        let dy2 = dy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.c_out, bsz * ho * wo))
            .expect("standard layout");

        // Weight/bias gradients.
        let cols = im2col(&cache.x, self.k, self.stride, self.pad, self.mode, ho, wo);
        let dw = matmul(&dy2.view(), &cols.t());
        grads.accumulate(
            self.w,
            &dw.into_shape_with_order(ndarray::IxDyn(&[
                self.c_out,
                self.c_in,
                self.k,
                self.k,
            ]))
            .expect("gemm output is standard layout"),
        );
        let db = dy2.sum_axis(Axis(1));
        grads.accumulate(self.b, &db.into_dyn());

        // Input gradient.
        let w2 = ps
            .get(self.w)
            .view()
            .into_shape_with_order((self.c_out, self.c_in * self.k * self.k))
            .expect("weights are standard layout");
        let dcols = matmul(&w2.t(), &dy2.view());
        col2im(
            &dcols,
            (bsz, self.c_in, h, w),
            self.k,
            self.stride,
            self.pad,
            self.mode,
            ho,
            wo,
        )
    }
}

// =========================================================================
// GroupNorm
// =========================================================================

const GN_EPS: f64 = 1e-5;

/// Group normalization with learned per-channel scale and shift. Statistics
/// pool over (channels-in-group × H × W) per sample, so the op is invariant
/// to spatial shifts — important for the equivariance guarantees.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

pub struct GnCache<T> {
    xhat: Array4<T>,
    inv_std: Array2<T>, // (B, groups)
}

impl GroupNorm {
    pub fn new<T: Elem>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        assert!(
            groups >= 1 && channels % groups == 0,
            "channels {channels} must be divisible by groups {groups}"
        );
        let gamma = ps.register(
            format!("{name}.gamma"),
            ndarray::ArrayD::from_elem(vec![channels], T::one()),
        );
        let beta = ps.register(format!("{name}.beta"), ndarray::ArrayD::zeros(vec![channels]));
        Self {
            gamma,
            beta,
            channels,
            groups,
        }
    }

    pub fn forward<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        x: &Array4<T>,
        record: bool,
    ) -> (Array4<T>, Option<GnCache<T>>) {
        let (bsz, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "groupnorm channels");
        let cs = c / self.groups;
        let n = (cs * h * w) as f64;
        let mut xhat = Array4::<T>::zeros((bsz, c, h, w));
        let mut inv_std = Array2::<T>::zeros((bsz, self.groups));
        for b in 0..bsz {
            for g in 0..self.groups {
                let sl = ndarray::s![b, g * cs..(g + 1) * cs, .., ..];
                let xg = x.slice(sl);
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for &v in xg.iter() {
                    let v = v.into_f64();
                    sum += v;
                    sumsq += v * v;
                }
                let mean = sum / n;
                let var = (sumsq / n - mean * mean).max(0.0);
                let istd = 1.0 / (var + GN_EPS).sqrt();
                inv_std[[b, g]] = T::of_f64(istd);
                let mean_t = T::of_f64(mean);
                let istd_t = T::of_f64(istd);
                let mut out = xhat.slice_mut(sl);
                out.assign(&xg);
                out.mapv_inplace(|v| (v - mean_t) * istd_t);
            }
        }
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let mut y = xhat.clone();
        for ci in 0..c {
            let (g, bta) = (gamma[[ci]], beta[[ci]]);
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * g + bta);
        }
        let cache = record.then(|| GnCache { xhat, inv_std });
        (y, cache)
    }

    pub fn backward<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        cache: &GnCache<T>,
        dy: &Array4<T>,
        grads: &mut GradStore<T>,
    ) -> Array4<T> {
        let (bsz, c, h, w) = dy.dim();
        let cs = c / self.groups;
        let n = T::of_f64((cs * h * w) as f64);

        // Parameter gradients.
        let mut dgamma = Array1::<T>::zeros(c);
        let mut dbeta = Array1::<T>::zeros(c);
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(1), ci);
            let xc = cache.xhat.index_axis(Axis(1), ci);
            let mut dg = T::zero();
            let mut db = T::zero();
            for (&d, &xh) in dyc.iter().zip(xc.iter()) {
                dg = dg + d * xh;
                db = db + d;
            }
            dgamma[ci] = dg;
            dbeta[ci] = db;
        }
        grads.accumulate(self.gamma, &dgamma.into_dyn());
        grads.accumulate(self.beta, &dbeta.into_dyn());

        // Input gradient: dx = istd·(dxhat − mean(dxhat) − xhat·mean(dxhat·xhat))
        // per (sample, group), with dxhat = dy·γ.
        let gamma = ps.get(self.gamma);
        let mut dx = Array4::<T>::zeros((bsz, c, h, w));
        for b in 0..bsz {
            for g in 0..self.groups {
                let sl = ndarray::s![b, g * cs..(g + 1) * cs, .., ..];
                let dyg = dy.slice(sl);
                let xhg = cache.xhat.slice(sl);
                let mut mean_dxhat = T::zero();
                let mut mean_dxhat_xhat = T::zero();
                for (ci, (drow, xrow)) in dyg
                    .axis_iter(Axis(0))
                    .zip(xhg.axis_iter(Axis(0)))
                    .enumerate()
                {
                    let gam = gamma[[g * cs + ci]];
                    for (&d, &xh) in drow.iter().zip(xrow.iter()) {
                        let dxh = d * gam;
                        mean_dxhat = mean_dxhat + dxh;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxh * xh;
                    }
                }
                mean_dxhat = mean_dxhat / n;
                mean_dxhat_xhat = mean_dxhat_xhat / n;
                let istd = cache.inv_std[[b, g]];
                let mut dxg = dx.slice_mut(sl);
                for (ci, (mut drow, (dyrow, xrow))) in dxg
                    .axis_iter_mut(Axis(0))
                    .zip(dyg.axis_iter(Axis(0)).zip(xhg.axis_iter(Axis(0))))
                    .enumerate()
                {
                    let gam = gamma[[g * cs + ci]];
                    ndarray::Zip::from(&mut drow)
                        .and(&dyrow)
                        .and(&xrow)
                        .for_each(|o, &d, &xh| {
                            *o = istd * (d * gam - mean_dxhat - xh * mean_dxhat_xhat);
                        });
                }
            }
        }
        dx
    }
}

// =========================================================================
// SiLU
// =========================================================================

fn sigmoid<T: Elem>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// y = x·sigmoid(x), elementwise on any array.
pub fn silu<T: Elem, D: ndarray::Dimension>(x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    x.mapv(|v| v * sigmoid(v))
}

/// dL/dx given dL/dy and the forward input.
pub fn silu_backward<T: Elem, D: ndarray::Dimension>(
    x: &ndarray::Array<T, D>,
    dy: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d = *d * (s * (T::one() + v * (T::one() - s)));
    });
    dx
}

// =========================================================================
// Linear
// =========================================================================

/// Fully connected layer on (B, in) activations.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

pub struct LinearCache<T> {
    x: Array2<T>,
}

impl Linear {
    pub fn new<T: Elem>(
        ps: &mut ParamStore<T>,
        rng: &mut impl rand::Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        init: Init,
    ) -> Self {
        let w = ps.register(format!("{name}.w"), draw_tensor(rng, vec![c_out, c_in], init));
        let b = ps.register(format!("{name}.b"), ndarray::ArrayD::zeros(vec![c_out]));
        Self { w, b, c_in, c_out }
    }

    pub fn forward<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        x: &Array2<T>,
        record: bool,
    ) -> (Array2<T>, Option<LinearCache<T>>) {
        assert_eq!(x.ncols(), self.c_in, "linear input width");
        let w = ps
            .get(self.w)
            .view()
            .into_shape_with_order((self.c_out, self.c_in))
            .expect("weights are standard layout");
        let mut y = matmul(&x.view(), &w.t());
        let bias = ps.get(self.b);
        for mut row in y.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v + bias[[c]];
            }
        }
        let cache = record.then(|| LinearCache { x: x.clone() });
        (y, cache)
    }

    pub fn backward<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        cache: &LinearCache<T>,
        dy: &Array2<T>,
        grads: &mut GradStore<T>,
    ) -> Array2<T> {
        let dw = matmul(&dy.t(), &cache.x.view());
        grads.accumulate(self.w, &dw.into_dyn());
        let db = dy.sum_axis(Axis(0));
        grads.accumulate(self.b, &db.into_dyn());
        let w = ps
            .get(self.w)
            .view()
            .into_shape_with_order((self.c_out, self.c_in))
            .expect("weights are standard layout");
        matmul(&dy.view(), &w)
    }
}

// =========================================================================
// Nearest-neighbor upsampling (×2)
// =========================================================================

/// Each input pixel becomes a 2×2 block.
pub fn upsample2_forward<T: Elem>(x: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<T>::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[bi, ci, i, j]];
                    y[[bi, ci, 2 * i, 2 * j]] = v;
                    y[[bi, ci, 2 * i, 2 * j + 1]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y
}

/// Adjoint: sums gradients over each replicated 2×2 block.
pub fn upsample2_backward<T: Elem>(dy: &Array4<T>) -> Array4<T> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<T>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dx[[bi, ci, i, j]] = dy[[bi, ci, 2 * i, 2 * j]]
                        + dy[[bi, ci, 2 * i, 2 * j + 1]]
                        + dy[[bi, ci, 2 * i + 1, 2 * j]]
                        + dy[[bi, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    dx
}

// =========================================================================
// Channel concat / split
// =========================================================================

/// Channel concatenation with a guaranteed standard-layout result (the
/// convolution kernels take contiguous slices of their inputs).
pub fn concat_channels<T: Elem>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    let (bsz, ca, h, w) = a.dim();
    let (b2, cb, h2, w2) = b.dim();
    assert_eq!((bsz, h, w), (b2, h2, w2), "matching batch/spatial dims");
    let mut out = Array4::zeros((bsz, ca + cb, h, w));
    out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(b);
    out
}

pub fn split_channels<T: Elem>(d: &Array4<T>, c_first: usize) -> (Array4<T>, Array4<T>) {
    let a = d.slice(ndarray::s![.., ..c_first, .., ..]).to_owned();
    let b = d.slice(ndarray::s![.., c_first.., .., ..]).to_owned();
    (a, b)
}

// =========================================================================
// Tests
// =========================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{GradStore, ParamStore};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn rng() -> impl rand::Rng {
        crate::rng::stream(7, "ops-test", 0)
    }

    fn random4(r: &mut impl Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    /// Central finite differences of a scalar loss wrt one parameter entry.
    fn fd_param<F: FnMut(&ParamStore<f64>) -> f64>(
        ps: &ParamStore<f64>,
        id: ParamId,
        idx: usize,
        mut loss: F,
    ) -> f64 {
        let h = 1e-5;
        let mut plus = ps.clone();
        plus.get_mut(id).as_slice_mut().unwrap()[idx] += h;
        let mut minus = ps.clone();
        minus.get_mut(id).as_slice_mut().unwrap()[idx] -= h;
        (loss(&plus) - loss(&minus)) / (2.0 * h)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for mode in [PadMode::Zero, PadMode::Periodic] {
            for stride in [1usize, 2] {
                let mut r = rng();
                let mut ps = ParamStore::<f64>::new();
                let conv = Conv2d::new(&mut ps, &mut r, "c", 3, 4, 3, stride, mode, Init::Scaled { gain: 1.0 });
                let x = random4(&mut r, (2, 3, 6, 6));
                // Fixed projection makes the loss a deterministic scalar.
                let (y0, _) = conv.forward(&ps, &x, false);
                let proj = random4(&mut r, y0.dim());
                let loss = |p: &ParamStore<f64>| -> f64 {
                    let (y, _) = conv.forward(p, &x, false);
                    (&y * &proj).sum()
                };

                let (_, cache) = conv.forward(&ps, &x, true);
                let mut grads = GradStore::zeros_like(&ps);
                let dx = conv.backward(&ps, cache.as_ref().unwrap(), &proj, &mut grads);

                // Parameter gradient probes.
                for idx in [0usize, 7, 20] {
                    let fd = fd_param(&ps, conv.w, idx, loss);
                    let an = grads.get(conv.w).as_slice().unwrap()[idx];
                    assert_abs_diff_eq!(an, fd, epsilon = 1e-6);
                }
                let fdb = fd_param(&ps, conv.b, 1, loss);
                assert_abs_diff_eq!(grads.get(conv.b).as_slice().unwrap()[1], fdb, epsilon = 1e-6);

                // Input gradient probe.
                let h = 1e-5;
                let mut xp = x.clone();
                xp[[1, 2, 3, 3]] += h;
                let mut xm = x.clone();
                xm[[1, 2, 3, 3]] -= h;
                let lp = {
                    let (y, _) = conv.forward(&ps, &xp, false);
                    (&y * &proj).sum()
                };
                let lm = {
                    let (y, _) = conv.forward(&ps, &xm, false);
                    (&y * &proj).sum()
                };
                assert_abs_diff_eq!(dx[[1, 2, 3, 3]], (lp - lm) / (2.0 * h), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn groupnorm_normalizes_and_matches_finite_differences() {
        let mut r = rng();
        let mut ps = ParamStore::<f64>::new();
        let gn = GroupNorm::new(&mut ps, "gn", 4, 2);
        let x = random4(&mut r, (2, 4, 3, 3));
        let (y, cache) = gn.forward(&ps, &x, true);

        // Unit statistics per (sample, group) at γ=1, β=0.
        for b in 0..2 {
            for g in 0..2 {
                let yg = y.slice(ndarray::s![b, 2 * g..2 * g + 2, .., ..]);
                let n = yg.len() as f64;
                let mean: f64 = yg.iter().sum::<f64>() / n;
                let var: f64 = yg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-10);
                assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
            }
        }

        let proj = random4(&mut r, y.dim());
        let mut grads = GradStore::zeros_like(&ps);
        let dx = gn.backward(&ps, cache.as_ref().unwrap(), &proj, &mut grads);
        let h = 1e-6;
        let mut xp = x.clone();
        xp[[0, 1, 2, 2]] += h;
        let mut xm = x.clone();
        xm[[0, 1, 2, 2]] -= h;
        let lp = (&gn.forward(&ps, &xp, false).0 * &proj).sum();
        let lm = (&gn.forward(&ps, &xm, false).0 * &proj).sum();
        assert_abs_diff_eq!(dx[[0, 1, 2, 2]], (lp - lm) / (2.0 * h), epsilon = 1e-5);

        let fdg = fd_param(&ps, gn.gamma, 1, |p| (&gn.forward(p, &x, false).0 * &proj).sum());
        assert_abs_diff_eq!(
            grads.get(gn.gamma).as_slice().unwrap()[1],
            fdg,
            epsilon = 1e-6
        );
    }

    #[test]
    fn silu_and_linear_backward_match_finite_differences() {
        let mut r = rng();
        // SiLU.
        let x = Array2::from_shape_fn((3, 5), |_| r.gen_range(-2.0..2.0f64));
        let proj = Array2::from_shape_fn((3, 5), |_| r.gen_range(-1.0..1.0f64));
        let dx = silu_backward(&x, &proj);
        let h = 1e-6;
        let mut xp = x.clone();
        xp[[1, 3]] += h;
        let mut xm = x.clone();
        xm[[1, 3]] -= h;
        let fd = ((&silu(&xp) * &proj).sum() - (&silu(&xm) * &proj).sum()) / (2.0 * h);
        assert_abs_diff_eq!(dx[[1, 3]], fd, epsilon = 1e-6);

        // Linear.
        let mut ps = ParamStore::<f64>::new();
        let lin = Linear::new(&mut ps, &mut r, "l", 5, 4, Init::Scaled { gain: 1.0 });
        let (y, cache) = lin.forward(&ps, &x, true);
        let projy = Array2::from_shape_fn(y.dim(), |_| r.gen_range(-1.0..1.0f64));
        let mut grads = GradStore::zeros_like(&ps);
        let dxl = lin.backward(&ps, cache.as_ref().unwrap(), &projy, &mut grads);
        let fdw = fd_param(&ps, lin.w, 3, |p| (&lin.forward(p, &x, false).0 * &projy).sum());
        assert_abs_diff_eq!(grads.get(lin.w).as_slice().unwrap()[3], fdw, epsilon = 1e-6);
        let mut xp = x.clone();
        xp[[2, 1]] += h;
        let mut xm = x.clone();
        xm[[2, 1]] -= h;
        let fdx = ((&lin.forward(&ps, &xp, false).0 * &projy).sum()
            - (&lin.forward(&ps, &xm, false).0 * &projy).sum())
            / (2.0 * h);
        assert_abs_diff_eq!(dxl[[2, 1]], fdx, epsilon = 1e-6);
    }

    #[test]
    fn upsample_round_trip_and_adjoint() {
        let mut r = rng();
        let x = random4(&mut r, (1, 2, 3, 3));
        let y = upsample2_forward(&x);
        assert_eq!(y.dim(), (1, 2, 6, 6));
        assert_eq!(y[[0, 1, 4, 5]], x[[0, 1, 2, 2]]);
        // <up(x), y> = <x, up^T(y)> — the defining adjoint property.
        let dy = random4(&mut r, (1, 2, 6, 6));
        let lhs = (&y * &dy).sum();
        let rhs = (&x * &upsample2_backward(&dy)).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut r = rng();
        let a = random4(&mut r, (2, 3, 4, 4));
        let b = random4(&mut r, (2, 2, 4, 4));
        let cat = concat_channels(&a, &b);
        assert_eq!(cat.dim(), (2, 5, 4, 4));
        let (a2, b2) = split_channels(&cat, 3);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
