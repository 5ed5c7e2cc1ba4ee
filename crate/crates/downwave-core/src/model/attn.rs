//! Single-head spatial self-attention used once at the coarsest resolution.
//!
//! The block is residual: `y = x + proj(attend(norm(x)))` with 1×1
//! projections for query/key/value. The output projection starts at zero so
//! a freshly initialized block is the identity.

use ndarray::{Array2, Array3, Array4, Axis};

use crate::model::ops::{matmul, Elem, Init};
use crate::model::params::{GradStore, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct SelfAttention2d {
    pub norm: super::ops::GroupNorm,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wp: ParamId,
    pub channels: usize,
}

pub struct AttnCache<T> {
    gn: super::ops::GnCache<T>,
    xhat: Array3<T>, // (B, C, N) post-norm activations
    q: Array3<T>,
    k: Array3<T>,
    v: Array3<T>,
    att: Array3<T>, // (B, N, N), rows sum to 1
    y: Array3<T>,   // pre-projection attention output
}

impl SelfAttention2d {
    pub fn new<T: Elem>(
        ps: &mut ParamStore<T>,
        rng: &mut impl rand::Rng,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        let norm = super::ops::GroupNorm::new(ps, &format!("{name}.norm"), channels, groups);
        let gain = Init::Scaled { gain: 1.0 };
        let wq = ps.register(
            format!("{name}.wq"),
            super::ops::draw_matrix::<T>(rng, channels, gain),
        );
        let wk = ps.register(
            format!("{name}.wk"),
            super::ops::draw_matrix::<T>(rng, channels, gain),
        );
        let wv = ps.register(
            format!("{name}.wv"),
            super::ops::draw_matrix::<T>(rng, channels, gain),
        );
        let wp = ps.register(
            format!("{name}.wp"),
            super::ops::draw_matrix::<T>(rng, channels, Init::Zero),
        );
        Self {
            norm,
            wq,
            wk,
            wv,
            wp,
            channels,
        }
    }

    fn weight<'a, T: Elem>(&self, ps: &'a ParamStore<T>, id: ParamId) -> ndarray::ArrayView2<'a, T> {
        ps.get(id)
            .view()
            .into_shape_with_order((self.channels, self.channels))
            .expect("weights are standard layout")
    }

    pub fn forward<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        x: &Array4<T>,
        record: bool,
    ) -> (Array4<T>, Option<AttnCache<T>>) {
        let (bsz, c, h, w) = x.dim();
        let n = h * w;
        let scale = T::of_f64(1.0 / (c as f64).sqrt());
        let (xn, gn_cache) = self.norm.forward(ps, x, record);
        let xhat = xn
            .into_shape_with_order((bsz, c, n))
            .expect("standard layout");

        let mut q = Array3::<T>::zeros((bsz, c, n));
        let mut k = Array3::<T>::zeros((bsz, c, n));
        let mut v = Array3::<T>::zeros((bsz, c, n));
        let mut att = Array3::<T>::zeros((bsz, n, n));
        let mut y = Array3::<T>::zeros((bsz, c, n));
        let (wq, wk, wv) = (
            self.weight(ps, self.wq),
            self.weight(ps, self.wk),
            self.weight(ps, self.wv),
        );
        for b in 0..bsz {
            let xb = xhat.index_axis(Axis(0), b);
            let qb = matmul(&wq, &xb);
            let kb = matmul(&wk, &xb);
            let vb = matmul(&wv, &xb);

            // scores[n, m] = (q_n · k_m)/√C, softmax over m.
            let mut scores = matmul(&qb.t(), &kb.view());
            scores.mapv_inplace(|s| s * scale);
            for mut row in scores.rows_mut() {
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                row.mapv_inplace(|s| (s - max).exp());
                let sum = row.iter().cloned().sum::<T>();
                row.mapv_inplace(|s| s / sum);
            }
            // y[c, n] = Σ_m v[c, m]·att[n, m]
            let yb = matmul(&vb.view(), &scores.t());

            q.index_axis_mut(Axis(0), b).assign(&qb);
            k.index_axis_mut(Axis(0), b).assign(&kb);
            v.index_axis_mut(Axis(0), b).assign(&vb);
            att.index_axis_mut(Axis(0), b).assign(&scores);
            y.index_axis_mut(Axis(0), b).assign(&yb);
        }

        let wp = self.weight(ps, self.wp);
        let mut out = x.clone();
        for b in 0..bsz {
            let ob = matmul(&wp, &y.index_axis(Axis(0), b));
            let ob4 = ob
                .into_shape_with_order((c, h, w))
                .expect("standard layout");
            let mut slot = out.index_axis_mut(Axis(0), b);
            slot.zip_mut_with(&ob4, |o, &p| *o = *o + p);
        }

        let cache = record.then(|| AttnCache {
            gn: gn_cache.expect("norm cache recorded alongside"),
            xhat,
            q,
            k,
            v,
            att,
            y,
        });
        (out, cache)
    }

    pub fn backward<T: Elem>(
        &self,
        ps: &ParamStore<T>,
        cache: &AttnCache<T>,
        dy_out: &Array4<T>,
        grads: &mut GradStore<T>,
    ) -> Array4<T> {
        let (bsz, c, h, w) = dy_out.dim();
        let n = h * w;
        let scale = T::of_f64(1.0 / (c as f64).sqrt());
        let wp = self.weight(ps, self.wp);
        let (wq, wk, wv) = (
            self.weight(ps, self.wq),
            self.weight(ps, self.wk),
            self.weight(ps, self.wv),
        );

        let mut dwq = Array2::<T>::zeros((c, c));
        let mut dwk = Array2::<T>::zeros((c, c));
        let mut dwv = Array2::<T>::zeros((c, c));
        let mut dwp = Array2::<T>::zeros((c, c));
        let mut dxhat = Array3::<T>::zeros((bsz, c, n));

        for b in 0..bsz {
            let dout = dy_out
                .index_axis(Axis(0), b)
                .into_shape_with_order((c, n))
                .expect("standard layout");
            let yb = cache.y.index_axis(Axis(0), b);
            let att = cache.att.index_axis(Axis(0), b);
            let (qb, kb, vb) = (
                cache.q.index_axis(Axis(0), b),
                cache.k.index_axis(Axis(0), b),
                cache.v.index_axis(Axis(0), b),
            );
            let xb = cache.xhat.index_axis(Axis(0), b);

            // Projection.
            dwp = dwp + matmul(&dout, &yb.t());
            let dy = matmul(&wp.t(), &dout); // (C, N)

            // y = v·attᵀ.
            let dv = matmul(&dy.view(), &att);
            let datt = matmul(&dy.t(), &vb); // (N, M)

            // Softmax rows: ds = att ⊙ (datt − rowsum(datt ⊙ att)).
            let mut ds = datt;
            for (mut drow, arow) in ds.rows_mut().into_iter().zip(att.rows()) {
                let dot = drow
                    .iter()
                    .zip(arow.iter())
                    .map(|(&d, &a)| d * a)
                    .sum::<T>();
                ndarray::Zip::from(&mut drow).and(&arow).for_each(|d, &a| {
                    *d = a * (*d - dot);
                });
            }
            ds.mapv_inplace(|s| s * scale);

            // scores = qᵀk: dq = k·dsᵀ, dk = q·ds.
            let dq = matmul(&kb, &ds.t());
            let dk = matmul(&qb, &ds.view());

            // 1×1 projections back to x̂.
            dwq = dwq + matmul(&dq.view(), &xb.t());
            dwk = dwk + matmul(&dk.view(), &xb.t());
            dwv = dwv + matmul(&dv.view(), &xb.t());
            let dxb = matmul(&wq.t(), &dq.view())
                + matmul(&wk.t(), &dk.view())
                + matmul(&wv.t(), &dv.view());
            dxhat.index_axis_mut(Axis(0), b).assign(&dxb);
        }

        grads.accumulate(self.wq, &dwq.into_dyn());
        grads.accumulate(self.wk, &dwk.into_dyn());
        grads.accumulate(self.wv, &dwv.into_dyn());
        grads.accumulate(self.wp, &dwp.into_dyn());

        let dxhat4 = dxhat
            .into_shape_with_order((bsz, c, h, w))
            .expect("standard layout");
        let dnorm = self.norm.backward(ps, &cache.gn, &dxhat4, grads);
        // Residual path.
        dnorm + dy_out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn zero_projection_makes_fresh_block_identity() {
        let mut rng = crate::rng::stream(1, "attn-test", 0);
        let mut ps = ParamStore::<f64>::new();
        let attn = SelfAttention2d::new(&mut ps, &mut rng, "a", 4, 2);
        let x = Array4::from_shape_fn((2, 4, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let (y, _) = attn.forward(&ps, &x, false);
        assert_eq!(x, y);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = crate::rng::stream(2, "attn-test", 0);
        let mut ps = ParamStore::<f64>::new();
        let attn = SelfAttention2d::new(&mut ps, &mut rng, "a", 4, 2);
        let x = Array4::from_shape_fn((1, 4, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let (_, cache) = attn.forward(&ps, &x, true);
        let att = &cache.unwrap().att;
        for row in att.index_axis(Axis(0), 0).rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
            assert!(row.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(3, "attn-test", 0);
        let mut ps = ParamStore::<f64>::new();
        let attn = SelfAttention2d::new(&mut ps, &mut rng, "a", 4, 2);
        // Randomize the zero-initialized projection so its path carries
        // gradient signal.
        for v in ps.get_mut(attn.wp).iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let x = Array4::from_shape_fn((2, 4, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let proj = Array4::from_shape_fn((2, 4, 3, 3), |_| rng.gen_range(-1.0..1.0));

        let (_, cache) = attn.forward(&ps, &x, true);
        let mut grads = GradStore::zeros_like(&ps);
        let dx = attn.backward(&ps, cache.as_ref().unwrap(), &proj, &mut grads);

        let loss = |p: &ParamStore<f64>, xin: &Array4<f64>| -> f64 {
            (&attn.forward(p, xin, false).0 * &proj).sum()
        };
        let h = 1e-6;

        // One probe per weight matrix.
        for (id, idx) in [(attn.wq, 3), (attn.wk, 5), (attn.wv, 7), (attn.wp, 2)] {
            let mut pp = ps.clone();
            pp.get_mut(id).as_slice_mut().unwrap()[idx] += h;
            let mut pm = ps.clone();
            pm.get_mut(id).as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            let an = grads.get(id).as_slice().unwrap()[idx];
            assert_abs_diff_eq!(an, fd, epsilon = 1e-6);
        }

        // Input probe.
        let mut xp = x.clone();
        xp[[1, 2, 1, 1]] += h;
        let mut xm = x.clone();
        xm[[1, 2, 1, 1]] -= h;
        let fd = (loss(&ps, &xp) - loss(&ps, &xm)) / (2.0 * h);
        assert_abs_diff_eq!(dx[[1, 2, 1, 1]], fd, epsilon = 1e-6);
    }
}
