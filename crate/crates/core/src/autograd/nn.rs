//! Matrix products, normalizations and softmax.

use super::scalar::{gemm, MatView};
use super::{Scalar, Tensor, Var};

fn split_batch(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "matmul operand needs rank >= 2, got {shape:?}");
    let r = shape.len();
    (shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1])
}

impl<T: Scalar> Var<T> {
    /// Batched `op(self) * op(other)` where `op` optionally transposes the
    /// trailing two axes. Leading axes are batch axes; an operand with a
    /// single batch element is broadcast over the other's batch.
    pub fn matmul(&self, other: &Var<T>, ta: bool, tb: bool) -> Var<T> {
        let (ba, ra, ca) = split_batch(self.shape());
        let (bb, rb, cb) = split_batch(other.shape());
        assert!(ba == bb || ba == 1 || bb == 1, "matmul batch mismatch {:?} x {:?}", self.shape(), other.shape());
        let batch = ba.max(bb);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?} (ta={ta}, tb={tb})", self.shape(), other.shape());

        let lead = if ba >= bb { self.shape() } else { other.shape() };
        let mut out_shape: Vec<usize> = lead[..lead.len() - 2].to_vec();
        out_shape.extend([m, n]);

        let view_a = move |i: usize| {
            let v = MatView::row_major(if ba == 1 { 0 } else { i * ra * ca }, ra, ca);
            if ta {
                v.t()
            } else {
                v
            }
        };
        let view_b = move |i: usize| {
            let v = MatView::row_major(if bb == 1 { 0 } else { i * rb * cb }, rb, cb);
            if tb {
                v.t()
            } else {
                v
            }
        };

        let (a, b) = (self.value().clone(), other.value().clone());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(T::one(), a.data(), view_a(i), b.data(), view_b(i), T::zero(), &mut out, MatView::row_major(i * m * n, m, n));
        }
        Var::from_op(Tensor::from_vec(&out_shape, out), vec![self.clone(), other.clone()], move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                let mut buf = vec![T::zero(); a.numel()];
                for i in 0..batch {
                    let gv = MatView::row_major(i * m * n, m, n);
                    gemm(T::one(), gd, gv, b.data(), view_b(i).t(), T::one(), &mut buf, view_a(i));
                }
                Tensor::from_vec(a.shape(), buf)
            });
            let gb = needs[1].then(|| {
                let mut buf = vec![T::zero(); b.numel()];
                for i in 0..batch {
                    let gv = MatView::row_major(i * m * n, m, n);
                    gemm(T::one(), a.data(), view_a(i).t(), gd, gv, T::one(), &mut buf, view_b(i));
                }
                Tensor::from_vec(b.shape(), buf)
            });
            vec![ga, gb]
        })
    }

    /// `x * w^T + b` over the last axis, with `w` shaped `[out, in]`.
    pub fn linear(&self, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
        let y = self.matmul(w, false, true);
        match b {
            Some(b) => {
                let mut bs = vec![1; y.shape().len()];
                *bs.last_mut().unwrap() = b.shape()[0];
                y.add(&b.reshape(&bs))
            }
            None => y,
        }
    }

    pub fn softmax_last(&self) -> Var<T> {
        let l = *self.shape().last().expect("rank >= 1");
        let mut y = self.value().data().to_vec();
        for row in y.chunks_mut(l) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            let inv = T::one() / s;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let y = Tensor::from_vec(self.shape(), y);
        let ys = y.clone();
        Var::from_op(y, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); ys.numel()];
            for ((gr, yr), out) in g.data().chunks(l).zip(ys.data().chunks(l)).zip(gx.chunks_mut(l)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_vec(ys.shape(), gx))]
        })
    }

    /// `x / max(|x|, eps)` along the last axis.
    pub fn l2_normalize_last(&self, eps: T) -> Var<T> {
        self.l2_normalize_impl(eps, false)
    }

    /// `x / |x|` along the last axis; rows with `|x| < threshold` become exactly zero.
    pub fn l2_normalize_or_zero(&self, threshold: T) -> Var<T> {
        self.l2_normalize_impl(threshold, true)
    }

    fn l2_normalize_impl(&self, eps: T, zero_small: bool) -> Var<T> {
        let l = *self.shape().last().expect("rank >= 1");
        let x = self.value().data();
        let mut y = vec![T::zero(); x.len()];
        // Per row: divisor, and whether it was clamped to `eps` (linear branch).
        let mut rows: Vec<(T, bool)> = Vec::with_capacity(x.len() / l.max(1));
        for (xr, yr) in x.chunks(l).zip(y.chunks_mut(l)) {
            let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
            let row = match (zero_small, norm < eps) {
                (true, true) => (T::zero(), false),
                (false, true) => (eps, true),
                _ => (norm, false),
            };
            rows.push(row);
            if row.0 > T::zero() {
                let inv = T::one() / row.0;
                for (o, &v) in yr.iter_mut().zip(xr) {
                    *o = v * inv;
                }
            }
        }
        let y = Tensor::from_vec(self.shape(), y);
        let ys = y.clone();
        Var::from_op(y, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); ys.numel()];
            for (((gr, yr), out), &(d, clamped)) in g.data().chunks(l).zip(ys.data().chunks(l)).zip(gx.chunks_mut(l)).zip(&rows) {
                if d == T::zero() {
                    continue;
                }
                let inv = T::one() / d;
                if clamped {
                    for (o, &gv) in out.iter_mut().zip(gr) {
                        *o = gv * inv;
                    }
                    continue;
                }
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = (gv - yv * dot) * inv;
                }
            }
            vec![Some(Tensor::from_vec(ys.shape(), gx))]
        })
    }

    /// Layer normalization across axis 1 of an `[N, C, ...]` tensor, applied
    /// independently at every trailing position, with per-channel affine.
    pub fn layer_norm_channels(&self, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Var<T> {
        let shape = self.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let p: usize = shape[2..].iter().product();
        assert_eq!(gamma.shape(), &[c], "layer norm gamma");
        assert_eq!(beta.shape(), &[c], "layer norm beta");
        let x = self.value().data();
        let gm = gamma.value().data();
        let bt = beta.value().data();
        let inv_c = T::one() / T::lit(c as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); n * p];
        let mut out = vec![T::zero(); x.len()];
        let mut mean = vec![T::zero(); p];
        let mut var = vec![T::zero(); p];
        for b in 0..n {
            mean.iter_mut().for_each(|v| *v = T::zero());
            var.iter_mut().for_each(|v| *v = T::zero());
            let xb = &x[b * c * p..(b + 1) * c * p];
            for ch in 0..c {
                for (m, &v) in mean.iter_mut().zip(&xb[ch * p..(ch + 1) * p]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_c);
            for ch in 0..c {
                for ((s, &v), &m) in var.iter_mut().zip(&xb[ch * p..(ch + 1) * p]).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            let rs = &mut rstd[b * p..(b + 1) * p];
            for (r, &s) in rs.iter_mut().zip(&var) {
                *r = T::one() / (s * inv_c + eps).sqrt();
            }
            for ch in 0..c {
                let base = (b * c + ch) * p;
                let (g, bb) = (gm[ch], bt[ch]);
                for i in 0..p {
                    let h = (xb[ch * p + i] - mean[i]) * rs[i];
                    xhat[base + i] = h;
                    out[base + i] = h * g + bb;
                }
            }
        }
        let gamma_t = gamma.value().clone();
        Var::from_op(
            Tensor::from_vec(&shape, out),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, needs| {
                let gd = g.data();
                let gm = gamma_t.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * p;
                        let gs = &gd[base..base + p];
                        let hs = &xhat[base..base + p];
                        dgamma[ch] += gs.iter().zip(hs).map(|(&a, &h)| a * h).sum::<T>();
                        dbeta[ch] += gs.iter().copied().sum::<T>();
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); gd.len()];
                    let mut s1 = vec![T::zero(); p];
                    let mut s2 = vec![T::zero(); p];
                    for b in 0..n {
                        s1.iter_mut().for_each(|v| *v = T::zero());
                        s2.iter_mut().for_each(|v| *v = T::zero());
                        for ch in 0..c {
                            let base = (b * c + ch) * p;
                            let gch = gm[ch];
                            for i in 0..p {
                                let dh = gd[base + i] * gch;
                                s1[i] += dh;
                                s2[i] += dh * xhat[base + i];
                            }
                        }
                        let rs = &rstd[b * p..(b + 1) * p];
                        for ch in 0..c {
                            let base = (b * c + ch) * p;
                            let gch = gm[ch];
                            for i in 0..p {
                                let dh = gd[base + i] * gch;
                                dx[base + i] = rs[i] * (dh - s1[i] * inv_c - xhat[base + i] * s2[i] * inv_c);
                            }
                        }
                    }
                    Tensor::from_vec(&shape, dx)
                });
                vec![
                    dx,
                    needs[1].then(|| Tensor::from_vec(&[c], dgamma)),
                    needs[2].then(|| Tensor::from_vec(&[c], dbeta)),
                ]
            },
        )
    }
}
