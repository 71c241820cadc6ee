//! Elementwise, reduction and shape operations.

use super::{Scalar, Tensor, Var};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast requires equal ranks: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "shapes {a:?} and {b:?} do not broadcast");
            x.max(y)
        })
        .collect()
}

/// Element strides of `shape` read as a broadcast of `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every row (last axis) of `out`, yielding the row start offsets of
/// the output and of each broadcast operand.
fn for_each_row(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let r = out.len();
    let row_len = out[r - 1];
    let rows: usize = out[..r - 1].iter().product();
    let mut idx = vec![0usize; r.saturating_sub(1)];
    let (mut oa, mut ob) = (0usize, 0usize);
    for row in 0..rows {
        f(row * row_len, oa, ob);
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let r = out_shape.len();
    let (la, lb) = (sa[r - 1], sb[r - 1]);
    let row_len = out_shape[r - 1];
    let mut out = vec![T::zero(); out_shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_row(&out_shape, &sa, &sb, |o, oa, ob| {
        let dst = &mut out[o..o + row_len];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = f(ad[oa + j * la], bd[ob + j * lb]);
        }
    });
    Tensor::from_vec(&out_shape, out)
}

/// Sums `g` over the axes where `shape` is broadcast.
pub(crate) fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let out_shape = g.shape().to_vec();
    let s = broadcast_strides(shape, &out_shape);
    let zero = vec![0; out_shape.len()];
    let r = out_shape.len();
    let l = s[r - 1];
    let row_len = out_shape[r - 1];
    let mut acc = vec![T::zero(); shape.iter().product()];
    let gd = g.data();
    for_each_row(&out_shape, &s, &zero, |o, oa, _| {
        let src = &gd[o..o + row_len];
        if l == 0 {
            acc[oa] += src.iter().copied().sum();
        } else {
            for (j, &v) in src.iter().enumerate() {
                acc[oa + j * l] += v;
            }
        }
    });
    Tensor::from_vec(shape, acc)
}

impl<T: Scalar> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a + b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, vec![self.clone(), other.clone()], move |g, needs| {
            vec![needs[0].then(|| reduce_to(g, &sa)), needs[1].then(|| reduce_to(g, &sb))]
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a - b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, vec![self.clone(), other.clone()], move |g, needs| {
            vec![
                needs[0].then(|| reduce_to(g, &sa)),
                needs[1].then(|| reduce_to(g, &sb).map(|v| -v)),
            ]
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let (a, b) = (self.value().clone(), other.value().clone());
        let value = broadcast_zip(&a, &b, |x, y| x * y);
        Var::from_op(value, vec![self.clone(), other.clone()], move |g, needs| {
            vec![
                needs[0].then(|| reduce_to(&broadcast_zip(g, &b, |x, y| x * y), a.shape())),
                needs[1].then(|| reduce_to(&broadcast_zip(g, &a, |x, y| x * y), b.shape())),
            ]
        })
    }

    pub fn scale(&self, s: T) -> Var<T> {
        let value = self.value().map(|v| v * s);
        Var::from_op(value, vec![self.clone()], move |g, _| vec![Some(g.map(|v| v * s))])
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        let value = self.value().map(|v| v + s);
        Var::from_op(value, vec![self.clone()], move |g, _| vec![Some(g.clone())])
    }

    /// Applies `f` elementwise; `df(x, y)` is the derivative at input `x` with output `y`.
    pub fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<T> {
        let x = self.value().clone();
        let y = x.map(f);
        let ys = y.clone();
        Var::from_op(y, vec![self.clone()], move |g, _| {
            let gd = g.data();
            let out: Vec<T> = x
                .data()
                .iter()
                .zip(ys.data())
                .zip(gd)
                .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), out))]
        })
    }

    pub fn relu(&self) -> Var<T> {
        self.unary(|x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Var<T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<T> {
        self.unary(gelu, gelu_grad)
    }

    /// Clamps to `[lo, hi]`; the gradient passes where the input lies inside the closed range.
    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    pub fn sum(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let value = Tensor::scalar(self.value().sum());
        Var::from_op(value, vec![self.clone()], move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::lit(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Mean over the last axis; the axis is kept with length 1.
    pub fn mean_last(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let l = *shape.last().expect("rank >= 1");
        let inv = T::one() / T::lit(l as f64);
        let out: Vec<T> = self.value().data().chunks(l).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = 1;
        Var::from_op(Tensor::from_vec(&out_shape, out), vec![self.clone()], move |g, _| {
            let mut gx = Vec::with_capacity(shape.iter().product());
            for &gv in g.data() {
                gx.extend(std::iter::repeat(gv * inv).take(l));
            }
            vec![Some(Tensor::from_vec(&shape, gx))]
        })
    }

    /// Mean absolute difference against `target`, as a one-element tensor.
    pub fn l1_loss(&self, target: &Var<T>) -> Var<T> {
        assert_eq!(self.shape(), target.shape(), "l1 shape mismatch");
        let (a, b) = (self.value().clone(), target.value().clone());
        let n = T::lit(a.numel() as f64);
        let total: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum();
        Var::from_op(Tensor::scalar(total / n), vec![self.clone(), target.clone()], move |g, needs| {
            let s = g.data()[0] / n;
            let sign = a.zip_map(&b, |x, y| {
                if x > y {
                    s
                } else if x < y {
                    -s
                } else {
                    T::zero()
                }
            });
            vec![needs[0].then(|| sign.clone()), needs[1].then(|| sign.map(|v| -v))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let orig = self.shape().to_vec();
        Var::from_op(self.value().reshape(shape), vec![self.clone()], move |g, _| vec![Some(g.reshape(&orig))])
    }

    /// Concatenates along `axis`.
    pub fn concat(parts: &[Var<T>], axis: usize) -> Var<T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape().to_vec();
        for p in parts {
            assert_eq!(p.shape().len(), first.len(), "concat rank");
            for (i, (&a, &b)) in p.shape().iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch {:?} vs {first:?}", p.shape());
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.value().data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Var::from_op(Tensor::from_vec(&out_shape, out), parts.to_vec(), move |g, needs| {
            let gd = g.data();
            let mut start = 0;
            let mut res = Vec::with_capacity(lens.len());
            for (i, &l) in lens.iter().enumerate() {
                if needs[i] {
                    let mut part = Vec::with_capacity(outer * l * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        part.extend_from_slice(&gd[base..base + l * inner]);
                    }
                    res.push(Some(Tensor::from_vec(&shapes[i], part)));
                } else {
                    res.push(None);
                }
                start += l;
            }
            res
        })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total = shape[axis];
        let src = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Var::from_op(Tensor::from_vec(&out_shape, out), vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); shape.iter().product()];
            let gd = g.data();
            for o in 0..outer {
                let base = (o * total + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_vec(&shape, gx))]
        })
    }

    /// Splits along `axis` into consecutive chunks of the given lengths.
    pub fn split(&self, axis: usize, lens: &[usize]) -> Vec<Var<T>> {
        assert_eq!(lens.iter().sum::<usize>(), self.shape()[axis], "split lengths");
        let mut start = 0;
        lens.iter()
            .map(|&l| {
                let v = self.narrow(axis, start, l);
                start += l;
                v
            })
            .collect()
    }

    /// Per-position `max - min` over axis 1 of an `[N, C, H, W]` tensor,
    /// producing `[N, 1, H, W]`. Gradients route to the first arg-max and arg-min.
    pub fn channel_range(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        assert_eq!(shape.len(), 4, "channel_range expects NCHW");
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let x = self.value().data();
        let mut out = vec![T::zero(); n * hw];
        let mut arg_max = vec![0u32; n * hw];
        let mut arg_min = vec![0u32; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let mut hi = x[b * c * hw + p];
                let mut lo = hi;
                let (mut ih, mut il) = (0u32, 0u32);
                for ch in 1..c {
                    let v = x[(b * c + ch) * hw + p];
                    if v > hi {
                        hi = v;
                        ih = ch as u32;
                    }
                    if v < lo {
                        lo = v;
                        il = ch as u32;
                    }
                }
                out[b * hw + p] = hi - lo;
                arg_max[b * hw + p] = ih;
                arg_min[b * hw + p] = il;
            }
        }
        let out_shape = [n, 1, shape[2], shape[3]];
        Var::from_op(Tensor::from_vec(&out_shape, out), vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); n * c * hw];
            let gd = g.data();
            for b in 0..n {
                for p in 0..hw {
                    let gv = gd[b * hw + p];
                    gx[(b * c + arg_max[b * hw + p] as usize) * hw + p] += gv;
                    gx[(b * c + arg_min[b * hw + p] as usize) * hw + p] -= gv;
                }
            }
            vec![Some(Tensor::from_vec(&shape, gx))]
        })
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T, _y: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::lit(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
