//! Spatial operations on `[N, C, H, W]` tensors.

use super::scalar::{gemm, MatView};
use super::{Scalar, Tensor, Var};

fn out_size(i: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(i + 2 * pad >= k, "kernel {k} larger than padded input {i}+2*{pad}");
    (i + 2 * pad - k) / stride + 1
}

/// Geometry of a dense 2-d convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Valid output-x range `[lo, hi)` for kernel column `kx`.
    fn x_range(&self, kx: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride as isize, self.pad as isize, self.w as isize);
        let kx = kx as isize;
        // ix = ox * s + kx - p must lie in [0, w)
        let lo = ((p - kx).max(0) + s - 1) / s;
        let hi = ((w - 1 + p - kx).div_euclid(s) + 1).clamp(0, self.wo as isize);
        (lo.min(hi) as usize, hi as usize)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let pc = self.cols();
        for ci in 0..self.ci {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * pc..(row + 1) * pc];
                    let (x0, x1) = self.x_range(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let d = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            d.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        d[..x0].iter_mut().for_each(|v| *v = T::zero());
                        d[x1..].iter_mut().for_each(|v| *v = T::zero());
                        if s == 1 {
                            let off = x0 + kx - p;
                            d[x0..x1].copy_from_slice(&src[off..off + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                d[ox] = src[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let pc = self.cols();
        for ci in 0..self.ci {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let srcrow = &cols[row * pc..(row + 1) * pc];
                    let (x0, x1) = self.x_range(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let src = &srcrow[oy * self.wo..(oy + 1) * self.wo];
                        if s == 1 {
                            let off = x0 + kx - p;
                            for (d, &v) in dst[off..off + (x1 - x0)].iter_mut().zip(&src[x0..x1]) {
                                *d += v;
                            }
                        } else {
                            for ox in x0..x1 {
                                dst[ox * s + kx - p] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Area-averaging weights mapping `n_in` samples onto `n_out` equal bins.
fn area_weights<T: Scalar>(n_in: usize, n_out: usize) -> Vec<T> {
    let mut w = vec![T::zero(); n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
        let first = a.floor() as usize;
        let last = (b.ceil() as usize).min(n_in);
        for i in first..last {
            let overlap = (b.min((i + 1) as f64) - a.max(i as f64)).max(0.0);
            w[o * n_in + i] = T::lit(overlap / scale);
        }
    }
    w
}

impl<T: Scalar> Var<T> {
    /// Dense 2-d cross-correlation with zero padding.
    ///
    /// `self`: `[N, Ci, H, W]`, `weight`: `[Co, Ci, k, k]`, `bias`: `[Co]`.
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, stride: usize, pad: usize) -> Var<T> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Co, Ci, k, k]");
        assert_eq!(ws[2], ws[3], "square kernels only");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
        let (n, co) = (xs[0], ws[0]);
        let g = ConvGeom {
            ci: xs[1],
            h: xs[2],
            w: xs[3],
            k: ws[2],
            stride,
            pad,
            ho: out_size(xs[2], ws[2], stride, pad),
            wo: out_size(xs[3], ws[3], stride, pad),
        };
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[co], "conv2d bias");
        }
        let (kr, pc) = (g.rows(), g.cols());
        let in_plane = g.ci * g.h * g.w;
        let x = self.value().clone();
        let wt = weight.value().clone();
        let mut out = vec![T::zero(); n * co * pc];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kr * pc] };
        for b in 0..n {
            let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
            let src: &[T] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, &mut cols);
                &cols
            };
            let dst = &mut out[b * co * pc..(b + 1) * co * pc];
            gemm(
                T::one(),
                wt.data(),
                MatView::row_major(0, co, kr),
                src,
                MatView::row_major(0, kr, pc),
                T::zero(),
                dst,
                MatView::row_major(0, co, pc),
            );
            if let Some(bias) = bias {
                for (row, &bv) in dst.chunks_mut(pc).zip(bias.value().data()) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let out_shape = [n, co, g.ho, g.wo];
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Var::from_op(Tensor::from_vec(&out_shape, out), parents, move |gout, needs| {
            let gd = gout.data();
            let mut dx = needs[0].then(|| vec![T::zero(); x.numel()]);
            let mut dw = needs[1].then(|| vec![T::zero(); wt.numel()]);
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kr * pc] };
            let mut dcols = if g.is_pointwise() || dx.is_none() { Vec::new() } else { vec![T::zero(); kr * pc] };
            for b in 0..n {
                let gb = &gd[b * co * pc..(b + 1) * co * pc];
                let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
                if let Some(dw) = dw.as_mut() {
                    let src: &[T] = if g.is_pointwise() {
                        xb
                    } else {
                        g.im2col(xb, &mut cols);
                        &cols
                    };
                    gemm(
                        T::one(),
                        gb,
                        MatView::row_major(0, co, pc),
                        src,
                        MatView::row_major(0, kr, pc).t(),
                        T::one(),
                        dw,
                        MatView::row_major(0, co, kr),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[b * in_plane..(b + 1) * in_plane];
                    let wv = MatView::row_major(0, co, kr).t();
                    if g.is_pointwise() {
                        gemm(T::one(), wt.data(), wv, gb, MatView::row_major(0, co, pc), T::zero(), dxb, MatView::row_major(0, kr, pc));
                    } else {
                        gemm(T::one(), wt.data(), wv, gb, MatView::row_major(0, co, pc), T::zero(), &mut dcols, MatView::row_major(0, kr, pc));
                        g.col2im(&dcols, dxb);
                    }
                }
            }
            let mut res = vec![dx.map(|d| Tensor::from_vec(x.shape(), d)), dw.map(|d| Tensor::from_vec(wt.shape(), d))];
            if has_bias {
                res.push(needs[2].then(|| {
                    let mut db = vec![T::zero(); co];
                    for b in 0..n {
                        for (o, row) in db.iter_mut().zip(gd[b * co * pc..(b + 1) * co * pc].chunks(pc)) {
                            *o += row.iter().copied().sum::<T>();
                        }
                    }
                    Tensor::from_vec(&[co], db)
                }));
            }
            res
        })
    }

    /// Depthwise `k x k` convolution with "same" zero padding (odd `k`).
    ///
    /// `self`: `[N, C, H, W]`, `weight`: `[C, 1, k, k]`, `bias`: `[C]`.
    pub fn depthwise_conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Var<T> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        assert_eq!(xs.len(), 4, "depthwise input must be NCHW");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(ws, vec![c, 1, ws[2], ws[2]], "depthwise weight must be [C, 1, k, k]");
        let k = ws[2];
        assert!(k % 2 == 1, "depthwise kernel must be odd");
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[c], "depthwise bias");
        }
        let p = (k / 2) as isize;
        let hw = h * w;
        // For each kernel tap: (dy, dx, valid y range, valid x range).
        let taps: Vec<(usize, isize, isize, usize, usize, usize, usize)> = (0..k * k)
            .map(|t| {
                let (ky, kx) = (t / k, t % k);
                let (dy, dx) = (ky as isize - p, kx as isize - p);
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).clamp(0, h as isize) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                (t, dy, dx, y0, y1.max(y0), x0, x1.max(x0))
            })
            .collect();
        let x = self.value().clone();
        let wt = weight.value().clone();
        let mut out = vec![T::zero(); x.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let src = &x.data()[base..base + hw];
                let dst = &mut out[base..base + hw];
                if let Some(bias) = bias {
                    let bv = bias.value().data()[ch];
                    dst.iter_mut().for_each(|v| *v = bv);
                }
                let wk = &wt.data()[ch * k * k..(ch + 1) * k * k];
                for &(t, dy, dx, y0, y1, x0, x1) in &taps {
                    let wv = wk[t];
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let s = &src[iy * w + (x0 as isize + dx) as usize..iy * w + (x1 as isize + dx) as usize];
                        let d = &mut dst[y * w + x0..y * w + x1];
                        for (o, &v) in d.iter_mut().zip(s) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Var::from_op(Tensor::from_vec(&xs, out), parents, move |gout, needs| {
            let gd = gout.data();
            let mut dx = needs[0].then(|| vec![T::zero(); x.numel()]);
            let mut dw = needs[1].then(|| vec![T::zero(); wt.numel()]);
            let mut db = (has_bias && needs[2]).then(|| vec![T::zero(); c]);
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let g = &gd[base..base + hw];
                    if let Some(db) = db.as_mut() {
                        db[ch] += g.iter().copied().sum::<T>();
                    }
                    let src = &x.data()[base..base + hw];
                    let wk = &wt.data()[ch * k * k..(ch + 1) * k * k];
                    for &(t, dy, dxo, y0, y1, x0, x1) in &taps {
                        if let Some(dw) = dw.as_mut() {
                            let mut acc = T::zero();
                            for y in y0..y1 {
                                let iy = (y as isize + dy) as usize;
                                let s = &src[iy * w + (x0 as isize + dxo) as usize..iy * w + (x1 as isize + dxo) as usize];
                                acc += g[y * w + x0..y * w + x1].iter().zip(s).map(|(&a, &b)| a * b).sum::<T>();
                            }
                            dw[ch * k * k + t] += acc;
                        }
                        if let Some(dx) = dx.as_mut() {
                            let wv = wk[t];
                            let dxp = &mut dx[base..base + hw];
                            for y in y0..y1 {
                                let iy = (y as isize + dy) as usize;
                                let lo = iy * w + (x0 as isize + dxo) as usize;
                                let hi = iy * w + (x1 as isize + dxo) as usize;
                                for (o, &gv) in dxp[lo..hi].iter_mut().zip(&g[y * w + x0..y * w + x1]) {
                                    *o += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
            let mut res = vec![dx.map(|d| Tensor::from_vec(x.shape(), d)), dw.map(|d| Tensor::from_vec(wt.shape(), d))];
            if has_bias {
                res.push(db.map(|d| Tensor::from_vec(&[c], d)));
            }
            res
        })
    }

    /// `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`.
    pub fn pixel_shuffle(&self, r: usize) -> Var<T> {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4);
        assert_eq!(s[1] % (r * r), 0, "pixel_shuffle channels must divide r^2");
        let (n, c, h, w) = (s[0], s[1] / (r * r), s[2], s[3]);
        let out_shape = vec![n, c, h * r, w * r];
        // index[out] = in
        let mut index = Vec::with_capacity(n * c * h * w * r * r);
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..h * r {
                    for ox in 0..w * r {
                        let (y, i, xx, j) = (oy / r, oy % r, ox / r, ox % r);
                        index.push((((b * c * r * r) + ch * r * r + i * r + j) * h + y) * w + xx);
                    }
                }
            }
        }
        self.gather(index, &out_shape)
    }

    /// `[N, C, H*r, W*r] -> [N, C*r*r, H, W]`.
    pub fn pixel_unshuffle(&self, r: usize) -> Var<T> {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4);
        assert!(s[2] % r == 0 && s[3] % r == 0, "pixel_unshuffle size must divide r");
        let (n, c, h, w) = (s[0], s[1], s[2] / r, s[3] / r);
        let out_shape = vec![n, c * r * r, h, w];
        let mut index = Vec::with_capacity(n * c * h * w * r * r);
        for b in 0..n {
            for oc in 0..c * r * r {
                let (ch, i, j) = (oc / (r * r), (oc % (r * r)) / r, oc % r);
                for y in 0..h {
                    for xx in 0..w {
                        index.push(((b * c + ch) * h * r + y * r + i) * w * r + xx * r + j);
                    }
                }
            }
        }
        self.gather(index, &out_shape)
    }

    /// Permutation gather: `out[i] = self[index[i]]`, each source used at most once.
    fn gather(&self, index: Vec<usize>, out_shape: &[usize]) -> Var<T> {
        let src = self.value().data();
        let out: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let in_shape = self.shape().to_vec();
        Var::from_op(Tensor::from_vec(out_shape, out), vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); in_shape.iter().product()];
            for (&i, &gv) in index.iter().zip(g.data()) {
                gx[i] += gv;
            }
            vec![Some(Tensor::from_vec(&in_shape, gx))]
        })
    }

    /// Area-averaging resize of every plane to `oh x ow` (exact box average for integer factors).
    pub fn area_resize(&self, oh: usize, ow: usize) -> Var<T> {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4, "area_resize expects NCHW");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        assert!(oh >= 1 && ow >= 1 && oh <= h && ow <= w, "area_resize only downsamples");
        let ry: Vec<T> = area_weights(h, oh);
        let rx: Vec<T> = area_weights(w, ow);
        let x = self.value().clone();
        let mut out = vec![T::zero(); planes * oh * ow];
        let mut tmp = vec![T::zero(); h * ow];
        for p in 0..planes {
            gemm(T::one(), x.data(), MatView::row_major(p * h * w, h, w), &rx, MatView::row_major(0, ow, w).t(), T::zero(), &mut tmp, MatView::row_major(0, h, ow));
            gemm(T::one(), &ry, MatView::row_major(0, oh, h), &tmp, MatView::row_major(0, h, ow), T::zero(), &mut out, MatView::row_major(p * oh * ow, oh, ow));
        }
        let out_shape = [s[0], s[1], oh, ow];
        Var::from_op(Tensor::from_vec(&out_shape, out), vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); planes * h * w];
            let mut tmp = vec![T::zero(); h * ow];
            for p in 0..planes {
                gemm(T::one(), &ry, MatView::row_major(0, oh, h).t(), g.data(), MatView::row_major(p * oh * ow, oh, ow), T::zero(), &mut tmp, MatView::row_major(0, h, ow));
                gemm(T::one(), &tmp, MatView::row_major(0, h, ow), &rx, MatView::row_major(0, ow, w), T::zero(), &mut gx, MatView::row_major(p * h * w, h, w));
            }
            vec![Some(Tensor::from_vec(&s, gx))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_weights_rows_sum_to_one() {
        for (i, o) in [(8, 8), (64, 8), (10, 8), (9, 4)] {
            let w: Vec<f64> = area_weights(i, o);
            for r in w.chunks(i) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{i}->{o}");
            }
        }
    }

    #[test]
    fn pixel_shuffle_inverts_unshuffle() {
        let x = Var::constant(Tensor::<f64>::from_f64(&[1, 8, 2, 3], &(0..48).map(|v| v as f64).collect::<Vec<_>>()));
        let y = x.pixel_shuffle(2);
        assert_eq!(y.shape(), &[1, 2, 4, 6]);
        let z = y.pixel_unshuffle(2);
        assert_eq!(z.value(), x.value());
    }

    #[test]
    fn strided_conv_output_size() {
        let x = Var::constant(Tensor::<f32>::zeros(&[1, 2, 8, 8]));
        let w = Var::constant(Tensor::<f32>::zeros(&[4, 2, 3, 3]));
        assert_eq!(x.conv2d(&w, None, 2, 1).shape(), &[1, 4, 4, 4]);
    }
}
