//! Differentiable operations on [`Var`].
//!
//! Shape mismatches inside a model are programming errors and panic with the
//! offending shapes, the same contract ndarray uses for arithmetic.

use std::rc::Rc;

use crate::tape::Var;
use crate::tensor::{col2im, gemm, im2col, strides, ConvGeom, Tensor};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("cannot broadcast {a:?} with {b:?}"),
        };
    }
    out
}

/// Source strides aligned to `out_shape`, zero on broadcast axes.
fn aligned_strides(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let s = strides(src);
    (0..nd)
        .map(|i| {
            if i + src.len() < nd {
                0
            } else {
                let j = i + src.len() - nd;
                if src[j] == 1 && out_shape[i] != 1 {
                    0
                } else {
                    s[j]
                }
            }
        })
        .collect()
}

fn expand_rec(src: &[f64], st: &[usize], shape: &[usize], dim: usize, off: usize, out: &mut Vec<f64>) {
    if dim + 1 == shape.len() {
        if st[dim] == 0 {
            out.extend(std::iter::repeat_n(src[off], shape[dim]));
        } else {
            for i in 0..shape[dim] {
                out.push(src[off + i * st[dim]]);
            }
        }
        return;
    }
    for i in 0..shape[dim] {
        expand_rec(src, st, shape, dim + 1, off + i * st[dim], out);
    }
}

pub fn expand_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    if shape.is_empty() {
        return t.clone();
    }
    let st = aligned_strides(t.shape(), shape);
    let mut out = Vec::with_capacity(shape.iter().product());
    expand_rec(t.data(), &st, shape, 0, 0, &mut out);
    Tensor::new(shape.to_vec(), out).expect("expand shape")
}

fn sum_rec(src: &[f64], pos: &mut usize, st: &[usize], shape: &[usize], dim: usize, off: usize, out: &mut [f64]) {
    if dim + 1 == shape.len() {
        if st[dim] == 0 {
            let s: f64 = src[*pos..*pos + shape[dim]].iter().sum();
            out[off] += s;
        } else {
            for i in 0..shape[dim] {
                out[off + i * st[dim]] += src[*pos + i];
            }
        }
        *pos += shape[dim];
        return;
    }
    for i in 0..shape[dim] {
        sum_rec(src, pos, st, shape, dim + 1, off + i * st[dim], out);
    }
}

/// Sums `t` down to `shape`, the adjoint of [`expand_to`].
pub fn sum_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let mut out = vec![0.0; shape.iter().product()];
    if t.ndim() == 0 {
        out[0] = t.item();
    } else {
        let st = aligned_strides(shape, t.shape());
        let mut pos = 0;
        sum_rec(t.data(), &mut pos, &st, t.shape(), 0, 0, &mut out);
    }
    Tensor::new(shape.to_vec(), out).expect("sum_to shape")
}

fn some(t: Tensor) -> Option<Tensor> {
    Some(t)
}

impl<'t> Var<'t> {
    fn unary(self, value: Tensor, backward: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'t> {
        self.tape.record(value, &[self], move |g, _| vec![some(backward(g))])
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(a.shape(), b.shape());
        let value = if a.shape() == b.shape() {
            a.zip_map(&b, |x, y| x + y)
        } else {
            expand_to(&a, &out_shape).zip_map(&expand_to(&b, &out_shape), |x, y| x + y)
        };
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.record(value, &[self, other], move |g, m| vec![m[0].then(|| sum_to(g, &sa)), m[1].then(|| sum_to(g, &sb))])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.add(other.neg())
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(a.shape(), b.shape());
        let same = a.shape() == b.shape();
        let value =
            if same { a.zip_map(&b, |x, y| x * y) } else { expand_to(&a, &out_shape).zip_map(&expand_to(&b, &out_shape), |x, y| x * y) };
        self.tape.record(value, &[self, other], move |g, m| {
            let ga = m[0].then(|| {
                let be = expand_to(&b, &out_shape);
                sum_to(&g.zip_map(&be, |x, y| x * y), a.shape())
            });
            let gb = m[1].then(|| {
                let ae = expand_to(&a, &out_shape);
                sum_to(&g.zip_map(&ae, |x, y| x * y), b.shape())
            });
            vec![ga, gb]
        })
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(a.shape(), b.shape());
        let ae = expand_to(&a, &out_shape);
        let be = expand_to(&b, &out_shape);
        let value = ae.zip_map(&be, |x, y| x / y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.record(value, &[self, other], move |g, m| {
            let ga = m[0].then(|| sum_to(&g.zip_map(&be, |x, y| x / y), &sa));
            let gb = m[1].then(|| {
                let num = g.zip_map(&ae, |x, y| -x * y);
                sum_to(&num.zip_map(&be, |x, y| x / (y * y)), &sb)
            });
            vec![ga, gb]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.unary(v, move |g| g.scale(s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.unary(v, |g| g.clone())
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let v = x.map(|a| a.max(0.0));
        self.unary(v, move |g| g.zip_map(&x, |g, a| if a > 0.0 { g } else { 0.0 }))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let y = Rc::new(self.value().map(|a| {
            if a >= 0.0 {
                1.0 / (1.0 + (-a).exp())
            } else {
                let e = a.exp();
                e / (1.0 + e)
            }
        }));
        let yc = y.clone();
        self.unary((*y).clone(), move |g| g.zip_map(&yc, |g, y| g * y * (1.0 - y)))
    }

    pub fn tanh(self) -> Var<'t> {
        let y = Rc::new(self.value().map(f64::tanh));
        let yc = y.clone();
        self.unary((*y).clone(), move |g| g.zip_map(&yc, |g, y| g * (1.0 - y * y)))
    }

    pub fn exp(self) -> Var<'t> {
        let y = Rc::new(self.value().map(f64::exp));
        let yc = y.clone();
        self.unary((*y).clone(), move |g| g.zip_map(&yc, |g, y| g * y))
    }

    pub fn ln(self) -> Var<'t> {
        let x = self.value();
        let v = x.map(f64::ln);
        self.unary(v, move |g| g.zip_map(&x, |g, a| g / a))
    }

    /// Square root whose gradient is taken as zero at zero.
    pub fn sqrt(self) -> Var<'t> {
        let y = Rc::new(self.value().map(|a| a.max(0.0).sqrt()));
        let yc = y.clone();
        self.unary((*y).clone(), move |g| g.zip_map(&yc, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 }))
    }

    /// `v^-1/2` where `v > threshold`, exactly zero (with zero gradient) elsewhere.
    pub fn safe_rsqrt(self, threshold: f64) -> Var<'t> {
        let x = self.value();
        let v = x.map(|a| if a > threshold { a.powf(-0.5) } else { 0.0 });
        self.unary(v, move |g| g.zip_map(&x, |g, a| if a > threshold { -0.5 * g * a.powf(-1.5) } else { 0.0 }))
    }

    pub fn abs(self) -> Var<'t> {
        let x = self.value();
        let v = x.map(f64::abs);
        self.unary(v, move |g| g.zip_map(&x, |g, a| g * sign(a)))
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        let v = x.map(|a| a * a);
        self.unary(v, move |g| g.zip_map(&x, |g, a| 2.0 * g * a))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let x = self.value();
        let v = x.map(|a| a.powf(p));
        self.unary(v, move |g| g.zip_map(&x, |g, a| g * p * a.powf(p - 1.0)))
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| Tensor::full(shape.clone(), g.item()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'t> {
        let x = self.value();
        let mut kept = x.shape().to_vec();
        for &a in axes {
            kept[a] = 1;
        }
        let v = sum_to(&x, &kept);
        let full = x.shape().to_vec();
        self.unary(v, move |g| expand_to(g, &full))
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'t> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).scale(1.0 / n as f64)
    }

    /// Maximum along one axis, kept as a size-1 dimension.
    pub fn max_axis(self, axis: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        let d = x.data();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    let v = d[base + i];
                    let slot = o * inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        arg[slot] = base + i;
                    }
                }
            }
        }
        let mut kept = shape.clone();
        kept[axis] = 1;
        let numel = x.numel();
        let v = Tensor::new(kept, out).unwrap();
        self.unary(v, move |g| {
            let mut gx = vec![0.0; numel];
            for (slot, &src) in arg.iter().enumerate() {
                gx[src] += g.data()[slot];
            }
            Tensor::new(shape.clone(), gx).unwrap()
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let v = (*x).clone().reshape(shape.to_vec()).unwrap_or_else(|e| panic!("{e}"));
        self.unary(v, move |g| g.clone().reshape(orig.clone()).unwrap())
    }

    /// Reshapes `(n, ...)` to `(n, rest)`.
    pub fn flatten(self) -> Var<'t> {
        let s = self.shape();
        let rest = s[1..].iter().product();
        self.reshape(&[s[0], rest])
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let v = self.value().permute(axes);
        let mut inv = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        self.unary(v, move |g| g.permute(&inv))
    }

    /// Concatenates along `axis`.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let value = Tensor::new(shape, out).unwrap();
        tape.record(value, parts, move |g, m| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let gd = g.data();
            let mut pos = 0;
            for _ in 0..outer {
                for (gi, &l) in grads.iter_mut().zip(&lens) {
                    gi.extend_from_slice(&gd[pos..pos + l * inner]);
                    pos += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(&lens)
                .zip(m)
                .map(|((gi, &l), &need)| {
                    need.then(|| {
                        let mut s = base.clone();
                        s[axis] = l;
                        Tensor::new(s, gi).unwrap()
                    })
                })
                .collect()
        })
    }

    /// Matrix product on 2-D or batched 3-D operands with optional transposes.
    pub fn matmul_t(self, other: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (batch, ar, ac) = dims3(a.shape());
        let (bb, br, bc) = dims3(b.shape());
        assert_eq!(batch, bb, "matmul batch mismatch {:?} {:?}", a.shape(), b.shape());
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner mismatch {:?} {:?} ta={ta} tb={tb}", a.shape(), b.shape());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(m, k, n, &a.data()[i * m * k..], ta, &b.data()[i * k * n..], tb, &mut out[i * m * n..], 0.0);
        }
        let shape = if a.ndim() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let value = Tensor::new(shape, out).unwrap();
        self.tape.record(value, &[self, other], move |g, mask| {
            let gd = g.data();
            let ga = mask[0].then(|| {
                let mut ga = vec![0.0; a.numel()];
                for i in 0..batch {
                    let gi = &gd[i * m * n..];
                    let bi = &b.data()[i * k * n..];
                    let dst = &mut ga[i * m * k..];
                    if ta {
                        gemm(k, n, m, bi, tb, gi, true, dst, 0.0);
                    } else {
                        gemm(m, n, k, gi, false, bi, !tb, dst, 0.0);
                    }
                }
                Tensor::new(a.shape().to_vec(), ga).unwrap()
            });
            let gb = mask[1].then(|| {
                let mut gb = vec![0.0; b.numel()];
                for i in 0..batch {
                    let gi = &gd[i * m * n..];
                    let ai = &a.data()[i * m * k..];
                    let dst = &mut gb[i * k * n..];
                    if tb {
                        gemm(n, m, k, gi, true, ai, ta, dst, 0.0);
                    } else {
                        gemm(k, m, n, ai, !ta, gi, false, dst, 0.0);
                    }
                }
                Tensor::new(b.shape().to_vec(), gb).unwrap()
            });
            vec![ga, gb]
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.matmul_t(other, false, false)
    }

    /// 2-D convolution. `x`: (n, c, h, w); `w`: (o, c, kh, kw); bias: (o).
    pub fn conv2d(self, w: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Var<'t> {
        let (x, wv) = (self.value(), w.value());
        let [n, c, h, wd] = dims4(x.shape());
        let [o, wc, kh, kw] = dims4(wv.shape());
        assert_eq!(c, wc, "conv2d channel mismatch: input {:?} weight {:?}", x.shape(), wv.shape());
        let g = ConvGeom::new(c, h, wd, kh, kw, stride, pad);
        let (rows, p) = (g.col_rows(), g.col_cols());
        let mut out = vec![0.0; n * o * p];
        let mut cols = vec![0.0; rows * p];
        for i in 0..n {
            im2col(&x.data()[i * c * h * wd..(i + 1) * c * h * wd], &g, &mut cols);
            gemm(o, rows, p, wv.data(), false, &cols, false, &mut out[i * o * p..], 0.0);
        }
        if let Some(b) = &bias {
            let bv = b.value();
            for i in 0..n {
                for (oc, &bias) in bv.data().iter().enumerate() {
                    for v in &mut out[(i * o + oc) * p..(i * o + oc + 1) * p] {
                        *v += bias;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, o, g.oh, g.ow], out).unwrap();
        let mut parents = vec![self, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape.record(value, &parents, move |gy, m| {
            let gyd = gy.data();
            let mut gx = m[0].then(|| vec![0.0; x.numel()]);
            let mut gw = m[1].then(|| vec![0.0; wv.numel()]);
            let mut cols = vec![0.0; rows * p];
            let mut dcols = vec![0.0; rows * p];
            for i in 0..n {
                let gyi = &gyd[i * o * p..(i + 1) * o * p];
                if let Some(gw) = gw.as_mut() {
                    im2col(&x.data()[i * c * h * wd..(i + 1) * c * h * wd], &g, &mut cols);
                    gemm(o, p, rows, gyi, false, &cols, true, gw, 1.0);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(rows, o, p, wv.data(), true, gyi, false, &mut dcols, 0.0);
                    col2im(&dcols, &g, &mut gx[i * c * h * wd..(i + 1) * c * h * wd]);
                }
            }
            let mut res =
                vec![gx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()), gw.map(|d| Tensor::new(wv.shape().to_vec(), d).unwrap())];
            if has_bias {
                res.push(m[2].then(|| channel_sum(gyd, n, o, p)));
            }
            res
        })
    }

    /// Transposed convolution, the adjoint of [`Var::conv2d`]. `w`: (c_in, c_out, kh, kw).
    pub fn conv_transpose2d(self, w: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize, output_padding: usize) -> Var<'t> {
        let (x, wv) = (self.value(), w.value());
        let [n, ci, h, wd] = dims4(x.shape());
        let [wci, co, kh, kw] = dims4(wv.shape());
        assert_eq!(ci, wci, "conv_transpose2d channel mismatch: input {:?} weight {:?}", x.shape(), wv.shape());
        let oh = (h - 1) * stride + kh + output_padding - 2 * pad;
        let ow = (wd - 1) * stride + kw + output_padding - 2 * pad;
        let g = ConvGeom::new(co, oh, ow, kh, kw, stride, pad);
        assert_eq!((g.oh, g.ow), (h, wd), "conv_transpose2d geometry");
        let (rows, p) = (g.col_rows(), g.col_cols());
        let out_per = co * oh * ow;
        let mut out = vec![0.0; n * out_per];
        let mut cols = vec![0.0; rows * p];
        for i in 0..n {
            gemm(rows, ci, p, wv.data(), true, &x.data()[i * ci * p..], false, &mut cols, 0.0);
            col2im(&cols, &g, &mut out[i * out_per..(i + 1) * out_per]);
        }
        if let Some(b) = &bias {
            let bv = b.value();
            for i in 0..n {
                for (oc, &bias) in bv.data().iter().enumerate() {
                    for v in &mut out[i * out_per + oc * oh * ow..][..oh * ow] {
                        *v += bias;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, co, oh, ow], out).unwrap();
        let mut parents = vec![self, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape.record(value, &parents, move |gy, m| {
            let gyd = gy.data();
            let mut gx = m[0].then(|| vec![0.0; x.numel()]);
            let mut gw = m[1].then(|| vec![0.0; wv.numel()]);
            let mut gcols = vec![0.0; rows * p];
            for i in 0..n {
                im2col(&gyd[i * out_per..(i + 1) * out_per], &g, &mut gcols);
                if let Some(gx) = gx.as_mut() {
                    gemm(ci, rows, p, wv.data(), false, &gcols, false, &mut gx[i * ci * p..], 0.0);
                }
                if let Some(gw) = gw.as_mut() {
                    gemm(ci, p, rows, &x.data()[i * ci * p..], false, &gcols, true, gw, 1.0);
                }
            }
            let mut res =
                vec![gx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()), gw.map(|d| Tensor::new(wv.shape().to_vec(), d).unwrap())];
            if has_bias {
                res.push(m[2].then(|| channel_sum(gyd, n, co, oh * ow)));
            }
            res
        })
    }

    /// Non-overlapping `k`×`k` max pooling.
    pub fn max_pool2d(self, k: usize) -> Var<'t> {
        let x = self.value();
        let [n, c, h, w] = dims4(x.shape());
        let (oh, ow) = (h / k, w / k);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        let d = x.data();
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if d[idx] > best {
                                best = d[idx];
                                bi = idx;
                            }
                        }
                    }
                    let o = (nc * oh + oy) * ow + ox;
                    out[o] = best;
                    arg[o] = bi;
                }
            }
        }
        let shape = x.shape().to_vec();
        let numel = x.numel();
        let value = Tensor::new(vec![n, c, oh, ow], out).unwrap();
        self.unary(value, move |g| {
            let mut gx = vec![0.0; numel];
            for (o, &src) in arg.iter().enumerate() {
                gx[src] += g.data()[o];
            }
            Tensor::new(shape.clone(), gx).unwrap()
        })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, s: usize) -> Var<'t> {
        let x = self.value();
        let [n, c, h, w] = dims4(x.shape());
        let (oh, ow) = (h * s, w * s);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            for oy in 0..oh {
                let row = &x.data()[(nc * h + oy / s) * w..][..w];
                for ox in 0..ow {
                    out.push(row[ox / s]);
                }
            }
        }
        let shape = x.shape().to_vec();
        let value = Tensor::new(vec![n, c, oh, ow], out).unwrap();
        self.unary(value, move |g| {
            let mut gx = vec![0.0; n * c * h * w];
            for nc in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        gx[(nc * h + oy / s) * w + ox / s] += g.data()[(nc * oh + oy) * ow + ox];
                    }
                }
            }
            Tensor::new(shape.clone(), gx).unwrap()
        })
    }

    /// Log-softmax over the last axis of a 2-D input.
    pub fn log_softmax(self) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let y = Rc::new(Tensor::new(x.shape().to_vec(), out).unwrap());
        let yc = y.clone();
        self.unary((*y).clone(), move |g| {
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let s: f64 = gr.iter().sum();
                for c in 0..cols {
                    gx[r * cols + c] = gr[c] - yc.data()[r * cols + c].exp() * s;
                }
            }
            Tensor::new(vec![rows, cols], gx).unwrap()
        })
    }

    /// `ln(mean(exp(x)))` over all elements, computed stably.
    pub fn log_mean_exp(self) -> Var<'t> {
        let x = self.value();
        let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = x.data().iter().map(|v| (v - m).exp()).sum();
        let n = x.numel() as f64;
        let lme = m + (s / n).ln();
        self.unary(Tensor::scalar(lme), move |g| {
            let k = g.item() / n;
            x.map(|v| k * (v - lme).exp())
        })
    }

    /// Euclidean distance matrix between the rows of an `(n, d)` input.
    /// The gradient through a zero distance is taken as zero.
    /// Rows `idx` of the leading axis, in order; repeats allowed.
    pub fn select_rows(self, idx: &[usize]) -> Var<'t> {
        let x = self.value();
        let n = x.shape()[0];
        let row = x.numel() / n.max(1);
        let idx = idx.to_vec();
        let value = x.select_batch(&idx);
        let shape = x.shape().to_vec();
        self.unary(value, move |g| {
            let mut gx = vec![0.0; n * row];
            for (o, &i) in idx.iter().enumerate() {
                for k in 0..row {
                    gx[i * row + k] += g.data()[o * row + k];
                }
            }
            Tensor::new(shape.clone(), gx).unwrap()
        })
    }

    /// Anisotropic total variation summed over the whole (n, c, h, w) tensor.
    pub fn total_variation(self) -> Var<'t> {
        let x = self.value();
        let [n, c, h, w] = dims4(x.shape());
        let d = x.data();
        let mut total = 0.0;
        let mut gx = vec![0.0; d.len()];
        for nc in 0..n * c {
            let base = nc * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let i = base + y * w + xx;
                    if y + 1 < h {
                        let diff = d[i + w] - d[i];
                        total += diff.abs();
                        gx[i + w] += sign(diff);
                        gx[i] -= sign(diff);
                    }
                    if xx + 1 < w {
                        let diff = d[i + 1] - d[i];
                        total += diff.abs();
                        gx[i + 1] += sign(diff);
                        gx[i] -= sign(diff);
                    }
                }
            }
        }
        let shape = x.shape().to_vec();
        let gx = Tensor::new(shape, gx).unwrap();
        self.unary(Tensor::scalar(total), move |g| gx.map(|v| v * g.item()))
    }

    pub fn pairwise_distance(self) -> Var<'t> {
        let x = self.value();
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let dist = Rc::new(pairwise_distance(x.data(), n, d));
        let dc = dist.clone();
        self.unary((*dist).clone(), move |g| {
            // W = (G + G^T) / D; dx = diag(rowsum W) x - W x
            let mut wm = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let dij = dc.data()[i * n + j];
                    if dij > 0.0 {
                        wm[i * n + j] = (g.data()[i * n + j] + g.data()[j * n + i]) / dij;
                    }
                }
            }
            let mut gx = vec![0.0; n * d];
            gemm(n, n, d, &wm, false, x.data(), false, &mut gx, 0.0);
            for i in 0..n {
                let rs: f64 = wm[i * n..(i + 1) * n].iter().sum();
                for k in 0..d {
                    gx[i * d + k] = rs * x.data()[i * d + k] - gx[i * d + k];
                }
            }
            Tensor::new(vec![n, d], gx).unwrap()
        })
    }
}

/// Euclidean distances from explicit row differences, so identical rows give
/// exactly zero.
pub fn pairwise_distance(x: &[f64], n: usize, d: usize) -> Tensor {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        for j in i + 1..n {
            let xj = &x[j * d..(j + 1) * d];
            let sq: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            out[i * n + j] = sq.sqrt();
            out[j * n + i] = out[i * n + j];
        }
    }
    Tensor::new(vec![n, n], out).unwrap()
}

fn channel_sum(g: &[f64], n: usize, c: usize, p: usize) -> Tensor {
    let mut out = vec![0.0; c];
    for i in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += g[(i * c + ch) * p..(i * c + ch + 1) * p].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], out).unwrap()
}

fn sign(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else if a < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    match s {
        [r, c] => (1, *r, *c),
        [b, r, c] => (*b, *r, *c),
        _ => panic!("matmul expects 2-D or 3-D operands, got {s:?}"),
    }
}

fn dims4(s: &[usize]) -> [usize; 4] {
    s.try_into().unwrap_or_else(|_| panic!("expected a 4-D (n, c, h, w) tensor, got {s:?}"))
}
