//! Differentiable primitives.
//!
//! Broadcasting is deliberately narrow: binary ops accept either identical
//! shapes or one operand with a single element. Anything else (adding a bias
//! row, repeating a timestep vector) goes through an explicit [`Tensor::expand`].

use super::tensor::{numel_of, Scalar, Tensor};
use crate::error::{Error, Result};

type BinaryGrad = fn(Scalar, Scalar, Scalar) -> Scalar;

#[derive(Clone, Copy)]
enum Pairing {
    Same,
    LeftScalar,
    RightScalar,
}

fn pairing(a: &Tensor, b: &Tensor, op: &str) -> Result<Pairing> {
    if a.shape() == b.shape() {
        Ok(Pairing::Same)
    } else if b.numel() == 1 {
        Ok(Pairing::RightScalar)
    } else if a.numel() == 1 {
        Ok(Pairing::LeftScalar)
    } else {
        Err(Error::shape(format!(
            "{op}: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_layout(shape: &[usize], axis: usize, op: &str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("{op}: axis {axis} out of range for {shape:?}")));
    }
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    Ok((outer, shape[axis], inner))
}

fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: Scalar) -> Scalar {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

impl Tensor {
    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: fn(Scalar, Scalar) -> Scalar,
        da: BinaryGrad,
        db: BinaryGrad,
    ) -> Result<Tensor> {
        let pair = pairing(self, other, op)?;
        let (a, b) = (self.data(), other.data());
        let (shape, data): (Vec<usize>, Vec<Scalar>) = match pair {
            Pairing::Same => (
                self.shape().to_vec(),
                a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Pairing::RightScalar => (self.shape().to_vec(), a.iter().map(|&x| f(x, b[0])).collect()),
            Pairing::LeftScalar => (other.shape().to_vec(), b.iter().map(|&y| f(a[0], y)).collect()),
        };
        Tensor::from_op(
            shape,
            data,
            vec![self.clone(), other.clone()],
            op,
            Box::new(move |g, out, parents| {
                let (a, b) = (parents[0].data(), parents[1].data());
                let n = out.len();
                let av = |i: usize| if matches!(pair, Pairing::LeftScalar) { a[0] } else { a[i] };
                let bv = |i: usize| if matches!(pair, Pairing::RightScalar) { b[0] } else { b[i] };
                let ga = parents[0].requires_grad().then(|| {
                    let per: Vec<Scalar> = (0..n).map(|i| g[i] * da(av(i), bv(i), out[i])).collect();
                    if matches!(pair, Pairing::LeftScalar) {
                        vec![per.iter().sum()]
                    } else {
                        per
                    }
                });
                let gb = parents[1].requires_grad().then(|| {
                    let per: Vec<Scalar> = (0..n).map(|i| g[i] * db(av(i), bv(i), out[i])).collect();
                    if matches!(pair, Pairing::RightScalar) {
                        vec![per.iter().sum()]
                    } else {
                        per
                    }
                });
                vec![ga, gb]
            }),
        )
    }

    fn map_with(
        &self,
        op: &'static str,
        f: impl Fn(Scalar) -> Scalar,
        df: fn(Scalar, Scalar) -> Scalar,
    ) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            op,
            Box::new(move |g, out, parents| {
                let x = parents[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(out))
                        .map(|(&g, (&x, &y))| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "div", |a, b| a / b, |_, b, _| 1.0 / b, |_, b, y| -y / b)
    }

    /// Elementwise product with a constant mask of the same shape.
    pub fn mask(&self, mask: &Tensor) -> Result<Tensor> {
        if mask.shape() != self.shape() {
            return Err(Error::shape(format!(
                "mask: shape {:?} does not match {:?}",
                mask.shape(),
                self.shape()
            )));
        }
        self.mul(&mask.detach())
    }

    /// Multiplies by a plain constant.
    pub fn scale(&self, c: Scalar) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            "scale",
            Box::new(move |g, _, _| vec![Some(g.iter().map(|&g| g * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: Scalar) -> Result<Tensor> {
        self.map_with("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.map_with("exp", Scalar::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.map_with("log", Scalar::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.map_with("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.map_with("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// x · sigmoid(x).
    pub fn silu(&self) -> Result<Tensor> {
        self.map_with("silu", |x| x * sigmoid(x), |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn softplus(&self) -> Result<Tensor> {
        self.map_with("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            "reshape",
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.dim(1) != other.dim(0) {
            return Err(Error::shape(format!(
                "matmul: cannot multiply {:?} by {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k, n) = (self.dim(0), self.dim(1), other.dim(1));
        let out = matmul_raw(self.data(), other.data(), m, k, n);
        Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            "matmul",
            Box::new(move |g, _, parents| {
                let (a, b) = (parents[0].data(), parents[1].data());
                let ga = parents[0].requires_grad().then(|| {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &b[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    ga
                });
                let gb = parents[1].requires_grad().then(|| {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = a[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[p * n..(p + 1) * n];
                            dst.iter_mut().zip(grow).for_each(|(d, &gv)| *d += aip * gv);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::shape(format!("transpose: expected 2-D, got {:?}", self.shape())));
        }
        let (r, c) = (self.dim(0), self.dim(1));
        let out = transpose_raw(self.data(), r, c);
        Tensor::from_op(
            vec![c, r],
            out,
            vec![self.clone()],
            "transpose",
            Box::new(move |g, _, _| vec![Some(transpose_raw(g, c, r))]),
        )
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s: Scalar = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            Vec::new(),
            vec![s],
            vec![self.clone()],
            "sum",
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::shape("mean of empty tensor"));
        }
        let s: Scalar = self.data().iter().sum::<Scalar>() / n as Scalar;
        Tensor::from_op(
            Vec::new(),
            vec![s],
            vec![self.clone()],
            "mean",
            Box::new(move |g, _, _| vec![Some(vec![g[0] / n as Scalar; n])]),
        )
    }

    /// Sum of squares of every entry.
    pub fn squared_norm(&self) -> Result<Tensor> {
        let s: Scalar = self.data().iter().map(|x| x * x).sum();
        Tensor::from_op(
            Vec::new(),
            vec![s],
            vec![self.clone()],
            "squared_norm",
            Box::new(|g, _, parents| {
                vec![Some(parents[0].data().iter().map(|&x| 2.0 * x * g[0]).collect())]
            }),
        )
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, average: bool) -> Result<Tensor> {
        let (outer, n, inner) = axis_layout(self.shape(), axis, "reduce_axis")?;
        let scale = if average { 1.0 / n as Scalar } else { 1.0 };
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &x[(o * n + i) * inner..(o * n + i + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            if average { "mean_axis" } else { "sum_axis" },
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for i in 0..n {
                        gx[(o * n + i) * inner..(o * n + i + 1) * inner]
                            .iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                            .for_each(|(d, &gv)| *d = gv * scale);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Repeats an extent-1 `axis` `n` times.
    pub fn expand(&self, axis: usize, n: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_layout(self.shape(), axis, "expand")?;
        if len != 1 {
            return Err(Error::shape(format!(
                "expand: axis {axis} of {:?} must have extent 1",
                self.shape()
            )));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&x[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = n;
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            "expand",
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..n {
                        gx[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(&g[(o * n + i) * inner..(o * n + i + 1) * inner])
                            .for_each(|(d, s)| *d += s);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = axis_layout(self.shape(), axis, "softmax")?;
        let out = softmax_raw(self.data(), outer, n, inner, false);
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            "softmax",
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        let dot: Scalar = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..n {
                            gx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = axis_layout(self.shape(), axis, "log_softmax")?;
        let out = softmax_raw(self.data(), outer, n, inner, true);
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            "log_softmax",
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        let gsum: Scalar = (0..n).map(|i| g[idx(i)]).sum();
                        for i in 0..n {
                            gx[idx(i)] = g[idx(i)] - y[idx(i)].exp() * gsum;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Reverses the order of entries along `axis`.
    pub fn flip(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = axis_layout(self.shape(), axis, "flip")?;
        let out = flip_raw(self.data(), outer, n, inner);
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            "flip",
            Box::new(move |g, _, _| vec![Some(flip_raw(g, outer, n, inner))]),
        )
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let (outer, n, inner) = axis_layout(self.shape(), axis, "slice")?;
        if start >= end || end > n {
            return Err(Error::shape(format!(
                "slice: range {start}..{end} invalid for extent {n}"
            )));
        }
        let len = end - start;
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            "slice",
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    gx[(o * n + start) * inner..(o * n + end) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let (outer, _, inner) = axis_layout(first.shape(), axis, "concat")?;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let ok = p.ndim() == first.ndim()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(format!(
                    "concat: {:?} incompatible with {:?} on axis {axis}",
                    p.shape(),
                    first.shape()
                )));
            }
            lens.push(p.dim(axis));
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let lens_bw = lens.clone();
        Tensor::from_op(
            shape,
            out,
            parts.to_vec(),
            "concat",
            Box::new(move |g, _, parents| {
                let mut grads: Vec<Vec<Scalar>> =
                    lens_bw.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (gp, &len) in grads.iter_mut().zip(&lens_bw) {
                        gp.extend_from_slice(&g[off..off + len * inner]);
                        off += len * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(parents)
                    .map(|(g, p)| p.requires_grad().then_some(g))
                    .collect()
            }),
        )
    }

    /// Layer normalisation over the last axis of a 2-D tensor, with affine
    /// `gamma` and `beta` of length equal to that axis.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: Scalar) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::shape(format!("layer_norm: expected 2-D, got {:?}", self.shape())));
        }
        let (rows, d) = (self.dim(0), self.dim(1));
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm: affine shapes {:?}/{:?} do not match width {d}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<Scalar>() / d as Scalar;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<Scalar>() / d as Scalar;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mu) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gm[c] + bt[c];
            }
        }
        Tensor::from_op(
            vec![rows, d],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            "layer_norm",
            Box::new(move |g, _, parents| {
                let gm = parents[1].data();
                let mut gx = vec![0.0; rows * d];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..d {
                        ggamma[c] += gr[c] * hr[c];
                        gbeta[c] += gr[c];
                        let dh = gr[c] * gm[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                    }
                    mean_dh /= d as Scalar;
                    mean_dh_h /= d as Scalar;
                    for c in 0..d {
                        let dh = gr[c] * gm[c];
                        gx[r * d + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                vec![
                    parents[0].requires_grad().then_some(gx),
                    parents[1].requires_grad().then_some(ggamma),
                    parents[2].requires_grad().then_some(gbeta),
                ]
            }),
        )
    }
}

pub(crate) fn matmul_raw(a: &[Scalar], b: &[Scalar], m: usize, k: usize, n: usize) -> Vec<Scalar> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            dst.iter_mut().zip(brow).for_each(|(d, &bv)| *d += aip * bv);
        }
    }
    out
}

fn transpose_raw(x: &[Scalar], r: usize, c: usize) -> Vec<Scalar> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn flip_raw(x: &[Scalar], outer: usize, n: usize, inner: usize) -> Vec<Scalar> {
    let mut out = Vec::with_capacity(x.len());
    for o in 0..outer {
        for i in (0..n).rev() {
            out.extend_from_slice(&x[(o * n + i) * inner..(o * n + i + 1) * inner]);
        }
    }
    out
}

fn softmax_raw(x: &[Scalar], outer: usize, n: usize, inner: usize, log: bool) -> Vec<Scalar> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let max = (0..n).map(|i| x[idx(i)]).fold(Scalar::NEG_INFINITY, Scalar::max);
            let z: Scalar = (0..n).map(|i| (x[idx(i)] - max).exp()).sum();
            let logz = z.ln();
            for i in 0..n {
                out[idx(i)] = if log {
                    x[idx(i)] - max - logz
                } else {
                    (x[idx(i)] - max).exp() / z
                };
            }
        }
    }
    out
}
