//! Differentiable ops. Shape rules are listed on each op; broadcasting is
//! limited to the scalar ops and the row-bias add.

use std::sync::Arc;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{numel, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape().last() {
        Some(&n) if n > 0 => Ok((t.numel() / n, n)),
        _ => Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

impl Tensor {
    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            &[self],
            Box::new(move |ctx| {
                let g = x
                    .data()
                    .iter()
                    .zip(ctx.output)
                    .zip(ctx.grad)
                    .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                    .collect();
                Ok(vec![Some(g)])
            }),
        )
    }

    /// Elementwise binary op on equal shapes; `df` returns (∂y/∂a, ∂y/∂b).
    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        df: impl Fn(f64, f64) -> (f64, f64) + Send + Sync + 'static,
    ) -> Result<Tensor> {
        same_shape(name, self, other)?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            &[self, other],
            Box::new(move |ctx| {
                let n = ctx.grad.len();
                let mut ga = a.requires_grad().then(|| Vec::with_capacity(n));
                let mut gb = b.requires_grad().then(|| Vec::with_capacity(n));
                for ((&av, &bv), &g) in a.data().iter().zip(b.data()).zip(ctx.grad) {
                    let (da, db) = df(av, bv);
                    if let Some(ga) = ga.as_mut() {
                        ga.push(g * da);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb.push(g * db);
                    }
                }
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
    }

    /// `|a − b|` elementwise; subgradient 0 at ties.
    pub fn l1_diff(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "l1_diff",
            |a, b| (a - b).abs(),
            |a, b| {
                let s = if a > b {
                    1.0
                } else if a < b {
                    -1.0
                } else {
                    0.0
                };
                (s, -s)
            },
        )
    }

    /// `(a − b)²` elementwise.
    pub fn sq_diff(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "sq_diff",
            |a, b| (a - b) * (a - b),
            |a, b| (2.0 * (a - b), -2.0 * (a - b)),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.unary("scale", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        self.unary("add_scalar", move |x| x + s, |_, _| 1.0)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary("log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&self) -> Result<Tensor> {
        let total = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![],
            vec![total],
            &[self],
            Box::new(move |ctx| Ok(vec![Some(vec![ctx.grad[0]; n])])),
        )
    }

    /// Mean of all elements, shape `[]`.
    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let total: f64 = self.data().iter().sum();
        Tensor::from_op(
            "mean",
            vec![],
            vec![total / n as f64],
            &[self],
            Box::new(move |ctx| Ok(vec![Some(vec![ctx.grad[0] / n as f64; n])])),
        )
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "sum_axis: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let x = self.data();
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Tensor::from_op(
            "sum_axis",
            out_shape,
            out,
            &[self],
            Box::new(move |ctx| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &ctx.grad[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        g[(o * len + a) * inner..(o * len + a + 1) * inner].copy_from_slice(src);
                    }
                }
                Ok(vec![Some(g)])
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis: axis out of range"))?;
        self.sum_axis(axis)?.scale(1.0 / len as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            &[self],
            Box::new(|ctx| Ok(vec![Some(ctx.grad.to_vec())])),
        )
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let &[r, c] = self.shape() else {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        };
        let flip = move |x: &[f64], r: usize, c: usize| {
            let mut out = vec![0.0; x.len()];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x[i * c + j];
                }
            }
            out
        };
        Tensor::from_op(
            "transpose",
            vec![c, r],
            flip(self.data(), r, c),
            &[self],
            Box::new(move |ctx| Ok(vec![Some(flip(ctx.grad, c, r))])),
        )
    }

    /// `(m,k) · (k,n) → (m,n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        };
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let out = gemm_nn(self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            &[self, other],
            Box::new(move |ctx| {
                let ga = a
                    .requires_grad()
                    .then(|| gemm_nt(ctx.grad, b.data(), m, n, k));
                let gb = b
                    .requires_grad()
                    .then(|| gemm_tn(a.data(), ctx.grad, m, k, n));
                Ok(vec![ga, gb])
            }),
        )
    }

    /// Adds a bias vector along the last axis: `(.., n) + (n)`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, n) = last_dim("add_bias", self)?;
        if bias.shape() != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let b = bias.data();
        let data: Vec<f64> = self
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        Tensor::from_op(
            "add_bias",
            self.shape().to_vec(),
            data,
            &[self, bias],
            Box::new(move |ctx| {
                let mut gb = vec![0.0; n];
                for row in ctx.grad.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                Ok(vec![Some(ctx.grad.to_vec()), Some(gb)])
            }),
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::invalid(format!(
                "concat: axis {axis} out of range for rank {rank}"
            )));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Tensor::from_op(
            "concat",
            shape,
            data,
            parts,
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<f64>> =
                    lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (g, &len) in grads.iter_mut().zip(&lens) {
                        g.extend_from_slice(&ctx.grad[offset..offset + len * inner]);
                        offset += len * inner;
                    }
                }
                Ok(grads.into_iter().map(Some).collect())
            }),
        )
    }

    /// Sub-range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::invalid(format!(
                "slice: range {start}..{end} on axis {axis} invalid for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            data.extend_from_slice(
                &self.data()[(o * len + start) * inner..(o * len + end) * inner],
            );
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        Tensor::from_op(
            "slice",
            out_shape,
            data,
            &[self],
            Box::new(move |ctx| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    g[(o * len + start) * inner..(o * len + end) * inner]
                        .copy_from_slice(&ctx.grad[o * width * inner..(o + 1) * width * inner]);
                }
                Ok(vec![Some(g)])
            }),
        )
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let (_, n) = last_dim("softmax_lastdim", self)?;
        let mut data = self.to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row, None);
        }
        Tensor::from_op(
            "softmax_lastdim",
            self.shape().to_vec(),
            data,
            &[self],
            Box::new(move |ctx| Ok(vec![Some(softmax_backward(ctx.output, ctx.grad, n))])),
        )
    }

    /// Softmax over the last axis restricted to cells where `valid` is true;
    /// invalid cells are exactly 0 and receive no gradient.
    pub fn masked_softmax_lastdim(&self, valid: Arc<Vec<bool>>) -> Result<Tensor> {
        let (_, n) = last_dim("masked_softmax_lastdim", self)?;
        if valid.len() != self.numel() {
            return Err(Error::Shape {
                op: "masked_softmax_lastdim",
                lhs: self.shape().to_vec(),
                rhs: vec![valid.len()],
            });
        }
        let mut data = self.to_vec();
        for (row, mask) in data.chunks_exact_mut(n).zip(valid.chunks_exact(n)) {
            if !mask.iter().any(|&v| v) {
                return Err(Error::invalid("masked_softmax_lastdim: row with no valid cell"));
            }
            softmax_in_place(row, Some(mask));
        }
        Tensor::from_op(
            "masked_softmax_lastdim",
            self.shape().to_vec(),
            data,
            &[self],
            // Invalid outputs are 0, so the plain softmax Jacobian already
            // yields 0 there.
            Box::new(move |ctx| Ok(vec![Some(softmax_backward(ctx.output, ctx.grad, n))])),
        )
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax_lastdim(&self) -> Result<Tensor> {
        let (_, n) = last_dim("log_softmax_lastdim", self)?;
        let mut data = self.to_vec();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Tensor::from_op(
            "log_softmax_lastdim",
            self.shape().to_vec(),
            data,
            &[self],
            Box::new(move |ctx| {
                let mut g = vec![0.0; ctx.grad.len()];
                for ((gr, y), out) in ctx
                    .grad
                    .chunks_exact(n)
                    .zip(ctx.output.chunks_exact(n))
                    .zip(g.chunks_exact_mut(n))
                {
                    let total: f64 = gr.iter().sum();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(y) {
                        *o = gi - yi.exp() * total;
                    }
                }
                Ok(vec![Some(g)])
            }),
        )
    }

    /// Divides every last-axis vector by `max(‖v‖₂, eps)`.
    pub fn l2_normalize_lastdim(&self, eps: f64) -> Result<Tensor> {
        let (rows, n) = last_dim("l2_normalize_lastdim", self)?;
        let norms: Vec<f64> = self
            .data()
            .chunks_exact(n)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut data = self.to_vec();
        for (row, &nm) in data.chunks_exact_mut(n).zip(&norms) {
            let d = nm.max(eps);
            row.iter_mut().for_each(|v| *v /= d);
        }
        Tensor::from_op(
            "l2_normalize_lastdim",
            self.shape().to_vec(),
            data,
            &[self],
            Box::new(move |ctx| {
                let mut g = vec![0.0; rows * n];
                for (r, &nm) in norms.iter().enumerate() {
                    let y = &ctx.output[r * n..(r + 1) * n];
                    let gr = &ctx.grad[r * n..(r + 1) * n];
                    let out = &mut g[r * n..(r + 1) * n];
                    if nm > eps {
                        let yg: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(y) {
                            *o = (gi - yi * yg) / nm;
                        }
                    } else {
                        for (o, &gi) in out.iter_mut().zip(gr) {
                            *o = gi / eps;
                        }
                    }
                }
                Ok(vec![Some(g)])
            }),
        )
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let valid = |i: usize| mask.map_or(true, |m| m[i]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(i, _)| valid(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (i, v) in row.iter_mut().enumerate() {
        if valid(i) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn softmax_backward(y: &[f64], g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; g.len()];
    for ((yr, gr), or) in y
        .chunks_exact(n)
        .zip(g.chunks_exact(n))
        .zip(out.chunks_exact_mut(n))
    {
        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yi), &gi) in or.iter_mut().zip(yr).zip(gr) {
            *o = yi * (gi - s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        assert_eq!(x.softmax_lastdim().unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = Tensor::new(&[3], vec![1e4, -1e4, 1e4 - 1.0]).unwrap();
        let y = x.softmax_lastdim().unwrap();
        assert_abs_diff_eq!(y.data().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(y.data()[0] > y.data()[2]);
    }

    #[test]
    fn l1_diff_of_self_sums_to_zero() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3 - 1.0).unwrap();
        assert_eq!(x.l1_diff(&x).unwrap().sum().unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn identity_matmul() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap();
        let a = Tensor::from_fn(&[3, 3], |i| (i as f64).sin()).unwrap();
        assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"));
        let msg = a.add(&Tensor::zeros(&[3, 2])).unwrap_err().to_string();
        assert!(msg.contains("add"));
    }

    #[test]
    fn non_finite_output_is_a_fault() {
        let x = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        let err = x.log().unwrap_err();
        assert!(err.is_numeric_fault());
        let big = Tensor::new(&[1], vec![1e3]).unwrap();
        assert!(big.exp().unwrap_err().is_numeric_fault());
    }

    #[test]
    fn masked_softmax_zeroes_invalid_cells() {
        let x = Tensor::new(&[1, 4], vec![3.0, 1.0, 2.0, 5.0]).unwrap();
        let mask = Arc::new(vec![true, false, true, false]);
        let y = x.masked_softmax_lastdim(mask).unwrap();
        assert_eq!(y.data()[1], 0.0);
        assert_eq!(y.data()[3], 0.0);
        assert_abs_diff_eq!(y.data()[0] + y.data()[2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64).unwrap();
        let b = Tensor::from_fn(&[2, 2], |i| 10.0 + i as f64).unwrap();
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.slice(1, 0, 3).unwrap().data(), a.data());
        assert_eq!(c.slice(1, 3, 5).unwrap().data(), b.data());
    }

    #[test]
    fn sum_axis_and_mean_axis() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64).unwrap();
        assert_eq!(x.sum_axis(0).unwrap().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(x.sum_axis(1).unwrap().data(), &[3.0, 12.0]);
        assert_eq!(x.mean_axis(0).unwrap().data(), &[1.5, 2.5, 3.5]);
    }
}
