//! Tensor operations and their backward rules.

use super::{Inner, Tensor};
use crate::error::{Error, Result};

/// C[m x n] += A[m x k] * B[k x n], row-major.
pub(crate) fn mat_mul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// C[m x n] += A[m x k] * B[n x k]^T.
fn mat_mul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (ai, bi) in arow.iter().zip(brow) {
                s += ai * bi;
            }
            c[i * n + j] += s;
        }
    }
}

/// C[k x n] += A[m x k]^T * B[m x n].
fn mat_mul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |node: &Inner| {
                let g = node.grad_ref();
                a.accumulate_grad(&g);
                b.accumulate_grad(&g);
            },
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |node: &Inner| {
                let g = node.grad_ref();
                a.accumulate_grad(&g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                b.accumulate_grad(&neg);
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |node: &Inner| {
                let g = node.grad_ref();
                let bd = b.data();
                let da: Vec<f64> = g.iter().zip(bd.iter()).map(|(gi, bi)| gi * bi).collect();
                drop(bd);
                a.accumulate_grad(&da);
                let ad = a.data();
                let db: Vec<f64> = g.iter().zip(ad.iter()).map(|(gi, ai)| gi * ai).collect();
                drop(ad);
                b.accumulate_grad(&db);
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x * c).collect();
        let a = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |node: &Inner| {
            let g = node.grad_ref();
            let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
            a.accumulate_grad(&da);
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x + c).collect();
        let a = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |node: &Inner| {
            let g = node.grad_ref();
            a.accumulate_grad(&g);
        })
    }

    /// Multiply by a one-element tensor (e.g. a learnable scalar).
    pub fn mul_scalar_tensor(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::Shape(format!(
                "mul_scalar_tensor: scalar operand has shape {:?}",
                s.shape()
            )));
        }
        let sv = s.item();
        let data: Vec<f64> = self.data().iter().map(|x| x * sv).collect();
        let (a, b) = (self.clone(), s.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            move |node: &Inner| {
                let g = node.grad_ref();
                let da: Vec<f64> = g.iter().map(|gi| gi * sv).collect();
                a.accumulate_grad(&da);
                let ad = a.data();
                let ds: f64 = g.iter().zip(ad.iter()).map(|(gi, ai)| gi * ai).sum();
                drop(ad);
                b.accumulate_grad(&[ds]);
            },
        ))
    }

    /// Matrix product of two 2D tensors; dC flows as dA = dC * B^T and
    /// dB = A^T * dC.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 {
            return Err(Error::Shape(format!(
                "matmul expects 2D operands, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree, {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        mat_mul_acc(&mut out, &self.data(), &other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            move |node: &Inner| {
                let g = node.grad_ref();
                if a.requires_grad() {
                    let mut da = vec![0.0; m * k];
                    mat_mul_nt_acc(&mut da, &g, &b.data(), m, n, k);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; k * n];
                    mat_mul_tn_acc(&mut db, &a.data(), &g, m, k, n);
                    b.accumulate_grad(&db);
                }
            },
        ))
    }

    /// 2D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::Shape(format!(
                "transpose expects a 2D tensor, got {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        let a = self.clone();
        Ok(Tensor::from_op(vec![c, r], out, vec![self.clone()], move |node: &Inner| {
            let g = node.grad_ref();
            let mut da = vec![0.0; r * c];
            for j in 0..c {
                for i in 0..r {
                    da[i * c + j] = g[j * r + i];
                }
            }
            a.accumulate_grad(&da);
        }))
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let a = self.clone();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |node: &Inner| {
            let g = node.grad_ref()[0];
            a.accumulate_grad(&vec![g; n]);
        })
    }

    /// Stack equal-shape tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape("stack of zero tensors".into()));
        }
        let base = parts[0].shape().to_vec();
        for p in parts {
            if p.shape() != base.as_slice() {
                return Err(Error::Shape(format!(
                    "stack: shapes {:?} and {:?} differ",
                    base,
                    p.shape()
                )));
            }
        }
        let chunk: usize = base.iter().product();
        let mut data = Vec::with_capacity(chunk * parts.len());
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&base);
        let owned: Vec<Tensor> = parts.to_vec();
        Ok(Tensor::from_op(shape, data, parts.to_vec(), move |node: &Inner| {
            let g = node.grad_ref();
            for (i, p) in owned.iter().enumerate() {
                p.accumulate_grad(&g[i * chunk..(i + 1) * chunk]);
            }
        }))
    }

    /// Select index `b` of the leading axis, dropping that axis.
    pub fn index_batch(&self, b: usize) -> Result<Tensor> {
        if self.ndim() < 2 {
            return Err(Error::Shape(format!(
                "index_batch expects at least 2 axes, got {:?}",
                self.shape()
            )));
        }
        let batch = self.shape()[0];
        if b >= batch {
            return Err(Error::Shape(format!(
                "index_batch: index {b} out of range for leading axis {batch}"
            )));
        }
        let rest: Vec<usize> = self.shape()[1..].to_vec();
        let chunk: usize = rest.iter().product();
        let data = self.data()[b * chunk..(b + 1) * chunk].to_vec();
        let a = self.clone();
        let total = self.numel();
        Ok(Tensor::from_op(rest, data, vec![self.clone()], move |node: &Inner| {
            let g = node.grad_ref();
            let mut da = vec![0.0; total];
            da[b * chunk..(b + 1) * chunk].copy_from_slice(&g);
            a.accumulate_grad(&da);
        }))
    }

    /// Rows `range.start..range.end` of a 2D tensor; the gradient scatters
    /// back into exactly those rows.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::Shape(format!(
                "slice_rows expects a 2D tensor, got {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if start > end || end > r {
            return Err(Error::Shape(format!(
                "slice_rows: range {start}..{end} out of bounds for {r} rows"
            )));
        }
        let data = self.data()[start * c..end * c].to_vec();
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![end - start, c],
            data,
            vec![self.clone()],
            move |node: &Inner| {
                let g = node.grad_ref();
                let mut da = vec![0.0; r * c];
                da[start * c..end * c].copy_from_slice(&g);
                a.accumulate_grad(&da);
            },
        ))
    }

    /// Columns `start..end` of a 2D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::Shape(format!(
                "slice_cols expects a 2D tensor, got {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if start > end || end > c {
            return Err(Error::Shape(format!(
                "slice_cols: range {start}..{end} out of bounds for {c} columns"
            )));
        }
        let w = end - start;
        let src = self.data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        drop(src);
        let a = self.clone();
        Ok(Tensor::from_op(vec![r, w], data, vec![self.clone()], move |node: &Inner| {
            let g = node.grad_ref();
            let mut da = vec![0.0; r * c];
            for i in 0..r {
                da[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            a.accumulate_grad(&da);
        }))
    }

    /// Concatenate 2D tensors with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero tensors".into()));
        }
        let r = parts[0].shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            if p.ndim() != 2 || p.shape()[0] != r {
                return Err(Error::Shape(format!(
                    "concat_cols: incompatible shape {:?}",
                    p.shape()
                )));
            }
            widths.push(p.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let src = p.data();
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let owned: Vec<Tensor> = parts.to_vec();
        let widths_b = widths.clone();
        Ok(Tensor::from_op(vec![r, total], data, parts.to_vec(), move |node: &Inner| {
            let g = node.grad_ref();
            let mut off = 0;
            for (p, &w) in owned.iter().zip(&widths_b) {
                let mut dp = vec![0.0; r * w];
                for i in 0..r {
                    dp[i * w..(i + 1) * w]
                        .copy_from_slice(&g[i * total + off..i * total + off + w]);
                }
                p.accumulate_grad(&dp);
                off += w;
            }
        }))
    }

    /// Broadcast-add a vector over the trailing axis: `[..., c] + [c]`.
    pub fn add_bias_last(&self, bias: &Tensor) -> Result<Tensor> {
        let c = *self.shape().last().ok_or_else(|| Error::Shape("empty shape".into()))?;
        if bias.numel() != c {
            return Err(Error::Shape(format!(
                "add_bias_last: bias of {} elements against trailing axis {c}",
                bias.numel()
            )));
        }
        let bd = bias.to_vec();
        let data: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % c])
            .collect();
        let (a, b) = (self.clone(), bias.clone());
        let rows = self.numel() / c;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            move |node: &Inner| {
                let g = node.grad_ref();
                a.accumulate_grad(&g);
                let mut db = vec![0.0; c];
                for i in 0..rows {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                b.accumulate_grad(&db);
            },
        ))
    }

    /// Broadcast-add a per-channel vector over `[b, c, n]` or `[c, n]`.
    pub fn add_bias_channel(&self, bias: &Tensor) -> Result<Tensor> {
        let (batch, c, n) = self.conv_dims("add_bias_channel")?;
        if bias.numel() != c {
            return Err(Error::Shape(format!(
                "add_bias_channel: bias of {} elements against {c} channels",
                bias.numel()
            )));
        }
        let bd = bias.to_vec();
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for bi in 0..batch {
            for ci in 0..c {
                let off = (bi * c + ci) * n;
                for t in 0..n {
                    data[off + t] = src[off + t] + bd[ci];
                }
            }
        }
        drop(src);
        let (a, b) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            move |node: &Inner| {
                let g = node.grad_ref();
                a.accumulate_grad(&g);
                let mut db = vec![0.0; c];
                for bi in 0..batch {
                    for ci in 0..c {
                        let off = (bi * c + ci) * n;
                        db[ci] += g[off..off + n].iter().sum::<f64>();
                    }
                }
                b.accumulate_grad(&db);
            },
        ))
    }

    /// Interpret the tensor as `[batch, channels, length]`, treating a 2D
    /// tensor as a single sample.
    pub(crate) fn conv_dims(&self, op: &str) -> Result<(usize, usize, usize)> {
        match self.shape() {
            [c, n] => Ok((1, *c, *n)),
            [b, c, n] => Ok((*b, *c, *n)),
            other => Err(Error::Shape(format!(
                "{op} expects [channels, length] or [batch, channels, length], got {other:?}"
            ))),
        }
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let a = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |node: &Inner| {
            let g = node.grad_ref();
            let ad = a.data();
            let da: Vec<f64> = g
                .iter()
                .zip(ad.iter())
                .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                .collect();
            drop(ad);
            a.accumulate_grad(&da);
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let out = data.clone();
        let a = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |node: &Inner| {
            let g = node.grad_ref();
            let da: Vec<f64> = g.iter().zip(&out).map(|(gi, &y)| gi * y * (1.0 - y)).collect();
            a.accumulate_grad(&da);
        })
    }

    /// Elementwise absolute value with sign backward; subgradient 0 at 0.
    pub fn abs(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x.abs()).collect();
        let a = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |node: &Inner| {
            let g = node.grad_ref();
            let ad = a.data();
            let da: Vec<f64> = g
                .iter()
                .zip(ad.iter())
                .map(|(gi, &x)| {
                    if x > 0.0 {
                        *gi
                    } else if x < 0.0 {
                        -*gi
                    } else {
                        0.0
                    }
                })
                .collect();
            drop(ad);
            a.accumulate_grad(&da);
        })
    }

    /// Softmax along `axis`, stabilized by max subtraction. Each slice along
    /// the axis sums to 1 and is strictly positive.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(Error::Shape(format!(
                "softmax: axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let shape = self.shape().to_vec();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for s in 0..axis_len {
                    mx = mx.max(src[base + s * inner]);
                }
                let mut denom = 0.0;
                for s in 0..axis_len {
                    let e = (src[base + s * inner] - mx).exp();
                    out[base + s * inner] = e;
                    denom += e;
                }
                for s in 0..axis_len {
                    out[base + s * inner] /= denom;
                }
            }
        }
        drop(src);
        let y = out.clone();
        let a = self.clone();
        Ok(Tensor::from_op(shape, out, vec![self.clone()], move |node: &Inner| {
            let g = node.grad_ref();
            let mut da = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * axis_len * inner + i;
                    let mut dot = 0.0;
                    for s in 0..axis_len {
                        let idx = base + s * inner;
                        dot += g[idx] * y[idx];
                    }
                    for s in 0..axis_len {
                        let idx = base + s * inner;
                        da[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            a.accumulate_grad(&da);
        }))
    }

    /// Divide each row of a 2D tensor by the sum of its elements.
    pub fn row_normalize(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::Shape(format!(
                "row_normalize expects a 2D tensor, got {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut sums = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let s: f64 = row.iter().sum();
            sums[i] = s;
            for j in 0..c {
                out[i * c + j] = row[j] / s;
            }
        }
        drop(src);
        let y = out.clone();
        let a = self.clone();
        Ok(Tensor::from_op(vec![r, c], out, vec![self.clone()], move |node: &Inner| {
            let g = node.grad_ref();
            let mut da = vec![0.0; r * c];
            for i in 0..r {
                let mut dot = 0.0;
                for j in 0..c {
                    dot += g[i * c + j] * y[i * c + j];
                }
                for j in 0..c {
                    da[i * c + j] = (g[i * c + j] - dot) / sums[i];
                }
            }
            a.accumulate_grad(&da);
        }))
    }

    /// Scale each column of a 2D tensor by a weight: `y[i][j] = x[i][j] * w[j]`.
    /// The weight may be shaped `[n]` or `[1, n]`.
    pub fn mul_colwise(&self, weights: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::Shape(format!(
                "mul_colwise expects a 2D tensor, got {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if weights.numel() != c {
            return Err(Error::Shape(format!(
                "mul_colwise: {} weights against {c} columns",
                weights.numel()
            )));
        }
        let w = weights.to_vec();
        let src = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = src[i * c + j] * w[j];
            }
        }
        drop(src);
        let (a, b) = (self.clone(), weights.clone());
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone(), weights.clone()],
            move |node: &Inner| {
                let g = node.grad_ref();
                let bd = b.data();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[i * c + j] * bd[j];
                    }
                }
                drop(bd);
                a.accumulate_grad(&da);
                let ad = a.data();
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j] * ad[i * c + j];
                    }
                }
                drop(ad);
                b.accumulate_grad(&db);
            },
        ))
    }

    /// Mean over the time (trailing) axis: `[b, c, n] -> [b, c]` or
    /// `[c, n] -> [c]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (batch, c, n) = self.conv_dims("global_avg_pool")?;
        if n == 0 {
            return Err(Error::Shape("global_avg_pool over an empty time axis".into()));
        }
        let src = self.data();
        let mut out = vec![0.0; batch * c];
        for bi in 0..batch {
            for ci in 0..c {
                let off = (bi * c + ci) * n;
                out[bi * c + ci] = src[off..off + n].iter().sum::<f64>() / n as f64;
            }
        }
        drop(src);
        let out_shape = if self.ndim() == 3 { vec![batch, c] } else { vec![c] };
        let a = self.clone();
        Ok(Tensor::from_op(out_shape, out, vec![self.clone()], move |node: &Inner| {
            let g = node.grad_ref();
            let mut da = vec![0.0; batch * c * n];
            for bi in 0..batch {
                for ci in 0..c {
                    let gi = g[bi * c + ci] / n as f64;
                    let off = (bi * c + ci) * n;
                    for t in 0..n {
                        da[off + t] = gi;
                    }
                }
            }
            a.accumulate_grad(&da);
        }))
    }

    /// Length-preserving 1D cross-correlation with zero padding. `kernels`
    /// has shape `[c_out, c_in, k]`; padding splits `k - 1` as evenly as
    /// possible with the extra column on the right.
    pub fn conv1d(&self, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (batch, c_in, n) = self.conv_dims("conv1d")?;
        if c_in == 0 || n == 0 {
            return Err(Error::Shape(format!(
                "conv1d: empty input of shape {:?}",
                self.shape()
            )));
        }
        if kernels.ndim() != 3 {
            return Err(Error::Shape(format!(
                "conv1d: kernels must be [c_out, c_in, k], got {:?}",
                kernels.shape()
            )));
        }
        let (c_out, kc_in, k) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[2]);
        if kc_in != c_in {
            return Err(Error::Shape(format!(
                "conv1d: input has {c_in} channels but kernels expect {kc_in}"
            )));
        }
        if let Some(b) = bias {
            if b.numel() != c_out {
                return Err(Error::Shape(format!(
                    "conv1d: bias of {} elements against {c_out} output channels",
                    b.numel()
                )));
            }
        }
        let pad_left = (k - 1) / 2;
        let x = self.data();
        let w = kernels.data();
        let bvec = bias.map(|b| b.to_vec());
        let mut out = vec![0.0; batch * c_out * n];
        for bi in 0..batch {
            for co in 0..c_out {
                let ooff = (bi * c_out + co) * n;
                if let Some(bv) = &bvec {
                    for t in 0..n {
                        out[ooff + t] = bv[co];
                    }
                }
                for ci in 0..c_in {
                    let xoff = (bi * c_in + ci) * n;
                    let woff = (co * c_in + ci) * k;
                    for kk in 0..k {
                        let wv = w[woff + kk];
                        if wv == 0.0 {
                            continue;
                        }
                        // out[t] += w[kk] * x[t + kk - pad_left]
                        let t_lo = pad_left.saturating_sub(kk);
                        let t_hi = (n + pad_left).saturating_sub(kk).min(n);
                        for t in t_lo..t_hi {
                            out[ooff + t] += wv * x[xoff + t + kk - pad_left];
                        }
                    }
                }
            }
        }
        drop(x);
        drop(w);
        let out_shape = if self.ndim() == 3 {
            vec![batch, c_out, n]
        } else {
            vec![c_out, n]
        };
        let a = self.clone();
        let kt = kernels.clone();
        let bt = bias.cloned();
        let mut parents = vec![self.clone(), kernels.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(out_shape, out, parents, move |node: &Inner| {
            let g = node.grad_ref();
            if a.requires_grad() {
                let w = kt.data();
                let mut dx = vec![0.0; batch * c_in * n];
                for bi in 0..batch {
                    for co in 0..c_out {
                        let goff = (bi * c_out + co) * n;
                        for ci in 0..c_in {
                            let xoff = (bi * c_in + ci) * n;
                            let woff = (co * c_in + ci) * k;
                            for kk in 0..k {
                                let wv = w[woff + kk];
                                if wv == 0.0 {
                                    continue;
                                }
                                let t_lo = pad_left.saturating_sub(kk);
                                let t_hi = (n + pad_left).saturating_sub(kk).min(n);
                                for t in t_lo..t_hi {
                                    dx[xoff + t + kk - pad_left] += wv * g[goff + t];
                                }
                            }
                        }
                    }
                }
                drop(w);
                a.accumulate_grad(&dx);
            }
            if kt.requires_grad() {
                let x = a.data();
                let mut dw = vec![0.0; c_out * c_in * k];
                for bi in 0..batch {
                    for co in 0..c_out {
                        let goff = (bi * c_out + co) * n;
                        for ci in 0..c_in {
                            let xoff = (bi * c_in + ci) * n;
                            let woff = (co * c_in + ci) * k;
                            for kk in 0..k {
                                let t_lo = pad_left.saturating_sub(kk);
                                let t_hi = (n + pad_left).saturating_sub(kk).min(n);
                                let mut s = 0.0;
                                for t in t_lo..t_hi {
                                    s += g[goff + t] * x[xoff + t + kk - pad_left];
                                }
                                dw[woff + kk] += s;
                            }
                        }
                    }
                }
                drop(x);
                kt.accumulate_grad(&dw);
            }
            if let Some(b) = &bt {
                if b.requires_grad() {
                    let mut db = vec![0.0; c_out];
                    for bi in 0..batch {
                        for co in 0..c_out {
                            let goff = (bi * c_out + co) * n;
                            db[co] += g[goff..goff + n].iter().sum::<f64>();
                        }
                    }
                    b.accumulate_grad(&db);
                }
            }
        }))
    }

    /// Layer normalization over the trailing axis of a 2D tensor, with an
    /// affine transform.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::Shape(format!(
                "layer_norm expects a 2D tensor, got {:?}",
                self.shape()
            )));
        }
        let (r, d) = (self.shape()[0], self.shape()[1]);
        if gamma.numel() != d || beta.numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm: affine params of {}/{} elements against width {d}",
                gamma.numel(),
                beta.numel()
            )));
        }
        let src = self.data();
        let gm = gamma.to_vec();
        let bt = beta.to_vec();
        let mut out = vec![0.0; r * d];
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[i * d + j] = xh;
                out[i * d + j] = gm[j] * xh + bt[j];
            }
        }
        drop(src);
        let (a, gt, btn) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            vec![r, d],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |node: &Inner| {
                let g = node.grad_ref();
                let gm = gt.data();
                if a.requires_grad() {
                    let mut da = vec![0.0; r * d];
                    for i in 0..r {
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xhat = 0.0;
                        for j in 0..d {
                            let dy = g[i * d + j] * gm[j];
                            mean_dy += dy;
                            mean_dy_xhat += dy * xhat[i * d + j];
                        }
                        mean_dy /= d as f64;
                        mean_dy_xhat /= d as f64;
                        for j in 0..d {
                            let dy = g[i * d + j] * gm[j];
                            da[i * d + j] =
                                inv_std[i] * (dy - mean_dy - xhat[i * d + j] * mean_dy_xhat);
                        }
                    }
                    a.accumulate_grad(&da);
                }
                drop(gm);
                if gt.requires_grad() {
                    let mut dg = vec![0.0; d];
                    for i in 0..r {
                        for j in 0..d {
                            dg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                    gt.accumulate_grad(&dg);
                }
                if btn.requires_grad() {
                    let mut db = vec![0.0; d];
                    for i in 0..r {
                        for j in 0..d {
                            db[j] += g[i * d + j];
                        }
                    }
                    btn.accumulate_grad(&db);
                }
            },
        ))
    }
}

/// Batch statistics produced by a training-mode batch-norm forward pass;
/// used by the owning layer to update running estimates.
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
    /// Per-channel element count the statistics were computed over.
    pub count: usize,
}

/// Batch normalization over the channel axis of `[b, c, n]` (or `[c, n]`)
/// input. In training mode normalizes by batch statistics and reports them;
/// in eval mode uses the provided running estimates.
pub fn batch_norm1d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
    training: bool,
) -> Result<(Tensor, Option<BatchNormStats>)> {
    let (batch, c, n) = x.conv_dims("batch_norm1d")?;
    if gamma.numel() != c || beta.numel() != c || running_mean.len() != c || running_var.len() != c
    {
        return Err(Error::Shape(format!(
            "batch_norm1d: channel axis {c} does not match parameter lengths"
        )));
    }
    let m = batch * n;
    let src = x.data();
    let (mean, var) = if training {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for bi in 0..batch {
                let off = (bi * c + ci) * n;
                s += src[off..off + n].iter().sum::<f64>();
            }
            mean[ci] = s / m as f64;
            let mut v = 0.0;
            for bi in 0..batch {
                let off = (bi * c + ci) * n;
                for t in 0..n {
                    let d = src[off + t] - mean[ci];
                    v += d * d;
                }
            }
            var[ci] = v / m as f64;
        }
        (mean, var)
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };
    let gm = gamma.to_vec();
    let bt = beta.to_vec();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; src.len()];
    let mut xhat = vec![0.0; src.len()];
    for bi in 0..batch {
        for ci in 0..c {
            let off = (bi * c + ci) * n;
            for t in 0..n {
                let xh = (src[off + t] - mean[ci]) * inv_std[ci];
                xhat[off + t] = xh;
                out[off + t] = gm[ci] * xh + bt[ci];
            }
        }
    }
    drop(src);
    let stats = training.then(|| BatchNormStats {
        mean: mean.clone(),
        var: var.clone(),
        count: m,
    });
    let (a, gt, btn) = (x.clone(), gamma.clone(), beta.clone());
    let tensor = Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |node: &Inner| {
            let g = node.grad_ref();
            let gm = gt.data();
            if a.requires_grad() {
                let mut da = vec![0.0; g.len()];
                if training {
                    // Gradient through the batch statistics.
                    for ci in 0..c {
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xhat = 0.0;
                        for bi in 0..batch {
                            let off = (bi * c + ci) * n;
                            for t in 0..n {
                                let dy = g[off + t] * gm[ci];
                                mean_dy += dy;
                                mean_dy_xhat += dy * xhat[off + t];
                            }
                        }
                        mean_dy /= m as f64;
                        mean_dy_xhat /= m as f64;
                        for bi in 0..batch {
                            let off = (bi * c + ci) * n;
                            for t in 0..n {
                                let dy = g[off + t] * gm[ci];
                                da[off + t] = inv_std[ci]
                                    * (dy - mean_dy - xhat[off + t] * mean_dy_xhat);
                            }
                        }
                    }
                } else {
                    for bi in 0..batch {
                        for ci in 0..c {
                            let off = (bi * c + ci) * n;
                            for t in 0..n {
                                da[off + t] = g[off + t] * gm[ci] * inv_std[ci];
                            }
                        }
                    }
                }
                a.accumulate_grad(&da);
            }
            drop(gm);
            if gt.requires_grad() {
                let mut dg = vec![0.0; c];
                for bi in 0..batch {
                    for ci in 0..c {
                        let off = (bi * c + ci) * n;
                        for t in 0..n {
                            dg[ci] += g[off + t] * xhat[off + t];
                        }
                    }
                }
                gt.accumulate_grad(&dg);
            }
            if btn.requires_grad() {
                let mut db = vec![0.0; c];
                for bi in 0..batch {
                    for ci in 0..c {
                        let off = (bi * c + ci) * n;
                        db[ci] += g[off..off + n].iter().sum::<f64>();
                    }
                }
                btn.accumulate_grad(&db);
            }
        },
    );
    Ok((tensor, stats))
}
