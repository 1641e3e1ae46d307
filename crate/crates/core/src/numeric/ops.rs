//! Differentiable tensor operations.

use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Marks a zero entry in a gather index map.
pub const GATHER_ZERO: usize = usize::MAX;

// ---------------------------------------------------------------------------
// Raw kernels
// ---------------------------------------------------------------------------

/// `a[m x k] * b[k x n]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m x n] * b[k x n]^T`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m x k]^T * b[m x n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, t.shape(), &[0, 0])),
    }
}

impl Tensor {
    fn unary(&self, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let y = out.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let x = parents[0].data();
                let gx = g
                    .iter()
                    .zip(x.iter().zip(&y))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let out = self.data().iter().zip(other.data().iter()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let out = self.data().iter().zip(other.data().iter()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, p| {
                let a = p[0].data();
                let b = p[1].data();
                let ga = g.iter().zip(b.iter()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(a.iter()).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| v * factor).collect())]),
        )
    }

    /// Adds `bias` (length = last dim) to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().unwrap();
        if bias.numel() != d {
            return Err(Error::shape("add_bias", self.shape(), bias.shape()));
        }
        let b = bias.data();
        let out = self
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b.iter()).map(|(x, b)| x + b))
            .collect();
        drop(b);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _| {
                let mut gb = vec![0.0; d];
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    /// Multiplies row `i` of a matrix by the constant `factors[i]`.
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Tensor> {
        let (r, c) = as_matrix("scale_rows", self)?;
        if factors.len() != r {
            return Err(Error::shape("scale_rows", self.shape(), &[factors.len()]));
        }
        let factors = factors.to_vec();
        let out = self
            .data()
            .chunks(c)
            .zip(&factors)
            .flat_map(|(row, f)| row.iter().map(move |v| v * f))
            .collect();
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx = g
                    .chunks(c)
                    .zip(&factors)
                    .flat_map(|(row, f)| row.iter().map(move |v| v * f))
                    .collect();
                vec![Some(gx)]
            }),
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix("matmul", self)?;
        let (k2, n) = as_matrix("matmul", other)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let out = matmul_nn(&self.data(), &other.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p| {
                let ga = p[0]
                    .requires_grad()
                    .then(|| matmul_nt(g, &p[1].data(), m, n, k));
                let gb = p[1]
                    .requires_grad()
                    .then(|| matmul_tn(&p[0].data(), g, m, k, n));
                vec![ga, gb]
            }),
        ))
    }

    /// `self * other^T` without materialising the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n) = as_matrix("matmul_t", self)?;
        let (k, n2) = as_matrix("matmul_t", other)?;
        if n != n2 {
            return Err(Error::shape("matmul_t", self.shape(), other.shape()));
        }
        let out = matmul_nt(&self.data(), &other.data(), m, n, k);
        Ok(Tensor::from_op(
            vec![m, k],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p| {
                // out = A B^T; dA = g B; dB = g^T A
                let ga = p[0]
                    .requires_grad()
                    .then(|| matmul_nn(g, &p[1].data(), m, k, n));
                let gb = p[1]
                    .requires_grad()
                    .then(|| matmul_tn(g, &p[0].data(), m, k, n));
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = as_matrix("transpose", self)?;
        let src = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Exact GeLU, `0.5 x (1 + erf(x / sqrt 2))`.
    pub fn gelu(&self) -> Tensor {
        self.unary(gelu_scalar, |x, _| gelu_grad_scalar(x))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} for shape {:?}",
                self.shape()
            )));
        }
        let shape = self.shape().to_vec();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (x[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        drop(x);
        let y = out.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Standardises each last-axis row then applies `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().unwrap();
        if gamma.numel() != d || beta.numel() != d {
            return Err(Error::shape("layer_norm", self.shape(), gamma.shape()));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gm[j] + bt[j];
            }
        }
        drop((x, gm, bt));
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, p| {
                let gm = p[1].data();
                let mut gx = vec![0.0; g.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let dn = d as f64;
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        gx[r * d + j] = inv_std[r] / dn * (dn * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            }),
        ))
    }

    /// Mean negative log-likelihood over rows whose target is not
    /// `ignore_index`.
    pub fn cross_entropy(&self, targets: &[usize], ignore_index: Option<usize>) -> Result<Tensor> {
        let (b, k) = as_matrix("cross_entropy", self)?;
        if targets.len() != b {
            return Err(Error::shape("cross_entropy", self.shape(), &[targets.len()]));
        }
        let active: Vec<usize> = (0..b).filter(|&r| Some(targets[r]) != ignore_index).collect();
        for &r in &active {
            if targets[r] >= k {
                return Err(Error::Index {
                    what: "cross_entropy target class",
                    index: targets[r],
                    size: k,
                });
            }
        }
        if active.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let x = self.data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for &r in &active {
            let lsm = log_softmax_row(&x[r * k..(r + 1) * k]);
            loss -= lsm[targets[r]];
            for (p, l) in probs[r * k..(r + 1) * k].iter_mut().zip(&lsm) {
                *p = l.exp();
            }
        }
        drop(x);
        let count = active.len() as f64;
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss / count],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; b * k];
                let scale = g[0] / count;
                for &r in &active {
                    for j in 0..k {
                        let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                        gx[r * k + j] = (probs[r * k + j] - onehot) * scale;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `out[i] = self[index[i]]`, or 0 where `index[i] == GATHER_ZERO`.
    /// The backward pass scatter-adds.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        let n = self.numel();
        if let Some(&bad) = index.iter().find(|&&i| i != GATHER_ZERO && i >= n) {
            return Err(Error::Index {
                what: "gather source",
                index: bad,
                size: n,
            });
        }
        let src = self.data();
        let out = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i] })
            .collect();
        drop(src);
        Ok(Tensor::from_op(
            shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for (&i, &gv) in index.iter().zip(g) {
                    if i != GATHER_ZERO {
                        gx[i] += gv;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Embedding lookup: rows `ids` of a `[vocab x d]` table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = as_matrix("embedding", self)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                size: v,
            });
        }
        let index: Vec<usize> = ids.iter().flat_map(|&i| i * d..(i + 1) * d).collect();
        self.gather(Rc::new(index), &[ids.len(), d])
    }

    pub fn row(&self, i: usize) -> Result<Tensor> {
        self.rows(i, 1)
    }

    pub fn rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = as_matrix("rows", self)?;
        if start + len > r || len == 0 {
            return Err(Error::shape("rows", self.shape(), &[start, len]));
        }
        let index: Vec<usize> = (start * c..(start + len) * c).collect();
        self.gather(Rc::new(index), &[len, c])
    }

    pub fn cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = as_matrix("cols", self)?;
        if start + len > c || len == 0 {
            return Err(Error::shape("cols", self.shape(), &[start, len]));
        }
        let index: Vec<usize> = (0..r)
            .flat_map(|i| (start..start + len).map(move |j| i * c + j))
            .collect();
        self.gather(Rc::new(index), &[r, len])
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, c) = as_matrix("concat_rows", first)?;
        let mut sizes = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for p in parts {
            let (r, pc) = as_matrix("concat_rows", p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", first.shape(), p.shape()));
            }
            sizes.push(r * c);
            out.extend_from_slice(&p.data());
        }
        let rows = out.len() / c;
        Ok(Tensor::from_op(
            vec![rows, c],
            out,
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut offset = 0;
                sizes
                    .iter()
                    .map(|&s| {
                        let part = g[offset..offset + s].to_vec();
                        offset += s;
                        Some(part)
                    })
                    .collect()
            }),
        ))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (r, _) = as_matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = as_matrix("concat_cols", p)?;
            if pr != r {
                return Err(Error::shape("concat_cols", first.shape(), p.shape()));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let d = p.data();
            for i in 0..r {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(Tensor::from_op(
            vec![r, total],
            out,
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut offset = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let mut part = Vec::with_capacity(r * w);
                        for i in 0..r {
                            part.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        Some(part)
                    })
                    .collect()
            }),
        ))
    }
}
