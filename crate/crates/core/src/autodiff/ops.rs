use std::sync::Arc;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `x[.., n] + b[n]`
    AddRow(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        d: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Softmax(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Gather(Var, Arc<Vec<usize>>),
    Reshape(Var),
    MeanAxis1 {
        x: Var,
        t: usize,
    },
    Sum(Var),
    Mean(Var),
}

impl<T: Real> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            Scale(x, _) | Gelu(x) | Relu(x) | Softmax(x, _) | Gather(x, _) | Reshape(x)
            | Sum(x) | Mean(x) => vec![*x],
            CrossEntropy { logits, .. } => vec![*logits],
            MeanAxis1 { x, .. } => vec![*x],
        }
    }

    pub(crate) fn backward(
        &self,
        g: &Graph<T>,
        out: &Tensor<T>,
        dy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        use Op::*;
        let val = |v: Var| g.nodes[v.0].value.data();
        match self {
            Leaf => {}
            Add(a, b) => {
                g.accumulate(grads, *a, dy.to_vec());
                g.accumulate(grads, *b, dy.to_vec());
            }
            Sub(a, b) => {
                g.accumulate(grads, *a, dy.to_vec());
                g.accumulate(grads, *b, dy.iter().map(|&d| -d).collect());
            }
            Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                g.accumulate(grads, *a, dy.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                g.accumulate(grads, *b, dy.iter().zip(av).map(|(&d, &x)| d * x).collect());
            }
            Scale(x, c) => g.accumulate(grads, *x, dy.iter().map(|&d| d * *c).collect()),
            AddRow(x, b) => {
                g.accumulate(grads, *x, dy.to_vec());
                let n = val(*b).len();
                g.accumulate_with(grads, *b, |gb| {
                    for row in dy.chunks_exact(n) {
                        for (a, &d) in gb.iter_mut().zip(row) {
                            *a += d;
                        }
                    }
                });
            }
            MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                // dA = dY @ B^T
                g.accumulate_with(grads, *a, |ga| {
                    gemm(m, n, k, dy, n, 1, bv, 1, n, T::ONE, ga, k, 1)
                });
                // dB = A^T @ dY
                g.accumulate_with(grads, *b, |gb| {
                    gemm(k, m, n, av, 1, k, dy, n, 1, T::ONE, gb, n, 1)
                });
            }
            LayerNorm {
                x,
                gamma,
                beta,
                d,
                xhat,
                rstd,
            } => {
                let d = *d;
                let gv = val(*gamma);
                g.accumulate_with(grads, *gamma, |gg| {
                    for (dyr, xr) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += dyr[j] * xr[j];
                        }
                    }
                });
                g.accumulate_with(grads, *beta, |gb| {
                    for dyr in dy.chunks_exact(d) {
                        for j in 0..d {
                            gb[j] += dyr[j];
                        }
                    }
                });
                let inv_d = T::from_f64(1.0 / d as f64);
                g.accumulate_with(grads, *x, |gx| {
                    for (r, (dyr, xr)) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate()
                    {
                        let mut mean_dxhat = T::ZERO;
                        let mut mean_dxhat_xhat = T::ZERO;
                        for j in 0..d {
                            let dxh = dyr[j] * gv[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xr[j];
                        }
                        mean_dxhat *= inv_d;
                        mean_dxhat_xhat *= inv_d;
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dxh = dyr[j] * gv[j];
                            gxr[j] += rstd[r] * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                        }
                    }
                });
            }
            Gelu(x) => {
                let xv = val(*x);
                let c = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let pdf = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::from_f64(0.5);
                g.accumulate(
                    grads,
                    *x,
                    dy.iter()
                        .zip(xv)
                        .map(|(&d, &x)| {
                            let cdf = half * (T::ONE + (x * c).erf());
                            d * (cdf + x * pdf * (-half * x * x).exp())
                        })
                        .collect(),
                );
            }
            Relu(x) => {
                let xv = val(*x);
                g.accumulate(
                    grads,
                    *x,
                    dy.iter()
                        .zip(xv)
                        .map(|(&d, &x)| if x > T::ZERO { d } else { T::ZERO })
                        .collect(),
                );
            }
            Softmax(x, d) => {
                let d = *d;
                let y = out.data();
                let mut gx = vec![T::ZERO; y.len()];
                for ((gr, yr), dyr) in gx
                    .chunks_exact_mut(d)
                    .zip(y.chunks_exact(d))
                    .zip(dy.chunks_exact(d))
                {
                    let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gr[j] = yr[j] * (dyr[j] - dot);
                    }
                }
                g.accumulate(grads, *x, gx);
            }
            CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = dy[0] / T::from_f64(b as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    gl[i * k + y] -= scale;
                }
                g.accumulate(grads, *logits, gl);
            }
            Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => attention_backward(g, grads, *q, *k, *v, *heads, probs, dy),
            Gather(x, index) => {
                g.accumulate_with(grads, *x, |gx| {
                    for (&i, &d) in index.iter().zip(dy) {
                        gx[i] += d;
                    }
                });
            }
            Reshape(x) => g.accumulate(grads, *x, dy.to_vec()),
            MeanAxis1 { x, t } => {
                let t = *t;
                let shape = g.shape(*x);
                let (b, d) = (shape[0], shape[2]);
                let inv = T::from_f64(1.0 / t as f64);
                g.accumulate_with(grads, *x, |gx| {
                    for bi in 0..b {
                        for ti in 0..t {
                            let row = &mut gx[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                            for j in 0..d {
                                row[j] += dy[bi * d + j] * inv;
                            }
                        }
                    }
                });
            }
            Sum(x) => {
                let n = val(*x).len();
                g.accumulate(grads, *x, vec![dy[0]; n]);
            }
            Mean(x) => {
                let n = val(*x).len();
                g.accumulate(grads, *x, vec![dy[0] / T::from_f64(n as f64); n]);
            }
        }
    }
}

/// Row-major GEMM on slices: `C[m,n] = alpha * A[m,k] @ B[k,n] + beta * C`,
/// where A and B are addressed through the given strides (so transposes are
/// free).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    rsb: usize,
    csb: usize,
    beta: T,
    c: &mut [T],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        debug_assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        debug_assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above spell out the in-bounds condition;
    // every caller derives strides from the slice shapes it owns.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    g: &Graph<T>,
    grads: &mut [Option<Vec<T>>],
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: &[T],
    dy: &[T],
) {
    let shape = g.shape(q);
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let (qv, kv, vv) = (g.value(q).data(), g.value(k).data(), g.value(v).data());
    let mut dq = vec![T::ZERO; qv.len()];
    let mut dk = vec![T::ZERO; kv.len()];
    let mut dv = vec![T::ZERO; vv.len()];
    let mut dp = vec![T::ZERO; t * t];
    for bi in 0..b {
        for h in 0..heads {
            let off = bi * t * d + h * dh;
            let p = &probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
            // dV = P^T @ dO
            gemm(t, t, dh, p, 1, t, &dy[off..], d, 1, T::ONE, &mut dv[off..], d, 1);
            // dP = dO @ V^T
            gemm(t, dh, t, &dy[off..], d, 1, &vv[off..], 1, d, T::ZERO, &mut dp, t, 1);
            // dS = P * (dP - rowsum(dP * P)), folded with the score scale
            for i in 0..t {
                let row = &mut dp[i * t..(i + 1) * t];
                let pr = &p[i * t..(i + 1) * t];
                let dot: T = row.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for j in 0..t {
                    row[j] = pr[j] * (row[j] - dot) * scale;
                }
            }
            // dQ = dS @ K ; dK = dS^T @ Q
            gemm(t, t, dh, &dp, t, 1, &kv[off..], d, 1, T::ONE, &mut dq[off..], d, 1);
            gemm(t, t, dh, &dp, 1, t, &qv[off..], d, 1, T::ONE, &mut dk[off..], d, 1);
        }
    }
    g.accumulate(grads, q, dq);
    g.accumulate(grads, k, dk);
    g.accumulate(grads, v, dv);
}

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape {
            expected: g.shape(a).to_vec(),
            actual: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<T: Real> Graph<T> {
    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(self, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    /// Adds a vector along the trailing axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(bias).len();
        let xv = self.value(x);
        if last_dim(xv.shape()) != n || self.shape(bias).len() != 1 {
            return Err(Error::Shape {
                expected: vec![last_dim(xv.shape())],
                actual: self.shape(bias).to_vec(),
            });
        }
        let bv = self.value(bias).data();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// `x[.., k] @ w[k, n]`, treating all leading axes of `x` as rows.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || last_dim(&xs) != ws[0] {
            return Err(Error::contract(format!("matmul of {xs:?} and {ws:?}")));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).len() / k;
        let mut out = vec![T::ZERO; m * n];
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            k,
            1,
            self.value(w).data(),
            n,
            1,
            T::ZERO,
            &mut out,
            n,
            1,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MatMul { a: x, b: w, m, k, n }))
    }

    /// `x @ w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Normalizes every vector along the trailing axis to zero mean and unit
    /// (biased) variance, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if d == 0 || self.shape(x).is_empty() {
            return Err(Error::contract("layer_norm over an empty trailing axis"));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Shape {
                expected: vec![d],
                actual: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps = T::from_f64(eps);
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut rstd = vec![T::ZERO; rows];
        for (r, row) in xv.data().chunks_exact(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::ZERO; xhat.len()];
        for (orow, hrow) in out.chunks_exact_mut(d).zip(xhat.chunks_exact(d)) {
            for j in 0..d {
                orow[j] = hrow[j] * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                xhat,
                rstd,
            },
        ))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let half = T::from_f64(0.5);
        let out = self.value(x).map(|v| half * v * (T::ONE + (v * c).erf()));
        self.push(out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::ZERO));
        self.push(out, Op::Relu(x))
    }

    /// Max-shifted softmax along the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = last_dim(xv.shape());
        if d == 0 {
            return Err(Error::contract("softmax over an empty axis"));
        }
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::contract("softmax input contains NaN"));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(x, d)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let shape = lv.shape();
        if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
            return Err(Error::contract(format!(
                "cross_entropy wants logits [B, K] with B = {} labels, got {shape:?}",
                labels.len()
            )));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0f64;
        for (row, &y) in probs.chunks_exact_mut(k).zip(labels) {
            let max = row.iter().copied().fold(row[0], T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += (lse - row[y]).to_f64();
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let out = Tensor::scalar(T::from_f64(loss / labels.len() as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Multi-head scaled dot-product attention on `[B, T, d]` projections:
    /// per head `softmax(Q K^T / sqrt(d / heads)) V`, heads concatenated.
    /// With `causal`, token `i` attends only to tokens `<= i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice()
        {
            return Err(Error::contract(format!("attention needs equal [B, T, d] inputs, got {shape:?}")));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::ZERO; b * heads * t * t];
        let mut out = vec![T::ZERO; b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                let off = bi * t * d + h * dh;
                let p = &mut probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                gemm(t, dh, t, &qv[off..], d, 1, &kv[off..], 1, d, T::ZERO, p, t, 1);
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    for s in row.iter_mut() {
                        *s *= scale;
                    }
                    let valid = if causal { i + 1 } else { t };
                    softmax_in_place(&mut row[..valid]);
                    for s in row[valid..].iter_mut() {
                        *s = T::ZERO;
                    }
                }
                gemm(t, t, dh, p, t, 1, &vv[off..], d, 1, T::ZERO, &mut out[off..], d, 1);
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`. Covers patch
    /// extraction, pixel shuffling, slicing and channel dropping.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::contract("gather index length does not match output shape"));
        }
        let xv = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::contract(format!("gather index {bad} out of bounds")));
        }
        let data = index.iter().map(|&i| xv[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather(x, index)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// `[B, T, d] -> [B, d]` mean over tokens.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::contract(format!("mean_tokens wants [B, T, d], got {s:?}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let inv = T::from_f64(1.0 / t as f64);
        let mut out = vec![T::ZERO; b * d];
        for bi in 0..b {
            for ti in 0..t {
                let row = &xv[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for j in 0..d {
                    out[bi * d + j] += row[j];
                }
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let out = Tensor::new(vec![b, d], out)?;
        Ok(self.push(out, Op::MeanAxis1 { x, t }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let out = Tensor::scalar(s / T::from_f64(v.len().max(1) as f64));
        self.push(out, Op::Mean(x))
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(row[0], T::max);
    let mut z = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[1., 1., 1.]));
        let gm = g.constant(t(&[3], &[1., 1., 1.]));
        let bt = g.constant(t(&[3], &[0., 0., 0.]));
        let y = g.layer_norm(x, gm, bt, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0., 0., 0.]);
    }

    #[test]
    fn layer_norm_mean_one_std_one() {
        // x = [0, 2]: mean 1, std 1 -> xhat = [-1, 1] -> +3 = [2, 4]
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0., 2.]));
        let gm = g.constant(t(&[2], &[1., 1.]));
        let bt = g.constant(t(&[2], &[3., 3.]));
        let y = g.layer_norm(x, gm, bt, 1e-12).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 2.0).abs() < 1e-9 && (out[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[0.3, -1., 7., 2., 2., 9.]));
        let gm = g.constant(t(&[3], &[0., 0., 0.]));
        let bt = g.constant(t(&[3], &[0.5, -0.5, 2.]));
        let y = g.layer_norm(x, gm, bt, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -0.5, 2., 0.5, -0.5, 2.]);
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 0]));
        let gm = g.constant(Tensor::zeros(&[0]));
        let bt = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(g.layer_norm(x, gm, bt, 1e-5), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 2], &[0., 0., 1000., 0., 2f64.ln(), 0.]));
        let y = g.softmax(x).unwrap();
        let o = g.value(y).data();
        assert_eq!(&o[..2], &[0.5, 0.5]);
        assert!((o[2] - 1.0).abs() < 1e-12 && o[3].abs() < 1e-12);
        assert!((o[4] - 2.0 / 3.0).abs() < 1e-12 && (o[5] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[f64::NAN, 0.]));
        assert!(g.softmax(x).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 10]));
        let l = g.cross_entropy(x, &[3]).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);

        let x = g.constant(t(&[1, 2], &[1., 0.]));
        let l = g.cross_entropy(x, &[1]).unwrap();
        // -log(1 / (1 + e)) = ln(1 + e)
        assert!((g.value(l).item() - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);

        let x = g.constant(t(&[1, 2], &[60., 0.]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn cross_entropy_gradient_at_uniform_logits() {
        // softmax([0,0]) = [.5,.5]; d/dlogits = p - onehot(0) = [-.5, .5]
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 2], &[0., 0.]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.cross_entropy(x, &[3]).is_err());
    }

    #[test]
    fn causal_attention_first_token_sees_only_itself() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 2, 2], &[1., 0., 0., 1.]));
        let v = g.constant(t(&[1, 2, 2], &[5., 6., 7., 8.]));
        let y = g.attention(q, q, v, 1, true).unwrap();
        assert_eq!(&g.value(y).data()[..2], &[5., 6.]);
    }
}
