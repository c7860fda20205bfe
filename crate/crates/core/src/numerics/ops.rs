//! Forward kernels and their vector-Jacobian products.
//!
//! Every reduction runs in a fixed order so results are bit-reproducible.
//! Token-grid tensors are `[h*w, channels]` with tokens in row-major grid order.

use super::Tensor;
use crate::error::{Error, Result};

/// `a · b` for `a: [m, k]`, `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = a.dims2()?;
    let (_, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    matmul(a, &b.transpose()?)
}

/// `aᵀ · b` for `a: [m, p]`, `b: [m, n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p) = a.dims2()?;
    let (m2, n) = b.dims2()?;
    if m != m2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; p * n];
    for r in 0..m {
        let brow = &bd[r * n..(r + 1) * n];
        for i in 0..p {
            let s = ad[r * p + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    Tensor::new(&[p, n], out)
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul_nt(upstream, b)?, matmul_tn(a, upstream)?))
}

pub fn matmul_nt_backward(a: &Tensor, b: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul(upstream, b)?, matmul_tn(upstream, a)?))
}

/// Row-wise softmax with max subtraction. Row sums are accumulated in `f64`.
pub fn softmax_rows(s: &Tensor) -> Result<Tensor> {
    let (r, c) = s.dims2()?;
    s.ensure_finite("softmax_rows input")?;
    let mut out = vec![0.0f32; r * c];
    for (src, dst) in s.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f64;
        for (d, &x) in dst.iter_mut().zip(src) {
            let e = (x - max).exp();
            *d = e;
            total += e as f64;
        }
        let inv = 1.0 / total;
        for d in dst.iter_mut() {
            *d = (*d as f64 * inv) as f32;
        }
    }
    Tensor::new(&[r, c], out)
}

/// Given softmax output `p`, returns `p ⊙ (u − rowsum(u ⊙ p))`.
pub fn softmax_rows_backward(probs: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    probs.ensure_same_shape(upstream, "softmax_rows_backward")?;
    let (r, c) = probs.dims2()?;
    let mut out = vec![0.0f32; r * c];
    for ((p, u), d) in probs
        .data()
        .chunks_exact(c)
        .zip(upstream.data().chunks_exact(c))
        .zip(out.chunks_exact_mut(c))
    {
        let dot: f64 = p.iter().zip(u).map(|(&p, &u)| p as f64 * u as f64).sum();
        for ((d, &p), &u) in d.iter_mut().zip(p).zip(u) {
            *d = (p as f64 * (u as f64 - dot)) as f32;
        }
    }
    Tensor::new(&[r, c], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "mul", |x, y| x * y)
}

pub fn mul_backward(a: &Tensor, b: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((mul(upstream, b)?, mul(upstream, a)?))
}

pub fn scale(a: &Tensor, factor: f32) -> Tensor {
    a.map(|x| x * factor)
}

/// Adds the vector `bias: [n]` to every row of `x: [m, n]`.
pub fn add_row(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    if bias.len() != n {
        return Err(Error::shape("add_row", x.shape(), bias.shape()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Gradient of `add_row` w.r.t. the bias: column sums of `upstream`.
pub fn add_row_backward(upstream: &Tensor) -> Result<Tensor> {
    let (_, n) = upstream.dims2()?;
    let mut acc = vec![0.0f64; n];
    for row in upstream.data().chunks_exact(n) {
        for (a, &u) in acc.iter_mut().zip(row) {
            *a += u as f64;
        }
    }
    Tensor::new(&[n], acc.into_iter().map(|x| x as f32).collect())
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU / swish: `x · σ(x)`.
pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    x.zip_map(upstream, "silu_backward", |v, u| {
        let s = sigmoid(v);
        u * s * (1.0 + v * (1.0 - s))
    })
}

/// `mean((a − b)²)` as a one-element tensor.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.ensure_same_shape(b, "mse")?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(Tensor::scalar((total / a.len() as f64) as f32))
}

pub fn mse_backward(a: &Tensor, b: &Tensor, upstream: f32) -> Result<(Tensor, Tensor)> {
    let k = 2.0 * upstream / a.len() as f32;
    let da = a.zip_map(b, "mse_backward", |x, y| k * (x - y))?;
    let db = scale(&da, -1.0);
    Ok((da, db))
}

fn pooled_dims(x: &Tensor, grid: (usize, usize), factor: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    let (n, d) = x.dims2()?;
    let (h, w) = grid;
    if factor == 0 || h * w != n || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(op, x.shape(), &[h, w, factor]));
    }
    Ok((h / factor, w / factor, d))
}

/// Average-pools a `[h*w, d]` token grid by `factor` along both axes.
pub fn avg_pool(x: &Tensor, grid: (usize, usize), factor: usize) -> Result<Tensor> {
    let (oh, ow, d) = pooled_dims(x, grid, factor, "avg_pool")?;
    let w = grid.1;
    let inv = 1.0 / (factor * factor) as f32;
    let mut out = vec![0.0f32; oh * ow * d];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * d..(oy * ow + ox + 1) * d];
            for dy in 0..factor {
                for dx in 0..factor {
                    let src = x.row((oy * factor + dy) * w + ox * factor + dx);
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
    }
    Tensor::new(&[oh * ow, d], out)
}

/// `upstream` is on the pooled grid; `grid` is the input grid.
pub fn avg_pool_backward(upstream: &Tensor, grid: (usize, usize), factor: usize) -> Result<Tensor> {
    let (h, w) = grid;
    let (_, d) = upstream.dims2()?;
    let inv = 1.0 / (factor * factor) as f32;
    let ow = w / factor;
    Ok(Tensor::from_fn(&[h * w, d], |i| {
        let (tok, ch) = (i / d, i % d);
        let (y, x) = (tok / w, tok % w);
        upstream.data()[((y / factor) * ow + x / factor) * d + ch] * inv
    }))
}

/// Nearest-neighbour upsampling of a `[h*w, d]` token grid by `factor`.
pub fn upsample_nearest(x: &Tensor, grid: (usize, usize), factor: usize) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let (h, w) = grid;
    if factor == 0 || h * w != n {
        return Err(Error::shape("upsample_nearest", x.shape(), &[h, w, factor]));
    }
    let (uh, uw) = (h * factor, w * factor);
    Ok(Tensor::from_fn(&[uh * uw, d], |i| {
        let (tok, ch) = (i / d, i % d);
        let (y, xx) = (tok / uw, tok % uw);
        x.data()[((y / factor) * w + xx / factor) * d + ch]
    }))
}

/// `grid` is the coarse (input) grid.
pub fn upsample_nearest_backward(upstream: &Tensor, grid: (usize, usize), factor: usize) -> Result<Tensor> {
    let (h, w) = grid;
    let fine = (h * factor, w * factor);
    // Summing each block is the same reduction as avg-pooling times factor².
    let pooled = avg_pool(upstream, fine, factor)?;
    Ok(scale(&pooled, (factor * factor) as f32))
}
