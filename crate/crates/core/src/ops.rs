//! Dense kernels with hand-written backward passes.
//!
//! Every forward has a matching `*_backward` that takes the upstream gradient
//! and whatever the forward consumed. Nothing here keeps state between calls.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_2d<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::dim(op, format!("expected rank 2, got {s:?}"))),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_2d("matmul", a)?;
    let (k2, n) = check_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("inner dims {k} vs {k2}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `aᵀ · b` for `a[k×m]`, `b[k×n]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = check_2d("matmul_tn", a)?;
    let (k2, n) = check_2d("matmul_tn", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_tn", format!("outer dims {k} vs {k2}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_2d("matmul_nt", a)?;
    let (n, k2) = check_2d("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", format!("inner dims {k} vs {k2}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    Tensor::new(&[m, n], out)
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `y = x·W`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    matmul(x, w)
}

/// Returns `(dX, dW) = (dY·Wᵀ, xᵀ·dY)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let dx = matmul_nt(dy, w)?;
    let dw = matmul_tn(x, dy)?;
    Ok((dx, dw))
}

/// Row-wise softmax over the trailing axis with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = check_2d("softmax_rows", x)?;
    let mut out = x.clone();
    for i in 0..m {
        softmax_in_place(&mut out.data_mut()[i * n..(i + 1) * n]);
    }
    if !out.all_finite() {
        return Err(Error::NonFinite("softmax_rows"));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `dx = y ⊙ (dy − rowsum(dy ⊙ y))`, with `y` the forward output.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = check_2d("softmax_rows_backward", y)?;
    if y.shape() != dy.shape() {
        return Err(Error::dim("softmax_rows_backward", "y/dy shape mismatch"));
    }
    let mut dx = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let (yr, gr) = (y.row(i), dy.row(i));
        let d = dot(yr, gr);
        for ((o, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - d);
        }
    }
    Ok(dx)
}

fn inv_rms<T: Scalar>(row: &[T], eps: T) -> T {
    let ms = row.iter().map(|&v| v * v).sum::<T>() / T::from_usize(row.len());
    T::one() / (ms + eps).sqrt()
}

/// `y = x / sqrt(mean(x²) + eps) ⊙ g` over the trailing axis.
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = g.numel();
    if d == 0 || x.shape().last() != Some(&d) {
        return Err(Error::dim(
            "rmsnorm",
            format!("x {:?} vs gain [{d}]", x.shape()),
        ));
    }
    let mut out = x.clone();
    let gd = g.data();
    for row in out.data_mut().chunks_mut(d) {
        let r = inv_rms(row, eps);
        // 0/0 for an all-zero row with eps = 0; the output is zero either way.
        let r = if r.is_finite() { r } else { T::zero() };
        for (v, &gv) in row.iter_mut().zip(gd) {
            *v = *v * r * gv;
        }
    }
    Ok(out)
}

/// Returns `(dx, dg)`.
pub fn rmsnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = g.numel();
    if x.shape() != dy.shape() || x.shape().last() != Some(&d) {
        return Err(Error::dim("rmsnorm_backward", "x/dy/g shape mismatch"));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dg = Tensor::zeros(&[d]);
    let gd = g.data();
    let inv_d = T::one() / T::from_usize(d);
    for ((xr, gr), dxr) in x
        .data()
        .chunks(d)
        .zip(dy.data().chunks(d))
        .zip(dx.data_mut().chunks_mut(d))
    {
        let r = inv_rms(xr, eps);
        if !r.is_finite() {
            continue;
        }
        // c = mean((dy ⊙ g) ⊙ x)
        let mut c = T::zero();
        for k in 0..d {
            c += gr[k] * gd[k] * xr[k];
        }
        c *= inv_d;
        let r3 = r * r * r;
        for k in 0..d {
            dxr[k] = r * gr[k] * gd[k] - r3 * xr[k] * c;
        }
        for (dgk, (&gv, &xv)) in dg.data_mut().iter_mut().zip(gr.iter().zip(xr)) {
            *dgk += gv * xv * r;
        }
    }
    Ok((dx, dg))
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = *v / (T::one() + (-*v).exp());
    }
    out
}

pub fn silu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(Error::dim("silu_backward", "x/dy shape mismatch"));
    }
    let mut dx = dy.clone();
    for (o, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        let s = T::one() / (T::one() + (-xv).exp());
        *o *= s * (T::one() + xv * (T::one() - s));
    }
    Ok(dx)
}

/// Rotary embedding on `x[t × h × d]`, pairing adjacent dims `(2j, 2j+1)` with
/// frequency `base^(−2j/d)`. `positions[i]` is the absolute index of row `i`.
pub fn rope<T: Scalar>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    rotate(x, positions, base, 1.0)
}

/// Inverse rotation; also the backward of [`rope`] since the map is orthogonal.
pub fn rope_inverse<T: Scalar>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    rotate(x, positions, base, -1.0)
}

pub fn rope_backward<T: Scalar>(dy: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    rope_inverse(dy, positions, base)
}

fn rotate<T: Scalar>(x: &Tensor<T>, positions: &[usize], base: f64, sign: f64) -> Result<Tensor<T>> {
    let (t, h, d) = match x.shape() {
        [t, h, d] => (*t, *h, *d),
        s => return Err(Error::dim("rope", format!("expected [t,h,d], got {s:?}"))),
    };
    if d % 2 != 0 {
        return Err(Error::dim("rope", format!("head dim {d} is odd")));
    }
    if positions.len() != t {
        return Err(Error::dim(
            "rope",
            format!("{} positions for {t} rows", positions.len()),
        ));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| base.powf(-(2.0 * j as f64) / d as f64))
        .collect();
    let mut out = x.clone();
    let od = out.data_mut();
    let mut cs = vec![(T::one(), T::zero()); half];
    for (ti, &pos) in positions.iter().enumerate() {
        // Angles in f64 so every caller sees identical rotations for a position.
        for (c, &f) in cs.iter_mut().zip(&freqs) {
            let a = sign * pos as f64 * f;
            *c = (T::from_f64(a.cos()), T::from_f64(a.sin()));
        }
        for hi in 0..h {
            let base_off = (ti * h + hi) * d;
            for (j, &(c, s)) in cs.iter().enumerate() {
                let (i0, i1) = (base_off + 2 * j, base_off + 2 * j + 1);
                let (a, b) = (od[i0], od[i1]);
                od[i0] = a * c - b * s;
                od[i1] = a * s + b * c;
            }
        }
    }
    Ok(out)
}

/// Mean next-token cross entropy and `dlogits = (softmax − onehot) / t`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    cross_entropy_scaled(logits, targets, targets.len())
}

/// Sum of per-row cross entropy divided by `denom`. Rows beyond `targets.len()`
/// carry no target and receive zero gradient.
pub fn cross_entropy_scaled<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    denom: usize,
) -> Result<(T, Tensor<T>)> {
    let (t, v) = check_2d("cross_entropy", logits)?;
    if targets.len() > t {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} targets for {t} rows", targets.len()),
        ));
    }
    if denom == 0 {
        return Err(Error::dim("cross_entropy", "zero normaliser"));
    }
    let inv = T::one() / T::from_usize(denom);
    let mut dlogits = Tensor::zeros(&[t, v]);
    let mut total = T::zero();
    for (i, &tgt) in targets.iter().enumerate() {
        if tgt >= v {
            return Err(Error::OutOfRange(format!("target {tgt} with vocab {v}")));
        }
        let row = logits.row(i);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - mx).exp()).sum();
        let lse = mx + sum.ln();
        total += lse - row[tgt];
        for (o, &z) in dlogits.row_mut(i).iter_mut().zip(row) {
            *o = (z - lse).exp() * inv;
        }
        dlogits.row_mut(i)[tgt] -= inv;
    }
    let loss = total * inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok((loss, dlogits))
}

/// Central-difference gradient check.
///
/// Perturbs each coordinate of `theta` by `±eps`, and compares
/// `(f(θ+e) − f(θ−e)) / 2eps` against `analytic`. The error of each coordinate is
/// normalised by the largest gradient magnitude present, so coordinates whose
/// true gradient is near zero do not dominate. Returns the max over coordinates.
pub fn fd_gradcheck<T: Scalar>(
    mut f: impl FnMut(&[T]) -> f64,
    theta: &[T],
    analytic: &[T],
    eps: T,
) -> f64 {
    assert_eq!(theta.len(), analytic.len(), "gradient length mismatch");
    let mut probe = theta.to_vec();
    let mut numeric = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = f(&probe);
        probe[i] = orig - eps;
        let fm = f(&probe);
        probe[i] = orig;
        // Divide by the step actually taken after rounding.
        let h = (orig + eps).as_f64() - (orig - eps).as_f64();
        numeric.push((fp - fm) / h);
    }
    let scale = numeric
        .iter()
        .zip(analytic)
        .map(|(n, a)| n.abs().max(a.as_f64().abs()))
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    numeric
        .iter()
        .zip(analytic)
        .map(|(n, a)| (n - a.as_f64()).abs() / scale)
        .fold(0.0, f64::max)
}
