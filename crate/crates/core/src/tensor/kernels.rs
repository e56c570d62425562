//! Plain tensor kernels. Every reduction runs in a fixed order so results are
//! bitwise reproducible.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const LANES: usize = 8;

/// Dot product with eight independent accumulators, combined pairwise.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

/// `y += a * x`
#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// `a[m×k] · b[k×n]`
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            axpy(crow, ad[i * k + t], &bd[t * n..(t + 1) * n]);
        }
    }
    let out = Tensor::matrix(m, n, c);
    Ok(out)
}

/// `a[m×k] · b[n×k]ᵀ`, i.e. a linear layer with an `[out × in]` weight.
pub fn matmul_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul_bt", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(arow, &bd[j * k..(j + 1) * k]);
        }
    }
    let out = Tensor::matrix(m, n, c);
    Ok(out)
}

/// `a[m×k]ᵀ · b[m×n]`
pub fn matmul_at<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (m2, n) = b.dims2()?;
    if m != m2 {
        return Err(Error::shape("matmul_at", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &bd[i * n..(i + 1) * n];
        for t in 0..k {
            axpy(&mut c[t * n..(t + 1) * n], ad[i * k + t], brow);
        }
    }
    let out = Tensor::matrix(k, n, c);
    Ok(out)
}

fn broadcast_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out = if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)?
    } else if b.shape().len() == 1 && b.numel() == a.cols() {
        let bd = b.data();
        let c = a.cols();
        let data = a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % c])).collect();
        Tensor::new(a.shape().to_vec(), data)?
    } else {
        return Err(Error::shape(op, a.shape(), b.shape()));
    };
    Ok(out)
}

/// Elementwise sum; `b` may also be a vector matching `a`'s last dimension.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary("add", a, b, |x, y| x + y)
}

/// Elementwise product; `b` may also be a vector matching `a`'s last dimension.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    a.map(|x| x * c)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn silu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(silu_scalar)
}

pub fn exp<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| x.exp())
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Softmax over the last dimension.
pub fn softmax_lastdim<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let mut out = a.clone();
    let c = out.cols();
    if c > 0 {
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
    }
    out
}

/// Row-wise softmax of a square score matrix where row `i` only sees
/// columns `0..=i`; masked entries are exactly zero.
pub fn causal_softmax<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    if r != c {
        return Err(Error::shape("causal_softmax", a.shape(), &[r, r]));
    }
    let mut out = a.clone();
    let data = out.data_mut();
    for i in 0..r {
        let row = &mut data[i * c..(i + 1) * c];
        softmax_in_place(&mut row[..=i]);
        for v in &mut row[i + 1..] {
            *v = T::zero();
        }
    }
    Ok(out)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("norm epsilon must be non-negative, got {eps}")));
    }
    Ok(())
}

/// `x / sqrt(mean(x²) + eps) · gain`, row-wise. Also returns the per-row
/// inverse RMS for the backward pass.
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Vec<T>)> {
    check_eps(eps)?;
    let c = x.cols();
    if gain.shape() != [c] {
        return Err(Error::shape("rmsnorm", x.shape(), gain.shape()));
    }
    let g = gain.data();
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    let n = T::of(c as f64);
    let e = T::of(eps);
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
        // An overflowed mean square would give r = 0 and silently finite zeros.
        let r = if ms.is_finite() {
            T::one() / (ms + e).sqrt()
        } else {
            T::nan()
        };
        for (v, &gj) in row.iter_mut().zip(g) {
            *v = *v * r * gj;
        }
        inv.push(r);
    }
    Ok((out, inv))
}

/// Standard layer norm with gain and bias. Returns the output, the
/// normalized input `x̂` and the per-row inverse standard deviation.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    check_eps(eps)?;
    let c = x.cols();
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::shape("layernorm", x.shape(), gain.shape()));
    }
    let (g, b) = (gain.data(), bias.data());
    let n = T::of(c as f64);
    let e = T::of(eps);
    let mut xhat = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for row in xhat.data_mut().chunks_mut(c.max(1)) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = if var.is_finite() {
            T::one() / (var + e).sqrt()
        } else {
            T::nan()
        };
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        inv.push(r);
    }
    let mut out = xhat.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        for j in 0..c {
            row[j] = row[j] * g[j] + b[j];
        }
    }
    Ok((out, xhat, inv))
}

/// Rotary position embedding in the rotate-half layout: within each head,
/// coordinate `i` pairs with `i + head_dim / 2`. Row `t` is at position
/// `start + t`. `inverse` applies the transposed rotation.
pub fn rope<T: Scalar>(
    x: &Tensor<T>,
    heads: usize,
    head_dim: usize,
    theta: f64,
    start: usize,
    inverse: bool,
) -> Result<Tensor<T>> {
    let (rows, cols) = x.dims2()?;
    if cols != heads * head_dim || !head_dim.is_multiple_of(2) {
        return Err(Error::shape("rope", x.shape(), &[rows, heads * head_dim]));
    }
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| theta.powf(-((2 * i) as f64) / head_dim as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.clone();
    let data = out.data_mut();
    for t in 0..rows {
        let pos = (start + t) as f64;
        for (i, &f) in freqs.iter().enumerate() {
            let (s, c) = (sign * pos * f).sin_cos();
            let (s, c) = (T::of(s), T::of(c));
            for h in 0..heads {
                let base = t * cols + h * head_dim;
                let a = data[base + i];
                let b = data[base + i + half];
                data[base + i] = a * c - b * s;
                data[base + i + half] = b * c + a * s;
            }
        }
    }
    Ok(out)
}

/// Indices of the two largest entries; ties go to the lower index.
pub fn top2<T: Scalar>(values: &[T]) -> Result<[usize; 2]> {
    if values.len() < 2 {
        return Err(Error::Config(format!(
            "top-2 selection needs at least two candidates, got {}",
            values.len()
        )));
    }
    let mut first = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[first] {
            first = i;
        }
    }
    let mut second = if first == 0 { 1 } else { 0 };
    for (i, &v) in values.iter().enumerate() {
        if i != first && v > values[second] {
            second = i;
        }
    }
    Ok([first, second])
}

/// Mean next-token cross-entropy of `logits[T×V]` against `targets`.
/// Returns the loss and the row-wise softmax.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<(T, Tensor<T>)> {
    let (rows, v) = logits.dims2()?;
    if rows != targets.len() || rows == 0 {
        return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len()]));
    }
    let probs = softmax_lastdim(logits);
    let mut total = T::zero();
    for (t, &y) in targets.iter().enumerate() {
        let y = y as usize;
        if y >= v {
            return Err(Error::TokenOutOfRange {
                position: t,
                id: y as u32,
                vocab: v,
            });
        }
        total = total + log_softmax_at(logits.row(t), y);
    }
    Ok((-total / T::of(rows as f64), probs))
}

/// `log softmax(row)[index]`, computed stably.
pub fn log_softmax_at<T: Scalar>(row: &[T], index: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row[index] - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let i = Tensor::<f32>::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::<f32>::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&i, &b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_scalar() {
        let a = Tensor::<f32>::matrix(1, 1, vec![2.0]);
        let b = Tensor::<f32>::matrix(1, 1, vec![3.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a: Vec<f32> = (0..35).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let oracle = naive_matmul(
            &a.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            &b.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            7,
            5,
            3,
        );
        let c = matmul(&Tensor::matrix(7, 5, a), &Tensor::matrix(5, 3, b)).unwrap();
        for (x, y) in c.data().iter().zip(&oracle) {
            assert!((*x as f64 - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        match matmul(&a, &b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::from_fn(vec![4, 19], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn(vec![6, 19], |_| rng.gen_range(-1.0..1.0));
        let bt = Tensor::from_fn(vec![19, 6], |i| b.data()[(i % 6) * 19 + i / 6]);
        let x = matmul_bt(&a, &b).unwrap();
        let y = matmul(&a, &bt).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() < 1e-12);

        let at = Tensor::from_fn(vec![19, 4], |i| a.data()[(i % 4) * 19 + i / 4]);
        let c = Tensor::<f64>::from_fn(vec![4, 3], |i| i as f64 * 0.1);
        let z = matmul_at(&a, &c).unwrap();
        let w = matmul(&at, &c).unwrap();
        assert!(z.max_abs_diff(&w).unwrap() < 1e-12);
    }

    #[test]
    fn silu_at_zero() {
        assert_eq!(silu_scalar(0.0f64), 0.0);
    }

    #[test]
    fn softmax_uniform() {
        let s = softmax_lastdim(&Tensor::<f64>::vector(vec![0.0, 0.0, 0.0]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn overflowed_norm_statistics_are_not_finite() {
        let x = Tensor::matrix(1, 2, vec![3e20f32, -3e20]);
        let g = Tensor::vector(vec![1.0f32, 1.0]);
        let b = Tensor::vector(vec![0.0f32, 0.0]);
        assert!(!rmsnorm(&x, &g, 1e-6).unwrap().0.is_finite());
        assert!(!layernorm(&x, &g, &b, 1e-6).unwrap().0.is_finite());
    }

    #[test]
    fn rmsnorm_closed_form() {
        let x = Tensor::<f64>::vector(vec![3.0, 4.0]);
        let g = Tensor::<f64>::vector(vec![1.0, 1.0]);
        let (y, _) = rmsnorm(&x, &g, 0.0).unwrap();
        assert!((y.data()[0] - 0.848_528_137_423_857).abs() < 1e-12);
        assert!((y.data()[1] - 1.131_370_849_898_476).abs() < 1e-12);
    }

    #[test]
    fn negative_eps_is_a_configuration_error() {
        let x = Tensor::<f64>::vector(vec![1.0]);
        let g = Tensor::<f64>::vector(vec![1.0]);
        assert!(matches!(rmsnorm(&x, &g, -1e-6), Err(Error::Config(_))));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let a = Tensor::<f64>::zeros(vec![3, 3]);
        let p = causal_softmax(&a).unwrap();
        assert_eq!(p.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(p.row(1), &[0.5, 0.5, 0.0]);
        for v in p.row(2) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rope_inverse_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_fn(vec![5, 8], |_| rng.gen_range(-1.0..1.0));
        let y = rope(&x, 2, 4, 10_000.0, 3, false).unwrap();
        let z = rope(&y, 2, 4, 10_000.0, 3, true).unwrap();
        assert!(z.max_abs_diff(&x).unwrap() < 1e-12);
        // position 0 is the identity rotation
        let p0 = rope(&x, 2, 4, 10_000.0, 0, false).unwrap();
        assert_eq!(p0.row(0), x.row(0));
    }

    #[test]
    fn top2_breaks_ties_low() {
        assert_eq!(top2(&[0.25f64, 0.25, 0.25, 0.25]).unwrap(), [0, 1]);
        assert_eq!(top2(&[0.1f64, 0.3, 0.3, 0.3]).unwrap(), [1, 2]);
        assert!(top2(&[1.0f64]).is_err());
    }
}
