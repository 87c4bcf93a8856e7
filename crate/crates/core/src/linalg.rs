//! Dense linear algebra needed for pseudo-inverses, rank tests and nullspaces.

use crate::autodiff::LinearMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, Tensor};

/// Thin singular value decomposition `A = U diag(s) V^T`.
///
/// For an `m x n` input with `k = min(m, n)`: `u` is `m x k`, `s` has length
/// `k` sorted in descending order, `v` is `n x k`.
#[derive(Clone, Debug)]
pub struct Svd<T: Scalar = f64> {
    pub u: Tensor<T>,
    pub s: Vec<T>,
    pub v: Tensor<T>,
}

/// Full right factor: every right singular vector of `A`, including those
/// spanning its nullspace when `m < n`.
#[derive(Clone, Debug)]
pub struct RightSingular<T: Scalar = f64> {
    /// Singular values, length `n`, descending (zeros appended when `m < n`).
    pub s: Vec<T>,
    /// `n x n`, columns are right singular vectors.
    pub v: Tensor<T>,
}

/// One-sided (Hestenes) Jacobi SVD of the columns of `cols`.
/// Returns column norms and the accumulated right rotations.
fn jacobi_columns<T: Scalar>(cols: &mut [Vec<T>]) -> (Vec<T>, Vec<Vec<T>>) {
    let n = cols.len();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let eps = T::epsilon();
    let tiny = T::min_positive_value().sqrt();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma.abs() < tiny {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    (norms, v)
}

#[inline]
fn rotate<T: Scalar>(x: &mut [T], y: &mut [T], c: T, s: T) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

fn dims<T: Scalar>(a: &Tensor<T>) -> Result<(usize, usize)> {
    match a.shape()[..] {
        [m, n] => Ok((m, n)),
        _ => Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: "expected a matrix".into(),
        }),
    }
}

/// Columns of a row-major `m x n` matrix.
fn columns<T: Scalar>(a: &Tensor<T>, m: usize, n: usize) -> Vec<Vec<T>> {
    let d = a.data();
    (0..n).map(|j| (0..m).map(|i| d[i * n + j]).collect()).collect()
}

fn from_columns<T: Scalar>(cols: &[Vec<T>], rows: usize) -> Tensor<T> {
    let n = cols.len();
    Tensor::from_fn(&[rows, n], |k| cols[k % n][k / n])
}

/// Thin SVD via one-sided Jacobi rotations (accurate to working precision,
/// including tiny singular values).
pub fn svd<T: Scalar>(a: &Tensor<T>) -> Result<Svd<T>> {
    let (m, n) = dims(a)?;
    if m >= n {
        let mut cols = columns(a, m, n);
        let (norms, v) = jacobi_columns(&mut cols);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));
        let s: Vec<T> = order.iter().map(|&i| norms[i]).collect();
        let ucols: Vec<Vec<T>> = order
            .iter()
            .map(|&i| {
                let nrm = norms[i];
                if nrm > T::zero() {
                    cols[i].iter().map(|&x| x / nrm).collect()
                } else {
                    vec![T::zero(); m]
                }
            })
            .collect();
        let vcols: Vec<Vec<T>> = order.iter().map(|&i| v[i].clone()).collect();
        Ok(Svd {
            u: from_columns(&ucols, m),
            s,
            v: from_columns(&vcols, n),
        })
    } else {
        let t = svd(&a.transpose()?)?;
        Ok(Svd { u: t.v, s: t.s, v: t.u })
    }
}

/// All `n` right singular vectors of an `m x n` matrix.
///
/// When `m < n` the matrix is padded with zero rows so the Jacobi sweep
/// produces a complete orthonormal basis of `R^n`.
pub fn right_singular<T: Scalar>(a: &Tensor<T>) -> Result<RightSingular<T>> {
    let (m, n) = dims(a)?;
    let padded;
    let a = if m < n {
        let mut data = a.data().to_vec();
        data.resize(n * n, T::zero());
        padded = Tensor::new(vec![n, n], data)?;
        &padded
    } else {
        a
    };
    // Tall matrices share right singular vectors with their triangular factor.
    let d = if m > 2 * n { svd(&householder_r(a)?)? } else { svd(a)? };
    Ok(RightSingular { s: d.s, v: d.v })
}

/// Triangular factor `R` (`n x n`) of a Householder QR of a tall `m x n` matrix.
pub fn householder_r<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = dims(a)?;
    if m < n {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: "QR reduction needs at least as many rows as columns".into(),
        });
    }
    let mut cols = columns(a, m, n);
    for k in 0..n {
        let norm = cols[k][k..].iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm == T::zero() {
            continue;
        }
        let alpha = if cols[k][k] > T::zero() { -norm } else { norm };
        let mut v: Vec<T> = cols[k][k..].to_vec();
        v[0] -= alpha;
        let vv = v.iter().map(|&x| x * x).sum::<T>();
        if vv == T::zero() {
            continue;
        }
        for col in cols.iter_mut().skip(k) {
            let proj = v.iter().zip(&col[k..]).map(|(&a, &b)| a * b).sum::<T>() * T::lit(2.0) / vv;
            for (c, &vi) in col[k..].iter_mut().zip(&v) {
                *c -= proj * vi;
            }
        }
    }
    Ok(Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        if i <= j {
            cols[j][i]
        } else {
            T::zero()
        }
    }))
}

/// Singular values in descending order.
pub fn singular_values<T: Scalar>(a: &Tensor<T>) -> Result<Vec<T>> {
    Ok(right_singular(a)?.s)
}

/// Number of singular values above `rtol * sigma_max`.
pub fn rank_from_singular<T: Scalar>(s: &[T], rtol: T) -> usize {
    let smax = s.iter().fold(T::zero(), |m, &x| m.max(x));
    if smax == T::zero() {
        return 0;
    }
    s.iter().filter(|&&x| x > rtol * smax).count()
}

pub fn rank<T: Scalar>(a: &Tensor<T>, rtol: T) -> Result<usize> {
    Ok(rank_from_singular(&svd(a)?.s, rtol))
}

/// Orthonormal basis of the nullspace, as vectors of length `n`.
pub fn nullspace<T: Scalar>(a: &Tensor<T>, rtol: T) -> Result<Vec<Vec<T>>> {
    let (_, n) = dims(a)?;
    let rs = right_singular(a)?;
    let r = rank_from_singular(&rs.s, rtol);
    Ok((r..n)
        .map(|j| (0..n).map(|i| rs.v.get(&[i, j])).collect())
        .collect())
}

/// Moore-Penrose pseudo-inverse with singular values below `rtol * sigma_max`
/// treated as zero.
pub fn pinv<T: Scalar>(a: &Tensor<T>, rtol: T) -> Result<Tensor<T>> {
    let (m, n) = dims(a)?;
    let d = svd(a)?;
    let k = d.s.len();
    let r = rank_from_singular(&d.s, rtol);
    let mut out = vec![T::zero(); n * m];
    for l in 0..r.min(k) {
        let inv = T::one() / d.s[l];
        for i in 0..n {
            let vil = d.v.get(&[i, l]) * inv;
            if vil == T::zero() {
                continue;
            }
            let row = &mut out[i * m..(i + 1) * m];
            for (j, o) in row.iter_mut().enumerate() {
                *o += vil * d.u.get(&[j, l]);
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Modified Gram-Schmidt; vectors whose residual norm falls below `tol`
/// are dropped. Returns an orthonormal list spanning the input.
pub fn gram_schmidt<T: Scalar>(vectors: &[Vec<T>], tol: T) -> Vec<Vec<T>> {
    let mut basis: Vec<Vec<T>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                for (x, &y) in w.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
        let nrm = dot(&w, &w).sqrt();
        if nrm > tol {
            basis.push(w.into_iter().map(|x| x / nrm).collect());
        }
    }
    basis
}

/// Largest singular value of a linear map by power iteration on `A^T A`.
pub fn operator_norm<T: Scalar>(map: &dyn LinearMap<T>, iters: usize) -> T {
    let n: usize = map.in_shape().iter().product();
    if n == 0 {
        return T::zero();
    }
    // Deterministic, generic starting vector.
    let mut x: Vec<T> = (0..n)
        .map(|i| T::lit(1.0 + ((i * 7919) % 101) as f64 / 101.0))
        .collect();
    let mut sigma = T::zero();
    for _ in 0..iters {
        let nrm = dot(&x, &x).sqrt();
        if nrm == T::zero() {
            return T::zero();
        }
        x.iter_mut().for_each(|v| *v /= nrm);
        let ax = map.apply(&x);
        sigma = dot(&ax, &ax).sqrt();
        x = map.apply_adjoint(&ax);
    }
    sigma
}

/// Result of [`least_squares_cg`].
#[derive(Clone, Debug)]
pub struct CgResult<T: Scalar> {
    pub x: Vec<T>,
    pub iterations: usize,
    /// Final `||A^T (A x - y)|| / ||A^T y||`.
    pub relative_residual: T,
}

/// Conjugate gradients on the normal equations (CGLS), started at zero so the
/// iterates stay in the row space and converge to the minimum-norm solution.
pub fn least_squares_cg<T: Scalar>(
    map: &dyn LinearMap<T>,
    y: &[T],
    tol: T,
    max_iter: usize,
) -> CgResult<T> {
    let n: usize = map.in_shape().iter().product();
    let mut x = vec![T::zero(); n];
    let mut r = y.to_vec();
    let mut s = map.apply_adjoint(&r);
    let s0 = dot(&s, &s).sqrt();
    if s0 == T::zero() {
        return CgResult {
            x,
            iterations: 0,
            relative_residual: T::zero(),
        };
    }
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let q = map.apply(&p);
        let qq = dot(&q, &q);
        if qq == T::zero() {
            break;
        }
        let alpha = gamma / qq;
        x.iter_mut().zip(&p).for_each(|(a, &b)| *a += alpha * b);
        r.iter_mut().zip(&q).for_each(|(a, &b)| *a -= alpha * b);
        s = map.apply_adjoint(&r);
        let gamma_new = dot(&s, &s);
        if gamma_new.sqrt() <= tol * s0 {
            gamma = gamma_new;
            break;
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        p.iter_mut().zip(&s).for_each(|(a, &b)| *a = b + beta * *a);
    }
    CgResult {
        x,
        iterations: it,
        relative_residual: gamma.sqrt() / s0,
    }
}
