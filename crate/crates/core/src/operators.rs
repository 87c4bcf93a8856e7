//! Linear forward operators `y = A u + noise`, their adjoints and pseudo-inverses.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::autodiff::LinearMap;
use crate::error::{Error, Result};
use crate::groups::ImageAction;
use crate::linalg;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest `n` for which an explicit matrix is formed.
pub const EXPLICIT_CAP: usize = 4096;
/// Relative singular value cut-off of the pseudo-inverse.
pub const PINV_RTOL: f64 = 1e-10;

pub const OPERATOR_GRAMMAR: &str = "identity | inpaint:p=<keep prob>[:seed=<u64>] | fourier:accel=<r>:center=<lines>[:seed=<u64>] | blur:gauss:sigma=<s> | blur:box:size=<k> | blur:kernel=<w0>,<w1>,... | radon:views=<v>[:size=<n>][:bins=<b>]";

/// Compressed sparse row matrix.
#[derive(Clone, Debug)]
pub struct SparseMatrix<T: Scalar> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> SparseMatrix<T> {
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, T)>>) -> Self {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for r in &rows {
            for &(c, v) in r {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        (0..self.rows)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|k| self.values[k] * x[self.col_idx[k]])
                    .sum()
            })
            .collect()
    }

    pub fn matvec_t(&self, y: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.col_idx[k]] += self.values[k] * y[r];
            }
        }
        out
    }
}

/// Orthonormal separable 2-D DFT on an `h x w` grid.
#[derive(Clone, Debug)]
struct Dft2<T: Scalar> {
    h: usize,
    w: usize,
    cos_h: Vec<T>,
    sin_h: Vec<T>,
    cos_w: Vec<T>,
    sin_w: Vec<T>,
}

impl<T: Scalar> Dft2<T> {
    fn new(h: usize, w: usize) -> Self {
        let table = |n: usize| -> (Vec<T>, Vec<T>) {
            (0..n)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / n as f64;
                    (T::lit(a.cos()), T::lit(a.sin()))
                })
                .unzip()
        };
        let (cos_h, sin_h) = table(h);
        let (cos_w, sin_w) = table(w);
        Self {
            h,
            w,
            cos_h,
            sin_h,
            cos_w,
            sin_w,
        }
    }

    /// Forward (`sign = -1`) or inverse (`sign = +1`) transform, in place.
    fn transform(&self, re: &mut [T], im: &mut [T], inverse: bool) {
        let sign = if inverse { T::one() } else { -T::one() };
        let (h, w) = (self.h, self.w);
        let mut tr = vec![T::zero(); w.max(h)];
        let mut ti = vec![T::zero(); w.max(h)];
        for i in 0..h {
            let (rr, ri) = (&re[i * w..(i + 1) * w], &im[i * w..(i + 1) * w]);
            for k in 0..w {
                let (mut ar, mut ai) = (T::zero(), T::zero());
                for j in 0..w {
                    let t = (k * j) % w;
                    let (c, s) = (self.cos_w[t], sign * self.sin_w[t]);
                    ar += rr[j] * c - ri[j] * s;
                    ai += rr[j] * s + ri[j] * c;
                }
                tr[k] = ar;
                ti[k] = ai;
            }
            re[i * w..(i + 1) * w].copy_from_slice(&tr[..w]);
            im[i * w..(i + 1) * w].copy_from_slice(&ti[..w]);
        }
        let norm = T::one() / T::lit((h * w) as f64).sqrt();
        for j in 0..w {
            for k in 0..h {
                let (mut ar, mut ai) = (T::zero(), T::zero());
                for i in 0..h {
                    let t = (k * i) % h;
                    let (c, s) = (self.cos_h[t], sign * self.sin_h[t]);
                    let (xr, xi) = (re[i * w + j], im[i * w + j]);
                    ar += xr * c - xi * s;
                    ai += xr * s + xi * c;
                }
                tr[k] = ar * norm;
                ti[k] = ai * norm;
            }
            for k in 0..h {
                re[k * w + j] = tr[k];
                im[k * w + j] = ti[k];
            }
        }
    }
}

/// Which physical measurement an operator models.
#[derive(Clone, Debug)]
pub enum OperatorKind<T: Scalar> {
    /// Keeps the listed pixels.
    Inpainting { kept: Vec<usize> },
    /// Orthonormal 2-D DFT restricted to the listed frequencies; measurements
    /// are the real parts followed by the imaginary parts.
    FourierSubsample { selected: Vec<usize> },
    /// Circular convolution `y[p] = sum_k w_k u[p - d_k]` with taps `(d_row, d_col, w)`.
    CircularBlur { taps: Vec<(isize, isize, T)> },
    /// Line integrals (Joseph interpolation) at the given angles.
    Radon {
        angles: Vec<f64>,
        bins: usize,
        matrix: SparseMatrix<T>,
    },
    Dense { matrix: Tensor<T>, transposed: Tensor<T> },
}

enum PinvRepr<T: Scalar> {
    /// Rows are orthonormal, so `A^+ = A^T`.
    Adjoint,
    /// Circulant: diagonal in the Fourier basis; stores the pseudo-inverted spectrum.
    Spectral { re: Vec<T>, im: Vec<T> },
    Matrix { pinv: Tensor<T>, transposed: Tensor<T> },
}

/// A linear forward operator acting on single-channel `h x w` images.
pub struct LinearOperator<T: Scalar = f64> {
    spec: String,
    kind: OperatorKind<T>,
    h: usize,
    w: usize,
    m: usize,
    dft: Option<Dft2<T>>,
    explicit: OnceLock<Tensor<T>>,
    pinv: OnceLock<PinvRepr<T>>,
}

impl<T: Scalar> std::fmt::Debug for LinearOperator<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LinearOperator({}, {}x{} -> {})", self.spec, self.h, self.w, self.m)
    }
}

impl<T: Scalar> LinearOperator<T> {
    fn build(spec: String, kind: OperatorKind<T>, h: usize, w: usize) -> Result<Self> {
        let n = h * w;
        let (m, dft) = match &kind {
            OperatorKind::Inpainting { kept } => {
                if kept.is_empty() {
                    return Err(Error::InvalidArgument("inpainting mask keeps no pixel".into()));
                }
                if kept.iter().any(|&p| p >= n) || kept.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidArgument("mask indices must be sorted, unique and in range".into()));
                }
                (kept.len(), None)
            }
            OperatorKind::FourierSubsample { selected } => {
                if selected.is_empty() {
                    return Err(Error::InvalidArgument("sampling pattern selects no frequency".into()));
                }
                if selected.iter().any(|&p| p >= n) {
                    return Err(Error::InvalidArgument("frequency index out of range".into()));
                }
                (2 * selected.len(), Some(Dft2::new(h, w)))
            }
            OperatorKind::CircularBlur { taps } => {
                if taps.is_empty() {
                    return Err(Error::InvalidArgument("blur kernel is empty".into()));
                }
                (n, Some(Dft2::new(h, w)))
            }
            OperatorKind::Radon { matrix, .. } => (matrix.rows(), None),
            OperatorKind::Dense { matrix, .. } => {
                if matrix.shape()[1] != n {
                    return Err(Error::ShapeMismatch {
                        op: "dense operator",
                        left: matrix.shape().to_vec(),
                        right: vec![h, w],
                    });
                }
                (matrix.shape()[0], None)
            }
        };
        Ok(Self {
            spec,
            kind,
            h,
            w,
            m,
            dft,
            explicit: OnceLock::new(),
            pinv: OnceLock::new(),
        })
    }

    pub fn identity(h: usize, w: usize) -> Self {
        Self::inpainting(h, w, &vec![true; h * w]).expect("nonempty")
    }

    pub fn inpainting(h: usize, w: usize, mask: &[bool]) -> Result<Self> {
        if mask.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "inpainting mask",
                left: vec![mask.len()],
                right: vec![h, w],
            });
        }
        let kept = mask.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
        Self::build("inpaint".into(), OperatorKind::Inpainting { kept }, h, w)
    }

    /// Random mask keeping each pixel with probability `keep`.
    pub fn random_inpainting(h: usize, w: usize, keep: f64, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, 0x1a9a);
        let mask: Vec<bool> = (0..h * w).map(|_| r.gen_bool(keep.clamp(0.0, 1.0))).collect();
        let mut op = Self::inpainting(h, w, &mask)?;
        op.spec = format!("inpaint:p={keep}:seed={seed}");
        Ok(op)
    }

    /// DFT restricted to a boolean k-space pattern (row-major, `h x w`).
    pub fn fourier(h: usize, w: usize, pattern: &[bool]) -> Result<Self> {
        if pattern.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "fourier pattern",
                left: vec![pattern.len()],
                right: vec![h, w],
            });
        }
        let selected = pattern.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
        Self::build("fourier".into(), OperatorKind::FourierSubsample { selected }, h, w)
    }

    /// Cartesian line sampling: `h / accel` phase-encode rows in total, the
    /// `center` lowest-frequency rows always included, the rest drawn
    /// uniformly at random.
    pub fn fourier_lines(h: usize, w: usize, accel: f64, center: usize, seed: u64) -> Result<Self> {
        if !(accel >= 1.0) {
            return Err(Error::InvalidArgument("acceleration must be >= 1".into()));
        }
        let total = ((h as f64 / accel).round() as usize).clamp(1, h);
        let center = center.min(total);
        let mut rows: Vec<usize> = (0..center)
            .map(|k| (k as isize - (center / 2) as isize).rem_euclid(h as isize) as usize)
            .collect();
        let mut rest: Vec<usize> = (0..h).filter(|r| !rows.contains(r)).collect();
        rest.shuffle(&mut rng::stream(seed, 0xf0f0));
        rows.extend(rest.into_iter().take(total - center));
        let mut pattern = vec![false; h * w];
        for r in rows {
            pattern[r * w..(r + 1) * w].iter_mut().for_each(|p| *p = true);
        }
        let mut op = Self::fourier(h, w, &pattern)?;
        op.spec = format!("fourier:accel={accel}:center={center}:seed={seed}");
        Ok(op)
    }

    /// Circular blur with explicit taps `(row offset, col offset, weight)`.
    pub fn circular_blur(h: usize, w: usize, taps: Vec<(isize, isize, T)>) -> Result<Self> {
        Self::build("blur".into(), OperatorKind::CircularBlur { taps }, h, w)
    }

    /// Periodic Gaussian blur normalized to unit sum.
    pub fn gaussian_blur(h: usize, w: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument("sigma must be positive".into()));
        }
        let mut taps = Vec::new();
        let (rh, rw) = (h as isize / 2, w as isize / 2);
        for dr in -rh..=(h as isize - 1 - rh) {
            for dc in -rw..=(w as isize - 1 - rw) {
                let v = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
                if v > 1e-300 {
                    taps.push((dr, dc, v));
                }
            }
        }
        let total: f64 = taps.iter().map(|t| t.2).sum();
        let taps = taps.into_iter().map(|(a, b, v)| (a, b, T::lit(v / total))).collect();
        let mut op = Self::circular_blur(h, w, taps)?;
        op.spec = format!("blur:gauss:sigma={sigma}");
        Ok(op)
    }

    /// `k x k` box average anchored at the origin (rank deficient for even `k`).
    pub fn box_blur(h: usize, w: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("box size must be positive".into()));
        }
        let kh = if h == 1 { 1 } else { k };
        let v = T::one() / T::lit((kh * k) as f64);
        let taps = (0..kh as isize)
            .flat_map(|a| (0..k as isize).map(move |b| (a, b, v)))
            .collect();
        let mut op = Self::circular_blur(h, w, taps)?;
        op.spec = format!("blur:box:size={k}");
        Ok(op)
    }

    /// Toy parallel-beam CT: `views` angles uniformly in `[0, pi)`.
    pub fn radon(h: usize, w: usize, views: usize, bins: Option<usize>) -> Result<Self> {
        let angles: Vec<f64> = (0..views).map(|v| PI * v as f64 / views as f64).collect();
        let mut op = Self::radon_with_angles(h, w, &angles, bins)?;
        op.spec = format!("radon:views={views}:size={h}");
        Ok(op)
    }

    pub fn radon_with_angles(h: usize, w: usize, angles: &[f64], bins: Option<usize>) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::InvalidArgument("radon needs at least one angle".into()));
        }
        if let Some(a) = angles.iter().find(|a| !(**a >= 0.0 && **a < PI)) {
            return Err(Error::InvalidArgument(format!("radon angle {a} outside [0, pi)")));
        }
        let bins = bins.unwrap_or_else(|| ((h.max(w) as f64) * std::f64::consts::SQRT_2).ceil() as usize);
        let matrix = joseph_projector(h, w, angles, bins);
        Self::build(
            "radon".into(),
            OperatorKind::Radon {
                angles: angles.to_vec(),
                bins,
                matrix,
            },
            h,
            w,
        )
    }

    pub fn dense(h: usize, w: usize, matrix: Tensor<T>) -> Result<Self> {
        let transposed = matrix.transpose()?;
        Self::build("dense".into(), OperatorKind::Dense { matrix, transposed }, h, w)
    }

    /// Builds an operator from its config spec for an `h x w` grid.
    pub fn parse(spec: &str, h: usize, w: usize) -> Result<Self> {
        let bad = |reason: &str| Error::Spec {
            spec: spec.to_string(),
            reason: reason.to_string(),
            grammar: OPERATOR_GRAMMAR,
        };
        let mut parts = spec.trim().split(':');
        let head = parts.next().unwrap_or_default();
        let mut sub = None;
        let mut kv = std::collections::BTreeMap::new();
        for p in parts {
            match p.split_once('=') {
                Some((k, v)) => {
                    kv.insert(k.to_string(), v.to_string());
                }
                None if sub.is_none() => sub = Some(p.to_string()),
                None => return Err(bad("unexpected token")),
            }
        }
        let num = |key: &str, default: Option<f64>| -> Result<f64> {
            match kv.get(key) {
                Some(v) => v.parse().map_err(|_| bad(&format!("`{key}` must be a number"))),
                None => default.ok_or_else(|| bad(&format!("missing `{key}`"))),
            }
        };
        let seed = num("seed", Some(0.0))? as u64;
        let mut op = match (head, sub.as_deref()) {
            ("identity", None) => Self::identity(h, w),
            ("inpaint", None) => Self::random_inpainting(h, w, num("p", None)?, seed)?,
            ("fourier", None) => Self::fourier_lines(h, w, num("accel", None)?, num("center", Some(0.0))? as usize, seed)?,
            ("blur", Some("gauss")) => Self::gaussian_blur(h, w, num("sigma", None)?)?,
            ("blur", Some("box")) => Self::box_blur(h, w, num("size", None)? as usize)?,
            ("blur", None) => {
                let ws = kv.get("kernel").ok_or_else(|| bad("missing `kernel`"))?;
                let taps = ws
                    .split(',')
                    .enumerate()
                    .map(|(i, v)| v.trim().parse::<f64>().map(|x| (0, i as isize, T::lit(x))))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("kernel weights must be numbers"))?;
                Self::circular_blur(h, w, taps)?
            }
            ("radon", None) => {
                if let Some(size) = kv.get("size") {
                    if size.parse::<usize>().ok() != Some(h) {
                        return Err(bad("radon size does not match the image size"));
                    }
                }
                let bins = kv.get("bins").map(|_| num("bins", None)).transpose()?.map(|b| b as usize);
                Self::radon(h, w, num("views", None)? as usize, bins)?
            }
            _ => return Err(bad("unknown operator")),
        };
        op.spec = spec.trim().to_string();
        Ok(op)
    }

    pub fn spec(&self) -> &str {
        &self.spec
    }

    pub fn kind(&self) -> &OperatorKind<T> {
        &self.kind
    }

    /// Number of measurements.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of unknowns (pixels).
    pub fn n(&self) -> usize {
        self.h * self.w
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [1, self.h, self.w]
    }

    /// Pixel mask of an inpainting operator or k-space mask of a Fourier
    /// operator, for inspection.
    pub fn mask(&self) -> Option<Tensor<T>> {
        let idx = match &self.kind {
            OperatorKind::Inpainting { kept } => kept,
            OperatorKind::FourierSubsample { selected } => selected,
            _ => return None,
        };
        let mut t = Tensor::zeros(&[1, self.h, self.w]);
        for &p in idx {
            t.data_mut()[p] = T::one();
        }
        Some(t)
    }

    fn apply_flat(&self, u: &[T]) -> Vec<T> {
        match &self.kind {
            OperatorKind::Inpainting { kept } => kept.iter().map(|&p| u[p]).collect(),
            OperatorKind::FourierSubsample { selected } => {
                let dft = self.dft.as_ref().expect("fourier has a dft");
                let mut re = u.to_vec();
                let mut im = vec![T::zero(); u.len()];
                dft.transform(&mut re, &mut im, false);
                selected.iter().map(|&k| re[k]).chain(selected.iter().map(|&k| im[k])).collect()
            }
            OperatorKind::CircularBlur { taps } => {
                let (h, w) = (self.h as isize, self.w as isize);
                let mut out = vec![T::zero(); u.len()];
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = T::zero();
                        for &(dr, dc, wt) in taps {
                            let (si, sj) = ((i - dr).rem_euclid(h), (j - dc).rem_euclid(w));
                            acc += wt * u[(si * w + sj) as usize];
                        }
                        out[(i * w + j) as usize] = acc;
                    }
                }
                out
            }
            OperatorKind::Radon { matrix, .. } => matrix.matvec(u),
            OperatorKind::Dense { matrix, .. } => matrix.matvec(u).expect("checked"),
        }
    }

    fn adjoint_flat(&self, y: &[T]) -> Vec<T> {
        let n = self.n();
        match &self.kind {
            OperatorKind::Inpainting { kept } => {
                let mut out = vec![T::zero(); n];
                for (&p, &v) in kept.iter().zip(y) {
                    out[p] = v;
                }
                out
            }
            OperatorKind::FourierSubsample { selected } => {
                let dft = self.dft.as_ref().expect("fourier has a dft");
                let s = selected.len();
                let mut re = vec![T::zero(); n];
                let mut im = vec![T::zero(); n];
                for (j, &k) in selected.iter().enumerate() {
                    re[k] = y[j];
                    im[k] = y[s + j];
                }
                dft.transform(&mut re, &mut im, true);
                re
            }
            OperatorKind::CircularBlur { taps } => {
                let (h, w) = (self.h as isize, self.w as isize);
                let mut out = vec![T::zero(); n];
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = T::zero();
                        for &(dr, dc, wt) in taps {
                            let (si, sj) = ((i + dr).rem_euclid(h), (j + dc).rem_euclid(w));
                            acc += wt * y[(si * w + sj) as usize];
                        }
                        out[(i * w + j) as usize] = acc;
                    }
                }
                out
            }
            OperatorKind::Radon { matrix, .. } => matrix.matvec_t(y),
            OperatorKind::Dense { transposed, .. } => transposed.matvec(y).expect("checked"),
        }
    }

    fn check_image(&self, u: &Tensor<T>) -> Result<()> {
        if u.len() != self.n() {
            return Err(Error::ShapeMismatch {
                op: "apply",
                left: u.shape().to_vec(),
                right: vec![self.h, self.w],
            });
        }
        Ok(())
    }

    /// `A u` for an image with `h * w` entries; returns a length-`m` vector.
    pub fn apply(&self, u: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(u)?;
        Tensor::new(vec![self.m], self.apply_flat(u.data()))
    }

    /// `A^T y`, shaped `[1, h, w]`.
    pub fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        if y.len() != self.m {
            return Err(Error::ShapeMismatch {
                op: "adjoint",
                left: y.shape().to_vec(),
                right: vec![self.m],
            });
        }
        Tensor::new(self.image_shape().to_vec(), self.adjoint_flat(y.data()))
    }

    /// Explicit `m x n` matrix, formed once and cached.
    pub fn matrix(&self) -> Result<&Tensor<T>> {
        let n = self.n();
        if n > EXPLICIT_CAP {
            return Err(Error::SizeCap { size: n, cap: EXPLICIT_CAP });
        }
        Ok(self.explicit.get_or_init(|| {
            let mut out = vec![T::zero(); self.m * n];
            let mut e = vec![T::zero(); n];
            for j in 0..n {
                e[j] = T::one();
                for (i, v) in self.apply_flat(&e).into_iter().enumerate() {
                    out[i * n + j] = v;
                }
                e[j] = T::zero();
            }
            Tensor::new(vec![self.m, n], out).expect("shape")
        }))
    }

    fn pinv_repr(&self) -> Result<&PinvRepr<T>> {
        if let Some(p) = self.pinv.get() {
            return Ok(p);
        }
        let repr = match &self.kind {
            OperatorKind::Inpainting { .. } => PinvRepr::Adjoint,
            OperatorKind::CircularBlur { .. } => {
                let (re, im) = self.blur_spectrum();
                let mag2: Vec<T> = re.iter().zip(&im).map(|(&a, &b)| a * a + b * b).collect();
                let max = mag2.iter().fold(T::zero(), |m, &x| m.max(x)).sqrt();
                let cut = T::lit(PINV_RTOL) * max;
                // A = F^H diag(lambda) F; invert the nonzero eigenvalues.
                let (pr, pi) = re
                    .iter()
                    .zip(&im)
                    .zip(&mag2)
                    .map(|((&a, &b), &m2)| {
                        if m2.sqrt() > cut {
                            (a / m2, -b / m2)
                        } else {
                            (T::zero(), T::zero())
                        }
                    })
                    .unzip();
                PinvRepr::Spectral { re: pr, im: pi }
            }
            _ => {
                let pinv = linalg::pinv(self.matrix()?, T::lit(PINV_RTOL))?;
                let transposed = pinv.transpose()?;
                PinvRepr::Matrix { pinv, transposed }
            }
        };
        Ok(self.pinv.get_or_init(|| repr))
    }

    /// Eigenvalues of the circulant blur (DFT of its point spread function).
    fn blur_spectrum(&self) -> (Vec<T>, Vec<T>) {
        let OperatorKind::CircularBlur { taps } = &self.kind else {
            unreachable!("only called for blur operators")
        };
        let (h, w) = (self.h as isize, self.w as isize);
        let mut psf = vec![T::zero(); self.n()];
        for &(dr, dc, wt) in taps {
            psf[(dr.rem_euclid(h) * w + dc.rem_euclid(w)) as usize] += wt;
        }
        let mut im = vec![T::zero(); self.n()];
        self.dft.as_ref().expect("blur has a dft").transform(&mut psf, &mut im, false);
        // Orthonormal DFT of the psf times sqrt(n) gives the eigenvalues.
        let s = T::lit((self.n() as f64).sqrt());
        (psf.into_iter().map(|x| x * s).collect(), im.into_iter().map(|x| x * s).collect())
    }

    fn spectral_apply(&self, x: &[T], re_s: &[T], im_s: &[T], conjugate: bool) -> Vec<T> {
        let dft = self.dft.as_ref().expect("blur has a dft");
        let mut re = x.to_vec();
        let mut im = vec![T::zero(); x.len()];
        dft.transform(&mut re, &mut im, false);
        for k in 0..re.len() {
            let (a, b) = (re_s[k], if conjugate { -im_s[k] } else { im_s[k] });
            let (xr, xi) = (re[k], im[k]);
            re[k] = a * xr - b * xi;
            im[k] = a * xi + b * xr;
        }
        dft.transform(&mut re, &mut im, true);
        re
    }

    fn pinv_flat(&self, y: &[T]) -> Result<Vec<T>> {
        Ok(match self.pinv_repr()? {
            PinvRepr::Adjoint => self.adjoint_flat(y),
            PinvRepr::Spectral { re, im } => self.spectral_apply(y, re, im, false),
            PinvRepr::Matrix { pinv, .. } => pinv.matvec(y)?,
        })
    }

    fn pinv_adjoint_flat(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(match self.pinv_repr()? {
            PinvRepr::Adjoint => self.apply_flat(x),
            PinvRepr::Spectral { re, im } => self.spectral_apply(x, re, im, true),
            PinvRepr::Matrix { transposed, .. } => transposed.matvec(x)?,
        })
    }

    /// Minimum-norm least-squares solution `A^+ y`, shaped `[1, h, w]`.
    ///
    /// Uses the SVD of the explicit matrix (cut-off `1e-10 * sigma_max`), or
    /// an equivalent exact factorization for masks and circulants. Fails for
    /// `n > 4096`; use [`LinearOperator::least_squares`] there.
    pub fn pseudo_inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        if y.len() != self.m {
            return Err(Error::ShapeMismatch {
                op: "pseudo_inverse",
                left: y.shape().to_vec(),
                right: vec![self.m],
            });
        }
        if self.n() > EXPLICIT_CAP {
            return Err(Error::SizeCap {
                size: self.n(),
                cap: EXPLICIT_CAP,
            });
        }
        Tensor::new(self.image_shape().to_vec(), self.pinv_flat(y.data())?)
    }

    /// Explicit `n x m` pseudo-inverse.
    pub fn pinv_matrix(&self) -> Result<Tensor<T>> {
        let (m, n) = (self.m, self.n());
        if n > EXPLICIT_CAP {
            return Err(Error::SizeCap { size: n, cap: EXPLICIT_CAP });
        }
        let mut out = vec![T::zero(); n * m];
        let mut e = vec![T::zero(); m];
        for j in 0..m {
            e[j] = T::one();
            for (i, v) in self.pinv_flat(&e)?.into_iter().enumerate() {
                out[i * m + j] = v;
            }
            e[j] = T::zero();
        }
        Tensor::new(vec![n, m], out)
    }

    /// Iterative minimum-norm least squares (CGLS, relative residual `tol`).
    pub fn least_squares(&self, y: &Tensor<T>, tol: T, max_iter: usize) -> Result<Tensor<T>> {
        if y.len() != self.m {
            return Err(Error::ShapeMismatch {
                op: "least_squares",
                left: y.shape().to_vec(),
                right: vec![self.m],
            });
        }
        let res = linalg::least_squares_cg(self, y.data(), tol, max_iter);
        Tensor::new(self.image_shape().to_vec(), res.x)
    }

    /// Spectral norm by 50 steps of power iteration.
    pub fn norm_estimate(&self) -> T {
        linalg::operator_norm(self, 50)
    }
}

impl<T: Scalar> LinearMap<T> for LinearOperator<T> {
    fn in_shape(&self) -> Vec<usize> {
        self.image_shape().to_vec()
    }
    fn out_shape(&self) -> Vec<usize> {
        vec![self.m]
    }
    fn apply(&self, x: &[T]) -> Vec<T> {
        self.apply_flat(x)
    }
    fn apply_adjoint(&self, y: &[T]) -> Vec<T> {
        self.adjoint_flat(y)
    }
    fn name(&self) -> &'static str {
        "forward_operator"
    }
}

/// `y -> A^+ y` as a graph node.
pub struct PinvMap<T: Scalar>(pub Arc<LinearOperator<T>>);

impl<T: Scalar> LinearMap<T> for PinvMap<T> {
    fn in_shape(&self) -> Vec<usize> {
        vec![self.0.m]
    }
    fn out_shape(&self) -> Vec<usize> {
        self.0.image_shape().to_vec()
    }
    fn apply(&self, x: &[T]) -> Vec<T> {
        self.0.pinv_flat(x).expect("pseudo-inverse prepared before graph use")
    }
    fn apply_adjoint(&self, y: &[T]) -> Vec<T> {
        self.0.pinv_adjoint_flat(y).expect("pseudo-inverse prepared before graph use")
    }
    fn name(&self) -> &'static str {
        "pseudo_inverse"
    }
}

impl<T: Scalar> PinvMap<T> {
    /// Forces the pseudo-inverse factorization so graph evaluation cannot fail.
    pub fn new(op: Arc<LinearOperator<T>>) -> Result<Self> {
        op.pinv_repr()?;
        Ok(Self(op))
    }
}

fn joseph_projector<T: Scalar>(h: usize, w: usize, angles: &[f64], bins: usize) -> SparseMatrix<T> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut rows = Vec::with_capacity(angles.len() * bins);
    for &theta in angles {
        let (s, c) = theta.sin_cos();
        for b in 0..bins {
            let t = b as f64 - (bins as f64 - 1.0) / 2.0;
            let mut row: Vec<(usize, T)> = Vec::new();
            // Ray: x cos + y sin = t. Step along the axis the ray is most aligned with.
            if s.abs() >= c.abs() {
                let wgt = 1.0 / s.abs();
                for j in 0..w {
                    let x = j as f64 - cx;
                    let y = (t - x * c) / s;
                    let fi = cy - y;
                    interp_push(&mut row, fi, h, |i| i * w + j, wgt);
                }
            } else {
                let wgt = 1.0 / c.abs();
                for i in 0..h {
                    let y = cy - i as f64;
                    let x = (t - y * s) / c;
                    let fj = cx + x;
                    interp_push(&mut row, fj, w, |j| i * w + j, wgt);
                }
            }
            rows.push(row);
        }
    }
    SparseMatrix::from_rows(h * w, rows)
}

fn interp_push<T: Scalar>(row: &mut Vec<(usize, T)>, f: f64, len: usize, index: impl Fn(usize) -> usize, wgt: f64) {
    let lo = f.floor();
    let frac = f - lo;
    for (k, wk) in [(lo, 1.0 - frac), (lo + 1.0, frac)] {
        if wk <= 0.0 || k < 0.0 || k > (len - 1) as f64 {
            continue;
        }
        row.push((index(k as usize), T::lit(wk * wgt)));
    }
}

/// Measurement noise `epsilon`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseKind {
    None,
    Gaussian { sigma: f64 },
    /// `Poisson(gain * y) / gain`.
    Poisson { gain: f64 },
    /// Poisson followed by additive Gaussian.
    PoissonGaussian { gain: f64, sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            seed: 0,
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Gaussian { sigma },
            seed,
        }
    }

    /// Parses `none`, `gaussian:<sigma>`, `poisson:<gain>` or `poisson-gaussian:<gain>:<sigma>`.
    pub fn parse(spec: &str, seed: u64) -> Result<Self> {
        let bad = || Error::Spec {
            spec: spec.to_string(),
            reason: "unknown noise model".into(),
            grammar: "none | gaussian:<sigma> | poisson:<gain> | poisson-gaussian:<gain>:<sigma>",
        };
        let parts: Vec<&str> = spec.trim().split(':').collect();
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let kind = match parts[..] {
            ["none"] => NoiseKind::None,
            ["gaussian", s] => NoiseKind::Gaussian { sigma: f(s)? },
            ["poisson", g] => NoiseKind::Poisson { gain: f(g)? },
            ["poisson-gaussian", g, s] => NoiseKind::PoissonGaussian { gain: f(g)?, sigma: f(s)? },
            _ => return Err(bad()),
        };
        Ok(Self { kind, seed })
    }

    pub fn spec(&self) -> String {
        match self.kind {
            NoiseKind::None => "none".into(),
            NoiseKind::Gaussian { sigma } => format!("gaussian:{sigma}"),
            NoiseKind::Poisson { gain } => format!("poisson:{gain}"),
            NoiseKind::PoissonGaussian { gain, sigma } => format!("poisson-gaussian:{gain}:{sigma}"),
        }
    }

    /// Noisy copy of `y`; `draw` selects an independent random stream so the
    /// same `(seed, draw)` always yields the same sample.
    pub fn sample<T: Scalar>(&self, y: &Tensor<T>, draw: u64) -> Result<Tensor<T>> {
        let mut r = rng::stream(self.seed, rng::substream(0x9015e, draw));
        let gauss = |r: &mut rng::Rng, sigma: f64| -> f64 {
            let z: f64 = StandardNormal.sample(r);
            sigma * z
        };
        let poisson = |r: &mut rng::Rng, gain: f64, v: f64| -> Result<f64> {
            if v < 0.0 {
                return Err(Error::InvalidArgument(format!("poisson noise needs nonnegative input, got {v}")));
            }
            let lambda = gain * v;
            if lambda == 0.0 {
                return Ok(0.0);
            }
            let p = Poisson::new(lambda).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let k: f64 = p.sample(r);
            Ok(k / gain)
        };
        let data = y
            .data()
            .iter()
            .map(|&v| {
                let v = v.as_f64();
                let out = match self.kind {
                    NoiseKind::None => return Ok(T::lit(v)),
                    NoiseKind::Gaussian { sigma } => {
                        if sigma == 0.0 {
                            return Ok(T::lit(v));
                        }
                        v + gauss(&mut r, sigma)
                    }
                    NoiseKind::Poisson { gain } => poisson(&mut r, gain, v)?,
                    NoiseKind::PoissonGaussian { gain, sigma } => poisson(&mut r, gain, v)? + gauss(&mut r, sigma),
                };
                Ok(T::lit(out))
            })
            .collect::<Result<Vec<T>>>()?;
        Tensor::new(y.shape().to_vec(), data)
    }
}

/// Outcome of [`detect_equivariance`].
#[derive(Clone, Debug)]
pub struct EquivarianceReport<T: Scalar = f64> {
    pub equivariant: bool,
    /// `||A T_g - S_g A||_F / ||A T_g||_F` per element, with `S_g = A T_g A^+`.
    pub residuals: Vec<T>,
}

impl<T: Scalar> EquivarianceReport<T> {
    pub fn max_residual(&self) -> T {
        self.residuals.iter().fold(T::zero(), |m, &r| m.max(r))
    }
}

/// `A T_g` as an explicit `m x n` matrix.
pub(crate) fn virtual_operator<T: Scalar>(a: &Tensor<T>, action: &ImageAction, g: usize) -> Tensor<T> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![T::zero(); m * n];
    let mut st = Vec::new();
    for p in 0..n {
        action.stencil(g, p, &mut st);
        for &(q, wgt) in &st {
            let wgt = T::lit(wgt);
            for i in 0..m {
                out[i * n + q] += ad[i * n + p] * wgt;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("shape")
}

/// Tests whether `A T_g = S_g A` for some `S_g`, for every element of the group.
pub fn detect_equivariance<T: Scalar>(op: &LinearOperator<T>, action: &ImageAction, tol: T) -> Result<EquivarianceReport<T>> {
    let (h, w) = action.grid();
    if h * w != op.n() {
        return Err(Error::ShapeMismatch {
            op: "detect_equivariance",
            left: vec![op.h, op.w],
            right: vec![h, w],
        });
    }
    let a = op.matrix()?;
    let pinv = op.pinv_matrix()?;
    let residuals = action
        .elements()
        .map(|g| {
            let at = virtual_operator(a, action, g);
            let denom = at.frobenius();
            if denom == T::zero() {
                return Ok(T::zero());
            }
            let s = at.matmul(&pinv)?;
            let fit = s.matmul(a)?;
            Ok(at.sub(&fit)?.frobenius() / denom)
        })
        .collect::<Result<Vec<T>>>()?;
    let equivariant = residuals.iter().all(|&r| r < tol);
    Ok(EquivarianceReport { equivariant, residuals })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(n: usize, seed: u64) -> Tensor {
        rng::uniform(&mut rng::stream(seed, 1), &[n], -1.0, 1.0)
    }

    fn all_ops() -> Vec<LinearOperator> {
        vec![
            LinearOperator::random_inpainting(6, 6, 0.5, 3).unwrap(),
            LinearOperator::fourier_lines(6, 6, 2.0, 2, 1).unwrap(),
            LinearOperator::gaussian_blur(6, 6, 1.0).unwrap(),
            LinearOperator::box_blur(6, 6, 2).unwrap(),
            LinearOperator::radon(6, 6, 5, None).unwrap(),
            LinearOperator::dense(2, 3, rng::uniform(&mut rng::stream(5, 0), &[4, 6], -1.0, 1.0)).unwrap(),
        ]
    }

    #[test]
    fn adjoint_and_linearity_on_random_probes() {
        for op in all_ops() {
            for k in 0..100 {
                let u = probe(op.n(), 2 * k);
                let v = probe(op.n(), 2 * k + 1);
                let y = probe(op.m(), 1000 + k);
                let au = op.apply(&u).unwrap();
                let lhs = au.dot(&y).unwrap();
                let rhs = u.dot(&op.adjoint(&y).unwrap()).unwrap();
                assert!((lhs - rhs).abs() < 1e-10, "{op:?}");
                let comb = u.scale(0.3).add(&v.scale(-1.7)).unwrap();
                let lin = au.scale(0.3).add(&op.apply(&v).unwrap().scale(-1.7)).unwrap();
                assert!(op.apply(&comb).unwrap().max_abs_diff(&lin) < 1e-10);
            }
        }
    }

    #[test]
    fn moore_penrose_identities() {
        for op in all_ops() {
            let a = op.matrix().unwrap().clone();
            let p = op.pinv_matrix().unwrap();
            let apa = a.matmul(&p).unwrap().matmul(&a).unwrap();
            let pap = p.matmul(&a).unwrap().matmul(&p).unwrap();
            assert!(apa.max_abs_diff(&a) < 1e-8, "{op:?}");
            assert!(pap.max_abs_diff(&p) < 1e-8, "{op:?}");
        }
    }

    #[test]
    fn structured_pinv_matches_svd_pinv() {
        for op in [
            LinearOperator::random_inpainting(4, 4, 0.5, 3).unwrap(),
            LinearOperator::gaussian_blur(4, 4, 0.8).unwrap(),
            LinearOperator::box_blur(4, 4, 2).unwrap(),
        ] {
            let svd = linalg::pinv(op.matrix().unwrap(), PINV_RTOL).unwrap();
            assert!(op.pinv_matrix().unwrap().max_abs_diff(&svd) < 1e-9, "{op:?}");
        }
    }

    #[test]
    fn inpainting_examples() {
        let id = LinearOperator::<f64>::identity(2, 2);
        assert_eq!(id.m(), 4);
        let u = Tensor::from_slice(&[3.0, 1.0, 4.0, 1.0]);
        assert_eq!(id.apply(&u).unwrap().data(), u.data());
        let op = LinearOperator::inpainting(1, 4, &[true, true, false, false]).unwrap();
        let a = op.matrix().unwrap();
        assert_eq!(a.data(), &[1., 0., 0., 0., 0., 1., 0., 0.]);
        let y = op.apply(&u).unwrap();
        assert_eq!(y.data(), &[3.0, 1.0]);
        assert_eq!(op.adjoint(&y).unwrap().data(), &[3.0, 1.0, 0.0, 0.0]);
        assert_eq!(op.pseudo_inverse(&y).unwrap().data(), &[3.0, 1.0, 0.0, 0.0]);
        assert!(LinearOperator::<f64>::inpainting(1, 4, &[false; 4]).is_err());
    }

    #[test]
    fn identity_pinv_is_identity() {
        let op = LinearOperator::<f64>::identity(2, 3);
        let y = probe(6, 9);
        assert_eq!(op.pseudo_inverse(&y).unwrap().data(), y.data());
    }

    #[test]
    fn two_tap_blur_has_rank_three() {
        let op = LinearOperator::parse("blur:kernel=0.5,0.5", 1, 4).unwrap();
        let a = op.matrix().unwrap();
        let expected = Tensor::new(
            vec![4, 4],
            vec![0.5, 0., 0., 0.5, 0.5, 0.5, 0., 0., 0., 0.5, 0.5, 0., 0., 0., 0.5, 0.5],
        )
        .unwrap();
        assert!(a.max_abs_diff(&expected) < 1e-15);
        assert_eq!(linalg::rank(a, 1e-10).unwrap(), 3);
        let p = op.pinv_matrix().unwrap();
        let proj = p.matmul(a).unwrap();
        assert!(proj.matmul(&proj).unwrap().max_abs_diff(&proj) < 1e-10);
        assert_eq!(linalg::rank(&proj, 1e-10).unwrap(), 3);
    }

    #[test]
    fn radon_rejects_bad_angles() {
        assert!(LinearOperator::<f64>::radon_with_angles(4, 4, &[PI], None).is_err());
        assert!(LinearOperator::<f64>::radon_with_angles(4, 4, &[-0.1], None).is_err());
    }

    #[test]
    fn radon_of_constant_image_measures_chord_lengths() {
        let op = LinearOperator::<f64>::radon(8, 8, 4, Some(11)).unwrap();
        let y = op.apply(&Tensor::full(&[1, 8, 8], 1.0)).unwrap();
        // Central ray of the 0 and pi/2 views crosses all 8 pixels.
        assert!((y.data()[5] - 8.0).abs() < 1e-12);
        assert!((y.data()[2 * 11 + 5] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn parse_specs() {
        assert_eq!(LinearOperator::<f64>::parse("inpaint:p=0.5:seed=7", 8, 8).unwrap().spec(), "inpaint:p=0.5:seed=7");
        let f = LinearOperator::<f64>::parse("fourier:accel=4:center=8", 32, 32).unwrap();
        assert_eq!(f.m(), 2 * 8 * 32);
        assert!(LinearOperator::<f64>::parse("blur:gauss:sigma=1.5", 8, 8).is_ok());
        assert!(LinearOperator::<f64>::parse("radon:views=50:size=64", 64, 64).is_ok());
        let err = LinearOperator::<f64>::parse("warp:x=1", 8, 8).unwrap_err().to_string();
        assert!(err.contains("Accepted grammar"));
    }

    #[test]
    fn pinv_refuses_above_cap() {
        let op = LinearOperator::<f64>::identity(65, 65);
        let y = Tensor::zeros(&[65 * 65]);
        assert!(matches!(op.pseudo_inverse(&y), Err(Error::SizeCap { .. })));
        assert_eq!(op.least_squares(&y, 1e-8, 10).unwrap().len(), 65 * 65);
    }

    #[test]
    fn noise_examples() {
        let y = probe(50, 3);
        assert_eq!(NoiseModel::none().sample(&y, 0).unwrap(), y);
        assert_eq!(NoiseModel::gaussian(0.0, 1).sample(&y, 0).unwrap(), y);
        let model = NoiseModel::gaussian(0.5, 1);
        assert_eq!(model.sample(&y, 4).unwrap(), model.sample(&y, 4).unwrap());
        assert_ne!(model.sample(&y, 4).unwrap(), model.sample(&y, 5).unwrap());
        let p = NoiseModel::parse("poisson:10", 0).unwrap();
        assert!(p.sample(&Tensor::from_slice(&[-1.0]), 0).is_err());
    }

    #[test]
    fn gaussian_noise_std() {
        let z = Tensor::<f64>::zeros(&[100_000]);
        let s = NoiseModel::gaussian(1.0, 42).sample(&z, 0).unwrap();
        let mean = s.sum() / 1e5;
        let var = s.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 1e5;
        assert!((0.99..=1.01).contains(&var.sqrt()), "{}", var.sqrt());
    }

    #[test]
    fn equivariance_detection() {
        let shifts = ImageAction::shifts(1, 4, 1, 4).unwrap();
        let blur = LinearOperator::parse("blur:kernel=0.5,0.5", 1, 4).unwrap();
        let rep = detect_equivariance(&blur, &shifts, 1e-8).unwrap();
        assert!(rep.equivariant && rep.max_residual() < 1e-10);

        let inpaint = LinearOperator::inpainting(1, 4, &[true, true, false, false]).unwrap();
        let rep = detect_equivariance(&inpaint, &shifts, 1e-8).unwrap();
        assert!(!rep.equivariant);
        // A T_g keeps rows e_{p-s}: for shift by 1 the kept rows {3,0} share row 0
        // with A, so half of the Frobenius mass is unexplained: sqrt(1/2).
        let expected = [0.0, 0.5f64.sqrt(), 1.0, 0.5f64.sqrt()];
        for (r, e) in rep.residuals.iter().zip(expected) {
            assert!((r - e).abs() < 1e-12, "{:?}", rep.residuals);
        }

        let trivial = ImageAction::trivial(1, 4);
        let rep = detect_equivariance(&inpaint, &trivial, 1e-8).unwrap();
        assert!(rep.equivariant && rep.residuals == vec![0.0]);
    }
}
