//! Dense row-major tensors and the convolution kernels used by the graph.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array stored in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Boundary handling for same-size 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    /// Periodic extension; commutes exactly with cyclic shifts.
    #[default]
    Circular,
    Zero,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expects {len} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(values: &[T]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |k| if k / n == k % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let k = self.offset(index);
        self.data[k] = value;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "axpy",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// Largest absolute elementwise difference; `inf` if shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        if self.shape != other.shape {
            return T::infinity();
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sub-tensor along the leading axis.
    pub fn index_axis0(&self, i: usize) -> Result<Self> {
        let Some((&lead, rest)) = self.shape.split_first() else {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "cannot index a rank-0 tensor".into(),
            });
        };
        if i >= lead {
            return Err(Error::InvalidArgument(format!(
                "index {i} out of range for leading axis {lead}"
            )));
        }
        let block: usize = rest.iter().product();
        Self::new(rest.to_vec(), self.data[i * block..(i + 1) * block].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::InvalidArgument("stack of zero tensors".into()));
        };
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{op} expects a matrix"),
            }),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    /// Matrix-vector product for a 2-D `self`.
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        let (r, c) = self.dims2("matvec")?;
        if x.len() != c {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                left: self.shape.clone(),
                right: vec![x.len()],
            });
        }
        Ok((0..r).map(|i| dot(&self.data[i * c..(i + 1) * c], x)).collect())
    }

    pub fn frobenius(&self) -> T {
        self.norm()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Same-size 2-D convolution (kernel flipped): `out[o] = sum_c k[o, c] * u[c]`.
    ///
    /// `self` is `[C_in, H, W]`, `kernel` is `[C_out, C_in, kH, kW]` with odd sizes.
    pub fn conv2d(&self, kernel: &Self, pad: Padding) -> Result<Self> {
        conv2d_forward(self, kernel, pad, true)
    }

    /// Same as [`Tensor::conv2d`] without the kernel flip, i.e. what most deep
    /// learning libraries call "convolution".
    pub fn cross_correlate2d(&self, kernel: &Self, pad: Padding) -> Result<Self> {
        conv2d_forward(self, kernel, pad, false)
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Validated geometry of a conv2d call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

pub(crate) fn conv_dims<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<ConvDims> {
    let (c_in, h, w) = match input.shape()[..] {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                shape: input.shape().to_vec(),
                reason: "conv2d input must be [C, H, W]".into(),
            })
        }
    };
    let (c_out, kc, kh, kw) = match kernel.shape()[..] {
        [o, c, a, b] => (o, c, a, b),
        _ => {
            return Err(Error::InvalidShape {
                shape: kernel.shape().to_vec(),
                reason: "conv2d kernel must be [C_out, C_in, kH, kW]".into(),
            })
        }
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidShape {
            shape: kernel.shape().to_vec(),
            reason: "conv2d kernel sizes must be odd".into(),
        });
    }
    if kc != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    Ok(ConvDims {
        c_in,
        c_out,
        h,
        w,
        kh,
        kw,
    })
}

/// Shift applied to the input plane by kernel tap `(a, b)`.
#[inline]
pub(crate) fn tap_shift(a: usize, b: usize, kh: usize, kw: usize, flip: bool) -> (isize, isize) {
    let da = a as isize - (kh / 2) as isize;
    let db = b as isize - (kw / 2) as isize;
    if flip {
        (-da, -db)
    } else {
        (da, db)
    }
}

/// `out[i, j] += w * inp[i + di, j + dj]` over one `h x w` plane.
pub(crate) fn accumulate_shifted<T: Scalar>(
    out: &mut [T],
    inp: &[T],
    h: usize,
    wd: usize,
    di: isize,
    dj: isize,
    weight: T,
    pad: Padding,
) {
    if weight == T::zero() {
        return;
    }
    for i in 0..h {
        let si = i as isize + di;
        let src_row = match pad {
            Padding::Circular => si.rem_euclid(h as isize) as usize,
            Padding::Zero => {
                if si < 0 || si >= h as isize {
                    continue;
                }
                si as usize
            }
        };
        let orow = &mut out[i * wd..(i + 1) * wd];
        let irow = &inp[src_row * wd..(src_row + 1) * wd];
        match pad {
            Padding::Circular => {
                let s = dj.rem_euclid(wd as isize) as usize;
                // orow[j] += w * irow[(j + s) mod wd]
                let (head, tail) = orow.split_at_mut(wd - s);
                for (o, &x) in head.iter_mut().zip(&irow[s..]) {
                    *o += weight * x;
                }
                for (o, &x) in tail.iter_mut().zip(&irow[..s]) {
                    *o += weight * x;
                }
            }
            Padding::Zero => {
                let lo = (-dj).max(0) as usize;
                let hi = (wd as isize - dj).min(wd as isize).max(0) as usize;
                for j in lo..hi.max(lo) {
                    orow[j] += weight * irow[(j as isize + dj) as usize];
                }
            }
        }
    }
}

/// `sum_{i,j} a[i, j] * b[i + di, j + dj]` over one plane.
pub(crate) fn shifted_dot<T: Scalar>(
    a: &[T],
    b: &[T],
    h: usize,
    wd: usize,
    di: isize,
    dj: isize,
    pad: Padding,
) -> T {
    let mut acc = T::zero();
    for i in 0..h {
        let si = i as isize + di;
        let src_row = match pad {
            Padding::Circular => si.rem_euclid(h as isize) as usize,
            Padding::Zero => {
                if si < 0 || si >= h as isize {
                    continue;
                }
                si as usize
            }
        };
        let arow = &a[i * wd..(i + 1) * wd];
        let brow = &b[src_row * wd..(src_row + 1) * wd];
        match pad {
            Padding::Circular => {
                let s = dj.rem_euclid(wd as isize) as usize;
                acc += dot(&arow[..wd - s], &brow[s..]);
                acc += dot(&arow[wd - s..], &brow[..s]);
            }
            Padding::Zero => {
                let lo = (-dj).max(0) as usize;
                let hi = (wd as isize - dj).min(wd as isize).max(0) as usize;
                for j in lo..hi.max(lo) {
                    acc += arow[j] * brow[(j as isize + dj) as usize];
                }
            }
        }
    }
    acc
}

pub(crate) fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    pad: Padding,
    flip: bool,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernel)?;
    let plane = d.h * d.w;
    let mut out = vec![T::zero(); d.c_out * plane];
    let (u, k) = (input.data(), kernel.data());
    for o in 0..d.c_out {
        let oplane = &mut out[o * plane..(o + 1) * plane];
        for c in 0..d.c_in {
            let iplane = &u[c * plane..(c + 1) * plane];
            for a in 0..d.kh {
                for b in 0..d.kw {
                    let wgt = k[((o * d.c_in + c) * d.kh + a) * d.kw + b];
                    let (di, dj) = tap_shift(a, b, d.kh, d.kw, flip);
                    accumulate_shifted(oplane, iplane, d.h, d.w, di, dj, wgt, pad);
                }
            }
        }
    }
    Tensor::new(vec![d.c_out, d.h, d.w], out)
}

/// Gradients of a conv2d w.r.t. its input and kernel.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &[T],
    pad: Padding,
    flip: bool,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let d = conv_dims(input, kernel).expect("validated in forward");
    let plane = d.h * d.w;
    let (u, k) = (input.data(), kernel.data());
    let mut gin = need_input.then(|| vec![T::zero(); u.len()]);
    let mut gk = need_kernel.then(|| vec![T::zero(); k.len()]);
    for o in 0..d.c_out {
        let gplane = &grad_out[o * plane..(o + 1) * plane];
        for c in 0..d.c_in {
            let iplane = &u[c * plane..(c + 1) * plane];
            for a in 0..d.kh {
                for b in 0..d.kw {
                    let idx = ((o * d.c_in + c) * d.kh + a) * d.kw + b;
                    let (di, dj) = tap_shift(a, b, d.kh, d.kw, flip);
                    if let Some(g) = gin.as_mut() {
                        accumulate_shifted(
                            &mut g[c * plane..(c + 1) * plane],
                            gplane,
                            d.h,
                            d.w,
                            -di,
                            -dj,
                            k[idx],
                            pad,
                        );
                    }
                    if let Some(g) = gk.as_mut() {
                        g[idx] += shifted_dot(gplane, iplane, d.h, d.w, di, dj, pad);
                    }
                }
            }
        }
    }
    (
        gin.map(|g| Tensor::new(input.shape().to_vec(), g).expect("shape")),
        gk.map(|g| Tensor::new(kernel.shape().to_vec(), g).expect("shape")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_conv(u: &Tensor, k: &Tensor, pad: Padding, flip: bool) -> Tensor {
        let (ci, h, w) = (u.shape()[0], u.shape()[1], u.shape()[2]);
        let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let mut out = Tensor::zeros(&[co, h, w]);
        for o in 0..co {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for a in 0..kh {
                            for b in 0..kw {
                                let (da, db) = (a as isize - (kh / 2) as isize, b as isize - (kw / 2) as isize);
                                let (si, sj) = if flip {
                                    (i as isize - da, j as isize - db)
                                } else {
                                    (i as isize + da, j as isize + db)
                                };
                                let v = match pad {
                                    Padding::Circular => u.get(&[
                                        c,
                                        si.rem_euclid(h as isize) as usize,
                                        sj.rem_euclid(w as isize) as usize,
                                    ]),
                                    Padding::Zero => {
                                        if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                            0.0
                                        } else {
                                            u.get(&[c, si as usize, sj as usize])
                                        }
                                    }
                                };
                                acc += k.get(&[o, c, a, b]) * v;
                            }
                        }
                    }
                    out.set(&[o, i, j], acc);
                }
            }
        }
        out
    }

    fn lcg(seed: u64) -> impl FnMut(usize) -> f64 {
        let mut s = seed;
        move |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn add_is_componentwise() {
        let a = Tensor::from_slice(&[1.0, 2.0]);
        let b = Tensor::from_slice(&[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mismatched_add_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2]);
        let b = Tensor::<f64>::zeros(&[3]);
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn identity_kernel_leaves_image_unchanged() {
        let u = Tensor::from_fn(&[1, 5, 4], lcg(1));
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(u.conv2d(&k, Padding::Circular).unwrap(), u);
        assert_eq!(u.conv2d(&k, Padding::Zero).unwrap(), u);
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let u = Tensor::full(&[1, 6, 6], 2.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = u.conv2d(&k, Padding::Circular).unwrap();
        assert!(out.data().iter().all(|&x| x == 18.0));
    }

    #[test]
    fn conv_matches_brute_force_summation() {
        for pad in [Padding::Circular, Padding::Zero] {
            let u = Tensor::from_fn(&[1, 4, 4], lcg(2));
            let k = Tensor::from_fn(&[1, 1, 3, 3], lcg(3));
            let fast = u.conv2d(&k, pad).unwrap();
            assert!(fast.max_abs_diff(&brute_conv(&u, &k, pad, true)) < 1e-12);
            let u = Tensor::from_fn(&[3, 5, 7], lcg(4));
            let k = Tensor::from_fn(&[2, 3, 5, 3], lcg(5));
            assert!(u.conv2d(&k, pad).unwrap().max_abs_diff(&brute_conv(&u, &k, pad, true)) < 1e-12);
            let xc = u.cross_correlate2d(&k, pad).unwrap();
            assert!(xc.max_abs_diff(&brute_conv(&u, &k, pad, false)) < 1e-12);
        }
    }

    #[test]
    fn even_kernel_and_channel_mismatch_are_rejected() {
        let u = Tensor::<f64>::zeros(&[1, 4, 4]);
        assert!(u.conv2d(&Tensor::zeros(&[1, 1, 2, 3]), Padding::Zero).is_err());
        assert!(u.conv2d(&Tensor::zeros(&[1, 2, 3, 3]), Padding::Zero).is_err());
    }

    #[test]
    fn circular_conv_commutes_with_cyclic_shift() {
        let (h, w) = (6, 5);
        let u = Tensor::from_fn(&[2, h, w], lcg(6));
        let k = Tensor::from_fn(&[3, 2, 3, 3], lcg(7));
        let shift = |t: &Tensor, si: usize, sj: usize| {
            let c = t.shape()[0];
            let mut out = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out.set(&[ch, (i + si) % h, (j + sj) % w], t.get(&[ch, i, j]));
                    }
                }
            }
            out
        };
        for (si, sj) in [(1, 0), (0, 3), (4, 2)] {
            let lhs = shift(&u, si, sj).conv2d(&k, Padding::Circular).unwrap();
            let rhs = shift(&u.conv2d(&k, Padding::Circular).unwrap(), si, sj);
            assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }

    #[test]
    fn matmul_and_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = a.transpose().unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[14.0, 32.0, 32.0, 77.0]);
        assert!(a.matmul(&a).is_err());
    }
}
