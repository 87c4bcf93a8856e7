//! Equivariant layers: lifting and group convolutions over a point group,
//! group pooling, steerable kernel bases and norm nonlinearities.
//!
//! Lifted features are stored as `[C, |P|, H, W]`, where `P` is the point
//! group (rotations and flips) of the acting group. Translations are handled
//! by the convolution itself, so a layer built for `c4` is also equivariant
//! to `c4+shifts` with circular padding.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::autodiff::{GatherMap, LinearMap, Var};
use crate::error::{Error, Result};
use crate::groups::{FiniteGroup, ImageAction, Representation};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::{Padding, Tensor};

/// The distinct linear parts of an exact image action, closed under products.
#[derive(Clone, Debug)]
pub struct PointGroup {
    linears: Vec<[i64; 4]>,
    group: FiniteGroup,
}

fn mat_mul(a: &[i64; 4], b: &[i64; 4]) -> [i64; 4] {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

impl PointGroup {
    /// Extracts the point group of `action`. Interpolated actions are rejected.
    pub fn from_action(action: &ImageAction) -> Result<Self> {
        if !action.is_exact() {
            return Err(Error::InvalidArgument(format!(
                "{}: lifting and group convolution need a grid-aligned group",
                action.spec()
            )));
        }
        let mut linears: Vec<[i64; 4]> = vec![[1, 0, 0, 1]];
        let mut names = vec!["e".to_string()];
        for g in action.elements() {
            let m = action.linear_part(g)?.map(|v| v.round() as i64);
            if !linears.contains(&m) {
                linears.push(m);
                let name = action.name(g)?;
                names.push(if name.contains(')') {
                    name.rsplit(')').next().unwrap_or(name).to_string()
                } else {
                    name.to_string()
                });
            }
        }
        let index: HashMap<[i64; 4], usize> = linears.iter().enumerate().map(|(i, m)| (*m, i)).collect();
        let mut table = Vec::with_capacity(linears.len() * linears.len());
        for a in &linears {
            for b in &linears {
                let ab = mat_mul(a, b);
                table.push(*index.get(&ab).ok_or_else(|| {
                    Error::GroupAxiom(format!("{}: point group not closed", action.spec()))
                })?);
            }
        }
        let group = FiniteGroup::from_table(names, table)?;
        Ok(Self { linears, group })
    }

    pub fn order(&self) -> usize {
        self.linears.len()
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    /// Point-group index of the linear part of `action` element `g`.
    pub fn point_of(&self, action: &ImageAction, g: usize) -> Result<usize> {
        let m = action.linear_part(g)?.map(|v| v.round() as i64);
        self.linears
            .iter()
            .position(|l| *l == m)
            .ok_or_else(|| Error::InvalidArgument(format!("element {g} of {} is not in the point group", action.spec())))
    }

    /// Index map of `K(x) = psi(L_r^{-1} x)` on a `k x k` kernel grid.
    fn rotated_taps(&self, r: usize, k: usize) -> Vec<usize> {
        let l = &self.linears[r];
        let c = (k / 2) as i64;
        let mut out = Vec::with_capacity(k * k);
        for a in 0..k as i64 {
            for b in 0..k as i64 {
                let (x, y) = (b - c, c - a);
                // L orthogonal: L^{-1} = L^T.
                let (xs, ys) = (l[0] * x + l[2] * y, l[1] * x + l[3] * y);
                out.push(((c - ys) * k as i64 + (c + xs)) as usize);
            }
        }
        out
    }
}

/// A signal on grid x point group, shape `[C, |P|, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedFeature<T: Scalar = f64> {
    data: Tensor<T>,
}

impl<T: Scalar> LiftedFeature<T> {
    pub fn new(data: Tensor<T>, group: &PointGroup) -> Result<Self> {
        match data.shape() {
            [_, p, _, _] if *p == group.order() => Ok(Self { data }),
            s => Err(Error::ShapeMismatch {
                op: "lifted feature",
                left: s.to_vec(),
                right: vec![0, group.order(), 0, 0],
            }),
        }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn order(&self) -> usize {
        self.data.shape()[1]
    }

    /// Same data as `[C * |P|, H, W]`.
    pub fn flat(&self) -> Tensor<T> {
        let s = self.data.shape();
        self.data.reshape(&[s[0] * s[1], s[2], s[3]]).expect("same length")
    }
}

fn kernel_size(shape: &[usize]) -> Result<usize> {
    let (kh, kw) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "group kernels must be square with odd size".into(),
        });
    }
    Ok(kh)
}

/// Gather from `psi [C_out, C_in, k, k]` into the lifting kernel `[C_out * |P|, C_in, k, k]`.
fn lift_index(pg: &PointGroup, c_out: usize, c_in: usize, k: usize) -> Vec<usize> {
    let p = pg.order();
    let kk = k * k;
    let mut idx = Vec::with_capacity(c_out * p * c_in * kk);
    for o in 0..c_out {
        for r in 0..p {
            let taps = pg.rotated_taps(r, k);
            for c in 0..c_in {
                idx.extend(taps.iter().map(|t| (o * c_in + c) * kk + t));
            }
        }
    }
    idx
}

/// Gather from `psi [C_out, C_in, |P|, k, k]` into `[C_out * |P|, C_in * |P|, k, k]`.
fn group_conv_index(pg: &PointGroup, c_out: usize, c_in: usize, k: usize) -> Result<Vec<usize>> {
    let p = pg.order();
    let kk = k * k;
    let grp = pg.group();
    let mut idx = Vec::with_capacity(c_out * p * c_in * p * kk);
    for o in 0..c_out {
        for r in 0..p {
            let taps = pg.rotated_taps(r, k);
            let r_inv = grp.inverse(r)?;
            for c in 0..c_in {
                for q in 0..p {
                    let src = grp.product(r_inv, q)?;
                    let base = ((o * c_in + c) * p + src) * kk;
                    idx.extend(taps.iter().map(|t| base + t));
                }
            }
        }
    }
    Ok(idx)
}

fn gather<T: Scalar>(src: &Tensor<T>, idx: &[usize], shape: Vec<usize>) -> Result<Tensor<T>> {
    let d = src.data();
    Tensor::new(shape, idx.iter().map(|&i| d[i]).collect())
}

fn check_lift_kernel(psi: &[usize], c_in: usize) -> Result<(usize, usize)> {
    match psi {
        [co, ci, _, _] if *ci == c_in => Ok((*co, kernel_size(psi)?)),
        _ => Err(Error::ShapeMismatch {
            op: "lift",
            left: psi.to_vec(),
            right: vec![0, c_in, 0, 0],
        }),
    }
}

fn check_group_kernel(psi: &[usize], c_in: usize, p: usize) -> Result<(usize, usize)> {
    match psi {
        [co, ci, pp, _, _] if *ci == c_in && *pp == p => Ok((*co, kernel_size(psi)?)),
        _ => Err(Error::ShapeMismatch {
            op: "group_conv",
            left: psi.to_vec(),
            right: vec![0, c_in, p, 0, 0],
        }),
    }
}

/// Lifting convolution: slice `r` of the output is the true convolution of
/// `u [C_in, H, W]` with the kernel `psi [C_out, C_in, k, k]` transformed by `r`.
pub fn lift<T: Scalar>(u: &Tensor<T>, psi: &Tensor<T>, pg: &PointGroup, pad: Padding) -> Result<LiftedFeature<T>> {
    if u.ndim() != 3 {
        return Err(Error::InvalidShape {
            shape: u.shape().to_vec(),
            reason: "lift expects [C, H, W]".into(),
        });
    }
    let c_in = u.shape()[0];
    let (c_out, k) = check_lift_kernel(psi.shape(), c_in)?;
    let p = pg.order();
    let kernel = gather(psi, &lift_index(pg, c_out, c_in, k), vec![c_out * p, c_in, k, k])?;
    let out = u.conv2d(&kernel, pad)?;
    let (h, w) = (u.shape()[1], u.shape()[2]);
    LiftedFeature::new(out.into_reshape(&[c_out, p, h, w])?, pg)
}

/// Group convolution on lifted features with `psi [C_out, C_in, |P|, k, k]`.
pub fn group_conv<T: Scalar>(
    f: &LiftedFeature<T>,
    psi: &Tensor<T>,
    pg: &PointGroup,
    pad: Padding,
) -> Result<LiftedFeature<T>> {
    let p = pg.order();
    if f.order() != p {
        return Err(Error::InvalidArgument("lifted feature belongs to a different group".into()));
    }
    let c_in = f.channels();
    let (c_out, k) = check_group_kernel(psi.shape(), c_in, p)?;
    let kernel = gather(psi, &group_conv_index(pg, c_out, c_in, k)?, vec![c_out * p, c_in * p, k, k])?;
    let out = f.flat().conv2d(&kernel, pad)?;
    let s = f.tensor().shape();
    LiftedFeature::new(out.into_reshape(&[c_out, p, s[2], s[3]])?, pg)
}

/// `(g . f)[q] = T_g f[p(g)^{-1} q]`, with `p(g)` the point part of `g`.
pub fn regular_action<T: Scalar>(
    pg: &PointGroup,
    action: &ImageAction,
    g: usize,
    f: &LiftedFeature<T>,
) -> Result<LiftedFeature<T>> {
    let s = f.tensor().shape().to_vec();
    let (c, p, plane) = (s[0], s[1], s[2] * s[3]);
    let r = pg.point_of(action, g)?;
    let r_inv = pg.group().inverse(r)?;
    let src = f.tensor().data();
    let mut permuted = Vec::with_capacity(src.len());
    for ch in 0..c {
        for q in 0..p {
            let from = pg.group().product(r_inv, q)?;
            let base = (ch * p + from) * plane;
            permuted.extend_from_slice(&src[base..base + plane]);
        }
    }
    let moved = action.act(g, &Tensor::new(vec![c * p, s[2], s[3]], permuted)?)?;
    LiftedFeature::new(moved.into_reshape(&s)?, pg)
}

/// Pooling over the group axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Mean,
    Max,
}

/// Projects a lifted feature back to `[C, H, W]`.
pub fn project<T: Scalar>(f: &LiftedFeature<T>, mode: PoolMode) -> Tensor<T> {
    let s = f.tensor().shape();
    let (c, p, plane) = (s[0], s[1], s[2] * s[3]);
    let d = f.tensor().data();
    let mut out = vec![T::zero(); c * plane];
    for ch in 0..c {
        for i in 0..plane {
            let vals = (0..p).map(|q| d[(ch * p + q) * plane + i]);
            out[ch * plane + i] = match mode {
                PoolMode::Mean => vals.sum::<T>() / T::lit(p as f64),
                PoolMode::Max => vals.fold(T::neg_infinity(), T::max),
            };
        }
    }
    Tensor::new(vec![c, s[2], s[3]], out).expect("shape")
}

/// Mean over the group axis of a `[C * |P|, H, W]` graph value.
struct GroupMean {
    channels: usize,
    order: usize,
    h: usize,
    w: usize,
}

impl<T: Scalar> LinearMap<T> for GroupMean {
    fn in_shape(&self) -> Vec<usize> {
        vec![self.channels * self.order, self.h, self.w]
    }
    fn out_shape(&self) -> Vec<usize> {
        vec![self.channels, self.h, self.w]
    }
    fn apply(&self, x: &[T]) -> Vec<T> {
        let plane = self.h * self.w;
        let inv = T::one() / T::lit(self.order as f64);
        let mut out = vec![T::zero(); self.channels * plane];
        for c in 0..self.channels {
            for q in 0..self.order {
                let base = (c * self.order + q) * plane;
                for i in 0..plane {
                    out[c * plane + i] += x[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
    fn apply_adjoint(&self, y: &[T]) -> Vec<T> {
        let plane = self.h * self.w;
        let inv = T::one() / T::lit(self.order as f64);
        let mut out = Vec::with_capacity(self.channels * self.order * plane);
        for c in 0..self.channels {
            for _ in 0..self.order {
                out.extend(y[c * plane..(c + 1) * plane].iter().map(|&v| v * inv));
            }
        }
        out
    }
    fn name(&self) -> &'static str {
        "group_mean"
    }
}

/// Graph versions of the lifting/group layers. Lifted values are kept flat
/// as `[C * |P|, H, W]`.
pub mod graph {
    use super::*;

    pub fn lift<'g, T: Scalar>(u: &Var<'g, T>, psi: &Var<'g, T>, pg: &PointGroup, pad: Padding) -> Result<Var<'g, T>> {
        let us = u.shape();
        let ps = psi.shape();
        if us.len() != 3 {
            return Err(Error::InvalidShape {
                shape: us,
                reason: "lift expects [C, H, W]".into(),
            });
        }
        let (c_out, k) = check_lift_kernel(&ps, us[0])?;
        let p = pg.order();
        let map = GatherMap::new(lift_index(pg, c_out, us[0], k), ps, vec![c_out * p, us[0], k, k])?;
        u.conv2d(&psi.linear(Arc::new(map))?, pad)
    }

    pub fn group_conv<'g, T: Scalar>(
        f: &Var<'g, T>,
        psi: &Var<'g, T>,
        pg: &PointGroup,
        pad: Padding,
    ) -> Result<Var<'g, T>> {
        let fs = f.shape();
        let ps = psi.shape();
        let p = pg.order();
        if fs.len() != 3 || !fs[0].is_multiple_of(p) {
            return Err(Error::InvalidArgument("lifted feature belongs to a different group".into()));
        }
        let c_in = fs[0] / p;
        let (c_out, k) = check_group_kernel(&ps, c_in, p)?;
        let map = GatherMap::new(group_conv_index(pg, c_out, c_in, k)?, ps, vec![c_out * p, c_in * p, k, k])?;
        f.conv2d(&psi.linear(Arc::new(map))?, pad)
    }

    pub fn project_mean<'g, T: Scalar>(f: &Var<'g, T>, pg: &PointGroup) -> Result<Var<'g, T>> {
        let s = f.shape();
        let p = pg.order();
        if s.len() != 3 || !s[0].is_multiple_of(p) {
            return Err(Error::InvalidArgument("lifted feature belongs to a different group".into()));
        }
        f.linear(Arc::new(GroupMean {
            channels: s[0] / p,
            order: p,
            h: s[1],
            w: s[2],
        }))
    }

    /// Steerable convolution with kernel `sum_b weights[o, c, b] * basis_b`.
    pub fn steerable_conv<'g, T: Scalar>(
        u: &Var<'g, T>,
        weights: &Var<'g, T>,
        basis: &SteerableBasis,
        pad: Padding,
    ) -> Result<Var<'g, T>> {
        let ws = weights.shape();
        let (c_out, c_in) = basis.check_weights(&ws)?;
        let kernel = weights.linear(Arc::new(basis.expansion::<T>(c_out, c_in)))?;
        u.conv2d(&kernel, pad)
    }
}

/// Orthonormal basis of kernels `k [d_out, d_in, s, s]` satisfying
/// `k(H x) pi_in(H) = pi_out(H) k(x)` on the kernel grid for every element.
#[derive(Clone, Debug)]
pub struct SteerableBasis {
    pub group: String,
    pub degree_in: usize,
    pub degree_out: usize,
    pub size: usize,
    pub basis: Vec<Tensor<f64>>,
    /// Largest constraint residual over the group, per basis element.
    pub residuals: Vec<f64>,
}

/// Relative singular value threshold separating the kernel space.
pub const STEERABLE_RTOL: f64 = 1e-8;

/// Bilinear read weights of `k` at planar point `(x, y)` on an `s x s` grid
/// centered at the origin, zero outside.
fn kernel_interp(x: f64, y: f64, s: usize) -> Vec<(usize, f64)> {
    let c = (s / 2) as f64;
    let (fa, fb) = (c - y, c + x);
    let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
    let (fa, fb) = (snap(fa), snap(fb));
    let (a0, b0) = (fa.floor(), fb.floor());
    let (ta, tb) = (fa - a0, fb - b0);
    let mut out = Vec::with_capacity(4);
    for (da, wa) in [(0.0, 1.0 - ta), (1.0, ta)] {
        for (db, wb) in [(0.0, 1.0 - tb), (1.0, tb)] {
            let wgt = wa * wb;
            let (a, b) = (a0 + da, b0 + db);
            if wgt == 0.0 || a < 0.0 || b < 0.0 || a > (s - 1) as f64 || b > (s - 1) as f64 {
                continue;
            }
            out.push((a as usize * s + b as usize, wgt));
        }
    }
    out
}

/// Constraint rows for element `g`: one row per `(grid point, o, i)`.
fn constraint_block(
    lin: &[f64; 4],
    pi_in: &[f64],
    pi_out: &[f64],
    d_in: usize,
    d_out: usize,
    s: usize,
) -> Vec<Vec<f64>> {
    let ss = s * s;
    let nvar = d_out * d_in * ss;
    let var = |o: usize, i: usize, p: usize| (o * d_in + i) * ss + p;
    let c = (s / 2) as f64;
    let mut rows = Vec::with_capacity(ss * d_out * d_in);
    for a in 0..s {
        for b in 0..s {
            let (x, y) = (b as f64 - c, c - a as f64);
            let (hx, hy) = (lin[0] * x + lin[1] * y, lin[2] * x + lin[3] * y);
            let interp = kernel_interp(hx, hy, s);
            let p = a * s + b;
            for o in 0..d_out {
                for i in 0..d_in {
                    let mut row = vec![0.0; nvar];
                    // sum_j k_{o j}(Hx) pi_in[j i]
                    for j in 0..d_in {
                        let coef = pi_in[j * d_in + i];
                        if coef != 0.0 {
                            for &(q, wq) in &interp {
                                row[var(o, j, q)] += coef * wq;
                            }
                        }
                    }
                    // - sum_j pi_out[o j] k_{j i}(x)
                    for j in 0..d_out {
                        row[var(j, i, p)] -= pi_out[o * d_out + j];
                    }
                    rows.push(row);
                }
            }
        }
    }
    rows
}

/// Solves the steerable kernel constraint on an `size x size` grid.
///
/// The constraint is imposed at every grid point for every element of
/// `action`; values of `k` off the grid are read by bilinear interpolation
/// with zero outside. An empty basis is a valid result.
pub fn solve_steerable_basis(
    action: &ImageAction,
    rep_in: &Representation,
    rep_out: &Representation,
    size: usize,
) -> Result<SteerableBasis> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::InvalidArgument("steerable kernel size must be odd".into()));
    }
    let (d_in, d_out) = (rep_in.degree(), rep_out.degree());
    let nvar = d_out * d_in * size * size;
    let mut blocks = Vec::with_capacity(action.order());
    let mut all_rows = Vec::new();
    for g in action.elements() {
        let block = constraint_block(
            &action.linear_part(g)?,
            rep_in.matrix(g)?,
            rep_out.matrix(g)?,
            d_in,
            d_out,
            size,
        );
        all_rows.extend(block.iter().cloned());
        blocks.push(block);
    }
    let m = Tensor::new(vec![all_rows.len(), nvar], all_rows.concat())?;
    let null = linalg::nullspace(&m, STEERABLE_RTOL)?;
    let dim = null.len();
    // Canonical orthonormal basis: project the standard basis onto the
    // nullspace and orthonormalize in order.
    let projected: Vec<Vec<f64>> = (0..nvar)
        .map(|j| {
            let mut v = vec![0.0; nvar];
            for n in &null {
                let c = n[j];
                v.iter_mut().zip(n).for_each(|(a, b)| *a += c * b);
            }
            v
        })
        .collect();
    let mut vecs = linalg::gram_schmidt(&projected, 1e-6);
    if vecs.len() != dim {
        vecs = null;
    }
    let residuals = vecs
        .iter()
        .map(|v| {
            blocks
                .iter()
                .map(|rows| rows.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum::<f64>().powi(2)).sum::<f64>().sqrt())
                .fold(0.0, f64::max)
        })
        .collect();
    let basis = vecs
        .into_iter()
        .map(|v| Tensor::new(vec![d_out, d_in, size, size], v))
        .collect::<Result<Vec<_>>>()?;
    Ok(SteerableBasis {
        group: action.spec().to_string(),
        degree_in: d_in,
        degree_out: d_out,
        size,
        basis,
        residuals,
    })
}

/// Linear map from steerable weights `[C_out, C_in, B]` to a conv kernel
/// `[C_out * d_out, C_in * d_in, s, s]`.
struct BasisExpansion<T: Scalar> {
    c_out: usize,
    c_in: usize,
    d_out: usize,
    d_in: usize,
    s: usize,
    basis: Vec<Vec<T>>,
}

impl<T: Scalar> BasisExpansion<T> {
    /// Offset in the kernel of entry `(o, c, a, i, p)`.
    fn kernel_index(&self, o: usize, c: usize, a: usize, i: usize, p: usize) -> usize {
        let ss = self.s * self.s;
        ((o * self.d_out + a) * (self.c_in * self.d_in) + c * self.d_in + i) * ss + p
    }
}

impl<T: Scalar> LinearMap<T> for BasisExpansion<T> {
    fn in_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.c_in, self.basis.len()]
    }
    fn out_shape(&self) -> Vec<usize> {
        vec![self.c_out * self.d_out, self.c_in * self.d_in, self.s, self.s]
    }
    fn apply(&self, x: &[T]) -> Vec<T> {
        let ss = self.s * self.s;
        let nb = self.basis.len();
        let mut out = vec![T::zero(); self.c_out * self.d_out * self.c_in * self.d_in * ss];
        for o in 0..self.c_out {
            for c in 0..self.c_in {
                for (b, bv) in self.basis.iter().enumerate() {
                    let w = x[(o * self.c_in + c) * nb + b];
                    for a in 0..self.d_out {
                        for i in 0..self.d_in {
                            let src = &bv[(a * self.d_in + i) * ss..(a * self.d_in + i + 1) * ss];
                            let dst = self.kernel_index(o, c, a, i, 0);
                            for p in 0..ss {
                                out[dst + p] += w * src[p];
                            }
                        }
                    }
                }
            }
        }
        out
    }
    fn apply_adjoint(&self, y: &[T]) -> Vec<T> {
        let ss = self.s * self.s;
        let nb = self.basis.len();
        let mut out = vec![T::zero(); self.c_out * self.c_in * nb];
        for o in 0..self.c_out {
            for c in 0..self.c_in {
                for (b, bv) in self.basis.iter().enumerate() {
                    let mut acc = T::zero();
                    for a in 0..self.d_out {
                        for i in 0..self.d_in {
                            let src = &bv[(a * self.d_in + i) * ss..(a * self.d_in + i + 1) * ss];
                            let dst = self.kernel_index(o, c, a, i, 0);
                            for p in 0..ss {
                                acc += y[dst + p] * src[p];
                            }
                        }
                    }
                    out[(o * self.c_in + c) * nb + b] = acc;
                }
            }
        }
        out
    }
    fn name(&self) -> &'static str {
        "steerable_basis"
    }
}

impl SteerableBasis {
    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }

    /// All basis elements as one `[B, d_out, d_in, s, s]` tensor.
    pub fn stacked(&self) -> Tensor<f64> {
        let mut shape = vec![self.len(), self.degree_out, self.degree_in, self.size, self.size];
        if self.is_empty() {
            shape[0] = 0;
            return Tensor::new(shape, Vec::new()).expect("empty");
        }
        Tensor::stack(&self.basis).expect("equal shapes").into_reshape(&shape).expect("same length")
    }

    fn check_weights(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match shape {
            [co, ci, b] if *b == self.len() => Ok((*co, *ci)),
            _ => Err(Error::ShapeMismatch {
                op: "steerable_conv",
                left: shape.to_vec(),
                right: vec![0, 0, self.len()],
            }),
        }
    }

    fn expansion<T: Scalar>(&self, c_out: usize, c_in: usize) -> BasisExpansion<T> {
        BasisExpansion {
            c_out,
            c_in,
            d_out: self.degree_out,
            d_in: self.degree_in,
            s: self.size,
            basis: self.basis.iter().map(|b| b.cast::<T>().into_data()).collect(),
        }
    }

    /// Kernel `[C_out * d_out, C_in * d_in, s, s]` for weights `[C_out, C_in, B]`.
    pub fn kernel<T: Scalar>(&self, weights: &Tensor<T>) -> Result<Tensor<T>> {
        let (c_out, c_in) = self.check_weights(weights.shape())?;
        let e = self.expansion::<T>(c_out, c_in);
        Tensor::new(LinearMap::<T>::out_shape(&e), e.apply(weights.data()))
    }
}

/// Steerable convolution of a field of `C_in` copies of `rep_in` (shape
/// `[C_in * d_in, H, W]`) into `C_out` copies of `rep_out`.
pub fn steerable_conv<T: Scalar>(
    u: &Tensor<T>,
    weights: &Tensor<T>,
    basis: &SteerableBasis,
    pad: Padding,
) -> Result<Tensor<T>> {
    u.conv2d(&basis.kernel(weights)?, pad)
}

/// `f(u)(x) = phi(|u(x)|) u(x)` applied to each `degree`-vector of a field
/// of shape `[C * degree, H, W]`; zero vectors map to zero.
pub fn norm_nonlinearity<T: Scalar>(u: &Tensor<T>, rep: &Representation, phi: impl Fn(T) -> T) -> Result<Tensor<T>> {
    if !rep.is_unitary() {
        return Err(Error::InvalidArgument("norm nonlinearity needs a unitary representation".into()));
    }
    let d = rep.degree();
    if u.ndim() != 3 || !u.shape()[0].is_multiple_of(d) {
        return Err(Error::ShapeMismatch {
            op: "norm_nonlinearity",
            left: u.shape().to_vec(),
            right: vec![d],
        });
    }
    let plane = u.shape()[1] * u.shape()[2];
    let copies = u.shape()[0] / d;
    let mut out = u.clone();
    let data = out.data_mut();
    for c in 0..copies {
        for p in 0..plane {
            let at = |i: usize| (c * d + i) * plane + p;
            let r = (0..d).map(|i| data[at(i)] * data[at(i)]).sum::<T>().sqrt();
            let f = if r == T::zero() { T::zero() } else { phi(r) };
            for i in 0..d {
                data[at(i)] *= f;
            }
        }
    }
    Ok(out)
}

/// Config-level layer description.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Lift { group: String, channels: usize, kernel: usize },
    GroupConv { group: String, channels: usize, kernel: usize },
    Steerable {
        group: String,
        rep_in: String,
        rep_out: String,
        channels: usize,
        kernel: usize,
    },
    Project { mode: PoolMode },
}

pub const LAYER_GRAMMAR: &str = "lift:<group>:channels=<c>:k=<k> | gconv:<group>:channels=<c>:k=<k> | steerable:<group>:in=<trivial|vector>:out=<trivial|vector>:channels=<c>:k=<k> | project:<mean|max>   (rot<k> stands for rot:<k>)";

impl LayerSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Spec {
            spec: spec.to_string(),
            reason: reason.to_string(),
            grammar: LAYER_GRAMMAR,
        };
        let parts: Vec<&str> = spec.trim().split(':').collect();
        let kv: HashMap<&str, &str> = parts.iter().skip(2).filter_map(|p| p.split_once('=')).collect();
        if parts.len() > 2 && kv.len() != parts.len() - 2 {
            return Err(bad("expected key=value options"));
        }
        let int = |key: &str, default: usize| -> Result<usize> {
            kv.get(key).map_or(Ok(default), |v| v.parse().map_err(|_| bad(&format!("`{key}` must be an integer"))))
        };
        let group = || -> Result<String> {
            let g = parts.get(1).ok_or_else(|| bad("missing group"))?;
            Ok(match g.strip_prefix("rot") {
                Some(k) if !k.starts_with(':') => format!("rot:{k}"),
                _ => g.to_string(),
            })
        };
        let rep = |key: &str| -> Result<String> {
            let r = kv.get(key).copied().unwrap_or("trivial");
            if r == "trivial" || r == "vector" {
                Ok(r.to_string())
            } else {
                Err(bad("representation must be trivial or vector"))
            }
        };
        match parts[0] {
            "lift" => Ok(Self::Lift {
                group: group()?,
                channels: int("channels", 8)?,
                kernel: int("k", 3)?,
            }),
            "gconv" => Ok(Self::GroupConv {
                group: group()?,
                channels: int("channels", 8)?,
                kernel: int("k", 3)?,
            }),
            "steerable" => Ok(Self::Steerable {
                group: group()?,
                rep_in: rep("in")?,
                rep_out: rep("out")?,
                channels: int("channels", 4)?,
                kernel: int("k", 5)?,
            }),
            "project" => match parts.get(1).copied() {
                Some("mean") | None => Ok(Self::Project { mode: PoolMode::Mean }),
                Some("max") => Ok(Self::Project { mode: PoolMode::Max }),
                _ => Err(bad("pooling must be mean or max")),
            },
            _ => Err(bad("unknown layer")),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = |s: &str| s.replace("rot:", "rot");
        match self {
            Self::Lift { group, channels, kernel } => write!(f, "lift:{}:channels={channels}:k={kernel}", g(group)),
            Self::GroupConv { group, channels, kernel } => write!(f, "gconv:{}:channels={channels}:k={kernel}", g(group)),
            Self::Steerable {
                group,
                rep_in,
                rep_out,
                channels,
                kernel,
            } => write!(f, "steerable:{}:in={rep_in}:out={rep_out}:channels={channels}:k={kernel}", g(group)),
            Self::Project { mode: PoolMode::Mean } => write!(f, "project:mean"),
            Self::Project { mode: PoolMode::Max } => write!(f, "project:max"),
        }
    }
}

/// Representation named in a layer spec.
pub fn named_representation(name: &str, action: &ImageAction) -> Result<Representation> {
    match name {
        "trivial" => Ok(Representation::trivial(action)),
        "vector" => Representation::vector(action),
        _ => Err(Error::InvalidArgument(format!("unknown representation `{name}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        rng::uniform(&mut rng::stream(seed, 7), shape, -1.0, 1.0)
    }

    #[test]
    fn point_group_of_shifted_action() {
        let a = ImageAction::parse("c4+shifts2d:2x2", 4, 4).unwrap();
        let pg = PointGroup::from_action(&a).unwrap();
        assert_eq!(pg.order(), 4);
        let rot = ImageAction::parse("rot:8", 8, 8).unwrap();
        assert!(PointGroup::from_action(&rot).is_err());
    }

    #[test]
    fn trivial_group_lift_is_conv() {
        let a = ImageAction::trivial(6, 6);
        let pg = PointGroup::from_action(&a).unwrap();
        let u = rand(&[2, 6, 6], 1);
        let psi = rand(&[3, 2, 3, 3], 2);
        let lifted = lift(&u, &psi, &pg, Padding::Circular).unwrap();
        let direct = u.conv2d(&psi, Padding::Circular).unwrap();
        assert_eq!(lifted.flat(), direct);
        let psi2 = rand(&[2, 3, 1, 3, 3], 3);
        let gc = group_conv(&lifted, &psi2, &pg, Padding::Circular).unwrap();
        let direct2 = direct.conv2d(&psi2.reshape(&[2, 3, 3, 3]).unwrap(), Padding::Circular).unwrap();
        assert!(gc.flat().max_abs_diff(&direct2) < 1e-14);
    }

    #[test]
    fn symmetric_kernel_gives_identical_slices() {
        let a = ImageAction::rotations(6, 6, 4).unwrap();
        let pg = PointGroup::from_action(&a).unwrap();
        let psi = Tensor::new(vec![1, 1, 3, 3], vec![0.1, 0.5, 0.1, 0.5, 2.0, 0.5, 0.1, 0.5, 0.1]).unwrap();
        let f = lift(&rand(&[1, 6, 6], 4), &psi, &pg, Padding::Circular).unwrap();
        let t = f.tensor();
        for r in 1..4 {
            assert_eq!(t.index_axis0(0).unwrap().index_axis0(r).unwrap(), t.index_axis0(0).unwrap().index_axis0(0).unwrap());
        }
    }

    #[test]
    fn delta_group_kernel_is_identity() {
        let a = ImageAction::rotations(6, 6, 4).unwrap();
        let pg = PointGroup::from_action(&a).unwrap();
        let f = LiftedFeature::new(rand(&[1, 4, 6, 6], 5), &pg).unwrap();
        let mut psi = Tensor::zeros(&[1, 1, 4, 1, 1]);
        psi.data_mut()[0] = 1.0;
        assert_eq!(group_conv(&f, &psi, &pg, Padding::Circular).unwrap(), f);
    }

    #[test]
    fn lift_and_group_conv_are_equivariant() {
        for spec in ["c4", "d4", "c4+shifts2d:2x2"] {
            let a = ImageAction::parse(spec, 8, 8).unwrap();
            let pg = PointGroup::from_action(&a).unwrap();
            let u = rand(&[2, 8, 8], 6);
            let psi = rand(&[3, 2, 3, 3], 7);
            let psi2 = rand(&[2, 3, pg.order(), 3, 3], 8);
            let f = lift(&u, &psi, &pg, Padding::Circular).unwrap();
            let gf = group_conv(&f, &psi2, &pg, Padding::Circular).unwrap();
            for g in a.elements() {
                let lhs = lift(&a.act(g, &u).unwrap(), &psi, &pg, Padding::Circular).unwrap();
                let rhs = regular_action(&pg, &a, g, &f).unwrap();
                assert!(lhs.tensor().max_abs_diff(rhs.tensor()) < 1e-12, "{spec} lift g={g}");
                let lhs = group_conv(&rhs, &psi2, &pg, Padding::Circular).unwrap();
                let rhs = regular_action(&pg, &a, g, &gf).unwrap();
                assert!(lhs.tensor().max_abs_diff(rhs.tensor()) < 1e-12, "{spec} gconv g={g}");
                let lhs = project(&lhs, PoolMode::Max);
                let rhs = a.act(g, &project(&gf, PoolMode::Max)).unwrap();
                assert!(lhs.max_abs_diff(&rhs) < 1e-12);
            }
        }
    }

    #[test]
    fn project_examples() {
        let a = ImageAction::rotations(2, 2, 2).unwrap();
        let pg = PointGroup::from_action(&a).unwrap();
        let mut t = Tensor::zeros(&[1, 2, 2, 2]);
        for i in 0..4 {
            t.data_mut()[4 + i] = 2.0;
        }
        let f = LiftedFeature::new(t, &pg).unwrap();
        assert_eq!(project(&f, PoolMode::Mean).data(), &[1.0; 4]);
        assert_eq!(project(&f, PoolMode::Max).data(), &[2.0; 4]);
    }

    #[test]
    fn graph_layers_match_tensor_layers() {
        let a = ImageAction::dihedral(6, 6, 4).unwrap();
        let pg = PointGroup::from_action(&a).unwrap();
        let u = rand(&[1, 6, 6], 9);
        let psi = rand(&[2, 1, 3, 3], 10);
        let psi2 = rand(&[2, 2, 8, 3, 3], 11);
        let f = lift(&u, &psi, &pg, Padding::Circular).unwrap();
        let gf = group_conv(&f, &psi2, &pg, Padding::Circular).unwrap();
        let out = project(&gf, PoolMode::Mean);
        let g = Graph::new();
        let uv = g.constant(u);
        let p1 = g.param(psi);
        let p2 = g.param(psi2);
        let x = graph::lift(&uv, &p1, &pg, Padding::Circular).unwrap();
        let x = graph::group_conv(&x, &p2, &pg, Padding::Circular).unwrap();
        let x = graph::project_mean(&x, &pg).unwrap();
        assert!(x.value().max_abs_diff(&out) < 1e-13);
    }

    #[test]
    fn steerable_dimensions() {
        let triv = ImageAction::trivial(3, 3);
        let t = Representation::trivial(&triv);
        let b = solve_steerable_basis(&triv, &t, &t, 3).unwrap();
        assert_eq!(b.len(), 9);
        let c4 = ImageAction::rotations(8, 8, 4).unwrap();
        let t = Representation::trivial(&c4);
        let b = solve_steerable_basis(&c4, &t, &t, 3).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.max_residual() < 1e-12);
        let stacked = b.stacked();
        let gram = stacked.reshape(&[3, 9]).unwrap();
        let gram = gram.matmul(&gram.transpose().unwrap()).unwrap();
        assert!(gram.max_abs_diff(&Tensor::eye(3)) < 1e-12);
    }

    #[test]
    fn norm_nonlinearity_examples() {
        let c4 = ImageAction::rotations(4, 4, 4).unwrap();
        let v = Representation::vector(&c4).unwrap();
        let mut u = rand(&[2, 4, 4], 12);
        u.data_mut()[0] = 0.0;
        u.data_mut()[16] = 0.0;
        assert_eq!(norm_nonlinearity(&u, &v, |_| 1.0).unwrap(), u);
        let unit = norm_nonlinearity(&u, &v, |r| 1.0 / r).unwrap();
        for p in 1..16 {
            let n = (unit.data()[p].powi(2) + unit.data()[16 + p].powi(2)).sqrt();
            assert!((n - 1.0).abs() < 1e-14);
        }
        assert_eq!(unit.data()[0], 0.0);
    }

    #[test]
    fn layer_spec_round_trip() {
        for s in ["gconv:c4:channels=16:k=3", "steerable:rot8:in=trivial:out=vector:channels=4:k=5", "lift:d4:channels=8:k=3", "project:max"] {
            let parsed = LayerSpec::parse(s).unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        assert!(matches!(LayerSpec::parse("steerable:rot8").unwrap(), LayerSpec::Steerable { ref group, .. } if group == "rot:8"));
        assert!(LayerSpec::parse("dense:10").unwrap_err().to_string().contains("Accepted grammar"));
    }
}
