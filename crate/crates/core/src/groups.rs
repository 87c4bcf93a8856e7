//! Finite groups, their actions on images and representations on feature ranges.
//!
//! Geometric conventions: pixel `(row, col)` has planar coordinates
//! `x = col - cx`, `y = -(row - cy)` relative to the grid center `(cy, cx)`.
//! An element acts on the plane by `p -> H p + t` (rotation/reflection `H`
//! about the center, cyclic translation `t`) and on values by a positive
//! scale. Images transform as `T_g u (p) = s_g * u(g^{-1} p)`.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::autodiff::LinearMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest group order for which a product table is materialized.
pub const MAX_TABLE_ORDER: usize = 1024;
/// Largest group order for which associativity is checked exhaustively.
pub const MAX_CHECKED_ORDER: usize = 64;

/// A finite group given by its Cayley table.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteGroup {
    names: Vec<String>,
    table: Vec<u32>,
    identity: usize,
    inverse: Vec<usize>,
}

impl FiniteGroup {
    /// Builds a group from `table[g * n + h] = g * h`, validating the axioms
    /// (associativity exhaustively when `n <= 64`).
    pub fn from_table(names: Vec<String>, table: Vec<usize>) -> Result<Self> {
        let n = names.len();
        if n == 0 || table.len() != n * n {
            return Err(Error::GroupAxiom(format!(
                "table of length {} does not match {} elements",
                table.len(),
                n
            )));
        }
        if n > MAX_TABLE_ORDER {
            return Err(Error::GroupAxiom(format!(
                "order {n} exceeds the table limit {MAX_TABLE_ORDER}"
            )));
        }
        if let Some(&bad) = table.iter().find(|&&x| x >= n) {
            return Err(Error::GroupAxiom(format!("product {bad} is not an element (closure)")));
        }
        let mul = |a: usize, b: usize| table[a * n + b];
        let identity = (0..n)
            .find(|&e| (0..n).all(|g| mul(e, g) == g && mul(g, e) == g))
            .ok_or_else(|| Error::GroupAxiom("no identity element".into()))?;
        let mut inverse = vec![0; n];
        for g in 0..n {
            inverse[g] = (0..n)
                .find(|&h| mul(g, h) == identity && mul(h, g) == identity)
                .ok_or_else(|| Error::GroupAxiom(format!("element {} has no inverse", names[g])))?;
        }
        if n <= MAX_CHECKED_ORDER {
            for a in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        if mul(a, mul(b, c)) != mul(mul(a, b), c) {
                            return Err(Error::GroupAxiom(format!(
                                "associativity fails for ({}, {}, {})",
                                names[a], names[b], names[c]
                            )));
                        }
                    }
                }
            }
        }
        Ok(Self {
            names,
            table: table.into_iter().map(|x| x as u32).collect(),
            identity,
            inverse,
        })
    }

    pub fn trivial() -> Self {
        Self::cyclic(1)
    }

    pub fn cyclic(k: usize) -> Self {
        let names = (0..k).map(|j| format!("r{j}")).collect();
        let table = (0..k * k).map(|x| (x / k + x % k) % k).collect();
        Self::from_table(names, table).expect("cyclic group")
    }

    pub fn order(&self) -> usize {
        self.names.len()
    }

    pub fn identity(&self) -> usize {
        self.identity
    }

    fn check(&self, g: usize) -> Result<()> {
        if g < self.order() {
            Ok(())
        } else {
            Err(Error::UnknownElement(g))
        }
    }

    pub fn product(&self, g: usize, h: usize) -> Result<usize> {
        self.check(g)?;
        self.check(h)?;
        Ok(self.table[g * self.order() + h] as usize)
    }

    pub fn inverse(&self, g: usize) -> Result<usize> {
        self.check(g)?;
        Ok(self.inverse[g])
    }

    pub fn name(&self, g: usize) -> Result<&str> {
        self.check(g)?;
        Ok(&self.names[g])
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn elements(&self) -> std::ops::Range<usize> {
        0..self.order()
    }
}

/// What kind of transformation an [`ImageAction`] applies.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionKind {
    Trivial,
    /// Cyclic translations on a `steps.0 x steps.1` sublattice of the grid.
    CyclicShift2d { steps: (usize, usize) },
    /// Rotations by multiples of `2 pi / k` about the grid center.
    Rotation { k: usize },
    /// Rotations by multiples of `2 pi / k` and the `k` reflections.
    Dihedral { k: usize },
    /// Multiplication of the values by positive factors.
    RangeScaling { factors: Vec<f64> },
    /// Point group (rotations/reflections) combined with cyclic shifts.
    PointShift { point: Box<ActionKind>, steps: (usize, usize) },
}

/// How non grid-aligned transformations are resampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    ExactPermutation,
    BilinearZeroFill,
}

/// Pixels over which two images are compared.
///
/// Interpolated actions zero fill near the border, so their comparisons can
/// be restricted to an interior window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CompareRegion {
    #[default]
    Full,
    /// All pixels at least `margin` away from every edge.
    Interior { margin: usize },
}

pub const REGION_GRAMMAR: &str = "full | interior | interior:<margin>";

impl CompareRegion {
    /// Parses a region; bare `interior` takes the margin from `action`.
    pub fn parse(spec: &str, action: &ImageAction) -> Result<Self> {
        let err = |reason: &str| Error::Spec {
            spec: spec.to_string(),
            reason: reason.into(),
            grammar: REGION_GRAMMAR,
        };
        match spec.split_once(':') {
            None if spec == "full" => Ok(Self::Full),
            None if spec == "interior" => Ok(Self::Interior {
                margin: action.interior_margin(),
            }),
            Some(("interior", m)) => m
                .parse()
                .map(|margin| Self::Interior { margin })
                .map_err(|_| err("margin must be a nonnegative integer")),
            _ => Err(err("unknown region")),
        }
    }

    pub fn spec(&self) -> String {
        match self {
            Self::Full => "full".into(),
            Self::Interior { margin } => format!("interior:{margin}"),
        }
    }

    /// 0/1 weights of shape `[c, h, w]`.
    pub fn mask<T: Scalar>(&self, c: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        let m = match *self {
            Self::Full => 0,
            Self::Interior { margin } => margin,
        };
        if 2 * m >= h.min(w) {
            return Err(Error::InvalidArgument(format!("margin {m} leaves no pixels of a {h}x{w} image")));
        }
        Ok(Tensor::from_fn(&[c, h, w], |i| {
            let (r, col) = ((i / w) % h, i % w);
            let inside = r >= m && r < h - m && col >= m && col < w - m;
            if inside {
                T::one()
            } else {
                T::zero()
            }
        }))
    }

    fn masked_diffs<T: Scalar>(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
        if a.shape() != b.shape() || a.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "compare",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let s = a.shape();
        let mask = self.mask::<T>(s[0], s[1], s[2])?;
        Ok(a.data()
            .iter()
            .zip(b.data())
            .zip(mask.data())
            .filter(|(_, m)| **m != T::zero())
            .map(|((x, y), _)| (*x - *y).as_f64())
            .collect())
    }

    /// Largest absolute difference of two `[C, H, W]` images on the region.
    pub fn max_abs_diff<T: Scalar>(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
        Ok(self.masked_diffs(a, b)?.iter().fold(0.0, |m, d| m.max(d.abs())))
    }

    /// Mean squared difference of two `[C, H, W]` images on the region.
    pub fn mse<T: Scalar>(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
        let d = self.masked_diffs(a, b)?;
        Ok(d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Geometry {
    /// Row-major 2x2 matrix acting on planar `(x, y)`.
    linear: [f64; 4],
    /// Translation in pixels, `(rows, cols)`, reduced modulo the grid.
    shift: (usize, usize),
    scale: f64,
    name: String,
}

impl Geometry {
    fn identity() -> Self {
        Self {
            linear: [1.0, 0.0, 0.0, 1.0],
            shift: (0, 0),
            scale: 1.0,
            name: "e".into(),
        }
    }

    fn rotation(angle: f64, name: String) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            linear: [snap(c), snap(-s), snap(s), snap(c)],
            shift: (0, 0),
            scale: 1.0,
            name,
        }
    }

    /// Reflection across the line through the origin at `angle / 2`.
    fn reflection(angle: f64, name: String) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            linear: [snap(c), snap(s), snap(s), snap(-c)],
            shift: (0, 0),
            scale: 1.0,
            name,
        }
    }

    fn compose(&self, other: &Self, grid: (usize, usize)) -> Self {
        let a = &self.linear;
        let b = &other.linear;
        let linear = [
            snap(a[0] * b[0] + a[1] * b[2]),
            snap(a[0] * b[1] + a[1] * b[3]),
            snap(a[2] * b[0] + a[3] * b[2]),
            snap(a[2] * b[1] + a[3] * b[3]),
        ];
        let (dr, dc) = self.rotate_shift(other.shift);
        let shift = (
            (dr + self.shift.0 as i64).rem_euclid(grid.0 as i64) as usize,
            (dc + self.shift.1 as i64).rem_euclid(grid.1 as i64) as usize,
        );
        Self {
            linear,
            shift,
            scale: self.scale * other.scale,
            name: String::new(),
        }
    }

    /// Linear part applied to a pixel displacement `(rows, cols)`.
    fn rotate_shift(&self, (dr, dc): (usize, usize)) -> (i64, i64) {
        let (x, y) = (dc as f64, -(dr as f64));
        let m = &self.linear;
        let (x2, y2) = (m[0] * x + m[1] * y, m[2] * x + m[3] * y);
        ((-y2).round() as i64, x2.round() as i64)
    }

    fn key(&self) -> GeometryKey {
        let q = |v: f64| (v * 1e6).round() as i64;
        (
            q(self.linear[0]),
            q(self.linear[1]),
            q(self.linear[2]),
            q(self.linear[3]),
            self.shift.0,
            self.shift.1,
            q(self.scale.ln()),
        )
    }

    fn is_grid_aligned(&self) -> bool {
        self.linear.iter().all(|v| v.fract() == 0.0)
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-12 {
        r + 0.0
    } else {
        v
    }
}

/// A finite group together with its action on `[C, H, W]` images.
#[derive(Clone, Debug)]
pub struct ImageAction {
    spec: String,
    kind: ActionKind,
    interpolation: Interpolation,
    grid: (usize, usize),
    elements: Vec<Geometry>,
    /// `None` for sampled scalings, which are not closed under products,
    /// and for groups above [`MAX_TABLE_ORDER`].
    group: Option<FiniteGroup>,
    /// Element lookup for closed sets too large for a table.
    index: Option<HashMap<GeometryKey, usize>>,
    inverse: Vec<usize>,
}

type GeometryKey = (i64, i64, i64, i64, usize, usize, i64);

/// Accepted group spec strings.
pub const GROUP_GRAMMAR: &str = "trivial | c<k> | d<k> | rot:<k> | shifts | shifts2d:<S>x<T> | scalings | <point>+shifts | <point>+shifts2d:<S>x<T>";

impl ImageAction {
    fn from_elements(
        spec: String,
        kind: ActionKind,
        grid: (usize, usize),
        mut elements: Vec<Geometry>,
        closed: bool,
    ) -> Result<Self> {
        let aligned = elements.iter().all(Geometry::is_grid_aligned);
        let interpolation = if aligned {
            Interpolation::ExactPermutation
        } else {
            Interpolation::BilinearZeroFill
        };
        let n = elements.len();
        let index: HashMap<_, usize> = elements.iter().enumerate().map(|(i, g)| (g.key(), i)).collect();
        if index.len() != n {
            return Err(Error::GroupAxiom(format!("{spec}: duplicate elements")));
        }
        let lookup = |g: &Geometry| index.get(&g.key()).copied();
        let inv_geom = |g: &Geometry| -> Geometry {
            // Inverse of p -> Hp + t with orthogonal H is p -> H^T p - H^T t.
            let m = &g.linear;
            let lin = Geometry {
                linear: [m[0], m[2], m[1], m[3]],
                shift: (0, 0),
                scale: 1.0 / g.scale,
                name: String::new(),
            };
            let (dr, dc) = lin.rotate_shift(g.shift);
            Geometry {
                shift: (
                    (-dr).rem_euclid(grid.0 as i64) as usize,
                    (-dc).rem_euclid(grid.1 as i64) as usize,
                ),
                ..lin
            }
        };
        let inverse = elements
            .iter()
            .map(|g| {
                lookup(&inv_geom(g))
                    .ok_or_else(|| Error::GroupAxiom(format!("{spec}: element {} has no inverse in the set", g.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (group, large_index) = if closed && n > MAX_TABLE_ORDER {
            // Closure is spot-checked against a strided sample of right factors.
            let stride = (n / 64).max(1);
            for a in &elements {
                for b in elements.iter().step_by(stride) {
                    if lookup(&a.compose(b, grid)).is_none() {
                        return Err(Error::GroupAxiom(format!("{spec}: {} * {} leaves the set (closure)", a.name, b.name)));
                    }
                }
            }
            (None, Some(index.clone()))
        } else if closed {
            let mut table = Vec::with_capacity(n * n);
            for a in &elements {
                for b in &elements {
                    let ab = a.compose(b, grid);
                    table.push(lookup(&ab).ok_or_else(|| {
                        Error::GroupAxiom(format!("{spec}: {} * {} leaves the set (closure)", a.name, b.name))
                    })?);
                }
            }
            let names = elements.iter().map(|g| g.name.clone()).collect();
            (Some(FiniteGroup::from_table(names, table)?), None)
        } else {
            (None, None)
        };
        for g in &mut elements {
            if g.name.is_empty() {
                g.name = "?".into();
            }
        }
        Ok(Self {
            spec,
            kind,
            interpolation,
            grid,
            elements,
            group,
            index: large_index,
            inverse,
        })
    }

    pub fn trivial(h: usize, w: usize) -> Self {
        Self::from_elements("trivial".into(), ActionKind::Trivial, (h, w), vec![Geometry::identity()], true)
            .expect("trivial group")
    }

    fn shift_elements(h: usize, w: usize, sh: usize, sw: usize) -> Result<Vec<Geometry>> {
        if sh == 0 || sw == 0 || !h.is_multiple_of(sh) || !w.is_multiple_of(sw) {
            return Err(Error::InvalidArgument(format!(
                "shift lattice {sh}x{sw} does not divide the {h}x{w} grid"
            )));
        }
        let mut out = Vec::with_capacity(sh * sw);
        for a in 0..sh {
            for b in 0..sw {
                let shift = (a * (h / sh), b * (w / sw));
                out.push(Geometry {
                    shift,
                    name: if shift == (0, 0) {
                        "e".into()
                    } else {
                        format!("t({},{})", shift.0, shift.1)
                    },
                    ..Geometry::identity()
                });
            }
        }
        Ok(out)
    }

    /// Cyclic shifts by multiples of `(h / sh, w / sw)` pixels.
    pub fn shifts(h: usize, w: usize, sh: usize, sw: usize) -> Result<Self> {
        let els = Self::shift_elements(h, w, sh, sw)?;
        Self::from_elements(
            format!("shifts2d:{sh}x{sw}"),
            ActionKind::CyclicShift2d { steps: (sh, sw) },
            (h, w),
            els,
            true,
        )
    }

    fn point_elements(kind: &ActionKind) -> Vec<Geometry> {
        match kind {
            ActionKind::Rotation { k } => (0..*k)
                .map(|j| {
                    let name = if j == 0 {
                        "e".into()
                    } else if 360 % k == 0 {
                        format!("r{}", j * 360 / k)
                    } else {
                        format!("r{j}/{k}")
                    };
                    Geometry::rotation(2.0 * PI * j as f64 / *k as f64, name)
                })
                .collect(),
            ActionKind::Dihedral { k } => {
                let mut els = Self::point_elements(&ActionKind::Rotation { k: *k });
                els.extend((0..*k).map(|j| Geometry::reflection(2.0 * PI * j as f64 / *k as f64, format!("f{j}"))));
                els
            }
            _ => vec![Geometry::identity()],
        }
    }

    fn check_square(h: usize, w: usize) -> Result<()> {
        if h != w {
            return Err(Error::InvalidArgument(format!(
                "rotations need a square grid, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Rotations by multiples of `2 pi / k`; exact permutations when `k` divides 4.
    pub fn rotations(h: usize, w: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("rotation order must be positive".into()));
        }
        if k > 2 {
            Self::check_square(h, w)?;
        }
        let kind = ActionKind::Rotation { k };
        let els = Self::point_elements(&kind);
        let spec = if 4 % k == 0 { format!("c{k}") } else { format!("rot:{k}") };
        Self::from_elements(spec, kind, (h, w), els, true)
    }

    /// Dihedral group of order `2k`: rotations and reflections.
    pub fn dihedral(h: usize, w: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("dihedral order must be positive".into()));
        }
        Self::check_square(h, w)?;
        let kind = ActionKind::Dihedral { k };
        let els = Self::point_elements(&kind);
        Self::from_elements(format!("d{k}"), kind, (h, w), els, true)
    }

    /// Point group combined with cyclic shifts (all products `p * t`).
    pub fn with_shifts(point: &ImageAction, sh: usize, sw: usize) -> Result<Self> {
        let (h, w) = point.grid;
        if point.interpolation != Interpolation::ExactPermutation {
            return Err(Error::InvalidArgument(
                "shifts can only be combined with grid-aligned point groups".into(),
            ));
        }
        let shifts = Self::shift_elements(h, w, sh, sw)?;
        let mut els = Vec::with_capacity(point.order() * shifts.len());
        for t in &shifts {
            for p in &point.elements {
                let mut g = t.compose(p, (h, w));
                g.name = match (t.name.as_str(), p.name.as_str()) {
                    ("e", pn) => pn.to_string(),
                    (tn, "e") => tn.to_string(),
                    (tn, pn) => format!("{tn}{pn}"),
                };
                els.push(g);
            }
        }
        Self::from_elements(
            format!("{}+shifts2d:{sh}x{sw}", point.spec),
            ActionKind::PointShift {
                point: Box::new(point.kind.clone()),
                steps: (sh, sw),
            },
            (h, w),
            els,
            true,
        )
    }

    /// Finite sample of the multiplicative group of positive reals acting on
    /// values. The set must be closed under inversion; it is not closed under
    /// products, so no product table exists.
    pub fn scalings(h: usize, w: usize, factors: &[f64]) -> Result<Self> {
        if factors.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(Error::InvalidArgument("scaling factors must be positive".into()));
        }
        let els = factors
            .iter()
            .map(|&f| Geometry {
                scale: f,
                name: if f == 1.0 { "e".into() } else { format!("s{f}") },
                ..Geometry::identity()
            })
            .collect();
        Self::from_elements(
            "scalings".into(),
            ActionKind::RangeScaling {
                factors: factors.to_vec(),
            },
            (h, w),
            els,
            false,
        )
    }

    /// Default finite grid of scalings.
    pub fn default_scalings(h: usize, w: usize) -> Self {
        Self::scalings(h, w, &[0.1, 0.5, 1.0, 2.0, 10.0]).expect("inverse-closed set")
    }

    /// Parses a group spec for an `h x w` grid. See [`GROUP_GRAMMAR`].
    pub fn parse(spec: &str, h: usize, w: usize) -> Result<Self> {
        let bad = |reason: &str| Error::Spec {
            spec: spec.to_string(),
            reason: reason.to_string(),
            grammar: GROUP_GRAMMAR,
        };
        // Out-of-range parameters are spec errors too, so they carry the grammar.
        let with_grammar = |r: Result<Self>| {
            r.map_err(|e| match e {
                Error::InvalidArgument(reason) => bad(&reason),
                other => other,
            })
        };
        let spec = spec.trim();
        if let Some((point, shifts)) = spec.split_once('+') {
            let p = Self::parse(point, h, w)?;
            let (sh, sw) = parse_shift_spec(shifts, h, w).ok_or_else(|| bad("bad shift part"))?;
            return with_grammar(Self::with_shifts(&p, sh, sw));
        }
        if spec == "trivial" || spec == "e" {
            return Ok(Self::trivial(h, w));
        }
        if spec == "scalings" {
            return Ok(Self::default_scalings(h, w));
        }
        if let Some((sh, sw)) = parse_shift_spec(spec, h, w) {
            return with_grammar(Self::shifts(h, w, sh, sw));
        }
        if let Some(k) = spec.strip_prefix("rot:") {
            let k = k.parse().map_err(|_| bad("rotation count must be an integer"))?;
            return with_grammar(Self::rotations(h, w, k));
        }
        if let Some(k) = spec.strip_prefix('c') {
            let k = k.parse().map_err(|_| bad("unknown group"))?;
            return with_grammar(Self::rotations(h, w, k));
        }
        if let Some(k) = spec.strip_prefix('d') {
            let k = k.parse().map_err(|_| bad("unknown group"))?;
            return with_grammar(Self::dihedral(h, w, k));
        }
        Err(bad("unknown group"))
    }

    pub fn spec(&self) -> &str {
        &self.spec
    }

    pub fn kind(&self) -> &ActionKind {
        &self.kind
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn is_exact(&self) -> bool {
        self.interpolation == Interpolation::ExactPermutation
    }

    /// Border width outside which no element zero fills: 0 for exact
    /// actions, else the corners cut off by the inscribed disc.
    pub fn interior_margin(&self) -> usize {
        if self.is_exact() {
            return 0;
        }
        let side = self.grid.0.min(self.grid.1) as f64;
        // Largest square inside the disc of diameter `side`, plus one pixel for the bilinear stencil.
        ((side - side / std::f64::consts::SQRT_2) / 2.0).ceil() as usize + 1
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> std::ops::Range<usize> {
        0..self.order()
    }

    /// Product table, if the element set is a group.
    pub fn group(&self) -> Option<&FiniteGroup> {
        self.group.as_ref()
    }

    pub fn identity(&self) -> usize {
        self.elements
            .iter()
            .position(|g| *g == Geometry::identity() || (g.key() == Geometry::identity().key()))
            .unwrap_or(0)
    }

    fn check(&self, g: usize) -> Result<&Geometry> {
        self.elements.get(g).ok_or(Error::UnknownElement(g))
    }

    pub fn name(&self, g: usize) -> Result<&str> {
        Ok(&self.check(g)?.name)
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.elements.iter().position(|g| g.name == name)
    }

    pub fn inverse(&self, g: usize) -> Result<usize> {
        self.check(g)?;
        Ok(self.inverse[g])
    }

    pub fn product(&self, g: usize, h: usize) -> Result<usize> {
        match (&self.group, &self.index) {
            (Some(grp), _) => grp.product(g, h),
            (None, Some(index)) => {
                let ab = self.check(g)?.compose(self.check(h)?, self.grid);
                index
                    .get(&ab.key())
                    .copied()
                    .ok_or_else(|| Error::GroupAxiom(format!("{}: product leaves the set", self.spec)))
            }
            (None, None) => Err(Error::InvalidArgument(format!(
                "{} is a sampled set without a product table",
                self.spec
            ))),
        }
    }

    /// 2x2 matrix of the element's linear part on planar coordinates.
    pub fn linear_part(&self, g: usize) -> Result<[f64; 4]> {
        Ok(self.check(g)?.linear)
    }

    pub fn scale_factor(&self, g: usize) -> Result<f64> {
        Ok(self.check(g)?.scale)
    }

    /// Resampling stencil: output pixel `p` of `T_g u` reads
    /// `sum_k w_k * u[src_k]` (scale factor included).
    pub(crate) fn stencil(&self, g: usize, p: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let geom = &self.elements[g];
        let (h, w) = self.grid;
        let (i, j) = (p / w, p % w);
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        // g^{-1} p = H^T (p - t): undo the shift first, then rotate back.
        let ii = (i as f64 - geom.shift.0 as f64).rem_euclid(h as f64);
        let jj = (j as f64 - geom.shift.1 as f64).rem_euclid(w as f64);
        let (x, y) = (jj - cx, -(ii - cy));
        let m = &geom.linear;
        let (xs, ys) = (m[0] * x + m[2] * y, m[1] * x + m[3] * y);
        let (si, sj) = (cy - ys, cx + xs);
        if self.interpolation == Interpolation::ExactPermutation {
            let (ri, rj) = (si.round() as i64, sj.round() as i64);
            let (ri, rj) = (ri.rem_euclid(h as i64) as usize, rj.rem_euclid(w as i64) as usize);
            out.push((ri * w + rj, geom.scale));
            return;
        }
        let (fi, fj) = (si.floor(), sj.floor());
        let (ti, tj) = (si - fi, sj - fj);
        for (di, wi) in [(0.0, 1.0 - ti), (1.0, ti)] {
            for (dj, wj) in [(0.0, 1.0 - tj), (1.0, tj)] {
                let wgt = wi * wj;
                if wgt.abs() < 1e-14 {
                    continue;
                }
                let (qi, qj) = (fi + di, fj + dj);
                if qi < 0.0 || qj < 0.0 || qi > (h - 1) as f64 || qj > (w - 1) as f64 {
                    continue;
                }
                out.push((qi as usize * w + qj as usize, wgt * geom.scale));
            }
        }
    }

    fn check_image<T: Scalar>(&self, u: &Tensor<T>) -> Result<usize> {
        match u.shape()[..] {
            [c, h, w] if (h, w) == self.grid => Ok(c),
            [_, h, w] if h != w && matches!(self.kind, ActionKind::Rotation { .. } | ActionKind::Dihedral { .. }) => {
                Err(Error::InvalidArgument(format!("rotation of a non-square {h}x{w} image")))
            }
            _ => Err(Error::ShapeMismatch {
                op: "act_on_image",
                left: u.shape().to_vec(),
                right: vec![0, self.grid.0, self.grid.1],
            }),
        }
    }

    /// `T_g u` for `u` of shape `[C, H, W]`, channels transformed independently.
    pub fn act<T: Scalar>(&self, g: usize, u: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(g)?;
        let c = self.check_image(u)?;
        if g == self.identity() {
            return Ok(u.clone());
        }
        Tensor::new(u.shape().to_vec(), self.act_flat(g, u.data(), c))
    }

    pub(crate) fn act_flat<T: Scalar>(&self, g: usize, x: &[T], channels: usize) -> Vec<T> {
        let plane = self.grid.0 * self.grid.1;
        let mut out = vec![T::zero(); channels * plane];
        let mut st = Vec::with_capacity(4);
        for p in 0..plane {
            self.stencil(g, p, &mut st);
            for ch in 0..channels {
                let mut acc = T::zero();
                for &(q, wgt) in &st {
                    acc += T::lit(wgt) * x[ch * plane + q];
                }
                out[ch * plane + p] = acc;
            }
        }
        out
    }

    /// Adjoint of `T_g` (equals `T_{g^{-1}}` for exact rotations, flips and shifts).
    pub(crate) fn act_adjoint_flat<T: Scalar>(&self, g: usize, y: &[T], channels: usize) -> Vec<T> {
        let plane = self.grid.0 * self.grid.1;
        let mut out = vec![T::zero(); channels * plane];
        let mut st = Vec::with_capacity(4);
        for p in 0..plane {
            self.stencil(g, p, &mut st);
            for ch in 0..channels {
                let v = y[ch * plane + p];
                for &(q, wgt) in &st {
                    out[ch * plane + q] += T::lit(wgt) * v;
                }
            }
        }
        out
    }

    /// `n x n` matrix of `T_g` on flattened single-channel images.
    pub fn matrix<T: Scalar>(&self, g: usize, n: usize) -> Result<Tensor<T>> {
        self.check(g)?;
        let plane = self.grid.0 * self.grid.1;
        if n != plane {
            return Err(Error::ShapeMismatch {
                op: "action_matrix",
                left: vec![n],
                right: vec![self.grid.0, self.grid.1],
            });
        }
        let mut m = Tensor::zeros(&[n, n]);
        let mut st = Vec::new();
        for p in 0..n {
            self.stencil(g, p, &mut st);
            for &(q, wgt) in &st {
                let cur = m.get(&[p, q]);
                m.set(&[p, q], cur + T::lit(wgt));
            }
        }
        Ok(m)
    }

    /// `T_g` as a graph-usable linear map on `[channels, H, W]` tensors.
    pub fn linear_map(&self, g: usize, channels: usize) -> Result<ActionMap> {
        self.check(g)?;
        Ok(ActionMap {
            action: self.clone(),
            g,
            channels,
        })
    }
}

fn parse_shift_spec(s: &str, h: usize, w: usize) -> Option<(usize, usize)> {
    if s == "shifts" {
        return Some((h, w));
    }
    let rest = s.strip_prefix("shifts2d:")?;
    let (a, b) = rest.split_once('x')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

/// `T_g` for a fixed element, usable inside a computation graph.
#[derive(Clone, Debug)]
pub struct ActionMap {
    action: ImageAction,
    g: usize,
    channels: usize,
}

impl<T: Scalar> LinearMap<T> for ActionMap {
    fn in_shape(&self) -> Vec<usize> {
        vec![self.channels, self.action.grid.0, self.action.grid.1]
    }
    fn out_shape(&self) -> Vec<usize> {
        <Self as LinearMap<T>>::in_shape(self)
    }
    fn apply(&self, x: &[T]) -> Vec<T> {
        self.action.act_flat(self.g, x, self.channels)
    }
    fn apply_adjoint(&self, y: &[T]) -> Vec<T> {
        self.action.act_adjoint_flat(self.g, y, self.channels)
    }
    fn name(&self) -> &'static str {
        "group_action"
    }
}

/// Linear action of the group on feature values: `g -> pi_g`.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    degree: usize,
    /// Row-major `degree x degree` matrix per element.
    matrices: Vec<Vec<f64>>,
    unitary: bool,
}

impl Representation {
    /// Validates `pi_e = I`, the homomorphism property (when a product
    /// table exists) and flags unitarity.
    pub fn new(action: &ImageAction, degree: usize, matrices: Vec<Vec<f64>>) -> Result<Self> {
        if matrices.len() != action.order() || matrices.iter().any(|m| m.len() != degree * degree) {
            return Err(Error::InvalidArgument(
                "representation needs one degree x degree matrix per element".into(),
            ));
        }
        let rep = Self {
            degree,
            unitary: matrices.iter().all(|m| is_orthogonal(m, degree)),
            matrices,
        };
        let e = action.identity();
        if max_diff(&rep.matrices[e], &identity(degree)) > 1e-12 {
            return Err(Error::GroupAxiom("representation of the identity is not I".into()));
        }
        if let Some(grp) = action.group() {
            for g in grp.elements() {
                for h in grp.elements() {
                    let gh = grp.product(g, h)?;
                    let prod = matmul(&rep.matrices[g], &rep.matrices[h], degree);
                    if max_diff(&prod, &rep.matrices[gh]) > 1e-12 {
                        return Err(Error::GroupAxiom(format!(
                            "pi({}) pi({}) != pi({})",
                            action.name(g)?,
                            action.name(h)?,
                            action.name(gh)?
                        )));
                    }
                }
            }
        }
        Ok(rep)
    }

    /// Scalar features that do not transform.
    pub fn trivial(action: &ImageAction) -> Self {
        Self::new(action, 1, vec![vec![1.0]; action.order()]).expect("trivial representation")
    }

    /// Planar vectors rotated by the element's linear part (`pi_H = H`).
    pub fn vector(action: &ImageAction) -> Result<Self> {
        let mats = action
            .elements()
            .map(|g| action.linear_part(g).map(|m| m.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(action, 2, mats)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn is_unitary(&self) -> bool {
        self.unitary
    }

    pub fn matrix(&self, g: usize) -> Result<&[f64]> {
        self.matrices.get(g).map(Vec::as_slice).ok_or(Error::UnknownElement(g))
    }

    /// `T^pi_g u (x) = pi_g u(g^{-1} x)` for a field `u` of shape `[degree, H, W]`.
    pub fn act_on_field<T: Scalar>(&self, action: &ImageAction, g: usize, u: &Tensor<T>) -> Result<Tensor<T>> {
        if u.ndim() != 3 || u.shape()[0] != self.degree {
            return Err(Error::ShapeMismatch {
                op: "act_on_field",
                left: u.shape().to_vec(),
                right: vec![self.degree],
            });
        }
        let moved = action.act(g, u)?;
        let pi = self.matrix(g)?;
        let plane = u.len() / self.degree;
        let d = self.degree;
        let src = moved.data();
        let mut out = vec![T::zero(); u.len()];
        for p in 0..plane {
            for r in 0..d {
                let mut acc = T::zero();
                for c in 0..d {
                    acc += T::lit(pi[r * d + c]) * src[c * plane + p];
                }
                out[r * plane + p] = acc;
            }
        }
        Tensor::new(u.shape().to_vec(), out)
    }
}

pub(crate) fn identity(d: usize) -> Vec<f64> {
    (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect()
}

pub(crate) fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            for j in 0..d {
                out[i * d + j] += a[i * d + k] * b[k * d + j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], d: usize) -> Vec<f64> {
    (0..d * d).map(|k| a[(k % d) * d + k / d]).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn is_orthogonal(m: &[f64], d: usize) -> bool {
    max_diff(&matmul(&transpose(m, d), m, d), &identity(d)) < 1e-12
}
