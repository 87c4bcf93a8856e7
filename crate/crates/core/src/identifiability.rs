//! Can an operator be inverted from measurements alone under a group?
//!
//! The stacked matrix `M = [A T_1; ...; A T_|G|]` must have a trivial
//! nullspace for measurement-only learning to be possible. Full rank is
//! necessary, not sufficient, so reports only ever speak of the rank
//! condition being satisfied.

use std::fmt;

use crate::error::{Error, Result};
use crate::groups::ImageAction;
use crate::linalg;
use crate::operators::{detect_equivariance, virtual_operator, LinearOperator, EXPLICIT_CAP};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default relative rank threshold.
pub const RANK_RTOL: f64 = 1e-10;

/// Stacks the virtual operators `A T_g` in group enumeration order.
pub fn build_m<T: Scalar>(op: &LinearOperator<T>, action: &ImageAction) -> Result<Tensor<T>> {
    build_m_ordered(op, action, &action.elements().collect::<Vec<_>>())
}

/// As [`build_m`], with the block order given explicitly.
pub fn build_m_ordered<T: Scalar>(op: &LinearOperator<T>, action: &ImageAction, order: &[usize]) -> Result<Tensor<T>> {
    let (h, w) = action.grid();
    if h * w != op.n() {
        return Err(Error::ShapeMismatch {
            op: "build_M",
            left: vec![op.n()],
            right: vec![h, w],
        });
    }
    let a = op.matrix()?;
    let (m, n) = (op.m(), op.n());
    let mut data = Vec::with_capacity(m * n * order.len());
    for &g in order {
        data.extend_from_slice(virtual_operator(a, action, g).data());
    }
    Tensor::new(vec![m * order.len(), n], data)
}

/// Outcome of [`analyze`].
#[derive(Clone, Debug)]
pub struct StackReport {
    pub operator: String,
    pub group: String,
    pub m: usize,
    pub n: usize,
    pub group_order: usize,
    pub rank: usize,
    pub nullity: usize,
    pub rank_a: usize,
    /// `|G| > n / m`.
    pub necessary_condition_holds: bool,
    /// `rank(M) == n`.
    pub rank_condition_satisfied: bool,
    pub operator_equivariant: bool,
    pub equivariance_residual: f64,
    /// Largest `||A T_g v||` over unit nullspace vectors `v` of `A T_g`,
    /// i.e. the check that `T_g v` lies in the nullspace of `A`.
    pub nullspace_rotation_error: f64,
    pub singular_values: Vec<f64>,
    pub tol: f64,
}

impl StackReport {
    /// Short verdict for tables and CSV files.
    pub fn verdict(&self) -> &'static str {
        if !self.necessary_condition_holds {
            "necessary condition fails"
        } else if self.rank_condition_satisfied {
            "rank condition satisfied"
        } else {
            "rank condition fails"
        }
    }

    /// Warning text when the pair cannot be learned from measurements alone.
    pub fn warning(&self) -> Option<String> {
        if self.rank_condition_satisfied {
            return None;
        }
        let why = if !self.necessary_condition_holds {
            format!(
                "the group is too small: |G| = {} <= n/m = {:.3}",
                self.group_order,
                self.n as f64 / self.m as f64
            )
        } else if self.operator_equivariant {
            format!(
                "the operator is equivariant to the group, so rank(M) = rank(A) = {} < n = {} regardless of |G|",
                self.rank, self.n
            )
        } else {
            format!("rank(M) = {} < n = {}", self.rank, self.n)
        };
        Some(format!(
            "WARNING: {} with {}: {why}; measurement-only training is expected to fail",
            self.operator, self.group
        ))
    }

    pub const CSV_HEADER: &'static str = "operator,group,m,n,group_order,rank,verdict";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.operator,
            self.group,
            self.m,
            self.n,
            self.group_order,
            self.rank,
            self.verdict()
        )
    }
}

impl fmt::Display for StackReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("operator", self.operator.clone()),
            ("group", self.group.clone()),
            ("m", self.m.to_string()),
            ("n", self.n.to_string()),
            ("|G|", self.group_order.to_string()),
            ("rank(A)", self.rank_a.to_string()),
            ("rank(M)", self.rank.to_string()),
            ("nullity(M)", self.nullity.to_string()),
            ("|G| > n/m", self.necessary_condition_holds.to_string()),
            ("rank(M) = n", self.rank_condition_satisfied.to_string()),
            ("A equivariant", self.operator_equivariant.to_string()),
            ("equivariance residual", format!("{:.3e}", self.equivariance_residual)),
            ("nullspace rotation error", format!("{:.3e}", self.nullspace_rotation_error)),
            ("rank tolerance", format!("{:e}", self.tol)),
            (
                "sigma(M) max/min",
                match (self.singular_values.first(), self.singular_values.last()) {
                    (Some(a), Some(b)) => format!("{a:.4e} / {b:.4e}"),
                    _ => "-".into(),
                },
            ),
            ("verdict", self.verdict().to_string()),
        ];
        for (k, v) in rows {
            writeln!(f, "{k:<26}{v}")?;
        }
        if let Some(w) = self.warning() {
            writeln!(f, "{w}")?;
        }
        Ok(())
    }
}

/// Rank analysis of `M` (from [`build_m`]) with relative threshold `tol`.
pub fn analyze<T: Scalar>(m_mat: &Tensor<T>, op: &LinearOperator<T>, action: &ImageAction, tol: f64) -> Result<StackReport> {
    let (m, n) = (op.m(), op.n());
    if n > EXPLICIT_CAP {
        return Err(Error::SizeCap { size: n, cap: EXPLICIT_CAP });
    }
    if m_mat.shape() != [m * action.order(), n] {
        return Err(Error::ShapeMismatch {
            op: "analyze",
            left: m_mat.shape().to_vec(),
            right: vec![m * action.order(), n],
        });
    }
    let s: Vec<f64> = linalg::singular_values(m_mat)?.iter().map(|v| v.as_f64()).collect();
    let rank = linalg::rank_from_singular(&s, tol);
    let a = op.matrix()?;
    let rank_a = linalg::rank(a, T::lit(tol))?;
    let eq = detect_equivariance(op, action, T::lit(1e-8))?;
    let mut rotation_error = 0.0f64;
    for g in action.elements() {
        let ag = virtual_operator(a, action, g);
        for v in linalg::nullspace(&ag, T::lit(tol))? {
            let tv = action.act(g, &Tensor::new(vec![1, action.grid().0, action.grid().1], v)?)?;
            rotation_error = rotation_error.max(op.apply(&tv)?.norm().as_f64());
        }
    }
    Ok(StackReport {
        operator: op.spec().to_string(),
        group: action.spec().to_string(),
        m,
        n,
        group_order: action.order(),
        rank,
        nullity: n - rank,
        rank_a,
        necessary_condition_holds: (action.order() * m) > n,
        rank_condition_satisfied: rank == n,
        operator_equivariant: eq.equivariant,
        equivariance_residual: eq.max_residual().as_f64(),
        nullspace_rotation_error: rotation_error,
        singular_values: s,
        tol,
    })
}

/// [`build_m`] followed by [`analyze`] at the default threshold.
pub fn analyze_pair<T: Scalar>(op: &LinearOperator<T>, action: &ImageAction) -> Result<StackReport> {
    let m = build_m(op, action)?;
    analyze(&m, op, action, RANK_RTOL)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_group_gives_a() {
        let op = LinearOperator::<f64>::inpainting(1, 4, &[true, true, false, false]).unwrap();
        let m = build_m(&op, &ImageAction::trivial(1, 4)).unwrap();
        assert_eq!(&m, op.matrix().unwrap());
        let r = analyze(&m, &op, &ImageAction::trivial(1, 4), RANK_RTOL).unwrap();
        assert_eq!((r.rank, r.rank_a), (2, 2));
        assert!(!r.rank_condition_satisfied && !r.necessary_condition_holds);
        assert_eq!(r.verdict(), "necessary condition fails");
    }

    #[test]
    fn inpainting_with_shifts_is_full_rank() {
        let op = LinearOperator::<f64>::inpainting(1, 4, &[true, true, false, false]).unwrap();
        let shifts = ImageAction::shifts(1, 4, 1, 4).unwrap();
        let r = analyze_pair(&op, &shifts).unwrap();
        assert_eq!((r.rank, r.nullity), (4, 0));
        assert_eq!(r.verdict(), "rank condition satisfied");
        assert!(r.warning().is_none());
        assert!(r.nullspace_rotation_error < 1e-12);
    }

    #[test]
    fn blur_with_shifts_is_degenerate() {
        let op = LinearOperator::<f64>::parse("blur:kernel=0.5,0.5", 1, 4).unwrap();
        let shifts = ImageAction::shifts(1, 4, 1, 4).unwrap();
        let r = analyze_pair(&op, &shifts).unwrap();
        assert_eq!((r.rank, r.rank_a), (3, 3));
        assert!(r.necessary_condition_holds && r.operator_equivariant);
        assert!(r.warning().unwrap().contains("regardless of |G|"));
        assert!(r.to_string().contains("rank condition fails"));
    }

    #[test]
    fn tall_qr_path_matches_direct_svd() {
        let a: Tensor = crate::rng::uniform(&mut crate::rng::stream(3, 0), &[40, 6], -1.0, 1.0);
        let direct = linalg::svd(&a).unwrap().s;
        let reduced = linalg::singular_values(&a).unwrap();
        for (x, y) in direct.iter().zip(&reduced) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
