//! Matrix-free inner solvers: truncated conjugate gradients and Bi-CG-STAB,
//! plus negative-curvature bookkeeping and descent-direction selection.
//!
//! Both solvers work purely through a [`CurvatureOperator`]'s `apply`
//! closure, record their iterates and search directions as candidates (with
//! the curvature value dᵀAd attached), and never form a matrix. Curvature of
//! iterates is tracked incrementally — A·x_{j+1} follows from already-known
//! products — so candidate bookkeeping costs no extra operator applications.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Vector};

/// Which curvature matrix the operator realises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureKind {
    ExactHessian,
    GaussNewton,
}

/// Matrix-free damped curvature operator B(v) = base(v) + λ·v.
pub struct CurvatureOperator<'a> {
    dim: usize,
    lambda: f64,
    kind: CurvatureKind,
    apply_base: Box<dyn Fn(&Vector) -> Result<Vector> + 'a>,
}

impl<'a> CurvatureOperator<'a> {
    pub fn new(
        dim: usize,
        lambda: f64,
        kind: CurvatureKind,
        apply_base: impl Fn(&Vector) -> Result<Vector> + 'a,
    ) -> Self {
        CurvatureOperator {
            dim,
            lambda,
            kind,
            apply_base: Box::new(apply_base),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn kind(&self) -> CurvatureKind {
        self.kind
    }

    /// Applies the damped operator: base(v) + λv.
    pub fn apply(&self, v: &Vector) -> Result<Vector> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "CurvatureOperator::apply",
                expected: self.dim,
                actual: v.len(),
            });
        }
        let base = (self.apply_base)(v)?;
        if base.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "CurvatureOperator::apply output",
                expected: self.dim,
                actual: base.len(),
            });
        }
        if self.lambda == 0.0 {
            Ok(base)
        } else {
            axpy(self.lambda, v, &base)
        }
    }
}

/// How an inner solve ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KrylovStatus {
    Converged,
    MaxIterations,
    NegativeCurvature,
    Breakdown,
}

/// A direction snapshot taken during the solve, with its curvature dᵀAd
/// through the damped operator.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub direction: Vector,
    pub curvature: f64,
}

/// Outcome of an inner solve.
#[derive(Debug, Clone)]
pub struct KrylovResult {
    pub direction: Vector,
    pub status: KrylovStatus,
    pub candidates: Vec<Candidate>,
    pub residual_norm: f64,
    pub operator_applications: usize,
    pub iterations: usize,
}

/// Relative threshold below which dᵀAd counts as negative curvature.
const CURVATURE_EPS: f64 = 1e-12;

/// Pivot magnitudes below this are treated as breakdown.
const BREAKDOWN_EPS: f64 = 1e-300;

fn is_negative_curvature(curvature: f64, norm_sq: f64) -> bool {
    curvature < -CURVATURE_EPS * norm_sq
}

fn check_solver_inputs(a: &CurvatureOperator, b: &Vector, x0: &Vector, max_iter: usize, tol: f64) -> Result<()> {
    if b.len() != a.dim() {
        return Err(Error::DimensionMismatch {
            context: "krylov rhs",
            expected: a.dim(),
            actual: b.len(),
        });
    }
    if x0.len() != a.dim() {
        return Err(Error::DimensionMismatch {
            context: "krylov start point",
            expected: a.dim(),
            actual: x0.len(),
        });
    }
    if max_iter == 0 {
        return Err(Error::InvalidConfig("krylov max_iter must be ≥ 1".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig("krylov tol must be > 0".into()));
    }
    Ok(())
}

/// Bi-CG-STAB on A·x = b from x0.
///
/// Per iteration: α_j = (r_j,r₀*)/(Ap_j,r₀*), s_j = r_j − α_j·Ap_j,
/// γ_j = (s_j,As_j)/(As_j,As_j), x_{j+1} = x_j + α_j p_j + γ_j s_j,
/// r_{j+1} = s_j − γ_j·As_j, β_j = ((r_{j+1},r₀*)/(r_j,r₀*))·(α_j/γ_j),
/// p_{j+1} = r_{j+1} + β_j(p_j − γ_j·Ap_j), with the shadow residual fixed
/// as r₀* = r₀. Terminates on ‖r‖ ≤ tol·‖b‖, on max_iter, or on breakdown
/// of a pivot denominator. Records every search direction p_j and every
/// iterate x_{j+1} as candidates with their curvature.
pub fn bicgstab(
    a: &CurvatureOperator,
    b: &Vector,
    x0: &Vector,
    max_iter: usize,
    tol: f64,
) -> Result<KrylovResult> {
    check_solver_inputs(a, b, x0, max_iter, tol)?;
    let threshold = tol * b.norm();

    let mut x = x0.clone();
    let mut applications = 1;
    let mut ax = a.apply(&x)?; // tracks A·x_j throughout
    let mut r = axpy(-1.0, &ax, b)?;
    let mut residual = r.norm();
    let mut candidates = Vec::new();

    if residual <= threshold {
        return Ok(KrylovResult {
            direction: x,
            status: KrylovStatus::Converged,
            candidates,
            residual_norm: residual,
            operator_applications: applications,
            iterations: 0,
        });
    }

    let r_star = r.clone();
    let mut p = r.clone();
    let mut rho = dot(&r, &r_star)?;
    let mut status = KrylovStatus::MaxIterations;
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;

        let ap = a.apply(&p)?;
        applications += 1;
        let p_ap = dot(&p, &ap)?;
        candidates.push(Candidate {
            direction: p.clone(),
            curvature: p_ap,
        });

        let denom = dot(&ap, &r_star)?;
        if denom.abs() < BREAKDOWN_EPS || rho.abs() < BREAKDOWN_EPS {
            status = KrylovStatus::Breakdown;
            break;
        }
        let alpha = rho / denom;
        let s = axpy(-alpha, &ap, &r)?;
        let s_norm = s.norm();

        // s may already satisfy the tolerance (exactly zero on e.g. the
        // identity system); the stabilisation step would then divide by
        // ‖As‖² = 0, so take the half-step and stop here.
        if s_norm <= threshold {
            x = axpy(alpha, &p, &x)?;
            ax = axpy(alpha, &ap, &ax)?;
            candidates.push(Candidate {
                direction: x.clone(),
                curvature: dot(&x, &ax)?,
            });
            residual = s_norm;
            status = KrylovStatus::Converged;
            break;
        }

        let a_s = a.apply(&s)?;
        applications += 1;
        let s_as = dot(&s, &a_s)?;
        let as_as = dot(&a_s, &a_s)?;
        if as_as < BREAKDOWN_EPS {
            // ‖As‖² vanished while s did not: keep the α half-step.
            x = axpy(alpha, &p, &x)?;
            ax = axpy(alpha, &ap, &ax)?;
            candidates.push(Candidate {
                direction: x.clone(),
                curvature: dot(&x, &ax)?,
            });
            residual = s_norm;
            status = KrylovStatus::Breakdown;
            break;
        }
        let gamma = s_as / as_as;

        x = axpy(alpha, &p, &x)?;
        x = axpy(gamma, &s, &x)?;
        ax = axpy(alpha, &ap, &ax)?;
        ax = axpy(gamma, &a_s, &ax)?;
        candidates.push(Candidate {
            direction: x.clone(),
            curvature: dot(&x, &ax)?,
        });

        let r_new = axpy(-gamma, &a_s, &s)?;
        residual = r_new.norm();
        if residual <= threshold {
            status = KrylovStatus::Converged;
            break;
        }

        let rho_new = dot(&r_new, &r_star)?;
        if gamma.abs() < BREAKDOWN_EPS || rho_new.abs() < BREAKDOWN_EPS {
            status = KrylovStatus::Breakdown;
            break;
        }
        let beta = (rho_new / rho) * (alpha / gamma);
        let p_damped = axpy(-gamma, &ap, &p)?;
        p = axpy(beta, &p_damped, &r_new)?;
        r = r_new;
        rho = rho_new;
    }

    Ok(KrylovResult {
        direction: x,
        status,
        candidates,
        residual_norm: residual,
        operator_applications: applications,
        iterations,
    })
}

/// Truncated conjugate gradients on A·x = b from x0, with a negative-
/// curvature exit.
///
/// When the conjugate direction p has pᵀAp < 0 at the very first iteration
/// the solver returns −b (steepest descent on the system's sign
/// convention); when it happens later, it returns the last iterate. Either
/// way the offending p is recorded as a candidate and the status is
/// `NegativeCurvature`.
pub fn cg_truncated(
    a: &CurvatureOperator,
    b: &Vector,
    x0: &Vector,
    max_iter: usize,
    tol: f64,
) -> Result<KrylovResult> {
    check_solver_inputs(a, b, x0, max_iter, tol)?;
    let threshold = tol * b.norm();

    let mut x = x0.clone();
    let mut applications = 1;
    let mut ax = a.apply(&x)?;
    let mut r = axpy(-1.0, &ax, b)?;
    let mut residual = r.norm();
    let mut candidates = Vec::new();

    if residual <= threshold {
        return Ok(KrylovResult {
            direction: x,
            status: KrylovStatus::Converged,
            candidates,
            residual_norm: residual,
            operator_applications: applications,
            iterations: 0,
        });
    }

    let mut p = r.clone();
    let mut rr = dot(&r, &r)?;
    let mut status = KrylovStatus::MaxIterations;
    let mut iterations = 0;
    let mut direction_override: Option<Vector> = None;

    for j in 0..max_iter {
        iterations += 1;

        let ap = a.apply(&p)?;
        applications += 1;
        let p_ap = dot(&p, &ap)?;
        candidates.push(Candidate {
            direction: p.clone(),
            curvature: p_ap,
        });

        let p_norm_sq = dot(&p, &p)?;
        if is_negative_curvature(p_ap, p_norm_sq) {
            status = KrylovStatus::NegativeCurvature;
            if j == 0 {
                // First conjugate direction already has negative curvature:
                // fall back to the steepest-descent direction −b.
                direction_override = Some(b.scale(-1.0));
            }
            break;
        }
        if p_ap.abs() < BREAKDOWN_EPS {
            status = KrylovStatus::Breakdown;
            break;
        }

        let alpha = rr / p_ap;
        x = axpy(alpha, &p, &x)?;
        ax = axpy(alpha, &ap, &ax)?;
        candidates.push(Candidate {
            direction: x.clone(),
            curvature: dot(&x, &ax)?,
        });

        r = axpy(-alpha, &ap, &r)?;
        residual = r.norm();
        if residual <= threshold {
            status = KrylovStatus::Converged;
            break;
        }

        let rr_new = dot(&r, &r)?;
        let beta = rr_new / rr;
        p = axpy(beta, &p, &r)?;
        rr = rr_new;
    }

    Ok(KrylovResult {
        direction: direction_override.unwrap_or(x),
        status,
        candidates,
        residual_norm: residual,
        operator_applications: applications,
        iterations,
    })
}

/// Descent orientation d̃ = −sgn(gᵀd)·d with sgn(x) = 1 for x ≥ 0, so that
/// gᵀd̃ ≤ 0 always holds.
pub fn orient_descent(g: &Vector, d: &Vector) -> Result<Vector> {
    if g.len() != d.len() {
        return Err(Error::DimensionMismatch {
            context: "orient_descent",
            expected: g.len(),
            actual: d.len(),
        });
    }
    if d.is_zero() {
        return Err(Error::DegenerateDirection("orient_descent"));
    }
    let gd = dot(g, d)?;
    let sign = if gd >= 0.0 { 1.0 } else { -1.0 };
    Ok(d.scale(-sign))
}

/// Classification of the chosen direction's curvature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureTag {
    NewtonType,
    NegativeCurvature,
}

/// Outcome of [`select_direction`]: the oriented direction, its curvature
/// class, and the raw curvature value dᵀAd (useful for the damping update's
/// predicted-reduction computation).
#[derive(Debug, Clone)]
pub struct SelectedDirection {
    pub direction: Vector,
    pub tag: CurvatureTag,
    pub curvature: f64,
    /// Operator applications spent during selection: 0 normally, 1 when
    /// the fallback path had to score the solver's direction itself.
    pub operator_applications: usize,
}

/// Picks the best descent direction among a solve's candidates.
///
/// Every candidate is oriented by [`orient_descent`] and scored by the
/// quadratic model without its constant term, m(d̃) = gᵀd̃ + ½·d̃ᵀAd̃ =
/// −|gᵀd| + ½·dᵀAd, using the curvature cached at recording time (no
/// operator applications). The candidate with the smallest model value
/// wins. If the result carries no candidates, its direction is scored
/// directly, costing one operator application for the curvature.
pub fn select_direction(
    result: &KrylovResult,
    g: &Vector,
    a: &CurvatureOperator,
) -> Result<SelectedDirection> {
    let fallback;
    let mut applications = 0;
    let pool: &[Candidate] = if result.candidates.is_empty() {
        if result.direction.is_zero() {
            return Err(Error::DegenerateDirection("select_direction"));
        }
        let ad = a.apply(&result.direction)?;
        applications = 1;
        fallback = [Candidate {
            direction: result.direction.clone(),
            curvature: dot(&result.direction, &ad)?,
        }];
        &fallback
    } else {
        &result.candidates
    };

    let mut best: Option<(f64, &Candidate)> = None;
    for cand in pool {
        if cand.direction.is_zero() {
            continue;
        }
        let gd = dot(g, &cand.direction)?;
        let score = -gd.abs() + 0.5 * cand.curvature;
        if best.as_ref().map_or(true, |(s, _)| score < *s) {
            best = Some((score, cand));
        }
    }
    let (_, chosen) = best.ok_or(Error::DegenerateDirection("select_direction"))?;

    let oriented = orient_descent(g, &chosen.direction)?;
    let norm_sq = dot(&chosen.direction, &chosen.direction)?;
    let tag = if is_negative_curvature(chosen.curvature, norm_sq) {
        CurvatureTag::NegativeCurvature
    } else {
        CurvatureTag::NewtonType
    };
    Ok(SelectedDirection {
        direction: oriented,
        tag,
        curvature: chosen.curvature,
        operator_applications: applications,
    })
}
