//! Optimality certificate recomputed from raw problem data.
//!
//! Nothing here touches solver internals: residuals are evaluated from
//! `(P, q, A, b, G, l, u)` and a candidate `(x, y, z)` only.

use crate::problem::QpProblem;
use crate::solver::QpSolution;
use crate::sparse::{dot, norm_inf};

/// The four first-order optimality residuals (∞-norms).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Residuals {
    /// `‖Px + q + Aᵀy + Gᵀz‖`
    pub stationarity: f64,
    /// equality residual and bound violations of `Gx`
    pub primal: f64,
    /// multiplier sign violations on rows without the matching bound
    pub dual: f64,
    /// largest `z·(bound − Gx)` over active sides
    pub complementarity: f64,
}

impl Residuals {
    pub fn is_finite(&self) -> bool {
        [self.stationarity, self.primal, self.dual, self.complementarity]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub absolute: Residuals,
    /// residuals scaled by the magnitudes of the terms that produce them
    pub relative: Residuals,
    /// `|primal objective − Lagrangian dual value| / (1 + |primal objective|)`
    pub duality_gap: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Evaluates the KKT conditions of `solution` against `problem`.
pub fn check_kkt(problem: &QpProblem, solution: &QpSolution, tol: f64) -> KktReport {
    kkt_residuals(problem, &solution.x, &solution.y, &solution.z, tol)
}

/// Convention: `z_i > 0` prices the upper bound of row `i`, `z_i < 0` the
/// lower bound, so stationarity reads `Px + q + Aᵀy + Gᵀz = 0`.
pub fn kkt_residuals(problem: &QpProblem, x: &[f64], y: &[f64], z: &[f64], tol: f64) -> KktReport {
    let px = problem.p.mul_vec(x);
    let aty = problem.a.tr_mul_vec(y);
    let gtz = problem.g.tr_mul_vec(z);
    let ax = problem.a.mul_vec(x);
    let gx = problem.g.mul_vec(x);

    let stat: Vec<f64> = (0..x.len())
        .map(|i| px[i] + problem.q[i] + aty[i] + gtz[i])
        .collect();
    let stationarity = norm_inf(&stat);

    let eq_res = ax
        .iter()
        .zip(&problem.b)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let mut bound_viol = 0.0f64;
    let mut dual = 0.0f64;
    let mut compl = 0.0f64;
    let mut bound_scale = 0.0f64;
    let mut dual_bound_terms = 0.0;
    for i in 0..gx.len() {
        let (l, u, g, zi) = (problem.lower[i], problem.upper[i], gx[i], z[i]);
        if l.is_finite() {
            bound_viol = bound_viol.max(l - g);
            bound_scale = bound_scale.max(l.abs());
        }
        if u.is_finite() {
            bound_viol = bound_viol.max(g - u);
            bound_scale = bound_scale.max(u.abs());
        }
        if zi > 0.0 {
            if u.is_finite() {
                compl = compl.max(zi * (u - g).abs());
                dual_bound_terms += u * zi;
            } else {
                dual = dual.max(zi);
            }
        } else if zi < 0.0 {
            if l.is_finite() {
                compl = compl.max(-zi * (g - l).abs());
                dual_bound_terms += l * zi;
            } else {
                dual = dual.max(-zi);
            }
        }
    }
    let primal = eq_res.max(bound_viol);

    let pobj = 0.5 * dot(x, &px) + dot(&problem.q, x) + problem.offset;
    let dobj = -0.5 * dot(x, &px) - dot(&problem.b, y) - dual_bound_terms + problem.offset;
    let duality_gap = if dual > 0.0 {
        f64::INFINITY
    } else {
        (pobj - dobj).abs() / (1.0 + pobj.abs())
    };

    let absolute = Residuals {
        stationarity,
        primal,
        dual,
        complementarity: compl,
    };
    let stat_scale = 1.0
        + norm_inf(&px)
            .max(norm_inf(&problem.q))
            .max(norm_inf(&aty))
            .max(norm_inf(&gtz));
    let primal_scale = 1.0
        + norm_inf(&ax)
            .max(norm_inf(&problem.b))
            .max(norm_inf(&gx))
            .max(bound_scale);
    let relative = Residuals {
        stationarity: stationarity / stat_scale,
        primal: primal / primal_scale,
        dual: dual / (1.0 + norm_inf(z)),
        complementarity: compl / (1.0 + pobj.abs()),
    };
    KktReport {
        absolute,
        relative,
        duality_gap,
        tol,
        passed: relative.is_finite() && relative.max() <= tol,
    }
}
