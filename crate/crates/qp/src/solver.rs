//! Primal-dual interior-point method (Mehrotra predictor-corrector).
//!
//! Ranged rows `l ≤ Gx ≤ u` are split into one-sided rows `Cx + s = h`,
//! `s ≥ 0`; rows with `l = u` become equalities. Each iteration factors the
//! reduced quasi-definite system
//!
//! ```text
//! [ P + CᵀWC + δI    Aᵀ ] [dx]   [r1]
//! [ A               -δI ] [dy] = [r2]
//! ```
//!
//! with `W = S⁻¹Z`, and removes the regularization by iterative refinement
//! against the unregularized operator.

use std::collections::BTreeMap;

use crate::kkt::{kkt_residuals, KktReport};
use crate::ldl::{LdlFactor, LdlSymbolic, PivotRegularization};
use crate::problem::QpProblem;
use crate::sparse::{dot, norm_inf, SparseMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Relative KKT tolerance the returned point must certify.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Farkas-style evidence that the constraint set is empty: multipliers with
/// `Aᵀy + Gᵀz ≈ 0` and a strictly negative dual bound value.
#[derive(Debug, Clone, PartialEq)]
pub struct InfeasibilityCertificate {
    /// Inequality rows carrying a significant multiplier, with that multiplier
    /// normalized to unit ∞-norm.
    pub rows: Vec<(usize, f64)>,
    /// Equality rows carrying a significant multiplier.
    pub eq_rows: Vec<(usize, f64)>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// equality multipliers
    pub y: Vec<f64>,
    /// inequality multipliers (positive: upper bound active, negative: lower)
    pub z: Vec<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt: KktReport,
    pub certificate: Option<InfeasibilityCertificate>,
}

/// Optional starting point for [`solve_warm`].
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub y: Option<Vec<f64>>,
    pub z: Option<Vec<f64>>,
}

impl From<&QpSolution> for WarmStart {
    fn from(s: &QpSolution) -> Self {
        Self {
            x: s.x.clone(),
            y: Some(s.y.clone()),
            z: Some(s.z.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum EqSource {
    Eq(usize),
    Fixed(usize),
}

/// Problem rewritten into the internal standard form.
struct Standard<'a> {
    qp: &'a QpProblem,
    n: usize,
    a: SparseMatrix,
    b: Vec<f64>,
    eq_src: Vec<EqSource>,
    c: SparseMatrix,
    h: Vec<f64>,
    /// originating G row and side (+1 upper, -1 lower) of each C row
    c_src: Vec<(usize, f64)>,
}

impl<'a> Standard<'a> {
    fn new(qp: &'a QpProblem) -> Result<Self, InfeasibilityCertificate> {
        let n = qp.num_vars();
        let mut a_trip = Vec::new();
        let mut b = Vec::new();
        let mut eq_src = Vec::new();
        for r in 0..qp.num_eq() {
            a_trip.extend(qp.a.row(r).map(|(c, v)| (b.len(), c, v)));
            b.push(qp.b[r]);
            eq_src.push(EqSource::Eq(r));
        }
        let mut c_trip = Vec::new();
        let mut h = Vec::new();
        let mut c_src = Vec::new();
        for r in 0..qp.num_ineq() {
            let (l, u) = (qp.lower[r], qp.upper[r]);
            if l > u {
                return Err(InfeasibilityCertificate {
                    rows: vec![(r, 1.0)],
                    eq_rows: vec![],
                    description: format!("row {r} has lower bound {l} above upper bound {u}"),
                });
            }
            if l == u {
                a_trip.extend(qp.g.row(r).map(|(c, v)| (b.len(), c, v)));
                b.push(l);
                eq_src.push(EqSource::Fixed(r));
                continue;
            }
            if u.is_finite() {
                c_trip.extend(qp.g.row(r).map(|(c, v)| (h.len(), c, v)));
                h.push(u);
                c_src.push((r, 1.0));
            }
            if l.is_finite() {
                c_trip.extend(qp.g.row(r).map(|(c, v)| (h.len(), c, -v)));
                h.push(-l);
                c_src.push((r, -1.0));
            }
        }
        let a = SparseMatrix::from_triplets(b.len(), n, &a_trip).expect("rows copied in bounds");
        let c = SparseMatrix::from_triplets(h.len(), n, &c_trip).expect("rows copied in bounds");
        Ok(Self {
            qp,
            n,
            a,
            b,
            eq_src,
            c,
            h,
            c_src,
        })
    }

    fn p_eq(&self) -> usize {
        self.b.len()
    }

    fn m(&self) -> usize {
        self.h.len()
    }

    /// Maps internal multipliers back to the caller's row numbering.
    fn output_duals(&self, y_int: &[f64], z_int: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut y = vec![0.0; self.qp.num_eq()];
        let mut z = vec![0.0; self.qp.num_ineq()];
        for (k, src) in self.eq_src.iter().enumerate() {
            match *src {
                EqSource::Eq(r) => y[r] = y_int[k],
                EqSource::Fixed(r) => z[r] = y_int[k],
            }
        }
        for (k, &(r, side)) in self.c_src.iter().enumerate() {
            z[r] += side * z_int[k];
        }
        (y, z)
    }
}

/// Reduced KKT system with a fixed sparsity pattern.
struct KktSystem {
    sym: LdlSymbolic,
    slot: Vec<usize>,
    static_vals: Vec<f64>,
    /// `(entry, G-row group, c_i c_j)` contributions of `CᵀWC`
    terms: Vec<(usize, usize, f64)>,
    /// G-row group of every C row
    c_group: Vec<usize>,
    n_groups: usize,
    signs: Vec<f64>,
}

const PRIMAL_REG: f64 = 1e-9;
const DUAL_REG: f64 = 1e-9;

impl KktSystem {
    fn new(std: &Standard) -> Self {
        let n = std.n;
        let p_eq = std.p_eq();
        let dim = n + p_eq;
        let mut index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut static_vals: Vec<f64> = Vec::new();
        let mut entry = |i: usize, j: usize, v: f64, vals: &mut Vec<f64>| -> usize {
            let key = (i.min(j), i.max(j));
            let next = index.len();
            let e = *index.entry(key).or_insert(next);
            if e == vals.len() {
                vals.push(0.0);
            }
            vals[e] += v;
            e
        };
        for i in 0..dim {
            let reg = if i < n { PRIMAL_REG } else { -DUAL_REG };
            entry(i, i, reg, &mut static_vals);
        }
        for (r, c, v) in std.qp.p.triplets() {
            if r <= c {
                entry(r, c, v, &mut static_vals);
            }
        }
        for r in 0..p_eq {
            for (c, v) in std.a.row(r) {
                entry(c, n + r, v, &mut static_vals);
            }
        }

        // C rows sharing a G row have identical patterns: group them.
        let mut group_of_g: BTreeMap<usize, usize> = BTreeMap::new();
        let mut c_group = Vec::with_capacity(std.m());
        let mut terms = Vec::new();
        for (k, &(g_row, _)) in std.c_src.iter().enumerate() {
            let next = group_of_g.len();
            let grp = *group_of_g.entry(g_row).or_insert(next);
            c_group.push(grp);
            if grp == next {
                let cols: Vec<(usize, f64)> = std.c.row(k).collect();
                for (ai, &(ci, vi)) in cols.iter().enumerate() {
                    for &(cj, vj) in &cols[ai..] {
                        let e = entry(ci, cj, 0.0, &mut static_vals);
                        terms.push((e, grp, vi * vj));
                    }
                }
            }
        }
        let n_groups = group_of_g.len();

        let mut entries = vec![(0, 0); index.len()];
        for (&key, &e) in &index {
            entries[e] = key;
        }
        let (sym, slot) = LdlSymbolic::analyse(dim, &entries);
        let signs = (0..dim).map(|i| if i < n { 1.0 } else { -1.0 }).collect();
        Self {
            sym,
            slot,
            static_vals,
            terms,
            c_group,
            n_groups,
            signs,
        }
    }

    fn factor(&self, w: &[f64]) -> Option<LdlFactor> {
        let mut group_w = vec![0.0; self.n_groups];
        for (k, &g) in self.c_group.iter().enumerate() {
            group_w[g] += w[k];
        }
        let mut vals = self.static_vals.clone();
        for &(e, g, coef) in &self.terms {
            vals[e] += group_w[g] * coef;
        }
        let mut perm_vals = vec![0.0; vals.len()];
        for (e, &s) in self.slot.iter().enumerate() {
            perm_vals[s] = vals[e];
        }
        let reg = PivotRegularization {
            threshold: 1e-13,
            delta: 1e-7,
        };
        self.sym.factor(&perm_vals, &self.signs, Some(reg)).ok()
    }
}

/// Applies the unregularized reduced operator.
fn apply_operator(std: &Standard, w: &[f64], v: &[f64]) -> Vec<f64> {
    let n = std.n;
    let (vx, vy) = v.split_at(n);
    let mut top = std.qp.p.mul_vec(vx);
    let cv: Vec<f64> = std.c.mul_vec(vx).iter().zip(w).map(|(c, w)| c * w).collect();
    let ctwcv = std.c.tr_mul_vec(&cv);
    let aty = std.a.tr_mul_vec(vy);
    for i in 0..n {
        top[i] += ctwcv[i] + aty[i];
    }
    top.extend(std.a.mul_vec(vx));
    top
}

fn solve_refined(std: &Standard, kkt: &KktSystem, f: &LdlFactor, w: &[f64], rhs: &[f64]) -> Vec<f64> {
    let mut sol = rhs.to_vec();
    kkt.sym.solve(f, &mut sol);
    let scale = 1.0 + norm_inf(rhs);
    let residual = |sol: &[f64]| -> Vec<f64> {
        let kv = apply_operator(std, w, sol);
        rhs.iter().zip(&kv).map(|(r, k)| r - k).collect()
    };
    let mut res = residual(&sol);
    let mut res_norm = norm_inf(&res);
    for _ in 0..8 {
        if !(res_norm > 1e-13 * scale) {
            break;
        }
        kkt.sym.solve(f, &mut res);
        let trial: Vec<f64> = sol.iter().zip(&res).map(|(s, d)| s + d).collect();
        let trial_res = residual(&trial);
        let trial_norm = norm_inf(&trial_res);
        // refinement only helps while the regularized factor is close enough
        if !(trial_norm < res_norm) {
            break;
        }
        sol = trial;
        res = trial_res;
        res_norm = trial_norm;
    }
    sol
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, &d)| d < 0.0)
        .map(|(&x, &d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    ds: Vec<f64>,
    dz: Vec<f64>,
}

struct Iterate {
    x: Vec<f64>,
    y: Vec<f64>,
    s: Vec<f64>,
    z: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn direction(
    std: &Standard,
    kkt: &KktSystem,
    f: &LdlFactor,
    it: &Iterate,
    w: &[f64],
    r_d: &[f64],
    r_p: &[f64],
    r_c: &[f64],
    r_sz: &[f64],
) -> Direction {
    let n = std.n;
    let m = std.m();
    // dz = W C dx + (r_sz + Z r_c) / S
    let t: Vec<f64> = (0..m).map(|i| (r_sz[i] + it.z[i] * r_c[i]) / it.s[i]).collect();
    let ct = std.c.tr_mul_vec(&t);
    let mut rhs: Vec<f64> = (0..n).map(|i| -r_d[i] - ct[i]).collect();
    rhs.extend(r_p.iter().map(|v| -v));
    let sol = solve_refined(std, kkt, f, w, &rhs);
    let dx = sol[..n].to_vec();
    let dy = sol[n..].to_vec();
    let cdx = std.c.mul_vec(&dx);
    let ds: Vec<f64> = (0..m).map(|i| -r_c[i] - cdx[i]).collect();
    let dz: Vec<f64> = (0..m).map(|i| (r_sz[i] - it.z[i] * ds[i]) / it.s[i]).collect();
    Direction { dx, dy, ds, dz }
}

fn initial_point(std: &Standard, kkt: &KktSystem, warm: Option<&WarmStart>) -> Option<Iterate> {
    let n = std.n;
    let m = std.m();
    let p_eq = std.p_eq();
    if let Some(ws) = warm.filter(|ws| ws.x.len() == n) {
        let x = ws.x.clone();
        let cx = std.c.mul_vec(&x);
        let s: Vec<f64> = (0..m).map(|i| (std.h[i] - cx[i]).max(1.0)).collect();
        let z = vec![1.0; m];
        let y = vec![0.0; p_eq];
        return Some(Iterate { x, y, s, z });
    }

    let ones = vec![1.0; m];
    let f = kkt.factor(&ones)?;
    let cth = std.c.tr_mul_vec(&std.h);
    let mut rhs: Vec<f64> = (0..n).map(|i| -std.qp.q[i] + cth[i]).collect();
    rhs.extend_from_slice(&std.b);
    let sol = solve_refined(std, kkt, &f, &ones, &rhs);
    let x = sol[..n].to_vec();
    let y = sol[n..].to_vec();
    let cx = std.c.mul_vec(&x);
    let mut s: Vec<f64> = (0..m).map(|i| std.h[i] - cx[i]).collect();
    let mut z: Vec<f64> = s.iter().map(|v| -v).collect();
    for v in [&mut s, &mut z] {
        let shift = -v.iter().cloned().fold(f64::INFINITY, f64::min);
        if m > 0 && shift >= 0.0 {
            v.iter_mut().for_each(|e| *e += 1.0 + shift);
        }
    }
    Some(Iterate { x, y, s, z })
}

/// Significant rows of a normalized multiplier vector.
fn significant(v: &[f64]) -> Vec<(usize, f64)> {
    let scale = norm_inf(v);
    if scale == 0.0 {
        return vec![];
    }
    v.iter()
        .enumerate()
        .filter(|(_, x)| x.abs() > 1e-6 * scale)
        .map(|(i, x)| (i, x / scale))
        .collect()
}

fn detect_infeasibility(std: &Standard, it: &Iterate) -> Option<InfeasibilityCertificate> {
    let scale = norm_inf(&it.y).max(norm_inf(&it.z));
    if scale < 1e6 {
        return None;
    }
    let yn: Vec<f64> = it.y.iter().map(|v| v / scale).collect();
    let zn: Vec<f64> = it.z.iter().map(|v| v / scale).collect();
    let bound_value = dot(&std.b, &yn) + dot(&std.h, &zn);
    if bound_value >= -1e-8 {
        return None;
    }
    let aty = std.a.tr_mul_vec(&yn);
    let ctz = std.c.tr_mul_vec(&zn);
    let ray = aty.iter().zip(&ctz).fold(0.0f64, |m, (a, c)| m.max((a + c).abs()));
    if ray > 1e-6 * bound_value.abs() {
        return None;
    }
    let (y, z) = std.output_duals(&yn, &zn);
    Some(InfeasibilityCertificate {
        rows: significant(&z),
        eq_rows: significant(&y),
        description: format!(
            "multipliers with |Aᵀy + Gᵀz| = {ray:.2e} and bound value {bound_value:.3e} < 0"
        ),
    })
}

/// Solves `problem` from a cold start.
pub fn solve(problem: &QpProblem, settings: &SolverSettings) -> QpSolution {
    solve_impl(problem, settings, None)
}

/// Solves `problem` starting from `warm`.
pub fn solve_warm(problem: &QpProblem, settings: &SolverSettings, warm: &WarmStart) -> QpSolution {
    solve_impl(problem, settings, Some(warm))
}

fn finish(
    problem: &QpProblem,
    std: &Standard,
    it: &Iterate,
    status: QpStatus,
    iterations: usize,
    tol: f64,
    certificate: Option<InfeasibilityCertificate>,
) -> QpSolution {
    let (y, z) = std.output_duals(&it.y, &it.z);
    let kkt = kkt_residuals(problem, &it.x, &y, &z, tol);
    QpSolution {
        objective: problem.objective(&it.x),
        x: it.x.clone(),
        y,
        z,
        status,
        iterations,
        kkt,
        certificate,
    }
}

fn solve_impl(problem: &QpProblem, settings: &SolverSettings, warm: Option<&WarmStart>) -> QpSolution {
    let n = problem.num_vars();
    let std = match Standard::new(problem) {
        Ok(s) => s,
        Err(cert) => {
            let it = Iterate {
                x: vec![0.0; n],
                y: vec![0.0; problem.num_eq()],
                s: vec![],
                z: vec![],
            };
            let mut sol = QpSolution {
                x: it.x.clone(),
                y: it.y.clone(),
                z: vec![0.0; problem.num_ineq()],
                objective: problem.objective(&it.x),
                status: QpStatus::Infeasible,
                iterations: 0,
                kkt: kkt_residuals(problem, &it.x, &it.y, &vec![0.0; problem.num_ineq()], settings.tol),
                certificate: Some(cert),
            };
            sol.kkt.passed = false;
            return sol;
        }
    };
    let m = std.m();
    let kkt = KktSystem::new(&std);
    let mut it = match initial_point(&std, &kkt, warm) {
        Some(it) => it,
        None => {
            let it = Iterate {
                x: vec![0.0; n],
                y: vec![0.0; std.p_eq()],
                s: vec![1.0; m],
                z: vec![1.0; m],
            };
            return finish(problem, &std, &it, QpStatus::MaxIter, 0, settings.tol, None);
        }
    };

    for iter in 0..=settings.max_iter {
        // early exit is judged by the same certificate callers will see
        let (y_out, z_out) = std.output_duals(&it.y, &it.z);
        let report = kkt_residuals(problem, &it.x, &y_out, &z_out, settings.tol);
        if report.passed {
            return finish(problem, &std, &it, QpStatus::Optimal, iter, settings.tol, None);
        }
        if let Some(cert) = detect_infeasibility(&std, &it) {
            return finish(problem, &std, &it, QpStatus::Infeasible, iter, settings.tol, Some(cert));
        }
        if iter == settings.max_iter {
            break;
        }

        let px = problem.p.mul_vec(&it.x);
        let aty = std.a.tr_mul_vec(&it.y);
        let ctz = std.c.tr_mul_vec(&it.z);
        let r_d: Vec<f64> = (0..n).map(|i| px[i] + problem.q[i] + aty[i] + ctz[i]).collect();
        let ax = std.a.mul_vec(&it.x);
        let r_p: Vec<f64> = ax.iter().zip(&std.b).map(|(a, b)| a - b).collect();
        let cx = std.c.mul_vec(&it.x);
        let r_c: Vec<f64> = (0..m).map(|i| cx[i] + it.s[i] - std.h[i]).collect();
        let mu = if m > 0 { dot(&it.s, &it.z) / m as f64 } else { 0.0 };

        let w: Vec<f64> = (0..m).map(|i| it.z[i] / it.s[i]).collect();
        let Some(f) = kkt.factor(&w) else {
            break;
        };

        // predictor
        let r_sz: Vec<f64> = (0..m).map(|i| -it.s[i] * it.z[i]).collect();
        let aff = direction(&std, &kkt, &f, &it, &w, &r_d, &r_p, &r_c, &r_sz);
        let alpha_aff = max_step(&it.s, &aff.ds).min(max_step(&it.z, &aff.dz)).min(1.0);
        let sigma = if m > 0 && mu > 0.0 {
            let mu_aff = (0..m)
                .map(|i| (it.s[i] + alpha_aff * aff.ds[i]) * (it.z[i] + alpha_aff * aff.dz[i]))
                .sum::<f64>()
                / m as f64;
            (mu_aff / mu).powi(3).clamp(0.0, 1.0)
        } else {
            0.0
        };

        // corrector
        let r_sz: Vec<f64> = (0..m)
            .map(|i| -it.s[i] * it.z[i] - aff.ds[i] * aff.dz[i] + sigma * mu)
            .collect();
        let d = direction(&std, &kkt, &f, &it, &w, &r_d, &r_p, &r_c, &r_sz);
        if !d.dx.iter().chain(&d.dz).chain(&d.ds).all(|v| v.is_finite()) {
            break;
        }
        let alpha = (0.99 * max_step(&it.s, &d.ds).min(max_step(&it.z, &d.dz))).min(1.0);

        for i in 0..n {
            it.x[i] += alpha * d.dx[i];
        }
        for (v, dv) in it.y.iter_mut().zip(&d.dy) {
            *v += alpha * dv;
        }
        for i in 0..m {
            it.s[i] = (it.s[i] + alpha * d.ds[i]).max(1e-300);
            it.z[i] = (it.z[i] + alpha * d.dz[i]).max(1e-300);
        }
    }
    finish(problem, &std, &it, QpStatus::MaxIter, settings.max_iter, settings.tol, None)
}
