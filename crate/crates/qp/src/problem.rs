use crate::ldl::LdlSymbolic;
use crate::sparse::SparseMatrix;
use crate::QpError;

/// Largest variable count accepted; beyond this the dense-free path is still
/// sparse but the minimum-degree ordering becomes the bottleneck.
pub const MAX_VARIABLES: usize = 5000;

/// Convex quadratic program
///
/// ```text
/// minimize    ½ xᵀ P x + qᵀ x + offset
/// subject to  A x = b
///             l ≤ G x ≤ u
/// ```
///
/// `P` is stored in full symmetric form. Infinite entries of `l`/`u` mark
/// one-sided or free rows.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub(crate) p: SparseMatrix,
    pub(crate) q: Vec<f64>,
    pub(crate) offset: f64,
    pub(crate) a: SparseMatrix,
    pub(crate) b: Vec<f64>,
    pub(crate) g: SparseMatrix,
    pub(crate) lower: Vec<f64>,
    pub(crate) upper: Vec<f64>,
}

/// Triplet-based description of a [`QpProblem`] before validation.
#[derive(Debug, Clone, Default)]
pub struct QpBuilder {
    pub n: usize,
    pub p: Vec<(usize, usize, f64)>,
    pub q: Vec<f64>,
    pub offset: f64,
    pub a: Vec<(usize, usize, f64)>,
    pub b: Vec<f64>,
    pub g: Vec<(usize, usize, f64)>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QpBuilder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            q: vec![0.0; n],
            ..Default::default()
        }
    }

    /// Appends an equality row `Σ coef·x = rhs` and returns its index.
    pub fn add_eq(&mut self, coefs: &[(usize, f64)], rhs: f64) -> usize {
        let row = self.b.len();
        self.a.extend(coefs.iter().map(|&(c, v)| (row, c, v)));
        self.b.push(rhs);
        row
    }

    /// Appends a ranged row `lo ≤ Σ coef·x ≤ hi` and returns its index.
    pub fn add_range(&mut self, coefs: &[(usize, f64)], lo: f64, hi: f64) -> usize {
        let row = self.lower.len();
        self.g.extend(coefs.iter().map(|&(c, v)| (row, c, v)));
        self.lower.push(lo);
        self.upper.push(hi);
        row
    }

    pub fn build(self) -> Result<QpProblem, QpError> {
        let p = SparseMatrix::from_triplets(self.n, self.n, &self.p)?;
        let a = SparseMatrix::from_triplets(self.b.len(), self.n, &self.a)?;
        let g = SparseMatrix::from_triplets(self.lower.len(), self.n, &self.g)?;
        QpProblem::new(p, self.q, self.offset, a, self.b, g, self.lower, self.upper)
    }
}

impl QpProblem {
    /// Validates dimensions, symmetrizes `P` and probes it for positive
    /// semidefiniteness.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: SparseMatrix,
        q: Vec<f64>,
        offset: f64,
        a: SparseMatrix,
        b: Vec<f64>,
        g: SparseMatrix,
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Result<Self, QpError> {
        let n = q.len();
        if n > MAX_VARIABLES {
            return Err(QpError::DimensionMismatch(format!(
                "{n} variables exceeds the supported maximum of {MAX_VARIABLES}"
            )));
        }
        if p.nrows() != n || p.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "P is {}x{}, expected {n}x{n}",
                p.nrows(),
                p.ncols()
            )));
        }
        if a.ncols() != n || a.nrows() != b.len() {
            return Err(QpError::DimensionMismatch(format!(
                "A is {}x{} with {} right-hand sides, expected ?x{n}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        if g.ncols() != n || g.nrows() != lower.len() || g.nrows() != upper.len() {
            return Err(QpError::DimensionMismatch(format!(
                "G is {}x{} with {} lower / {} upper bounds",
                g.nrows(),
                g.ncols(),
                lower.len(),
                upper.len()
            )));
        }
        if let Some(v) = q.iter().chain(&b).find(|v| !v.is_finite()) {
            return Err(QpError::NonFinite(format!("cost or rhs value {v}")));
        }
        if let Some(v) = lower.iter().chain(&upper).find(|v| v.is_nan()) {
            return Err(QpError::NonFinite(format!("bound {v}")));
        }
        if !offset.is_finite() {
            return Err(QpError::NonFinite(format!("offset {offset}")));
        }

        let mut sym: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * p.nnz());
        for (r, c, v) in p.triplets() {
            sym.push((r, c, 0.5 * v));
            sym.push((c, r, 0.5 * v));
        }
        let p = SparseMatrix::from_triplets(n, n, &sym)?;
        check_psd(&p)?;

        Ok(Self {
            p,
            q,
            offset,
            a,
            b,
            g,
            lower,
            upper,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_eq(&self) -> usize {
        self.b.len()
    }

    pub fn num_ineq(&self) -> usize {
        self.lower.len()
    }

    pub fn cost_matrix(&self) -> &SparseMatrix {
        &self.p
    }

    pub fn linear_cost(&self) -> &[f64] {
        &self.q
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn eq_matrix(&self) -> &SparseMatrix {
        &self.a
    }

    pub fn eq_rhs(&self) -> &[f64] {
        &self.b
    }

    pub fn ineq_matrix(&self) -> &SparseMatrix {
        &self.g
    }

    pub fn ineq_lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn ineq_upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let px = self.p.mul_vec(x);
        0.5 * crate::sparse::dot(x, &px) + crate::sparse::dot(&self.q, x) + self.offset
    }

    /// Same problem with the cost (including offset) multiplied by `s > 0`.
    pub fn with_scaled_cost(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.p = self.p.scaled(s);
        out.q.iter_mut().for_each(|v| *v *= s);
        out.offset *= s;
        out
    }
}

/// Cholesky-with-shift probe: `P + εI` must factor with positive pivots.
fn check_psd(p: &SparseMatrix) -> Result<(), QpError> {
    let n = p.nrows();
    if n == 0 {
        return Ok(());
    }
    let shift = 1e-9 * p.max_abs().max(1.0);
    let mut entries = Vec::with_capacity(p.nnz() / 2 + n);
    let mut values = Vec::with_capacity(entries.capacity());
    let mut diag_seen = vec![false; n];
    for (r, c, v) in p.triplets() {
        if r <= c {
            let add = if r == c {
                diag_seen[r] = true;
                shift
            } else {
                0.0
            };
            entries.push((r, c));
            values.push(v + add);
        }
    }
    for (i, seen) in diag_seen.iter().enumerate() {
        if !seen {
            entries.push((i, i));
            values.push(shift);
        }
    }
    let (sym, slot) = LdlSymbolic::analyse(n, &entries);
    let mut vals = vec![0.0; entries.len()];
    for (k, &s) in slot.iter().enumerate() {
        vals[s] = values[k];
    }
    let signs = vec![1.0; n];
    match sym.factor(&vals, &signs, None) {
        Ok(f) if f.pivots().iter().all(|&d| d > 0.0) => Ok(()),
        Ok(f) => {
            let worst = f.pivots().iter().cloned().fold(f64::INFINITY, f64::min);
            Err(QpError::NonConvex(format!(
                "cost matrix has a non-positive pivot {worst:e} after shift {shift:e}"
            )))
        }
        Err(_) => Err(QpError::NonConvex("cost matrix factorization broke down".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn asymmetric_cost_is_symmetrized() {
        let mut b = QpBuilder::new(2);
        b.p = vec![(0, 0, 2.0), (0, 1, 2.0), (1, 1, 2.0)];
        let qp = b.build().unwrap();
        assert!(qp.cost_matrix().is_symmetric(0.0));
        assert_eq!(qp.cost_matrix().mul_vec(&[1.0, 0.0]), vec![2.0, 1.0]);
    }

    #[test]
    fn indefinite_cost_rejected() {
        let mut b = QpBuilder::new(2);
        b.p = vec![(0, 0, 1.0), (1, 1, -1.0)];
        assert!(matches!(b.build(), Err(QpError::NonConvex(_))));
    }

    #[test]
    fn semidefinite_cost_accepted() {
        let mut b = QpBuilder::new(3);
        b.p = vec![(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)];
        assert!(b.build().is_ok());
    }

    #[test]
    fn dimension_mismatch_reported() {
        let p = SparseMatrix::zeros(2, 2);
        let a = SparseMatrix::zeros(1, 3);
        let g = SparseMatrix::zeros(0, 3);
        let err = QpProblem::new(p, vec![0.0; 3], 0.0, a, vec![0.0], g, vec![], vec![]);
        assert!(matches!(err, Err(QpError::DimensionMismatch(_))));
    }
}
