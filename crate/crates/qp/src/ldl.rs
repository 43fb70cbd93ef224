//! Sparse LDLᵀ factorization for symmetric quasi-definite systems.
//!
//! Up-looking factorization over the upper triangle in CSC form, preceded by a
//! minimum-degree fill-reducing ordering. The symbolic phase is computed once
//! per sparsity pattern and reused for every numeric refactorization.

use std::collections::BTreeSet;

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LdlError {
    ZeroPivot(usize),
}

/// Fill-reducing ordering and elimination-tree data for one pattern.
#[derive(Debug, Clone)]
pub(crate) struct LdlSymbolic {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    etree: Vec<usize>,
    l_ptr: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct LdlFactor {
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
    d: Vec<f64>,
    d_inv: Vec<f64>,
}

/// Dynamic pivot regularization: pivots whose signed value falls below
/// `threshold` are replaced by `sign * delta`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PivotRegularization {
    pub threshold: f64,
    pub delta: f64,
}

fn minimum_degree(n: usize, entries: &[(usize, usize)]) -> Vec<usize> {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for &(i, j) in entries {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    let mut done = vec![false; n];
    let mut perm = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&k| !done[k])
            .min_by_key(|&k| (adj[k].len(), k))
            .expect("a node remains");
        let nbrs: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &a in &nbrs {
            adj[a].remove(&v);
            for &b in &nbrs {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
        done[v] = true;
        perm.push(v);
    }
    perm
}

impl LdlSymbolic {
    /// Analyses a symmetric pattern given as unique `(i, j)` pairs with
    /// `i <= j` (upper triangle, original indexing). Every diagonal must be
    /// present. Returns the symbolic object and, for each input entry, the
    /// slot it occupies in the permuted value array.
    pub(crate) fn analyse(n: usize, entries: &[(usize, usize)]) -> (Self, Vec<usize>) {
        let perm = minimum_degree(n, entries);
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        // permuted upper-triangular coordinates, column-major
        let mut coords: Vec<(usize, usize, usize)> = entries
            .iter()
            .enumerate()
            .map(|(k, &(i, j))| {
                let (a, b) = (iperm[i], iperm[j]);
                (a.max(b), a.min(b), k)
            })
            .collect();
        coords.sort_unstable();

        let mut col_ptr = vec![0; n + 1];
        let mut row_idx = Vec::with_capacity(coords.len());
        let mut slot = vec![0; entries.len()];
        for (pos, &(col, row, k)) in coords.iter().enumerate() {
            col_ptr[col + 1] += 1;
            row_idx.push(row);
            slot[k] = pos;
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }

        let mut etree = vec![NONE; n];
        let mut l_nz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for &r in &row_idx[col_ptr[j]..col_ptr[j + 1]] {
                let mut i = r;
                while i != NONE && i < j && work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    l_nz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut l_ptr = vec![0; n + 1];
        for i in 0..n {
            l_ptr[i + 1] = l_ptr[i] + l_nz[i];
        }

        (
            Self {
                n,
                perm,
                col_ptr,
                row_idx,
                etree,
                l_ptr,
            },
            slot,
        )
    }

    pub(crate) fn factor_nnz(&self) -> usize {
        self.l_ptr[self.n]
    }

    /// Numeric factorization. `values` is indexed by the slots returned from
    /// [`LdlSymbolic::analyse`]; `signs` gives the expected pivot sign of each
    /// original index (+1 primal, -1 dual).
    pub(crate) fn factor(
        &self,
        values: &[f64],
        signs: &[f64],
        reg: Option<PivotRegularization>,
    ) -> Result<LdlFactor, LdlError> {
        let n = self.n;
        let nnz_l = self.factor_nnz();
        let mut l_idx = vec![0usize; nnz_l];
        let mut l_val = vec![0.0; nnz_l];
        let mut d = vec![0.0; n];
        let mut d_inv = vec![0.0; n];
        let mut next_in_col: Vec<usize> = self.l_ptr[..n].to_vec();
        let mut y_vals = vec![0.0; n];
        let mut y_used = vec![false; n];
        let mut y_idx = Vec::with_capacity(n);
        let mut elim = Vec::with_capacity(n);

        for k in 0..n {
            y_idx.clear();
            d[k] = 0.0;
            for p in self.col_ptr[k]..self.col_ptr[k + 1] {
                let b = self.row_idx[p];
                if b == k {
                    d[k] = values[p];
                    continue;
                }
                y_vals[b] = values[p];
                if !y_used[b] {
                    elim.clear();
                    y_used[b] = true;
                    elim.push(b);
                    let mut next = self.etree[b];
                    while next != NONE && next < k {
                        if y_used[next] {
                            break;
                        }
                        y_used[next] = true;
                        elim.push(next);
                        next = self.etree[next];
                    }
                    while let Some(e) = elim.pop() {
                        y_idx.push(e);
                    }
                }
            }
            for &c in y_idx.iter().rev() {
                let slot = next_in_col[c];
                let yc = y_vals[c];
                for j in self.l_ptr[c]..slot {
                    y_vals[l_idx[j]] -= l_val[j] * yc;
                }
                l_idx[slot] = k;
                l_val[slot] = yc * d_inv[c];
                d[k] -= yc * l_val[slot];
                next_in_col[c] += 1;
                y_vals[c] = 0.0;
                y_used[c] = false;
            }
            let sign = signs[self.perm[k]];
            if let Some(r) = reg {
                if sign * d[k] < r.threshold {
                    d[k] = sign * r.delta;
                }
            }
            if d[k] == 0.0 || !d[k].is_finite() {
                return Err(LdlError::ZeroPivot(self.perm[k]));
            }
            d_inv[k] = 1.0 / d[k];
        }
        Ok(LdlFactor {
            l_idx,
            l_val,
            d,
            d_inv,
        })
    }

    /// Solves `K x = b` in place (original ordering).
    pub(crate) fn solve(&self, f: &LdlFactor, b: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&o| b[o]).collect();
        for i in 0..n {
            let xi = x[i];
            for j in self.l_ptr[i]..self.l_ptr[i + 1] {
                x[f.l_idx[j]] -= f.l_val[j] * xi;
            }
        }
        for i in 0..n {
            x[i] *= f.d_inv[i];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in self.l_ptr[i]..self.l_ptr[i + 1] {
                acc -= f.l_val[j] * x[f.l_idx[j]];
            }
            x[i] = acc;
        }
        for (new, &old) in self.perm.iter().enumerate() {
            b[old] = x[new];
        }
    }
}

impl LdlFactor {
    pub(crate) fn pivots(&self) -> &[f64] {
        &self.d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_mul(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
    }

    fn factor_dense(a: &[Vec<f64>], signs: &[f64]) -> (LdlSymbolic, LdlFactor) {
        let n = a.len();
        let mut entries = Vec::new();
        let mut vals = Vec::new();
        for i in 0..n {
            for j in i..n {
                if a[i][j] != 0.0 || i == j {
                    entries.push((i, j));
                    vals.push(a[i][j]);
                }
            }
        }
        let (sym, slot) = LdlSymbolic::analyse(n, &entries);
        let mut v = vec![0.0; entries.len()];
        for (k, &s) in slot.iter().enumerate() {
            v[s] = vals[k];
        }
        let f = sym.factor(&v, signs, None).unwrap();
        (sym, f)
    }

    #[test]
    fn solves_quasi_definite_system() {
        // [ 4 1 | 1 ]
        // [ 1 3 | 0 ]
        // [ 1 0 |-1 ]
        let a = vec![
            vec![4.0, 1.0, 1.0],
            vec![1.0, 3.0, 0.0],
            vec![1.0, 0.0, -1.0],
        ];
        let (sym, f) = factor_dense(&a, &[1.0, 1.0, -1.0]);
        let x_true = [0.5, -2.0, 3.0];
        let mut b = dense_mul(&a, &x_true);
        sym.solve(&f, &mut b);
        for (x, t) in b.iter().zip(x_true) {
            assert!((x - t).abs() < 1e-12);
        }
    }

    #[test]
    fn arrow_matrix_has_no_fill_after_ordering() {
        // hub node 0 connected to all others; min-degree eliminates leaves first
        let n = 30;
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            a[i][i] = 10.0;
            if i > 0 {
                a[0][i] = 1.0;
                a[i][0] = 1.0;
            }
        }
        let (sym, f) = factor_dense(&a, &vec![1.0; n]);
        assert_eq!(sym.factor_nnz(), n - 1);
        let x_true: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - 1.0).collect();
        let mut b = dense_mul(&a, &x_true);
        sym.solve(&f, &mut b);
        for (x, t) in b.iter().zip(&x_true) {
            assert!((x - t).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_pivot_is_reported() {
        let entries = [(0, 0), (0, 1), (1, 1)];
        let (sym, slot) = LdlSymbolic::analyse(2, &entries);
        let mut v = vec![0.0; 3];
        v[slot[0]] = 1.0;
        v[slot[1]] = 1.0;
        v[slot[2]] = 1.0;
        assert!(sym.factor(&v, &[1.0, 1.0], None).is_err());
    }
}
