//! Plain-text matrix format for dumping and reloading problems.
//!
//! ```text
//! qp 1
//! n <vars>
//! offset <value>
//! P <nnz>            followed by <nnz> lines "row col value"
//! q                  followed by <vars> lines
//! A <rows> <nnz>     followed by <nnz> triplet lines
//! b                  followed by <rows> lines
//! G <rows> <nnz>     followed by <nnz> triplet lines
//! l                  followed by <rows> lines ("inf"/"-inf" allowed)
//! u                  followed by <rows> lines
//! end
//! ```
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a
//! dump/load cycle reproduces the problem bit for bit. Lines starting with
//! `#` are comments.

use std::fmt::Write as _;

use crate::problem::QpProblem;
use crate::sparse::SparseMatrix;
use crate::QpError;

pub const FORMAT_VERSION: u32 = 1;

fn write_triplets(out: &mut String, m: &SparseMatrix) {
    for (r, c, v) in m.triplets() {
        let _ = writeln!(out, "{r} {c} {v}");
    }
}

fn write_vec(out: &mut String, v: &[f64]) {
    for x in v {
        let _ = writeln!(out, "{x}");
    }
}

pub fn dump(problem: &QpProblem) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "qp {FORMAT_VERSION}");
    let _ = writeln!(out, "n {}", problem.num_vars());
    let _ = writeln!(out, "offset {}", problem.offset());
    let _ = writeln!(out, "P {}", problem.cost_matrix().nnz());
    write_triplets(&mut out, problem.cost_matrix());
    out.push_str("q\n");
    write_vec(&mut out, problem.linear_cost());
    let _ = writeln!(out, "A {} {}", problem.num_eq(), problem.eq_matrix().nnz());
    write_triplets(&mut out, problem.eq_matrix());
    out.push_str("b\n");
    write_vec(&mut out, problem.eq_rhs());
    let _ = writeln!(out, "G {} {}", problem.num_ineq(), problem.ineq_matrix().nnz());
    write_triplets(&mut out, problem.ineq_matrix());
    out.push_str("l\n");
    write_vec(&mut out, problem.ineq_lower());
    out.push_str("u\n");
    write_vec(&mut out, problem.ineq_upper());
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<&'a str, QpError> {
        for (i, line) in self.inner.by_ref() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            self.last = i + 1;
            return Ok(t);
        }
        Err(QpError::Parse {
            line: self.last + 1,
            message: "unexpected end of input".into(),
        })
    }

    fn err(&self, message: impl Into<String>) -> QpError {
        QpError::Parse {
            line: self.last,
            message: message.into(),
        }
    }

    fn header(&mut self, key: &str, nums: usize) -> Result<Vec<usize>, QpError> {
        let line = self.next_line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.err(format!("expected section '{key}', found '{line}'")));
        }
        let vals: Result<Vec<usize>, _> = parts.map(str::parse::<usize>).collect();
        match vals {
            Ok(v) if v.len() == nums => Ok(v),
            _ => Err(self.err(format!("malformed '{key}' header: '{line}'"))),
        }
    }

    fn float(&mut self) -> Result<f64, QpError> {
        let line = self.next_line()?;
        line.parse::<f64>()
            .map_err(|_| self.err(format!("expected a number, found '{line}'")))
    }

    fn floats(&mut self, count: usize) -> Result<Vec<f64>, QpError> {
        (0..count).map(|_| self.float()).collect()
    }

    fn triplets(&mut self, count: usize) -> Result<Vec<(usize, usize, f64)>, QpError> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let line = self.next_line()?;
            let p: Vec<&str> = line.split_whitespace().collect();
            let parsed = match p.as_slice() {
                [r, c, v] => match (r.parse(), c.parse(), v.parse()) {
                    (Ok(r), Ok(c), Ok(v)) => Some((r, c, v)),
                    _ => None,
                },
                _ => None,
            };
            out.push(parsed.ok_or_else(|| self.err(format!("malformed triplet '{line}'")))?);
        }
        Ok(out)
    }
}

pub fn load(text: &str) -> Result<QpProblem, QpError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let version = lines.header("qp", 1)?[0];
    if version as u32 != FORMAT_VERSION {
        return Err(lines.err(format!("unsupported format version {version}")));
    }
    let n = lines.header("n", 1)?[0];
    let offset_line = lines.next_line()?;
    let offset = offset_line
        .strip_prefix("offset")
        .and_then(|v| v.trim().parse::<f64>().ok())
        .ok_or_else(|| lines.err(format!("expected 'offset <value>', found '{offset_line}'")))?;
    let p_nnz = lines.header("P", 1)?[0];
    let p = lines.triplets(p_nnz)?;
    lines.header("q", 0)?;
    let q = lines.floats(n)?;
    let a_hdr = lines.header("A", 2)?;
    let a = lines.triplets(a_hdr[1])?;
    lines.header("b", 0)?;
    let b = lines.floats(a_hdr[0])?;
    let g_hdr = lines.header("G", 2)?;
    let g = lines.triplets(g_hdr[1])?;
    lines.header("l", 0)?;
    let lower = lines.floats(g_hdr[0])?;
    lines.header("u", 0)?;
    let upper = lines.floats(g_hdr[0])?;
    lines.header("end", 0)?;

    QpProblem::new(
        SparseMatrix::from_triplets(n, n, &p)?,
        q,
        offset,
        SparseMatrix::from_triplets(a_hdr[0], n, &a)?,
        b,
        SparseMatrix::from_triplets(g_hdr[0], n, &g)?,
        lower,
        upper,
    )
}
