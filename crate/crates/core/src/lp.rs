//! Dense two-phase primal simplex with Bland's anti-cycling rule.
//!
//! Problems are `min cᵀx` subject to `A_eq x = b_eq`, `A_ub x ≤ b_ub`, with a
//! per-variable nonnegativity flag. Free variables are split into two
//! nonnegative parts, inequality rows get slacks, and every row whose slack
//! cannot start in the basis gets an implicit artificial variable: artificial
//! columns are never stored because they may not re-enter once they leave.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Phase-one objective above which a problem is declared infeasible.
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Largest constraint violation accepted on a returned solution.
pub const RESIDUAL_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-12;
const PIVOT_TOL: f64 = 1e-11;
/// Consecutive degenerate pivots before falling back to Bland's rule.
const STALL_LIMIT: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    pub eq_matrix: Array2<f64>,
    pub eq_rhs: Vec<f64>,
    pub ub_matrix: Array2<f64>,
    pub ub_rhs: Vec<f64>,
    pub nonneg: Vec<bool>,
}

impl LpProblem {
    /// `n` nonnegative variables, zero objective, no constraints.
    pub fn feasibility(n: usize) -> Self {
        LpProblem {
            objective: vec![0.0; n],
            eq_matrix: Array2::zeros((0, n)),
            eq_rhs: Vec::new(),
            ub_matrix: Array2::zeros((0, n)),
            ub_rhs: Vec::new(),
            nonneg: vec![true; n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add_eq(&mut self, row: &[f64], rhs: f64) -> Result<()> {
        push_row(&mut self.eq_matrix, row)?;
        self.eq_rhs.push(rhs);
        Ok(())
    }

    pub fn add_le(&mut self, row: &[f64], rhs: f64) -> Result<()> {
        push_row(&mut self.ub_matrix, row)?;
        self.ub_rhs.push(rhs);
        Ok(())
    }

    /// Stored as `−row · x ≤ −rhs`.
    pub fn add_ge(&mut self, row: &[f64], rhs: f64) -> Result<()> {
        let neg: Vec<f64> = row.iter().map(|v| -v).collect();
        self.add_le(&neg, -rhs)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        let checks = [
            ("equality matrix width", n, self.eq_matrix.ncols()),
            ("equality rhs length", self.eq_matrix.nrows(), self.eq_rhs.len()),
            ("inequality matrix width", n, self.ub_matrix.ncols()),
            ("inequality rhs length", self.ub_matrix.nrows(), self.ub_rhs.len()),
            ("nonnegativity flags", n, self.nonneg.len()),
        ];
        for (what, expected, actual) in checks {
            if expected != actual {
                return Err(Error::DimensionMismatch { what, expected, actual });
            }
        }
        let all = self
            .objective
            .iter()
            .chain(self.eq_matrix.iter())
            .chain(&self.eq_rhs)
            .chain(self.ub_matrix.iter())
            .chain(&self.ub_rhs);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::config("LP data must be finite"));
        }
        Ok(())
    }

    /// Largest violation of any constraint (including sign constraints) at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let x = Array1::from(x.to_vec());
        let mut worst = 0.0f64;
        for (r, &b) in self.eq_matrix.rows().into_iter().zip(&self.eq_rhs) {
            worst = worst.max((r.dot(&x) - b).abs());
        }
        for (r, &b) in self.ub_matrix.rows().into_iter().zip(&self.ub_rhs) {
            worst = worst.max(r.dot(&x) - b);
        }
        for (&v, &nn) in x.iter().zip(&self.nonneg) {
            if nn {
                worst = worst.max(-v);
            }
        }
        worst
    }

    /// Plain-text form: `vars n`, optional `free i j ...`, `min c...`, then one
    /// `eq a... = b` or `le a... <= b` line per constraint.
    pub fn to_text(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = &f64>| v.map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let mut out = format!("vars {}\n", self.num_vars());
        let free: Vec<String> = self
            .nonneg
            .iter()
            .enumerate()
            .filter(|(_, &nn)| !nn)
            .map(|(i, _)| i.to_string())
            .collect();
        if !free.is_empty() {
            let _ = writeln!(out, "free {}", free.join(" "));
        }
        let _ = writeln!(out, "min {}", join(&mut self.objective.iter()));
        for (r, b) in self.eq_matrix.rows().into_iter().zip(&self.eq_rhs) {
            let _ = writeln!(out, "eq {} = {b:e}", join(&mut r.iter()));
        }
        for (r, b) in self.ub_matrix.rows().into_iter().zip(&self.ub_rhs) {
            let _ = writeln!(out, "le {} <= {b:e}", join(&mut r.iter()));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Format {
            what: "LP text",
            detail: format!("cannot parse `{line}`"),
        };
        let nums = |s: &str, line: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| f64::from_str(t).map_err(|_| bad(line)))
                .collect()
        };
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let first = lines.next().ok_or_else(|| bad(""))?;
        let n: usize = first
            .strip_prefix("vars ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad(first))?;
        let mut p = LpProblem::feasibility(n);
        for line in lines {
            let (tag, rest) = line.split_once(' ').ok_or_else(|| bad(line))?;
            match tag {
                "free" => {
                    for t in rest.split_whitespace() {
                        let i: usize = t.parse().map_err(|_| bad(line))?;
                        *p.nonneg.get_mut(i).ok_or_else(|| bad(line))? = false;
                    }
                }
                "min" => {
                    p.objective = nums(rest, line)?;
                    if p.objective.len() != n {
                        return Err(bad(line));
                    }
                }
                "eq" => {
                    let (lhs, rhs) = rest.split_once('=').ok_or_else(|| bad(line))?;
                    p.add_eq(&nums(lhs, line)?, rhs.trim().parse().map_err(|_| bad(line))?)?;
                }
                "le" => {
                    let (lhs, rhs) = rest.split_once("<=").ok_or_else(|| bad(line))?;
                    p.add_le(&nums(lhs, line)?, rhs.trim().parse().map_err(|_| bad(line))?)?;
                }
                _ => return Err(bad(line)),
            }
        }
        Ok(p)
    }
}

fn push_row(m: &mut Array2<f64>, row: &[f64]) -> Result<()> {
    if row.len() != m.ncols() {
        return Err(Error::DimensionMismatch {
            what: "constraint row",
            expected: m.ncols(),
            actual: row.len(),
        });
    }
    m.push_row(ndarray::ArrayView1::from(row)).expect("width checked");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Feasible,
    Infeasible,
    Unbounded,
}

impl LpStatus {
    pub fn name(self) -> &'static str {
        match self {
            LpStatus::Feasible => "FEASIBLE",
            LpStatus::Infeasible => "INFEASIBLE",
            LpStatus::Unbounded => "UNBOUNDED",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpOutcome {
    pub status: LpStatus,
    /// Optimal point in the original variables when feasible and bounded.
    pub solution: Option<Vec<f64>>,
    /// Sum of artificial variables at the end of phase one.
    pub phase1_objective: f64,
    /// Basic standard-form columns at termination; artificials are listed as
    /// `a<row>`.
    pub basis: Vec<String>,
    pub pivots: usize,
}

impl LpOutcome {
    pub fn to_text(&self) -> String {
        let mut out = format!("status {}\nphase1 {:e}\n", self.status.name(), self.phase1_objective);
        if let Some(x) = &self.solution {
            let xs: Vec<String> = x.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "alpha {}", xs.join(" "));
        }
        let _ = writeln!(out, "basis {}", self.basis.join(" "));
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Var {
    Real(usize),
    Artificial(usize),
}

impl Var {
    /// Bland order: artificials first, so they leave on ratio ties.
    fn order(self, rows: usize) -> usize {
        match self {
            Var::Artificial(r) => r,
            Var::Real(j) => rows + j,
        }
    }
}

struct Tableau {
    rows: usize,
    cols: usize,
    /// `rows × (cols + 1)`, rhs in the last column.
    a: Vec<f64>,
    obj: Vec<f64>,
    basis: Vec<Var>,
    pivots: usize,
    cap: usize,
}

impl Tableau {
    fn width(&self) -> usize {
        self.cols + 1
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.a[r * self.width() + c]
    }

    fn rhs(&self, r: usize) -> f64 {
        self.at(r, self.cols)
    }

    fn pivot(&mut self, p: usize, e: usize) -> Result<()> {
        self.pivots += 1;
        if self.pivots > self.cap {
            return Err(Error::IterationCap { cap: self.cap });
        }
        let w = self.width();
        let inv = 1.0 / self.a[p * w + e];
        let (before, rest) = self.a.split_at_mut(p * w);
        let (prow, after) = rest.split_at_mut(w);
        for v in prow.iter_mut() {
            *v *= inv;
        }
        prow[e] = 1.0;
        let eliminate = |row: &mut [f64]| {
            let f = row[e];
            if f != 0.0 {
                for (v, &q) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * q;
                }
                row[e] = 0.0;
                let last = row.len() - 1;
                if row[last] < 0.0 && row[last] > -1e-13 {
                    row[last] = 0.0;
                }
            }
        };
        before.chunks_exact_mut(w).for_each(eliminate);
        after.chunks_exact_mut(w).for_each(eliminate);
        let f = self.obj[e];
        if f != 0.0 {
            for (v, &q) in self.obj.iter_mut().zip(prow.iter()) {
                *v -= f * q;
            }
            self.obj[e] = 0.0;
        }
        self.basis[p] = Var::Real(e);
        Ok(())
    }

    /// Runs simplex iterations on the current objective row. Returns the
    /// unbounded entering column, if any.
    ///
    /// Enters the most negative reduced cost, but switches to Bland's
    /// lowest-index rule while pivots stay degenerate; cycling needs an
    /// unbroken run of degenerate pivots, so termination is kept.
    fn optimize(&mut self) -> Result<Option<usize>> {
        let w = self.width();
        let mut stalled = 0usize;
        loop {
            let entering = if stalled >= STALL_LIMIT {
                (0..self.cols).find(|&j| self.obj[j] < -COST_TOL)
            } else {
                (0..self.cols)
                    .filter(|&j| self.obj[j] < -COST_TOL)
                    .min_by(|&x, &y| self.obj[x].total_cmp(&self.obj[y]).then(x.cmp(&y)))
            };
            let Some(e) = entering else {
                return Ok(None);
            };
            let before = self.obj[self.cols];
            let mut best: Option<(usize, f64)> = None;
            for r in 0..self.rows {
                let a = self.a[r * w + e];
                if a > PIVOT_TOL {
                    let ratio = self.a[r * w + self.cols] / a;
                    best = match best {
                        None => Some((r, ratio)),
                        Some((br, bratio)) => {
                            let tie = (ratio - bratio).abs() <= 1e-12 * bratio.abs().max(1e-300);
                            if ratio < bratio && !tie
                                || tie && self.basis[r].order(self.rows) < self.basis[br].order(self.rows)
                            {
                                Some((r, ratio))
                            } else {
                                Some((br, bratio))
                            }
                        }
                    };
                }
            }
            match best {
                Some((p, _)) => self.pivot(p, e)?,
                None => return Ok(Some(e)),
            }
            if self.obj[self.cols] == before {
                stalled += 1;
            } else {
                stalled = 0;
            }
        }
    }

    fn drop_row(&mut self, r: usize) {
        let w = self.width();
        self.a.drain(r * w..(r + 1) * w);
        self.basis.remove(r);
        self.rows -= 1;
    }
}

/// Two-phase simplex. Feasible outcomes are re-substituted into the original
/// constraints and rejected with [`Error::LpViolation`] if any is off by more
/// than [`RESIDUAL_TOL`].
pub fn lp_solve(prob: &LpProblem) -> Result<LpOutcome> {
    prob.validate()?;
    let n = prob.num_vars();
    let n_eq = prob.eq_rhs.len();
    let n_ub = prob.ub_rhs.len();

    // original variable j occupies column col_of[j]; free ones also col_of[j] + 1
    let mut col_of = Vec::with_capacity(n);
    let mut ncols = 0;
    for &nn in &prob.nonneg {
        col_of.push(ncols);
        ncols += if nn { 1 } else { 2 };
    }
    let n_struct = ncols;
    let cols = n_struct + n_ub;
    let rows = n_eq + n_ub;
    let w = cols + 1;

    let mut a = vec![0.0; rows * w];
    let mut basis = Vec::with_capacity(rows);
    let fill = |dst: &mut [f64], src: ndarray::ArrayView1<f64>| {
        for (j, &v) in src.iter().enumerate() {
            dst[col_of[j]] = v;
            if !prob.nonneg[j] {
                dst[col_of[j] + 1] = -v;
            }
        }
    };
    for r in 0..rows {
        let row = &mut a[r * w..(r + 1) * w];
        let (b, slack) = if r < n_eq {
            fill(row, prob.eq_matrix.row(r));
            (prob.eq_rhs[r], None)
        } else {
            let i = r - n_eq;
            fill(row, prob.ub_matrix.row(i));
            row[n_struct + i] = 1.0;
            (prob.ub_rhs[i], Some(n_struct + i))
        };
        row[cols] = b;
        if b < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        basis.push(match slack {
            Some(s) if b >= 0.0 => Var::Real(s),
            _ => Var::Artificial(r),
        });
    }

    // phase-one reduced costs: minus the column sums over artificial rows
    let mut obj = vec![0.0; w];
    for r in 0..rows {
        if let Var::Artificial(_) = basis[r] {
            for (o, &v) in obj.iter_mut().zip(&a[r * w..(r + 1) * w]) {
                *o -= v;
            }
        }
    }
    let mut t = Tableau {
        rows,
        cols,
        a,
        obj,
        basis,
        pivots: 0,
        cap: 50 * (rows + cols).max(1),
    };

    t.optimize()?;
    let phase1: f64 = (0..t.rows)
        .filter(|&r| matches!(t.basis[r], Var::Artificial(_)))
        .map(|r| t.rhs(r))
        .sum();
    let describe = |t: &Tableau| -> Vec<String> {
        t.basis
            .iter()
            .map(|v| match v {
                Var::Real(j) => format!("x{j}"),
                Var::Artificial(r) => format!("a{r}"),
            })
            .collect()
    };
    if phase1 > FEASIBILITY_TOL {
        return Ok(LpOutcome {
            status: LpStatus::Infeasible,
            solution: None,
            phase1_objective: phase1,
            basis: describe(&t),
            pivots: t.pivots,
        });
    }

    // drive remaining zero-level artificials out, dropping redundant rows
    let mut r = 0;
    while r < t.rows {
        if let Var::Artificial(_) = t.basis[r] {
            let row = &t.a[r * w..r * w + cols];
            let best = row
                .iter()
                .enumerate()
                .filter(|(_, v)| v.abs() > 1e-9)
                .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
                .map(|(j, _)| j);
            match best {
                Some(e) => {
                    t.pivot(r, e)?;
                    r += 1;
                }
                None => t.drop_row(r),
            }
        } else {
            r += 1;
        }
    }

    // phase two
    let mut cost = vec![0.0; cols];
    for j in 0..n {
        cost[col_of[j]] = prob.objective[j];
        if !prob.nonneg[j] {
            cost[col_of[j] + 1] = -prob.objective[j];
        }
    }
    let mut status = LpStatus::Feasible;
    if cost.iter().any(|&c| c != 0.0) {
        let mut obj = cost.clone();
        obj.push(0.0);
        for r in 0..t.rows {
            if let Var::Real(j) = t.basis[r] {
                let cb = cost[j];
                if cb != 0.0 {
                    for (o, &v) in obj.iter_mut().zip(&t.a[r * w..(r + 1) * w]) {
                        *o -= cb * v;
                    }
                }
            }
        }
        t.obj = obj;
        if t.optimize()?.is_some() {
            status = LpStatus::Unbounded;
        }
    }

    let solution = if status == LpStatus::Feasible {
        let mut std_x = vec![0.0; cols];
        for r in 0..t.rows {
            if let Var::Real(j) = t.basis[r] {
                std_x[j] = t.rhs(r).max(0.0);
            }
        }
        let mut x = extract(&std_x, &col_of, &prob.nonneg);
        if prob.max_violation(&x) > RESIDUAL_TOL {
            if let Some(refined) = refine(prob, &t, &col_of, n_struct) {
                x = refined;
            }
        }
        let violation = prob.max_violation(&x);
        if violation > RESIDUAL_TOL {
            return Err(Error::LpViolation { violation });
        }
        Some(x)
    } else {
        None
    };

    Ok(LpOutcome {
        status,
        solution,
        phase1_objective: phase1,
        basis: describe(&t),
        pivots: t.pivots,
    })
}

fn extract(std_x: &[f64], col_of: &[usize], nonneg: &[bool]) -> Vec<f64> {
    col_of
        .iter()
        .zip(nonneg)
        .map(|(&c, &nn)| if nn { std_x[c] } else { std_x[c] - std_x[c + 1] })
        .collect()
}

/// Re-solves `B x_B = b` from the original data for the final basis, which
/// removes the rounding accumulated in the tableau.
fn refine(prob: &LpProblem, t: &Tableau, col_of: &[usize], n_struct: usize) -> Option<Vec<f64>> {
    let n_eq = prob.eq_rhs.len();
    let rows = n_eq + prob.ub_rhs.len();
    let basic: Vec<usize> = t
        .basis
        .iter()
        .filter_map(|v| match v {
            Var::Real(j) => Some(*j),
            Var::Artificial(_) => None,
        })
        .collect();
    // column j of the standard-form matrix, all original rows
    let column = |j: usize| -> Vec<f64> {
        let mut col = vec![0.0; rows];
        if j >= n_struct {
            col[n_eq + (j - n_struct)] = 1.0;
            return col;
        }
        let (var, sign) = match col_of.binary_search(&j) {
            Ok(v) => (v, 1.0),
            Err(v) => (v - 1, -1.0),
        };
        for r in 0..n_eq {
            col[r] = sign * prob.eq_matrix[[r, var]];
        }
        for r in 0..prob.ub_rhs.len() {
            col[n_eq + r] = sign * prob.ub_matrix[[r, var]];
        }
        col
    };
    let k = basic.len();
    let b: Vec<f64> = prob.eq_rhs.iter().chain(&prob.ub_rhs).copied().collect();
    // k ≤ rows after redundant rows were dropped; the system is consistent
    let mut m = vec![0.0; rows * (k + 1)];
    for (c, &j) in basic.iter().enumerate() {
        for (r, v) in column(j).into_iter().enumerate() {
            m[r * (k + 1) + c] = v;
        }
    }
    for r in 0..rows {
        m[r * (k + 1) + k] = b[r];
    }
    let xb = gauss_solve(&mut m, rows, k)?;
    let mut std_x = vec![0.0; t.cols];
    for (c, &j) in basic.iter().enumerate() {
        std_x[j] = xb[c].max(0.0);
    }
    Some(extract(&std_x, col_of, &prob.nonneg))
}

/// Solves an overdetermined-but-consistent `rows × k` system by partial-pivot
/// elimination on the columns; returns `None` if the columns are dependent.
fn gauss_solve(m: &mut [f64], rows: usize, k: usize) -> Option<Vec<f64>> {
    let w = k + 1;
    let mut pivot_rows = Vec::with_capacity(k);
    let mut used = vec![false; rows];
    for c in 0..k {
        let (p, mag) = (0..rows)
            .filter(|&r| !used[r])
            .map(|r| (r, m[r * w + c].abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))?;
        if mag < 1e-14 {
            return None;
        }
        used[p] = true;
        pivot_rows.push(p);
        let inv = 1.0 / m[p * w + c];
        for r in 0..rows {
            if r != p {
                let f = m[r * w + c] * inv;
                if f != 0.0 {
                    for cc in c..w {
                        m[r * w + cc] -= f * m[p * w + cc];
                    }
                }
            }
        }
    }
    Some(
        pivot_rows
            .iter()
            .enumerate()
            .map(|(c, &p)| m[p * w + k] / m[p * w + c])
            .collect(),
    )
}
