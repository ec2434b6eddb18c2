//! The marginal polytope `Conv{Φ_i}`: diameter, linear minimization oracle
//! and LP-based membership tests.

use std::fmt;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lp::{lp_solve, LpOutcome, LpProblem, LpStatus};
use crate::model::ActivationMatrix;

/// Default margin standing in for the strict sign inequalities.
pub const DEFAULT_MARGIN: f64 = 1e-6;

/// Vertex set borrowed from an activation matrix (rows are vertices).
#[derive(Debug, Clone, Copy)]
pub struct Polytope<'a> {
    vertices: ArrayView2<'a, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diameter {
    pub value: f64,
    /// False when only a sample of pairs was examined.
    pub exact: bool,
}

impl fmt::Display for Diameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.exact {
            write!(f, "{:.16e}", self.value)
        } else {
            write!(f, "{:.16e} (lower bound)", self.value)
        }
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl<'a> Polytope<'a> {
    pub fn new(vertices: ArrayView2<'a, f64>) -> Result<Self> {
        if vertices.nrows() == 0 || vertices.ncols() == 0 {
            return Err(Error::config("polytope needs at least one vertex of positive dimension"));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("polytope vertices must be finite"));
        }
        Ok(Polytope { vertices })
    }

    pub fn from_activations(am: &'a ActivationMatrix) -> Self {
        Polytope {
            vertices: am.phi().view(),
        }
    }

    pub fn vertices(&self) -> ArrayView2<'a, f64> {
        self.vertices
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.nrows()
    }

    /// Ambient dimension (the number of examples `m`).
    pub fn dim(&self) -> usize {
        self.vertices.ncols()
    }

    /// Exact maximum pairwise vertex distance, `O(N² m)`.
    pub fn diameter(&self) -> f64 {
        let v = self.vertices;
        let n = v.nrows();
        // max is exact under any reduction order
        let best = (0..n)
            .into_par_iter()
            .map(|i| {
                (i + 1..n)
                    .map(|j| sq_dist(v.row(i), v.row(j)))
                    .fold(0.0f64, f64::max)
            })
            .reduce(|| 0.0, f64::max);
        best.sqrt()
    }

    /// Exact below `exact_limit` vertices, otherwise the maximum over
    /// `samples` seeded random pairs, flagged as a lower bound.
    pub fn diameter_estimate(&self, exact_limit: usize, samples: usize, seed: u64) -> Diameter {
        let n = self.num_vertices();
        if n <= exact_limit {
            return Diameter {
                value: self.diameter(),
                exact: true,
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<(usize, usize)> = (0..samples)
            .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
            .collect();
        let best = pairs
            .par_iter()
            .map(|&(i, j)| sq_dist(self.vertices.row(i), self.vertices.row(j)))
            .reduce(|| 0.0, f64::max);
        Diameter {
            value: best.sqrt(),
            exact: false,
        }
    }

    /// Vertex minimizing `⟨direction, Φ_i⟩`; lowest index wins ties.
    pub fn lmo(&self, direction: ArrayView1<f64>) -> Result<usize> {
        if direction.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "direction length",
                expected: self.dim(),
                actual: direction.len(),
            });
        }
        let scores = self.vertices.dot(&direction);
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s < scores[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    pub inside: bool,
    pub phase1_objective: f64,
    pub outcome: LpOutcome,
}

impl fmt::Display for Membership {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.inside { "INSIDE" } else { "OUTSIDE" };
        write!(f, "{verdict} {:e}", self.phase1_objective)
    }
}

fn verdict(outcome: LpOutcome) -> Membership {
    Membership {
        inside: outcome.status == LpStatus::Feasible,
        phase1_objective: outcome.phase1_objective,
        outcome,
    }
}

/// Is `y_vec` a convex combination of the vertices? Solves
/// `Σ α_i Φ_i = y, Σ α_i = 1, α ≥ 0`.
pub fn hull_membership(p: &Polytope, y_vec: ArrayView1<f64>) -> Result<Membership> {
    if y_vec.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            what: "target length",
            expected: p.dim(),
            actual: y_vec.len(),
        });
    }
    let n = p.num_vertices();
    let mut lp = LpProblem::feasibility(n);
    let mut eq = p.vertices().t().to_owned();
    eq.push_row(Array2::ones((1, n)).row(0)).expect("width n");
    lp.eq_matrix = eq;
    lp.eq_rhs = y_vec.iter().copied().chain(std::iter::once(1.0)).collect();
    Ok(verdict(lp_solve(&lp)?))
}

/// Does some convex combination of neurons put every class-0 example at or
/// below `−τ` and every class-1 example at or above `τ`? `phi0` and `phi1`
/// are `N × m₀` and `N × m₁` (neuron rows, example columns).
pub fn classification_membership(phi0: ArrayView2<f64>, phi1: ArrayView2<f64>, tau: f64) -> Result<Membership> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("margin must be positive, got {tau}")));
    }
    let n = phi0.nrows();
    if phi1.nrows() != n {
        return Err(Error::DimensionMismatch {
            what: "class-1 neuron count",
            expected: n,
            actual: phi1.nrows(),
        });
    }
    if n == 0 {
        return Err(Error::config("membership needs at least one neuron"));
    }
    let mut lp = LpProblem::feasibility(n);
    lp.add_eq(&vec![1.0; n], 1.0)?;
    let m0 = phi0.ncols();
    let m1 = phi1.ncols();
    let mut ub = Array2::zeros((m0 + m1, n));
    ub.slice_mut(ndarray::s![..m0, ..]).assign(&phi0.t());
    ub.slice_mut(ndarray::s![m0.., ..]).assign(&phi1.t().mapv(|v| -v));
    lp.ub_matrix = ub;
    lp.ub_rhs = vec![-tau; m0 + m1];
    Ok(verdict(lp_solve(&lp)?))
}

/// Splits the activation columns by their raw 0/1 label and runs
/// [`classification_membership`].
pub fn classification_membership_for(am: &ActivationMatrix, tau: f64) -> Result<Membership> {
    let labels = am.raw_labels();
    if let Some(row) = labels.iter().position(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::NonBinaryLabels { row, value: labels[row] });
    }
    let zeros: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] == 0.0).collect();
    let ones: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] == 1.0).collect();
    let phi0 = am.phi().select(Axis(1), &zeros);
    let phi1 = am.phi().select(Axis(1), &ones);
    classification_membership(phi0.view(), phi1.view(), tau)
}
