//! Closed-form pre-training thresholds and subnetwork loss bounds.
//!
//! Natural logarithms throughout; the asymptotic thresholds are evaluated with
//! an implied constant of one.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateMode {
    /// Per-iteration factor `1 − c d/m²`.
    Sgd,
    /// Per-iteration factor `1 − c d/m`.
    Gd,
}

impl FromStr for RateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(RateMode::Sgd),
            "gd" => Ok(RateMode::Gd),
            other => Err(Error::config(format!("unknown rate mode `{other}`"))),
        }
    }
}

/// `c d/m²` or `c d/m`; must lie strictly inside (0, 1).
pub fn rate_factor(m: usize, d: usize, c: f64, mode: RateMode) -> Result<f64> {
    let m = m as f64;
    let denom = match mode {
        RateMode::Sgd => m * m,
        RateMode::Gd => m,
    };
    let r = c * d as f64 / denom;
    if r > 0.0 && r < 1.0 {
        Ok(r)
    } else {
        Err(Error::RateOutOfRange(r))
    }
}

fn threshold(k: usize, m: usize, d: usize, c: f64, mode: RateMode) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("threshold needs k >= 1"));
    }
    let r = rate_factor(m, d, c, mode)?;
    // ln_1p keeps precision when c d/m² is tiny
    Ok(-(k as f64).ln() / (-r).ln_1p())
}

/// Pre-training iterations of SGD after which pruning to `k` neurons decays as `O(1/k)`.
pub fn sgd_threshold(k: usize, m: usize, d: usize, c: f64) -> Result<f64> {
    threshold(k, m, d, c, RateMode::Sgd)
}

/// Same threshold for full-batch gradient descent.
pub fn gd_threshold(k: usize, m: usize, d: usize, c: f64) -> Result<f64> {
    threshold(k, m, d, c, RateMode::Gd)
}

/// `(1/k) ℓ(u₁) + D²/(2k) + ((k−1)/k) L_N`.
pub fn lemma1_bound(k: usize, loss_u1: f64, diameter: f64, dense_loss: f64) -> f64 {
    let k = k.max(1) as f64;
    loss_u1 / k + diameter * diameter / (2.0 * k) + (k - 1.0) / k * dense_loss
}

/// Inputs to the expected-loss bound. Fields left `None` must be filled
/// before evaluation; `kappa`, `c1`, `c2` and `gamma` are carried along but
/// never estimated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundParams {
    pub c: Option<f64>,
    pub zeta: f64,
    pub kappa: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub gamma: Option<f64>,
    /// `‖f(X, Θ₀) − Y‖²`, unhalved and unnormalized.
    pub l0: Option<f64>,
    pub loss_u1: Option<f64>,
    pub diameter: Option<f64>,
    pub m: Option<usize>,
    pub d: Option<usize>,
    pub width: Option<usize>,
    pub k: Option<usize>,
    pub t: Option<usize>,
}

impl BoundParams {
    pub fn new() -> Self {
        BoundParams {
            zeta: 1.0,
            ..Default::default()
        }
    }

    /// `N d > m²`; reported, never enforced.
    pub fn overparameterized(&self) -> Option<bool> {
        let (n, d, m) = (self.width?, self.d?, self.m?);
        Some((n as u128) * (d as u128) > (m as u128) * (m as u128))
    }

    /// `m > d`.
    pub fn more_examples_than_features(&self) -> Option<bool> {
        Some(self.m? > self.d?)
    }
}

/// `(1/k) ℓ(u₁) + D²/(2k) + ((k−1) ζ/(2mk)) (1 − c d/m²)^t L₀`.
pub fn theorem2_bound(p: &BoundParams) -> Result<f64> {
    let k = p.k.ok_or(Error::MissingParameter("k"))?;
    let loss_u1 = p.loss_u1.ok_or(Error::MissingParameter("loss_u1"))?;
    let diameter = p.diameter.ok_or(Error::MissingParameter("diameter"))?;
    let c = p.c.ok_or(Error::MissingParameter("c"))?;
    let l0 = p.l0.ok_or(Error::MissingParameter("l0"))?;
    let m = p.m.ok_or(Error::MissingParameter("m"))?;
    let d = p.d.ok_or(Error::MissingParameter("d"))?;
    let t = p.t.ok_or(Error::MissingParameter("t"))?;
    if k == 0 {
        return Err(Error::config("bound needs k >= 1"));
    }
    let r = rate_factor(m, d, c, RateMode::Sgd)?;
    let kf = k as f64;
    let decay = (t as f64 * (-r).ln_1p()).exp();
    let tail = (kf - 1.0) * p.zeta / (2.0 * m as f64 * kf) * decay * l0;
    Ok(loss_u1 / kf + diameter * diameter / (2.0 * kf) + tail)
}

/// Overlay rows `k,lemma1_bound,theorem2_bound,observed_loss`; the second
/// column is empty when `params` lacks the constants.
pub fn bound_curve_csv(losses: &[f64], diameter: f64, dense_loss: f64, params: Option<&BoundParams>) -> Result<String> {
    let mut out = String::from("k,lemma1_bound,theorem2_bound,observed_loss\n");
    let Some(&loss_u1) = losses.first() else {
        return Ok(out);
    };
    for (idx, &obs) in losses.iter().enumerate() {
        let k = idx + 1;
        let l1 = lemma1_bound(k, loss_u1, diameter, dense_loss);
        let t2 = match params {
            Some(p) => {
                let mut p = p.clone();
                p.k = Some(k);
                p.loss_u1 = Some(loss_u1);
                p.diameter = Some(diameter);
                format!("{:.16e}", theorem2_bound(&p)?)
            }
            None => String::new(),
        };
        out.push_str(&format!("{k},{l1:.16e},{t2},{obs:.16e}\n"));
    }
    Ok(out)
}
