//! Scalar objectives on normalized embeddings: cosine geometry, the
//! multi-positive contrastive loss, the ordinal mean-margin hinge, per-sample
//! gating, the batch objective and the gate-entropy regularizer.
//!
//! Losses come in two flavours: vector-level functions that take raw
//! embeddings, and `*_from_sims` variants that take precomputed cosine
//! similarities and also return the partial derivatives with respect to each
//! similarity. The trainer works with the latter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zero-vector guard for normalization.
pub const EPS_NORM: f64 = 1e-12;

/// A vector with unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    let n = l2(v);
    if !(n > EPS_NORM) {
        return Err(Error::NearZero(n));
    }
    Ok(UnitVector(v.iter().map(|x| x / n).collect()))
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            expected: u.len(),
            found: v.len(),
        });
    }
    let (u, v) = (normalize(u)?, normalize(v)?);
    Ok(u.dot(&v).clamp(-1.0, 1.0))
}

pub fn cosine_dist(u: &[f64], v: &[f64]) -> Result<f64> {
    cosine_sim(u, v).map(|s| 1.0 - s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParams {
    /// Contrastive temperature.
    pub tau: f64,
    /// Ordinal margin.
    pub margin_m0: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        ObjectiveParams {
            tau: 0.07,
            margin_m0: 0.05,
        }
    }
}

impl ObjectiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParam(format!("tau = {} must be > 0", self.tau)));
        }
        if !(self.margin_m0 > 0.0 && self.margin_m0.is_finite()) {
            return Err(Error::InvalidParam(format!("margin_m0 = {} must be > 0", self.margin_m0)));
        }
        Ok(())
    }
}

/// Loss value with its partials with respect to each positive and negative
/// similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithSimGrad {
    pub value: f64,
    pub d_pos: Vec<f64>,
    pub d_neg: Vec<f64>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `-log( sum_k e^{s_k/tau} / (sum_k e^{s_k/tau} + sum_m e^{n_m/tau}) )`,
/// evaluated as a difference of max-shifted log-sum-exps.
pub fn contrastive_from_sims(pos: &[f64], neg: &[f64], tau: f64) -> Result<LossWithSimGrad> {
    if pos.is_empty() {
        return Err(Error::Empty("contrastive loss positives"));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParam(format!("tau = {tau} must be > 0")));
    }
    if neg.is_empty() {
        return Ok(LossWithSimGrad {
            value: 0.0,
            d_pos: vec![0.0; pos.len()],
            d_neg: Vec::new(),
        });
    }
    let p = pos.iter().map(|s| s / tau);
    let all = pos.iter().chain(neg).map(|s| s / tau);
    let lse_pos = log_sum_exp(p);
    let lse_all = log_sum_exp(all);
    // rounding can leave a tiny negative when negatives are negligible
    let value = (lse_all - lse_pos).max(0.0);
    let d_pos = pos
        .iter()
        .map(|s| ((s / tau - lse_all).exp() - (s / tau - lse_pos).exp()) / tau)
        .collect();
    let d_neg = neg.iter().map(|s| (s / tau - lse_all).exp() / tau).collect();
    Ok(LossWithSimGrad { value, d_pos, d_neg })
}

/// `max(0, mean_k d(a,p_k) - mean_m d(a,n_m) + m0)` with `d = 1 - sim`.
/// At the hinge kink the zero subgradient is used.
pub fn ordinal_from_sims(pos: &[f64], neg: &[f64], m0: f64) -> Result<LossWithSimGrad> {
    if pos.is_empty() {
        return Err(Error::Empty("ordinal loss positives"));
    }
    if neg.is_empty() {
        return Err(Error::Empty("ordinal loss negatives"));
    }
    if !(m0 > 0.0) {
        return Err(Error::InvalidParam(format!("margin_m0 = {m0} must be > 0")));
    }
    let (k, m) = (pos.len() as f64, neg.len() as f64);
    let mean_pos_dist = pos.iter().map(|s| 1.0 - s).sum::<f64>() / k;
    let mean_neg_dist = neg.iter().map(|s| 1.0 - s).sum::<f64>() / m;
    let arg = mean_pos_dist - mean_neg_dist + m0;
    if arg > 0.0 {
        Ok(LossWithSimGrad {
            value: arg,
            d_pos: vec![-1.0 / k; pos.len()],
            d_neg: vec![1.0 / m; neg.len()],
        })
    } else {
        Ok(LossWithSimGrad {
            value: 0.0,
            d_pos: vec![0.0; pos.len()],
            d_neg: vec![0.0; neg.len()],
        })
    }
}

fn sims(anchor: &[f64], others: &[&[f64]]) -> Result<Vec<f64>> {
    others.iter().map(|o| cosine_sim(anchor, o)).collect()
}

/// Multi-positive contrastive loss on raw vectors.
pub fn contrastive_loss(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    let (p, n) = (sims(anchor, positives)?, sims(anchor, negatives)?);
    contrastive_from_sims(&p, &n, tau).map(|l| l.value)
}

/// Ordinal mean-margin loss on raw vectors.
pub fn ordinal_loss(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]], m0: f64) -> Result<f64> {
    let (p, n) = (sims(anchor, positives)?, sims(anchor, negatives)?);
    ordinal_from_sims(&p, &n, m0).map(|l| l.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateWeights {
    pub w_ctr: f64,
    pub w_ord: f64,
    pub s_ctr: f64,
    pub s_ord: f64,
}

impl GateWeights {
    pub const EVEN: GateWeights = GateWeights {
        w_ctr: 0.5,
        w_ord: 0.5,
        s_ctr: 0.0,
        s_ord: 0.0,
    };

    pub const CONTRASTIVE_ONLY: GateWeights = GateWeights {
        w_ctr: 1.0,
        w_ord: 0.0,
        s_ctr: 0.0,
        s_ord: 0.0,
    };
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-way softmax over `s_ctr = l_ctr/T_ctr - l_ord/T_ord` and `s_ord = -s_ctr`.
pub fn gate(l_ctr: f64, l_ord: f64, t_ctr: f64, t_ord: f64) -> GateWeights {
    let s_ctr = l_ctr / t_ctr - l_ord / t_ord;
    // softmax(s, -s) = (logistic(2s), logistic(-2s))
    GateWeights {
        w_ctr: logistic(2.0 * s_ctr),
        w_ord: logistic(-2.0 * s_ctr),
        s_ctr,
        s_ord: -s_ctr,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerSampleLosses {
    pub l_ctr: f64,
    pub l_ord: f64,
    pub gate: GateWeights,
}

/// `(1/B) sum_i [lambda_base w_ctr l_ctr + lambda_ord w_ord l_ord]`.
pub fn batch_objective(samples: &[PerSampleLosses], lambda_base: f64, lambda_ord: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("batch objective"));
    }
    let sum: f64 = samples
        .iter()
        .map(|s| lambda_base * s.gate.w_ctr * s.l_ctr + lambda_ord * s.gate.w_ord * s.l_ord)
        .sum();
    Ok(sum / samples.len() as f64)
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Batch-mean binary entropy of the gate weights. Zero for an empty batch.
pub fn entropy_reg(gates: &[GateWeights]) -> f64 {
    if gates.is_empty() {
        return 0.0;
    }
    -gates.iter().map(|g| xlogx(g.w_ctr) + xlogx(g.w_ord)).sum::<f64>() / gates.len() as f64
}

/// Materialized meta-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alpha {
    pub lambda_base: f64,
    pub lambda_ord: f64,
    pub t_ctr: f64,
    pub t_ord: f64,
}

impl Default for Alpha {
    fn default() -> Self {
        Alpha {
            lambda_base: 1.0,
            lambda_ord: 1.0,
            t_ctr: 1.0,
            t_ord: 1.0,
        }
    }
}

/// How the two per-sample losses are mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mixing {
    /// `w = (1, 0)`; the ordinal loss is not used.
    ContrastiveOnly,
    /// `w = (0.5, 0.5)` regardless of the losses.
    Even,
    /// `w = gate(l_ctr, l_ord, T_ctr, T_ord)`.
    Gated,
}

/// Which part of the batch objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Both,
    Contrastive,
    Ordinal,
}

/// Gate weights for one sample under a mixing mode.
pub fn mix_weights(l_ctr: f64, l_ord: f64, alpha: &Alpha, mixing: Mixing) -> GateWeights {
    match mixing {
        Mixing::ContrastiveOnly => GateWeights::CONTRASTIVE_ONLY,
        Mixing::Even => GateWeights::EVEN,
        Mixing::Gated => gate(l_ctr, l_ord, alpha.t_ctr, alpha.t_ord),
    }
}

/// Value of one sample's contribution (before the `1/B` factor) for a term.
pub fn term_value(l_ctr: f64, l_ord: f64, alpha: &Alpha, mixing: Mixing, term: Term) -> f64 {
    let w = mix_weights(l_ctr, l_ord, alpha, mixing);
    let ctr = alpha.lambda_base * w.w_ctr * l_ctr;
    let ord = alpha.lambda_ord * w.w_ord * l_ord;
    match term {
        Term::Both => ctr + ord,
        Term::Contrastive => ctr,
        Term::Ordinal => ord,
    }
}

/// Partial derivatives `(d/dl_ctr, d/dl_ord)` of [`term_value`].
///
/// With `through_gate` the gate weights are differentiated as functions of
/// the losses; without it they are treated as constants.
pub fn term_coefficients(l_ctr: f64, l_ord: f64, alpha: &Alpha, mixing: Mixing, term: Term, through_gate: bool) -> (f64, f64) {
    let w = mix_weights(l_ctr, l_ord, alpha, mixing);
    let (lb, lo) = (alpha.lambda_base, alpha.lambda_ord);
    // direct part: weights held constant
    let (mut cc, mut co) = match term {
        Term::Both => (lb * w.w_ctr, lo * w.w_ord),
        Term::Contrastive => (lb * w.w_ctr, 0.0),
        Term::Ordinal => (0.0, lo * w.w_ord),
    };
    if mixing == Mixing::Gated && through_gate {
        // dw_ctr/ds = 2 w_ctr w_ord, ds/dl_ctr = 1/T_ctr, ds/dl_ord = -1/T_ord, dw_ord = -dw_ctr
        let dw = 2.0 * w.w_ctr * w.w_ord;
        let outer = match term {
            Term::Both => lb * l_ctr - lo * l_ord,
            Term::Contrastive => lb * l_ctr,
            Term::Ordinal => -lo * l_ord,
        };
        cc += outer * dw / alpha.t_ctr;
        co -= outer * dw / alpha.t_ord;
    }
    (cc, co)
}
