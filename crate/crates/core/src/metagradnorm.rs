//! GradNorm-style balancing of the contrastive and ordinal terms.
//!
//! The four meta-parameters (`lambda_base`, `lambda_ord`, `T_ctr`, `T_ord`)
//! live in softplus pre-image space so their materialized values are always
//! positive. Each meta-step holds the adapter fixed and descends the
//! meta-objective
//!
//! ```text
//! J = |G_ctr - G*_ctr| + |G_ord - G*_ord| + beta * H(gates)
//! ```
//!
//! where `G_k` is the L2 norm of the adapter gradient of term `k` and the
//! targets `G*_k` scale the mean norm by each term's relative training rate.
//! J depends on the meta-parameters through second-order paths (gradient
//! norms), so its gradient is taken by central differences over the four
//! pre-image coordinates.

use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, BatchEval};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::objectives::{entropy_reg, Alpha, GateWeights, Mixing, Term};

/// Lower bound kept on every pre-image; `softplus(RHO_FLOOR) ~ 1.4e-11`.
pub const RHO_FLOOR: f64 = -25.0;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus pre-image needs a positive value, got {y}");
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp_m1()).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    /// Pre-images of `[lambda_base, lambda_ord, t_ctr, t_ord]`.
    pub rho: [f64; 4],
    /// Unweighted mean losses of the first training batch.
    pub initial_losses: Option<(f64, f64)>,
    pub gamma: f64,
    pub beta: f64,
    pub eta_meta: f64,
    pub epsilon: f64,
    /// Treat gate weights as constants inside the gradient norms.
    #[serde(default)]
    pub gate_stop_gradient: bool,
}

/// Everything the meta-objective is built from at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradNormSnapshot {
    pub g: [f64; 2],
    pub l_tilde: [f64; 2],
    pub r: [f64; 2],
    pub g_bar: f64,
    pub g_star: [f64; 2],
    pub j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaStepReport {
    /// Snapshot at the meta-parameters before the update.
    pub snapshot: GradNormSnapshot,
    /// Finite-difference gradient of J in pre-image space.
    pub grad: [f64; 4],
    pub alpha_before: Alpha,
    pub alpha_after: Alpha,
}

impl MetaState {
    pub fn new(init: Alpha, gamma: f64, beta: f64, eta_meta: f64) -> Result<Self> {
        for (name, v) in [
            ("lambda_base", init.lambda_base),
            ("lambda_ord", init.lambda_ord),
            ("t_ctr", init.t_ctr),
            ("t_ord", init.t_ord),
            ("gamma", gamma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} = {v} must be > 0")));
            }
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParam(format!("beta = {beta} must be >= 0")));
        }
        if !(eta_meta >= 0.0 && eta_meta.is_finite()) {
            return Err(Error::InvalidParam(format!("eta_meta = {eta_meta} must be >= 0")));
        }
        Ok(MetaState {
            rho: [
                softplus_inv(init.lambda_base),
                softplus_inv(init.lambda_ord),
                softplus_inv(init.t_ctr),
                softplus_inv(init.t_ord),
            ],
            initial_losses: None,
            gamma,
            beta,
            eta_meta,
            epsilon: 1e-8,
            gate_stop_gradient: false,
        })
    }

    pub fn alpha(&self) -> Alpha {
        alpha_from(&self.rho)
    }

    /// Records `L(0)` the first time it is called; later calls are ignored.
    pub fn record_initial_losses(&mut self, losses: (f64, f64)) {
        if self.initial_losses.is_none() {
            self.initial_losses = Some(losses);
        }
    }

    fn through_gate(&self) -> bool {
        !self.gate_stop_gradient
    }

    /// Gradient norms, difficulty ratios, targets and J at the given
    /// pre-image point.
    pub fn snapshot_at(
        &self,
        rho: &[f64; 4],
        eval: &BatchEval,
        adapter: &Adapter,
        corpus: &Corpus,
        mixing: Mixing,
    ) -> Result<GradNormSnapshot> {
        let l0 = self
            .initial_losses
            .ok_or_else(|| Error::InvalidParam("initial losses not recorded".into()))?;
        let alpha = alpha_from(rho);
        let g = grad_norms(eval, adapter, corpus, &alpha, mixing, self.through_gate());
        let now = eval.mean_losses();
        let l_tilde = normalized_losses(now, l0, self.epsilon);
        let r = ratios_from_normalized(l_tilde, self.gamma);
        let (g_bar, g_star) = targets(g, r);
        let gates: Vec<GateWeights> = eval.per_sample(&alpha, mixing).iter().map(|s| s.gate).collect();
        let j = meta_objective(g, g_star, self.beta, &gates);
        if !j.is_finite() {
            return Err(Error::Numerical(format!("non-finite meta-objective at rho = {rho:?}")));
        }
        Ok(GradNormSnapshot {
            g,
            l_tilde,
            r,
            g_bar,
            g_star,
            j,
        })
    }

    /// Central-difference gradient of J over the four pre-images, probing
    /// coordinates in a fixed order with step `1e-4 * max(1, |rho_i|)`.
    pub fn meta_gradient(&self, eval: &BatchEval, adapter: &Adapter, corpus: &Corpus, mixing: Mixing) -> Result<[f64; 4]> {
        let mut grad = [0.0; 4];
        for i in 0..4 {
            let h = 1e-4 * self.rho[i].abs().max(1.0);
            let mut plus = self.rho;
            plus[i] += h;
            let mut minus = self.rho;
            minus[i] -= h;
            let jp = self.snapshot_at(&plus, eval, adapter, corpus, mixing)?.j;
            let jm = self.snapshot_at(&minus, eval, adapter, corpus, mixing)?.j;
            grad[i] = (jp - jm) / (2.0 * h);
        }
        Ok(grad)
    }

    /// One meta-parameter update with the adapter held fixed.
    pub fn meta_step(&mut self, eval: &BatchEval, adapter: &Adapter, corpus: &Corpus, mixing: Mixing) -> Result<MetaStepReport> {
        let snapshot = self.snapshot_at(&self.rho, eval, adapter, corpus, mixing)?;
        let grad = self.meta_gradient(eval, adapter, corpus, mixing)?;
        let alpha_before = self.alpha();
        for (rho, g) in self.rho.iter_mut().zip(grad) {
            *rho = (*rho - self.eta_meta * g).max(RHO_FLOOR);
        }
        Ok(MetaStepReport {
            snapshot,
            grad,
            alpha_before,
            alpha_after: self.alpha(),
        })
    }
}

fn alpha_from(rho: &[f64; 4]) -> Alpha {
    Alpha {
        lambda_base: softplus(rho[0]),
        lambda_ord: softplus(rho[1]),
        t_ctr: softplus(rho[2]),
        t_ord: softplus(rho[3]),
    }
}

/// `(G_ctr, G_ord)`: L2 norms of the adapter gradients of the two weighted
/// terms of the batch objective, each from its own backward pass.
pub fn grad_norms(eval: &BatchEval, adapter: &Adapter, corpus: &Corpus, alpha: &Alpha, mixing: Mixing, through_gate: bool) -> [f64; 2] {
    let g_ctr = eval
        .gradient(adapter, corpus, alpha, mixing, Term::Contrastive, through_gate)
        .norm();
    let g_ord = eval.gradient(adapter, corpus, alpha, mixing, Term::Ordinal, through_gate).norm();
    [g_ctr, g_ord]
}

fn normalized_losses(now: (f64, f64), l0: (f64, f64), epsilon: f64) -> [f64; 2] {
    [now.0 / (l0.0 + epsilon), now.1 / (l0.1 + epsilon)]
}

fn ratios_from_normalized(l_tilde: [f64; 2], gamma: f64) -> [f64; 2] {
    let mean = 0.5 * (l_tilde[0] + l_tilde[1]);
    if !(mean > 0.0) {
        return [1.0, 1.0];
    }
    [(l_tilde[0] / mean).powf(gamma), (l_tilde[1] / mean).powf(gamma)]
}

/// `r_k = (L~_k / mean_j L~_j)^gamma` with `L~_k = L_k / (L_k(0) + eps)`.
/// Returns `(1, 1)` when both normalized losses are zero.
pub fn difficulty_ratios(l_now: (f64, f64), l0: (f64, f64), gamma: f64, epsilon: f64) -> [f64; 2] {
    ratios_from_normalized(normalized_losses(l_now, l0, epsilon), gamma)
}

/// `(G_bar, G*)` with `G_bar = (G_ctr + G_ord) / 2` and `G*_k = G_bar r_k`.
pub fn targets(g: [f64; 2], r: [f64; 2]) -> (f64, [f64; 2]) {
    let g_bar = 0.5 * (g[0] + g[1]);
    (g_bar, [g_bar * r[0], g_bar * r[1]])
}

pub fn meta_objective(g: [f64; 2], g_star: [f64; 2], beta: f64, gates: &[GateWeights]) -> f64 {
    let ent = if beta == 0.0 { 0.0 } else { beta * entropy_reg(gates) };
    (g[0] - g_star[0]).abs() + (g[1] - g_star[1]).abs() + ent
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::BatchMember;
    use crate::corpus::{ActionLevel, Claim, Label, Taxonomy};
    use crate::objectives::ObjectiveParams;
    use crate::pairing::SampledPairs;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn softplus_round_trip() {
        for v in [1e-6, 0.05, 1.0, 2.5, 13.0, 40.0] {
            assert!((softplus(softplus_inv(v)) - v).abs() <= 1e-12 * v.max(1.0), "{v}");
        }
        assert!(softplus(RHO_FLOOR) > 1e-12);
        assert!(softplus(800.0).is_finite());
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(difficulty_ratios((0.3, 0.3), (1.0, 1.0), 0.5, 0.0), [1.0, 1.0]);
        let r = difficulty_ratios((2.0, 1.0), (1.0, 1.0), 1.0, 0.0);
        assert!((r[0] - 4.0 / 3.0).abs() < 1e-15 && (r[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(difficulty_ratios((2.0, 1.0), (1.0, 1.0), 0.0, 0.0), [1.0, 1.0]);
        assert_eq!(difficulty_ratios((0.0, 0.0), (1.0, 1.0), 0.5, 1e-8), [1.0, 1.0]);
        // gamma grid: r_ctr strictly increasing for L~ = (2, 1)
        let rs: Vec<f64> = [0.2, 0.5, 1.0]
            .iter()
            .map(|&g| difficulty_ratios((2.0, 1.0), (1.0, 1.0), g, 0.0)[0])
            .collect();
        assert!(rs[0] < rs[1] && rs[1] < rs[2]);
    }

    #[test]
    fn target_examples() {
        assert_eq!(targets([1.0, 1.0], [1.0, 1.0]), (1.0, [1.0, 1.0]));
        assert_eq!(targets([3.0, 1.0], [1.0, 1.0]), (2.0, [2.0, 2.0]));
        assert_eq!(targets([0.0, 0.0], [1.3, 0.7]), (0.0, [0.0, 0.0]));
    }

    #[test]
    fn meta_objective_examples() {
        assert_eq!(meta_objective([1.0, 2.0], [1.0, 2.0], 0.0, &[]), 0.0);
        assert_eq!(meta_objective([2.0, 1.0], [1.5, 1.5], 0.0, &[]), 1.0);
        let even = [GateWeights::EVEN; 4];
        let j = meta_objective([2.0, 1.0], [1.5, 1.5], 0.01, &even);
        assert!((j - (1.0 + 0.01 * std::f64::consts::LN_2)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn ratio_conservation(a in 1e-6..100.0f64, b in 1e-6..100.0f64, gi in 0usize..3) {
            let gamma = [0.2, 0.5, 1.0][gi];
            let r = difficulty_ratios((a, b), (1.0, 1.0), gamma, 1e-8);
            let s = r[0].powf(1.0 / gamma) + r[1].powf(1.0 / gamma);
            prop_assert!((s - 2.0).abs() < 1e-9);
        }
    }

    fn fixture(seed: u64) -> (Corpus, Adapter, Vec<BatchMember>) {
        let mut r = rng::seeded(seed, 5);
        let tax = Taxonomy::from_pairs([("a", "A")]).unwrap();
        let d = 5;
        let claims = (0..7)
            .map(|i| {
                let e = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
                Claim::new(format!("c{i}"), e, vec![Label::new("a", ActionLevel::Planning)])
            })
            .collect();
        let corpus = Corpus::new(claims, tax).unwrap();
        let mut adapter = Adapter::init(d, 2, 2.0, seed).unwrap();
        adapter.up_mut().iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
        let sp = |a, p: &[usize], n: &[usize]| SampledPairs {
            anchor: a,
            positives: p.to_vec(),
            negatives: n.to_vec(),
        };
        let batch = vec![
            BatchMember {
                anchor: 0,
                contrastive: Some(sp(0, &[1], &[2, 3, 4])),
                ordinal: Some(sp(0, &[2], &[5, 6])),
            },
            BatchMember {
                anchor: 3,
                contrastive: Some(sp(3, &[4, 5], &[6])),
                ordinal: Some(sp(3, &[6], &[1])),
            },
        ];
        (corpus, adapter, batch)
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let (corpus, adapter, batch) = fixture(3);
        let params = ObjectiveParams { tau: 0.5, margin_m0: 0.5 };
        let eval = BatchEval::new(&adapter, &corpus, &batch, &params).unwrap();
        let mut meta = MetaState::new(
            Alpha {
                lambda_base: 1.0,
                lambda_ord: 2.5,
                t_ctr: 13.0,
                t_ord: 1.0,
            },
            0.5,
            0.01,
            0.0,
        )
        .unwrap();
        meta.record_initial_losses(eval.mean_losses());
        let before = meta.clone();
        meta.meta_step(&eval, &adapter, &corpus, Mixing::Gated).unwrap();
        assert_eq!(meta, before);
    }

    #[test]
    fn meta_gradient_is_reproducible_and_descends() {
        let (corpus, adapter, batch) = fixture(8);
        let params = ObjectiveParams { tau: 0.5, margin_m0: 0.5 };
        let eval = BatchEval::new(&adapter, &corpus, &batch, &params).unwrap();
        let mut meta = MetaState::new(
            Alpha {
                lambda_base: 1.0,
                lambda_ord: 2.5,
                t_ctr: 3.0,
                t_ord: 1.0,
            },
            0.5,
            0.0,
            1e-3,
        )
        .unwrap();
        meta.record_initial_losses((eval.mean_losses().0 * 1.3, eval.mean_losses().1 * 0.9));
        let g1 = meta.meta_gradient(&eval, &adapter, &corpus, Mixing::Gated).unwrap();
        let g2 = meta.meta_gradient(&eval, &adapter, &corpus, Mixing::Gated).unwrap();
        assert_eq!(g1.map(f64::to_bits), g2.map(f64::to_bits));
        let j0 = meta.snapshot_at(&meta.rho, &eval, &adapter, &corpus, Mixing::Gated).unwrap().j;
        let mut stepped = meta.clone();
        stepped.eta_meta = 1e-3;
        stepped.meta_step(&eval, &adapter, &corpus, Mixing::Gated).unwrap();
        let j1 = stepped
            .snapshot_at(&stepped.rho, &eval, &adapter, &corpus, Mixing::Gated)
            .unwrap()
            .j;
        assert!(j1 <= j0 + 1e-12, "{j1} > {j0}");
    }

    #[test]
    fn g_ctr_zero_when_contrastive_absent() {
        let (corpus, adapter, mut batch) = fixture(4);
        for m in &mut batch {
            m.contrastive = None;
        }
        let params = ObjectiveParams { tau: 0.5, margin_m0: 2.5 };
        let eval = BatchEval::new(&adapter, &corpus, &batch, &params).unwrap();
        let g = grad_norms(&eval, &adapter, &corpus, &Alpha::default(), Mixing::Even, true);
        assert_eq!(g[0], 0.0);
        assert!(g[1] > 0.0);
    }

    #[test]
    fn doubling_lambda_base_doubles_g_ctr() {
        let (corpus, adapter, batch) = fixture(6);
        let params = ObjectiveParams { tau: 0.5, margin_m0: 0.5 };
        let eval = BatchEval::new(&adapter, &corpus, &batch, &params).unwrap();
        let a = Alpha {
            lambda_base: 1.0,
            lambda_ord: 2.0,
            t_ctr: 2.0,
            t_ord: 1.0,
        };
        let b = Alpha { lambda_base: 2.0, ..a };
        let ga = grad_norms(&eval, &adapter, &corpus, &a, Mixing::Gated, false);
        let gb = grad_norms(&eval, &adapter, &corpus, &b, Mixing::Gated, false);
        assert!((gb[0] - 2.0 * ga[0]).abs() < 1e-12);
        assert!((gb[1] - ga[1]).abs() < 1e-12);
    }
}
