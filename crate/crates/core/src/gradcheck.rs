//! Finite-difference checks of the analytic adapter and meta gradients on
//! small random instances.

use rand::Rng;
use serde::Serialize;

use crate::adapter::{backward, Adapter, BatchEval, BatchMember};
use crate::corpus::{ActionLevel, Claim, Corpus, Label, Taxonomy};
use crate::error::Result;
use crate::metagradnorm::MetaState;
use crate::objectives::{Alpha, Mixing, ObjectiveParams};
use crate::pairing::SampledPairs;
use crate::rng;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so components that are zero up to
/// rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// A random gradient-check problem: a corpus, an adapter and one batch.
#[derive(Debug, Clone, Serialize)]
pub struct Instance {
    pub seed: u64,
    pub dim: usize,
    pub rank: usize,
    #[serde(skip)]
    pub corpus: Corpus,
    pub adapter_down: Vec<f64>,
    pub adapter_up: Vec<f64>,
    pub scale: f64,
    pub batch: Vec<(usize, Option<(Vec<usize>, Vec<usize>)>, Option<(Vec<usize>, Vec<usize>)>)>,
    pub params: ObjectiveParams,
    pub alpha: Alpha,
    #[serde(skip)]
    members: Vec<BatchMember>,
}

impl Instance {
    /// `d <= 8`, `r <= 3`, `B <= 4`, `K <= 2`, `M <= 3`. With `at_init` the
    /// up-projection is left at zero.
    pub fn random(seed: u64, at_init: bool) -> Result<Instance> {
        let mut r = rng::seeded(seed, 0x6C4E);
        let dim = r.random_range(2..=8);
        let rank = r.random_range(1..=3usize.min(dim));
        let n = 12;
        let tax = Taxonomy::from_pairs([("a", "A")])?;
        let claims = (0..n)
            .map(|i| {
                let e = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
                Claim::new(format!("g{i}"), e, vec![Label::new("a", ActionLevel::Planning)])
            })
            .collect();
        let corpus = Corpus::new(claims, tax)?;
        let mut adapter = Adapter::init(dim, rank, r.random_range(0.5..4.0), seed)?;
        if !at_init {
            adapter.up_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        }

        let b = r.random_range(1..=4);
        let mut members = Vec::with_capacity(b);
        let pick = |r: &mut rand_chacha::ChaCha8Rng, anchor: usize, k: usize, m: usize| {
            let mut pool: Vec<usize> = (0..n).filter(|&j| j != anchor).collect();
            let mut take = |c: usize| -> Vec<usize> { (0..c).map(|_| pool.swap_remove(r.random_range(0..pool.len()))).collect() };
            let pos = take(k);
            let neg = take(m);
            SampledPairs {
                anchor,
                positives: pos,
                negatives: neg,
            }
        };
        for _ in 0..b {
            let anchor = r.random_range(0..n);
            let ctr = r.random_bool(0.85).then(|| {
                let (k, m) = (r.random_range(1..=2), r.random_range(0..=3));
                pick(&mut r, anchor, k, m)
            });
            let ord = r.random_bool(0.85).then(|| {
                let (k, m) = (r.random_range(1..=2), r.random_range(1..=3));
                pick(&mut r, anchor, k, m)
            });
            if ctr.is_none() && ord.is_none() {
                let (k, m) = (r.random_range(1..=2), r.random_range(1..=3));
                members.push(BatchMember {
                    anchor,
                    contrastive: Some(pick(&mut r, anchor, k, m)),
                    ordinal: None,
                });
            } else {
                members.push(BatchMember {
                    anchor,
                    contrastive: ctr,
                    ordinal: ord,
                });
            }
        }
        let params = ObjectiveParams {
            tau: r.random_range(0.1..1.0),
            margin_m0: r.random_range(0.0..0.5),
        };
        let alpha = Alpha {
            lambda_base: r.random_range(0.5..2.0),
            lambda_ord: r.random_range(0.5..3.0),
            t_ctr: r.random_range(0.5..2.0),
            t_ord: r.random_range(0.5..2.0),
        };
        let sides = |s: &Option<SampledPairs>| s.as_ref().map(|s| (s.positives.clone(), s.negatives.clone()));
        Ok(Instance {
            seed,
            dim,
            rank,
            adapter_down: adapter.down().to_vec(),
            adapter_up: adapter.up().to_vec(),
            scale: adapter.scale(),
            batch: members
                .iter()
                .map(|m| (m.anchor, sides(&m.contrastive), sides(&m.ordinal)))
                .collect(),
            corpus,
            params,
            alpha,
            members,
        })
    }

    pub fn adapter(&self) -> Adapter {
        Adapter::from_parts(self.dim, self.rank, self.scale, self.adapter_down.clone(), self.adapter_up.clone())
            .expect("instance shapes are consistent")
    }

    pub fn members(&self) -> &[BatchMember] {
        &self.members
    }

    /// Batch objective with every feature on (gated mixing).
    pub fn objective(&self, adapter: &Adapter) -> Result<f64> {
        Ok(backward(adapter, &self.corpus, &self.members, &self.params, &self.alpha, Mixing::Gated)?.loss)
    }

    pub fn analytic_gradient(&self) -> Result<Vec<f64>> {
        Ok(backward(
            &self.adapter(),
            &self.corpus,
            &self.members,
            &self.params,
            &self.alpha,
            Mixing::Gated,
        )?
        .grad
        .flat())
    }

    /// Central differences of the objective with step `h`.
    pub fn numeric_gradient(&self, h: f64) -> Result<Vec<f64>> {
        let adapter = self.adapter();
        let base = adapter.params();
        let mut out = Vec::with_capacity(base.len());
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] = base[k] + h;
            let mut plus = adapter.clone();
            plus.set_params(&p);
            p[k] = base[k] - h;
            let mut minus = adapter.clone();
            minus.set_params(&p);
            out.push((self.objective(&plus)? - self.objective(&minus)?) / (2.0 * h));
        }
        Ok(out)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Deliberate corruption of the analytic gradient, used to prove the checker
/// can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    SignFlip,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialResult {
    pub seed: u64,
    pub max_rel_error: f64,
    /// Down-projection gradient is exactly zero at initialization.
    pub structural_zero: bool,
    /// Two meta-gradient evaluations agree bit for bit.
    pub meta_reproducible: bool,
}

impl TrialResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.structural_zero && self.meta_reproducible
    }
}

pub fn run_trial(seed: u64, fault: Fault) -> Result<TrialResult> {
    let inst = Instance::random(seed, false)?;
    let mut analytic = inst.analytic_gradient()?;
    if fault == Fault::SignFlip {
        analytic.iter_mut().for_each(|g| *g = -*g);
    }
    let numeric = inst.numeric_gradient(FD_STEP)?;
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max);

    let at_init = Instance::random(seed, true)?;
    let structural_zero = backward(
        &at_init.adapter(),
        &at_init.corpus,
        at_init.members(),
        &at_init.params,
        &at_init.alpha,
        Mixing::Gated,
    )?
    .grad
    .d_down
    .iter()
    .all(|g| *g == 0.0);

    let adapter = inst.adapter();
    let eval = BatchEval::new(&adapter, &inst.corpus, inst.members(), &inst.params)?;
    let mut meta = MetaState::new(inst.alpha, 0.5, 0.01, 1e-3)?;
    meta.record_initial_losses(eval.mean_losses());
    let g1 = meta.meta_gradient(&eval, &adapter, &inst.corpus, Mixing::Gated)?;
    let g2 = meta.meta_gradient(&eval, &adapter, &inst.corpus, Mixing::Gated)?;
    let meta_reproducible = g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()) && g1.iter().all(|g| g.is_finite());

    Ok(TrialResult {
        seed,
        max_rel_error,
        structural_zero,
        meta_reproducible,
    })
}

/// Trial `i` uses seed `base_seed + i`.
pub fn run_trials(base_seed: u64, trials: usize, fault: Fault) -> Result<Vec<TrialResult>> {
    (0..trials as u64).map(|i| run_trial(base_seed.wrapping_add(i), fault)).collect()
}
