//! Low-rank residual adapter over frozen embeddings, and the exact gradient
//! of the batch objective with respect to its two factors.
//!
//! `adapted(x) = x + scale * B (A x)` with `A: r x d`, `B: d x r`, both stored
//! row-major. `B` starts at zero so the adapted space starts out identical to
//! the base space.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand_distr::{Distribution, Normal};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::objectives::{
    contrastive_from_sims, dot, l2, ordinal_from_sims, term_coefficients, term_value, Alpha, Mixing, ObjectiveParams, PerSampleLosses,
    Term, EPS_NORM,
};
use crate::pairing::SampledPairs;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    dim: usize,
    rank: usize,
    scale: f64,
    /// `r x d`, row-major.
    down: Vec<f64>,
    /// `d x r`, row-major.
    up: Vec<f64>,
}

/// Gradient blocks matching an [`Adapter`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub d_down: Vec<f64>,
    pub d_up: Vec<f64>,
}

impl AdapterGrad {
    pub fn zeros(dim: usize, rank: usize) -> Self {
        AdapterGrad {
            d_down: vec![0.0; rank * dim],
            d_up: vec![0.0; dim * rank],
        }
    }

    pub fn norm(&self) -> f64 {
        self.d_down.iter().chain(&self.d_up).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.d_down.iter_mut().chain(self.d_up.iter_mut()).for_each(|g| *g *= c);
        self
    }

    pub fn is_finite(&self) -> bool {
        self.d_down.iter().chain(&self.d_up).all(|g| g.is_finite())
    }

    /// Flattened view: down block then up block.
    pub fn flat(&self) -> Vec<f64> {
        self.d_down.iter().chain(&self.d_up).copied().collect()
    }
}

/// Forward intermediates for one embedded claim.
#[derive(Debug, Clone)]
pub struct Embedded {
    /// `A x`
    pub h: Vec<f64>,
    /// normalized adapted vector
    pub unit: Vec<f64>,
    /// norm of the adapted vector before normalization
    pub norm: f64,
}

impl Adapter {
    /// `A ~ N(0, 1/r)` elementwise, `B = 0`, `scale = lora_alpha / r`.
    pub fn init(dim: usize, rank: usize, lora_alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 || rank > dim {
            return Err(Error::InvalidParam(format!("rank {rank} must be in 1..={dim}")));
        }
        if !lora_alpha.is_finite() {
            return Err(Error::InvalidParam(format!("lora_alpha = {lora_alpha}")));
        }
        let normal = Normal::new(0.0, (1.0 / rank as f64).sqrt()).expect("valid std");
        let mut r = rng::seeded(seed, 0xADA9_7E50);
        let down = (0..rank * dim).map(|_| normal.sample(&mut r)).collect();
        Ok(Adapter {
            dim,
            rank,
            scale: lora_alpha / rank as f64,
            down,
            up: vec![0.0; dim * rank],
        })
    }

    pub fn from_parts(dim: usize, rank: usize, scale: f64, down: Vec<f64>, up: Vec<f64>) -> Result<Self> {
        if down.len() != rank * dim {
            return Err(Error::Shape {
                expected: rank * dim,
                found: down.len(),
            });
        }
        if up.len() != dim * rank {
            return Err(Error::Shape {
                expected: dim * rank,
                found: up.len(),
            });
        }
        Ok(Adapter {
            dim,
            rank,
            scale,
            down,
            up,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn down(&self) -> &[f64] {
        &self.down
    }

    pub fn up(&self) -> &[f64] {
        &self.up
    }

    pub fn down_mut(&mut self) -> &mut [f64] {
        &mut self.down
    }

    pub fn up_mut(&mut self) -> &mut [f64] {
        &mut self.up
    }

    pub fn set_scale(&mut self, scale: f64) {
        self.scale = scale;
    }

    /// Parameters flattened: down block then up block.
    pub fn params(&self) -> Vec<f64> {
        self.down.iter().chain(&self.up).copied().collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.down.len() + self.up.len());
        let (d, u) = flat.split_at(self.down.len());
        self.down.copy_from_slice(d);
        self.up.copy_from_slice(u);
    }

    /// Order-sensitive hash of the exact bit patterns of all parameters.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        (self.dim, self.rank, self.scale.to_bits()).hash(&mut h);
        for v in self.down.iter().chain(&self.up) {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    fn project_down(&self, x: &[f64]) -> Vec<f64> {
        self.down.chunks_exact(self.dim).map(|row| dot(row, x)).collect()
    }

    /// `x + scale * B A x` (not normalized).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let h = self.project_down(x);
        Ok(self.lift(x, &h))
    }

    fn lift(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.up.chunks_exact(self.rank))
            .map(|(xi, row)| xi + self.scale * dot(row, h))
            .collect()
    }

    /// Adapted and normalized embedding with the intermediates needed for
    /// backpropagation.
    pub fn embed(&self, x: &[f64]) -> Result<Embedded> {
        self.check_dim(x)?;
        let h = self.project_down(x);
        let z = self.lift(x, &h);
        let norm = l2(&z);
        if !(norm > EPS_NORM) {
            return Err(Error::NearZero(norm));
        }
        let unit = z.iter().map(|v| v / norm).collect();
        Ok(Embedded { h, unit, norm })
    }

    /// Adds the parameter gradient induced by `grad_unit = dL/d(unit)` for one
    /// embedded input `x` into `out`.
    pub fn accumulate(&self, x: &[f64], emb: &Embedded, grad_unit: &[f64], out: &mut AdapterGrad) {
        let (d, r, s) = (self.dim, self.rank, self.scale);
        // through normalization: dz = (g - u (u.g)) / |z|
        let ug = dot(&emb.unit, grad_unit);
        let dz: Vec<f64> = grad_unit.iter().zip(&emb.unit).map(|(g, u)| (g - u * ug) / emb.norm).collect();
        // z = x + s B h
        for i in 0..d {
            let row = &mut out.d_up[i * r..(i + 1) * r];
            for k in 0..r {
                row[k] += s * dz[i] * emb.h[k];
            }
        }
        // h = A x, dL/dh = s B^T dz
        for k in 0..r {
            let mut bt_dz = 0.0;
            for i in 0..d {
                bt_dz += self.up[i * r + k] * dz[i];
            }
            let coef = s * bt_dz;
            if coef != 0.0 {
                let row = &mut out.d_down[k * d..(k + 1) * d];
                for j in 0..d {
                    row[j] += coef * x[j];
                }
            }
        }
    }

    /// Plain gradient step. Rejects non-finite gradients without touching
    /// the adapter.
    pub fn sgd_step(&mut self, grad: &AdapterGrad, eta: f64) -> Result<()> {
        if !(eta > 0.0) {
            return Err(Error::InvalidParam(format!("learning rate {eta} must be > 0")));
        }
        if grad.d_down.len() != self.down.len() || grad.d_up.len() != self.up.len() {
            return Err(Error::Shape {
                expected: self.down.len() + self.up.len(),
                found: grad.d_down.len() + grad.d_up.len(),
            });
        }
        if !grad.is_finite() {
            return Err(Error::Numerical("non-finite adapter gradient".into()));
        }
        self.down.iter_mut().zip(&grad.d_down).for_each(|(p, g)| *p -= eta * g);
        self.up.iter_mut().zip(&grad.d_up).for_each(|(p, g)| *p -= eta * g);
        Ok(())
    }
}

/// One anchor in a training batch with whichever objectives it has pairs for.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMember {
    pub anchor: usize,
    pub contrastive: Option<SampledPairs>,
    /// Present only when both positives and negatives were drawn.
    pub ordinal: Option<SampledPairs>,
}

#[derive(Debug, Clone)]
struct SampleTerms {
    l_ctr: f64,
    l_ord: f64,
    /// `(claim, dl/dsim)` for the anchor-to-claim similarities.
    d_ctr: Vec<(usize, f64)>,
    d_ord: Vec<(usize, f64)>,
    anchor: usize,
}

/// Forward pass of a batch: per-sample losses plus the similarity
/// derivatives needed to produce any term's gradient.
///
/// Losses and their derivatives do not depend on the meta-parameters, so one
/// evaluation serves every `(alpha, mixing, term)` combination.
#[derive(Debug, Clone)]
pub struct BatchEval {
    embedded: BTreeMap<usize, Embedded>,
    samples: Vec<SampleTerms>,
}

impl BatchEval {
    pub fn new(adapter: &Adapter, corpus: &Corpus, batch: &[BatchMember], params: &ObjectiveParams) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        params.validate()?;
        let mut embedded = BTreeMap::new();
        for m in batch {
            let ids = std::iter::once(m.anchor).chain(
                m.contrastive
                    .iter()
                    .chain(m.ordinal.iter())
                    .flat_map(|s| s.positives.iter().chain(&s.negatives).copied()),
            );
            for i in ids {
                if let std::collections::btree_map::Entry::Vacant(e) = embedded.entry(i) {
                    e.insert(adapter.embed(&corpus.claim(i).embedding)?);
                }
            }
        }
        let sim = |a: usize, j: usize| dot(&embedded[&a].unit, &embedded[&j].unit).clamp(-1.0, 1.0);

        let mut samples = Vec::with_capacity(batch.len());
        for m in batch {
            let a = m.anchor;
            let mut terms = SampleTerms {
                l_ctr: 0.0,
                l_ord: 0.0,
                d_ctr: Vec::new(),
                d_ord: Vec::new(),
                anchor: a,
            };
            if let Some(s) = &m.contrastive {
                let pos: Vec<f64> = s.positives.iter().map(|&j| sim(a, j)).collect();
                let neg: Vec<f64> = s.negatives.iter().map(|&j| sim(a, j)).collect();
                let l = contrastive_from_sims(&pos, &neg, params.tau)?;
                terms.l_ctr = l.value;
                terms.d_ctr = s
                    .positives
                    .iter()
                    .copied()
                    .zip(l.d_pos)
                    .chain(s.negatives.iter().copied().zip(l.d_neg))
                    .collect();
            }
            if let Some(s) = &m.ordinal {
                let pos: Vec<f64> = s.positives.iter().map(|&j| sim(a, j)).collect();
                let neg: Vec<f64> = s.negatives.iter().map(|&j| sim(a, j)).collect();
                let l = ordinal_from_sims(&pos, &neg, params.margin_m0)?;
                terms.l_ord = l.value;
                terms.d_ord = s
                    .positives
                    .iter()
                    .copied()
                    .zip(l.d_pos)
                    .chain(s.negatives.iter().copied().zip(l.d_neg))
                    .collect();
            }
            if !(terms.l_ctr.is_finite() && terms.l_ord.is_finite()) {
                return Err(Error::Numerical(format!("non-finite loss for anchor {a}")));
            }
            samples.push(terms);
        }
        Ok(BatchEval { embedded, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Unweighted `(l_ctr, l_ord)` per sample; a missing objective counts as 0.
    pub fn losses(&self) -> Vec<(f64, f64)> {
        self.samples.iter().map(|s| (s.l_ctr, s.l_ord)).collect()
    }

    /// Unweighted batch means `(L_ctr, L_ord)`.
    pub fn mean_losses(&self) -> (f64, f64) {
        let b = self.samples.len() as f64;
        let (c, o) = self.samples.iter().fold((0.0, 0.0), |(c, o), s| (c + s.l_ctr, o + s.l_ord));
        (c / b, o / b)
    }

    pub fn per_sample(&self, alpha: &Alpha, mixing: Mixing) -> Vec<PerSampleLosses> {
        self.samples
            .iter()
            .map(|s| PerSampleLosses {
                l_ctr: s.l_ctr,
                l_ord: s.l_ord,
                gate: crate::objectives::mix_weights(s.l_ctr, s.l_ord, alpha, mixing),
            })
            .collect()
    }

    /// Batch mean of the chosen term.
    pub fn objective(&self, alpha: &Alpha, mixing: Mixing, term: Term) -> f64 {
        let sum: f64 = self.samples.iter().map(|s| term_value(s.l_ctr, s.l_ord, alpha, mixing, term)).sum();
        sum / self.samples.len() as f64
    }

    /// Gradient of [`BatchEval::objective`] with respect to the adapter.
    pub fn gradient(
        &self,
        adapter: &Adapter,
        corpus: &Corpus,
        alpha: &Alpha,
        mixing: Mixing,
        term: Term,
        through_gate: bool,
    ) -> AdapterGrad {
        let d = adapter.dim();
        let inv_b = 1.0 / self.samples.len() as f64;
        let mut unit_grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for s in &self.samples {
            let (cc, co) = term_coefficients(s.l_ctr, s.l_ord, alpha, mixing, term, through_gate);
            let a = s.anchor;
            let pairs = s
                .d_ctr
                .iter()
                .map(|&(j, g)| (j, cc * g))
                .chain(s.d_ord.iter().map(|&(j, g)| (j, co * g)));
            for (j, g) in pairs {
                let g = g * inv_b;
                if g == 0.0 {
                    continue;
                }
                // d sim(a, j) / d unit_a = unit_j and vice versa
                let (ua, uj) = (&self.embedded[&a].unit, &self.embedded[&j].unit);
                let ga = unit_grads.entry(a).or_insert_with(|| vec![0.0; d]);
                ga.iter_mut().zip(uj).for_each(|(x, u)| *x += g * u);
                let gj = unit_grads.entry(j).or_insert_with(|| vec![0.0; d]);
                gj.iter_mut().zip(ua).for_each(|(x, u)| *x += g * u);
            }
        }
        let mut out = AdapterGrad::zeros(d, adapter.rank());
        for (i, g) in &unit_grads {
            adapter.accumulate(&corpus.claim(*i).embedding, &self.embedded[i], g, &mut out);
        }
        out
    }
}

/// Diagnostics returned with a backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub grad: AdapterGrad,
    pub samples: Vec<PerSampleLosses>,
}

/// Loss and exact gradient of the full batch objective.
pub fn backward(
    adapter: &Adapter,
    corpus: &Corpus,
    batch: &[BatchMember],
    params: &ObjectiveParams,
    alpha: &Alpha,
    mixing: Mixing,
) -> Result<Backward> {
    let eval = BatchEval::new(adapter, corpus, batch, params)?;
    let grad = eval.gradient(adapter, corpus, alpha, mixing, Term::Both, true);
    if !grad.is_finite() {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    Ok(Backward {
        loss: eval.objective(alpha, mixing, Term::Both),
        grad,
        samples: eval.per_sample(alpha, mixing),
    })
}
