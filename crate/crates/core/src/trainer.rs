//! The two-stage protocol: structured representation learning on the
//! adapter, then multi-label `(category, action)` fine-tuning of the same
//! adapter with a linear head.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterGrad, BatchEval, BatchMember};
use crate::config::{Flag, OptimizerKind, TrainOptions, TrainingConfig};
use crate::corpus::{ActionLevel, Corpus, FoldSplit};
use crate::error::{Error, Result};
use crate::eval::{self, ClusteringStats, FoldScore, TupleSets};
use crate::metagradnorm::{grad_norms, MetaState};
use crate::objectives::{dot, Alpha, Term};
use crate::pairing::{contrastive_pairs, ordinal_pairs, sample_pairs, PairCache, PairSets};
use crate::rng;

const STREAM_VAL_SPLIT: u64 = 1;
const STREAM_STAGE1: u64 = 2;
const STREAM_VAL_PAIRS: u64 = 3;
const STREAM_STAGE2: u64 = 4;

fn stream(base: u64, fold_id: usize) -> u64 {
    base | (fold_id as u64) << 16
}

/// Parameter update rule for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u32,
    m: Vec<f64>,
    v: Vec<f64>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        let moments = if matches!(kind, OptimizerKind::Sgd) { 0 } else { n };
        Optimizer {
            kind,
            lr,
            t: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::Shape {
                expected: params.len(),
                found: grad.len(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        let decay = match self.kind {
            OptimizerKind::Sgd => {
                params.iter_mut().zip(grad).for_each(|(p, g)| *p -= self.lr * g);
                return Ok(());
            }
            OptimizerKind::Adam => 0.0,
            OptimizerKind::AdamW { weight_decay } => weight_decay,
        };
        if params.len() != self.m.len() {
            return Err(Error::Shape {
                expected: self.m.len(),
                found: params.len(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            params[i] -= self.lr * decay * params[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// One logit per `(category, action)` over the adapted unit embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    categories: Vec<String>,
    dim: usize,
    /// Row-major `(categories * 3) x dim`; row `c * 3 + action.rank()`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl TaskHead {
    pub fn zeros(categories: Vec<String>, dim: usize) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Empty("task head label space"));
        }
        let n = categories.len() * ActionLevel::ALL.len();
        Ok(TaskHead {
            categories,
            dim,
            weights: vec![0.0; n * dim],
            bias: vec![0.0; n],
        })
    }

    pub fn from_parts(categories: Vec<String>, dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let mut head = Self::zeros(categories, dim)?;
        if weights.len() != head.weights.len() || bias.len() != head.bias.len() {
            return Err(Error::Shape {
                expected: head.weights.len() + head.bias.len(),
                found: weights.len() + bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite task head parameter".into()));
        }
        head.weights = weights;
        head.bias = bias;
        Ok(head)
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn n_outputs(&self) -> usize {
        self.bias.len()
    }

    pub fn tuple(&self, output: usize) -> (String, ActionLevel) {
        let a = ActionLevel::from_rank((output % 3) as u8).expect("three actions");
        (self.categories[output / 3].clone(), a)
    }

    fn output_of(&self, category: &str, action: ActionLevel) -> Option<usize> {
        let c = self.categories.iter().position(|x| x == category)?;
        Some(c * 3 + action.rank() as usize)
    }

    pub fn logits(&self, unit: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(w, b)| dot(w, unit) + b)
            .collect()
    }

    fn params(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.bias).copied().collect()
    }

    fn set_params(&mut self, flat: &[f64]) {
        let (w, b) = flat.split_at(self.weights.len());
        self.weights.copy_from_slice(w);
        self.bias.copy_from_slice(b);
    }
}

/// Tuples whose logit clears `threshold` after the sigmoid.
pub fn predict_from_logits(head: &TaskHead, logits: &[f64], threshold: f64) -> BTreeSet<(String, ActionLevel)> {
    logits
        .iter()
        .enumerate()
        .filter(|(_, z)| sigmoid(**z) > threshold)
        .map(|(o, _)| head.tuple(o))
        .collect()
}

pub fn predict(adapter: &Adapter, head: &TaskHead, embedding: &[f64], threshold: f64) -> Result<BTreeSet<(String, ActionLevel)>> {
    let emb = adapter.embed(embedding)?;
    Ok(predict_from_logits(head, &head.logits(&emb.unit), threshold))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Note {
        stage: u8,
        message: String,
    },
    Batch {
        stage: u8,
        epoch: usize,
        batch: usize,
        l_ctr: f64,
        l_ord: f64,
        objective: f64,
    },
    MetaStep {
        step: usize,
        alpha: Alpha,
        g: [f64; 2],
        r: [f64; 2],
        g_star: [f64; 2],
        j: f64,
    },
    Epoch {
        stage: u8,
        epoch: usize,
        l_ctr: Option<f64>,
        l_ord: Option<f64>,
        l_task: Option<f64>,
        alpha: Option<Alpha>,
        grad_norms: Option<[f64; 2]>,
        val_metric: f64,
        best: bool,
    },
    Checksum {
        stage: u8,
        adapter: String,
    },
}

/// Append-only record list, written as one JSON object per line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn note(&mut self, stage: u8, message: impl Into<String>) {
        self.push(LogRecord::Note {
            stage,
            message: message.into(),
        });
    }

    pub fn extend(&mut self, other: RunLog) {
        self.records.extend(other.records);
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("log record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .enumerate()
            .map(|(i, line)| {
                // through Value: tagged enums cannot read arbitrary-precision numbers directly
                serde_json::from_str::<serde_json::Value>(line)
                    .and_then(serde_json::from_value)
                    .map_err(|e| Error::Malformed {
                        record: i + 1,
                        message: e.to_string(),
                    })
            })
            .collect::<Result<_>>()?;
        Ok(RunLog { records })
    }

    /// Stage-1 epoch records as `(epoch, l_ctr, l_ord)`.
    pub fn stage1_losses(&self) -> Vec<(usize, f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch {
                    stage: 1,
                    epoch,
                    l_ctr,
                    l_ord,
                    ..
                } => Some((*epoch, l_ctr.unwrap_or(0.0), l_ord.unwrap_or(0.0))),
                _ => None,
            })
            .collect()
    }

    /// Per-batch unweighted losses of stage 1 (requires `log_batches`).
    pub fn stage1_batches(&self) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Batch {
                    stage: 1, l_ctr, l_ord, ..
                } => Some((*l_ctr, *l_ord)),
                _ => None,
            })
            .collect()
    }
}

/// Train ids split into the part that is fitted and the validation part.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSplit {
    pub fit: Vec<usize>,
    pub val: Vec<usize>,
}

impl TrainSplit {
    pub fn new(corpus: &Corpus, fold: &FoldSplit, val_fraction: f64, seed: u64) -> Result<Self> {
        let mut train = corpus.indices_of(&fold.train_ids)?;
        if train.is_empty() {
            return Err(Error::Folds(format!("fold {} has an empty train split", fold.fold_id)));
        }
        train.shuffle(&mut rng::seeded(seed, stream(STREAM_VAL_SPLIT, fold.fold_id)));
        let n_val = ((train.len() as f64 * val_fraction).round() as usize).min(train.len() - 1);
        let mut val = train[..n_val].to_vec();
        let mut fit = train[n_val..].to_vec();
        val.sort_unstable();
        fit.sort_unstable();
        Ok(TrainSplit { fit, val })
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub adapter: Adapter,
    pub meta: Option<MetaState>,
    pub log: RunLog,
}

fn sample_member(ctr: &PairSets, ord: &PairSets, config: &TrainingConfig, rng: &mut impl Rng) -> Option<BatchMember> {
    let contrastive = sample_pairs(ctr, config.k_max, config.m_max, rng);
    let ordinal = if config.has(Flag::AddOrdinal) {
        sample_pairs(ord, config.k_max, config.m_max, rng).filter(|s| !s.negatives.is_empty())
    } else {
        None
    };
    if contrastive.is_none() && ordinal.is_none() {
        return None;
    }
    Some(BatchMember {
        anchor: ctr.anchor,
        contrastive,
        ordinal,
    })
}

/// Validation objective: unweighted mean of the enabled losses over fixed
/// validation batches.
fn val_objective(adapter: &Adapter, corpus: &Corpus, members: &[BatchMember], config: &TrainingConfig) -> Result<f64> {
    if members.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in members.chunks(config.batch_size) {
        let eval = BatchEval::new(adapter, corpus, chunk, &config.objective_params())?;
        total += eval.losses().iter().map(|(c, o)| c + o).sum::<f64>();
    }
    let v = total / members.len() as f64;
    if !v.is_finite() {
        return Err(Error::Numerical("non-finite validation objective".into()));
    }
    Ok(v)
}

/// Stage 1: contrastive (and, per the flags, ordinal) training of the
/// adapter with optional gating and meta-balancing. Keeps the adapter with
/// the best validation objective.
pub fn stage1_train(
    config: &TrainingConfig,
    options: &TrainOptions,
    corpus: &Corpus,
    split: &TrainSplit,
    adapter: Adapter,
    fold_id: usize,
) -> Result<Stage1Outcome> {
    let mut log = RunLog::default();
    let mixing = config.mixing();
    let params = config.objective_params();
    let cache = PairCache::build(corpus, &split.fit, config.granularity, options.parallel);
    let usable: Vec<usize> = (0..cache.len())
        .filter(|&i| {
            !cache.contrastive[i].positives.is_empty()
                || (config.has(Flag::AddOrdinal) && !cache.ordinal[i].positives.is_empty() && !cache.ordinal[i].negatives.is_empty())
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Empty("stage-1 anchors with positives"));
    }

    // fixed validation batches, drawn once against the fit pool
    let mut val_rng = rng::seeded(config.seed, stream(STREAM_VAL_PAIRS, fold_id));
    let mut val_members = Vec::new();
    for &a in &split.val {
        if !corpus.claim(a).is_labeled() {
            continue;
        }
        let ctr = contrastive_pairs(corpus, a, &split.fit, config.granularity)?;
        let ord = ordinal_pairs(corpus, a, &split.fit, config.granularity)?;
        if let Some(m) = sample_member(&ctr, &ord, config, &mut val_rng) {
            val_members.push(m);
        }
    }

    let mut meta = if config.has(Flag::AddMetagradnorm) {
        let mut m = MetaState::new(config.initial_alpha(), config.gamma, config.beta, config.eta_meta)?;
        m.gate_stop_gradient = options.gate_stop_gradient;
        Some(m)
    } else {
        None
    };
    let fixed_alpha = config.initial_alpha();
    log.note(
        1,
        format!(
            "stage 1: {} anchors usable of {}, {} validation anchors, mixing {:?}, balancer {}",
            usable.len(),
            cache.len(),
            val_members.len(),
            mixing,
            if meta.is_some() { "on" } else { "off" }
        ),
    );

    let mut adapter = adapter;
    let mut opt = Optimizer::new(options.optimizer, config.eta_theta, adapter.params().len());
    let mut rng = rng::seeded(config.seed, stream(STREAM_STAGE1, fold_id));
    let mut best = (
        val_objective(&adapter, corpus, &val_members, config)?,
        adapter.clone(),
        meta.clone(),
    );
    let mut since_best = 0usize;
    let mut order = usable.clone();
    let mut step = 0usize;
    let mut meta_steps = 0usize;

    for epoch in 1..=config.stage1_epochs {
        order.shuffle(&mut rng);
        let (mut sum_c, mut sum_o, mut sum_g, mut n_batches) = (0.0, 0.0, [0.0; 2], 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<BatchMember> = chunk
                .iter()
                .filter_map(|&i| sample_member(&cache.contrastive[i], &cache.ordinal[i], config, &mut rng))
                .collect();
            if batch.is_empty() {
                continue;
            }
            let eval = BatchEval::new(&adapter, corpus, &batch, &params)?;
            let (l_c, l_o) = eval.mean_losses();
            if let Some(m) = meta.as_mut() {
                m.record_initial_losses((l_c, l_o));
            }
            let alpha = meta.as_ref().map_or(fixed_alpha, |m| m.alpha());
            let objective = eval.objective(&alpha, mixing, Term::Both);
            if !objective.is_finite() {
                return Err(Error::Numerical(format!("non-finite stage-1 objective at epoch {epoch} batch {b}")));
            }
            let g = grad_norms(&eval, &adapter, corpus, &alpha, mixing, !options.gate_stop_gradient);
            let grad = eval.gradient(&adapter, corpus, &alpha, mixing, Term::Both, true);
            let mut flat = adapter.params();
            opt.step(&mut flat, &grad.flat())?;
            adapter.set_params(&flat);
            step += 1;

            if let Some(m) = meta.as_mut() {
                if step % options.meta_interval == 0 {
                    let eval = BatchEval::new(&adapter, corpus, &batch, &params)?;
                    let report = m.meta_step(&eval, &adapter, corpus, mixing)?;
                    meta_steps += 1;
                    log.push(LogRecord::MetaStep {
                        step: meta_steps,
                        alpha: report.alpha_after,
                        g: report.snapshot.g,
                        r: report.snapshot.r,
                        g_star: report.snapshot.g_star,
                        j: report.snapshot.j,
                    });
                }
            }
            if options.log_batches {
                log.push(LogRecord::Batch {
                    stage: 1,
                    epoch,
                    batch: b,
                    l_ctr: l_c,
                    l_ord: l_o,
                    objective,
                });
            }
            sum_c += l_c;
            sum_o += l_o;
            sum_g[0] += g[0];
            sum_g[1] += g[1];
            n_batches += 1;
        }
        let n = n_batches.max(1) as f64;
        let val = val_objective(&adapter, corpus, &val_members, config)?;
        // without validation members every epoch counts as the best so far
        let improved = val_members.is_empty() || val < best.0;
        if improved {
            best = (val, adapter.clone(), meta.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        log.push(LogRecord::Epoch {
            stage: 1,
            epoch,
            l_ctr: Some(sum_c / n),
            l_ord: config.has(Flag::AddOrdinal).then_some(sum_o / n),
            l_task: None,
            alpha: Some(meta.as_ref().map_or(fixed_alpha, |m| m.alpha())),
            grad_norms: Some([sum_g[0] / n, sum_g[1] / n]),
            val_metric: val,
            best: improved,
        });
        if since_best >= config.patience && config.patience > 0 {
            log.note(1, format!("early stop after epoch {epoch}"));
            break;
        }
    }
    let (_, adapter, meta) = best;
    log.push(LogRecord::Checksum {
        stage: 1,
        adapter: format!("{:016x}", adapter.checksum()),
    });
    Ok(Stage1Outcome { adapter, meta, log })
}

/// Gold `(category, action)` tuples for the given claims.
pub fn gold_tuples(corpus: &Corpus, indices: &[usize]) -> TupleSets {
    indices
        .iter()
        .map(|&i| {
            let c = corpus.claim(i);
            (c.id.clone(), c.category_tuples(corpus.taxonomy()))
        })
        .collect()
}

pub fn predict_all(adapter: &Adapter, head: &TaskHead, corpus: &Corpus, indices: &[usize], threshold: f64) -> Result<TupleSets> {
    indices
        .iter()
        .map(|&i| {
            let c = corpus.claim(i);
            Ok((c.id.clone(), predict(adapter, head, &c.embedding, threshold)?))
        })
        .collect()
}

/// Micro tuple F1 of the model on the given claims.
pub fn score(adapter: &Adapter, head: &TaskHead, corpus: &Corpus, indices: &[usize], threshold: f64) -> Result<f64> {
    let pred = predict_all(adapter, head, corpus, indices, threshold)?;
    eval::tuple_f1(&pred, &gold_tuples(corpus, indices))
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub adapter: Adapter,
    pub head: TaskHead,
    pub log: RunLog,
}

/// Stage 2: per-tuple logistic fine-tuning of a linear head and the adapter
/// together. Returns the pair with the best validation F1.
pub fn stage2_finetune(
    config: &TrainingConfig,
    options: &TrainOptions,
    corpus: &Corpus,
    split: &TrainSplit,
    adapter: Adapter,
    fold_id: usize,
) -> Result<Stage2Outcome> {
    let mut log = RunLog::default();
    let categories: Vec<String> = corpus.taxonomy().categories().into_iter().map(String::from).collect();
    let mut head = TaskHead::zeros(categories, corpus.dim())?;
    let mut adapter = adapter;
    log.push(LogRecord::Checksum {
        stage: 2,
        adapter: format!("{:016x}", adapter.checksum()),
    });
    let targets: BTreeMap<usize, Vec<usize>> = split
        .fit
        .iter()
        .map(|&i| {
            let outs = corpus
                .claim(i)
                .category_tuples(corpus.taxonomy())
                .iter()
                .filter_map(|(c, a)| head.output_of(c, *a))
                .collect();
            (i, outs)
        })
        .collect();

    let n_head = head.params().len();
    let mut opt_head = Optimizer::new(options.optimizer, config.eta_ft, n_head);
    let mut opt_adapter = Optimizer::new(options.optimizer, config.eta_ft, adapter.params().len());
    let mut rng = rng::seeded(config.seed, stream(STREAM_STAGE2, fold_id));
    let val_score = |a: &Adapter, h: &TaskHead| -> Result<f64> {
        if split.val.is_empty() {
            Ok(0.0)
        } else {
            score(a, h, corpus, &split.val, options.threshold)
        }
    };
    let mut best = (val_score(&adapter, &head)?, adapter.clone(), head.clone());
    let mut order = split.fit.clone();
    let n_out = head.n_outputs() as f64;

    for epoch in 1..=config.stage2_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut n_seen) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let inv_b = 1.0 / chunk.len() as f64;
            let mut g_head = vec![0.0; n_head];
            let mut g_adapter = AdapterGrad::zeros(adapter.dim(), adapter.rank());
            let n_w = head.weights.len();
            for &i in chunk {
                let x = &corpus.claim(i).embedding;
                let emb = adapter.embed(x)?;
                let z = head.logits(&emb.unit);
                let gold = &targets[&i];
                let mut grad_unit = vec![0.0; adapter.dim()];
                for (o, &zo) in z.iter().enumerate() {
                    let y = if gold.contains(&o) { 1.0 } else { 0.0 };
                    loss_sum += (softplus(zo) - y * zo) / n_out;
                    let dz = (sigmoid(zo) - y) / n_out * inv_b;
                    let w = &head.weights[o * head.dim..(o + 1) * head.dim];
                    for k in 0..head.dim {
                        g_head[o * head.dim + k] += dz * emb.unit[k];
                        grad_unit[k] += dz * w[k];
                    }
                    g_head[n_w + o] += dz;
                }
                adapter.accumulate(x, &emb, &grad_unit, &mut g_adapter);
                n_seen += 1;
            }
            let mut hp = head.params();
            opt_head.step(&mut hp, &g_head)?;
            let mut ap = adapter.params();
            opt_adapter.step(&mut ap, &g_adapter.flat())?;
            head.set_params(&hp);
            adapter.set_params(&ap);
        }
        let l_task = loss_sum / n_seen.max(1) as f64;
        if !l_task.is_finite() {
            return Err(Error::Numerical(format!("non-finite task loss at epoch {epoch}")));
        }
        let val = val_score(&adapter, &head)?;
        let improved = split.val.is_empty() || val > best.0;
        if improved {
            best = (val, adapter.clone(), head.clone());
        }
        log.push(LogRecord::Epoch {
            stage: 2,
            epoch,
            l_ctr: None,
            l_ord: None,
            l_task: Some(l_task),
            alpha: None,
            grad_norms: None,
            val_metric: val,
            best: improved,
        });
    }
    let (_, adapter, head) = best;
    Ok(Stage2Outcome { adapter, head, log })
}

/// Everything produced by training and scoring one fold.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub adapter: Adapter,
    pub head: TaskHead,
    pub meta: Option<MetaState>,
    pub log: RunLog,
    pub score: FoldScore,
}

/// Adapted unit embeddings and primary-category labels of the given claims.
pub fn adapted_clustering(adapter: &Adapter, corpus: &Corpus, indices: &[usize]) -> Result<ClusteringStats> {
    let points = indices
        .iter()
        .map(|&i| adapter.embed(&corpus.claim(i).embedding).map(|e| e.unit))
        .collect::<Result<Vec<_>>>()?;
    eval::clustering_stats(&points, &eval::primary_category_labels(corpus, indices))
}

/// Both stages on one fold, then seen/unseen scoring.
pub fn run_fold(config: &TrainingConfig, options: &TrainOptions, corpus: &Corpus, fold: &FoldSplit, clustering: bool) -> Result<FoldRun> {
    config.validate()?;
    options.validate()?;
    let split = TrainSplit::new(corpus, fold, options.val_fraction, config.seed)?;
    let init = Adapter::init(corpus.dim(), config.rank, config.lora_alpha, config.seed)?;
    let mut log = RunLog::default();
    log.note(
        0,
        format!(
            "fold {}: {} fit, {} validation, flags {:?}",
            fold.fold_id,
            split.fit.len(),
            split.val.len(),
            config.flags.iter().map(|f| f.as_str()).collect::<Vec<_>>()
        ),
    );
    let (adapter, meta) = if config.structured() {
        let s1 = stage1_train(config, options, corpus, &split, init.clone(), fold.fold_id)?;
        log.extend(s1.log);
        (s1.adapter, s1.meta)
    } else {
        log.note(1, "stage 1 skipped (no flags)");
        (init.clone(), None)
    };
    let stage2_start = if options.reinit_adapter_stage2 {
        log.note(2, "stage 2 starts from a reinitialized adapter");
        init
    } else {
        log.note(2, "stage 2 continues the stage-1 adapter");
        adapter
    };
    log.note(2, "stage 2 is single-objective; the meta-balancer is inactive");
    let s2 = stage2_finetune(config, options, corpus, &split, stage2_start, fold.fold_id)?;
    log.extend(s2.log);

    let seen = corpus.indices_of(&fold.seen_test_ids)?;
    let unseen = corpus.indices_of(&fold.unseen_test_ids)?;
    let seen_f1 = score(&s2.adapter, &s2.head, corpus, &seen, options.threshold)?;
    let unseen_f1 = score(&s2.adapter, &s2.head, corpus, &unseen, options.threshold)?;
    let clustering = if clustering {
        Some(adapted_clustering(&s2.adapter, corpus, &corpus.indices_of(&fold.train_ids)?)?)
    } else {
        None
    };
    Ok(FoldRun {
        adapter: s2.adapter,
        head: s2.head,
        meta,
        log,
        score: FoldScore {
            fold_id: fold.fold_id,
            seen_f1,
            unseen_f1,
            clustering,
        },
    })
}

/// [`run_fold`] over several folds. Folds are independent, so running them
/// in parallel gives the same results as running them in order.
pub fn run_folds(
    config: &TrainingConfig,
    options: &TrainOptions,
    corpus: &Corpus,
    folds: &[FoldSplit],
    clustering: bool,
) -> Result<Vec<FoldRun>> {
    if options.parallel {
        folds.par_iter().map(|f| run_fold(config, options, corpus, f, clustering)).collect()
    } else {
        folds.iter().map(|f| run_fold(config, options, corpus, f, clustering)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, make_folds, Claim, Label, SyntheticSpec, Taxonomy};

    fn small_config() -> TrainingConfig {
        TrainingConfig {
            stage1_epochs: 3,
            stage2_epochs: 3,
            ..TrainingConfig::desk()
        }
    }

    fn small_corpus(noise: f64, seed: u64) -> Corpus {
        let spec = SyntheticSpec {
            n_categories: 4,
            n_claims: 120,
            dim: 12,
            noise_sigma: noise,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec, seed).unwrap()
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, 3);
        let mut p = vec![1.0, 1.0, 1.0];
        opt.step(&mut p, &[2.0, -0.5, 0.0]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] - 1.1).abs() < 1e-7);
        assert_eq!(p[2], 1.0);
        assert!(opt.step(&mut p, &[f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn prediction_thresholds() {
        let head = TaskHead::from_parts(
            vec!["a".into(), "b".into()],
            2,
            vec![0.0; 12],
            vec![-9.0, 5.0, -9.0, -9.0, -9.0, 0.3],
        )
        .unwrap();
        let logits = head.logits(&[1.0, 0.0]);
        let got = predict_from_logits(&head, &logits, 0.5);
        let want: BTreeSet<_> = [
            ("a".to_string(), ActionLevel::Planning),
            ("b".to_string(), ActionLevel::Implemented),
        ]
        .into();
        assert_eq!(got, want);
        let none = TaskHead::from_parts(vec!["a".into()], 2, vec![0.0; 6], vec![-20.0; 3]).unwrap();
        assert!(predict_from_logits(&none, &none.logits(&[0.0, 1.0]), 0.5).is_empty());
        assert!(TaskHead::zeros(vec![], 2).is_err());
    }

    #[test]
    fn stage1_contrastive_loss_decreases() {
        let corpus = small_corpus(0.3, 3);
        let fold = FoldSplit::full(&corpus, 0.2, 1).unwrap();
        let config = TrainingConfig {
            flags: vec![Flag::ContrastiveOnly],
            stage1_epochs: 6,
            patience: 0,
            ..small_config()
        };
        // no validation anchors: the last adapter is kept
        let split = TrainSplit {
            fit: corpus.indices_of(&fold.train_ids).unwrap(),
            val: vec![],
        };
        let init = Adapter::init(corpus.dim(), config.rank, config.lora_alpha, config.seed).unwrap();
        let out = stage1_train(&config, &TrainOptions::default(), &corpus, &split, init.clone(), 0).unwrap();
        assert_eq!(out.log.stage1_losses().len(), 6);

        // same sampled pairs before and after training
        let mut rng = rng::seeded(99, 0);
        let members: Vec<BatchMember> = split
            .fit
            .iter()
            .filter_map(|&a| {
                let ctr = contrastive_pairs(&corpus, a, &split.fit, config.granularity).unwrap();
                let ord = ordinal_pairs(&corpus, a, &split.fit, config.granularity).unwrap();
                sample_member(&ctr, &ord, &config, &mut rng)
            })
            .collect();
        let before = val_objective(&init, &corpus, &members, &config).unwrap();
        let after = val_objective(&out.adapter, &corpus, &members, &config).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn stage1_requires_positives() {
        let tax = Taxonomy::from_pairs([("a", "A"), ("b", "B")]).unwrap();
        let claims = vec![
            Claim::new("x", vec![1.0, 0.0, 0.0], vec![Label::new("a", ActionLevel::Planning)]),
            Claim::new("y", vec![0.0, 1.0, 0.0], vec![Label::new("b", ActionLevel::Indeterminate)]),
            Claim::new("z", vec![0.0, 0.0, 1.0], vec![]),
        ];
        let corpus = Corpus::new(claims, tax).unwrap();
        let split = TrainSplit {
            fit: vec![0, 1, 2],
            val: vec![],
        };
        let config = TrainingConfig {
            flags: vec![Flag::ContrastiveOnly],
            ..small_config()
        };
        let init = Adapter::init(3, 2, 2.0, 1).unwrap();
        let err = stage1_train(&config, &TrainOptions::default(), &corpus, &split, init, 0).unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
    }

    #[test]
    fn run_is_deterministic_and_continuous() {
        let corpus = small_corpus(0.1, 5);
        let folds = make_folds(&corpus, 2, 2, 0.2, 155).unwrap();
        let config = small_config();
        let opts = TrainOptions {
            log_batches: true,
            ..TrainOptions::default()
        };
        let a = run_fold(&config, &opts, &corpus, &folds[0], true).unwrap();
        let b = run_fold(
            &config,
            &TrainOptions {
                parallel: false,
                ..opts.clone()
            },
            &corpus,
            &folds[0],
            true,
        )
        .unwrap();
        assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
        assert_eq!(a.adapter, b.adapter);
        assert_eq!(a.head, b.head);

        let sums: Vec<&String> = a
            .log
            .records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Checksum { adapter, .. } => Some(adapter),
                _ => None,
            })
            .collect();
        assert_eq!(sums.len(), 2);
        assert_eq!(sums[0], sums[1]);
        assert!(a.log.records.iter().any(|r| matches!(r, LogRecord::MetaStep { .. })));
        assert!((0.0..=1.0).contains(&a.score.seen_f1));
    }

    #[test]
    fn log_round_trips() {
        let corpus = small_corpus(0.1, 6);
        let fold = FoldSplit::full(&corpus, 0.2, 2).unwrap();
        let run = run_fold(&small_config(), &TrainOptions::default(), &corpus, &fold, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        run.log.save(&p).unwrap();
        assert_eq!(RunLog::load(&p).unwrap().to_jsonl(), run.log.to_jsonl());
    }

    #[test]
    fn stage2_fits_separable_data() {
        let spec = SyntheticSpec {
            n_categories: 2,
            aspects_per_category: 1,
            n_claims: 80,
            dim: 8,
            noise_sigma: 0.0,
            dual_fraction: 0.0,
            ..SyntheticSpec::default()
        };
        let corpus = generate_synthetic(&spec, 11).unwrap();
        let fold = FoldSplit::full(&corpus, 0.2, 1).unwrap();
        let config = TrainingConfig {
            flags: vec![],
            stage2_epochs: 50,
            eta_ft: 0.03,
            ..TrainingConfig::desk()
        };
        let split = TrainSplit {
            fit: corpus.indices_of(&fold.train_ids).unwrap(),
            val: vec![],
        };
        let init = Adapter::init(corpus.dim(), config.rank, config.lora_alpha, config.seed).unwrap();
        let out = stage2_finetune(&config, &TrainOptions::default(), &corpus, &split, init, 0).unwrap();
        let f1 = score(&out.adapter, &out.head, &corpus, &split.fit, 0.5).unwrap();
        assert!(f1 >= 0.95, "train F1 {f1}");
    }
}
