//! Tuple-level F1, seen/unseen aggregation and representation-geometry
//! statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ActionLevel, Corpus};
use crate::error::{Error, Result};
use crate::objectives::{dot, l2};

pub type Tuple = (String, ActionLevel);
pub type TupleSets = BTreeMap<String, BTreeSet<Tuple>>;

/// Value reported for Calinski-Harabasz when the within-cluster dispersion
/// is zero.
pub const CH_SENTINEL: f64 = 1e12;

/// Human-readable definition of the separation index, written into reports.
pub const SEPARATION_DEFINITION: &str =
    "mean pairwise cosine distance between cluster centroids / (that + mean cosine distance of points to their own centroid)";

/// Micro-averaged F1 over `(claim, category, action)` triples.
///
/// Both maps must cover the same claim ids. If neither side has a single
/// tuple the score is 1.
pub fn tuple_f1(predictions: &TupleSets, gold: &TupleSets) -> Result<f64> {
    if predictions.len() != gold.len() || predictions.keys().zip(gold.keys()).any(|(a, b)| a != b) {
        return Err(Error::Eval("prediction and gold claim ids differ".into()));
    }
    let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (p, g) in predictions.values().zip(gold.values()) {
        tp += p.intersection(g).count();
        n_pred += p.len();
        n_gold += g.len();
    }
    if n_pred + n_gold == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (n_pred + n_gold) as f64)
}

mod fixed6 {
    use serde::{Serialize, Serializer};
    use std::str::FromStr;

    fn number(v: f64) -> serde_json::Number {
        // avoid "-0.000000"
        let v = if (v * 1e6).round() == 0.0 { 0.0 } else { v };
        serde_json::Number::from_str(&format!("{v:.6}")).expect("finite decimal")
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        number(*v).serialize(s)
    }

    pub fn option<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(number).serialize(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringStats {
    #[serde(serialize_with = "fixed6::serialize")]
    pub silhouette: f64,
    #[serde(serialize_with = "fixed6::serialize")]
    pub calinski_harabasz: f64,
    /// Set when the within-cluster dispersion was zero and the sentinel used.
    pub calinski_harabasz_degenerate: bool,
    #[serde(serialize_with = "fixed6::serialize")]
    pub separation_ratio: f64,
    pub n_points: usize,
    pub n_clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold_id: usize,
    #[serde(serialize_with = "fixed6::serialize")]
    pub seen_f1: f64,
    #[serde(serialize_with = "fixed6::serialize")]
    pub unseen_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clustering: Option<ClusteringStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(serialize_with = "fixed6::option")]
    pub full_f1: Option<f64>,
    pub folds: Vec<FoldScore>,
    #[serde(serialize_with = "fixed6::serialize")]
    pub s_avg: f64,
    #[serde(serialize_with = "fixed6::serialize")]
    pub us_avg: f64,
    #[serde(serialize_with = "fixed6::serialize")]
    pub delta: f64,
    pub clustering_computed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation_definition: Option<String>,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Aggregates per-fold seen/unseen scores. All `n_folds` folds, with ids
/// `0..n_folds`, must be present.
pub fn seen_unseen_report(mut folds: Vec<FoldScore>, n_folds: usize, full_f1: Option<f64>) -> Result<EvalReport> {
    folds.sort_by_key(|f| f.fold_id);
    let ids: Vec<usize> = folds.iter().map(|f| f.fold_id).collect();
    if n_folds == 0 || ids != (0..n_folds).collect::<Vec<_>>() {
        return Err(Error::Eval(format!("expected folds 0..{n_folds}, got {ids:?}")));
    }
    for v in folds.iter().flat_map(|f| [f.seen_f1, f.unseen_f1]).chain(full_f1) {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Eval(format!("F1 value {v} outside [0, 1]")));
        }
    }
    let n = folds.len() as f64;
    // averages are taken over the values as reported (6 decimals) so that the
    // file's delta is exactly us_avg - s_avg of the file's own numbers
    let s_avg = round6(folds.iter().map(|f| round6(f.seen_f1)).sum::<f64>() / n);
    let us_avg = round6(folds.iter().map(|f| round6(f.unseen_f1)).sum::<f64>() / n);
    let clustering_computed = folds.iter().any(|f| f.clustering.is_some());
    Ok(EvalReport {
        full_f1,
        folds,
        s_avg,
        us_avg,
        delta: round6(us_avg - s_avg),
        clustering_computed,
        separation_definition: clustering_computed.then(|| SEPARATION_DEFINITION.to_string()),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Eval(format!("report parse: {e}")))
    }

    /// One row in the column layout `Full, F1 S, F1 US, ..., S Avg, US Avg, Delta`.
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["full".to_string()];
        for f in &self.folds {
            cols.push(format!("f{}_s", f.fold_id + 1));
            cols.push(format!("f{}_us", f.fold_id + 1));
        }
        cols.extend(["s_avg".into(), "us_avg".into(), "delta".into()]);
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let pct = |v: f64| format!("{:.2}", v * 100.0);
        let mut cols = vec![self.full_f1.map(pct).unwrap_or_default()];
        for f in &self.folds {
            cols.push(pct(f.seen_f1));
            cols.push(pct(f.unseen_f1));
        }
        cols.extend([pct(self.s_avg), pct(self.us_avg), pct(self.delta)]);
        cols.join(",")
    }
}

pub fn emit_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, report.to_json()).map_err(|e| Error::io(path, e))
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

fn check_clusters(points: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if points.len() != labels.len() {
        return Err(Error::Eval(format!("{} points but {} labels", points.len(), labels.len())));
    }
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Eval(format!("need at least 2 clusters, found {}", distinct.len())));
    }
    Ok(distinct.len())
}

/// Mean silhouette coefficient under cosine distance. Points in singleton
/// clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_clusters(points, labels)?;
    let clusters: BTreeSet<usize> = labels.iter().copied().collect();
    let sizes: BTreeMap<usize, usize> = clusters.iter().map(|&c| (c, labels.iter().filter(|&&l| l == c).count())).collect();
    let scores: Vec<f64> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if sizes[&own] == 1 {
                return 0.0;
            }
            let mut sums: BTreeMap<usize, f64> = clusters.iter().map(|&c| (c, 0.0)).collect();
            for j in 0..points.len() {
                if j != i {
                    *sums.get_mut(&labels[j]).expect("known cluster") += cosine_distance(&points[i], &points[j]);
                }
            }
            let a = sums[&own] / (sizes[&own] - 1) as f64;
            let b = clusters
                .iter()
                .filter(|&&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn centroids(points: &[Vec<f64>], labels: &[usize]) -> BTreeMap<usize, (Vec<f64>, usize)> {
    let d = points[0].len();
    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (p, &l) in points.iter().zip(labels) {
        let e = acc.entry(l).or_insert_with(|| (vec![0.0; d], 0));
        e.0.iter_mut().zip(p).for_each(|(a, x)| *a += x);
        e.1 += 1;
    }
    for (c, n) in acc.values_mut() {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    acc
}

/// Calinski-Harabasz index with Euclidean dispersion. Returns the value and
/// whether the zero-within-dispersion sentinel was used.
pub fn calinski_harabasz(points: &[Vec<f64>], labels: &[usize]) -> Result<(f64, bool)> {
    let k = check_clusters(points, labels)?;
    let n = points.len();
    if n <= k {
        return Err(Error::Eval(format!(
            "calinski-harabasz needs more points ({n}) than clusters ({k})"
        )));
    }
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        mean.iter_mut().zip(p).for_each(|(m, x)| *m += x / n as f64);
    }
    let cents = centroids(points, labels);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let between: f64 = cents.values().map(|(c, size)| *size as f64 * sq(c, &mean)).sum();
    let within: f64 = points.iter().zip(labels).map(|(p, l)| sq(p, &cents[l].0)).sum();
    if within <= 0.0 {
        return Ok((CH_SENTINEL, true));
    }
    Ok(((between / (k - 1) as f64) / (within / (n - k) as f64), false))
}

/// Separation index in `[0, 1]`; see [`SEPARATION_DEFINITION`].
pub fn separation_ratio(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_clusters(points, labels)?;
    let cents = centroids(points, labels);
    let list: Vec<&Vec<f64>> = cents.values().map(|(c, _)| c).collect();
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for i in 0..list.len() {
        for j in i + 1..list.len() {
            inter += cosine_distance(list[i], list[j]);
            pairs += 1;
        }
    }
    let inter = inter / pairs as f64;
    let intra = points.iter().zip(labels).map(|(p, l)| cosine_distance(p, &cents[l].0)).sum::<f64>() / points.len() as f64;
    if inter + intra <= 0.0 {
        return Ok(0.0);
    }
    Ok(inter / (inter + intra))
}

/// Cluster label per claim: index of the first label's category in sorted
/// category order; unlabeled claims share one extra cluster.
pub fn primary_category_labels(corpus: &Corpus, indices: &[usize]) -> Vec<usize> {
    let cats: Vec<&str> = corpus.taxonomy().categories().into_iter().collect();
    indices
        .iter()
        .map(|&i| {
            corpus
                .claim(i)
                .labels
                .first()
                .and_then(|l| corpus.taxonomy().category_of(&l.aspect))
                .and_then(|c| cats.iter().position(|x| *x == c))
                .unwrap_or(cats.len())
        })
        .collect()
}

pub fn clustering_stats(points: &[Vec<f64>], labels: &[usize]) -> Result<ClusteringStats> {
    let (ch, degenerate) = calinski_harabasz(points, labels)?;
    Ok(ClusteringStats {
        silhouette: silhouette(points, labels)?,
        calinski_harabasz: ch,
        calinski_harabasz_degenerate: degenerate,
        separation_ratio: separation_ratio(points, labels)?,
        n_points: points.len(),
        n_clusters: labels.iter().collect::<BTreeSet<_>>().len(),
    })
}
