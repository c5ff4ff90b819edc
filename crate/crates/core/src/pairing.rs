//! Positive/negative set construction for the contrastive and ordinal
//! objectives, plus bounded per-anchor sampling.
//!
//! Contrastive: `j` is a positive for anchor `i` when their `(key, action)`
//! label sets intersect; every other pool member is a negative.
//!
//! Ordinal: `j` is a positive when some shared key `k` has
//! `d_j(k) == transition(d_i(k))`; everything else (including candidates
//! sharing no key) is a negative.
//!
//! All lists are ordered by corpus index. Sampling randomness comes from a
//! single caller-owned generator.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeSet;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_label_dict, ActionLevel, Corpus, Granularity, LabelDict};
use crate::error::{Error, Result};

/// Which action level counts as an ordinal positive relative to the anchor's.
pub fn transition(a: ActionLevel) -> ActionLevel {
    match a {
        ActionLevel::Implemented => ActionLevel::Planning,
        ActionLevel::Planning => ActionLevel::Implemented,
        ActionLevel::Indeterminate => ActionLevel::Planning,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Contrastive,
    Ordinal,
}

/// Positive and negative candidates of one anchor, as corpus indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSets {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub kind: PairKind,
    pub granularity: Granularity,
}

/// Bounded draw from a [`PairSets`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledPairs {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Per-claim key structures at one granularity, computed once.
struct Keyed {
    labels: BTreeSet<(String, ActionLevel)>,
    dict: LabelDict,
}

fn keyed(corpus: &Corpus, index: usize, granularity: Granularity) -> Keyed {
    let claim = corpus.claim(index);
    Keyed {
        labels: claim.label_set(granularity, corpus.taxonomy()),
        dict: build_label_dict(claim, granularity, corpus.taxonomy()),
    }
}

fn is_contrastive_positive(anchor: &Keyed, other: &Keyed) -> bool {
    !anchor.labels.is_disjoint(&other.labels)
}

fn is_ordinal_positive(anchor: &Keyed, other: &Keyed) -> bool {
    anchor.dict.iter().any(|(k, a)| other.dict.get(k) == Some(transition(a)))
}

fn partition(anchor: usize, pool: &[usize], keys: &[Keyed], anchor_keys: &Keyed, kind: PairKind, granularity: Granularity) -> PairSets {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (slot, &j) in pool.iter().enumerate() {
        if j == anchor {
            continue;
        }
        let other = &keys[slot];
        let positive = match kind {
            PairKind::Contrastive => is_contrastive_positive(anchor_keys, other),
            PairKind::Ordinal => is_ordinal_positive(anchor_keys, other),
        };
        if positive {
            positives.push(j);
        } else {
            negatives.push(j);
        }
    }
    PairSets {
        anchor,
        positives,
        negatives,
        kind,
        granularity,
    }
}

fn sorted_pool(pool: &[usize]) -> Vec<usize> {
    let mut p = pool.to_vec();
    p.sort_unstable();
    p.dedup();
    p
}

fn single(corpus: &Corpus, anchor: usize, pool: &[usize], granularity: Granularity, kind: PairKind) -> Result<PairSets> {
    let claim = corpus.claim(anchor);
    if !claim.is_labeled() {
        return Err(Error::EmptyLabels(claim.id.clone()));
    }
    let pool = sorted_pool(pool);
    let anchor_keys = keyed(corpus, anchor, granularity);
    let keys: Vec<Keyed> = pool.iter().map(|&j| keyed(corpus, j, granularity)).collect();
    Ok(partition(anchor, &pool, &keys, &anchor_keys, kind, granularity))
}

/// Contrastive sets of `anchor` against `pool` (corpus indices). The anchor
/// need not be a pool member.
pub fn contrastive_pairs(corpus: &Corpus, anchor: usize, pool: &[usize], granularity: Granularity) -> Result<PairSets> {
    single(corpus, anchor, pool, granularity, PairKind::Contrastive)
}

/// Ordinal sets of `anchor` against `pool`.
pub fn ordinal_pairs(corpus: &Corpus, anchor: usize, pool: &[usize], granularity: Granularity) -> Result<PairSets> {
    single(corpus, anchor, pool, granularity, PairKind::Ordinal)
}

/// Uniform draw without replacement of up to `k_max` positives and `m_max`
/// negatives. `None` means the anchor has no positives and is skipped.
pub fn sample_pairs(sets: &PairSets, k_max: usize, m_max: usize, rng: &mut impl Rng) -> Option<SampledPairs> {
    assert!(k_max >= 1 && m_max >= 1, "sampling caps must be positive");
    if sets.positives.is_empty() {
        return None;
    }
    let draw = |from: &[usize], cap: usize, rng: &mut dyn rand::RngCore| -> Vec<usize> {
        if from.len() <= cap {
            return from.to_vec();
        }
        let mut picked: Vec<usize> = rand::seq::index::sample(rng, from.len(), cap)
            .into_iter()
            .map(|k| from[k])
            .collect();
        picked.sort_unstable();
        picked
    };
    let positives = draw(&sets.positives, k_max, rng);
    let negatives = draw(&sets.negatives, m_max, rng);
    Some(SampledPairs {
        anchor: sets.anchor,
        positives,
        negatives,
    })
}

/// Key identifying the split and granularity a cache was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub split_hash: u64,
    pub granularity: Granularity,
}

impl CacheKey {
    pub fn new(corpus: &Corpus, pool: &[usize], granularity: Granularity) -> Self {
        let mut h = DefaultHasher::new();
        for &i in &sorted_pool(pool) {
            corpus.claim(i).id.hash(&mut h);
        }
        CacheKey {
            split_hash: h.finish(),
            granularity,
        }
    }
}

/// Both kinds of pair sets for every labeled anchor of a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCache {
    pub key: CacheKey,
    /// Labeled pool members in index order.
    pub anchors: Vec<usize>,
    pub contrastive: Vec<PairSets>,
    pub ordinal: Vec<PairSets>,
}

impl PairCache {
    /// Builds the cache, optionally in parallel. Output order is anchor
    /// index order either way.
    pub fn build(corpus: &Corpus, pool: &[usize], granularity: Granularity, parallel: bool) -> PairCache {
        let pool = sorted_pool(pool);
        let keys: Vec<Keyed> = if parallel {
            pool.par_iter().map(|&j| keyed(corpus, j, granularity)).collect()
        } else {
            pool.iter().map(|&j| keyed(corpus, j, granularity)).collect()
        };
        let anchor_slots: Vec<usize> = (0..pool.len()).filter(|&s| corpus.claim(pool[s]).is_labeled()).collect();
        let one = |&slot: &usize| {
            let a = pool[slot];
            let ctr = partition(a, &pool, &keys, &keys[slot], PairKind::Contrastive, granularity);
            let ord = partition(a, &pool, &keys, &keys[slot], PairKind::Ordinal, granularity);
            (ctr, ord)
        };
        let sets: Vec<(PairSets, PairSets)> = if parallel {
            anchor_slots.par_iter().map(one).collect()
        } else {
            anchor_slots.iter().map(one).collect()
        };
        let (contrastive, ordinal) = sets.into_iter().unzip();
        PairCache {
            key: CacheKey::new(corpus, &pool, granularity),
            anchors: anchor_slots.iter().map(|&s| pool[s]).collect(),
            contrastive,
            ordinal,
        }
    }

    pub fn is_valid_for(&self, corpus: &Corpus, pool: &[usize], granularity: Granularity) -> bool {
        self.key == CacheKey::new(corpus, pool, granularity)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn dump(&self, corpus: &Corpus) -> PairDump {
        let ids = |v: &[usize]| v.iter().map(|&i| corpus.claim(i).id.clone()).collect();
        let side = |s: &PairSets| DumpSide {
            positives: ids(&s.positives),
            negatives: ids(&s.negatives),
        };
        PairDump {
            granularity: self.key.granularity,
            anchors: self
                .anchors
                .iter()
                .zip(self.contrastive.iter().zip(&self.ordinal))
                .map(|(&a, (c, o))| DumpEntry {
                    id: corpus.claim(a).id.clone(),
                    contrastive: side(c),
                    ordinal: side(o),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpSide {
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub id: String,
    pub contrastive: DumpSide,
    pub ordinal: DumpSide,
}

/// Pair-cache dump file: per anchor, ids of both kinds of sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairDump {
    pub granularity: Granularity,
    pub anchors: Vec<DumpEntry>,
}

impl PairDump {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("dump serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Claim, Label, Taxonomy};
    use crate::rng;
    use ActionLevel::*;

    fn corpus(labels: &[&[(&str, ActionLevel)]]) -> Corpus {
        let tax = Taxonomy::from_pairs([("A", "X"), ("B", "X"), ("C", "Y")]).unwrap();
        let claims = labels
            .iter()
            .enumerate()
            .map(|(i, ls)| Claim::new(format!("c{i}"), vec![1.0, 0.0], ls.iter().map(|&(a, y)| Label::new(a, y)).collect()))
            .collect();
        Corpus::new(claims, tax).unwrap()
    }

    fn all(c: &Corpus) -> Vec<usize> {
        (0..c.len()).collect()
    }

    #[test]
    fn transition_table() {
        assert_eq!(transition(Implemented), Planning);
        assert_eq!(transition(Planning), Implemented);
        assert_eq!(transition(Indeterminate), Planning);
    }

    #[test]
    fn contrastive_three_claim_pool() {
        let c = corpus(&[&[("A", Planning)], &[("A", Planning), ("B", Planning)], &[("B", Planning)], &[]]);
        let s = contrastive_pairs(&c, 0, &all(&c), Granularity::Aspect).unwrap();
        assert_eq!(s.positives, vec![1]);
        assert_eq!(s.negatives, vec![2, 3]);
        // category level: A and B are both X
        let s = contrastive_pairs(&c, 0, &all(&c), Granularity::Category).unwrap();
        assert_eq!(s.positives, vec![1, 2]);
        assert_eq!(s.negatives, vec![3]);
    }

    #[test]
    fn contrastive_edge_cases() {
        let c = corpus(&[&[("A", Planning)], &[("A", Planning)], &[("A", Planning)]]);
        let s = contrastive_pairs(&c, 0, &[0], Granularity::Aspect).unwrap();
        assert!(s.positives.is_empty() && s.negatives.is_empty());
        let s = contrastive_pairs(&c, 0, &all(&c), Granularity::Aspect).unwrap();
        assert!(s.negatives.is_empty());
        assert_eq!(s.positives, vec![1, 2]);

        let c = corpus(&[&[], &[("A", Planning)]]);
        assert!(matches!(
            contrastive_pairs(&c, 0, &all(&c), Granularity::Aspect),
            Err(Error::EmptyLabels(_))
        ));
        assert!(matches!(
            ordinal_pairs(&c, 0, &all(&c), Granularity::Aspect),
            Err(Error::EmptyLabels(_))
        ));
    }

    #[test]
    fn ordinal_membership() {
        let c = corpus(&[
            &[("A", Implemented)],
            &[("A", Planning)],
            &[("A", Indeterminate)],
            &[("C", Implemented)],
        ]);
        let s = ordinal_pairs(&c, 0, &all(&c), Granularity::Aspect).unwrap();
        assert_eq!(s.positives, vec![1]);
        assert_eq!(s.negatives, vec![2, 3]);

        // indeterminate vs indeterminate is not a transition
        let c = corpus(&[&[("A", Indeterminate)], &[("A", Indeterminate)]]);
        let s = ordinal_pairs(&c, 0, &all(&c), Granularity::Aspect).unwrap();
        assert!(s.positives.is_empty());

        // no shared keys
        let c = corpus(&[&[("A", Planning)], &[("C", Implemented)]]);
        let s = ordinal_pairs(&c, 0, &all(&c), Granularity::Aspect).unwrap();
        assert_eq!(s.negatives, vec![1]);
    }

    #[test]
    fn ordinal_asymmetry() {
        let c = corpus(&[&[("A", Indeterminate)], &[("A", Planning)]]);
        let i = ordinal_pairs(&c, 0, &all(&c), Granularity::Aspect).unwrap();
        let j = ordinal_pairs(&c, 1, &all(&c), Granularity::Aspect).unwrap();
        assert_eq!(i.positives, vec![1]);
        assert!(j.positives.is_empty());
    }

    #[test]
    fn sampling_caps() {
        let sets = PairSets {
            anchor: 0,
            positives: (1..6).collect(),
            negatives: (6..16).collect(),
            kind: PairKind::Contrastive,
            granularity: Granularity::Aspect,
        };
        let mut r = rng::seeded(1, 0);
        let s = sample_pairs(&sets, 3, 6, &mut r).unwrap();
        assert_eq!(s.positives.len(), 3);
        assert_eq!(s.negatives.len(), 6);
        assert!(s.positives.iter().all(|p| sets.positives.contains(p)));
        let uniq: BTreeSet<_> = s.negatives.iter().collect();
        assert_eq!(uniq.len(), 6);

        let few = PairSets {
            positives: vec![1, 2],
            ..sets.clone()
        };
        assert_eq!(sample_pairs(&few, 3, 6, &mut r).unwrap().positives, vec![1, 2]);

        let none = PairSets {
            positives: vec![],
            ..sets.clone()
        };
        assert!(sample_pairs(&none, 3, 6, &mut r).is_none());

        let a = sample_pairs(&sets, 3, 6, &mut rng::seeded(9, 4));
        let b = sample_pairs(&sets, 3, 6, &mut rng::seeded(9, 4));
        assert_eq!(a, b);
    }

    #[test]
    fn cache_matches_single_calls_and_parallel() {
        let c = corpus(&[
            &[("A", Implemented)],
            &[("A", Planning), ("C", Planning)],
            &[],
            &[("B", Indeterminate)],
            &[("C", Implemented)],
        ]);
        for g in [Granularity::Aspect, Granularity::Category] {
            let seq = PairCache::build(&c, &all(&c), g, false);
            let par = PairCache::build(&c, &all(&c), g, true);
            assert_eq!(seq, par);
            assert_eq!(seq.anchors, vec![0, 1, 3, 4]);
            for (k, &a) in seq.anchors.iter().enumerate() {
                assert_eq!(seq.contrastive[k], contrastive_pairs(&c, a, &all(&c), g).unwrap());
                assert_eq!(seq.ordinal[k], ordinal_pairs(&c, a, &all(&c), g).unwrap());
            }
            assert!(seq.is_valid_for(&c, &all(&c), g));
            assert!(!seq.is_valid_for(&c, &[0, 1], g));
        }
        let empty = corpus(&[]);
        assert!(PairCache::build(&empty, &[], Granularity::Aspect, true).is_empty());
    }
}
