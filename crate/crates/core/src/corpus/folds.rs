use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};
use crate::rng;

/// How to partition categories into cross-category folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldSpec {
    pub n_folds: usize,
    pub unseen_per_fold: usize,
    pub test_fraction: f64,
}

impl Default for FoldSpec {
    fn default() -> Self {
        FoldSpec {
            n_folds: 3,
            unseen_per_fold: 2,
            test_fraction: 0.2,
        }
    }
}

/// One cross-category fold. Id lists are kept in corpus order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub unseen_categories: Vec<String>,
    pub train_ids: Vec<String>,
    pub seen_test_ids: Vec<String>,
    pub unseen_test_ids: Vec<String>,
}

impl FoldSplit {
    /// Plain train/test split of the whole corpus with no held-out
    /// categories. The test part is reported as "seen".
    pub fn full(corpus: &Corpus, test_fraction: f64, seed: u64) -> Result<FoldSplit> {
        check_fraction(test_fraction)?;
        let all: Vec<usize> = (0..corpus.len()).collect();
        let (train, test) = split_indices(&all, test_fraction, seed, u64::MAX);
        if train.is_empty() {
            return Err(Error::Folds("empty train split".into()));
        }
        Ok(FoldSplit {
            fold_id: 0,
            unseen_categories: Vec::new(),
            train_ids: ids(corpus, &train),
            seen_test_ids: ids(corpus, &test),
            unseen_test_ids: Vec::new(),
        })
    }

    pub fn save_all(folds: &[FoldSplit], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(folds).expect("folds serialize");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<FoldSplit>> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Folds(format!("{}: {e}", path.display())))
    }
}

fn check_fraction(test_fraction: f64) -> Result<()> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Folds(format!("test_fraction {test_fraction} not in (0, 1)")));
    }
    Ok(())
}

fn ids(corpus: &Corpus, indices: &[usize]) -> Vec<String> {
    indices.iter().map(|&i| corpus.claim(i).id.clone()).collect()
}

/// Seeded shuffle, then the first `round(n * fraction)` go to test. Both
/// halves are returned sorted.
fn split_indices(pool: &[usize], fraction: f64, seed: u64, stream: u64) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(&mut rng::seeded(seed, stream));
    let n_test = (pool.len() as f64 * fraction).round() as usize;
    let mut test = shuffled[..n_test].to_vec();
    let mut train = shuffled[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Cross-category folds.
///
/// Categories are taken in sorted order and chunked, so fold `f` withholds
/// categories `f*u .. (f+1)*u`. A claim touching any withheld category goes to
/// the unseen test list; the rest are split into train and seen test.
pub fn make_folds(corpus: &Corpus, n_folds: usize, unseen_per_fold: usize, test_fraction: f64, seed: u64) -> Result<Vec<FoldSplit>> {
    check_fraction(test_fraction)?;
    if n_folds == 0 || unseen_per_fold == 0 {
        return Err(Error::Folds("n_folds and unseen_per_fold must be positive".into()));
    }
    let categories: Vec<&str> = corpus.taxonomy().categories().into_iter().collect();
    if n_folds * unseen_per_fold > categories.len() {
        return Err(Error::Folds(format!(
            "{n_folds} folds x {unseen_per_fold} unseen categories needs {} categories, taxonomy has {}",
            n_folds * unseen_per_fold,
            categories.len()
        )));
    }

    let mut folds = Vec::with_capacity(n_folds);
    for (fold_id, unseen) in categories.chunks(unseen_per_fold).take(n_folds).enumerate() {
        let unseen: BTreeSet<&str> = unseen.iter().copied().collect();
        let (held_out, remaining): (Vec<usize>, Vec<usize>) =
            (0..corpus.len()).partition(|&i| corpus.claim(i).categories(corpus.taxonomy()).iter().any(|c| unseen.contains(c)));
        let (train, seen_test) = split_indices(&remaining, test_fraction, seed, fold_id as u64);
        if train.is_empty() {
            return Err(Error::Folds(format!("fold {fold_id}: empty train split")));
        }
        folds.push(FoldSplit {
            fold_id,
            unseen_categories: unseen.iter().map(|c| c.to_string()).collect(),
            train_ids: ids(corpus, &train),
            seen_test_ids: ids(corpus, &seen_test),
            unseen_test_ids: ids(corpus, &held_out),
        });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ActionLevel, Claim, Label, Taxonomy};

    fn six_category_corpus() -> Corpus {
        let tax = Taxonomy::from_pairs((1..=6).map(|c| (format!("a{c}"), format!("c{c}")))).unwrap();
        let claims = (0..30)
            .map(|i| {
                let mut labels = vec![Label::new(format!("a{}", i % 6 + 1), ActionLevel::Planning)];
                if i % 7 == 0 {
                    labels.push(Label::new(format!("a{}", (i + 3) % 6 + 1), ActionLevel::Implemented));
                }
                Claim::new(format!("x{i}"), vec![i as f64, 1.0], labels)
            })
            .collect();
        Corpus::new(claims, tax).unwrap()
    }

    #[test]
    fn unseen_sets_follow_sorted_chunks() {
        let corpus = six_category_corpus();
        let folds = make_folds(&corpus, 3, 2, 0.2, 155).unwrap();
        let sets: Vec<Vec<String>> = folds.iter().map(|f| f.unseen_categories.clone()).collect();
        assert_eq!(
            sets,
            vec![
                vec!["c1".to_string(), "c2".into()],
                vec!["c3".into(), "c4".into()],
                vec!["c5".into(), "c6".into()]
            ]
        );
    }

    #[test]
    fn mixed_claim_goes_to_unseen() {
        // hand enumeration on five claims, unseen = {E}:
        // x0 {S} train/seen, x1 {E} unseen, x2 {S,E} unseen, x3 {} train/seen, x4 {S2,E} unseen
        let tax = Taxonomy::from_pairs([("s", "S"), ("s2", "S2"), ("e", "E")]).unwrap();
        let l = |a: &str| Label::new(a, ActionLevel::Planning);
        let claims = vec![
            Claim::new("x0", vec![1.0], vec![l("s")]),
            Claim::new("x1", vec![1.0], vec![l("e")]),
            Claim::new("x2", vec![1.0], vec![l("s"), l("e")]),
            Claim::new("x3", vec![1.0], vec![]),
            Claim::new("x4", vec![1.0], vec![l("s2"), l("e")]),
        ];
        let corpus = Corpus::new(claims, tax).unwrap();
        // sorted categories: E, S, S2 -> fold 0 withholds E
        let folds = make_folds(&corpus, 1, 1, 0.5, 7).unwrap();
        let f = &folds[0];
        assert_eq!(f.unseen_categories, vec!["E".to_string()]);
        assert_eq!(f.unseen_test_ids, vec!["x1", "x2", "x4"]);
        let mut rest: Vec<_> = f.train_ids.iter().chain(&f.seen_test_ids).cloned().collect();
        rest.sort();
        assert_eq!(rest, vec!["x0", "x3"]);
        assert_eq!(f.train_ids.len(), 1);
    }

    #[test]
    fn deterministic_and_disjoint() {
        let corpus = six_category_corpus();
        let a = make_folds(&corpus, 3, 2, 0.25, 11).unwrap();
        let b = make_folds(&corpus, 3, 2, 0.25, 11).unwrap();
        assert_eq!(a, b);
        for f in &a {
            let train: BTreeSet<_> = f.train_ids.iter().collect();
            assert!(f.seen_test_ids.iter().chain(&f.unseen_test_ids).all(|id| !train.contains(id)));
            for id in &f.train_ids {
                let claim = corpus.claim(corpus.index_of(id).unwrap());
                for c in claim.categories(corpus.taxonomy()) {
                    assert!(!f.unseen_categories.iter().any(|u| u == c));
                }
            }
        }
    }

    #[test]
    fn errors() {
        let corpus = six_category_corpus();
        assert!(matches!(make_folds(&corpus, 4, 2, 0.2, 1), Err(Error::Folds(_))));
        assert!(matches!(make_folds(&corpus, 3, 2, 1.0, 1), Err(Error::Folds(_))));

        let tax = Taxonomy::from_pairs([("a", "A"), ("b", "B")]).unwrap();
        let only_a = Corpus::new(vec![Claim::new("x", vec![1.0], vec![Label::new("a", ActionLevel::Planning)])], tax).unwrap();
        assert!(matches!(make_folds(&only_a, 1, 1, 0.2, 1), Err(Error::Folds(_))));
    }

    #[test]
    fn full_split_covers_everything() {
        let corpus = six_category_corpus();
        let f = FoldSplit::full(&corpus, 0.2, 3).unwrap();
        assert_eq!(f.train_ids.len() + f.seen_test_ids.len(), corpus.len());
        assert_eq!(f.seen_test_ids.len(), 6);
        assert!(f.unseen_test_ids.is_empty());
    }
}
