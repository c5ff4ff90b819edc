//! Claims, labels, taxonomy and the on-disk corpus formats.
//!
//! A corpus file is newline-delimited JSON, one claim per line:
//!
//! ```text
//! {"id":"c1","text":"...","embedding":[0.1,0.2],"labels":[{"aspect":"solar","action":"planning"}]}
//! ```
//!
//! A taxonomy file is a single JSON object mapping aspect name to category name.

mod folds;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use folds::{make_folds, FoldSpec, FoldSplit};
pub use synth::{generate_synthetic, generate_with_geometry, SyntheticGeometry, SyntheticSpec};

/// Ordinal actionability of a claim: `Indeterminate < Planning < Implemented`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionLevel {
    Indeterminate,
    Planning,
    Implemented,
}

impl ActionLevel {
    pub const ALL: [ActionLevel; 3] = [ActionLevel::Indeterminate, ActionLevel::Planning, ActionLevel::Implemented];

    pub fn rank(self) -> u8 {
        match self {
            ActionLevel::Indeterminate => 0,
            ActionLevel::Planning => 1,
            ActionLevel::Implemented => 2,
        }
    }

    pub fn from_rank(rank: u8) -> Option<Self> {
        Self::ALL.get(rank as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActionLevel::Indeterminate => "indeterminate",
            ActionLevel::Planning => "planning",
            ActionLevel::Implemented => "implemented",
        }
    }
}

impl fmt::Display for ActionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indeterminate" => Ok(ActionLevel::Indeterminate),
            "planning" => Ok(ActionLevel::Planning),
            "implemented" => Ok(ActionLevel::Implemented),
            other => Err(Error::InvalidParam(format!("unknown action level {other:?}"))),
        }
    }
}

/// Key space used when building label sets and dictionaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Aspect,
    Category,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::Aspect => f.write_str("aspect"),
            Granularity::Category => f.write_str("category"),
        }
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aspect" => Ok(Granularity::Aspect),
            "category" => Ok(Granularity::Category),
            other => Err(Error::InvalidParam(format!("unknown granularity {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Label {
    pub aspect: String,
    pub action: ActionLevel,
}

impl Label {
    pub fn new(aspect: impl Into<String>, action: ActionLevel) -> Self {
        Label {
            aspect: aspect.into(),
            action,
        }
    }
}

/// Aspect to category mapping. Every aspect belongs to exactly one category.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Taxonomy {
    category_of: BTreeMap<String, String>,
}

impl Taxonomy {
    pub fn new(category_of: BTreeMap<String, String>) -> Result<Self> {
        if let Some((aspect, _)) = category_of.iter().find(|(_, c)| c.is_empty()) {
            return Err(Error::Taxonomy(format!("aspect {aspect:?} has an empty category")));
        }
        Ok(Taxonomy { category_of })
    }

    pub fn from_pairs<A, C>(pairs: impl IntoIterator<Item = (A, C)>) -> Result<Self>
    where
        A: Into<String>,
        C: Into<String>,
    {
        Self::new(pairs.into_iter().map(|(a, c)| (a.into(), c.into())).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| Error::Taxonomy(format!("{}: {e}", path.display())))?;
        Self::new(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.category_of).expect("string map serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn category_of(&self, aspect: &str) -> Option<&str> {
        self.category_of.get(aspect).map(String::as_str)
    }

    pub fn contains(&self, aspect: &str) -> bool {
        self.category_of.contains_key(aspect)
    }

    pub fn aspects(&self) -> impl Iterator<Item = &str> {
        self.category_of.keys().map(String::as_str)
    }

    /// Sorted, de-duplicated category names.
    pub fn categories(&self) -> BTreeSet<&str> {
        self.category_of.values().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.category_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.category_of.is_empty()
    }

    /// Maps an aspect to its key at the requested granularity.
    ///
    /// Panics if the aspect is unknown; corpus validation rules that out.
    pub fn key<'a>(&'a self, aspect: &'a str, granularity: Granularity) -> &'a str {
        match granularity {
            Granularity::Aspect => aspect,
            Granularity::Category => self
                .category_of(aspect)
                .unwrap_or_else(|| panic!("aspect {aspect:?} missing from taxonomy")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub embedding: Vec<f64>,
    pub labels: Vec<Label>,
}

impl Claim {
    pub fn new(id: impl Into<String>, embedding: Vec<f64>, labels: Vec<Label>) -> Self {
        Claim {
            id: id.into(),
            text: None,
            embedding,
            labels,
        }
    }

    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty()
    }

    /// Label set at the given granularity: `{(key, action)}`.
    pub fn label_set(&self, granularity: Granularity, taxonomy: &Taxonomy) -> BTreeSet<(String, ActionLevel)> {
        self.labels
            .iter()
            .map(|l| (taxonomy.key(&l.aspect, granularity).to_owned(), l.action))
            .collect()
    }

    /// Categories touched by any of the claim's labels.
    pub fn categories<'a>(&'a self, taxonomy: &'a Taxonomy) -> BTreeSet<&'a str> {
        self.labels.iter().filter_map(|l| taxonomy.category_of(&l.aspect)).collect()
    }

    /// Gold `(category, action)` tuples used by the classification stage.
    pub fn category_tuples(&self, taxonomy: &Taxonomy) -> BTreeSet<(String, ActionLevel)> {
        self.label_set(Granularity::Category, taxonomy)
    }
}

/// Key to action dictionary for one claim.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelDict {
    entries: BTreeMap<String, ActionLevel>,
}

impl LabelDict {
    pub fn get(&self, key: &str) -> Option<ActionLevel> {
        self.entries.get(key).copied()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ActionLevel)> {
        self.entries.iter().map(|(k, a)| (k.as_str(), *a))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Builds the key to action dictionary of a claim.
///
/// When several labels land on the same key (always possible at category
/// granularity) the highest-rank action wins, so the result does not depend
/// on label order.
pub fn build_label_dict(claim: &Claim, granularity: Granularity, taxonomy: &Taxonomy) -> LabelDict {
    let mut entries: BTreeMap<String, ActionLevel> = BTreeMap::new();
    for label in &claim.labels {
        let key = taxonomy.key(&label.aspect, granularity);
        entries
            .entry(key.to_owned())
            .and_modify(|a| *a = (*a).max(label.action))
            .or_insert(label.action);
    }
    LabelDict { entries }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    claims: Vec<Claim>,
    dim: usize,
    taxonomy: Taxonomy,
    index: HashMap<String, usize>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.taxonomy == other.taxonomy && self.claims == other.claims
    }
}

impl Corpus {
    /// Validates claims against each other and the taxonomy. The corpus
    /// dimension is taken from the first claim.
    pub fn new(claims: Vec<Claim>, taxonomy: Taxonomy) -> Result<Self> {
        let dim = claims.first().map_or(0, |c| c.embedding.len());
        let mut index = HashMap::with_capacity(claims.len());
        for (i, claim) in claims.iter().enumerate() {
            let record = i + 1;
            if claim.id.is_empty() {
                return Err(Error::Malformed {
                    record,
                    message: "empty id".into(),
                });
            }
            if claim.embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    record,
                    expected: dim,
                    found: claim.embedding.len(),
                });
            }
            if claim.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::Malformed {
                    record,
                    message: "non-finite embedding value".into(),
                });
            }
            let mut seen = BTreeSet::new();
            for label in &claim.labels {
                if !taxonomy.contains(&label.aspect) {
                    return Err(Error::UnknownAspect {
                        record,
                        aspect: label.aspect.clone(),
                    });
                }
                if !seen.insert(label) {
                    return Err(Error::DuplicateLabel {
                        record,
                        aspect: label.aspect.clone(),
                        action: label.action.to_string(),
                    });
                }
            }
            if index.insert(claim.id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    record,
                    id: claim.id.clone(),
                });
            }
        }
        Ok(Corpus {
            claims,
            dim,
            taxonomy,
            index,
        })
    }

    pub fn load(path: impl AsRef<Path>, taxonomy_path: impl AsRef<Path>) -> Result<Self> {
        let taxonomy = Taxonomy::load(taxonomy_path)?;
        Self::load_with_taxonomy(path, taxonomy)
    }

    pub fn load_with_taxonomy(path: impl AsRef<Path>, taxonomy: Taxonomy) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut claims = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record = claims.len() + 1;
            let claim: Claim = serde_json::from_str(&line).map_err(|e| Error::Malformed {
                record,
                message: e.to_string(),
            })?;
            claims.push(claim);
        }
        Self::new(claims, taxonomy)
    }

    /// Writes the claims file (not the taxonomy).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for claim in &self.claims {
            let line = serde_json::to_string(claim).expect("claim serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn claims(&self) -> &[Claim] {
        &self.claims
    }

    pub fn claim(&self, index: usize) -> &Claim {
        &self.claims[index]
    }

    pub fn len(&self) -> usize {
        self.claims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.claims.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Resolves ids to indices, failing on the first unknown id.
    pub fn indices_of<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> Result<Vec<usize>> {
        ids.into_iter()
            .map(|id| self.index_of(id).ok_or_else(|| Error::Folds(format!("unknown claim id {id:?}"))))
            .collect()
    }

    /// A new corpus containing only the claims at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        let claims = indices.iter().map(|&i| self.claims[i].clone()).collect();
        Corpus::new(claims, self.taxonomy.clone()).expect("subset of a valid corpus is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taxonomy() -> Taxonomy {
        Taxonomy::from_pairs([("emissions", "Environment"), ("solar", "Energy"), ("wind", "Energy")]).unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let tax = write(dir.path(), "tax.json", r#"{"emissions":"Environment","solar":"Energy"}"#);
        let body = r#"{"id":"a","embedding":[1,0,0,0],"labels":[{"aspect":"emissions","action":"implemented"}]}
{"id":"b","text":"we plan","embedding":[0,1,0,0],"labels":[{"aspect":"solar","action":"planning"}]}
{"id":"c","embedding":[0,0,1,0],"labels":[]}
"#;
        let path = write(dir.path(), "c.jsonl", body);
        let corpus = Corpus::load(&path, &tax).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.dim(), 4);
        assert_eq!(corpus.claim(1).text.as_deref(), Some("we plan"));
    }

    #[test]
    fn unknown_aspect_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let tax = write(dir.path(), "tax.json", r#"{"emissions":"Environment"}"#);
        let body = r#"{"id":"a","embedding":[1,0],"labels":[{"aspect":"emissions","action":"implemented"}]}
{"id":"b","embedding":[0,1],"labels":[{"aspect":"xyz","action":"planning"}]}
{"id":"c","embedding":[1,1],"labels":[]}
"#;
        let path = write(dir.path(), "c.jsonl", body);
        match Corpus::load(&path, &tax) {
            Err(Error::UnknownAspect { record, aspect }) => {
                assert_eq!(record, 2);
                assert_eq!(aspect, "xyz");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let tax = write(dir.path(), "tax.json", "{}");
        let path = write(dir.path(), "c.jsonl", "");
        let corpus = Corpus::load(&path, &tax).unwrap();
        assert!(corpus.is_empty());
        assert_eq!(corpus.dim(), 0);
    }

    #[test]
    fn validation_errors() {
        let tax = taxonomy();
        let lab = |a: &str| vec![Label::new(a, ActionLevel::Planning)];
        let err = Corpus::new(
            vec![
                Claim::new("a", vec![1.0, 0.0], lab("solar")),
                Claim::new("b", vec![1.0, 0.0, 0.0], lab("solar")),
            ],
            tax.clone(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                record: 2,
                expected: 2,
                found: 3
            }
        ));

        let err = Corpus::new(
            vec![Claim::new("a", vec![1.0], lab("solar")), Claim::new("a", vec![1.0], lab("wind"))],
            tax.clone(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateId { record: 2, .. }));

        let mut twice = lab("solar");
        twice.extend(lab("solar"));
        let err = Corpus::new(vec![Claim::new("a", vec![1.0], twice)], tax.clone()).unwrap_err();
        assert!(matches!(err, Error::DuplicateLabel { record: 1, .. }));

        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "bad.jsonl", "{\"id\": 3}\n");
        let err = Corpus::load_with_taxonomy(&path, tax).unwrap_err();
        assert!(matches!(err, Error::Malformed { record: 1, .. }));
    }

    #[test]
    fn label_dict_granularities() {
        let tax = taxonomy();
        let single = Claim::new("x", vec![1.0], vec![Label::new("emissions", ActionLevel::Implemented)]);
        let d = build_label_dict(&single, Granularity::Aspect, &tax);
        assert_eq!(d.len(), 1);
        assert_eq!(d.get("emissions"), Some(ActionLevel::Implemented));

        // solar=planning and wind=implemented collapse to Energy; the higher rank wins
        let pair = Claim::new(
            "y",
            vec![1.0],
            vec![
                Label::new("solar", ActionLevel::Planning),
                Label::new("wind", ActionLevel::Implemented),
            ],
        );
        let d = build_label_dict(&pair, Granularity::Category, &tax);
        assert_eq!(d.iter().collect::<Vec<_>>(), vec![("Energy", ActionLevel::Implemented)]);
        let reversed = Claim::new("z", vec![1.0], pair.labels.iter().rev().cloned().collect());
        assert_eq!(build_label_dict(&reversed, Granularity::Category, &tax), d);

        let empty = Claim::new("e", vec![1.0], vec![]);
        assert!(build_label_dict(&empty, Granularity::Category, &tax).is_empty());
    }

    #[test]
    fn action_order_and_parse() {
        assert!(ActionLevel::Indeterminate < ActionLevel::Planning);
        assert!(ActionLevel::Planning < ActionLevel::Implemented);
        for a in ActionLevel::ALL {
            assert_eq!(a.as_str().parse::<ActionLevel>().unwrap(), a);
            assert_eq!(ActionLevel::from_rank(a.rank()), Some(a));
        }
        assert!("done".parse::<ActionLevel>().is_err());
        assert!("topic".parse::<Granularity>().is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let tax = taxonomy();
        let mut c = Claim::new("a", vec![0.1, -1.0 / 3.0, 1e-300], vec![Label::new("solar", ActionLevel::Planning)]);
        c.text = Some("quote \" and unicode é".into());
        let corpus = Corpus::new(vec![c, Claim::new("b", vec![0.0, 2.5, -7.0], vec![])], tax).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.save(dir.path().join("c.jsonl")).unwrap();
        corpus.taxonomy().save(dir.path().join("t.json")).unwrap();
        let back = Corpus::load(dir.path().join("c.jsonl"), dir.path().join("t.json")).unwrap();
        assert_eq!(back, corpus);
    }
}
