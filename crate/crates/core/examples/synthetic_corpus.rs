//! Generate a small synthetic corpus, look at its label mix and split it into
//! folds with held-out categories.
//!
//!     cargo run --example synthetic_corpus

use std::collections::BTreeMap;

use structlearn::corpus::{generate_synthetic, make_folds, SyntheticSpec};

fn main() -> structlearn::Result<()> {
    let spec = SyntheticSpec::default();
    let corpus = generate_synthetic(&spec, 155)?;
    println!(
        "{} claims, d = {}, categories {:?}",
        corpus.len(),
        corpus.dim(),
        corpus.taxonomy().categories()
    );

    let mut actions = BTreeMap::new();
    let mut dual = 0;
    for c in corpus.claims() {
        for l in &c.labels {
            *actions.entry(l.action.as_str()).or_insert(0) += 1;
        }
        let cats: std::collections::BTreeSet<_> = c.labels.iter().filter_map(|l| corpus.taxonomy().category_of(&l.aspect)).collect();
        dual += (cats.len() > 1) as usize;
    }
    println!("labels per action level: {actions:?}; claims spanning two categories: {dual}");

    for f in make_folds(&corpus, 3, 2, 0.2, 155)? {
        println!(
            "fold {}: unseen {:?}, {} train / {} seen test / {} unseen test",
            f.fold_id,
            f.unseen_categories,
            f.train_ids.len(),
            f.seen_test_ids.len(),
            f.unseen_test_ids.len()
        );
    }
    Ok(())
}
