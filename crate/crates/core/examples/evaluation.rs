//! Tuple F1, seen/unseen aggregation and clustering statistics.
//!
//!     cargo run --example evaluation

use std::collections::{BTreeMap, BTreeSet};

use structlearn::corpus::ActionLevel::*;
use structlearn::eval::{clustering_stats, seen_unseen_report, tuple_f1, FoldScore};

fn main() -> structlearn::Result<()> {
    let t = |c: &str, a| (c.to_string(), a);
    let gold = BTreeMap::from([
        ("c1".to_string(), BTreeSet::from([t("Energy", Planning)])),
        ("c2".to_string(), BTreeSet::from([t("Water", Implemented), t("Energy", Planning)])),
    ]);
    let pred = BTreeMap::from([
        ("c1".to_string(), BTreeSet::from([t("Energy", Planning)])),
        ("c2".to_string(), BTreeSet::from([t("Water", Planning)])),
    ]);
    println!("micro F1 over tuples: {:.4}", tuple_f1(&pred, &gold)?);

    let folds = [(0.5676, 0.4863), (0.6683, 0.4947), (0.6994, 0.3589)]
        .iter()
        .enumerate()
        .map(|(k, &(s, u))| FoldScore {
            fold_id: k,
            seen_f1: s,
            unseen_f1: u,
            clustering: None,
        })
        .collect();
    let report = seen_unseen_report(folds, 3, None)?;
    println!("{}", report.csv_header());
    println!("{}", report.csv_row());

    let points = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.95], vec![0.7, 0.7]];
    let labels = vec![0, 0, 1, 1, 0];
    println!("{:#?}", clustering_stats(&points, &labels)?);
    Ok(())
}
