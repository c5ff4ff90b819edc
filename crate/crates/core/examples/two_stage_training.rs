//! Structure-aware adapter training followed by task fine-tuning on one fold,
//! compared with fine-tuning alone.
//!
//!     cargo run --release --example two_stage_training

use structlearn::config::{TrainOptions, TrainingConfig};
use structlearn::corpus::{generate_synthetic, make_folds, SyntheticSpec};
use structlearn::trainer::run_fold;

fn main() -> structlearn::Result<()> {
    let corpus = generate_synthetic(&SyntheticSpec::default(), 155)?;
    let fold = &make_folds(&corpus, 3, 2, 0.2, 155)?[0];
    let options = TrainOptions::default();

    let full = TrainingConfig::desk();
    let baseline = TrainingConfig {
        flags: vec![],
        ..full.clone()
    };
    for (name, config) in [("full", &full), ("baseline", &baseline)] {
        let run = run_fold(config, &options, &corpus, fold, true)?;
        let stage1 = run.log.stage1_losses();
        if let (Some(first), Some(last)) = (stage1.first(), stage1.last()) {
            println!(
                "{name}: stage-1 epoch losses (ctr, ord) {:.3},{:.3} -> {:.3},{:.3}",
                first.1, first.2, last.1, last.2
            );
        }
        if let Some(m) = &run.meta {
            println!("{name}: adapted weights {:?}", m.alpha());
        }
        let c = run.score.clustering.as_ref().expect("requested");
        println!(
            "{name}: seen F1 {:.3}, unseen F1 {:.3}, silhouette {:.4}\n",
            run.score.seen_f1, run.score.unseen_f1, c.silhouette
        );
    }
    Ok(())
}
