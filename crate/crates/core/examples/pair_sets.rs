//! Positive and negative sets for both objectives, at aspect and category
//! granularity, on a four-claim toy corpus.
//!
//!     cargo run --example pair_sets

use structlearn::corpus::{ActionLevel::*, Claim, Corpus, Granularity, Label, Taxonomy};
use structlearn::pairing::{transition, PairCache};

fn main() -> structlearn::Result<()> {
    let tax = Taxonomy::from_pairs([("emissions", "Environment"), ("solar", "Energy"), ("wind", "Energy")])?;
    let claims = vec![
        Claim::new("cut-emissions", vec![1.0, 0.0, 0.0], vec![Label::new("emissions", Implemented)]),
        Claim::new("plan-emissions", vec![0.0, 1.0, 0.0], vec![Label::new("emissions", Planning)]),
        Claim::new("plan-solar", vec![0.0, 0.0, 1.0], vec![Label::new("solar", Planning)]),
        Claim::new("plan-wind", vec![1.0, 1.0, 0.0], vec![Label::new("wind", Planning)]),
    ];
    let corpus = Corpus::new(claims, tax)?;
    for a in [Implemented, Planning, Indeterminate] {
        println!("ordinal partner of {a}: {}", transition(a));
    }

    let pool: Vec<usize> = (0..corpus.len()).collect();
    for g in [Granularity::Aspect, Granularity::Category] {
        println!("\n{g} granularity");
        let dump = PairCache::build(&corpus, &pool, g, false).dump(&corpus);
        for e in &dump.anchors {
            println!(
                "  {:<15} contrastive+ {:?}  ordinal+ {:?}",
                e.id, e.contrastive.positives, e.ordinal.positives
            );
        }
    }
    Ok(())
}
