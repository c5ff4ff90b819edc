//! The two objectives on hand-built vectors, and how the temperature gate
//! shifts weight toward the harder objective.
//!
//!     cargo run --example losses_and_gating

use structlearn::objectives::{contrastive_loss, gate, ordinal_loss};

fn main() -> structlearn::Result<()> {
    let anchor = [1.0, 0.2, 0.0];
    let close = [0.9, 0.3, 0.1];
    let far = [-0.2, 1.0, 0.4];
    let other = [0.0, -0.3, 1.0];

    for tau in [0.05, 0.1, 0.5] {
        let l = contrastive_loss(&anchor, &[&close], &[&far, &other], tau)?;
        println!("contrastive, tau {tau:<4}: {l:.4}");
    }
    let easy = ordinal_loss(&anchor, &[&close], &[&far], 0.1)?;
    let hard = ordinal_loss(&anchor, &[&far], &[&close], 0.1)?;
    println!("ordinal margin loss: well ordered {easy:.4}, inverted {hard:.4}");

    println!("\n  l_ctr  l_ord   T_ctr T_ord   w_ctr  w_ord");
    for (lc, lo, tc, to) in [
        (1.0, 1.0, 1.0, 1.0),
        (2.0, 0.5, 1.0, 1.0),
        (2.0, 0.5, 13.0, 1.0),
        (2.0, 0.5, 1e6, 1e6),
    ] {
        let w = gate(lc, lo, tc, to);
        println!("  {lc:>5} {lo:>5}  {tc:>6} {to:>5}   {:.4} {:.4}", w.w_ctr, w.w_ord);
    }
    Ok(())
}
