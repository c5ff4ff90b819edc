//! Adapt the loss weights and gate temperatures by meta-gradient steps on one
//! batch and print how the gradient-norm targets evolve.
//!
//!     cargo run --example meta_balancing

use structlearn::adapter::BatchEval;
use structlearn::gradcheck::Instance;
use structlearn::metagradnorm::MetaState;
use structlearn::objectives::{Alpha, Mixing};

fn main() -> structlearn::Result<()> {
    let inst = Instance::random(3, false)?;
    let adapter = inst.adapter();
    let eval = BatchEval::new(&adapter, &inst.corpus, inst.members(), &inst.params)?;
    let init = Alpha {
        lambda_base: 1.0,
        lambda_ord: 2.5,
        t_ctr: 13.0,
        t_ord: 1.0,
    };
    let mut meta = MetaState::new(init, 0.5, 0.01, 0.05)?;
    let (lc, lo) = eval.mean_losses();
    // pretend the contrastive loss has made more progress than the ordinal one
    meta.record_initial_losses((2.0 * lc, lo));

    println!("step   |g_ctr|  |g_ord|   target_ctr target_ord      J    lambda_b lambda_o  T_ctr  T_ord");
    for step in 0..=40 {
        let report = meta.meta_step(&eval, &adapter, &inst.corpus, Mixing::Gated)?;
        if step % 10 == 0 {
            let s = &report.snapshot;
            let a = report.alpha_after;
            println!(
                "{step:>4}  {:>8.4} {:>8.4}   {:>9.4} {:>9.4}  {:>8.5}  {:>7.3} {:>7.3} {:>7.3} {:>6.3}",
                s.g[0], s.g[1], s.g_star[0], s.g_star[1], s.j, a.lambda_base, a.lambda_ord, a.t_ctr, a.t_ord
            );
        }
    }
    Ok(())
}
