//! Check the analytic adapter gradient against central differences, then show
//! that a sign-flipped gradient is caught.
//!
//!     cargo run --example gradient_check

use structlearn::gradcheck::{run_trials, Fault, Instance, FD_STEP, TOLERANCE};

fn main() -> structlearn::Result<()> {
    let inst = Instance::random(155, false)?;
    println!(
        "instance: d = {}, rank = {}, batch of {}",
        inst.dim,
        inst.rank,
        inst.members().len()
    );
    let a = inst.analytic_gradient()?;
    let n = inst.numeric_gradient(FD_STEP)?;
    for (k, (a, n)) in a.iter().zip(&n).take(5).enumerate() {
        println!("  param {k}: analytic {a:+.8}  numeric {n:+.8}");
    }

    for fault in [Fault::None, Fault::SignFlip] {
        let trials = run_trials(155, 20, fault)?;
        let worst = trials.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
        let passed = trials.iter().filter(|t| t.passed()).count();
        println!("{fault:?}: {passed}/20 pass, worst relative error {worst:.2e} (tolerance {TOLERANCE:e})");
    }
    Ok(())
}
