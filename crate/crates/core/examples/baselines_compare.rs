//! The three schemes on one input: same output, different traffic.
//!
//! Run with `cargo run --example baselines_compare`.

use ulysses_lab::costmodel::Scheme;
use ulysses_lab::kernel::KernelKind;
use ulysses_lab::model::{seeded_input, AttentionSpec};
use ulysses_lab::oracle::compare;
use ulysses_lab::simgroup::Mode;
use ulysses_lab::verify::{layer_weights, reference, simulate, Target};

fn main() -> ulysses_lab::Result<()> {
    let (n, b, d, heads) = (64, 1, 32, 8);
    let kind = KernelKind::Causal;
    let spec = AttentionSpec::new(n, b, d, heads, kind.default_mask(n, 1)?)?;
    let x = seeded_input(n, b, d, 1);
    let layers = layer_weights(d, 1, 1);
    let want = reference(Target::Block, &x, &layers, &spec, kind.kernel())?;

    println!("{:>9} {:>3} {:>12} {:>8} {:>16}", "scheme", "P", "max err", "records", "per-rank egress");
    for p in [2, 4, 8] {
        for scheme in Scheme::ALL {
            let (got, ledger) = simulate(scheme, Target::Block, &x, &layers, &spec, kind.kernel(), p, Mode::Concurrent)?;
            let err = compare(&got, &want, 1e-12)?.max_abs_err;
            println!("{:>9} {:>3} {:>12.3e} {:>8} {:>16}", scheme, p, err, ledger.len(), ledger.per_rank_egress());
        }
    }
    Ok(())
}
