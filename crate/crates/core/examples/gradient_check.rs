//! Sharded backward pass against the oracle's analytic gradients and
//! central finite differences.
//!
//! Run with `cargo run --release --example gradient_check`.

use ulysses_lab::kernel::KernelKind;
use ulysses_lab::model::{seeded_input, AttentionSpec, LayerWeights};
use ulysses_lab::oracle::{finite_difference_grads, reference_attention_backward, reference_attention_saved, relative_grad_error};
use ulysses_lab::simgroup::Mode;
use ulysses_lab::verify::ulysses_gradients;

fn main() -> ulysses_lab::Result<()> {
    let (n, b, d, heads) = (16, 2, 16, 4);
    let kind = KernelKind::Causal;
    let spec = AttentionSpec::new(n, b, d, heads, kind.default_mask(n, 1)?)?;
    let x = seeded_input(n, b, d, 3);
    let upstream = seeded_input(n, b, d, 4);
    let w = LayerWeights::seeded(d, 5);

    let (_, saved) = reference_attention_saved(&x, &w, &spec, kind.kernel())?;
    let (ox, ow) = reference_attention_backward(&upstream, &saved, &w, &spec)?;
    let (fx, fw) = finite_difference_grads(&x, &upstream, &w, &spec, kind.kernel(), 1e-5)?;
    println!("oracle vs finite differences: relative {:e}", relative_grad_error((&fx, &fw), (&ox, &ow)));

    for p in [1, 2, 4] {
        let (ux, uw, ledger) = ulysses_gradients(&x, &upstream, &w, &spec, kind.kernel(), p, Mode::Concurrent)?;
        let dx = ux.sub(&ox)?.max_abs();
        println!(
            "P={p}: |dx - oracle| {dx:e}, |dW - oracle| {:e}, vs FD {:e}, {} all-to-alls",
            uw.max_abs_diff(&ow),
            relative_grad_error((&fx, &fw), (&ux, &uw)),
            ledger.len()
        );
    }
    Ok(())
}
