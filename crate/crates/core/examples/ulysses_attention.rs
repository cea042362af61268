//! Sequence-parallel attention with all-to-all layout switches, checked
//! against the single-rank oracle.
//!
//! Run with `cargo run --example ulysses_attention`.

use ulysses_lab::kernel::CausalKernel;
use ulysses_lab::model::{seeded_input, AttentionSpec, LayerWeights};
use ulysses_lab::oracle::{compare, reference_attention};
use ulysses_lab::simgroup::{run_group, Mode};
use ulysses_lab::tensor::Mask;
use ulysses_lab::ulysses::{seq_to_head, shard_sequence, ulysses_attention_forward, unshard_sequence};

fn main() -> ulysses_lab::Result<()> {
    let (n, b, d, heads, p) = (32, 2, 16, 4, 4);
    let spec = AttentionSpec::new(n, b, d, heads, Mask::Causal)?;
    let x = seeded_input(n, b, d, 7);
    let w = LayerWeights::seeded(d, 8);
    let shards = shard_sequence(&x, p)?;

    let (outs, ledger) = run_group(p, Mode::Lockstep, |comm| {
        let mine = &shards[comm.rank()];
        if comm.rank() == 0 {
            let as_heads = seq_to_head(mine, &spec, comm, "demo")?;
            println!("rank 0: sequence shard {:?} -> head shard {:?}", mine.as_sequence()?.dims(), as_heads.as_head()?.dims());
        } else {
            seq_to_head(mine, &spec, comm, "demo")?;
        }
        ulysses_attention_forward(mine, &w, &spec, &CausalKernel, comm, "L0")
    })?;

    let got = unshard_sequence(&outs)?;
    let want = reference_attention(&x, &w, &spec, &CausalKernel)?;
    let report = compare(&got, &want, 1e-12)?;
    println!("max |ulysses - oracle| = {:e} at {:?} (pass: {})", report.max_abs_err, report.index, report.pass);

    let attn = ledger.with_label_prefix("L0");
    println!("attention used {} all-to-alls, per-rank egress {} elements", attn.len(), attn.per_rank_egress());
    println!("closed form 4nbd(P-1)/P^2 = {}", 4 * n * b * d * (p - 1) / (p * p));
    Ok(())
}
