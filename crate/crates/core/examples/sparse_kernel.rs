//! A blocked-sparse mask through the same sequence-parallel path: the
//! kernel only evaluates key blocks in the pattern.
//!
//! Run with `cargo run --example sparse_kernel`.

use ulysses_lab::kernel::{BlockedSparseKernel, DenseKernel};
use ulysses_lab::model::{seeded_input, AttentionSpec, LayerWeights};
use ulysses_lab::oracle::{compare, reference_attention};
use ulysses_lab::simgroup::{run_group, Mode};
use ulysses_lab::tensor::Mask;
use ulysses_lab::ulysses::{shard_sequence, ulysses_attention_forward, unshard_sequence};

fn main() -> ulysses_lab::Result<()> {
    let (n, block) = (32, 4);
    let mask = Mask::local_global(n, block, 2)?;
    if let Mask::Blocked { pattern, .. } = &mask {
        let blocks = n / block;
        println!("{} of {} blocks active:", pattern.len(), blocks * blocks);
        for i in 0..blocks {
            let row: String = (0..blocks).map(|j| if pattern.contains(&(i, j)) { '#' } else { '.' }).collect();
            println!("  {row}");
        }
    }
    let spec = AttentionSpec::new(n, 1, 16, 4, mask)?;
    let x = seeded_input(n, 1, 16, 11);
    let w = LayerWeights::seeded(16, 12);

    let shards = shard_sequence(&x, 4)?;
    let (outs, _) = run_group(4, Mode::Lockstep, |comm| ulysses_attention_forward(&shards[comm.rank()], &w, &spec, &BlockedSparseKernel, comm, "L0"))?;
    let sparse = unshard_sequence(&outs)?;
    // the dense kernel applies the same mask by evaluating every score
    let dense = reference_attention(&x, &w, &spec, &DenseKernel)?;
    println!("sparse ulysses vs dense-evaluated oracle: {:e}", compare(&sparse, &dense, 1e-12)?.max_abs_err);
    Ok(())
}
