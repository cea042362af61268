//! Four simulated ranks exchanging data through metered collectives.
//!
//! Run with `cargo run --example simulated_collectives`.

use ulysses_lab::simgroup::{run_group, Mode};
use ulysses_lab::tensor::Tensor3;

fn main() -> ulysses_lab::Result<()> {
    let p = 4;
    let (results, ledger) = run_group(p, Mode::Concurrent, |comm| {
        let r = comm.rank() as f64;
        // each rank owns a (2, 1, 4) block tagged with its rank
        let local = Tensor3::from_fn(2, 1, 4, |s, _, d| 100.0 * r + (4 * s + d) as f64);
        let gathered = comm.all_gather("gather", &local, 0)?;
        let swapped = comm.all_to_all("swap", &local, 2, 0)?;
        let summed = comm.reduce_scatter("reduce", &gathered, 0)?;
        let passed = comm.ring_shift("ring", &local, 1)?;
        comm.barrier("done")?;
        Ok((gathered.dims(), swapped.dims(), summed.get(0, 0, 0), passed.get(0, 0, 0)))
    })?;

    for (rank, (g, s, sum, from_left)) in results.iter().enumerate() {
        println!("rank {rank}: all_gather {g:?}, all_to_all {s:?}, reduce_scatter[0] = {sum}, ring value {from_left}");
    }
    println!("\n{} collectives, per-rank egress {} elements", ledger.len(), ledger.per_rank_egress());
    for rec in ledger.records() {
        println!(
            "  {:<8} {:<15} aggregate {:>4}  per-rank egress {:>3}",
            rec.step_label, rec.collective, rec.aggregate_elements, rec.per_rank_egress_elements
        );
    }
    Ok(())
}
