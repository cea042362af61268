//! Per-rank memory under ZeRO stages, and the worked example where only
//! stage 3 with sequence parallelism fits a million-token sequence.
//!
//! Run with `cargo run --example memory_model`.

use ulysses_lab::costmodel::{activation_memory_per_rank, worked_example, zero_memory_per_rank, MemoryInputs, DEFAULT_ACTIVATION_BYTES};

fn main() -> ulysses_lab::Result<()> {
    let psi = 7e9;
    println!("model-state GB per rank, psi = 7e9, p_data = 2");
    println!("{:>6} {:>8} {:>8} {:>8} {:>8}", "p_seq", "stage 0", "stage 1", "stage 2", "stage 3");
    for ps in [1, 2, 4, 8, 16, 32] {
        let row: Vec<String> = (0..=3)
            .map(|s| MemoryInputs::new(psi, 2, ps, s).map(|m| format!("{:>8.2}", zero_memory_per_rank(&m) / 1e9)))
            .collect::<ulysses_lab::Result<_>>()?;
        println!("{ps:>6} {}", row.join(" "));
    }

    let one = activation_memory_per_rank(1 << 20, 1, 4096, 32, 1, DEFAULT_ACTIVATION_BYTES);
    println!("\nactivations for 1M tokens without sequence parallelism: {:.1} GB", one / 1e9);

    println!("\nworked example (80 GB per device):");
    for r in worked_example().rows {
        println!(
            "  {:<32} states {:>7.2} GB  activations {:>7.2} GB  total {:>7.2} GB  fits: {}",
            r.label,
            r.model_state_bytes / 1e9,
            r.activation_bytes / 1e9,
            r.total_bytes / 1e9,
            r.fits
        );
    }
    Ok(())
}
