//! Closed-form volumes: the P-fold gap and the proportional-scaling law.
//!
//! Run with `cargo run --example cost_model`.

use ulysses_lab::costmodel::{megatron_volume, ring_volume, ulysses_volume, Convention, CostInputs, CostReport};

fn main() -> ulysses_lab::Result<()> {
    println!("{:>3} {:>12} {:>12} {:>12} {:>6}", "P", "ulysses", "megatron", "ring", "ratio");
    for p in [2, 4, 8, 16, 32, 64] {
        let c = CostInputs::new(65536, 1, 4096, p, 1, Convention::Asymptotic)?;
        let (u, m, r) = (ulysses_volume(&c), megatron_volume(&c), ring_volume(&c));
        println!("{p:>3} {u:>12} {m:>12} {r:>12} {:>6}", m / u);
    }

    println!("\nscaling n and P together (n/P = 1024):");
    for k in [1, 2, 4, 8] {
        let c = CostInputs::new(8192 * k, 1, 4096, 8 * k, 1, Convention::Asymptotic)?;
        println!("  n={:>6} P={:>3}: ulysses {:>10}  megatron {:>12}", c.n, c.p, ulysses_volume(&c), megatron_volume(&c));
    }

    let exact = CostInputs::new(8, 1, 8, 4, 1, Convention::Exact)?;
    println!("\nexact convention, n=8 b=1 h=8 P=4: ulysses {} ring {} megatron {}", ulysses_volume(&exact), ring_volume(&exact), megatron_volume(&exact));

    print!("\n{}", CostReport::for_inputs(&[exact]).to_csv()?);
    Ok(())
}
