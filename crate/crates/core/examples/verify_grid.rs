//! Running an equivalence grid from the library, including the
//! perturbation fixture that forces one named cell to fail.
//!
//! Run with `cargo run --release --example verify_grid`.

use ulysses_lab::simgroup::Mode;
use ulysses_lab::verify::{run_grid, GridConfig, Perturbation, Target};

fn main() -> ulysses_lab::Result<()> {
    let cfg = GridConfig {
        ns: vec![8, 16],
        ps: vec![1, 2, 4],
        targets: Target::ALL.to_vec(),
        mode: Mode::Concurrent,
        ..GridConfig::default()
    };
    let report = run_grid(&cfg)?;
    println!("{} cells: {} passed, {} failed", report.cells.len(), report.passed, report.failed);

    let victim = report.cells[10].id.clone();
    let broken = run_grid(&GridConfig {
        perturb: Some(Perturbation { cell: victim, eps: 1e-9 }),
        ..cfg
    })?;
    for id in &broken.failing {
        let cell = broken.cells.iter().find(|c| &c.id == id).expect("listed cell");
        println!("perturbed cell fails: {id} (max err {:?}, tol {:e})", cell.max_abs_err, cell.tol);
    }
    Ok(())
}
