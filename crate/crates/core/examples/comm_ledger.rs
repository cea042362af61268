//! Exporting a communication ledger as CSV and JSON and reading it back.
//!
//! Run with `cargo run --example comm_ledger`.

use ulysses_lab::costmodel::Scheme;
use ulysses_lab::kernel::KernelKind;
use ulysses_lab::model::{seeded_input, AttentionSpec};
use ulysses_lab::simgroup::{CommLedger, Mode};
use ulysses_lab::tensor::Mask;
use ulysses_lab::verify::{expected_egress, layer_weights, simulate, Target};

fn main() -> ulysses_lab::Result<()> {
    let spec = AttentionSpec::new(8, 1, 8, 4, Mask::None)?;
    let x = seeded_input(8, 1, 8, 0);
    let layers = layer_weights(8, 0, 2);
    let (_, ledger) = simulate(Scheme::Megatron, Target::Block, &x, &layers, &spec, KernelKind::Dense.kernel(), 4, Mode::Lockstep)?;

    let csv = ledger.to_csv()?;
    print!("{csv}");
    for (kind, t) in ledger.totals_by_collective() {
        println!("{kind}: {} records, per-rank egress {}", t.records, t.per_rank_egress_elements);
    }
    let expected = 2.0 * expected_egress(Scheme::Megatron, Target::Block, &spec, 4)?;
    println!("ledger {} vs closed form {expected}", ledger.per_rank_egress());

    let back = CommLedger::from_records(4, CommLedger::records_from_csv(csv.as_bytes())?);
    assert_eq!(back.to_csv()?, csv);
    let json = ledger.to_json()?;
    assert_eq!(CommLedger::records_from_json(&json)?, ledger.records());
    println!("CSV and JSON round trips are byte-identical");
    Ok(())
}
