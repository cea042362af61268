//! Driving the command layer from a flat config, as the binary does.
//!
//! Run with `cargo run --example config_driven`.

use ulysses_lab::cli::{cmd_cost, cmd_sweep, cmd_trace, Config};

fn main() -> ulysses_lab::Result<()> {
    let cfg = Config::parse(
        "# one ring trace, cross-checked against the exact cost model\n\
         scheme = ring\n\
         n = 16\n\
         h = 8\n\
         p = 4\n\
         layers = 1\n\
         seed = 3\n",
    )?;
    print!("canonical config:\n{cfg}\n");
    println!("{}", cmd_trace(&cfg)?.table);

    let mut cost = Config::default();
    cost.set("p", "2,4,8,16")?;
    cost.set("bytes", "true")?;
    println!("{}", cmd_cost(&cost)?.table);
    print!("{}", cmd_sweep(&Config::default())?.table);
    Ok(())
}
