//! Command-line front end: `verify`, `cost`, `trace`, `memory`, `sweep`.
//!
//! Each command reads a [`Config`] (file entries, then flag overrides) and
//! returns a [`CommandOutput`] holding the table, CSV and JSON renderings
//! plus the files to write under `--out`.

mod commands;
mod config;
mod table;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{cmd_cost, cmd_memory, cmd_sweep, cmd_trace, cmd_verify, CommandOutput, VerifyRow};
pub use config::Config;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Format {
    #[default]
    Table,
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "ulysses-lab", version, about = "Simulated sequence-parallel attention: equivalence checks and communication accounting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Directory for report files.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    #[arg(long, value_name = "U64")]
    pub seed: Option<String>,
    /// lockstep | concurrent
    #[arg(long)]
    pub mode: Option<String>,
    /// Extra config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the scheme-vs-oracle equivalence grid.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<String>,
        #[arg(long)]
        b: Option<String>,
        #[arg(long)]
        h: Option<String>,
        #[arg(long)]
        heads: Option<String>,
        #[arg(long)]
        p: Option<String>,
        #[arg(long)]
        schemes: Option<String>,
        #[arg(long)]
        kernels: Option<String>,
        #[arg(long)]
        targets: Option<String>,
        #[arg(long)]
        tol: Option<String>,
        /// Cell id to perturb (failure-path fixture).
        #[arg(long)]
        perturb: Option<String>,
        /// Also run the backward-pass gradient grid.
        #[arg(long)]
        gradients: bool,
    },
    /// Closed-form per-scheme communication volumes.
    Cost {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<String>,
        #[arg(long)]
        b: Option<String>,
        #[arg(long)]
        h: Option<String>,
        #[arg(long)]
        p: Option<String>,
        #[arg(long)]
        layers: Option<String>,
        /// exact | asymptotic
        #[arg(long)]
        convention: Option<String>,
        #[arg(long = "element-bytes")]
        element_bytes: Option<String>,
        /// Show byte volumes next to element counts.
        #[arg(long)]
        bytes: bool,
    },
    /// Run a simulated forward pass and dump its communication ledger.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        kernel: Option<String>,
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        n: Option<String>,
        #[arg(long)]
        b: Option<String>,
        #[arg(long)]
        h: Option<String>,
        #[arg(long)]
        heads: Option<String>,
        #[arg(long)]
        p: Option<String>,
        #[arg(long)]
        layers: Option<String>,
    },
    /// Per-rank model-state and activation memory.
    Memory {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        psi: Option<String>,
        #[arg(long = "p-data")]
        p_data: Option<String>,
        #[arg(long = "p-seq")]
        p_seq: Option<String>,
        #[arg(long)]
        stage: Option<String>,
        /// Print the worked example instead of a sweep.
        #[arg(long)]
        example: bool,
    },
    /// Per-link volume along (n, p) pairs with a fixed ratio.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated `n:p` pairs.
        #[arg(long)]
        pairs: Option<String>,
        #[arg(long)]
        b: Option<String>,
        #[arg(long)]
        h: Option<String>,
        #[arg(long)]
        convention: Option<String>,
    },
}

type Runner = fn(&Config) -> Result<CommandOutput>;

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Verify { common, .. }
            | Command::Cost { common, .. }
            | Command::Trace { common, .. }
            | Command::Memory { common, .. }
            | Command::Sweep { common, .. } => common,
        }
    }

    /// Flag values keyed by their config names, plus the command to run.
    fn overrides(&self) -> (Vec<(&'static str, Option<String>)>, Runner) {
        let flag = |on: bool| on.then(|| "true".to_string());
        match self {
            Command::Verify {
                n,
                b,
                h,
                heads,
                p,
                schemes,
                kernels,
                targets,
                tol,
                perturb,
                gradients,
                ..
            } => (
                vec![
                    ("n", n.clone()),
                    ("b", b.clone()),
                    ("h", h.clone()),
                    ("heads", heads.clone()),
                    ("p", p.clone()),
                    ("schemes", schemes.clone()),
                    ("kernels", kernels.clone()),
                    ("targets", targets.clone()),
                    ("tol", tol.clone()),
                    ("perturb", perturb.clone()),
                    ("gradients", flag(*gradients)),
                ],
                cmd_verify,
            ),
            Command::Cost {
                n,
                b,
                h,
                p,
                layers,
                convention,
                element_bytes,
                bytes,
                ..
            } => (
                vec![
                    ("n", n.clone()),
                    ("b", b.clone()),
                    ("h", h.clone()),
                    ("p", p.clone()),
                    ("layers", layers.clone()),
                    ("convention", convention.clone()),
                    ("element_bytes", element_bytes.clone()),
                    ("bytes", flag(*bytes)),
                ],
                cmd_cost,
            ),
            Command::Trace {
                scheme,
                kernel,
                target,
                n,
                b,
                h,
                heads,
                p,
                layers,
                ..
            } => (
                vec![
                    ("scheme", scheme.clone()),
                    ("kernel", kernel.clone()),
                    ("target", target.clone()),
                    ("n", n.clone()),
                    ("b", b.clone()),
                    ("h", h.clone()),
                    ("heads", heads.clone()),
                    ("p", p.clone()),
                    ("layers", layers.clone()),
                ],
                cmd_trace,
            ),
            Command::Memory {
                psi,
                p_data,
                p_seq,
                stage,
                example,
                ..
            } => (
                vec![
                    ("psi", psi.clone()),
                    ("p_data", p_data.clone()),
                    ("p_seq", p_seq.clone()),
                    ("stage", stage.clone()),
                    ("example", flag(*example)),
                ],
                cmd_memory,
            ),
            Command::Sweep {
                pairs,
                b,
                h,
                convention,
                ..
            } => (
                vec![
                    ("pairs", pairs.clone()),
                    ("b", b.clone()),
                    ("h", h.clone()),
                    ("convention", convention.clone()),
                ],
                cmd_sweep,
            ),
        }
    }
}

/// Config file entries, then `--seed`/`--mode`, then command flags, then
/// `--set` pairs; later sources win.
pub fn resolve_config(cmd: &Command) -> Result<Config> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    let (flags, _) = cmd.overrides();
    let base = [("seed", common.seed.clone()), ("mode", common.mode.clone())];
    for (k, v) in base.into_iter().chain(flags) {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            key: kv.clone(),
            msg: "expected KEY=VALUE after --set".into(),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn write_files(dir: &Path, files: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, body) in files {
        std::fs::write(dir.join(name), body)?;
    }
    Ok(())
}

/// Runs a parsed command and writes its chosen rendering to `out`.
/// Returns the process exit status: 0 on success, 1 when a verification
/// fails.
pub fn execute(cmd: &Command, out: &mut dyn Write) -> Result<i32> {
    let cfg = resolve_config(cmd)?;
    let (_, run) = cmd.overrides();
    let output = run(&cfg)?;
    let common = cmd.common();
    if let Some(dir) = &common.out {
        write_files(dir, &output.files)?;
    }
    let text = match common.format {
        Format::Table => &output.table,
        Format::Csv => &output.csv,
        Format::Json => &output.json,
    };
    out.write_all(text.as_bytes())?;
    Ok(if output.success { 0 } else { 1 })
}

/// Whole-program entry: parse `args`, run, report errors. Usage and config
/// errors exit with status 2.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = err.write_all(text.as_bytes());
                2
            } else {
                let _ = out.write_all(text.as_bytes());
                0
            };
        }
    };
    match execute(&cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if matches!(e, Error::Config { .. }) {
                2
            } else {
                1
            }
        }
    }
}
