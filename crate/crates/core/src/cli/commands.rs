use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::config::Config;
use super::table::{gb, num, render};
use crate::costmodel::{
    memory_row, worked_example, ActivationShape, Convention, CostInputs, CostReport, MemoryInputs, MemoryReport, Scheme,
    DEFAULT_ACTIVATION_BYTES,
};
use crate::error::{Error, Result};
use crate::kernel::KernelKind;
use crate::model::{seeded_input, AttentionSpec};
use crate::oracle::compare;
use crate::simgroup::Mode;
use crate::verify::{
    expected_egress, layer_weights, reference, run_gradient_grid, run_grid, simulate, CellResult, GradientCell, GradientConfig,
    GridConfig, Perturbation, Target, VerifyReport,
};

/// Every rendering of one command run.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub table: String,
    pub csv: String,
    pub json: String,
    /// `(file name, contents)` pairs written under `--out`.
    pub files: Vec<(String, String)>,
    /// False when a check performed by the command failed.
    pub success: bool,
}

const DEFAULT_SEED: u64 = 42;

fn seed(cfg: &Config) -> Result<u64> {
    cfg.value("seed", DEFAULT_SEED)
}

fn mode(cfg: &Config) -> Result<Mode> {
    cfg.value("mode", Mode::Lockstep)
}

fn sizes(cfg: &Config, key: &str, default: &[usize]) -> Result<Vec<usize>> {
    let d: Vec<u64> = default.iter().map(|&v| v as u64).collect();
    Ok(cfg.positive_list(key, &d)?.into_iter().map(|v| v as usize).collect())
}

fn size(cfg: &Config, key: &str, default: usize) -> Result<usize> {
    Ok(cfg.positive(key, default as u64)? as usize)
}

/// Re-labels a divisibility failure as a problem with the offending key.
fn blame(key: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Divisibility { .. } => Error::Config {
            key: key.to_string(),
            msg: e.to_string(),
        },
        other => other,
    }
}

fn csv_of<T: Serialize>(rows: &[T], header: &[&str]) -> Result<String> {
    let mut buf = Vec::new();
    crate::costmodel::write_rows(&mut buf, rows, header)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

/// Flat CSV form of a verification cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub id: String,
    pub scheme: Scheme,
    pub kernel: KernelKind,
    pub target: Target,
    pub n: usize,
    pub b: usize,
    pub d: usize,
    pub heads: usize,
    pub p: usize,
    pub max_abs_err: Option<f64>,
    pub tol: f64,
    pub matches_oracle: bool,
    pub records: usize,
    pub per_rank_egress: u64,
    pub expected_egress: f64,
    pub ledger_exact: bool,
    pub error: Option<String>,
    pub pass: bool,
}

pub const VERIFY_COLUMNS: [&str; 18] = [
    "id",
    "scheme",
    "kernel",
    "target",
    "n",
    "b",
    "d",
    "heads",
    "p",
    "max_abs_err",
    "tol",
    "matches_oracle",
    "records",
    "per_rank_egress",
    "expected_egress",
    "ledger_exact",
    "error",
    "pass",
];

const GRADIENT_COLUMNS: [&str; 10] = ["id", "n", "b", "d", "heads", "p", "mask", "analytic_err", "fd_rel_err", "pass"];

impl From<&CellResult> for VerifyRow {
    fn from(c: &CellResult) -> Self {
        Self {
            id: c.id.clone(),
            scheme: c.scheme,
            kernel: c.kernel,
            target: c.target,
            n: c.n,
            b: c.b,
            d: c.d,
            heads: c.heads,
            p: c.p,
            max_abs_err: c.max_abs_err,
            tol: c.tol,
            matches_oracle: c.matches_oracle,
            records: c.records,
            per_rank_egress: c.per_rank_egress,
            expected_egress: c.expected_egress,
            ledger_exact: c.ledger_exact,
            error: c.error.clone(),
            pass: c.pass,
        }
    }
}

pub const VERIFY_KEYS: [&str; 18] = [
    "seed",
    "mode",
    "n",
    "b",
    "h",
    "heads",
    "p",
    "schemes",
    "kernels",
    "targets",
    "block_size",
    "tol",
    "perturb",
    "perturb_eps",
    "gradients",
    "grad_tol",
    "fd_tol",
    "fd_step",
];

fn grid_config(cfg: &Config) -> Result<GridConfig> {
    let d = GridConfig::default();
    Ok(GridConfig {
        ns: sizes(cfg, "n", &d.ns)?,
        bs: sizes(cfg, "b", &d.bs)?,
        ds: sizes(cfg, "h", &d.ds)?,
        heads: sizes(cfg, "heads", &d.heads)?,
        ps: sizes(cfg, "p", &d.ps)?,
        schemes: cfg.list("schemes", &d.schemes)?,
        kernels: cfg.list("kernels", &d.kernels)?,
        targets: cfg.list("targets", &d.targets)?,
        block_size: size(cfg, "block_size", d.block_size)?,
        seed: seed(cfg)?,
        tol: cfg.value("tol", d.tol)?,
        mode: mode(cfg)?,
        perturb: match cfg.get("perturb") {
            None | Some("") => None,
            Some(cell) => Some(Perturbation {
                cell: cell.to_string(),
                eps: cfg.value("perturb_eps", 1e-6)?,
            }),
        },
    })
}

fn verify_matrix(report: &VerifyReport) -> String {
    let ps: BTreeSet<usize> = report.cells.iter().map(|c| c.p).collect();
    let mut groups: Vec<(Scheme, KernelKind, Target)> = Vec::new();
    for c in &report.cells {
        let key = (c.scheme, c.kernel, c.target);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    let mut headers = vec!["scheme".to_string(), "kernel".to_string(), "target".to_string()];
    headers.extend(ps.iter().map(|p| format!("P={p}")));
    let rows: Vec<Vec<String>> = groups
        .iter()
        .map(|&(s, k, t)| {
            let mut row = vec![s.to_string(), k.to_string(), t.to_string()];
            for &p in &ps {
                let cells: Vec<&CellResult> = report.cells.iter().filter(|c| (c.scheme, c.kernel, c.target, c.p) == (s, k, t, p)).collect();
                let ok = cells.iter().filter(|c| c.pass).count();
                row.push(match (cells.len(), ok == cells.len()) {
                    (0, _) => "-".into(),
                    (total, true) => format!("pass {ok}/{total}"),
                    (total, false) => format!("FAIL {ok}/{total}"),
                });
            }
            row
        })
        .collect();
    let header_refs: Vec<&str> = headers.iter().map(String::as_str).collect();
    let mut out = render(&header_refs, &rows);
    if !report.gradients.is_empty() {
        let ok = report.gradients.iter().filter(|g| g.pass).count();
        let worst_a = report.gradients.iter().map(|g| g.analytic_err).fold(0.0, f64::max);
        let worst_f = report.gradients.iter().map(|g| g.fd_rel_err).fold(0.0, f64::max);
        out.push_str(&format!(
            "\nbackward: {ok}/{} pass (max analytic err {worst_a:e}, max finite-difference rel err {worst_f:e})\n",
            report.gradients.len()
        ));
    }
    out.push_str(&format!("\n{} passed, {} failed\n", report.passed, report.failed));
    for id in &report.failing {
        let detail = match report.cells.iter().find(|c| &c.id == id) {
            Some(c) => match &c.error {
                Some(e) => format!("error: {e}"),
                None => format!(
                    "max_abs_err {} (tol {:e}), ledger {} vs expected {}",
                    c.max_abs_err.map_or("-".into(), |v| format!("{v:e}")),
                    c.tol,
                    c.per_rank_egress,
                    num(c.expected_egress)
                ),
            },
            None => report
                .gradients
                .iter()
                .find(|g| &g.id == id)
                .map(|g| format!("analytic err {:e}, finite-difference rel err {:e}", g.analytic_err, g.fd_rel_err))
                .unwrap_or_default(),
        };
        out.push_str(&format!("FAIL {id}: {detail}\n"));
    }
    out
}

/// Runs the equivalence grid (and optionally the gradient grid).
///
/// Keys: `seed`, `mode`, `n`, `b`, `h`, `heads`, `p` (lists), `schemes`,
/// `kernels`, `targets`, `block_size`, `tol`, `perturb`, `perturb_eps`,
/// `gradients`, `grad_tol`, `fd_tol`, `fd_step`.
pub fn cmd_verify(cfg: &Config) -> Result<CommandOutput> {
    cfg.check_keys("verify", &VERIFY_KEYS)?;
    let grid = grid_config(cfg)?;
    let mut report = run_grid(&grid)?;
    let mut files = Vec::new();
    if cfg.value("gradients", false)? {
        let gd = GradientConfig::default();
        let gcfg = GradientConfig {
            ns: grid.ns.iter().copied().filter(|&n| n <= 16).collect(),
            bs: grid.bs.clone(),
            ds: grid.ds.clone(),
            heads: grid.heads.clone(),
            ps: grid.ps.clone(),
            masks: grid.kernels.iter().copied().filter(|&k| k != KernelKind::Blocked).collect(),
            seed: grid.seed,
            mode: grid.mode,
            analytic_tol: cfg.value("grad_tol", gd.analytic_tol)?,
            fd_tol: cfg.value("fd_tol", gd.fd_tol)?,
            fd_step: cfg.value("fd_step", gd.fd_step)?,
        };
        let cells = run_gradient_grid(&gcfg)?;
        files.push(("gradients.csv".to_string(), csv_of::<GradientCell>(&cells, &GRADIENT_COLUMNS)?));
        report = report.with_gradients(cells);
    }
    let rows: Vec<VerifyRow> = report.cells.iter().map(VerifyRow::from).collect();
    let csv = csv_of(&rows, &VERIFY_COLUMNS)?;
    let json = report.to_json()?;
    files.push(("verify.csv".into(), csv.clone()));
    files.push(("verify.json".into(), json.clone()));
    Ok(CommandOutput {
        table: verify_matrix(&report),
        csv,
        json,
        files,
        success: report.all_pass,
    })
}

fn scheme_columns(report: &CostReport, scale: f64) -> Vec<Vec<String>> {
    report
        .rows
        .chunks(Scheme::ALL.len())
        .map(|rows| {
            let mut row = vec![num(rows[0].n as f64), num(rows[0].p as f64)];
            row.extend(rows.iter().map(|r| num(r.per_link_elements * scale)));
            row.extend(rows.iter().map(|r| num(r.total_elements * scale)));
            let ratio = rows.iter().find(|r| r.scheme == Scheme::Megatron).and_then(|r| r.ratio_vs_ulysses);
            row.push(ratio.map_or("-".into(), num));
            row
        })
        .collect()
}

/// Per-scheme volumes for a list of `p`.
///
/// Keys: `n`, `b`, `h`, `p` (list), `layers`, `convention`,
/// `element_bytes`, `bytes`.
pub fn cmd_cost(cfg: &Config) -> Result<CommandOutput> {
    cfg.check_keys("cost", &["seed", "mode", "n", "b", "h", "p", "layers", "convention", "element_bytes", "bytes"])?;
    let n = cfg.positive("n", 1024)?;
    let b = cfg.positive("b", 1)?;
    let h = cfg.positive("h", 512)?;
    let ps = cfg.positive_list("p", &[2, 4, 8, 16])?;
    let layers = cfg.positive("layers", 1)?;
    let convention: Convention = cfg.value("convention", Convention::Asymptotic)?;
    let element_bytes = cfg.positive("element_bytes", 2)?;
    let in_bytes: bool = cfg.value("bytes", false)?;
    let inputs = ps
        .iter()
        .map(|&p| CostInputs::new(n, b, h, p, layers, convention).map_err(blame("p")))
        .collect::<Result<Vec<_>>>()?;
    let report = CostReport::for_inputs(&inputs);
    let (unit, scale) = if in_bytes { ("bytes", element_bytes as f64) } else { ("elements", 1.0) };
    let headers = [
        "n",
        "p",
        "ulysses/link",
        "megatron/link",
        "ring/link",
        "ulysses total",
        "megatron total",
        "ring total",
        "megatron/ulysses",
    ];
    let mut table = format!("per-rank communication per layer and over {layers} layer(s), {convention} convention, in {unit}\n\n");
    table.push_str(&render(&headers, &scheme_columns(&report, scale)));
    let csv = report.to_csv()?;
    let json = report.to_json()?;
    Ok(CommandOutput {
        table,
        files: vec![("cost.csv".into(), csv.clone()), ("cost.json".into(), json.clone())],
        csv,
        json,
        success: true,
    })
}

/// Simulated forward pass with its ledger, cross-checked against the exact
/// cost model and the oracle.
///
/// Keys: `seed`, `mode`, `scheme`, `kernel`, `target`, `n`, `b`, `h`,
/// `heads`, `p`, `layers`, `block_size`.
pub fn cmd_trace(cfg: &Config) -> Result<CommandOutput> {
    cfg.check_keys(
        "trace",
        &["seed", "mode", "scheme", "kernel", "target", "n", "b", "h", "heads", "p", "layers", "block_size"],
    )?;
    let scheme: Scheme = cfg.value("scheme", Scheme::Ulysses)?;
    let kernel: KernelKind = cfg.value("kernel", KernelKind::Dense)?;
    let target: Target = cfg.value("target", Target::Block)?;
    let (n, b, h) = (size(cfg, "n", 8)?, size(cfg, "b", 1)?, size(cfg, "h", 8)?);
    let heads = size(cfg, "heads", 4)?;
    let p = size(cfg, "p", 4)?;
    let layers = size(cfg, "layers", 2)?;
    let block_size = size(cfg, "block_size", 4)?;
    let seed = seed(cfg)?;
    let spec = AttentionSpec::new(n, b, h, heads, kernel.default_mask(n, block_size).map_err(blame("block_size"))?).map_err(blame("heads"))?;
    let x = seeded_input(n, b, h, seed);
    let weights = layer_weights(h, seed, layers);
    let k = kernel.kernel();
    let (out, ledger) = simulate(scheme, target, &x, &weights, &spec, k, p, mode(cfg)?).map_err(blame("p"))?;
    let want = reference(target, &x, &weights, &spec, k)?;
    let cmp = compare(&out, &want, 1e-12)?;
    let expected = expected_egress(scheme, target, &spec, p)? * layers as f64;
    let egress = ledger.per_rank_egress();
    let exact = egress as f64 == expected;

    let rows: Vec<Vec<String>> = ledger
        .totals_by_collective()
        .iter()
        .map(|(c, t)| vec![c.to_string(), t.records.to_string(), t.aggregate_elements.to_string(), t.per_rank_egress_elements.to_string()])
        .collect();
    let mut table = format!("{scheme} {target}, {kernel} mask, n={n} b={b} h={h} heads={heads} p={p}, {layers} layer(s)\n\n");
    table.push_str(&render(&["collective", "records", "aggregate", "per-rank egress"], &rows));
    table.push_str(&format!(
        "\nledger per-rank egress {egress}; exact cost model {}: {}\noutput vs oracle max-abs {:e}: {}\n",
        num(expected),
        if exact { "match" } else { "MISMATCH" },
        cmp.max_abs_err,
        if cmp.pass { "pass" } else { "FAIL" }
    ));
    let csv = ledger.to_csv()?;
    let json = ledger.to_json()?;
    Ok(CommandOutput {
        table,
        files: vec![("ledger.csv".into(), csv.clone()), ("ledger.json".into(), json.clone())],
        csv,
        json,
        success: exact && cmp.pass,
    })
}

/// Per-rank memory across a `p_seq` sweep, or the worked example.
///
/// Keys: `psi`, `p_data`, `p_seq` (list), `stage` (list), `n`, `b`, `h`,
/// `layers`, `c_act`, `budget_bytes`, `example`.
pub fn cmd_memory(cfg: &Config) -> Result<CommandOutput> {
    cfg.check_keys(
        "memory",
        &["seed", "mode", "psi", "p_data", "p_seq", "stage", "n", "b", "h", "layers", "c_act", "budget_bytes", "example"],
    )?;
    let report = if cfg.value("example", false)? {
        worked_example()
    } else {
        let psi: f64 = cfg.value("psi", 7e9)?;
        let p_data = cfg.positive("p_data", 1)?;
        let p_seqs = cfg.positive_list("p_seq", &[1, 2, 4, 8, 16, 32, 64])?;
        let stages: Vec<u8> = cfg.list("stage", &[0, 3])?;
        let act = ActivationShape {
            n: cfg.positive("n", 1 << 20)?,
            b: cfg.positive("b", 1)?,
            h: cfg.positive("h", 4096)?,
            layers: cfg.positive("layers", 32)?,
            c_act: cfg.value("c_act", DEFAULT_ACTIVATION_BYTES)?,
        };
        let budget: f64 = cfg.value("budget_bytes", 80e9)?;
        let mut rows = Vec::new();
        for &stage in &stages {
            for &ps in &p_seqs {
                let m = MemoryInputs::new(psi, p_data, ps, stage)?;
                rows.push(memory_row(&format!("stage {stage}"), &m, &act, budget));
            }
        }
        MemoryReport { rows }
    };
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.p_data.to_string(),
                r.p_seq.to_string(),
                gb(r.model_state_bytes),
                gb(r.activation_bytes),
                gb(r.total_bytes),
                if r.fits { "yes" } else { "no" }.to_string(),
            ]
        })
        .collect();
    let mut table = String::new();
    if let Some(r) = report.rows.first() {
        table.push_str(&format!(
            "psi={:e} params, n={} b={} h={} layers={}, budget {}\n\n",
            r.psi,
            r.n,
            r.b,
            r.h,
            r.layers,
            gb(r.budget_bytes)
        ));
    }
    table.push_str(&render(&["config", "p_data", "p_seq", "model states", "activations", "total", "fits"], &rows));
    let csv = report.to_csv()?;
    let json = report.to_json()?;
    Ok(CommandOutput {
        table,
        files: vec![("memory.csv".into(), csv.clone()), ("memory.json".into(), json.clone())],
        csv,
        json,
        success: true,
    })
}

fn parse_pairs(v: &str) -> Result<Vec<(u64, u64)>> {
    let bad = |msg: String| Error::Config { key: "pairs".into(), msg };
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (n, p) = pair.trim().split_once(':').ok_or_else(|| bad(format!("expected n:p, got `{pair}`")))?;
            let n: u64 = n.trim().parse().map_err(|e| bad(format!("`{n}`: {e}")))?;
            let p: u64 = p.trim().parse().map_err(|e| bad(format!("`{p}`: {e}")))?;
            Ok((n, p))
        })
        .collect()
}

/// Per-link volume along `(n, p)` pairs.
///
/// Keys: `pairs` (`n:p,...`), `b`, `h`, `layers`, `convention`.
pub fn cmd_sweep(cfg: &Config) -> Result<CommandOutput> {
    cfg.check_keys("sweep", &["seed", "mode", "pairs", "b", "h", "layers", "convention"])?;
    let pairs = parse_pairs(cfg.get("pairs").unwrap_or("8192:8,16384:16,32768:32,65536:64"))?;
    let b = cfg.positive("b", 1)?;
    let h = cfg.positive("h", 4096)?;
    let layers = cfg.positive("layers", 1)?;
    let convention: Convention = cfg.value("convention", Convention::Asymptotic)?;
    let inputs = pairs
        .iter()
        .map(|&(n, p)| CostInputs::new(n, b, h, p, layers, convention).map_err(|e| Error::Config { key: "pairs".into(), msg: e.to_string() }))
        .collect::<Result<Vec<_>>>()?;
    let report = CostReport::for_inputs(&inputs);
    let headers = [
        "n",
        "p",
        "ulysses/link",
        "megatron/link",
        "ring/link",
        "ulysses total",
        "megatron total",
        "ring total",
        "megatron/ulysses",
    ];
    let mut table = format!("per-link elements along proportional (n, p) pairs, {convention} convention\n\n");
    table.push_str(&render(&headers, &scheme_columns(&report, 1.0)));
    let csv = report.to_csv()?;
    let json = report.to_json()?;
    Ok(CommandOutput {
        table,
        files: vec![("sweep.csv".into(), csv.clone()), ("sweep.json".into(), json.clone())],
        csv,
        json,
        success: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgroup::CommLedger;

    fn cfg(text: &str) -> Config {
        Config::parse(text).unwrap()
    }

    #[test]
    fn cost_ratio_column() {
        let out = cmd_cost(&cfg("p = 2,4,8,16")).unwrap();
        let report = CostReport::from_csv(out.csv.as_bytes()).unwrap();
        let ratios: Vec<f64> = report.rows.iter().filter(|r| r.scheme == Scheme::Megatron).filter_map(|r| r.ratio_vs_ulysses).collect();
        assert_eq!(ratios, vec![2.0, 4.0, 8.0, 16.0]);
        assert!(out.table.contains("megatron/ulysses"));
    }

    #[test]
    fn cost_p1_exact_is_zero() {
        let out = cmd_cost(&cfg("p = 1\nconvention = exact\nn = 8\nh = 8")).unwrap();
        let report = CostReport::from_json(&out.json).unwrap();
        assert!(report.rows.iter().all(|r| r.per_link_elements == 0.0));
    }

    #[test]
    fn cost_bytes_multiplies_table_only() {
        let plain = cmd_cost(&cfg("p = 4")).unwrap();
        let bytes = cmd_cost(&cfg("p = 4\nbytes = true\nelement_bytes = 4")).unwrap();
        assert_eq!(plain.csv, bytes.csv);
        assert!(bytes.table.contains(&num(4.0 * 4.0 * 1024.0 * 512.0 / 4.0)));
    }

    #[test]
    fn cost_rows_agree_with_trace() {
        let cost = cmd_cost(&cfg("n = 8\nb = 1\nh = 8\np = 4\nlayers = 2\nconvention = exact")).unwrap();
        let report = CostReport::from_csv(cost.csv.as_bytes()).unwrap();
        for scheme in Scheme::ALL {
            let trace = cmd_trace(&cfg(&format!("scheme = {scheme}\nn = 8\nb = 1\nh = 8\np = 4\nlayers = 2"))).unwrap();
            assert!(trace.success);
            let records = CommLedger::records_from_csv(trace.csv.as_bytes()).unwrap();
            let egress: u64 = records.iter().map(|r| r.per_rank_egress_elements).sum();
            assert_eq!(report.row(scheme, 4).unwrap().total_elements, egress as f64, "{scheme}");
        }
    }

    #[test]
    fn trace_record_counts() {
        let u = cmd_trace(&cfg("scheme = ulysses\nn = 8\nb = 1\nh = 8\np = 4\nlayers = 2")).unwrap();
        assert_eq!(CommLedger::records_from_json(&u.json).unwrap().len(), 8);
        let m = cmd_trace(&cfg("scheme = megatron\nn = 8\nb = 1\nh = 8\np = 4\nlayers = 2")).unwrap();
        assert_eq!(CommLedger::records_from_json(&m.json).unwrap().len(), 8);
        assert!(m.table.contains("all_gather") && m.table.contains("reduce_scatter"));
        let one = cmd_trace(&cfg("p = 1")).unwrap();
        let recs = CommLedger::records_from_csv(one.csv.as_bytes()).unwrap();
        assert!(recs.iter().all(|r| r.per_rank_egress_elements == 0));
    }

    #[test]
    fn memory_sweep_rows() {
        let out = cmd_memory(&cfg("stage = 0,3\np_seq = 1,2,4")).unwrap();
        let r = MemoryReport::from_csv(out.csv.as_bytes()).unwrap();
        let s0: Vec<f64> = r.rows.iter().filter(|x| x.stage == 0).map(|x| x.model_state_bytes).collect();
        assert!(s0.iter().all(|&v| v == s0[0]));
        let s3: Vec<f64> = r.rows.iter().filter(|x| x.stage == 3).map(|x| x.model_state_bytes).collect();
        assert_eq!(s3[1], s3[0] / 2.0);
        assert_eq!(s3[2], s3[1] / 2.0);
        assert!(matches!(cmd_memory(&cfg("stage = 5")), Err(Error::Config { key, .. }) if key == "stage"));
        let ex = cmd_memory(&cfg("example = true")).unwrap();
        assert!(ex.table.contains("yes") && ex.table.contains("no"));
    }

    #[test]
    fn sweep_columns() {
        let out = cmd_sweep(&Config::default()).unwrap();
        let r = CostReport::from_csv(out.csv.as_bytes()).unwrap();
        let u: Vec<f64> = r.rows.iter().filter(|x| x.scheme == Scheme::Ulysses).map(|x| x.per_link_elements).collect();
        assert!(u.iter().all(|&v| v == u[0]));
        let m: Vec<f64> = r.rows.iter().filter(|x| x.scheme == Scheme::Megatron).map(|x| x.per_link_elements).collect();
        assert_eq!(m, vec![m[0], 2.0 * m[0], 4.0 * m[0], 8.0 * m[0]]);
        let single = cmd_sweep(&cfg("pairs = 1024:4")).unwrap();
        assert_eq!(CostReport::from_csv(single.csv.as_bytes()).unwrap().rows.len(), 3);
        assert!(matches!(cmd_sweep(&cfg("pairs = 10:3")), Err(Error::Config { key, .. }) if key == "pairs"));
    }

    #[test]
    fn verify_small_grid_and_unknown_key() {
        let out = cmd_verify(&cfg("n = 8\nb = 1\nh = 8\nheads = 2,4\np = 1,2,4")).unwrap();
        assert!(out.success, "{}", out.table);
        assert!(out.table.contains("pass"));
        let rows: Vec<VerifyRow> = crate::costmodel::read_rows(out.csv.as_bytes()).unwrap();
        assert_eq!(csv_of(&rows, &VERIFY_COLUMNS).unwrap(), out.csv);
        assert!(matches!(cmd_verify(&cfg("colour = red")), Err(Error::Config { key, .. }) if key == "colour"));
        assert!(matches!(cmd_verify(&cfg("p = two")), Err(Error::Config { key, .. }) if key == "p"));
    }

    #[test]
    fn verify_empty_grid() {
        let out = cmd_verify(&cfg("p =")).unwrap();
        assert!(out.success);
        assert_eq!(VerifyReport::from_json(&out.json).unwrap().cells.len(), 0);
    }

    #[test]
    fn verify_perturbation_fails_named_cell() {
        let id = "megatron/causal/attention/n8-b1-d8-h4-p2";
        let out = cmd_verify(&cfg(&format!("n = 8\nb = 1\nh = 8\nheads = 4\np = 2\nperturb = {id}"))).unwrap();
        assert!(!out.success);
        assert!(out.table.contains(&format!("FAIL {id}")));
    }
}
