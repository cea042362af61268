//! Equivalence grids: every scheme against the oracle, every ledger against
//! the closed-form volumes, and the sharded backward against both the
//! analytic and the finite-difference gradient.
//!
//! Cells run in parallel; reports list them in grid order, and nothing in a
//! report depends on the concurrency mode or thread scheduling.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{megatron_sp_attention_forward, megatron_sp_block_forward, ring_attention_forward, ring_block_forward};
use crate::costmodel::{scheme_volume, Convention, CostInputs, Scheme};
use crate::error::{Error, Result};
use crate::kernel::{AttentionKernel, KernelKind};
use crate::model::{seeded_input, AttentionGrads, AttentionSpec, LayerWeights};
use crate::oracle::{compare, finite_difference_grads, reference_attention, reference_attention_backward, reference_attention_saved, reference_block, relative_grad_error};
use crate::simgroup::{run_group, CommLedger, Mode};
use crate::tensor::Tensor3;
use crate::ulysses::{shard_sequence, ulysses_attention_backward, ulysses_attention_forward, ulysses_attention_forward_saved, ulysses_block_forward, unshard_sequence, ShardedTensor};

/// What a cell simulates: attention alone or the full pre-LN block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Attention,
    Block,
}

impl Target {
    pub const ALL: [Target; 2] = [Target::Attention, Target::Block];
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Target::Attention => "attention",
            Target::Block => "block",
        })
    }
}

impl FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "attention" => Ok(Target::Attention),
            "block" => Ok(Target::Block),
            other => Err(format!("unknown target `{other}` (expected attention|block)")),
        }
    }
}

/// Seed of the input activations; layer `i` uses `seed + 1 + i` for its
/// weights.
pub fn layer_weights(d: usize, seed: u64, layers: usize) -> Vec<LayerWeights> {
    (0..layers).map(|i| LayerWeights::seeded(d, seed.wrapping_add(1 + i as u64))).collect()
}

/// Runs `layers.len()` stacked layers of `scheme` over `p` simulated ranks
/// and returns the reassembled output with the group ledger.
///
/// Ring attention evaluates the mask directly and ignores `kernel`. Layer
/// `i` is labelled `L{i}`.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    scheme: Scheme,
    target: Target,
    x: &Tensor3,
    layers: &[LayerWeights],
    spec: &AttentionSpec,
    kernel: &dyn AttentionKernel,
    p: usize,
    mode: Mode,
) -> Result<(Tensor3, CommLedger)> {
    let shards = shard_sequence(x, p)?;
    let (outs, ledger) = run_group(p, mode, |comm| {
        let mut h = shards[comm.rank()].clone();
        for (i, w) in layers.iter().enumerate() {
            let label = format!("L{i}");
            h = step(scheme, target, &h, w, spec, kernel, comm, &label)?;
        }
        Ok(h)
    })?;
    Ok((unshard_sequence(&outs)?, ledger))
}

#[allow(clippy::too_many_arguments)]
fn step(
    scheme: Scheme,
    target: Target,
    h: &ShardedTensor,
    w: &LayerWeights,
    spec: &AttentionSpec,
    kernel: &dyn AttentionKernel,
    comm: &crate::simgroup::Comm<'_>,
    label: &str,
) -> Result<ShardedTensor> {
    match (scheme, target) {
        (Scheme::Ulysses, Target::Attention) => ulysses_attention_forward(h, w, spec, kernel, comm, label),
        (Scheme::Ulysses, Target::Block) => ulysses_block_forward(h, w, spec, kernel, comm, label),
        (Scheme::Megatron, Target::Attention) => megatron_sp_attention_forward(h, w, spec, kernel, comm, label),
        (Scheme::Megatron, Target::Block) => megatron_sp_block_forward(h, w, spec, kernel, comm, label),
        (Scheme::Ring, Target::Attention) => ring_attention_forward(h, w, spec, comm, label),
        (Scheme::Ring, Target::Block) => ring_block_forward(h, w, spec, comm, label),
    }
}

/// Single-rank reference for the same stack of layers.
pub fn reference(target: Target, x: &Tensor3, layers: &[LayerWeights], spec: &AttentionSpec, kernel: &dyn AttentionKernel) -> Result<Tensor3> {
    let mut h = x.clone();
    for w in layers {
        h = match target {
            Target::Attention => reference_attention(&h, w, spec, kernel)?,
            Target::Block => reference_block(&h, w, spec, kernel)?,
        };
    }
    Ok(h)
}

/// Closed-form per-rank egress of one layer, in elements.
///
/// The attention-only Megatron variant runs half the collectives of the
/// block.
pub fn expected_egress(scheme: Scheme, target: Target, spec: &AttentionSpec, p: usize) -> Result<f64> {
    let c = CostInputs::new(spec.n as u64, spec.b as u64, spec.d as u64, p as u64, 1, Convention::Exact)?;
    let v = scheme_volume(scheme, &c);
    Ok(match (scheme, target) {
        (Scheme::Megatron, Target::Attention) => v / 2.0,
        _ => v,
    })
}

/// One point of the equivalence grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub scheme: Scheme,
    pub kernel: KernelKind,
    pub target: Target,
    pub n: usize,
    pub b: usize,
    pub d: usize,
    pub heads: usize,
    pub p: usize,
}

impl Cell {
    /// Stable identifier, e.g. `ulysses/causal/attention/n16-b2-d32-h4-p4`.
    pub fn id(&self) -> String {
        format!(
            "{}/{}/{}/n{}-b{}-d{}-h{}-p{}",
            self.scheme, self.kernel, self.target, self.n, self.b, self.d, self.heads, self.p
        )
    }
}

/// Perturbation fixture: adds `eps` to the first output element of one cell
/// so the failure path can be exercised end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub cell: String,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub ns: Vec<usize>,
    pub bs: Vec<usize>,
    pub ds: Vec<usize>,
    pub heads: Vec<usize>,
    pub ps: Vec<usize>,
    pub schemes: Vec<Scheme>,
    pub kernels: Vec<KernelKind>,
    pub targets: Vec<Target>,
    pub block_size: usize,
    pub seed: u64,
    pub tol: f64,
    pub mode: Mode,
    pub perturb: Option<Perturbation>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            ns: vec![8, 16, 64],
            bs: vec![1, 2],
            ds: vec![8, 32],
            heads: vec![2, 4, 8],
            ps: vec![1, 2, 4, 8],
            schemes: Scheme::ALL.to_vec(),
            kernels: KernelKind::ALL.to_vec(),
            targets: vec![Target::Attention],
            block_size: 4,
            seed: 42,
            tol: 1e-12,
            mode: Mode::Lockstep,
            perturb: None,
        }
    }
}

impl GridConfig {
    /// Cells in grid order, skipping shapes the scheme cannot shard:
    /// `heads ∤ d`, `P ∤ n`, `P ∤ heads` for the head-parallel schemes, and
    /// blocked masks whose block size does not divide `n`.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &scheme in &self.schemes {
            for &kernel in &self.kernels {
                for &target in &self.targets {
                    for &n in &self.ns {
                        for &b in &self.bs {
                            for &d in &self.ds {
                                for &heads in &self.heads {
                                    for &p in &self.ps {
                                        let cell = Cell { scheme, kernel, target, n, b, d, heads, p };
                                        if self.admits(&cell) {
                                            out.push(cell);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn admits(&self, c: &Cell) -> bool {
        let divides = |a: usize, b: usize| a > 0 && b > 0 && b.is_multiple_of(a);
        if !(divides(c.heads, c.d) && divides(c.p, c.n)) {
            return false;
        }
        if c.scheme != Scheme::Ring && !divides(c.p, c.heads) {
            return false;
        }
        c.kernel != KernelKind::Blocked || divides(self.block_size, c.n)
    }

    fn spec(&self, c: &Cell) -> Result<AttentionSpec> {
        AttentionSpec::new(c.n, c.b, c.d, c.heads, c.kernel.default_mask(c.n, self.block_size)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub id: String,
    pub scheme: Scheme,
    pub kernel: KernelKind,
    pub target: Target,
    pub n: usize,
    pub b: usize,
    pub d: usize,
    pub heads: usize,
    pub p: usize,
    /// Absent when the cell raised an error.
    pub max_abs_err: Option<f64>,
    pub worst_index: [usize; 3],
    pub tol: f64,
    pub matches_oracle: bool,
    pub records: usize,
    pub per_rank_egress: u64,
    pub expected_egress: f64,
    pub ledger_exact: bool,
    pub error: Option<String>,
    pub pass: bool,
}

impl CellResult {
    fn failed(cell: &Cell, tol: f64, e: &Error) -> Self {
        Self {
            id: cell.id(),
            scheme: cell.scheme,
            kernel: cell.kernel,
            target: cell.target,
            n: cell.n,
            b: cell.b,
            d: cell.d,
            heads: cell.heads,
            p: cell.p,
            max_abs_err: None,
            worst_index: [0; 3],
            tol,
            matches_oracle: false,
            records: 0,
            per_rank_egress: 0,
            expected_egress: 0.0,
            ledger_exact: false,
            error: Some(e.to_string()),
            pass: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub tol: f64,
    pub cells: Vec<CellResult>,
    /// Empty unless the gradient grid was requested.
    pub gradients: Vec<GradientCell>,
    pub passed: usize,
    pub failed: usize,
    pub failing: Vec<String>,
    pub all_pass: bool,
}

impl VerifyReport {
    fn assemble(seed: u64, tol: f64, cells: Vec<CellResult>, gradients: Vec<GradientCell>) -> Self {
        let failing: Vec<String> = cells
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.id.clone())
            .chain(gradients.iter().filter(|g| !g.pass).map(|g| g.id.clone()))
            .collect();
        Self {
            seed,
            tol,
            passed: cells.len() + gradients.len() - failing.len(),
            failed: failing.len(),
            all_pass: failing.is_empty(),
            failing,
            cells,
            gradients,
        }
    }

    /// Adds gradient-grid results; their failures count like any cell's.
    pub fn with_gradients(self, gradients: Vec<GradientCell>) -> Self {
        Self::assemble(self.seed, self.tol, self.cells, gradients)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn run_cell(cfg: &GridConfig, cell: &Cell) -> Result<CellResult> {
    let spec = cfg.spec(cell)?;
    let kernel = cell.kernel.kernel();
    let x = seeded_input(cell.n, cell.b, cell.d, cfg.seed);
    let layers = layer_weights(cell.d, cfg.seed, 1);
    let want = reference(cell.target, &x, &layers, &spec, kernel)?;
    let (mut got, ledger) = simulate(cell.scheme, cell.target, &x, &layers, &spec, kernel, cell.p, cfg.mode)?;
    let id = cell.id();
    if let Some(pt) = cfg.perturb.as_ref().filter(|pt| pt.cell == id) {
        got.data_mut()[0] += pt.eps;
    }
    let cmp = compare(&got, &want, cfg.tol)?;
    let egress = ledger.per_rank_egress();
    let expected = expected_egress(cell.scheme, cell.target, &spec, cell.p)?;
    let ledger_exact = egress as f64 == expected;
    Ok(CellResult {
        id,
        scheme: cell.scheme,
        kernel: cell.kernel,
        target: cell.target,
        n: cell.n,
        b: cell.b,
        d: cell.d,
        heads: cell.heads,
        p: cell.p,
        max_abs_err: Some(cmp.max_abs_err),
        worst_index: cmp.index,
        tol: cfg.tol,
        matches_oracle: cmp.pass,
        records: ledger.len(),
        per_rank_egress: egress,
        expected_egress: expected,
        ledger_exact,
        error: None,
        pass: cmp.pass && ledger_exact,
    })
}

/// Runs every cell of `cfg`. Cell-level failures (including errors raised
/// inside a cell) are reported, not propagated; only an invalid
/// configuration is an error.
pub fn run_grid(cfg: &GridConfig) -> Result<VerifyReport> {
    if !(cfg.tol.is_finite() && cfg.tol >= 0.0) {
        return Err(Error::Config {
            key: "tol".into(),
            msg: format!("tolerance must be finite and non-negative, got {}", cfg.tol),
        });
    }
    let cells = cfg.cells();
    if let Some(pt) = &cfg.perturb {
        if !cells.iter().any(|c| c.id() == pt.cell) {
            return Err(Error::Config {
                key: "perturb".into(),
                msg: format!("no grid cell named `{}`", pt.cell),
            });
        }
    }
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|c| run_cell(cfg, c).unwrap_or_else(|e| CellResult::failed(c, cfg.tol, &e)))
        .collect();
    Ok(VerifyReport::assemble(cfg.seed, cfg.tol, results, Vec::new()))
}

/// Sharded backward vs the oracle backward and vs finite differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCell {
    pub id: String,
    pub n: usize,
    pub b: usize,
    pub d: usize,
    pub heads: usize,
    pub p: usize,
    pub mask: String,
    /// Max-abs difference to the oracle's analytic gradients.
    pub analytic_err: f64,
    /// `max |fd − sharded| / max |sharded|` over all gradient tensors.
    pub fd_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientConfig {
    pub ns: Vec<usize>,
    pub bs: Vec<usize>,
    pub ds: Vec<usize>,
    pub heads: Vec<usize>,
    pub ps: Vec<usize>,
    pub masks: Vec<KernelKind>,
    pub seed: u64,
    pub mode: Mode,
    pub analytic_tol: f64,
    pub fd_tol: f64,
    pub fd_step: f64,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            ns: vec![8, 16],
            bs: vec![1, 2],
            ds: vec![8, 32],
            heads: vec![2, 4, 8],
            ps: vec![1, 2, 4, 8],
            masks: vec![KernelKind::Dense, KernelKind::Causal],
            seed: 42,
            mode: Mode::Lockstep,
            analytic_tol: 1e-10,
            fd_tol: 1e-6,
            fd_step: 1e-5,
        }
    }
}

/// Sharded forward + backward over `p` ranks, with the upstream gradient
/// split the same way as the input. Weight gradients are summed over ranks.
pub fn ulysses_gradients(
    x: &Tensor3,
    grad_out: &Tensor3,
    w: &LayerWeights,
    spec: &AttentionSpec,
    kernel: &dyn AttentionKernel,
    p: usize,
    mode: Mode,
) -> Result<(Tensor3, AttentionGrads, CommLedger)> {
    let xs = shard_sequence(x, p)?;
    let gs = shard_sequence(grad_out, p)?;
    let (parts, ledger) = run_group(p, mode, |comm| {
        let r = comm.rank();
        let (_, saved) = ulysses_attention_forward_saved(&xs[r], w, spec, kernel, comm, "fwd")?;
        ulysses_attention_backward(&gs[r], Some(&saved), w, spec, comm, "bwd")
    })?;
    let (gx, gw): (Vec<ShardedTensor>, Vec<AttentionGrads>) = parts.into_iter().unzip();
    Ok((unshard_sequence(&gx)?, AttentionGrads::sum(&gw)?, ledger))
}

/// Runs the gradient grid. Finite differences are computed once per shape
/// and mask and reused for every `P`.
pub fn run_gradient_grid(cfg: &GradientConfig) -> Result<Vec<GradientCell>> {
    let mut shapes = Vec::new();
    for &mask in &cfg.masks {
        if mask == KernelKind::Blocked {
            return Err(Error::Config {
                key: "masks".into(),
                msg: "gradients are available for dense and causal masks only".into(),
            });
        }
        for &n in &cfg.ns {
            for &b in &cfg.bs {
                for &d in &cfg.ds {
                    for &heads in &cfg.heads {
                        if d % heads == 0 {
                            shapes.push((mask, n, b, d, heads));
                        }
                    }
                }
            }
        }
    }
    let per_shape: Vec<Result<Vec<GradientCell>>> = shapes
        .par_iter()
        .map(|&(mask, n, b, d, heads)| {
            let spec = AttentionSpec::new(n, b, d, heads, mask.default_mask(n, 1)?)?;
            let kernel = mask.kernel();
            let x = seeded_input(n, b, d, cfg.seed);
            let g = seeded_input(n, b, d, cfg.seed.wrapping_add(1000));
            let w = LayerWeights::seeded(d, cfg.seed.wrapping_add(1));
            let (_, saved) = reference_attention_saved(&x, &w, &spec, kernel)?;
            let (ox, ow) = reference_attention_backward(&g, &saved, &w, &spec)?;
            let (fx, fw) = finite_difference_grads(&x, &g, &w, &spec, kernel, cfg.fd_step)?;
            let mut cells = Vec::new();
            for &p in &cfg.ps {
                if n % p != 0 || heads % p != 0 {
                    continue;
                }
                let (ux, uw, _) = ulysses_gradients(&x, &g, &w, &spec, kernel, p, cfg.mode)?;
                let analytic_err = uw.max_abs_diff(&ow).max(compare(&ux, &ox, 0.0)?.max_abs_err);
                let fd_rel_err = relative_grad_error((&fx, &fw), (&ux, &uw));
                cells.push(GradientCell {
                    id: format!("ulysses/{mask}/backward/n{n}-b{b}-d{d}-h{heads}-p{p}"),
                    n,
                    b,
                    d,
                    heads,
                    p,
                    mask: spec.mask.name().to_string(),
                    analytic_err,
                    fd_rel_err,
                    pass: analytic_err <= cfg.analytic_tol && fd_rel_err <= cfg.fd_tol,
                });
            }
            Ok(cells)
        })
        .collect();
    let mut out = Vec::new();
    for r in per_shape {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mask;

    fn small() -> GridConfig {
        GridConfig {
            ns: vec![8, 16],
            bs: vec![1, 2],
            ds: vec![8],
            heads: vec![2, 4],
            ps: vec![1, 2, 4],
            targets: Target::ALL.to_vec(),
            ..GridConfig::default()
        }
    }

    #[test]
    fn small_grid_passes() {
        let r = run_grid(&small()).unwrap();
        assert!(r.all_pass, "{:?}", r.failing);
        assert!(r.cells.len() > 100);
    }

    #[test]
    fn empty_grid_passes_trivially() {
        let cfg = GridConfig { ps: vec![], ..small() };
        let r = run_grid(&cfg).unwrap();
        assert!(r.cells.is_empty() && r.all_pass);
    }

    #[test]
    fn skips_non_divisible_cells() {
        let cfg = GridConfig {
            ns: vec![8],
            ps: vec![3],
            ..small()
        };
        assert!(cfg.cells().is_empty());
        let ring_only = GridConfig {
            heads: vec![2],
            ps: vec![4],
            ..small()
        };
        assert!(ring_only.cells().iter().all(|c| c.scheme == Scheme::Ring));
    }

    #[test]
    fn perturbation_names_the_cell() {
        let mut cfg = small();
        let victim = cfg.cells()[7].id();
        cfg.perturb = Some(Perturbation { cell: victim.clone(), eps: 1e-6 });
        let r = run_grid(&cfg).unwrap();
        assert_eq!(r.failing, vec![victim]);
        cfg.perturb = Some(Perturbation {
            cell: "nope".into(),
            eps: 1.0,
        });
        assert!(matches!(run_grid(&cfg), Err(Error::Config { key, .. }) if key == "perturb"));
    }

    #[test]
    fn report_is_mode_independent() {
        let a = run_grid(&small()).unwrap().to_json().unwrap();
        let b = run_grid(&GridConfig {
            mode: Mode::Concurrent,
            ..small()
        })
        .unwrap()
        .to_json()
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(VerifyReport::from_json(&a).unwrap().to_json().unwrap(), a);
    }

    #[test]
    fn stacked_layers_trace_counts() {
        let spec = AttentionSpec::new(8, 1, 8, 4, Mask::None).unwrap();
        let x = seeded_input(8, 1, 8, 1);
        let layers = layer_weights(8, 1, 2);
        let k = KernelKind::Dense.kernel();
        let (_, l) = simulate(Scheme::Ulysses, Target::Block, &x, &layers, &spec, k, 4, Mode::Lockstep).unwrap();
        assert_eq!(l.count(crate::simgroup::Collective::AllToAll), 8);
        let (_, l) = simulate(Scheme::Megatron, Target::Block, &x, &layers, &spec, k, 4, Mode::Lockstep).unwrap();
        assert_eq!(l.count(crate::simgroup::Collective::AllGather), 4);
        assert_eq!(l.count(crate::simgroup::Collective::ReduceScatter), 4);
    }

    #[test]
    fn small_gradient_grid() {
        let cfg = GradientConfig {
            ns: vec![8],
            bs: vec![1],
            ds: vec![8],
            heads: vec![2, 4],
            ..GradientConfig::default()
        };
        let cells = run_gradient_grid(&cfg).unwrap();
        assert_eq!(cells.len(), 2 * (2 + 3));
        assert!(cells.iter().all(|c| c.pass), "{cells:?}");
    }
}
