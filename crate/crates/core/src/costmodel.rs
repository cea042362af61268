//! Closed-form communication volumes and per-rank memory.
//!
//! Volumes are elements transmitted per rank (per link) per layer, in two
//! conventions:
//!
//! * [`Convention::Exact`] counts what actually leaves a rank and matches the
//!   simulator ledger to the element: an all-to-all keeps `1/P` of its input
//!   local, so a layer's four all-to-alls send `4·n·b·h·(P−1)/P²`.
//! * [`Convention::Asymptotic`] uses the large-`P` link model: an
//!   all-to-all of aggregate size `M` costs `M/P` per link, an all-gather or
//!   reduce-scatter of size `M` costs `M`. This gives `4·n·b·h/P` against
//!   `4·n·b·h`, a ratio of exactly `P`.
//!
//! The batch `b` multiplies every volume.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    Exact,
    #[default]
    Asymptotic,
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Convention::Exact => "exact",
            Convention::Asymptotic => "asymptotic",
        })
    }
}

impl FromStr for Convention {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Convention::Exact),
            "asymptotic" => Ok(Convention::Asymptotic),
            other => Err(format!("unknown convention `{other}` (expected exact|asymptotic)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Ulysses,
    Megatron,
    Ring,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Ulysses, Scheme::Megatron, Scheme::Ring];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Ulysses => "ulysses",
            Scheme::Megatron => "megatron",
            Scheme::Ring => "ring",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ulysses" => Ok(Scheme::Ulysses),
            "megatron" | "megatron_sp" | "megatron-sp" => Ok(Scheme::Megatron),
            "ring" => Ok(Scheme::Ring),
            other => Err(format!("unknown scheme `{other}` (expected ulysses|megatron|ring)")),
        }
    }
}

/// Problem size for the volume formulas. `h` is the hidden size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostInputs {
    pub n: u64,
    pub b: u64,
    pub h: u64,
    pub p: u64,
    pub layers: u64,
    pub convention: Convention,
}

impl CostInputs {
    pub fn new(n: u64, b: u64, h: u64, p: u64, layers: u64, convention: Convention) -> Result<Self> {
        for (key, v) in [("n", n), ("b", b), ("h", h), ("p", p), ("layers", layers)] {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "must be positive".into(),
                });
            }
        }
        if !n.is_multiple_of(p) {
            return Err(Error::Divisibility {
                what: "sequence length by parallel degree",
                len: n as usize,
                by: p as usize,
            });
        }
        Ok(Self { n, b, h, p, layers, convention })
    }

    pub fn with_convention(self, convention: Convention) -> Self {
        Self { convention, ..self }
    }

    fn nbh(&self) -> u128 {
        self.n as u128 * self.b as u128 * self.h as u128
    }
}

fn ratio(num: u128, den: u128) -> f64 {
    num as f64 / den as f64
}

/// Per-rank elements per layer for the all-to-all scheme.
pub fn ulysses_volume(c: &CostInputs) -> f64 {
    let p = c.p as u128;
    match c.convention {
        Convention::Asymptotic => ratio(4 * c.nbh(), p),
        Convention::Exact => ratio(4 * c.nbh() * (p - 1), p * p),
    }
}

/// Per-rank elements per layer for two all-gathers plus two reduce-scatters.
pub fn megatron_volume(c: &CostInputs) -> f64 {
    let p = c.p as u128;
    match c.convention {
        Convention::Asymptotic => (4 * c.nbh()) as f64,
        Convention::Exact => ratio(4 * c.nbh() * (p - 1), p),
    }
}

/// Per-rank elements per layer for the key and value rings.
pub fn ring_volume(c: &CostInputs) -> f64 {
    let p = c.p as u128;
    match c.convention {
        Convention::Asymptotic => (2 * c.nbh()) as f64,
        Convention::Exact => ratio(2 * c.nbh() * (p - 1), p),
    }
}

pub fn scheme_volume(scheme: Scheme, c: &CostInputs) -> f64 {
    match scheme {
        Scheme::Ulysses => ulysses_volume(c),
        Scheme::Megatron => megatron_volume(c),
        Scheme::Ring => ring_volume(c),
    }
}

/// One CSV/JSON row of a cost report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub scheme: Scheme,
    pub n: u64,
    pub b: u64,
    pub h: u64,
    pub p: u64,
    pub layers: u64,
    pub convention: Convention,
    pub per_link_elements: f64,
    pub total_elements: f64,
    /// Empty when the ulysses volume is zero (`p = 1`, exact convention).
    pub ratio_vs_ulysses: Option<f64>,
}

/// Per-scheme volumes for one or more configurations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

/// Rows for every scheme at `c`, ulysses first.
pub fn cost_rows(c: &CostInputs) -> Vec<CostRow> {
    let base = ulysses_volume(c);
    Scheme::ALL
        .iter()
        .map(|&scheme| {
            let v = scheme_volume(scheme, c);
            CostRow {
                scheme,
                n: c.n,
                b: c.b,
                h: c.h,
                p: c.p,
                layers: c.layers,
                convention: c.convention,
                per_link_elements: v,
                total_elements: v * c.layers as f64,
                ratio_vs_ulysses: (base != 0.0).then(|| v / base),
            }
        })
        .collect()
}

impl CostReport {
    pub fn for_inputs<'a>(inputs: impl IntoIterator<Item = &'a CostInputs>) -> Self {
        Self {
            rows: inputs.into_iter().flat_map(cost_rows).collect(),
        }
    }

    pub fn row(&self, scheme: Scheme, p: u64) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.scheme == scheme && r.p == p)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_rows(w, &self.rows, &COST_COLUMNS)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv<R: Read>(r: R) -> Result<Self> {
        Ok(Self { rows: read_rows(r)? })
    }
}

pub const COST_COLUMNS: [&str; 10] = [
    "scheme",
    "n",
    "b",
    "h",
    "p",
    "layers",
    "convention",
    "per_link_elements",
    "total_elements",
    "ratio_vs_ulysses",
];

pub(crate) fn write_rows<W: Write, T: Serialize>(w: W, rows: &[T], header: &[&str]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wtr.write_record(header)?;
    }
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub(crate) fn read_rows<R: Read, T: serde::de::DeserializeOwned>(r: R) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Bytes per parameter for each class of model state (mixed-precision Adam:
/// 16-bit parameters and gradients, 32-bit master weights, momentum and
/// variance).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateBytes {
    pub params: f64,
    pub grads: f64,
    pub optimizer: f64,
}

impl Default for StateBytes {
    fn default() -> Self {
        Self {
            params: 2.0,
            grads: 2.0,
            optimizer: 12.0,
        }
    }
}

impl StateBytes {
    pub fn total(&self) -> f64 {
        self.params + self.grads + self.optimizer
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryInputs {
    /// Parameter count.
    pub psi: f64,
    pub p_data: u64,
    pub p_seq: u64,
    pub zero_stage: u8,
    pub bytes: StateBytes,
}

impl MemoryInputs {
    pub fn new(psi: f64, p_data: u64, p_seq: u64, zero_stage: u8) -> Result<Self> {
        if !(psi.is_finite() && psi >= 0.0) {
            return Err(Error::Config {
                key: "psi".into(),
                msg: format!("parameter count must be finite and non-negative, got {psi}"),
            });
        }
        if p_data == 0 || p_seq == 0 {
            return Err(Error::Config {
                key: if p_data == 0 { "p_data" } else { "p_seq" }.into(),
                msg: "parallel degree must be at least 1".into(),
            });
        }
        if zero_stage > 3 {
            return Err(Error::Config {
                key: "stage".into(),
                msg: format!("ZeRO stage must be 0..=3, got {zero_stage}"),
            });
        }
        Ok(Self {
            psi,
            p_data,
            p_seq,
            zero_stage,
            bytes: StateBytes::default(),
        })
    }

    /// Size of the combined data × sequence group that shares model states.
    pub fn group(&self) -> f64 {
        (self.p_data * self.p_seq) as f64
    }
}

/// Model-state bytes held by one rank.
///
/// Stage 1 partitions optimizer states, stage 2 adds gradients, stage 3 adds
/// parameters, each across the combined data and sequence parallel group.
pub fn zero_memory_per_rank(m: &MemoryInputs) -> f64 {
    let sb = m.bytes;
    let g = m.group();
    let psi = m.psi;
    match m.zero_stage {
        0 => sb.total() * psi,
        1 => (sb.params + sb.grads) * psi + sb.optimizer * psi / g,
        2 => sb.params * psi + (sb.grads + sb.optimizer) * psi / g,
        _ => sb.total() * psi / g,
    }
}

/// Activation bytes per token per hidden unit per layer kept for backward.
///
/// Two bytes corresponds to storing only each layer's 16-bit input and
/// recomputing the rest (full activation checkpointing).
pub const DEFAULT_ACTIVATION_BYTES: f64 = 2.0;

/// `c_act · n · b · h · layers / p_seq`.
pub fn activation_memory_per_rank(n: u64, b: u64, h: u64, layers: u64, p_seq: u64, c_act: f64) -> f64 {
    c_act * (n as f64) * (b as f64) * (h as f64) * (layers as f64) / p_seq as f64
}

/// One configuration of the memory model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub label: String,
    pub psi: f64,
    pub n: u64,
    pub b: u64,
    pub h: u64,
    pub layers: u64,
    pub p_data: u64,
    pub p_seq: u64,
    pub stage: u8,
    pub model_state_bytes: f64,
    pub activation_bytes: f64,
    pub total_bytes: f64,
    pub budget_bytes: f64,
    pub fits: bool,
}

/// Transformer shape feeding the activation term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationShape {
    pub n: u64,
    pub b: u64,
    pub h: u64,
    pub layers: u64,
    pub c_act: f64,
}

pub fn memory_row(label: &str, m: &MemoryInputs, act: &ActivationShape, budget_bytes: f64) -> MemoryRow {
    let model_state_bytes = zero_memory_per_rank(m);
    let activation_bytes = activation_memory_per_rank(act.n, act.b, act.h, act.layers, m.p_seq, act.c_act);
    let total_bytes = model_state_bytes + activation_bytes;
    MemoryRow {
        label: label.to_string(),
        psi: m.psi,
        n: act.n,
        b: act.b,
        h: act.h,
        layers: act.layers,
        p_data: m.p_data,
        p_seq: m.p_seq,
        stage: m.zero_stage,
        model_state_bytes,
        activation_bytes,
        total_bytes,
        budget_bytes,
        fits: total_bytes <= budget_bytes,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemoryReport {
    pub rows: Vec<MemoryRow>,
}

pub const MEMORY_COLUMNS: [&str; 14] = [
    "label",
    "psi",
    "n",
    "b",
    "h",
    "layers",
    "p_data",
    "p_seq",
    "stage",
    "model_state_bytes",
    "activation_bytes",
    "total_bytes",
    "budget_bytes",
    "fits",
];

impl MemoryReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        write_rows(&mut buf, &self.rows, &MEMORY_COLUMNS)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv<R: Read>(r: R) -> Result<Self> {
        Ok(Self { rows: read_rows(r)? })
    }
}

/// Worked example: a 7-billion-parameter model (hidden 4096, 32 layers) at
/// a one-million-token sequence, on 80 GB devices.
///
/// Three configurations: replicated states with 32-way sequence
/// parallelism, ZeRO-3 over 32 data-parallel ranks without sequence
/// parallelism, and ZeRO-3 over a 32-way sequence group. Only the last fits:
/// replication leaves 112 GB of model state on every rank, and without
/// sequence sharding the activations alone need about 275 GB.
pub fn worked_example() -> MemoryReport {
    let act = ActivationShape {
        n: 1 << 20,
        b: 1,
        h: 4096,
        layers: 32,
        c_act: DEFAULT_ACTIVATION_BYTES,
    };
    let budget = 80e9;
    let psi = 7e9;
    let configs = [
        ("replicated + sequence parallel", 1, 32, 0),
        ("zero-3 data parallel only", 32, 1, 3),
        ("zero-3 + sequence parallel", 1, 32, 3),
    ];
    MemoryReport {
        rows: configs
            .iter()
            .map(|&(label, pd, ps, stage)| {
                let m = MemoryInputs::new(psi, pd, ps, stage).expect("valid example");
                memory_row(label, &m, &act, budget)
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(n: u64, b: u64, h: u64, p: u64, conv: Convention) -> CostInputs {
        CostInputs::new(n, b, h, p, 1, conv).unwrap()
    }

    #[test]
    fn ulysses_examples() {
        assert_eq!(ulysses_volume(&inputs(1024, 1, 512, 4, Convention::Asymptotic)), 524_288.0);
        assert_eq!(ulysses_volume(&inputs(8, 1, 8, 1, Convention::Exact)), 0.0);
        // four all-to-alls of 16 local elements, 12 of which leave each rank
        assert_eq!(ulysses_volume(&inputs(8, 1, 8, 4, Convention::Exact)), 48.0);
    }

    #[test]
    fn megatron_examples() {
        for p in [1, 2, 4, 8, 64] {
            assert_eq!(megatron_volume(&inputs(1024, 1, 512, p, Convention::Asymptotic)), 2_097_152.0);
        }
        for p in 2..=256u64 {
            let c =CostInputs::new(p * 64, 1, 512, p, 1, Convention::Asymptotic).unwrap();
            assert_eq!(megatron_volume(&c) / ulysses_volume(&c), p as f64);
        }
        let c = inputs(1024, 1, 512, 16, Convention::Asymptotic);
        assert!(megatron_volume(&c) / ulysses_volume(&c) > 10.0);
    }

    #[test]
    fn ring_examples() {
        assert_eq!(ring_volume(&inputs(8, 1, 8, 1, Convention::Exact)), 0.0);
        assert_eq!(ring_volume(&inputs(8, 1, 8, 4, Convention::Exact)), 96.0);
        let a = ring_volume(&inputs(1024, 1, 512, 4, Convention::Asymptotic));
        let b = ring_volume(&inputs(1024, 1, 512, 64, Convention::Asymptotic));
        assert_eq!(a, b);
    }

    #[test]
    fn ulysses_below_ring_from_three_ranks() {
        for conv in [Convention::Exact, Convention::Asymptotic] {
            let two = inputs(1024, 1, 512, 2, conv);
            assert_eq!(ulysses_volume(&two), ring_volume(&two));
            for p in [4, 8, 16, 32] {
                let c = inputs(1024, 1, 512, p, conv);
                assert!(ulysses_volume(&c) < ring_volume(&c));
            }
        }
    }

    #[test]
    fn proportional_scaling() {
        let base = inputs(8192, 1, 4096, 8, Convention::Asymptotic);
        for k in [2, 4, 8] {
            let scaled = inputs(8192 * k, 1, 4096, 8 * k, Convention::Asymptotic);
            assert_eq!(ulysses_volume(&scaled), ulysses_volume(&base));
            assert_eq!(megatron_volume(&scaled), k as f64 * megatron_volume(&base));
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(CostInputs::new(0, 1, 1, 1, 1, Convention::Exact).is_err());
        assert!(CostInputs::new(10, 1, 1, 4, 1, Convention::Exact).is_err());
    }

    #[test]
    fn report_rows_and_round_trip() {
        let cs: Vec<_> = [1, 2, 4].iter().map(|&p| inputs(64, 2, 16, p, Convention::Exact)).collect();
        let report = CostReport::for_inputs(&cs);
        assert_eq!(report.rows.len(), 9);
        assert_eq!(report.row(Scheme::Megatron, 1).unwrap().ratio_vs_ulysses, None);
        assert_eq!(report.row(Scheme::Megatron, 4).unwrap().ratio_vs_ulysses, Some(4.0));
        let csv = report.to_csv().unwrap();
        assert!(csv.starts_with("scheme,n,b,h,p,layers,convention,per_link_elements,total_elements,ratio_vs_ulysses\n"));
        assert_eq!(CostReport::from_csv(csv.as_bytes()).unwrap().to_csv().unwrap(), csv);
        let json = report.to_json().unwrap();
        assert_eq!(CostReport::from_json(&json).unwrap().to_json().unwrap(), json);
        assert_eq!(CostReport::default().to_csv().unwrap().lines().count(), 1);
    }

    #[test]
    fn zero_stages() {
        let s0 = zero_memory_per_rank(&MemoryInputs::new(1.2e9, 1, 1, 0).unwrap());
        let s3 = zero_memory_per_rank(&MemoryInputs::new(1.2e9, 1, 1, 3).unwrap());
        assert_eq!(s0, s3);
        assert_eq!(zero_memory_per_rank(&MemoryInputs::new(1.2e9, 4, 8, 3).unwrap()), 6.0e8);
        let s1 = zero_memory_per_rank(&MemoryInputs::new(1e9, 2, 2, 1).unwrap());
        let s2 = zero_memory_per_rank(&MemoryInputs::new(1e9, 2, 2, 2).unwrap());
        assert_eq!(s1, 4e9 + 3e9);
        assert_eq!(s2, 2e9 + 3.5e9);
        let mut prev = f64::INFINITY;
        for ps in 1..=64 {
            let v = zero_memory_per_rank(&MemoryInputs::new(7e9, 2, ps, 3).unwrap());
            assert!(v <= prev);
            prev = v;
        }
        assert!(MemoryInputs::new(1.0, 1, 1, 4).is_err());
        assert!(MemoryInputs::new(1.0, 0, 1, 3).is_err());
    }

    #[test]
    fn activation_scaling() {
        let one = activation_memory_per_rank(4096, 1, 1024, 24, 1, 2.0);
        assert_eq!(activation_memory_per_rank(4096, 1, 1024, 24, 2, 2.0), one / 2.0);
        for k in [1, 2, 4, 8] {
            assert_eq!(activation_memory_per_rank(4096 * k, 1, 1024, 24, k, 2.0), one);
        }
    }

    #[test]
    fn worked_example_only_combined_partitioning_fits() {
        let r = worked_example();
        let fits: Vec<bool> = r.rows.iter().map(|row| row.fits).collect();
        assert_eq!(fits, vec![false, false, true]);
        assert_eq!(r.rows[0].model_state_bytes, 112e9);
        assert_eq!(r.rows[2].model_state_bytes, 3.5e9);
        let csv = r.to_csv().unwrap();
        assert_eq!(MemoryReport::from_csv(csv.as_bytes()).unwrap().to_csv().unwrap(), csv);
    }
}
