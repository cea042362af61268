//! Simulated process group: `p` rank programs joined by lockstep collectives.
//!
//! Every collective is a full barrier. The last rank to arrive computes all
//! outputs from the rank-ordered inputs and appends exactly one
//! [`CommRecord`] to the shared [`CommLedger`], so results and ledger contents
//! do not depend on thread scheduling. In [`Mode::Lockstep`] only one rank
//! runs at a time, in rank order; in [`Mode::Concurrent`] ranks run freely
//! between collectives.
//!
//! Metering counts the elements each rank transmits off-rank:
//!
//! | collective       | aggregate          | per-rank egress        |
//! |------------------|--------------------|------------------------|
//! | `all_to_all`     | `p · local`        | `local · (p−1)/p`      |
//! | `all_gather`     | `p · local`        | `local · (p−1)`        |
//! | `reduce_scatter` | `local` (reduced)  | `local/p · (p−1)`      |
//! | `ring_shift`     | `p · local`        | `local · steps`        |
//!
//! With `p = 1` every egress is zero.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::sync::{Condvar, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{concat_axis, split_axis, DenseArray};

/// How rank programs are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One rank at a time, in rank order, handing over at each collective.
    #[default]
    Lockstep,
    /// All ranks on their own threads.
    Concurrent,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Mode::Lockstep => "lockstep",
            Mode::Concurrent => "concurrent",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "lockstep" | "lockstep-sequential" => Ok(Mode::Lockstep),
            "concurrent" => Ok(Mode::Concurrent),
            other => Err(format!("unknown mode `{other}` (expected lockstep|concurrent)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collective {
    AllToAll,
    AllGather,
    ReduceScatter,
    RingShift,
}

impl Collective {
    pub fn name(self) -> &'static str {
        match self {
            Collective::AllToAll => "all_to_all",
            Collective::AllGather => "all_gather",
            Collective::ReduceScatter => "reduce_scatter",
            Collective::RingShift => "ring_shift",
        }
    }
}

impl fmt::Display for Collective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

/// One metered collective call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub step_label: String,
    pub collective: Collective,
    pub aggregate_elements: u64,
    pub per_rank_egress_elements: u64,
}

/// Volume totals over a set of records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Totals {
    pub records: usize,
    pub aggregate_elements: u64,
    pub per_rank_egress_elements: u64,
}

impl Totals {
    fn add(&mut self, r: &CommRecord) {
        self.records += 1;
        self.aggregate_elements += r.aggregate_elements;
        self.per_rank_egress_elements += r.per_rank_egress_elements;
    }
}

/// Append-only log of every collective issued by a group, in issue order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    ranks: usize,
    records: Vec<CommRecord>,
}

impl CommLedger {
    pub fn new(ranks: usize) -> Self {
        Self {
            ranks,
            records: Vec::new(),
        }
    }

    pub fn from_records(ranks: usize, records: Vec<CommRecord>) -> Self {
        Self { ranks, records }
    }

    pub fn ranks(&self) -> usize {
        self.ranks
    }

    pub fn records(&self) -> &[CommRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub(crate) fn push(&mut self, r: CommRecord) {
        self.records.push(r);
    }

    /// Appends another ledger's records after this one's.
    pub fn extend(&mut self, other: &CommLedger) {
        self.records.extend_from_slice(&other.records);
    }

    pub fn count(&self, kind: Collective) -> usize {
        self.records.iter().filter(|r| r.collective == kind).count()
    }

    pub fn totals(&self) -> Totals {
        let mut t = Totals::default();
        self.records.iter().for_each(|r| t.add(r));
        t
    }

    pub fn per_rank_egress(&self) -> u64 {
        self.totals().per_rank_egress_elements
    }

    /// Egress summed over every rank of the group.
    pub fn group_egress(&self) -> u64 {
        self.per_rank_egress() * self.ranks as u64
    }

    pub fn totals_by_collective(&self) -> BTreeMap<Collective, Totals> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            out.entry(r.collective).or_insert_with(Totals::default).add(r);
        }
        out
    }

    pub fn totals_by_label(&self) -> BTreeMap<String, Totals> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            out.entry(r.step_label.clone())
                .or_insert_with(Totals::default)
                .add(r);
        }
        out
    }

    /// Records whose label starts with `prefix`.
    pub fn with_label_prefix(&self, prefix: &str) -> CommLedger {
        CommLedger {
            ranks: self.ranks,
            records: self
                .records
                .iter()
                .filter(|r| r.step_label.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.records)?)
    }

    pub fn records_from_json(s: &str) -> Result<Vec<CommRecord>> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.records {
            wtr.serialize(r)?;
        }
        if self.records.is_empty() {
            wtr.write_record(["step_label", "collective", "aggregate_elements", "per_rank_egress_elements"])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn records_from_csv<R: Read>(r: R) -> Result<Vec<CommRecord>> {
        let mut rdr = csv::Reader::from_reader(r);
        rdr.deserialize().map(|row| row.map_err(Error::from)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Call {
    kind: Collective,
    label: String,
    shape: Vec<usize>,
    params: [usize; 2],
    data: Vec<f64>,
}

impl Call {
    fn describe(&self) -> String {
        format!("{} `{}`", self.kind, self.label)
    }
}

type Output = (Vec<usize>, Vec<f64>);

struct State {
    pending: Vec<Option<Call>>,
    arrived: usize,
    results: Vec<Option<Output>>,
    exited: Vec<bool>,
    failed: Option<Error>,
    turn: usize,
    ledger: CommLedger,
}

struct Shared {
    p: usize,
    mode: Mode,
    state: Mutex<State>,
    cv: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        // A panicking rank leaves consistent state behind: every mutation is
        // completed before the guard drops.
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn wait<'a>(&'a self, g: MutexGuard<'a, State>) -> MutexGuard<'a, State> {
        self.cv.wait(g).unwrap_or_else(|e| e.into_inner())
    }

    /// Next rank (cyclically after `from`) that can make progress.
    fn next_turn(&self, st: &State, from: usize) -> usize {
        (1..=self.p)
            .map(|k| (from + k) % self.p)
            .find(|&j| !st.exited[j] && st.pending[j].is_none())
            .unwrap_or(from)
    }

    fn my_turn(&self, st: &State, rank: usize) -> bool {
        self.mode == Mode::Concurrent || st.turn == rank
    }

    fn exchange(&self, rank: usize, call: Call) -> Result<Output> {
        let mut st = self.lock();
        while st.failed.is_none() && !self.my_turn(&st, rank) {
            st = self.wait(st);
        }
        if let Some(e) = &st.failed {
            return Err(e.clone());
        }
        if let Some(j) = st.exited.iter().position(|&x| x) {
            let err = Error::Desync {
                rank: j,
                collective: call.describe(),
                detail: format!("rank {j} exited before entering the collective"),
            };
            st.failed = Some(err.clone());
            self.cv.notify_all();
            return Err(err);
        }
        st.pending[rank] = Some(call);
        st.arrived += 1;
        if st.arrived == self.p {
            let calls: Vec<Call> = st.pending.iter_mut().map(|c| c.take().expect("all arrived")).collect();
            st.arrived = 0;
            match complete(self.p, &calls) {
                Ok((outputs, record)) => {
                    st.ledger.push(record);
                    for (slot, out) in st.results.iter_mut().zip(outputs) {
                        *slot = Some(out);
                    }
                    st.turn = self.next_turn(&st, self.p - 1);
                }
                Err(e) => st.failed = Some(e),
            }
        } else if self.mode == Mode::Lockstep {
            st.turn = self.next_turn(&st, rank);
        }
        self.cv.notify_all();
        loop {
            if let Some(e) = &st.failed {
                return Err(e.clone());
            }
            if st.results[rank].is_some() && self.my_turn(&st, rank) {
                return Ok(st.results[rank].take().expect("checked"));
            }
            st = self.wait(st);
        }
    }

    fn enter(&self, rank: usize) {
        let mut st = self.lock();
        while st.failed.is_none() && !self.my_turn(&st, rank) {
            st = self.wait(st);
        }
    }

    fn exit(&self, rank: usize) {
        let mut st = self.lock();
        st.exited[rank] = true;
        if st.arrived > 0 && st.failed.is_none() {
            let waiting = st.pending.iter().flatten().next().map(Call::describe).unwrap_or_default();
            st.failed = Some(Error::Desync {
                rank,
                collective: waiting,
                detail: format!("rank {rank} exited while other ranks waited in the collective"),
            });
        }
        if st.turn == rank {
            st.turn = self.next_turn(&st, rank);
        }
        self.cv.notify_all();
    }
}

/// Marks a rank as exited even if its program panics.
struct ExitGuard<'a> {
    shared: &'a Shared,
    rank: usize,
}

impl Drop for ExitGuard<'_> {
    fn drop(&mut self) {
        self.shared.exit(self.rank);
    }
}

/// Validates the rank-ordered calls and computes every rank's output.
fn complete(p: usize, calls: &[Call]) -> Result<(Vec<Output>, CommRecord)> {
    let first = &calls[0];
    for (j, c) in calls.iter().enumerate().skip(1) {
        if c.kind != first.kind || c.label != first.label || c.shape != first.shape || c.params != first.params {
            return Err(Error::Desync {
                rank: j,
                collective: first.describe(),
                detail: format!(
                    "rank {j} called {} with shape {:?} params {:?}; rank 0 used shape {:?} params {:?}",
                    c.describe(),
                    c.shape,
                    c.params,
                    first.shape,
                    first.params
                ),
            });
        }
    }
    let shape = &first.shape;
    let local = first.data.len();
    let off_rank = p > 1;
    let (outputs, aggregate, egress) = match first.kind {
        Collective::AllToAll => {
            let [split, concat] = first.params;
            let chunks: Vec<Vec<Vec<f64>>> = calls.iter().map(|c| split_axis(shape, &c.data, split, p)).collect();
            let mut chunk_shape = shape.clone();
            chunk_shape[split] /= p;
            let mut out_shape = chunk_shape.clone();
            out_shape[concat] *= p;
            let outputs = (0..p)
                .map(|i| {
                    let parts: Vec<&[f64]> = chunks.iter().map(|c| c[i].as_slice()).collect();
                    (out_shape.clone(), concat_axis(&chunk_shape, &parts, concat))
                })
                .collect();
            (outputs, p * local, local / p * (p - 1))
        }
        Collective::AllGather => {
            let axis = first.params[0];
            let parts: Vec<&[f64]> = calls.iter().map(|c| c.data.as_slice()).collect();
            let mut out_shape = shape.clone();
            out_shape[axis] *= p;
            let gathered = concat_axis(shape, &parts, axis);
            ((0..p).map(|_| (out_shape.clone(), gathered.clone())).collect(), p * local, local * (p - 1))
        }
        Collective::ReduceScatter => {
            let axis = first.params[0];
            let mut sum = first.data.clone();
            for c in &calls[1..] {
                for (a, b) in sum.iter_mut().zip(&c.data) {
                    *a += b;
                }
            }
            let mut out_shape = shape.clone();
            out_shape[axis] /= p;
            let outputs = split_axis(shape, &sum, axis, p)
                .into_iter()
                .map(|chunk| (out_shape.clone(), chunk))
                .collect();
            (outputs, local, local / p * (p - 1))
        }
        Collective::RingShift => {
            let steps = first.params[0];
            let outputs = (0..p)
                .map(|i| {
                    let src = (i + p - steps % p) % p;
                    (shape.clone(), calls[src].data.clone())
                })
                .collect();
            (outputs, p * local, local * steps)
        }
    };
    let record = CommRecord {
        step_label: first.label.clone(),
        collective: first.kind,
        aggregate_elements: aggregate as u64,
        per_rank_egress_elements: if off_rank { egress as u64 } else { 0 },
    };
    Ok((outputs, record))
}

/// A rank's handle onto its group. Passed to every rank program.
pub struct Comm<'g> {
    rank: usize,
    shared: &'g Shared,
}

impl Comm<'_> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.shared.p
    }

    fn check_axis(&self, what: &'static str, shape: &[usize], axis: usize) -> Result<()> {
        if axis >= shape.len() {
            return Err(Error::InvalidTensor(format!("{what}: axis {axis} out of range for {shape:?}")));
        }
        Ok(())
    }

    fn run<A: DenseArray>(&self, kind: Collective, label: &str, local: &A, params: [usize; 2]) -> Result<A> {
        let call = Call {
            kind,
            label: label.to_string(),
            shape: local.shape().to_vec(),
            params,
            data: local.as_slice().to_vec(),
        };
        let (shape, data) = self.shared.exchange(self.rank, call)?;
        A::from_shape_vec(&shape, data)
    }

    /// Rank `i` receives the `i`-th split (along `split_axis`) of every rank's
    /// input, concatenated along `concat_axis` in rank order.
    pub fn all_to_all<A: DenseArray>(&self, label: &str, local: &A, split_axis: usize, concat_axis: usize) -> Result<A> {
        let shape = local.shape();
        self.check_axis("all_to_all split", shape, split_axis)?;
        self.check_axis("all_to_all concat", shape, concat_axis)?;
        if !shape[split_axis].is_multiple_of(self.size()) {
            return Err(Error::Divisibility {
                what: "all_to_all split axis",
                len: shape[split_axis],
                by: self.size(),
            });
        }
        self.run(Collective::AllToAll, label, local, [split_axis, concat_axis])
    }

    /// Every rank receives the rank-order concatenation along `axis`.
    pub fn all_gather<A: DenseArray>(&self, label: &str, local: &A, axis: usize) -> Result<A> {
        self.check_axis("all_gather", local.shape(), axis)?;
        self.run(Collective::AllGather, label, local, [axis, 0])
    }

    /// Element-wise sum over ranks (in rank order), then rank `i` keeps the
    /// `i`-th split along `axis`.
    pub fn reduce_scatter<A: DenseArray>(&self, label: &str, local: &A, axis: usize) -> Result<A> {
        let shape = local.shape();
        self.check_axis("reduce_scatter", shape, axis)?;
        if !shape[axis].is_multiple_of(self.size()) {
            return Err(Error::Divisibility {
                what: "reduce_scatter axis",
                len: shape[axis],
                by: self.size(),
            });
        }
        self.run(Collective::ReduceScatter, label, local, [axis, 0])
    }

    /// Rank `i` receives the tensor held by rank `(i − steps) mod p`.
    pub fn ring_shift<A: DenseArray>(&self, label: &str, local: &A, steps: usize) -> Result<A> {
        self.run(Collective::RingShift, label, local, [steps, 0])
    }

    /// Synchronizes all ranks. Metered as a one-element all-gather.
    pub fn barrier(&self, label: &str) -> Result<()> {
        let call = Call {
            kind: Collective::AllGather,
            label: label.to_string(),
            shape: vec![1],
            params: [0, 0],
            data: vec![0.0],
        };
        self.shared.exchange(self.rank, call).map(|_| ())
    }
}

/// A simulated group of `p` ranks.
#[derive(Debug, Clone, Copy)]
pub struct RankGroup {
    p: usize,
    mode: Mode,
}

impl RankGroup {
    pub fn new(p: usize, mode: Mode) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidTensor("a group needs at least one rank".into()));
        }
        Ok(Self { p, mode })
    }

    pub fn size(&self) -> usize {
        self.p
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Runs `program` once per rank and returns the rank-ordered results with
    /// the group's ledger.
    ///
    /// If any rank fails, the error returned is the lowest-ranked failure
    /// that is not a knock-on desync, falling back to the first desync.
    pub fn run<T, F>(&self, program: F) -> Result<(Vec<T>, CommLedger)>
    where
        T: Send,
        F: Fn(&Comm<'_>) -> Result<T> + Sync,
    {
        let p = self.p;
        let shared = Shared {
            p,
            mode: self.mode,
            state: Mutex::new(State {
                pending: vec![None; p],
                arrived: 0,
                results: vec![None; p],
                exited: vec![false; p],
                failed: None,
                turn: 0,
                ledger: CommLedger::new(p),
            }),
            cv: Condvar::new(),
        };
        let results: Vec<Result<T>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..p)
                .map(|rank| {
                    let shared = &shared;
                    let program = &program;
                    scope.spawn(move || {
                        let _guard = ExitGuard { shared, rank };
                        shared.enter(rank);
                        let comm = Comm { rank, shared };
                        program(&comm)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                .collect()
        });
        let failure = results
            .iter()
            .filter_map(|r| r.as_ref().err())
            .find(|e| !matches!(e, Error::Desync { .. }))
            .or_else(|| results.iter().find_map(|r| r.as_ref().err()))
            .cloned();
        if let Some(e) = failure {
            return Err(e);
        }
        let ledger = shared.state.into_inner().unwrap_or_else(|e| e.into_inner()).ledger;
        Ok((results.into_iter().map(|r| r.expect("checked")).collect(), ledger))
    }
}

/// Convenience wrapper around [`RankGroup::run`].
pub fn run_group<T, F>(p: usize, mode: Mode, program: F) -> Result<(Vec<T>, CommLedger)>
where
    T: Send,
    F: Fn(&Comm<'_>) -> Result<T> + Sync,
{
    RankGroup::new(p, mode)?.run(program)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor3;
    use proptest::prelude::*;

    const MODES: [Mode; 2] = [Mode::Lockstep, Mode::Concurrent];

    /// Tensor whose every element encodes `(rank, flat index)`.
    fn tagged(rank: usize, dims: (usize, usize, usize)) -> Tensor3 {
        let n = dims.0 * dims.1 * dims.2;
        Tensor3::new(dims, (0..n).map(|i| (rank * 100_000 + i) as f64).collect()).unwrap()
    }

    fn origin(v: f64) -> usize {
        v as usize / 100_000
    }

    #[test]
    fn single_rank_returns_rank_id() {
        for mode in MODES {
            let (res, ledger) = run_group(1, mode, |c| Ok(c.rank())).unwrap();
            assert_eq!(res, vec![0]);
            assert_eq!(ledger.per_rank_egress(), 0);
        }
    }

    #[test]
    fn barrier_only_program() {
        for mode in MODES {
            let (res, ledger) = run_group(4, mode, |c| c.barrier("sync").map(|_| c.rank())).unwrap();
            assert_eq!(res, vec![0, 1, 2, 3]);
            assert_eq!(ledger.len(), 1);
        }
    }

    #[test]
    fn all_to_all_identity_on_one_rank() {
        let x = tagged(0, (4, 2, 3));
        let (res, ledger) = run_group(1, Mode::Lockstep, |c| c.all_to_all("a2a", &x, 0, 0)).unwrap();
        assert_eq!(res[0], x);
        assert_eq!(ledger.records()[0].per_rank_egress_elements, 0);
    }

    #[test]
    fn all_to_all_two_ranks_transposes_blocks() {
        // rank i holds [a_i, b_i] along the sequence axis
        let (res, _) = run_group(2, Mode::Concurrent, |c| {
            let r = c.rank() as f64;
            let x = Tensor3::new((2, 1, 1), vec![10.0 + r, 20.0 + r]).unwrap();
            c.all_to_all("a2a", &x, 0, 0)
        })
        .unwrap();
        assert_eq!(res[0].data(), &[10.0, 11.0]);
        assert_eq!(res[1].data(), &[20.0, 21.0]);
    }

    #[test]
    fn all_to_all_egress_p4() {
        let (res, ledger) = run_group(4, Mode::Lockstep, |c| {
            let x = tagged(c.rank(), (8, 2, 8));
            let y = c.all_to_all("a2a", &x, 2, 0)?;
            // brute-force count of received elements that crossed a rank boundary
            Ok(y.data().iter().filter(|&&v| origin(v) != c.rank()).count())
        })
        .unwrap();
        assert!(res.iter().all(|&n| n == 96));
        let rec = &ledger.records()[0];
        assert_eq!(rec.per_rank_egress_elements, 96);
        assert_eq!(rec.aggregate_elements, 512);
    }

    #[test]
    fn all_gather_small_cases() {
        let (res, ledger) = run_group(1, Mode::Lockstep, |c| c.all_gather("ag", &tagged(0, (2, 1, 1)), 0)).unwrap();
        assert_eq!(res[0], tagged(0, (2, 1, 1)));
        assert_eq!(ledger.per_rank_egress(), 0);

        let (res, ledger) = run_group(2, Mode::Concurrent, |c| c.all_gather("ag", &tagged(c.rank(), (4, 1, 1)), 0)).unwrap();
        for y in &res {
            assert_eq!(y.seq(), 8);
            assert_eq!(y.data()[..4], *tagged(0, (4, 1, 1)).data());
            assert_eq!(y.data()[4..], *tagged(1, (4, 1, 1)).data());
        }
        let rec = &ledger.records()[0];
        assert_eq!(rec.aggregate_elements, 8);
        // local·(p−1) equals aggregate·(p−1)/p for an all-gather
        assert_eq!(rec.per_rank_egress_elements, 4);
        assert_eq!(rec.aggregate_elements / 2, 4);
    }

    #[test]
    fn reduce_scatter_cancellation() {
        let (res, ledger) = run_group(2, Mode::Lockstep, |c| {
            let x = Tensor3::from_fn(4, 1, 3, |s, _, d| (s * 3 + d) as f64 + 0.25);
            let x = if c.rank() == 1 { x.map(|v| -v) } else { x };
            c.reduce_scatter("rs", &x, 0)
        })
        .unwrap();
        assert!(res.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(ledger.records()[0].per_rank_egress_elements, 6);
    }

    #[test]
    fn reduce_scatter_matches_sum_then_split() {
        let input = |r: usize| Tensor3::from_fn(8, 2, 3, |s, b, d| ((r + 1) * (s * 7 + b * 3 + d)) as f64 * 0.37 - 1.1);
        let (res, _) = run_group(4, Mode::Concurrent, |c| c.reduce_scatter("rs", &input(c.rank()), 0)).unwrap();
        let mut sum = input(0);
        for r in 1..4 {
            sum = sum.add(&input(r)).unwrap();
        }
        for (i, shard) in res.iter().enumerate() {
            assert_eq!(shard, &sum.seq_slice(i * 2..(i + 1) * 2));
        }
    }

    #[test]
    fn ring_shift_cases() {
        let (res, ledger) = run_group(3, Mode::Lockstep, |c| c.ring_shift("r", &tagged(c.rank(), (2, 1, 2)), 0)).unwrap();
        assert_eq!(res[2], tagged(2, (2, 1, 2)));
        assert_eq!(ledger.per_rank_egress(), 0);

        let (res, _) = run_group(3, Mode::Lockstep, |c| c.ring_shift("r", &tagged(c.rank(), (2, 1, 2)), 3)).unwrap();
        assert_eq!(res[1], tagged(1, (2, 1, 2)));

        let (res, ledger) = run_group(4, Mode::Concurrent, |c| {
            let mut x = tagged(c.rank(), (4, 2, 8));
            for _ in 0..3 {
                x = c.ring_shift("r", &x, 1)?;
            }
            Ok(x)
        })
        .unwrap();
        assert_eq!(origin(res[0].data()[0]), 1);
        assert_eq!(ledger.len(), 3);
        assert_eq!(ledger.per_rank_egress(), 192);
    }

    #[test]
    fn inconsistent_shape_is_desync() {
        for mode in MODES {
            let err = run_group(3, mode, |c| {
                let x = Tensor3::zeros(2 + c.rank() / 2, 1, 1);
                c.all_gather("ag", &x, 0)
            })
            .unwrap_err();
            match err {
                Error::Desync { rank, collective, .. } => {
                    assert_eq!(rank, 2);
                    assert!(collective.contains("all_gather"));
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn early_exit_is_desync() {
        for mode in MODES {
            let err = run_group(4, mode, |c| {
                if c.rank() == 3 {
                    return Ok(());
                }
                c.barrier("never completes")
            })
            .unwrap_err();
            assert!(matches!(err, Error::Desync { rank: 3, .. }), "{err:?}");
        }
    }

    #[test]
    fn rank_error_is_reported_over_desync() {
        let err = run_group(3, Mode::Concurrent, |c| {
            if c.rank() == 1 {
                return Err(Error::Kernel("boom".into()));
            }
            c.barrier("b")
        })
        .unwrap_err();
        assert_eq!(err, Error::Kernel("boom".into()));
    }

    #[test]
    fn divisibility_failure() {
        let err = run_group(3, Mode::Lockstep, |c| c.all_to_all("a2a", &Tensor3::zeros(4, 1, 1), 0, 0)).unwrap_err();
        assert!(matches!(err, Error::Divisibility { .. }));
    }

    #[test]
    fn ledger_csv_and_json_round_trip() {
        let (_, ledger) = run_group(4, Mode::Lockstep, |c| {
            let x = tagged(c.rank(), (4, 1, 4));
            let y = c.all_to_all("L0/a2a", &x, 2, 0)?;
            let z = c.all_gather("L0/ag", &y, 1)?;
            c.ring_shift("L1/ring", &z, 1)
        })
        .unwrap();
        let csv = ledger.to_csv().unwrap();
        assert!(csv.starts_with("step_label,collective,aggregate_elements,per_rank_egress_elements\n"));
        let back = CommLedger::from_records(4, CommLedger::records_from_csv(csv.as_bytes()).unwrap());
        assert_eq!(back.to_csv().unwrap(), csv);
        let json = ledger.to_json().unwrap();
        let back = CommLedger::from_records(4, CommLedger::records_from_json(&json).unwrap());
        assert_eq!(back.to_json().unwrap(), json);
        assert_eq!(back, ledger);
        let by_label = ledger.totals_by_label();
        assert_eq!(by_label["L0/a2a"].records, 1);
        assert_eq!(ledger.totals_by_collective().len(), 3);
    }

    fn program(c: &Comm<'_>, seed: u64) -> Result<Tensor3> {
        let x = Tensor3::from_fn(8, 2, 8, |s, b, d| {
            ((seed as usize + c.rank() * 31 + s * 7 + b * 5 + d) % 17) as f64 * 0.1
        });
        let y = c.all_to_all("a", &x, 2, 0)?;
        let y = c.all_to_all("b", &y, 0, 2)?;
        let z = c.reduce_scatter("rs", &y, 0)?;
        let g = c.all_gather("ag", &z, 0)?;
        c.ring_shift("ring", &g, c.size() - 1)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn modes_agree_bitwise(pexp in 0u32..=3, seed in any::<u64>()) {
            let p = 1usize << pexp;
            let a = run_group(p, Mode::Lockstep, |c| program(c, seed)).unwrap();
            let b = run_group(p, Mode::Concurrent, |c| program(c, seed)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn all_to_all_self_inverse_and_conserving(pexp in 0u32..=3, split in 0usize..3, concat in 0usize..3) {
            let p = 1usize << pexp;
            let (res, _) = run_group(p, Mode::Concurrent, |c| {
                let x = tagged(c.rank(), (8, 8, 8));
                let y = c.all_to_all("fwd", &x, split, concat)?;
                let back = c.all_to_all("bwd", &y, concat, split)?;
                Ok((x, y, back))
            }).unwrap();
            let mut before: Vec<u64> = Vec::new();
            let mut after: Vec<u64> = Vec::new();
            for (x, y, back) in &res {
                prop_assert_eq!(back, x);
                before.extend(x.data().iter().map(|v| v.to_bits()));
                after.extend(y.data().iter().map(|v| v.to_bits()));
            }
            before.sort_unstable();
            after.sort_unstable();
            prop_assert_eq!(before, after);
        }

        #[test]
        fn metering_matches_element_crossing_counter(p in 1usize..=8, steps in 0usize..10) {
            let dims = (p * 2, 3, p);
            let local = dims.0 * dims.1 * dims.2;
            let (counts, ledger) = run_group(p, Mode::Concurrent, |c| {
                let x = tagged(c.rank(), dims);
                let a = c.all_to_all("a2a", &x, 0, 2)?;
                let g = c.all_gather("ag", &x, 1)?;
                let _ = c.reduce_scatter("rs", &x, 2)?;
                let foreign = |t: &Tensor3| t.data().iter().filter(|&&v| origin(v) != c.rank()).count() as u64;
                Ok((foreign(&a), foreign(&g)))
            }).unwrap();
            let recs = ledger.records();
            for (a2a_in, ag_in) in &counts {
                prop_assert_eq!(recs[0].per_rank_egress_elements, *a2a_in);
                prop_assert_eq!(recs[1].per_rank_egress_elements, *ag_in);
            }
            // reduce-scatter: every element of a rank's input whose destination
            // shard belongs to another rank leaves that rank
            let chunk = dims.2 / p;
            let rs_out = (0..local).filter(|&i| (i % dims.2) / chunk != 0).count() as u64;
            prop_assert_eq!(recs[2].per_rank_egress_elements, rs_out);

            // ring: one transmission of the whole local tensor per unit step
            let (_, ring) = run_group(p, Mode::Lockstep, |c| c.ring_shift("r", &tagged(c.rank(), dims), steps)).unwrap();
            let mut sent = 0u64;
            if p > 1 {
                for _ in 0..steps {
                    sent += local as u64;
                }
            }
            prop_assert_eq!(ring.per_rank_egress(), sent);
        }
    }
}
