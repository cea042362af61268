//! Sequence-parallel attention with two all-to-all layout switches.
//!
//! Each rank holds `n/P` tokens of every sequence. Before attention, one
//! all-to-all per projection (q, k, v) trades the sequence split for a head
//! split: afterwards a rank holds the whole sequence for `heads/P` heads and
//! can run any attention kernel unchanged. A fourth all-to-all returns the
//! context to the sequence split. Layernorm, residuals and the MLP are
//! token-local and need no communication.
//!
//! Per layer the ledger therefore holds exactly four `all_to_all` records,
//! each with an aggregate of `n·b·d` elements.

use crate::error::{Error, Result};
use crate::kernel::{attend_heads, scaled_scores, AttentionKernel};
use crate::model::{block_with, mlp, AttentionGrads, AttentionSpec, LayerWeights};
use crate::simgroup::Comm;
use crate::tensor::{matmul, merge_heads, row_softmax, split_heads, Mask, Matrix, Tensor3, Tensor4};

/// Which axis a rank-local tensor is partitioned along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `[n/P, b, d]`: a contiguous block of tokens, all heads.
    SequenceSharded,
    /// `[n, b, heads/P, head_dim]`: every token, a contiguous block of heads.
    HeadSharded,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShardData {
    Sequence(Tensor3),
    Head(Tensor4),
}

/// A rank's partition of a distributed activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedTensor {
    pub rank: usize,
    pub data: ShardData,
}

impl ShardedTensor {
    pub fn sequence(rank: usize, t: Tensor3) -> Self {
        Self {
            rank,
            data: ShardData::Sequence(t),
        }
    }

    pub fn head(rank: usize, t: Tensor4) -> Self {
        Self {
            rank,
            data: ShardData::Head(t),
        }
    }

    pub fn layout(&self) -> Layout {
        match self.data {
            ShardData::Sequence(_) => Layout::SequenceSharded,
            ShardData::Head(_) => Layout::HeadSharded,
        }
    }

    pub fn as_sequence(&self) -> Result<&Tensor3> {
        match &self.data {
            ShardData::Sequence(t) => Ok(t),
            ShardData::Head(_) => Err(Error::InvalidTensor(format!(
                "rank {} shard is head-sharded, expected sequence-sharded",
                self.rank
            ))),
        }
    }

    pub fn as_head(&self) -> Result<&Tensor4> {
        match &self.data {
            ShardData::Head(t) => Ok(t),
            ShardData::Sequence(_) => Err(Error::InvalidTensor(format!(
                "rank {} shard is sequence-sharded, expected head-sharded",
                self.rank
            ))),
        }
    }

    pub fn into_sequence(self) -> Result<Tensor3> {
        match self.data {
            ShardData::Sequence(t) => Ok(t),
            ShardData::Head(_) => Err(Error::InvalidTensor(format!(
                "rank {} shard is head-sharded, expected sequence-sharded",
                self.rank
            ))),
        }
    }
}

/// Splits `x` into `p` contiguous token blocks; shard `i` holds tokens
/// `[i·n/p, (i+1)·n/p)`.
pub fn shard_sequence(x: &Tensor3, p: usize) -> Result<Vec<ShardedTensor>> {
    crate::tensor::check_divides("sequence length by ranks", x.seq(), p)?;
    let len = x.seq() / p;
    Ok((0..p)
        .map(|i| ShardedTensor::sequence(i, x.seq_slice(i * len..(i + 1) * len)))
        .collect())
}

/// Reassembles sequence shards in rank order. Shards may be passed in any
/// order but every rank `0..p` must appear exactly once.
pub fn unshard_sequence(shards: &[ShardedTensor]) -> Result<Tensor3> {
    let p = shards.len();
    if p == 0 {
        return Err(Error::Reconstruction("no shards".into()));
    }
    let mut slots: Vec<Option<&Tensor3>> = vec![None; p];
    for s in shards {
        let t = s
            .as_sequence()
            .map_err(|e| Error::Reconstruction(e.to_string()))?;
        match slots.get_mut(s.rank) {
            None => return Err(Error::Reconstruction(format!("rank {} out of range for {p} shards", s.rank))),
            Some(Some(_)) => return Err(Error::Reconstruction(format!("duplicate rank {}", s.rank))),
            Some(slot) => *slot = Some(t),
        }
    }
    let ordered: Vec<Tensor3> = slots
        .into_iter()
        .enumerate()
        .map(|(r, s)| s.cloned().ok_or_else(|| Error::Reconstruction(format!("missing rank {r}"))))
        .collect::<Result<_>>()?;
    let first = ordered[0].dims();
    if ordered.iter().any(|t| t.dims() != first) {
        return Err(Error::Reconstruction("shards have inconsistent shapes".into()));
    }
    Tensor3::concat_seq(&ordered)
}

fn check_local(local: &Tensor3, spec: &AttentionSpec, p: usize) -> Result<()> {
    spec.check_ranks(p)?;
    let want = (spec.local_seq(p), spec.b, spec.d);
    if local.dims() != want {
        let (s, b, d) = local.dims();
        return Err(Error::Shape {
            op: "sequence shard",
            left: vec![want.0, want.1, want.2],
            right: vec![s, b, d],
        });
    }
    Ok(())
}

/// Sequence split → head split on a raw `[n/P, b, d]` tensor.
pub(crate) fn seq_to_head_raw(local: &Tensor3, spec: &AttentionSpec, comm: &Comm<'_>, label: &str) -> Result<Tensor4> {
    check_local(local, spec, comm.size())?;
    let heads = split_heads(local, spec.heads)?;
    // split the head axis into P groups, stack the received token blocks
    comm.all_to_all(label, &heads, 2, 0)
}

/// Head split → sequence split, returning `[n/P, b, d]`.
pub(crate) fn head_to_seq_raw(local: &Tensor4, spec: &AttentionSpec, comm: &Comm<'_>, label: &str) -> Result<Tensor3> {
    let p = comm.size();
    spec.check_ranks(p)?;
    let want = (spec.n, spec.b, spec.heads / p, spec.head_dim());
    if local.dims() != want {
        let (s, b, h, k) = local.dims();
        return Err(Error::Shape {
            op: "head shard",
            left: vec![want.0, want.1, want.2, want.3],
            right: vec![s, b, h, k],
        });
    }
    let back = comm.all_to_all(label, local, 0, 2)?;
    Ok(merge_heads(&back))
}

/// One all-to-all turning a `[n/P, b, d]` shard into `[n, b, heads/P, head_dim]`
/// holding heads `[rank·heads/P, (rank+1)·heads/P)`.
pub fn seq_to_head(local: &ShardedTensor, spec: &AttentionSpec, comm: &Comm<'_>, label: &str) -> Result<ShardedTensor> {
    let t = seq_to_head_raw(local.as_sequence()?, spec, comm, label)?;
    Ok(ShardedTensor::head(local.rank, t))
}

/// Exact inverse of [`seq_to_head`].
pub fn head_to_seq(local: &ShardedTensor, spec: &AttentionSpec, comm: &Comm<'_>, label: &str) -> Result<ShardedTensor> {
    let t = head_to_seq_raw(local.as_head()?, spec, comm, label)?;
    Ok(ShardedTensor::sequence(local.rank, t))
}

/// Forward activations kept for [`ulysses_attention_backward`].
#[derive(Debug, Clone)]
pub struct UlyssesSaved {
    pub rank: usize,
    pub x: Tensor3,
    pub q: Tensor4,
    pub k: Tensor4,
    pub v: Tensor4,
    /// Context back in the sequence split, before the output projection.
    pub ctx: Tensor3,
    pub mask: Mask,
}

fn attention_core(x: &Tensor3, w: &LayerWeights, spec: &AttentionSpec, kernel: &dyn AttentionKernel, comm: &Comm<'_>, label: &str) -> Result<(Tensor3, UlyssesSaved)> {
    kernel.check_mask(&spec.mask)?;
    w.check(spec.d)?;
    let q = seq_to_head_raw(&x.project(&w.wq)?, spec, comm, &format!("{label}/q-a2a"))?;
    let k = seq_to_head_raw(&x.project(&w.wk)?, spec, comm, &format!("{label}/k-a2a"))?;
    let v = seq_to_head_raw(&x.project(&w.wv)?, spec, comm, &format!("{label}/v-a2a"))?;
    let ctx_heads = attend_heads(&q, &k, &v, kernel, &spec.mask, spec.scale())?;
    let ctx = head_to_seq_raw(&ctx_heads, spec, comm, &format!("{label}/ctx-a2a"))?;
    let out = ctx.project(&w.wo)?;
    let saved = UlyssesSaved {
        rank: comm.rank(),
        x: x.clone(),
        q,
        k,
        v,
        ctx,
        mask: spec.mask.clone(),
    };
    Ok((out, saved))
}

/// Sequence-parallel multi-head attention, also returning the state needed
/// by the backward pass.
pub fn ulysses_attention_forward_saved(
    local_x: &ShardedTensor,
    w: &LayerWeights,
    spec: &AttentionSpec,
    kernel: &dyn AttentionKernel,
    comm: &Comm<'_>,
    label: &str,
) -> Result<(ShardedTensor, UlyssesSaved)> {
    let (out, saved) = attention_core(local_x.as_sequence()?, w, spec, kernel, comm, label)?;
    Ok((ShardedTensor::sequence(comm.rank(), out), saved))
}

/// Sequence-parallel multi-head attention on this rank's token block.
pub fn ulysses_attention_forward(
    local_x: &ShardedTensor,
    w: &LayerWeights,
    spec: &AttentionSpec,
    kernel: &dyn AttentionKernel,
    comm: &Comm<'_>,
    label: &str,
) -> Result<ShardedTensor> {
    ulysses_attention_forward_saved(local_x, w, spec, kernel, comm, label).map(|(o, _)| o)
}

/// Pre-layernorm transformer block; only the attention communicates.
pub fn ulysses_block_forward(
    local_x: &ShardedTensor,
    w: &LayerWeights,
    spec: &AttentionSpec,
    kernel: &dyn AttentionKernel,
    comm: &Comm<'_>,
    label: &str,
) -> Result<ShardedTensor> {
    let x = local_x.as_sequence()?;
    check_local(x, spec, comm.size())?;
    let out = block_with(
        x,
        w,
        |h| attention_core(h, w, spec, kernel, comm, &format!("{label}/attn")).map(|(o, _)| o),
        |t| mlp(t, &w.w1, &w.w2),
    )?;
    Ok(ShardedTensor::sequence(comm.rank(), out))
}

/// Per-head attention backward for one batch entry.
fn head_backward(q: &Matrix, k: &Matrix, v: &Matrix, dout: &Matrix, mask: &Mask, scale: f64) -> Result<(Matrix, Matrix, Matrix)> {
    let s = scaled_scores(q.view(), k.view(), scale)?;
    let p = row_softmax(s.view(), mask, 0)?;
    let dv = matmul(p.transpose().view(), dout.view())?;
    let dp = matmul(dout.view(), v.transpose().view())?;
    let mut ds = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let row_dot: f64 = p.row(i).iter().zip(dp.row(i)).map(|(a, b)| a * b).sum();
        for j in 0..p.cols() {
            ds.set(i, j, p.get(i, j) * (dp.get(i, j) - row_dot));
        }
    }
    let dq = matmul(ds.view(), k.view())?.scale(scale);
    let dk = matmul(ds.transpose().view(), q.view())?.scale(scale);
    Ok((dq, dk, dv))
}

/// Reverse-mode gradients of [`ulysses_attention_forward`].
///
/// Communication mirrors the forward pass: one all-to-all takes the
/// upstream context gradient to the head split, three bring `dq`, `dk`, `dv`
/// back to the sequence split. Weight gradients are this rank's partial
/// contribution; summing them over ranks ([`AttentionGrads::sum`]) gives the
/// full gradient. That reduction belongs to the data-parallel optimizer
/// step and is not metered here.
pub fn ulysses_attention_backward(
    grad_out: &ShardedTensor,
    saved: Option<&UlyssesSaved>,
    w: &LayerWeights,
    spec: &AttentionSpec,
    comm: &Comm<'_>,
    label: &str,
) -> Result<(ShardedTensor, AttentionGrads)> {
    let saved = saved.ok_or_else(|| Error::State("backward called without saved forward state".into()))?;
    if saved.rank != comm.rank() || saved.mask != spec.mask {
        return Err(Error::State(format!(
            "saved state belongs to rank {} with a {} mask; called on rank {} with a {} mask",
            saved.rank,
            saved.mask.name(),
            comm.rank(),
            spec.mask.name()
        )));
    }
    if matches!(spec.mask, Mask::Blocked { .. }) {
        return Err(Error::Kernel("backward is implemented for dense and causal masks only".into()));
    }
    let g = grad_out.as_sequence()?;
    check_local(g, spec, comm.size())?;
    if saved.x.dims() != g.dims() {
        return Err(Error::State("saved activations do not match the gradient shape".into()));
    }

    let grad_wo = matmul(saved.ctx.as_rows().to_owned().transpose().view(), g.as_rows())?;
    let dctx = g.project(&w.wo.transpose())?;
    let dctx = seq_to_head_raw(&dctx, spec, comm, &format!("{label}/dctx-a2a"))?;

    let scale = spec.scale();
    let (mut dq_heads, mut dk_heads, mut dv_heads) = (Vec::new(), Vec::new(), Vec::new());
    for h in 0..saved.q.heads() {
        let (qh, kh, vh, gh) = (saved.q.head(h), saved.k.head(h), saved.v.head(h), dctx.head(h));
        let (mut dqs, mut dks, mut dvs) = (Vec::new(), Vec::new(), Vec::new());
        for bi in 0..qh.batch() {
            let (dq, dk, dv) = head_backward(
                &qh.batch_matrix(bi),
                &kh.batch_matrix(bi),
                &vh.batch_matrix(bi),
                &gh.batch_matrix(bi),
                &spec.mask,
                scale,
            )?;
            dqs.push(dq);
            dks.push(dk);
            dvs.push(dv);
        }
        dq_heads.push(Tensor3::from_batch_matrices(&dqs)?);
        dk_heads.push(Tensor3::from_batch_matrices(&dks)?);
        dv_heads.push(Tensor3::from_batch_matrices(&dvs)?);
    }
    let dq = head_to_seq_raw(&Tensor4::from_heads(&dq_heads)?, spec, comm, &format!("{label}/dq-a2a"))?;
    let dk = head_to_seq_raw(&Tensor4::from_heads(&dk_heads)?, spec, comm, &format!("{label}/dk-a2a"))?;
    let dv = head_to_seq_raw(&Tensor4::from_heads(&dv_heads)?, spec, comm, &format!("{label}/dv-a2a"))?;

    let grad_x = dq
        .project(&w.wq.transpose())?
        .add(&dk.project(&w.wk.transpose())?)?
        .add(&dv.project(&w.wv.transpose())?)?;
    let xt = saved.x.as_rows().to_owned().transpose();
    let grads = AttentionGrads {
        wq: matmul(xt.view(), dq.as_rows())?,
        wk: matmul(xt.view(), dk.as_rows())?,
        wv: matmul(xt.view(), dv.as_rows())?,
        wo: grad_wo,
    };
    Ok((ShardedTensor::sequence(comm.rank(), grad_x), grads))
}
