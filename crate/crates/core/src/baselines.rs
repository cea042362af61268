//! The two comparison schemes, simulated on the same group and ledger.
//!
//! * Megatron-style sequence parallelism: token-local ops run on sequence
//!   shards; attention and MLP all-gather the full sequence, compute a
//!   tensor-parallel slice (heads, or MLP columns) and reduce-scatter the
//!   partial output projection back to sequence shards. Per block: two
//!   all-gathers and two reduce-scatters of `n·b·d` each.
//! * Ring self-attention: queries stay local while key and value shards
//!   travel `P − 1` steps around the ring. Per attention: `2(P − 1)` ring
//!   shifts of `n·b·d/P` elements each.

use std::ops::Range;

use crate::error::Result;
use crate::kernel::{attend_heads, AttentionKernel};
use crate::model::{block_with, gelu, mlp, AttentionSpec, LayerWeights};
use crate::simgroup::Comm;
use crate::tensor::{matmul, merge_heads, row_softmax, split_heads, MatRef, Matrix, Tensor3};
use crate::ulysses::ShardedTensor;

/// Ring attention splits only the sequence, so it skips the head check.
fn check_shard(x: &Tensor3, spec: &AttentionSpec, p: usize, split_heads: bool) -> Result<()> {
    if split_heads {
        spec.check_ranks(p)?;
    } else {
        crate::tensor::check_divides("sequence length by ranks", spec.n, p)?;
    }
    let want = (spec.local_seq(p), spec.b, spec.d);
    if x.dims() != want {
        let (s, b, d) = x.dims();
        return Err(crate::Error::Shape {
            op: "sequence shard",
            left: vec![want.0, want.1, want.2],
            right: vec![s, b, d],
        });
    }
    Ok(())
}

/// Hidden columns owned by `rank` when `width` is split `p` ways.
fn owned(rank: usize, p: usize, width: usize) -> Range<usize> {
    let chunk = width / p;
    rank * chunk..(rank + 1) * chunk
}

/// Gather → attention over this rank's heads → partial output projection →
/// reduce-scatter.
fn megatron_attention(h: &Tensor3, w: &LayerWeights, spec: &AttentionSpec, kernel: &dyn AttentionKernel, comm: &Comm<'_>, label: &str) -> Result<Tensor3> {
    kernel.check_mask(&spec.mask)?;
    let p = comm.size();
    let full = comm.all_gather(&format!("{label}/ag"), h, 0)?;
    let cols = owned(comm.rank(), p, spec.d);
    let local_heads = spec.heads / p;
    let q = split_heads(&full.project(&w.wq.col_slice(cols.clone()))?, local_heads)?;
    let k = split_heads(&full.project(&w.wk.col_slice(cols.clone()))?, local_heads)?;
    let v = split_heads(&full.project(&w.wv.col_slice(cols.clone()))?, local_heads)?;
    let ctx = merge_heads(&attend_heads(&q, &k, &v, kernel, &spec.mask, spec.scale())?);
    let partial = ctx.project(&w.wo.row_slice(cols))?;
    comm.reduce_scatter(&format!("{label}/rs"), &partial, 0)
}

/// Gather → column-split first MLP layer → row-split second → reduce-scatter.
fn megatron_mlp(t: &Tensor3, w: &LayerWeights, comm: &Comm<'_>, label: &str) -> Result<Tensor3> {
    let p = comm.size();
    let full = comm.all_gather(&format!("{label}/ag"), t, 0)?;
    let cols = owned(comm.rank(), p, w.w1.cols());
    let mut hidden = matmul(full.as_rows(), w.w1.col_slice(cols.clone()).view())?;
    hidden.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let partial = Tensor3::from_matrix(full.seq(), full.batch(), matmul(hidden.view(), w.w2.row_slice(cols).view())?)?;
    comm.reduce_scatter(&format!("{label}/rs"), &partial, 0)
}

/// Megatron-style sequence-parallel attention alone: one all-gather and one
/// reduce-scatter.
pub fn megatron_sp_attention_forward(
    local_x: &ShardedTensor,
    w: &LayerWeights,
    spec: &AttentionSpec,
    kernel: &dyn AttentionKernel,
    comm: &Comm<'_>,
    label: &str,
) -> Result<ShardedTensor> {
    let x = local_x.as_sequence()?;
    check_shard(x, spec, comm.size(), true)?;
    w.check(spec.d)?;
    let out = megatron_attention(x, w, spec, kernel, comm, &format!("{label}/attn"))?;
    Ok(ShardedTensor::sequence(comm.rank(), out))
}

/// Megatron-style sequence-parallel transformer block.
pub fn megatron_sp_block_forward(
    local_x: &ShardedTensor,
    w: &LayerWeights,
    spec: &AttentionSpec,
    kernel: &dyn AttentionKernel,
    comm: &Comm<'_>,
    label: &str,
) -> Result<ShardedTensor> {
    let x = local_x.as_sequence()?;
    check_shard(x, spec, comm.size(), true)?;
    w.check(spec.d)?;
    let out = block_with(
        x,
        w,
        |h| megatron_attention(h, w, spec, kernel, comm, &format!("{label}/attn")),
        |t| megatron_mlp(t, w, comm, &format!("{label}/mlp")),
    )?;
    Ok(ShardedTensor::sequence(comm.rank(), out))
}

/// Ring attention on raw `[n/P, b, d]` input.
///
/// Score rows for the local queries are assembled over the full key range,
/// one ring step per key shard, then normalized with the mask applied at the
/// queries' global offset. The value pass accumulates the context shard by
/// shard in arrival order.
fn ring_attention(x: &Tensor3, w: &LayerWeights, spec: &AttentionSpec, comm: &Comm<'_>, label: &str) -> Result<Tensor3> {
    let p = comm.size();
    let rank = comm.rank();
    let chunk = spec.local_seq(p);
    let (heads, hd, b) = (spec.heads, spec.head_dim(), spec.b);
    let scale = spec.scale();
    let q = split_heads(&x.project(&w.wq)?, heads)?;
    let mut k = x.project(&w.wk)?;
    let mut v = x.project(&w.wv)?;

    // scores[h][bi] is chunk × n
    let mut scores: Vec<Vec<Matrix>> = vec![vec![Matrix::zeros(chunk, spec.n); b]; heads];
    let q_mats: Vec<Vec<Matrix>> = (0..heads)
        .map(|h| (0..b).map(|bi| q.head(h).batch_matrix(bi)).collect())
        .collect();
    let mut src = rank;
    for step in 0..p {
        if step > 0 {
            k = comm.ring_shift(&format!("{label}/ring-k"), &k, 1)?;
            src = (src + p - 1) % p;
        }
        let kh = split_heads(&k, heads)?;
        for h in 0..heads {
            let khead = kh.head(h);
            for bi in 0..b {
                let kt = khead.batch_matrix(bi).transpose();
                let block = matmul(q_mats[h][bi].view(), kt.view())?;
                let dst = &mut scores[h][bi];
                for i in 0..chunk {
                    for j in 0..chunk {
                        dst.set(i, src * chunk + j, block.get(i, j) * scale);
                    }
                }
            }
        }
    }

    let probs: Vec<Vec<Matrix>> = scores
        .iter()
        .map(|per_b| {
            per_b
                .iter()
                .map(|s| row_softmax(s.view(), &spec.mask, rank * chunk))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut ctx: Vec<Vec<Matrix>> = vec![vec![Matrix::zeros(chunk, hd); b]; heads];
    let mut src = rank;
    for step in 0..p {
        if step > 0 {
            v = comm.ring_shift(&format!("{label}/ring-v"), &v, 1)?;
            src = (src + p - 1) % p;
        }
        let vh = split_heads(&v, heads)?;
        for h in 0..heads {
            let vhead = vh.head(h);
            for bi in 0..b {
                let pm = &probs[h][bi];
                let cols: Vec<f64> = (0..chunk)
                    .flat_map(|i| pm.row(i)[src * chunk..(src + 1) * chunk].iter().copied())
                    .collect();
                let part = matmul(MatRef::new(chunk, chunk, &cols)?, vhead.batch_matrix(bi).view())?;
                ctx[h][bi].add_assign(&part)?;
            }
        }
    }

    let heads_t: Vec<Tensor3> = ctx
        .iter()
        .map(|per_b| Tensor3::from_batch_matrices(per_b))
        .collect::<Result<_>>()?;
    merge_heads(&crate::tensor::Tensor4::from_heads(&heads_t)?).project(&w.wo)
}

/// Ring self-attention: queries local, keys and values circulate.
pub fn ring_attention_forward(local_x: &ShardedTensor, w: &LayerWeights, spec: &AttentionSpec, comm: &Comm<'_>, label: &str) -> Result<ShardedTensor> {
    let x = local_x.as_sequence()?;
    check_shard(x, spec, comm.size(), false)?;
    w.check(spec.d)?;
    let out = ring_attention(x, w, spec, comm, &format!("{label}/attn"))?;
    Ok(ShardedTensor::sequence(comm.rank(), out))
}

/// Transformer block around ring attention; the MLP runs on local tokens.
pub fn ring_block_forward(local_x: &ShardedTensor, w: &LayerWeights, spec: &AttentionSpec, comm: &Comm<'_>, label: &str) -> Result<ShardedTensor> {
    let x = local_x.as_sequence()?;
    check_shard(x, spec, comm.size(), false)?;
    w.check(spec.d)?;
    let out = block_with(
        x,
        w,
        |h| ring_attention(h, w, spec, comm, &format!("{label}/attn")),
        |t| mlp(t, &w.w1, &w.w2),
    )?;
    Ok(ShardedTensor::sequence(comm.rank(), out))
}
