//! Pluggable per-head attention kernels.
//!
//! A kernel receives one head's `[seq, batch, head_dim]` queries, keys and
//! values over the full sequence and returns the context
//! `softmax(q·kᵀ·scale + mask)·v` for every batch entry. Sequence-parallel
//! schemes only decide *where* a head runs; the kernel decides *how*.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{matmul, row_softmax, Mask, MatRef, Matrix, Tensor3, Tensor4};

pub trait AttentionKernel: Send + Sync {
    fn name(&self) -> &'static str;

    /// Rejects masks the kernel cannot evaluate.
    fn check_mask(&self, mask: &Mask) -> Result<()>;

    fn attend(&self, q: &Tensor3, k: &Tensor3, v: &Tensor3, mask: &Mask, scale: f64) -> Result<Tensor3>;
}

/// Full score matrix, any mask applied as exclusion before softmax.
#[derive(Debug, Clone, Copy, Default)]
pub struct DenseKernel;

/// Lower-triangular evaluation; only keys `j <= i` are ever touched.
#[derive(Debug, Clone, Copy, Default)]
pub struct CausalKernel;

/// Evaluates only the `(query_block, key_block)` pairs of a blocked mask.
#[derive(Debug, Clone, Copy, Default)]
pub struct BlockedSparseKernel;

fn check_qkv(q: &Tensor3, k: &Tensor3, v: &Tensor3) -> Result<()> {
    if q.dims() != k.dims() || q.dims() != v.dims() {
        let dims = |t: &Tensor3| {
            let (s, b, d) = t.dims();
            vec![s, b, d]
        };
        return Err(Error::Shape {
            op: "attention kernel q/k/v",
            left: dims(q),
            right: if q.dims() != k.dims() { dims(k) } else { dims(v) },
        });
    }
    Ok(())
}

/// `q·kᵀ·scale` for one batch entry.
pub(crate) fn scaled_scores(q: MatRef<'_>, k: MatRef<'_>, scale: f64) -> Result<Matrix> {
    let kt = k.to_owned().transpose();
    let mut s = matmul(q, kt.view())?;
    s.data_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(s)
}

impl AttentionKernel for DenseKernel {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn check_mask(&self, _mask: &Mask) -> Result<()> {
        Ok(())
    }

    fn attend(&self, q: &Tensor3, k: &Tensor3, v: &Tensor3, mask: &Mask, scale: f64) -> Result<Tensor3> {
        check_qkv(q, k, v)?;
        let ctx = (0..q.batch())
            .map(|bi| {
                let (qm, km, vm) = (q.batch_matrix(bi), k.batch_matrix(bi), v.batch_matrix(bi));
                let s = scaled_scores(qm.view(), km.view(), scale)?;
                let p = row_softmax(s.view(), mask, 0)?;
                matmul(p.view(), vm.view())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor3::from_batch_matrices(&ctx)
    }
}

impl AttentionKernel for CausalKernel {
    fn name(&self) -> &'static str {
        "causal"
    }

    fn check_mask(&self, mask: &Mask) -> Result<()> {
        match mask {
            Mask::Causal => Ok(()),
            other => Err(Error::Kernel(format!("causal kernel cannot apply a {} mask", other.name()))),
        }
    }

    fn attend(&self, q: &Tensor3, k: &Tensor3, v: &Tensor3, mask: &Mask, scale: f64) -> Result<Tensor3> {
        self.check_mask(mask)?;
        check_qkv(q, k, v)?;
        let (n, b, hd) = q.dims();
        let mut out = Tensor3::zeros(n, b, hd);
        let mut scores = Vec::with_capacity(n);
        for bi in 0..b {
            for i in 0..n {
                scores.clear();
                for j in 0..=i {
                    let mut acc = 0.0;
                    for c in 0..hd {
                        acc += q.get(i, bi, c) * k.get(j, bi, c);
                    }
                    scores.push(acc * scale);
                }
                let p = row_softmax(MatRef::new(1, i + 1, &scores)?, &Mask::None, 0)?;
                for c in 0..hd {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += p.get(0, j) * v.get(j, bi, c);
                    }
                    out.set(i, bi, c, acc);
                }
            }
        }
        Ok(out)
    }
}

impl AttentionKernel for BlockedSparseKernel {
    fn name(&self) -> &'static str {
        "blocked"
    }

    fn check_mask(&self, mask: &Mask) -> Result<()> {
        match mask {
            Mask::Blocked { .. } => Ok(()),
            other => Err(Error::Kernel(format!(
                "blocked-sparse kernel needs a blocked mask, got {}",
                other.name()
            ))),
        }
    }

    fn attend(&self, q: &Tensor3, k: &Tensor3, v: &Tensor3, mask: &Mask, scale: f64) -> Result<Tensor3> {
        self.check_mask(mask)?;
        check_qkv(q, k, v)?;
        let Mask::Blocked { block_size, pattern } = mask else {
            unreachable!("checked above")
        };
        let bs = *block_size;
        let (n, b, hd) = q.dims();
        mask.validate(0, n, n)?;
        let mut out = Tensor3::zeros(n, b, hd);
        for qb in 0..n / bs {
            let key_blocks: Vec<usize> = pattern.range((qb, 0)..(qb + 1, 0)).map(|&(_, kb)| kb).collect();
            if key_blocks.is_empty() {
                return Err(Error::DegenerateRow { row: qb * bs });
            }
            let keys: Vec<usize> = key_blocks.iter().flat_map(|&kb| kb * bs..(kb + 1) * bs).collect();
            for bi in 0..b {
                let mut scores = Vec::with_capacity(bs * keys.len());
                for i in qb * bs..(qb + 1) * bs {
                    for &j in &keys {
                        let mut acc = 0.0;
                        for c in 0..hd {
                            acc += q.get(i, bi, c) * k.get(j, bi, c);
                        }
                        scores.push(acc * scale);
                    }
                }
                let p = row_softmax(MatRef::new(bs, keys.len(), &scores)?, &Mask::None, 0)?;
                for (r, i) in (qb * bs..(qb + 1) * bs).enumerate() {
                    for c in 0..hd {
                        let mut acc = 0.0;
                        for (col, &j) in keys.iter().enumerate() {
                            acc += p.get(r, col) * v.get(j, bi, c);
                        }
                        out.set(i, bi, c, acc);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Named kernel selection for configs and the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Dense,
    Causal,
    Blocked,
}

impl KernelKind {
    pub const ALL: [KernelKind; 3] = [KernelKind::Dense, KernelKind::Causal, KernelKind::Blocked];

    pub fn kernel(self) -> &'static dyn AttentionKernel {
        match self {
            KernelKind::Dense => &DenseKernel,
            KernelKind::Causal => &CausalKernel,
            KernelKind::Blocked => &BlockedSparseKernel,
        }
    }

    /// The mask this kernel is exercised with for an `n`-token sequence.
    ///
    /// The blocked pattern is causal local-plus-first-block with `window`
    /// two blocks wide.
    pub fn default_mask(self, n: usize, block_size: usize) -> Result<Mask> {
        match self {
            KernelKind::Dense => Ok(Mask::None),
            KernelKind::Causal => Ok(Mask::Causal),
            KernelKind::Blocked => Mask::local_global(n, block_size, 2),
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.kernel().name())
    }
}

impl FromStr for KernelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "dense" => Ok(KernelKind::Dense),
            "causal" => Ok(KernelKind::Causal),
            "blocked" | "blocked_sparse" | "blocked-sparse" => Ok(KernelKind::Blocked),
            other => Err(format!("unknown kernel `{other}` (expected dense|causal|blocked)")),
        }
    }
}

/// Runs `kernel` on every local head of head-sharded q/k/v.
pub fn attend_heads(q: &Tensor4, k: &Tensor4, v: &Tensor4, kernel: &dyn AttentionKernel, mask: &Mask, scale: f64) -> Result<Tensor4> {
    kernel.check_mask(mask)?;
    let ctx = (0..q.heads())
        .map(|h| kernel.attend(&q.head(h), &k.head(h), &v.head(h), mask, scale))
        .collect::<Result<Vec<_>>>()?;
    Tensor4::from_heads(&ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::seeded_input;

    fn qkv(n: usize, b: usize, hd: usize) -> (Tensor3, Tensor3, Tensor3) {
        (seeded_input(n, b, hd, 1), seeded_input(n, b, hd, 2), seeded_input(n, b, hd, 3))
    }

    fn max_diff(a: &Tensor3, b: &Tensor3) -> f64 {
        a.sub(b).unwrap().max_abs()
    }

    #[test]
    fn single_token_context_is_value_row() {
        let (q, k, v) = qkv(1, 2, 4);
        for kind in [KernelKind::Dense, KernelKind::Causal] {
            let mask = kind.default_mask(1, 1).unwrap();
            let c = kind.kernel().attend(&q, &k, &v, &mask, 0.5).unwrap();
            assert_eq!(c, v);
        }
    }

    #[test]
    fn causal_first_query_sees_only_first_key() {
        let (q, k, v) = qkv(6, 1, 3);
        let c = CausalKernel.attend(&q, &k, &v, &Mask::Causal, 0.7).unwrap();
        for col in 0..3 {
            assert_eq!(c.get(0, 0, col), v.get(0, 0, col));
        }
    }

    #[test]
    fn causal_kernel_matches_dense_with_causal_mask() {
        let (q, k, v) = qkv(9, 2, 5);
        let a = CausalKernel.attend(&q, &k, &v, &Mask::Causal, 0.3).unwrap();
        let b = DenseKernel.attend(&q, &k, &v, &Mask::Causal, 0.3).unwrap();
        assert!(max_diff(&a, &b) <= 1e-12);
    }

    #[test]
    fn blocked_full_pattern_matches_dense() {
        let (q, k, v) = qkv(8, 2, 4);
        let mask = Mask::blocked_full(8, 2).unwrap();
        let a = BlockedSparseKernel.attend(&q, &k, &v, &mask, 0.5).unwrap();
        let b = DenseKernel.attend(&q, &k, &v, &Mask::None, 0.5).unwrap();
        assert!(max_diff(&a, &b) <= 1e-12);
    }

    #[test]
    fn blocked_sparse_matches_dense_under_equivalent_mask() {
        let (q, k, v) = qkv(16, 2, 4);
        let mask = Mask::local_global(16, 4, 2).unwrap();
        let a = BlockedSparseKernel.attend(&q, &k, &v, &mask, 0.5).unwrap();
        let b = DenseKernel.attend(&q, &k, &v, &mask, 0.5).unwrap();
        assert!(max_diff(&a, &b) <= 1e-12);
    }

    #[test]
    fn blocked_empty_query_block_is_degenerate() {
        let (q, k, v) = qkv(8, 1, 2);
        let mask = Mask::blocked(4, [(0, 0)]).unwrap();
        assert_eq!(
            BlockedSparseKernel.attend(&q, &k, &v, &mask, 1.0).unwrap_err(),
            Error::DegenerateRow { row: 4 }
        );
        assert_eq!(
            DenseKernel.attend(&q, &k, &v, &mask, 1.0).unwrap_err(),
            Error::DegenerateRow { row: 4 }
        );
    }

    #[test]
    fn kernel_mask_mismatch() {
        let (q, k, v) = qkv(4, 1, 2);
        assert!(matches!(CausalKernel.attend(&q, &k, &v, &Mask::None, 1.0), Err(Error::Kernel(_))));
        assert!(matches!(BlockedSparseKernel.attend(&q, &k, &v, &Mask::Causal, 1.0), Err(Error::Kernel(_))));
        assert_eq!("blocked".parse::<KernelKind>().unwrap(), KernelKind::Blocked);
        assert!("flash".parse::<KernelKind>().is_err());
    }
}
