//! Attention configuration, replicated layer weights and the token-local
//! pieces of a pre-layernorm transformer block (layernorm, GELU MLP).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{check_divides, matmul, Mask, Matrix, Tensor3};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Shape and masking of one multi-head attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub n: usize,
    pub b: usize,
    pub d: usize,
    pub heads: usize,
    pub mask: Mask,
}

impl AttentionSpec {
    pub fn new(n: usize, b: usize, d: usize, heads: usize, mask: Mask) -> Result<Self> {
        if n == 0 || b == 0 || d == 0 || heads == 0 {
            return Err(Error::InvalidTensor(format!(
                "attention dims must be positive: n={n} b={b} d={d} heads={heads}"
            )));
        }
        check_divides("hidden size by heads", d, heads)?;
        mask.validate(0, n, n)?;
        Ok(Self { n, b, d, heads, mask })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Softmax temperature `1/√head_dim`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    /// Checks that `p` ranks divide both the sequence and the heads.
    pub fn check_ranks(&self, p: usize) -> Result<()> {
        check_divides("sequence length by ranks", self.n, p)?;
        check_divides("attention heads by ranks", self.heads, p)
    }

    pub fn local_seq(&self, p: usize) -> usize {
        self.n / p
    }

    pub fn with_mask(&self, mask: Mask) -> Result<Self> {
        Self::new(self.n, self.b, self.d, self.heads, mask)
    }
}

/// Weights of one transformer layer, replicated on every rank.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// `d × 4d`
    pub w1: Matrix,
    /// `4d × d`
    pub w2: Matrix,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub seed: u64,
}

impl LayerWeights {
    /// Draws every weight from a ChaCha8 stream seeded with `seed`.
    ///
    /// Projections are uniform in `±1/√fan_in`; layernorm gains are
    /// `1 ± 0.1` and biases `±0.1`. Draw order: wq, wk, wv, wo, w1, w2,
    /// ln1 gain, ln1 bias, ln2 gain, ln2 bias, each row-major.
    pub fn seeded(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize| {
            let a = 1.0 / (rows as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
        };
        let wq = mat(d, d);
        let wk = mat(d, d);
        let wv = mat(d, d);
        let wo = mat(d, d);
        let w1 = mat(d, 4 * d);
        let w2 = mat(4 * d, d);
        let mut vec = |center: f64| -> Vec<f64> { (0..d).map(|_| center + rng.gen_range(-0.1..0.1)).collect() };
        let ln1_gain = vec(1.0);
        let ln1_bias = vec(0.0);
        let ln2_gain = vec(1.0);
        let ln2_bias = vec(0.0);
        Self {
            wq,
            wk,
            wv,
            wo,
            w1,
            w2,
            ln1_gain,
            ln1_bias,
            ln2_gain,
            ln2_bias,
            seed,
        }
    }

    pub fn hidden(&self) -> usize {
        self.wq.rows()
    }

    /// Checks every shape against hidden size `d`.
    pub fn check(&self, d: usize) -> Result<()> {
        let sq = [(&self.wq, d, d), (&self.wk, d, d), (&self.wv, d, d), (&self.wo, d, d), (&self.w1, d, 4 * d), (&self.w2, 4 * d, d)];
        for (m, r, c) in sq {
            if m.shape() != (r, c) {
                return Err(Error::Shape {
                    op: "layer weights",
                    left: vec![r, c],
                    right: vec![m.rows(), m.cols()],
                });
            }
        }
        for v in [&self.ln1_gain, &self.ln1_bias, &self.ln2_gain, &self.ln2_bias] {
            if v.len() != d {
                return Err(Error::Shape {
                    op: "layernorm parameters",
                    left: vec![d],
                    right: vec![v.len()],
                });
            }
        }
        Ok(())
    }
}

/// Gradients of an attention layer's projection weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl AttentionGrads {
    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
        }
    }

    pub fn matrices(&self) -> [&Matrix; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    /// Sum of per-rank partial gradients, accumulated in rank order.
    pub fn sum(parts: &[AttentionGrads]) -> Result<AttentionGrads> {
        let first = parts
            .first()
            .ok_or_else(|| Error::State("no gradient parts to sum".into()))?;
        let mut acc = first.clone();
        for g in &parts[1..] {
            acc.wq.add_assign(&g.wq)?;
            acc.wk.add_assign(&g.wk)?;
            acc.wv.add_assign(&g.wv)?;
            acc.wo.add_assign(&g.wo)?;
        }
        Ok(acc)
    }

    /// Largest element-wise difference over all four matrices.
    pub fn max_abs_diff(&self, other: &AttentionGrads) -> f64 {
        self.matrices()
            .iter()
            .zip(other.matrices())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.matrices().iter().map(|m| m.max_abs()).fold(0.0, f64::max)
    }
}

/// Seeded activation tensor with elements uniform in `[-1, 1)`.
pub fn seeded_input(n: usize, b: usize, d: usize, seed: u64) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor3::from_fn(n, b, d, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// Per-token layernorm over the hidden axis.
pub fn layer_norm(x: &Tensor3, gain: &[f64], bias: &[f64]) -> Tensor3 {
    let d = x.hidden();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (k, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[k] + bias[k];
        }
    }
    out
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// `gelu(t · w1) · w2` applied token-wise.
pub fn mlp(t: &Tensor3, w1: &Matrix, w2: &Matrix) -> Result<Tensor3> {
    let (s, b, _) = t.dims();
    let mut h = matmul(t.as_rows(), w1.view())?;
    h.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    Tensor3::from_matrix(s, b, matmul(h.view(), w2.view())?)
}

/// Pre-layernorm block around an attention function:
/// `y = x + attn(ln1(x))`, `out = y + mlp(ln2(y))`.
///
/// `attn` and `mlp_fn` see whatever rows `x` holds, so the same recipe runs on
/// a full sequence or on one rank's sequence shard.
pub fn block_with(
    x: &Tensor3,
    w: &LayerWeights,
    attn: impl FnOnce(&Tensor3) -> Result<Tensor3>,
    mlp_fn: impl FnOnce(&Tensor3) -> Result<Tensor3>,
) -> Result<Tensor3> {
    let a = attn(&layer_norm(x, &w.ln1_gain, &w.ln1_bias))?;
    let y = x.add(&a)?;
    let m = mlp_fn(&layer_norm(&y, &w.ln2_gain, &w.ln2_bias))?;
    y.add(&m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(AttentionSpec::new(8, 1, 8, 3, Mask::None).is_err());
        let spec = AttentionSpec::new(8, 1, 8, 4, Mask::None).unwrap();
        assert_eq!(spec.head_dim(), 2);
        assert_eq!(spec.scale(), 1.0 / 2f64.sqrt());
        assert!(spec.check_ranks(4).is_ok());
        assert!(spec.check_ranks(8).is_err());
        assert!(AttentionSpec::new(6, 1, 8, 4, Mask::local_global(8, 4, 1).unwrap()).is_err());
    }

    #[test]
    fn seeded_weights_are_reproducible() {
        let a = LayerWeights::seeded(8, 3);
        assert_eq!(a, LayerWeights::seeded(8, 3));
        assert_ne!(a, LayerWeights::seeded(8, 4));
        a.check(8).unwrap();
        assert!(a.check(4).is_err());
    }

    #[test]
    fn layer_norm_identity_on_normalized_rows() {
        // rows with zero mean and unit variance pass through a unit-gain,
        // zero-bias layernorm up to the epsilon term
        let x = Tensor3::new((1, 1, 4), vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4]);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // tanh-approximate gelu(1) = 0.5·(1 + tanh(√(2/π)·1.044715))
        let want = 0.5 * (1.0 + (0.797_884_560_802_865_4_f64 * 1.044_715).tanh());
        assert!((gelu(1.0) - want).abs() < 1e-15);
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!(gelu(-10.0).abs() < 1e-12);
    }
}
