//! Single-rank ground truth: multi-head attention, the full block, an
//! analytic backward pass and tensor comparison.
//!
//! The forward path uses the same kernels and conventions as every
//! sequence-parallel scheme, so a scheme-vs-oracle comparison isolates the
//! parallelization. The backward pass is written as explicit loops and shares
//! no code with the sharded backward it checks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{attend_heads, AttentionKernel};
use crate::model::{block_with, mlp, AttentionGrads, AttentionSpec, LayerWeights};
use crate::tensor::{merge_heads, split_heads, Mask, Matrix, Tensor3};

/// Forward activations kept for [`reference_attention_backward`].
#[derive(Debug, Clone)]
pub struct OracleSaved {
    pub x: Tensor3,
    pub q: Tensor3,
    pub k: Tensor3,
    pub v: Tensor3,
    /// Merged head contexts before the output projection.
    pub ctx: Tensor3,
}

fn check_input(x: &Tensor3, w: &LayerWeights, spec: &AttentionSpec) -> Result<()> {
    if x.dims() != (spec.n, spec.b, spec.d) {
        let (s, b, d) = x.dims();
        return Err(Error::Shape {
            op: "oracle input",
            left: vec![spec.n, spec.b, spec.d],
            right: vec![s, b, d],
        });
    }
    w.check(spec.d)
}

pub fn reference_attention_saved(
    x: &Tensor3,
    w: &LayerWeights,
    spec: &AttentionSpec,
    kernel: &dyn AttentionKernel,
) -> Result<(Tensor3, OracleSaved)> {
    check_input(x, w, spec)?;
    let q = x.project(&w.wq)?;
    let k = x.project(&w.wk)?;
    let v = x.project(&w.wv)?;
    let ctx = attend_heads(
        &split_heads(&q, spec.heads)?,
        &split_heads(&k, spec.heads)?,
        &split_heads(&v, spec.heads)?,
        kernel,
        &spec.mask,
        spec.scale(),
    )?;
    let ctx = merge_heads(&ctx);
    let out = ctx.project(&w.wo)?;
    Ok((
        out,
        OracleSaved {
            x: x.clone(),
            q,
            k,
            v,
            ctx,
        },
    ))
}

/// Full multi-head attention on one rank.
pub fn reference_attention(x: &Tensor3, w: &LayerWeights, spec: &AttentionSpec, kernel: &dyn AttentionKernel) -> Result<Tensor3> {
    reference_attention_saved(x, w, spec, kernel).map(|(o, _)| o)
}

/// Pre-layernorm transformer block on one rank.
pub fn reference_block(x: &Tensor3, w: &LayerWeights, spec: &AttentionSpec, kernel: &dyn AttentionKernel) -> Result<Tensor3> {
    check_input(x, w, spec)?;
    block_with(x, w, |h| reference_attention(h, w, spec, kernel), |t| mlp(t, &w.w1, &w.w2))
}

/// Masked softmax of one score row, written out independently of
/// [`crate::tensor::row_softmax`].
fn softmax_row(scores: &[f64], mask: &Mask, query: usize) -> Result<Vec<f64>> {
    let visible: Vec<bool> = (0..scores.len()).map(|j| mask.allows(query, j)).collect();
    let max = scores
        .iter()
        .zip(&visible)
        .filter(|(_, &v)| v)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateRow { row: query });
    }
    let e: Vec<f64> = scores
        .iter()
        .zip(&visible)
        .map(|(s, &v)| if v { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

/// Analytic gradients of [`reference_attention`] given `grad_out = ∂L/∂out`.
///
/// Only dense evaluation semantics (no mask or a causal mask) are supported.
pub fn reference_attention_backward(
    grad_out: &Tensor3,
    saved: &OracleSaved,
    w: &LayerWeights,
    spec: &AttentionSpec,
) -> Result<(Tensor3, AttentionGrads)> {
    if matches!(spec.mask, Mask::Blocked { .. }) {
        return Err(Error::Kernel("backward is implemented for dense and causal masks only".into()));
    }
    let (n, b, d) = (spec.n, spec.b, spec.d);
    if grad_out.dims() != (n, b, d) || saved.x.dims() != (n, b, d) {
        return Err(Error::State(format!(
            "saved activations {:?} / gradient {:?} do not match spec ({n}, {b}, {d})",
            saved.x.dims(),
            grad_out.dims()
        )));
    }
    let hd = spec.head_dim();
    let scale = spec.scale();
    let g = grad_out;

    let mut grad_wo = Matrix::zeros(d, d);
    let mut dctx = Tensor3::zeros(n, b, d);
    for s in 0..n {
        for bi in 0..b {
            for a in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += g.get(s, bi, c) * w.wo.get(a, c);
                    let cur = grad_wo.get(a, c);
                    grad_wo.set(a, c, cur + saved.ctx.get(s, bi, a) * g.get(s, bi, c));
                }
                dctx.set(s, bi, a, acc);
            }
        }
    }

    let (q, k, v) = (&saved.q, &saved.k, &saved.v);
    let mut dq = Tensor3::zeros(n, b, d);
    let mut dk = Tensor3::zeros(n, b, d);
    let mut dv = Tensor3::zeros(n, b, d);
    for h in 0..spec.heads {
        let off = h * hd;
        for bi in 0..b {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..hd).map(|c| q.get(i, bi, off + c) * k.get(j, bi, off + c)).sum::<f64>() * scale)
                    .collect();
                let p = softmax_row(&scores, &spec.mask, i)?;
                let dp: Vec<f64> = (0..n)
                    .map(|j| (0..hd).map(|c| dctx.get(i, bi, off + c) * v.get(j, bi, off + c)).sum())
                    .collect();
                let row_dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - row_dot);
                    for c in 0..hd {
                        let col = off + c;
                        dv.set(j, bi, col, dv.get(j, bi, col) + p[j] * dctx.get(i, bi, col));
                        dq.set(i, bi, col, dq.get(i, bi, col) + scale * ds * k.get(j, bi, col));
                        dk.set(j, bi, col, dk.get(j, bi, col) + scale * ds * q.get(i, bi, col));
                    }
                }
            }
        }
    }

    let mut grad_x = Tensor3::zeros(n, b, d);
    let mut grads = AttentionGrads {
        wq: Matrix::zeros(d, d),
        wk: Matrix::zeros(d, d),
        wv: Matrix::zeros(d, d),
        wo: grad_wo,
    };
    for s in 0..n {
        for bi in 0..b {
            for a in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += dq.get(s, bi, c) * w.wq.get(a, c) + dk.get(s, bi, c) * w.wk.get(a, c) + dv.get(s, bi, c) * w.wv.get(a, c);
                }
                grad_x.set(s, bi, a, acc);
                let xa = saved.x.get(s, bi, a);
                for c in 0..d {
                    grads.wq.set(a, c, grads.wq.get(a, c) + xa * dq.get(s, bi, c));
                    grads.wk.set(a, c, grads.wk.get(a, c) + xa * dk.get(s, bi, c));
                    grads.wv.set(a, c, grads.wv.get(a, c) + xa * dv.get(s, bi, c));
                }
            }
        }
    }
    Ok((grad_x, grads))
}

/// Central finite-difference gradients of `L = Σ grad_out · attention(x)`
/// with respect to `x` and the four projections.
///
/// Perturbations are evaluated in parallel; each entry is independent, so the
/// result does not depend on scheduling.
pub fn finite_difference_grads(
    x: &Tensor3,
    grad_out: &Tensor3,
    w: &LayerWeights,
    spec: &AttentionSpec,
    kernel: &dyn AttentionKernel,
    step: f64,
) -> Result<(Tensor3, AttentionGrads)> {
    check_input(x, w, spec)?;
    if grad_out.dims() != x.dims() {
        return Err(Error::State("upstream gradient does not match the input shape".into()));
    }
    let loss = |x: &Tensor3, w: &LayerWeights| -> Result<f64> {
        let out = reference_attention(x, w, spec, kernel)?;
        Ok(out.data().iter().zip(grad_out.data()).map(|(a, g)| a * g).sum())
    };
    let central = |perturb: &(dyn Fn(f64) -> Result<f64> + Sync)| -> Result<f64> {
        Ok((perturb(step)? - perturb(-step)?) / (2.0 * step))
    };

    let gx: Vec<f64> = (0..x.data().len())
        .into_par_iter()
        .map(|i| {
            central(&|h| {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                loss(&xp, w)
            })
        })
        .collect::<Result<_>>()?;

    let d = spec.d;
    let weight_grad = |pick: fn(&mut LayerWeights) -> &mut Matrix| -> Result<Matrix> {
        let data = (0..d * d)
            .into_par_iter()
            .map(|i| {
                central(&|h| {
                    let mut wp = w.clone();
                    pick(&mut wp).data_mut()[i] += h;
                    loss(x, &wp)
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        Matrix::new(d, d, data)
    };
    let grads = AttentionGrads {
        wq: weight_grad(|w| &mut w.wq)?,
        wk: weight_grad(|w| &mut w.wk)?,
        wv: weight_grad(|w| &mut w.wv)?,
        wo: weight_grad(|w| &mut w.wo)?,
    };
    Ok((Tensor3::new(x.dims(), gx)?, grads))
}

/// `max |a − b| / max |b|` over every gradient tensor, the scale taken from
/// the analytic side `b`.
pub fn relative_grad_error(a: (&Tensor3, &AttentionGrads), b: (&Tensor3, &AttentionGrads)) -> f64 {
    let diff = a.1.max_abs_diff(b.1).max(
        a.0.data().iter().zip(b.0.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max),
    );
    let scale = b.1.max_abs().max(b.0.max_abs());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Outcome of comparing two tensors element-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub max_abs_err: f64,
    /// `(seq, batch, hidden)` position of the largest difference.
    pub index: [usize; 3],
    pub tol: f64,
    pub pass: bool,
}

pub fn compare(a: &Tensor3, bten: &Tensor3, tol: f64) -> Result<CompareReport> {
    if a.dims() != bten.dims() {
        let (s0, b0, d0) = a.dims();
        let (s1, b1, d1) = bten.dims();
        return Err(Error::Shape {
            op: "compare",
            left: vec![s0, b0, d0],
            right: vec![s1, b1, d1],
        });
    }
    let (_, b, d) = a.dims();
    let mut worst = (0.0_f64, 0usize);
    for (i, (x, y)) in a.data().iter().zip(bten.data()).enumerate() {
        let e = (x - y).abs();
        if e > worst.0 {
            worst = (e, i);
        }
    }
    let i = worst.1;
    Ok(CompareReport {
        max_abs_err: worst.0,
        index: [i / (b * d), (i / d) % b, i % d],
        tol,
        pass: worst.0 <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{CausalKernel, DenseKernel};
    use crate::model::seeded_input;

    fn setup(n: usize, b: usize, d: usize, h: usize, mask: Mask) -> (Tensor3, LayerWeights, AttentionSpec) {
        (seeded_input(n, b, d, 5), LayerWeights::seeded(d, 9), AttentionSpec::new(n, b, d, h, mask).unwrap())
    }

    /// Independent multi-head attention: explicit loops over head, batch,
    /// query and key.
    fn naive_attention(x: &Tensor3, w: &LayerWeights, spec: &AttentionSpec) -> Tensor3 {
        let (n, b, d) = x.dims();
        let hd = spec.head_dim();
        let q = x.project(&w.wq).unwrap();
        let k = x.project(&w.wk).unwrap();
        let v = x.project(&w.wv).unwrap();
        let mut ctx = Tensor3::zeros(n, b, d);
        for h in 0..spec.heads {
            for bi in 0..b {
                for i in 0..n {
                    let s: Vec<f64> = (0..n)
                        .map(|j| (0..hd).map(|c| q.get(i, bi, h * hd + c) * k.get(j, bi, h * hd + c)).sum::<f64>() * spec.scale())
                        .collect();
                    let p = softmax_row(&s, &spec.mask, i).unwrap();
                    for c in 0..hd {
                        let val: f64 = (0..n).map(|j| p[j] * v.get(j, bi, h * hd + c)).sum();
                        ctx.set(i, bi, h * hd + c, val);
                    }
                }
            }
        }
        ctx.project(&w.wo).unwrap()
    }

    #[test]
    fn single_token_output_is_value_projection() {
        let (x, w, spec) = setup(1, 2, 8, 4, Mask::None);
        let out = reference_attention(&x, &w, &spec, &DenseKernel).unwrap();
        let want = x.project(&w.wv).unwrap().project(&w.wo).unwrap();
        assert_eq!(out, want);
    }

    #[test]
    fn zero_query_key_weights_give_uniform_attention() {
        let (x, mut w, spec) = setup(4, 1, 4, 2, Mask::None);
        w.wq = Matrix::zeros(4, 4);
        w.wk = Matrix::zeros(4, 4);
        let (_, saved) = reference_attention_saved(&x, &w, &spec, &DenseKernel).unwrap();
        let v = x.project(&w.wv).unwrap();
        for i in 0..4 {
            for c in 0..4 {
                let mean = (0..4).map(|j| v.get(j, 0, c)).sum::<f64>() / 4.0;
                assert!((saved.ctx.get(i, 0, c) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_naive_loops() {
        for mask in [Mask::None, Mask::Causal] {
            let (x, w, spec) = setup(4, 1, 4, 2, mask);
            let kernel: &dyn AttentionKernel = if spec.mask == Mask::Causal { &CausalKernel } else { &DenseKernel };
            let out = reference_attention(&x, &w, &spec, kernel).unwrap();
            let naive = naive_attention(&x, &w, &spec);
            assert!(compare(&out, &naive, 1e-14).unwrap().pass);
        }
        let (x, w, spec) = setup(6, 2, 12, 3, Mask::None);
        let out = reference_attention(&x, &w, &spec, &DenseKernel).unwrap();
        assert!(compare(&out, &naive_attention(&x, &w, &spec), 1e-14).unwrap().pass);
    }

    #[test]
    fn causal_rows_ignore_future_keys() {
        let (x, w, spec) = setup(8, 1, 8, 2, Mask::Causal);
        let base = reference_attention(&x, &w, &spec, &CausalKernel).unwrap();
        let mut perturbed = x.clone();
        for c in 0..8 {
            perturbed.set(5, 0, c, perturbed.get(5, 0, c) + 0.5);
        }
        let out = reference_attention(&perturbed, &w, &spec, &CausalKernel).unwrap();
        for i in 0..5 {
            for c in 0..8 {
                assert_eq!(out.get(i, 0, c), base.get(i, 0, c));
            }
        }
        assert_ne!(out.get(5, 0, 0), base.get(5, 0, 0));
    }

    #[test]
    fn zero_mlp_block_is_attention_plus_residual() {
        let (x, mut w, spec) = setup(4, 2, 8, 2, Mask::None);
        w.w2 = Matrix::zeros(32, 8);
        let block = reference_block(&x, &w, &spec, &DenseKernel).unwrap();
        let h = crate::model::layer_norm(&x, &w.ln1_gain, &w.ln1_bias);
        let want = x.add(&reference_attention(&h, &w, &spec, &DenseKernel).unwrap()).unwrap();
        assert_eq!(block, want);
    }

    #[test]
    fn block_step_by_step() {
        let (x, w, spec) = setup(8, 2, 8, 4, Mask::Causal);
        let block = reference_block(&x, &w, &spec, &CausalKernel).unwrap();
        let h = crate::model::layer_norm(&x, &w.ln1_gain, &w.ln1_bias);
        let y = x.add(&naive_attention(&h, &w, &spec)).unwrap();
        let t = crate::model::layer_norm(&y, &w.ln2_gain, &w.ln2_bias);
        let mut hidden = t.project(&w.w1).unwrap();
        hidden.data_mut().iter_mut().for_each(|v| *v = crate::model::gelu(*v));
        let want = y.add(&hidden.project(&w.w2).unwrap()).unwrap();
        assert!(compare(&block, &want, 1e-13).unwrap().pass);
    }

    #[test]
    fn backward_zero_gradient() {
        let (x, w, spec) = setup(4, 1, 8, 2, Mask::None);
        let (_, saved) = reference_attention_saved(&x, &w, &spec, &DenseKernel).unwrap();
        let (gx, gw) = reference_attention_backward(&Tensor3::zeros(4, 1, 8), &saved, &w, &spec).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        assert_eq!(gw.max_abs(), 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (x, w, spec) = setup(8, 1, 8, 2, Mask::Causal);
        let (out, saved) = reference_attention_saved(&x, &w, &spec, &CausalKernel).unwrap();
        let g = out.map(|v| 2.0 * v);
        let (gx, _) = reference_attention_backward(&g, &saved, &w, &spec).unwrap();
        let loss = |x: &Tensor3| reference_attention(x, &w, &spec, &CausalKernel).unwrap().sum_sq();
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        for idx in 0..x.data().len() {
            let mut plus = x.clone();
            plus.data_mut()[idx] += step;
            let mut minus = x.clone();
            minus.data_mut()[idx] -= step;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
            worst = worst.max((fd - gx.data()[idx]).abs());
        }
        assert!(worst / gx.max_abs() < 1e-6, "relative {}", worst / gx.max_abs());
    }

    #[test]
    fn backward_is_linear_in_upstream_gradient() {
        let (x, w, spec) = setup(8, 2, 8, 4, Mask::None);
        let (_, saved) = reference_attention_saved(&x, &w, &spec, &DenseKernel).unwrap();
        let g = seeded_input(8, 2, 8, 77);
        let (gx1, gw1) = reference_attention_backward(&g, &saved, &w, &spec).unwrap();
        let (gx2, gw2) = reference_attention_backward(&g.map(|v| 2.0 * v), &saved, &w, &spec).unwrap();
        assert!(compare(&gx2, &gx1.map(|v| 2.0 * v), 1e-14).unwrap().pass);
        let doubled = AttentionGrads {
            wq: gw1.wq.scale(2.0),
            wk: gw1.wk.scale(2.0),
            wv: gw1.wv.scale(2.0),
            wo: gw1.wo.scale(2.0),
        };
        assert!(gw2.max_abs_diff(&doubled) <= 1e-14);
    }

    #[test]
    fn compare_reports_location() {
        let x = seeded_input(3, 2, 4, 1);
        let r = compare(&x, &x, 0.0).unwrap();
        assert_eq!(r.max_abs_err, 0.0);
        assert!(r.pass);
        let mut y = x.clone();
        y.set(2, 1, 3, y.get(2, 1, 3) + 1e-3);
        let r = compare(&x, &y, 1e-12).unwrap();
        assert!((r.max_abs_err - 1e-3).abs() < 1e-15);
        assert_eq!(r.index, [2, 1, 3]);
        assert!(!r.pass);
        assert!(compare(&x, &seeded_input(2, 2, 4, 1), 1.0).is_err());
    }
}
