//! Transformer building blocks shared by the text encoder and the visual backbone.

use crate::error::{Error, Result};
use crate::params::{Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Logit added to masked key positions before the softmax.
pub const MASKED_LOGIT: f64 = -1e30;

pub const INIT_STD: f64 = 0.02;

/// Row vector holding `0` on kept keys and [`MASKED_LOGIT`] on masked ones.
pub fn key_mask_bias(mask: &[bool]) -> Tensor {
    Tensor::from_fn(&[1, mask.len()], |j| if mask[j] { 0.0 } else { MASKED_LOGIT })
}

/// Adds a `1×n` row to every row of an `m×n` matrix of scores.
fn add_key_bias(g: &mut Graph, scores: Var, bias: &Tensor) -> Result<Var> {
    let m = g.tape.shape(scores)[0];
    let n = bias.numel();
    let mut full = Vec::with_capacity(m * n);
    for _ in 0..m {
        full.extend_from_slice(bias.data());
    }
    let b = g.constant(Tensor::new(&[m, n], full)?);
    g.tape.add(scores, b)
}

/// Scaled dot-product multi-head attention over already projected
/// `q`, `k`, `v` (each `T×d`). Returns the concatenated head outputs and the
/// per-head attention matrices.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let d = g.tape.shape(q)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::dim(
            "attention",
            format!("{heads} heads do not divide width {d}"),
        ));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let bias = key_mask.map(key_mask_bias);
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.tape.slice_cols(q, h * dh, dh)?,
                g.tape.slice_cols(k, h * dh, dh)?,
                g.tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = g.tape.matmul_nt(qh, kh)?;
        let mut s = g.tape.scale(s, scale)?;
        if let Some(b) = &bias {
            s = add_key_bias(g, s, b)?;
        }
        let a = g.tape.softmax_rows(s)?;
        outs.push(g.tape.matmul(a, vh)?);
        probs.push(a);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        g.tape.concat_cols(&outs)?
    };
    Ok((out, probs))
}

pub fn linear(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.p(&format!("{prefix}.w"))?;
    let b = g.p(&format!("{prefix}.b"))?;
    g.tape.linear(x, w, Some(b))
}

pub fn layer_norm(g: &mut Graph, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let gain = g.p(&format!("{prefix}.g"))?;
    let bias = g.p(&format!("{prefix}.b"))?;
    g.tape.layer_norm(x, gain, bias, eps)
}

/// Two-layer GeLU MLP: `fc2(gelu(fc1(x)))`.
pub fn mlp(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, x, &format!("{prefix}.fc1"))?;
    let h = g.tape.gelu(h)?;
    linear(g, h, &format!("{prefix}.fc2"))
}

pub fn init_linear(store: &mut ParamStore, seed: u64, prefix: &str, d_out: usize, d_in: usize, std: f64) {
    store.normal(seed, &format!("{prefix}.w"), &[d_out, d_in], std);
    store.zeros(&format!("{prefix}.b"), &[d_out]);
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.ones(&format!("{prefix}.g"), &[d]);
    store.zeros(&format!("{prefix}.b"), &[d]);
}

pub fn init_mlp(store: &mut ParamStore, seed: u64, prefix: &str, d: usize, hidden: usize) {
    init_linear(store, seed, &format!("{prefix}.fc1"), hidden, d, INIT_STD);
    init_linear(store, seed, &format!("{prefix}.fc2"), d, hidden, INIT_STD);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_keys_get_exactly_zero_weight() {
        let store = ParamStore::new();
        let mut g = Graph::eval(&store);
        let x = g.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin()));
        let (_, probs) = multi_head_attention(&mut g, x, x, x, 2, Some(&[true, true, false])).unwrap();
        for p in probs {
            let a = g.tape.value(p);
            for r in 0..3 {
                assert_eq!(a.at(&[r, 2]), 0.0);
                assert!((a.at(&[r, 0]) + a.at(&[r, 1]) - 1.0).abs() < 1e-12);
            }
        }
    }
}
