//! Toy vision transformer whose QKV projections come from the weight generator.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::law::GeneratedLayerWeights;
use crate::nn;
use crate::params::{Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Converts interleaved RGB bytes (`H×W×3`) to a `3×H×W` tensor in `[0, 1]`.
pub fn image_tensor(rgb: &[u8], size: usize) -> Result<Tensor> {
    if rgb.len() != size * size * 3 {
        return Err(Error::dim(
            "image",
            format!("{} bytes for a {size}×{size} RGB image", rgb.len()),
        ));
    }
    let hw = size * size;
    Ok(Tensor::from_fn(&[3, size, size], |i| {
        let (c, p) = (i / hw, i % hw);
        rgb[p * 3 + c] as f64 / 255.0
    }))
}

pub fn init_params(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) {
    let d = cfg.d_model;
    let patch_dim = 3 * cfg.patch * cfg.patch;
    nn::init_linear(store, seed, "vit.patch", d, patch_dim, 1.0 / (patch_dim as f64).sqrt());
    store.insert("vit.pos", sincos_positions(cfg.grid(), d));
    for i in 0..cfg.blocks {
        let p = format!("vit.b{i}");
        nn::init_layer_norm(store, &format!("{p}.ln1"), d);
        store.normal(seed, &format!("{p}.w0"), &[cfg.d_out(), cfg.d_in()], nn::INIT_STD);
        store.zeros(&format!("{p}.qkv_b"), &[cfg.d_out()]);
        nn::init_linear(store, seed, &format!("{p}.attn.out"), d, d, nn::INIT_STD);
        nn::init_layer_norm(store, &format!("{p}.ln2"), d);
        nn::init_mlp(store, seed, &format!("{p}.mlp"), d, cfg.mlp_ratio * d);
    }
}

/// Fixed 2-D sine-cosine table used as the starting point of the learned
/// position embedding: the first half of the channels encodes the row, the
/// second half the column, each as a `[sin…, cos…]` block over
/// geometrically spaced frequencies.
pub fn sincos_positions(grid: usize, d: usize) -> Tensor {
    let half = d / 2;
    let quarter = half / 2;
    Tensor::from_fn(&[grid * grid, d], |k| {
        let (t, c) = (k / d, k % d);
        let (coord, c) = if c < half {
            ((t / grid) as f64, c)
        } else {
            ((t % grid) as f64, c - half)
        };
        if quarter == 0 || c >= 2 * quarter {
            return 0.0;
        }
        let (j, use_cos) = if c < quarter { (c, false) } else { (c - quarter, true) };
        let omega = 1.0 / 10000f64.powf(j as f64 / quarter as f64);
        if use_cos {
            (coord * omega).cos()
        } else {
            (coord * omega).sin()
        }
    })
}

/// Flat indices that unfold a `3×H×W` image into `T` rows of
/// `(channel, dy, dx)`-ordered patch vectors, patches in raster order.
pub fn patch_index(size: usize, patch: usize) -> Vec<usize> {
    let grid = size / patch;
    let mut idx = Vec::with_capacity(3 * size * size);
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        idx.push(c * size * size + (gy * patch + dy) * size + gx * patch + dx);
                    }
                }
            }
        }
    }
    idx
}

pub fn patch_embed(g: &mut Graph, image: &Tensor, cfg: &ModelConfig) -> Result<Var> {
    let size = cfg.image_size;
    if image.shape() != [3, size, size] {
        return Err(Error::dim(
            "patch_embed",
            format!("image shape {:?}, expected [3, {size}, {size}]", image.shape()),
        ));
    }
    if !size.is_multiple_of(cfg.patch) {
        return Err(Error::dim(
            "patch_embed",
            format!("size {size} not divisible by patch {}", cfg.patch),
        ));
    }
    let x = g.constant(image.clone());
    let t = cfg.tokens();
    let patches = g
        .tape
        .gather_flat(x, patch_index(size, cfg.patch), &[t, 3 * cfg.patch * cfg.patch])?;
    let tokens = nn::linear(g, patches, "vit.patch")?;
    let pos = g.p("vit.pos")?;
    g.tape.add(tokens, pos)
}

/// One pre-norm block with externally supplied fused QKV weights.
/// Returns the new tokens and the per-head attention matrices.
pub fn attention_block(
    g: &mut Graph,
    x: Var,
    w: &GeneratedLayerWeights,
    block: usize,
    cfg: &ModelConfig,
) -> Result<(Var, Vec<Var>)> {
    let d = cfg.d_model;
    if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
        return Err(Error::dim(
            "attention_block",
            format!("{} heads do not divide d_model {d}", cfg.heads),
        ));
    }
    let p = format!("vit.b{block}");
    let h = nn::layer_norm(g, x, &format!("{p}.ln1"), cfg.ln_eps)?;
    let qkv = g.tape.linear(h, w.w, Some(w.bias))?;
    let q = g.tape.slice_cols(qkv, 0, d)?;
    let k = g.tape.slice_cols(qkv, d, d)?;
    let v = g.tape.slice_cols(qkv, 2 * d, d)?;
    let (a, probs) = nn::multi_head_attention(g, q, k, v, cfg.heads, None)?;
    let a = nn::linear(g, a, &format!("{p}.attn.out"))?;
    let x = g.tape.add(x, a)?;
    let h = nn::layer_norm(g, x, &format!("{p}.ln2"), cfg.ln_eps)?;
    let h = nn::mlp(g, h, &format!("{p}.mlp"))?;
    Ok((g.tape.add(x, h)?, probs))
}

/// Backbone output: tokens `T×C` plus per-block, per-head attention.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub tokens: Var,
    pub attention: Vec<Vec<Var>>,
}

pub fn forward_backbone(
    g: &mut Graph,
    image: &Tensor,
    weights: &[GeneratedLayerWeights],
    cfg: &ModelConfig,
) -> Result<BackboneOutput> {
    if weights.len() != cfg.blocks {
        return Err(Error::InvalidArgument(format!(
            "{} generated weight sets for {} blocks",
            weights.len(),
            cfg.blocks
        )));
    }
    let mut x = patch_embed(g, image, cfg)?;
    let mut attention = Vec::with_capacity(cfg.blocks);
    for (i, w) in weights.iter().enumerate() {
        let (y, probs) = attention_block(g, x, w, i, cfg)?;
        x = y;
        attention.push(probs);
    }
    Ok(BackboneOutput { tokens: x, attention })
}

/// Reshapes `T×C` tokens into the `C×h×w` feature map.
pub fn feature_map(g: &mut Graph, tokens: Var, grid: usize) -> Result<Var> {
    let t = g.tape.transpose(tokens)?;
    let c = g.tape.shape(t)[0];
    g.tape.reshape(t, &[c, grid, grid])
}

/// Attention rollout over blocks.
///
/// `layers[l]` holds block `l`'s per-head `T×T` attention. Each block's
/// head average gets the identity added and rows renormalized; blocks are
/// multiplied deepest-first. The anchor is the mean over all query tokens.
/// The result is min-max normalized to `[0, 1]`; a flat map becomes all zeros.
pub fn attention_rollout(layers: &[Vec<Tensor>], grid: usize) -> Result<Tensor> {
    let t = grid * grid;
    let mut rollout = Tensor::eye(t);
    for heads in layers {
        if heads.is_empty() {
            return Err(Error::InvalidArgument("block without attention heads".into()));
        }
        let mut a = Tensor::eye(t);
        for h in heads {
            if h.shape() != [t, t] {
                return Err(Error::dim(
                    "attention_rollout",
                    format!("head shape {:?}, expected [{t}, {t}]", h.shape()),
                ));
            }
            a.data_mut()
                .iter_mut()
                .zip(h.data())
                .for_each(|(x, y)| *x += y / heads.len() as f64);
        }
        for row in a.data_mut().chunks_exact_mut(t) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        rollout = a.matmul(&rollout)?;
    }
    let mut anchor = vec![0.0; t];
    for row in rollout.data().chunks_exact(t) {
        anchor.iter_mut().zip(row).for_each(|(a, r)| *a += r / t as f64);
    }
    Ok(normalize_unit(Tensor::new(&[grid, grid], anchor)?))
}

/// Min-max scaling to `[0, 1]`; constant input maps to zeros.
pub fn normalize_unit(mut t: Tensor) -> Tensor {
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = if span > 0.0 { (*v - lo) / span } else { 0.0 });
    t
}
