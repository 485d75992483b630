//! Box branch (language-adaptive pooling + MLP) and mask branch
//! (upsampler + projection onto the [CLS] feature).

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.35;

pub fn init_params(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) {
    let (c, k) = (cfg.d_model, cfg.lap_k);
    if cfg.lap {
        // Each projection gets an extra k^(-1/4) so the k-term similarity
        // starts with unit variance instead of variance k.
        let shrink = (k as f64).powf(-0.25);
        nn::init_linear(store, seed, "head.lap.v", k, c, shrink / (c as f64).sqrt());
        nn::init_linear(store, seed, "head.lap.l", k, cfg.d_l, shrink / (cfg.d_l as f64).sqrt());
    }
    let fan = 1.0 / (c as f64).sqrt();
    nn::init_linear(store, seed, "head.box.fc1", c, c, fan);
    nn::init_linear(store, seed, "head.box.fc2", c, c, fan);
    nn::init_linear(store, seed, "head.box.fc3", 4, c, fan);
    if cfg.mth {
        let stages = cfg.upsample_stages().unwrap_or(0);
        for s in 0..stages {
            let c_out = if s + 1 == stages { cfg.d_l } else { c };
            store.normal(
                seed,
                &format!("head.up{s}.k"),
                &[c, c_out, 2, 2],
                1.0 / (c as f64).sqrt(),
            );
            store.zeros(&format!("head.up{s}.b"), &[c_out]);
        }
    }
}

/// Language-adaptive pooling over `T×C` tokens. Returns the pooled `1×C`
/// feature and the `1×T` attention over plain dot-product similarities.
pub fn lap_pool(g: &mut Graph, tokens: Var, cls: Var) -> Result<(Var, Var)> {
    let pv = nn::linear(g, tokens, "head.lap.v")?;
    let pl = nn::linear(g, cls, "head.lap.l")?;
    let logits = g.tape.matmul_nt(pl, pv)?;
    let a = g.tape.softmax_rows(logits)?;
    Ok((g.tape.matmul(a, tokens)?, a))
}

/// Global average pooling of `T×C` tokens, used when pooling is not language-adaptive.
pub fn average_pool(g: &mut Graph, tokens: Var) -> Result<Var> {
    let t = g.tape.shape(tokens)[0];
    let w = g.constant(Tensor::full(&[1, t], 1.0 / t as f64));
    g.tape.matmul(w, tokens)
}

/// Three affine layers with GeLU between, then sigmoid: `(cx, cy, w, h)`.
pub fn predict_box(g: &mut Graph, pooled: Var) -> Result<Var> {
    let h = nn::linear(g, pooled, "head.box.fc1")?;
    let h = g.tape.gelu(h)?;
    let h = nn::linear(g, h, "head.box.fc2")?;
    let h = g.tape.gelu(h)?;
    let z = nn::linear(g, h, "head.box.fc3")?;
    g.tape.sigmoid(z)
}

#[derive(Clone, Copy, Debug)]
pub struct MaskOutput {
    /// Stride-4 map `s̄` (`H/4 × W/4`).
    pub coarse: Var,
    /// Full-resolution logits before the sigmoid.
    pub logits: Var,
    /// Probabilities `ŝ`.
    pub probs: Var,
}

/// Upsamples the `C×h×w` feature map to stride 4 with `d_l` channels.
pub fn upsample_features(g: &mut Graph, fmap: Var, cfg: &ModelConfig) -> Result<Var> {
    let stages = cfg.upsample_stages()?;
    let mut x = fmap;
    for s in 0..stages {
        let k = g.p(&format!("head.up{s}.k"))?;
        let b = g.p(&format!("head.up{s}.b"))?;
        x = g.tape.transposed_conv2x(x, k, b)?;
        if s + 1 < stages {
            x = g.tape.gelu(x)?;
        }
    }
    Ok(x)
}

/// Projects stride-4 features (`d_l×h4×w4`) onto the [CLS] feature, then
/// upsamples by 4 and applies the sigmoid.
pub fn project_mask(g: &mut Graph, upsampled: Var, cls: Var) -> Result<MaskOutput> {
    let (c, h4, w4) = match g.tape.shape(upsampled) {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::dim("predict_mask", format!("features must be c×h×w, got {s:?}"))),
    };
    if g.tape.value(cls).numel() != c {
        return Err(Error::dim(
            "predict_mask",
            format!("[CLS] has {} channels, features have {c}", g.tape.value(cls).numel()),
        ));
    }
    let flat = g.tape.reshape(upsampled, &[c, h4 * w4])?;
    let cls = g.tape.reshape(cls, &[1, c])?;
    let s = g.tape.matmul(cls, flat)?;
    let coarse = g.tape.reshape(s, &[h4, w4])?;
    let logits = g.tape.bilinear_upsample(coarse, 4)?;
    let probs = g.tape.sigmoid(logits)?;
    Ok(MaskOutput { coarse, logits, probs })
}

pub fn predict_mask(g: &mut Graph, fmap: Var, cls: Var, cfg: &ModelConfig) -> Result<MaskOutput> {
    let up = upsample_features(g, fmap, cfg)?;
    project_mask(g, up, cls)
}

/// Pixel is foreground iff its probability is at least `threshold`.
pub fn binarize(probs: &[f64], threshold: f64) -> Result<Vec<bool>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(probs.iter().map(|&p| p >= threshold).collect())
}
