//! Language-adaptive weight generation.
//!
//! For each visual block `i`, token features are aggregated group-wise with a
//! learned layer embedding `e_i`, reduced to `h1 = gelu(W1_i h0)`, and mapped
//! to a fused QKV matrix
//!
//! ```text
//! W_i = W0_i + P · reshape(Phi_i(h1), d_w × d_w) · Qᵀ
//! ```
//!
//! with `P` and `Q` shared by every block and `Phi_i` zero-initialized.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Graph, ParamStore};
use crate::tape::Var;
use crate::text::LinguisticFeatures;

/// Fused QKV projection (`d_out×d_in`) and its static bias for one block.
#[derive(Clone, Copy, Debug)]
pub struct GeneratedLayerWeights {
    pub w: Var,
    pub bias: Var,
}

impl GeneratedLayerWeights {
    /// Query, key and value row blocks, each `d_model×d_in`.
    pub fn views(&self, g: &mut Graph, d_model: usize) -> Result<[Var; 3]> {
        Ok([
            g.tape.slice_rows(self.w, 0, d_model)?,
            g.tape.slice_rows(self.w, d_model, d_model)?,
            g.tape.slice_rows(self.w, 2 * d_model, d_model)?,
        ])
    }
}

/// Per-layer intermediates kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    /// `G×L` aggregation weights.
    pub alpha: Var,
    pub h0: Var,
    pub h1: Var,
}

pub fn init_params(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) {
    let (d_l, d_h, d_w) = (cfg.d_l, cfg.d_h(), cfg.rank_dw);
    for i in 0..cfg.blocks {
        store.normal(
            seed,
            &format!("law.l{i}.e"),
            &[d_l],
            1.0 / (d_l as f64 / cfg.groups as f64).sqrt(),
        );
        store.normal(seed, &format!("law.l{i}.w1"), &[d_h, d_l], 1.0 / (d_l as f64).sqrt());
        store.zeros(&format!("law.l{i}.phi.w"), &[d_w * d_w, d_h]);
        store.zeros(&format!("law.l{i}.phi.b"), &[d_w * d_w]);
    }
    let std_pq = 1.0 / (cfg.d_model as f64).sqrt();
    store.normal(seed, "law.p", &[cfg.d_out(), d_w], std_pq);
    store.normal(seed, "law.q", &[cfg.d_in(), d_w], std_pq);
}

/// Number of parameters the generator adds on top of a static backbone.
pub fn count_dynamic_params(cfg: &ModelConfig) -> usize {
    let (d_l, d_h, d_w) = (cfg.d_l, cfg.d_h(), cfg.rank_dw);
    cfg.blocks * (d_l + d_h * d_l + d_h * d_w * d_w + d_w * d_w) + d_w * (cfg.d_in() + cfg.d_out())
}

/// Group-wise attention pooling of token features.
///
/// Returns `h0` (`1×d_l`) and `alpha` (`G×L`); masked tokens get weight 0.
pub fn aggregate(g: &mut Graph, f: Var, mask: &[bool], e: Var, groups: usize) -> Result<(Var, Var)> {
    let (l, d_l) = g.tape.value(f).dims2()?;
    if mask.len() != l {
        return Err(Error::dim(
            "aggregate",
            format!("mask length {} vs {l} tokens", mask.len()),
        ));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("every token is masked".into()));
    }
    if groups == 0 || d_l % groups != 0 {
        return Err(Error::dim(
            "aggregate",
            format!("{groups} groups do not divide d_l {d_l}"),
        ));
    }
    if g.tape.value(e).numel() != d_l {
        return Err(Error::dim(
            "aggregate",
            format!(
                "layer embedding has {} entries, expected {d_l}",
                g.tape.value(e).numel()
            ),
        ));
    }
    let e = g.tape.reshape(e, &[1, d_l])?;
    let bias = g.constant(nn::key_mask_bias(mask));
    let s = d_l / groups;
    let mut h0 = Vec::with_capacity(groups);
    let mut alphas = Vec::with_capacity(groups);
    for grp in 0..groups {
        let (fg, eg) = if groups == 1 {
            (f, e)
        } else {
            (g.tape.slice_cols(f, grp * s, s)?, g.tape.slice_cols(e, grp * s, s)?)
        };
        let logits = g.tape.matmul_nt(eg, fg)?;
        let logits = g.tape.add(logits, bias)?;
        let a = g.tape.softmax_rows(logits)?;
        h0.push(g.tape.matmul(a, fg)?);
        alphas.push(a);
    }
    let (h0, alpha) = if groups == 1 {
        (h0[0], alphas[0])
    } else {
        (g.tape.concat_cols(&h0)?, g.tape.concat_rows(&alphas)?)
    };
    Ok((h0, alpha))
}

/// `h1 = gelu(W1 h0)`, no bias.
pub fn reduce(g: &mut Graph, h0: Var, w1: Var) -> Result<Var> {
    let z = g.tape.matmul_nt(h0, w1)?;
    g.tape.gelu(z)
}

/// `W0 + P · reshape(Phi(h1)) · Qᵀ` with the row-major `d_w×d_w` reshape.
pub fn generate_weights(g: &mut Graph, h1: Var, w0: Var, p: Var, q: Var, phi_w: Var, phi_b: Var) -> Result<Var> {
    let d_w = g.tape.value(p).dims2()?.1;
    if g.tape.value(q).dims2()?.1 != d_w {
        return Err(Error::dim(
            "generate_weights",
            format!("P is {:?} but Q is {:?}", g.tape.shape(p), g.tape.shape(q)),
        ));
    }
    if g.tape.value(phi_w).dims2()?.0 != d_w * d_w {
        return Err(Error::dim(
            "generate_weights",
            format!(
                "Phi produces {} values, expected d_w² = {}",
                g.tape.shape(phi_w)[0],
                d_w * d_w
            ),
        ));
    }
    let m = g.tape.linear(h1, phi_w, Some(phi_b))?;
    let m = g.tape.reshape(m, &[d_w, d_w])?;
    let pm = g.tape.matmul(p, m)?;
    let delta = g.tape.matmul_nt(pm, q)?;
    g.tape.add(w0, delta)
}

/// Fused QKV weights for every visual block. Without the generator the
/// static `W0_i` are returned and `traces` is empty.
pub fn generate_all(
    g: &mut Graph,
    text: Option<(&LinguisticFeatures, &[bool])>,
    cfg: &ModelConfig,
) -> Result<(Vec<GeneratedLayerWeights>, Vec<LayerTrace>)> {
    let mut weights = Vec::with_capacity(cfg.blocks);
    let mut traces = Vec::new();
    for i in 0..cfg.blocks {
        let w0 = g.p(&format!("vit.b{i}.w0"))?;
        let bias = g.p(&format!("vit.b{i}.qkv_b"))?;
        let w = match (cfg.lawg, text) {
            (true, Some((feats, mask))) => {
                let e = g.p(&format!("law.l{i}.e"))?;
                let (h0, alpha) = aggregate(g, feats.f, mask, e, cfg.groups)?;
                let w1 = g.p(&format!("law.l{i}.w1"))?;
                let h1 = reduce(g, h0, w1)?;
                let p = g.p("law.p")?;
                let q = g.p("law.q")?;
                let phi_w = g.p(&format!("law.l{i}.phi.w"))?;
                let phi_b = g.p(&format!("law.l{i}.phi.b"))?;
                traces.push(LayerTrace { alpha, h0, h1 });
                generate_weights(g, h1, w0, p, q, phi_w, phi_b)?
            }
            (true, None) => return Err(Error::InvalidArgument("weight generation needs text features".into())),
            (false, _) => w0,
        };
        weights.push(GeneratedLayerWeights { w, bias });
    }
    Ok((weights, traces))
}
