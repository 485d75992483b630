//! Full grounding model: text encoder → weight generator → backbone → heads.

use crate::backbone::{self, BackboneOutput};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::head::{self, MaskOutput};
use crate::law::{self, GeneratedLayerWeights, LayerTrace};
use crate::params::{Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::text::{self, LinguisticFeatures, TokenSequence};

/// Allocates every parameter the configuration uses, and nothing else.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    text::init_params(&mut store, seed, cfg);
    if cfg.lawg {
        law::init_params(&mut store, seed, cfg);
    }
    backbone::init_params(&mut store, seed, cfg);
    head::init_params(&mut store, seed, cfg);
    Ok(store)
}

/// Every intermediate a caller may want after one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub text: LinguisticFeatures,
    pub weights: Vec<GeneratedLayerWeights>,
    pub traces: Vec<LayerTrace>,
    pub backbone: BackboneOutput,
    pub fmap: Var,
    pub pooled: Var,
    /// `1×T` pooling attention, present when pooling is language-adaptive.
    pub lap_attention: Option<Var>,
    pub pred_box: Var,
    pub mask: Option<MaskOutput>,
}

pub fn forward(g: &mut Graph, cfg: &ModelConfig, image: &Tensor, tokens: &TokenSequence) -> Result<Forward> {
    let feats = text::encode(g, tokens, cfg)?;
    let (weights, traces) = law::generate_all(g, Some((&feats, &tokens.mask)), cfg)?;
    let bb = backbone::forward_backbone(g, image, &weights, cfg)?;
    let fmap = backbone::feature_map(g, bb.tokens, cfg.grid())?;
    let (pooled, lap_attention) = if cfg.lap {
        let (p, a) = head::lap_pool(g, bb.tokens, feats.cls)?;
        (p, Some(a))
    } else {
        (head::average_pool(g, bb.tokens)?, None)
    };
    let pred_box = head::predict_box(g, pooled)?;
    let mask = if cfg.mth {
        Some(head::predict_mask(g, fmap, feats.cls, cfg)?)
    } else {
        None
    };
    Ok(Forward {
        text: feats,
        weights,
        traces,
        backbone: bb,
        fmap,
        pooled,
        lap_attention,
        pred_box,
        mask,
    })
}

/// Plain-value prediction for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub bbox: [f64; 4],
    /// Full-resolution probabilities, row-major; empty without the mask head.
    pub mask: Vec<f64>,
}

pub fn predict(store: &ParamStore, cfg: &ModelConfig, image: &Tensor, tokens: &TokenSequence) -> Result<Prediction> {
    let mut g = Graph::eval(store);
    let out = forward(&mut g, cfg, image, tokens)?;
    let b = g.tape.value(out.pred_box).data();
    let mask = out
        .mask
        .map(|m| g.tape.value(m.probs).data().to_vec())
        .unwrap_or_default();
    Ok(Prediction {
        bbox: [b[0], b[1], b[2], b[3]],
        mask,
    })
}
