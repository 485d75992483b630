//! Model and training configuration, read from flat `key = value` text.
//!
//! Lines are `dotted.key = value`; `#` starts a comment. Unknown keys are
//! errors so typos never silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Rec,
    Res,
    Multitask,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Rec => "rec",
            Mode::Res => "res",
            Mode::Multitask => "multitask",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rec" => Ok(Mode::Rec),
            "res" => Ok(Mode::Res),
            "multitask" => Ok(Mode::Multitask),
            other => Err(Error::Config(format!("unknown mode {other:?} (rec | res | multitask)"))),
        }
    }

    pub fn has_box(self) -> bool {
        self != Mode::Res
    }

    pub fn has_mask(self) -> bool {
        self != Mode::Rec
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub d_l: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub text_final_norm: bool,
    pub groups: usize,
    pub rank_dw: usize,
    pub reduction_r: usize,
    pub lap_k: usize,
    pub lawg: bool,
    pub lap: bool,
    pub mth: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 8,
            d_model: 64,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            d_l: 64,
            text_layers: 2,
            text_heads: 4,
            max_len: 40,
            vocab_size: 64,
            text_final_norm: true,
            groups: 4,
            rank_dw: 8,
            reduction_r: 16,
            lap_k: 32,
            lawg: true,
            lap: true,
            mth: true,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn d_h(&self) -> usize {
        self.d_l / self.reduction_r
    }

    pub fn d_in(&self) -> usize {
        self.d_model
    }

    pub fn d_out(&self) -> usize {
        3 * self.d_model
    }

    /// Number of factor-2 transposed-convolution stages from patch stride to stride 4.
    pub fn upsample_stages(&self) -> Result<usize> {
        let mut s = self.patch;
        let mut n = 0;
        while s > 4 && s.is_multiple_of(2) {
            s /= 2;
            n += 1;
        }
        if s != 4 {
            return Err(Error::Config(format!(
                "patch stride {} is not reducible to 4 by factor-2 stages",
                self.patch
            )));
        }
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        check(
            self.patch > 0 && self.image_size.is_multiple_of(self.patch),
            format!("image size {} not divisible by patch {}", self.image_size, self.patch),
        )?;
        check(
            self.heads > 0 && self.d_model.is_multiple_of(self.heads),
            format!("visual heads {} do not divide d_model {}", self.heads, self.d_model),
        )?;
        check(
            self.text_heads > 0 && self.d_l.is_multiple_of(self.text_heads),
            format!("text heads {} do not divide d_l {}", self.text_heads, self.d_l),
        )?;
        check(
            self.groups > 0 && self.d_l.is_multiple_of(self.groups),
            format!("groups {} do not divide d_l {}", self.groups, self.d_l),
        )?;
        check(
            self.reduction_r > 0 && self.d_l.is_multiple_of(self.reduction_r) && self.d_h() >= 1,
            format!(
                "reduction ratio {} must divide d_l {} exactly",
                self.reduction_r, self.d_l
            ),
        )?;
        check(self.rank_dw >= 1, "law.rank_dw must be >= 1".into())?;
        check(self.lap_k >= 1, "head.lap_k must be >= 1".into())?;
        check(
            self.blocks >= 1 && self.text_layers >= 1,
            "need at least one block and one text layer".into(),
        )?;
        check(self.max_len >= 1, "text.max_len must be >= 1".into())?;
        check(self.mlp_ratio >= 1, "model.mlp_ratio must be >= 1".into())?;
        check(self.vocab_size >= 4, "vocabulary too small".into())?;
        if self.mth {
            let stages = self.upsample_stages()?;
            check(
                stages > 0 || self.d_model == self.d_l,
                format!(
                    "patch 4 has no upsampling stage, so d_model ({}) must equal d_l ({})",
                    self.d_model, self.d_l
                ),
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub focal: f64,
    pub dice: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            giou: 1.0,
            focal: 4.0,
            dice: 4.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data: PathBuf,
    pub model: ModelConfig,
    pub mode: Mode,
    pub loss: LossWeights,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub decay_step: usize,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub flip: bool,
    pub eval_every: usize,
    /// Cap on validation samples per periodic evaluation (0 = all).
    pub eval_limit: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: PathBuf::from("data"),
            model: ModelConfig::default(),
            mode: Mode::Multitask,
            loss: LossWeights::default(),
            steps: 3000,
            batch: 16,
            seed: 0,
            lr_backbone: 4e-5,
            lr_head: 4e-4,
            weight_decay: 1e-4,
            decay_step: 2000,
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            flip: true,
            eval_every: 500,
            eval_limit: 0,
            threshold: 0.35,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

/// Parses `key = value` lines into an ordered map, rejecting duplicates.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(out)
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "data.path" => self.data = PathBuf::from(v),
            "model.image_size" => m.image_size = parse_value(key, v)?,
            "model.patch" => m.patch = parse_value(key, v)?,
            "model.d_model" => m.d_model = parse_value(key, v)?,
            "model.blocks" => m.blocks = parse_value(key, v)?,
            "model.heads" => m.heads = parse_value(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse_value(key, v)?,
            "model.ln_eps" => m.ln_eps = parse_value(key, v)?,
            "text.d_l" => m.d_l = parse_value(key, v)?,
            "text.layers" => m.text_layers = parse_value(key, v)?,
            "text.heads" => m.text_heads = parse_value(key, v)?,
            "text.max_len" => m.max_len = parse_value(key, v)?,
            "text.final_norm" => m.text_final_norm = parse_bool(key, v)?,
            "law.groups" => m.groups = parse_value(key, v)?,
            "law.rank_dw" => m.rank_dw = parse_value(key, v)?,
            "law.reduction_r" => m.reduction_r = parse_value(key, v)?,
            "head.lap_k" => m.lap_k = parse_value(key, v)?,
            "ablation.lawg" => m.lawg = parse_bool(key, v)?,
            "ablation.lap" => m.lap = parse_bool(key, v)?,
            "ablation.mth" => m.mth = parse_bool(key, v)?,
            "train.mode" => self.mode = Mode::parse(v)?,
            "train.steps" => self.steps = parse_value(key, v)?,
            "train.batch" => self.batch = parse_value(key, v)?,
            "train.seed" => self.seed = parse_value(key, v)?,
            "train.lr_backbone" => self.lr_backbone = parse_value(key, v)?,
            "train.lr_head" => self.lr_head = parse_value(key, v)?,
            "train.weight_decay" => self.weight_decay = parse_value(key, v)?,
            "train.decay_step" => self.decay_step = parse_value(key, v)?,
            "train.decay_factor" => self.decay_factor = parse_value(key, v)?,
            "train.beta1" => self.beta1 = parse_value(key, v)?,
            "train.beta2" => self.beta2 = parse_value(key, v)?,
            "train.adam_eps" => self.adam_eps = parse_value(key, v)?,
            "train.flip" => self.flip = parse_bool(key, v)?,
            "train.eval_every" => self.eval_every = parse_value(key, v)?,
            "train.eval_limit" => self.eval_limit = parse_value(key, v)?,
            "eval.threshold" => self.threshold = parse_value(key, v)?,
            "loss.l1" => self.loss.l1 = parse_value(key, v)?,
            "loss.giou" => self.loss.giou = parse_value(key, v)?,
            "loss.focal" => self.loss.focal = parse_value(key, v)?,
            "loss.dice" => self.loss.dice = parse_value(key, v)?,
            "loss.focal_alpha" => self.loss.focal_alpha = parse_value(key, v)?,
            "loss.focal_gamma" => self.loss.focal_gamma = parse_value(key, v)?,
            // Derived from the dataset vocabulary; accepted so echoed configs re-parse.
            "text.vocab_size" => m.vocab_size = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Applies the ablation implications: without the mask head only boxes are trained.
    pub fn normalize(&mut self) {
        if !self.model.mth {
            self.mode = Mode::Rec;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.mode.has_mask() && !self.model.mth {
            return Err(Error::Config("mask modes need ablation.mth = true".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "eval.threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        let l = &self.loss;
        if [l.l1, l.giou, l.focal, l.dice, l.focal_alpha, l.focal_gamma]
            .iter()
            .any(|w| w.is_nan() || *w < 0.0)
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Canonical text form; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let l = &self.loss;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("data.path", self.data.display().to_string());
        kv("model.image_size", m.image_size.to_string());
        kv("model.patch", m.patch.to_string());
        kv("model.d_model", m.d_model.to_string());
        kv("model.blocks", m.blocks.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.mlp_ratio", m.mlp_ratio.to_string());
        kv("model.ln_eps", format!("{:e}", m.ln_eps));
        kv("text.d_l", m.d_l.to_string());
        kv("text.layers", m.text_layers.to_string());
        kv("text.heads", m.text_heads.to_string());
        kv("text.max_len", m.max_len.to_string());
        kv("text.final_norm", m.text_final_norm.to_string());
        kv("text.vocab_size", m.vocab_size.to_string());
        kv("law.groups", m.groups.to_string());
        kv("law.rank_dw", m.rank_dw.to_string());
        kv("law.reduction_r", m.reduction_r.to_string());
        kv("head.lap_k", m.lap_k.to_string());
        kv("ablation.lawg", m.lawg.to_string());
        kv("ablation.lap", m.lap.to_string());
        kv("ablation.mth", m.mth.to_string());
        kv("train.mode", self.mode.name().to_string());
        kv("train.steps", self.steps.to_string());
        kv("train.batch", self.batch.to_string());
        kv("train.seed", self.seed.to_string());
        kv("train.lr_backbone", format!("{:e}", self.lr_backbone));
        kv("train.lr_head", format!("{:e}", self.lr_head));
        kv("train.weight_decay", format!("{:e}", self.weight_decay));
        kv("train.decay_step", self.decay_step.to_string());
        kv("train.decay_factor", format!("{:e}", self.decay_factor));
        kv("train.beta1", format!("{:e}", self.beta1));
        kv("train.beta2", format!("{:e}", self.beta2));
        kv("train.adam_eps", format!("{:e}", self.adam_eps));
        kv("train.flip", self.flip.to_string());
        kv("train.eval_every", self.eval_every.to_string());
        kv("train.eval_limit", self.eval_limit.to_string());
        kv("eval.threshold", format!("{:e}", self.threshold));
        kv("loss.l1", format!("{:e}", l.l1));
        kv("loss.giou", format!("{:e}", l.giou));
        kv("loss.focal", format!("{:e}", l.focal));
        kv("loss.dice", format!("{:e}", l.dice));
        kv("loss.focal_alpha", format!("{:e}", l.focal_alpha));
        kv("loss.focal_gamma", format!("{:e}", l.focal_gamma));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_constants() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.loss.l1, c.loss.giou, c.loss.focal, c.loss.dice),
            (1.0, 1.0, 4.0, 4.0)
        );
        assert_eq!(c.model.reduction_r, 16);
        assert_eq!(c.model.max_len, 40);
        assert_eq!(c.threshold, 0.35);
        assert_eq!((c.lr_backbone, c.lr_head, c.weight_decay), (4e-5, 4e-4, 1e-4));
        assert_eq!(c.decay_step * 3, c.steps * 2);
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.model.d_model = 32;
        c.model.lap = false;
        c.lr_head = 1.5e-3;
        c.mode = Mode::Rec;
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        assert!(matches!(
            TrainConfig::from_text("model.dmodel = 3"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::from_text("train.steps=1\ntrain.steps=2"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::from_text("law.groups = 5"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mth_off_forces_rec() {
        let c = TrainConfig::from_text("ablation.mth = false\ntrain.mode = multitask").unwrap();
        assert_eq!(c.mode, Mode::Rec);
    }

    #[test]
    fn upsample_stage_count() {
        let mut m = ModelConfig::default();
        assert_eq!(m.upsample_stages().unwrap(), 1);
        m.patch = 16;
        assert_eq!(m.upsample_stages().unwrap(), 2);
        m.patch = 6;
        assert!(m.upsample_stages().is_err());
    }
}
