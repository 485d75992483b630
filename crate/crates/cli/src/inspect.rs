//! Inspection artifacts for one sample: attention maps, prediction
//! metadata and the per-word layer-affinity table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lawg_core::backbone::{attention_rollout, normalize_unit};
use lawg_core::config::TrainConfig;
use lawg_core::head::binarize;
use lawg_core::law;
use lawg_core::model;
use lawg_core::objectives::{box_iou, mask_iou};
use lawg_core::params::{Graph, ParamStore};
use lawg_core::tape::softmax_in_place;
use lawg_core::text::{self, TokenSequence, Vocabulary};
use lawg_core::{Error, Result, Tensor};
use synthground::GroundingSample;

use crate::data::prepare;
use crate::eval::run_length;

/// Accumulates per-word, per-layer aggregation weight.
#[derive(Clone, Debug, Default)]
pub struct AffinityTable {
    layers: usize,
    sums: BTreeMap<String, (Vec<f64>, usize)>,
}

impl AffinityTable {
    pub fn new(layers: usize) -> Self {
        AffinityTable {
            layers,
            sums: BTreeMap::new(),
        }
    }

    /// Adds one expression. `alphas[i]` is layer `i`'s `G×L` weight matrix.
    /// Each word's weight at layer `i` is the mean over groups; [CLS] and
    /// padding are skipped.
    pub fn add(&mut self, tokens: &TokenSequence, alphas: &[Tensor]) -> Result<()> {
        if alphas.len() != self.layers {
            return Err(Error::InvalidArgument(format!(
                "{} layers of weights, expected {}",
                alphas.len(),
                self.layers
            )));
        }
        for (j, word) in tokens.words.iter().enumerate() {
            let pos = j + 1;
            let entry = self
                .sums
                .entry(word.clone())
                .or_insert_with(|| (vec![0.0; self.layers], 0));
            for (i, a) in alphas.iter().enumerate() {
                let (groups, len) = a.dims2()?;
                if pos >= len {
                    return Err(Error::dim("affinity", format!("token {pos} beyond {len} weights")));
                }
                entry.0[i] += (0..groups).map(|g| a.at(&[g, pos])).sum::<f64>() / groups as f64;
            }
            entry.1 += 1;
        }
        Ok(())
    }

    /// `(word, occurrences, softmax over layers of the mean weight)`, sorted by word.
    pub fn rows(&self) -> Vec<(String, usize, Vec<f64>)> {
        self.sums
            .iter()
            .map(|(w, (s, n))| {
                let mut row: Vec<f64> = s.iter().map(|v| v / *n as f64).collect();
                softmax_in_place(&mut row);
                (w.clone(), *n, row)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("word,count");
        for i in 0..self.layers {
            let _ = write!(s, ",layer{i}");
        }
        s.push('\n');
        for (w, n, row) in self.rows() {
            let _ = write!(s, "{w},{n}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

pub const AFFINITY_DISABLED: &str =
    "# language-adaptive weights disabled: no per-layer aggregation weights exist\nword,count\n";

/// Per-layer aggregation weights for one expression, or `None` without the generator.
pub fn layer_alphas(params: &ParamStore, cfg: &TrainConfig, tokens: &TokenSequence) -> Result<Option<Vec<Tensor>>> {
    if !cfg.model.lawg {
        return Ok(None);
    }
    let mut g = Graph::eval(params);
    let feats = text::encode(&mut g, tokens, &cfg.model)?;
    let (_, traces) = law::generate_all(&mut g, Some((&feats, &tokens.mask)), &cfg.model)?;
    Ok(Some(traces.iter().map(|t| g.tape.value(t.alpha).clone()).collect()))
}

/// Affinity table over many expressions.
pub fn affinity_over<'a>(
    params: &ParamStore,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    samples: impl IntoIterator<Item = &'a GroundingSample>,
) -> Result<Option<AffinityTable>> {
    if !cfg.model.lawg {
        return Ok(None);
    }
    let mut table = AffinityTable::new(cfg.model.blocks);
    for s in samples {
        let tokens = text::tokenize(&s.record.expression, vocab, cfg.model.max_len)?;
        let alphas = layer_alphas(params, cfg, &tokens)?.expect("generator enabled");
        table.add(&tokens, &alphas)?;
    }
    Ok(Some(table))
}

/// 8-bit binary PGM of a map with values in `[0, 1]`.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = map.dims2()?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn map_csv(map: &Tensor) -> Result<String> {
    let (h, w) = map.dims2()?;
    let mut s = String::new();
    for r in 0..h {
        let row: Vec<String> = (0..w).map(|c| map.at(&[r, c]).to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    Ok(s)
}

/// Files written by [`inspect`].
#[derive(Clone, Debug)]
pub struct InspectOutput {
    pub files: Vec<PathBuf>,
}

fn write(out: &Path, name: &str, bytes: &[u8], files: &mut Vec<PathBuf>) -> Result<()> {
    let p = out.join(name);
    fs::write(&p, bytes).map_err(|e| Error::Io {
        path: p.display().to_string(),
        source: e,
    })?;
    files.push(p);
    Ok(())
}

pub fn inspect(
    params: &ParamStore,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    sample: &GroundingSample,
    out: &Path,
) -> Result<InspectOutput> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    let ex = prepare(sample, vocab, &cfg.model, false)?;
    let mut g = Graph::eval(params);
    let fw = model::forward(&mut g, &cfg.model, &ex.image, &ex.tokens)?;
    let grid = cfg.model.grid();
    let mut files = Vec::new();

    let layers: Vec<Vec<Tensor>> = fw
        .backbone
        .attention
        .iter()
        .map(|heads| heads.iter().map(|&h| g.tape.value(h).clone()).collect())
        .collect();
    let rollout = attention_rollout(&layers, grid)?;
    write(out, "rollout.pgm", &encode_pgm(&rollout)?, &mut files)?;
    write(out, "rollout.csv", map_csv(&rollout)?.as_bytes(), &mut files)?;

    if let Some(a) = fw.lap_attention {
        let map = normalize_unit(g.tape.value(a).clone().reshaped(&[grid, grid])?);
        write(out, "lap.pgm", &encode_pgm(&map)?, &mut files)?;
        write(out, "lap.csv", map_csv(&map)?.as_bytes(), &mut files)?;
    }

    let b = g.tape.value(fw.pred_box).data();
    let bbox = [b[0], b[1], b[2], b[3]];
    let mut meta = serde_json::json!({
        "id": sample.record.id,
        "expression": sample.record.expression,
        "box": bbox,
        "gt_box": sample.record.bbox,
        "box_iou": box_iou(&bbox, &sample.record.bbox),
    });
    if let Some(m) = fw.mask {
        let probs = g.tape.value(m.probs).data();
        let bin = binarize(probs, cfg.threshold)?;
        meta["mask_rle"] = serde_json::json!(run_length(&bin));
        meta["mask_iou"] = serde_json::json!(mask_iou(&bin, &sample.mask)?);
        meta["mask_threshold"] = serde_json::json!(cfg.threshold);
        meta["mask_size"] = serde_json::json!([cfg.model.image_size, cfg.model.image_size]);
    }
    write(out, "prediction.json", (meta.to_string() + "\n").as_bytes(), &mut files)?;

    let csv = if cfg.model.lawg {
        let mut table = AffinityTable::new(cfg.model.blocks);
        let alphas: Vec<Tensor> = fw.traces.iter().map(|t| g.tape.value(t.alpha).clone()).collect();
        table.add(&ex.tokens, &alphas)?;
        table.to_csv()
    } else {
        AFFINITY_DISABLED.to_string()
    };
    write(out, "affinity.csv", csv.as_bytes(), &mut files)?;
    Ok(InspectOutput { files })
}
