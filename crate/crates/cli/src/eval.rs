//! Evaluation: Prec@0.5, mIoU and a Prec@0.5 table by expression length.

use std::fmt::Write as _;

use lawg_core::config::{Mode, TrainConfig};
use lawg_core::head::binarize;
use lawg_core::model::{self, Prediction};
use lawg_core::objectives::{box_iou, mask_iou};
use lawg_core::params::ParamStore;
use lawg_core::text::Vocabulary;
use lawg_core::Result;
use rayon::prelude::*;
use serde::Serialize;
use synthground::GroundingSample;

use crate::data::prepare;

/// Expression-length buckets, in words.
pub const BUCKETS: [(&str, usize, usize); 4] = [("1-5", 1, 5), ("6-7", 6, 7), ("8-10", 8, 10), ("11+", 11, usize::MAX)];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleResult {
    pub id: String,
    pub words: usize,
    pub relational: bool,
    pub bbox: Option<[f64; 4]>,
    pub box_iou: Option<f64>,
    /// Binarized mask, row-major run lengths starting with background.
    pub mask_rle: Option<Vec<usize>>,
    pub mask_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketRow {
    pub bucket: String,
    pub count: usize,
    pub prec50: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub count: usize,
    pub prec50: Option<f64>,
    pub miou: Option<f64>,
    /// Prec@0.5 restricted to relational expressions.
    pub prec50_relational: Option<f64>,
    pub buckets: Vec<BucketRow>,
    #[serde(skip)]
    pub samples: Vec<SampleResult>,
}

pub fn run_length(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &m in mask {
        if m != current {
            runs.push(len);
            current = m;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs
}

pub fn decode_run_length(runs: &[usize]) -> Vec<bool> {
    let mut out = Vec::new();
    for (i, &n) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, n));
    }
    out
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn hit(iou: f64) -> f64 {
    if iou > 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Scores predictions from any predictor. `mode` decides which metrics exist.
pub fn evaluate_with<F>(
    samples: &[&GroundingSample],
    mode: Mode,
    threshold: f64,
    split: &str,
    predict: F,
) -> Result<EvalReport>
where
    F: Fn(&GroundingSample) -> Result<Prediction> + Sync,
{
    let results: Vec<SampleResult> = samples
        .par_iter()
        .map(|s| {
            let p = predict(s)?;
            let (bbox, biou) = if mode.has_box() {
                (Some(p.bbox), Some(box_iou(&p.bbox, &s.record.bbox)))
            } else {
                (None, None)
            };
            let (rle, miou) = if mode.has_mask() {
                let m = binarize(&p.mask, threshold)?;
                let iou = mask_iou(&m, &s.mask)?;
                (Some(run_length(&m)), Some(iou))
            } else {
                (None, None)
            };
            Ok(SampleResult {
                id: s.record.id.clone(),
                words: s.word_count(),
                relational: s.record.template.is_relational(),
                bbox,
                box_iou: biou,
                mask_rle: rle,
                mask_iou: miou,
            })
        })
        .collect::<Result<_>>()?;
    let prec = |f: &dyn Fn(&SampleResult) -> bool| {
        if mode.has_box() {
            mean(results.iter().filter(|r| f(r)).filter_map(|r| r.box_iou).map(hit))
        } else {
            None
        }
    };
    let buckets = BUCKETS
        .iter()
        .map(|&(name, lo, hi)| BucketRow {
            bucket: name.to_string(),
            count: results.iter().filter(|r| (lo..=hi).contains(&r.words)).count(),
            prec50: prec(&|r: &SampleResult| (lo..=hi).contains(&r.words)),
        })
        .collect();
    Ok(EvalReport {
        split: split.to_string(),
        count: results.len(),
        prec50: prec(&|_| true),
        miou: mean(results.iter().filter_map(|r| r.mask_iou)),
        prec50_relational: prec(&|r: &SampleResult| r.relational),
        buckets,
        samples: results,
    })
}

/// Evaluates trained parameters on `samples`.
pub fn evaluate(
    params: &ParamStore,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    samples: &[&GroundingSample],
    split: &str,
) -> Result<EvalReport> {
    evaluate_with(samples, cfg.mode, cfg.threshold, split, |s| {
        let ex = prepare(s, vocab, &cfg.model, false)?;
        model::predict(params, &cfg.model, &ex.image, &ex.tokens)
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl EvalReport {
    /// Plain-text summary including the length table.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split {} | samples {}", self.split, self.count);
        if let Some(p) = self.prec50 {
            let _ = writeln!(s, "Prec@0.5 {p:.4} (relational {})", opt(self.prec50_relational));
        }
        if let Some(m) = self.miou {
            let _ = writeln!(s, "mIoU     {m:.4}");
        }
        if self.prec50.is_some() {
            let _ = writeln!(s, "length   count  Prec@0.5");
            for b in &self.buckets {
                let _ = writeln!(s, "{:<8} {:>5}  {}", b.bucket, b.count, opt(b.prec50));
            }
        }
        s
    }

    /// One JSON object per sample, newline-terminated.
    pub fn predictions_jsonl(&self) -> String {
        self.samples
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect()
    }
}
