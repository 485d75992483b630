//! Training loop with periodic validation, best-checkpoint retention and
//! bit-reproducible data order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lawg_core::config::TrainConfig;
use lawg_core::model;
use lawg_core::objectives::{total_loss, LossBreakdown, LossInputs};
use lawg_core::optim::{AdamW, AdamWConfig};
use lawg_core::params::{Graph, ParamStore};
use lawg_core::text::Vocabulary;
use lawg_core::{Error, Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use synthground::{Dataset, GroundingSample, Split};

use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{prepare, Example};
use crate::eval::{evaluate, EvalReport};

const DATA_STREAM: u64 = 1;
const AUG_STREAM: u64 = 2;

pub const METRICS_HEADER: &str = "step,split,prec50,miou,loss,l1,giou,focal,dice";

/// Parameter groups: the encoders and static backbone weights step with
/// the backbone rate, everything else with the head rate.
pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("text.") || name.starts_with("vit.")
}

pub fn learning_rate(cfg: &TrainConfig, name: &str, step: u64) -> f64 {
    let base = if is_backbone_param(name) {
        cfg.lr_backbone
    } else {
        cfg.lr_head
    };
    if step >= cfg.decay_step as u64 {
        base * cfg.decay_factor
    } else {
        base
    }
}

/// Loads the dataset and fills in the vocabulary size; the image size
/// must match the configuration.
pub fn load_data(cfg: &mut TrainConfig) -> Result<(Dataset, Vocabulary)> {
    let ds = synthground::load_dataset(&cfg.data)?;
    let vocab = Vocabulary::from_words(&ds.vocab)?;
    cfg.model.vocab_size = vocab.len();
    if let Some(s) = ds.samples.first() {
        if s.resolution() != cfg.model.image_size {
            return Err(Error::Config(format!(
                "dataset images are {}px but model.image_size is {}",
                s.resolution(),
                cfg.model.image_size
            )));
        }
    }
    cfg.validate()?;
    Ok((ds, vocab))
}

/// Sample indices and flip decisions for one step. Batches walk through a
/// fresh permutation per epoch, seeded only by the run seed and epoch.
pub struct BatchPlan {
    n: usize,
    seed: u64,
}

impl BatchPlan {
    pub fn new(n: usize, seed: u64) -> Self {
        BatchPlan { n, seed }
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(DATA_STREAM);
        rng.set_word_pos(epoch as u128 * (1 << 40));
        let mut p: Vec<usize> = (0..self.n).collect();
        p.shuffle(&mut rng);
        p
    }

    pub fn indices(&self, step: u64, batch: usize) -> Vec<usize> {
        let start = step as usize * batch;
        let mut out = Vec::with_capacity(batch);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for k in start..start + batch {
            let epoch = k / self.n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.permutation(epoch as u64)));
            }
            out.push(cached.as_ref().expect("cached").1[k % self.n]);
        }
        out
    }
}

/// FNV-1a over sample ids and flip bits of one batch.
pub fn batch_hash(ids: &[&str], flips: &[bool]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (id, &f) in ids.iter().zip(flips) {
        for b in id.bytes().chain([f as u8, 0xff]) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

fn aug_rng(state: &RngState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos);
    rng
}

/// Gradients of one example's loss.
pub fn example_grads(
    params: &ParamStore,
    cfg: &TrainConfig,
    ex: &Example,
) -> Result<(BTreeMap<String, Tensor>, LossBreakdown)> {
    let mut g = Graph::train(params);
    let out = model::forward(&mut g, &cfg.model, &ex.image, &ex.tokens)?;
    let inputs = LossInputs {
        pred_box: Some(out.pred_box),
        gt_box: ex.gt_box,
        mask_logits: out.mask.map(|m| m.logits),
        gt_mask: &ex.gt_mask,
    };
    let (loss, parts) = total_loss(&mut g, &inputs, &cfg.loss, cfg.mode)?;
    g.tape.backward(loss)?;
    Ok((g.grads(), parts))
}

/// Mean loss and summed-then-averaged gradients over a batch, in batch order.
pub fn batch_grads(
    params: &ParamStore,
    cfg: &TrainConfig,
    batch: &[Example],
) -> Result<(BTreeMap<String, Tensor>, LossBreakdown)> {
    let per: Vec<_> = batch
        .par_iter()
        .map(|ex| example_grads(params, cfg, ex))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut loss = LossBreakdown::default();
    for (g, parts) in per {
        for (name, t) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(name, t);
                }
            }
        }
        loss.total += parts.total;
        loss.l1 += parts.l1;
        loss.giou += parts.giou;
        loss.focal += parts.focal;
        loss.dice += parts.dice;
    }
    grads
        .values_mut()
        .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= scale));
    for v in [
        &mut loss.total,
        &mut loss.l1,
        &mut loss.giou,
        &mut loss.focal,
        &mut loss.dice,
    ] {
        *v *= scale;
    }
    Ok((grads, loss))
}

pub fn initial_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    Ok(Checkpoint {
        config: cfg.clone(),
        step: 0,
        rng: RngState {
            seed: cfg.seed,
            stream: AUG_STREAM,
            word_pos: 0,
        },
        params: model::init_params(&cfg.model, cfg.seed)?,
        opt: AdamW::new(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Option<(u64, EvalReport)>,
    pub out_dir: PathBuf,
}

fn loss_row(step: u64, split: &str, l: &LossBreakdown) -> String {
    format!(
        "{step},{split},,,{},{},{},{},{}\n",
        l.total, l.l1, l.giou, l.focal, l.dice
    )
}

fn eval_row(step: u64, r: &EvalReport) -> String {
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!("{step},{},{},{},,,,,\n", r.split, f(r.prec50), f(r.miou))
}

/// Validation score used to pick the best checkpoint.
fn score(r: &EvalReport) -> f64 {
    r.prec50.unwrap_or(0.0) + r.miou.unwrap_or(0.0)
}

fn write_nan_dump(out: &Path, step: u64, batch: &[Example], flips: &[bool], err: &Error) {
    let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
    let exprs: Vec<&str> = batch.iter().map(|e| e.expression.as_str()).collect();
    let dump =
        serde_json::json!({ "step": step, "error": err.to_string(), "ids": ids, "expressions": exprs, "flips": flips });
    let _ = fs::write(out.join("nan_dump.json"), dump.to_string() + "\n");
}

/// Progress callback: `(step, train loss)`.
pub type Progress<'a> = &'a mut dyn FnMut(u64, &LossBreakdown);

/// Trains from `start` (usually [`initial_checkpoint`]) up to `cfg.steps`.
/// Writes `metrics.csv` (refreshed at every evaluation), `batches.log`,
/// `last.ckpt` and `best.ckpt` to `out`.
pub fn train_from(
    start: Checkpoint,
    ds: &Dataset,
    vocab: &Vocabulary,
    out: &Path,
    progress: Progress,
) -> Result<TrainOutcome> {
    let cfg = start.config.clone();
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    let train: Vec<&GroundingSample> = ds.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training samples".into()));
    }
    let mut val: Vec<&GroundingSample> = ds.split(Split::Val).collect();
    if cfg.eval_limit > 0 {
        val.truncate(cfg.eval_limit);
    }
    let plan = BatchPlan::new(train.len(), cfg.seed);
    let adam = AdamWConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    let mut ck = start;
    let mut rng = aug_rng(&ck.rng);
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut batches = String::new();
    let mut best: Option<(u64, EvalReport)> = None;
    let mut window = (LossBreakdown::default(), 0usize);
    let io = |p: &Path, e| Error::Io {
        path: p.display().to_string(),
        source: e,
    };

    let validate = |ck: &Checkpoint, metrics: &mut String, best: &mut Option<(u64, EvalReport)>| -> Result<()> {
        if val.is_empty() {
            return Ok(());
        }
        let report = evaluate(&ck.params, &cfg, vocab, &val, "val")?;
        metrics.push_str(&eval_row(ck.step, &report));
        if best.as_ref().is_none_or(|(_, b)| score(&report) > score(b)) {
            ck.save(&out.join("best.ckpt"))?;
            *best = Some((ck.step, report));
        }
        Ok(())
    };

    while (ck.step as usize) < cfg.steps {
        let idx = plan.indices(ck.step, cfg.batch);
        let flips: Vec<bool> = idx.iter().map(|_| cfg.flip && rng.gen_bool(0.5)).collect();
        let batch: Vec<Example> = idx
            .iter()
            .zip(&flips)
            .map(|(&i, &f)| prepare(train[i], vocab, &cfg.model, f))
            .collect::<Result<_>>()?;
        let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
        let _ = writeln!(batches, "{} {:016x}", ck.step, batch_hash(&ids, &flips));
        let (grads, loss) = match batch_grads(&ck.params, &cfg, &batch) {
            Ok(v) => v,
            Err(e) => {
                if matches!(e, Error::Numeric { .. }) {
                    write_nan_dump(out, ck.step, &batch, &flips, &e);
                }
                return Err(e);
            }
        };
        let step = ck.step;
        ck.opt
            .update(&mut ck.params, &grads, &adam, |name| learning_rate(&cfg, name, step))?;
        ck.step += 1;
        ck.rng.word_pos = rng.get_word_pos();
        progress(ck.step, &loss);
        window.0.total += loss.total;
        window.0.l1 += loss.l1;
        window.0.giou += loss.giou;
        window.0.focal += loss.focal;
        window.0.dice += loss.dice;
        window.1 += 1;
        let boundary = cfg.eval_every > 0 && (ck.step as usize).is_multiple_of(cfg.eval_every);
        if boundary || ck.step as usize == cfg.steps {
            let n = window.1 as f64;
            let l = &window.0;
            let mean = LossBreakdown {
                total: l.total / n,
                l1: l.l1 / n,
                giou: l.giou / n,
                focal: l.focal / n,
                dice: l.dice / n,
            };
            metrics.push_str(&loss_row(ck.step, "train", &mean));
            window = (LossBreakdown::default(), 0);
            validate(&ck, &mut metrics, &mut best)?;
            let path = out.join("metrics.csv");
            fs::write(&path, &metrics).map_err(|e| io(&path, e))?;
        }
    }
    if ck.step == 0 || best.is_none() {
        ck.save(&out.join("best.ckpt"))?;
    }
    ck.save(&out.join("last.ckpt"))?;
    let path = out.join("metrics.csv");
    fs::write(&path, metrics).map_err(|e| io(&path, e))?;
    let path = out.join("batches.log");
    fs::write(&path, batches).map_err(|e| io(&path, e))?;
    Ok(TrainOutcome {
        last: ck,
        best,
        out_dir: out.to_path_buf(),
    })
}

pub fn train(cfg: &TrainConfig, out: &Path, progress: Progress) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    let (ds, vocab) = load_data(&mut cfg)?;
    train_from(initial_checkpoint(&cfg)?, &ds, &vocab, out, progress)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let plan = BatchPlan::new(10, 4);
        let mut first: Vec<usize> = (0..5).flat_map(|s| plan.indices(s, 2)).collect();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(plan.indices(3, 4), BatchPlan::new(10, 4).indices(3, 4));
        assert_ne!(plan.indices(0, 10), plan.indices(1, 10));
    }

    #[test]
    fn parameter_groups() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate(&cfg, "vit.b0.w0", 0), 4e-5);
        assert_eq!(learning_rate(&cfg, "law.p", 0), 4e-4);
        assert_eq!(learning_rate(&cfg, "head.box.fc1.w", 2000), 4e-4 * 0.1);
    }
}
