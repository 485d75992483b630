//! Times one forward and backward pass of the default model.

use std::time::Instant;

use lawg_core::config::{LossWeights, Mode, ModelConfig};
use lawg_core::model;
use lawg_core::objectives::{total_loss, LossInputs};
use lawg_core::params::Graph;
use lawg_core::text::{tokenize, Vocabulary};
use lawg_core::Tensor;

fn main() -> lawg_core::Result<()> {
    let max_len: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("max_len"))
        .unwrap_or(40);
    let vocab = Vocabulary::from_words(&synthground::lexicon())?;
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        max_len,
        ..ModelConfig::default()
    };
    let store = model::init_params(&cfg, 0)?;
    let image = Tensor::from_fn(&[3, 64, 64], |i| ((i * 7919) % 255) as f64 / 255.0);
    let tokens = tokenize("circle left of the red square", &vocab, max_len)?;
    let gt_mask = vec![false; 64 * 64];
    let reps = 20;
    let start = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::train(&store);
        let out = model::forward(&mut g, &cfg, &image, &tokens)?;
        let inputs = LossInputs {
            pred_box: Some(out.pred_box),
            gt_box: [0.5, 0.5, 0.2, 0.2],
            mask_logits: out.mask.map(|m| m.logits),
            gt_mask: &gt_mask,
        };
        let (loss, _) = total_loss(&mut g, &inputs, &LossWeights::default(), Mode::Multitask)?;
        g.tape.backward(loss)?;
        std::hint::black_box(g.grads());
    }
    let per = start.elapsed().as_secs_f64() / reps as f64;
    println!(
        "params {} | {:.2} ms per sample | {:.1} min for 3000 steps × 16",
        store.numel(),
        per * 1e3,
        per * 48000.0 / 60.0
    );
    Ok(())
}
