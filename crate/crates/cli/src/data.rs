//! Turning dataset samples into model inputs, with optional horizontal flip.

use lawg_core::backbone::image_tensor;
use lawg_core::config::ModelConfig;
use lawg_core::text::{tokenize, TokenSequence, Vocabulary};
use lawg_core::{Result, Tensor};
use synthground::{mirror_words, GroundingSample};

#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub expression: String,
    pub image: Tensor,
    pub tokens: TokenSequence,
    pub gt_box: [f64; 4],
    pub gt_mask: Vec<bool>,
}

/// Mirrors interleaved `size×size×channels` pixels left to right.
fn flip_rows<T: Copy>(data: &[T], size: usize, channels: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..size {
        for x in (0..size).rev() {
            let o = (y * size + x) * channels;
            out.extend_from_slice(&data[o..o + channels]);
        }
    }
    out
}

/// Builds model inputs. With `flip`, image and mask are mirrored, the box
/// center moves to `1 − cx`, and left/right words are swapped.
pub fn prepare(sample: &GroundingSample, vocab: &Vocabulary, cfg: &ModelConfig, flip: bool) -> Result<Example> {
    let size = sample.resolution();
    let rec = &sample.record;
    let (rgb, mask, expression, mut bbox) = if flip {
        (
            flip_rows(&sample.image, size, 3),
            flip_rows(&sample.mask, size, 1),
            mirror_words(&rec.expression),
            rec.bbox,
        )
    } else {
        (
            sample.image.clone(),
            sample.mask.clone(),
            rec.expression.clone(),
            rec.bbox,
        )
    };
    if flip {
        bbox[0] = 1.0 - bbox[0];
    }
    Ok(Example {
        id: rec.id.clone(),
        tokens: tokenize(&expression, vocab, cfg.max_len)?,
        expression,
        image: image_tensor(&rgb, size)?,
        gt_box: bbox,
        gt_mask: mask,
    })
}
