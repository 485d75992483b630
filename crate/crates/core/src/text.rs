//! Vocabulary, tokenization and the small transformer text encoder.

use std::collections::HashMap;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Graph, ParamStore};
use crate::tape::Var;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary; word `i` of the list gets id `i + 3`.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut out = Vocabulary {
            words: RESERVED.iter().map(|s| s.to_string()).collect(),
            ids: HashMap::new(),
        };
        for (i, w) in out.words.iter().enumerate() {
            out.ids.insert(w.clone(), i);
        }
        for w in words {
            let w = w.as_ref().trim().to_lowercase();
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("bad vocabulary entry {w:?}")));
            }
            if out.ids.contains_key(&w) {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry {w:?}")));
            }
            out.ids.insert(w.clone(), out.words.len());
            out.words.push(w);
        }
        Ok(out)
    }

    /// Reads a vocabulary file: one token per line, reserved ids excluded.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_words(&synthground::dataset::read_vocab(path)?)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    /// Lowercased words in order, without [CLS]; index `j` sits at position `j + 1`.
    pub words: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Whitespace tokenization with lowercasing, [CLS]-prefixed and padded or
/// truncated to exactly `len` positions.
pub fn tokenize(expression: &str, vocab: &Vocabulary, len: usize) -> Result<TokenSequence> {
    if len == 0 {
        return Err(Error::InvalidArgument("sequence length must be >= 1".into()));
    }
    let lower = expression.trim().to_lowercase();
    if lower.is_empty() {
        return Err(Error::InvalidArgument("empty expression".into()));
    }
    let words: Vec<String> = lower.split_whitespace().take(len - 1).map(String::from).collect();
    let mut ids = vec![CLS];
    ids.extend(words.iter().map(|w| vocab.id(w)));
    let mut mask = vec![true; ids.len()];
    ids.resize(len, PAD);
    mask.resize(len, false);
    Ok(TokenSequence { ids, mask, words })
}

/// Token features `f` (`L×d_l`) and the [CLS] row `cls` (`1×d_l`).
#[derive(Clone, Copy, Debug)]
pub struct LinguisticFeatures {
    pub f: Var,
    pub cls: Var,
}

pub fn init_params(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) {
    let d = cfg.d_l;
    store.normal(seed, "text.tok_emb", &[cfg.vocab_size, d], nn::INIT_STD);
    store.normal(seed, "text.pos_emb", &[cfg.max_len, d], nn::INIT_STD);
    for l in 0..cfg.text_layers {
        let p = format!("text.l{l}");
        nn::init_layer_norm(store, &format!("{p}.ln1"), d);
        nn::init_linear(store, seed, &format!("{p}.attn.qkv"), 3 * d, d, nn::INIT_STD);
        nn::init_linear(store, seed, &format!("{p}.attn.out"), d, d, nn::INIT_STD);
        nn::init_layer_norm(store, &format!("{p}.ln2"), d);
        nn::init_mlp(store, seed, &format!("{p}.mlp"), d, cfg.mlp_ratio * d);
    }
    if cfg.text_final_norm {
        nn::init_layer_norm(store, "text.ln_f", d);
    }
}

/// Pre-norm transformer encoder. Sequences shorter than `max_len` are
/// accepted; padded positions never influence real ones.
pub fn encode(g: &mut Graph, tokens: &TokenSequence, cfg: &ModelConfig) -> Result<LinguisticFeatures> {
    let n = tokens.len();
    if n == 0 || n > cfg.max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {n} outside 1..={}",
            cfg.max_len
        )));
    }
    if tokens.mask.len() != n {
        return Err(Error::InvalidArgument("token mask length differs from ids".into()));
    }
    let emb = g.p("text.tok_emb")?;
    let pos = g.p("text.pos_emb")?;
    let x = g.tape.gather_rows(emb, &tokens.ids)?;
    let pos_rows: Vec<usize> = (0..n).collect();
    let p = g.tape.gather_rows(pos, &pos_rows)?;
    let mut x = g.tape.add(x, p)?;
    let d = cfg.d_l;
    for l in 0..cfg.text_layers {
        let pre = format!("text.l{l}");
        let h = nn::layer_norm(g, x, &format!("{pre}.ln1"), cfg.ln_eps)?;
        let qkv = nn::linear(g, h, &format!("{pre}.attn.qkv"))?;
        let q = g.tape.slice_cols(qkv, 0, d)?;
        let k = g.tape.slice_cols(qkv, d, d)?;
        let v = g.tape.slice_cols(qkv, 2 * d, d)?;
        let (a, _) = nn::multi_head_attention(g, q, k, v, cfg.text_heads, Some(&tokens.mask))?;
        let a = nn::linear(g, a, &format!("{pre}.attn.out"))?;
        x = g.tape.add(x, a)?;
        let h = nn::layer_norm(g, x, &format!("{pre}.ln2"), cfg.ln_eps)?;
        let h = nn::mlp(g, h, &format!("{pre}.mlp"))?;
        x = g.tape.add(x, h)?;
    }
    if cfg.text_final_norm {
        x = nn::layer_norm(g, x, "text.ln_f", cfg.ln_eps)?;
    }
    let cls = g.tape.slice_rows(x, 0, 1)?;
    Ok(LinguisticFeatures { f: x, cls })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(&["circle", "red", "square"]).unwrap()
    }

    #[test]
    fn tokenize_pads_and_marks_real_tokens() {
        let t = tokenize("Red  circle", &vocab(), 6).unwrap();
        assert_eq!(t.ids, vec![CLS, 4, 3, PAD, PAD, PAD]);
        assert_eq!(t.mask, vec![true, true, true, false, false, false]);
    }

    #[test]
    fn unknown_words_and_truncation() {
        let v = vocab();
        let t = tokenize("red banana", &v, 4).unwrap();
        assert_eq!(t.ids[2], UNK);
        let long = ["red"; 9].join(" ");
        let t = tokenize(&long, &v, 4).unwrap();
        assert_eq!(t.ids.len(), 4);
        assert!(t.mask.iter().all(|&m| m));
        assert!(tokenize("   ", &v, 4).is_err());
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        assert!(Vocabulary::from_words(&["a", "a"]).is_err());
        assert_eq!(vocab().len(), 6);
    }
}
