//! Checkpoints: parameters, optimizer moments, step, RNG state and the
//! config text, all in one named-array container.

use std::path::Path;

use lawg_core::config::TrainConfig;
use lawg_core::container::{self, Entry};
use lawg_core::optim::AdamW;
use lawg_core::params::ParamStore;
use lawg_core::{Error, Result};

const PARAM: &str = "param.";
const OPT: &str = "opt.";

/// Position of a `ChaCha8Rng` stream: seed, stream id and word offset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn words(&self) -> Vec<u64> {
        vec![
            self.seed,
            self.stream,
            self.word_pos as u64,
            (self.word_pos >> 64) as u64,
        ]
    }

    fn from_words(w: &[u64]) -> Result<Self> {
        match w {
            &[seed, stream, lo, hi] => Ok(RngState {
                seed,
                stream,
                word_pos: (hi as u128) << 64 | lo as u128,
            }),
            _ => Err(Error::Format {
                context: "meta.rng".into(),
                detail: format!("expected 4 words, got {}", w.len()),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore,
    pub opt: AdamW,
}

impl Checkpoint {
    pub fn to_entries(&self) -> Vec<Entry> {
        let mut out = vec![
            Entry::text("meta.config", &self.config.to_text()),
            Entry::words("meta.step", vec![self.step]),
            Entry::words("meta.rng", self.rng.words()),
        ];
        out.extend(self.params.to_entries(PARAM));
        out.extend(self.opt.to_entries(OPT));
        out
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let find = |name: &str| {
            entries.iter().find(|e| e.name == name).ok_or_else(|| Error::Format {
                context: "checkpoint".into(),
                detail: format!("missing entry {name}"),
            })
        };
        let config = TrainConfig::from_text(&find("meta.config")?.as_text()?)?;
        let step = *find("meta.step")?.as_words()?.first().ok_or_else(|| Error::Format {
            context: "meta.step".into(),
            detail: "empty".into(),
        })?;
        let rng = RngState::from_words(find("meta.rng")?.as_words()?)?;
        let params = ParamStore::from_entries(entries, PARAM)?;
        let opt = AdamW::from_entries(entries, OPT)?;
        Ok(Checkpoint {
            config,
            step,
            rng,
            params,
            opt,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        container::encode(&self.to_entries())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&container::read(path)?)
    }
}
