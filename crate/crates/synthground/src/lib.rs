//! Synthetic referring-expression grounding data.
//!
//! Scenes hold two to five non-overlapping colored shapes. Each sample pairs a
//! rendered scene with a templated expression that picks out exactly one
//! object, plus that object's tight box and exact mask.

pub mod dataset;
pub mod error;
pub mod expr;
pub mod netpbm;
pub mod scene;

pub use dataset::{
    generate_dataset, load_dataset, parse_index, parse_manifest, verify_manifest, Dataset, GenerateOptions,
    GenerateReport, GroundingSample, IndexRecord, Split,
};
pub use error::{Error, Result};
pub use expr::{lexicon, mirror_words, Expression, Template};
pub use scene::{mask_box, Color, SceneObject, SceneSpec, ShapeKind, Size};

/// Arguments of the `gen` subcommand, shared by every front end.
#[derive(Clone, Debug, clap::Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "n-train", default_value_t = 4000)]
    pub n_train: usize,
    #[arg(long = "n-val", default_value_t = 500)]
    pub n_val: usize,
    #[arg(long = "n-test", default_value_t = 500)]
    pub n_test: usize,
    #[arg(long = "res", default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

impl GenArgs {
    pub fn options(&self) -> GenerateOptions {
        GenerateOptions {
            seed: self.seed,
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            resolution: self.resolution,
            patch: self.patch,
        }
    }

    /// Generates the dataset and prints a one-line summary.
    pub fn run(&self) -> Result<GenerateReport> {
        let report = generate_dataset(&self.options(), &self.out)?;
        let counts: Vec<String> = report
            .written
            .iter()
            .map(|(s, n)| format!("{}={n}", s.name()))
            .collect();
        println!(
            "wrote {} to {} (skipped {})",
            counts.join(" "),
            self.out.display(),
            report.skipped
        );
        Ok(report)
    }
}
