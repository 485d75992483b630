//! Command-line workflows: training, evaluation, inspection and ablation.

pub mod ablate;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod inspect;
pub mod train;

/// Worker count from `LAWG_THREADS`, if set to a positive integer.
pub fn thread_limit() -> Option<usize> {
    std::env::var("LAWG_THREADS")
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
}
