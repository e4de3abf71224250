//! Multi-level limit order book forecasting.
//!
//! This crate trains and evaluates an attention encoder-decoder that
//! forecasts every price and volume across the visible depth of a limit
//! order book, treating the book as one joint multivariate series rather
//! than a handful of derived quantities. The pieces:
//!
//! - [`tensor`]: a small reverse-mode autodiff engine over dense f64 arrays;
//! - data ingestion, resampling onto a fixed grid, and windowing;
//! - stationarity and scaling transforms with exact inverses;
//! - token embeddings, including a compound scheme that composes each
//!   variable's embedding from shared attribute vectors (level, side,
//!   feature, ticker);
//! - the encoder-decoder model and a linear baseline;
//! - the training objective, with an ordinal penalty that scores forecasts
//!   against the book's price ordering;
//! - a deterministic trainer with checkpointing and early stopping;
//! - evaluation and forecast export.
//!
//! Everything is f64, single-threaded, and seeded: a rerun of any command
//! with the same inputs produces byte-identical artifacts.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod embedding;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod trainer;
pub mod transforms;

/// Command-line entry point; returns the process exit code.
pub fn run() -> i32 {
    cli::run()
}

/// Compile and run every Rust snippet in the guide (`book/`) as part of
/// `cargo test`, so the book cannot drift from the API it documents.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(readme, "../../../README.md");
    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(tensors, "../../../book/src/tensors.md");
    chapter!(data, "../../../book/src/data.md");
    chapter!(transforms, "../../../book/src/transforms.md");
    chapter!(embedding, "../../../book/src/embedding.md");
    chapter!(model, "../../../book/src/model.md");
    chapter!(objective, "../../../book/src/objective.md");
    chapter!(training, "../../../book/src/training.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
    chapter!(cli, "../../../book/src/cli.md");
}
