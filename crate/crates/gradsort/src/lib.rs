//! Gradient-based sorted grid layouts.
//!
//! Arranges n high-dimensional vectors on an n_x x n_y grid so that
//! spatially close cells hold similar vectors. The arrangement is learned
//! by relaxing the permutation matrix to a doubly-stochastic one, descending
//! a differentiable neighborhood objective with Adam, and hardening the
//! result back to an exact permutation.
//!
//! Module map:
//! - [`matrix`]: dense row-major f64 matrices
//! - [`diffcore`]: reverse-mode automatic differentiation over matrices
//! - [`permgen`]: soft permutation generators (Gumbel-Sinkhorn, low-rank,
//!   SoftSort) and hardening
//! - [`loss`]: the neighborhood, constraint and distance-matrix losses
//! - [`trainer`]: the Adam optimization loop with loss ramping and
//!   duplicate checking
//! - [`lap`]: exact linear assignment solver used as hardening fallback
//! - [`metrics`]: arrangement quality scores and brute-force oracles
//! - [`baselines`]: random, self-organizing-map and 2-opt references
//! - [`io`]: datasets, CSV and PPM formats, results files

pub mod baselines;
pub mod diffcore;
pub mod error;
pub mod io;
pub mod lap;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod permgen;
pub mod trainer;

pub use error::{Error, Result};
pub use io::{gen_colors, load_csv, render_ppm, save_csv, Dataset, DatasetKind, ResultsFile};
pub use loss::{GridShape, LossWeights};
pub use matrix::Matrix;
pub use metrics::{brute_force_optimum, quality, QualityReport};
pub use permgen::{Generator, GeneratorKind, Permutation};
pub use trainer::{train, TrainConfig, TrainResult};
