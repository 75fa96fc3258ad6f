//! Dynamic functional subspace learning.
//!
//! Multichannel functional data (N samples, n time points, p channels) are
//! modeled as a time-varying sparse self-expressive regression: every channel
//! is regressed on its peers with coefficients that are sparse and piecewise
//! constant in time. Jumps in the coefficient paths mark changes in the
//! cross-correlation structure, and the segment-averaged coefficients define
//! an affinity used to cluster channels into subspaces whose smooth basis
//! functions are then extracted by a penalized multichannel functional PCA.
//!
//! Module map:
//!
//! * [`dataset`]: the `N x n x p` tensor, noise models, CSV I/O.
//! * [`basis`]: B-spline, Fourier and wavelet basis generators.
//! * [`simulate`]: segmented subspace simulators (Models I and II).
//! * [`flsa`]: exact fused lasso signal approximator (the proximal operator).
//! * [`solver`]: FISTA for the dynamic objective, the static baseline and
//!   the block-coordinate-descent noise estimation loop.
//! * [`tuning`]: `(lambda0, rho)` grid search with the BIC-like criterion.
//! * [`changepoint`]: coefficient-jump scores and change point detection.
//! * [`subspace`]: affinities, clustering, smooth MFPCA and Procrustes.
//! * [`bench`]: prediction, evaluation metrics and the benchmark harness.

pub mod basis;
pub mod bench;
pub mod changepoint;
pub mod dataset;
mod error;
pub mod flsa;
pub mod linalg;
pub mod rng;
pub mod simulate;
pub mod solver;
pub mod subspace;
pub mod tuning;

pub use error::{DfslError, Result};
