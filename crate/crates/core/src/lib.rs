//! Conditional moment matching via a regularized zero-sum game.
//!
//! The crate estimates a function `h` from samples `(x, y, z)` under the
//! restriction that the residual `y - h(x)` has zero conditional mean given
//! `z`. The restriction is enforced through a two-player game: a multiplier
//! function `f(z)` is paid for pointing at conditional moment violations and
//! charged quadratically for its own magnitude, so at equilibrium `f` equals
//! the conditional residual mean and the game value equals the weighted sum
//! of squared conditional residual means.
//!
//! Modules:
//! - [`data`]: sample containers, weighted empirical moments, CSV I/O.
//! - [`features`]: linear-in-parameters function classes over tabular,
//!   polynomial, and Gaussian RBF features.
//! - [`game`]: the payoff, its gradients, the exact best-response
//!   multiplier, and equilibrium diagnostics.
//! - [`solver`]: no-regret dynamics (projected OGD / FTRL) against the
//!   best-response multiplier, plus a slack-constrained outer loop.
//! - [`ivr`]: instrumental-variable regression scenarios, classical
//!   baselines, and the gradient-bias experiment.
//! - [`bellman`]: tabular MDPs, exact value oracles, and policy evaluation
//!   or improvement driven by the game on Bellman residuals.

pub mod bellman;
pub mod data;
pub mod error;
pub mod features;
pub mod game;
pub mod ivr;
pub mod solver;

pub use data::{Dataset, RngHandle, SampleTriple};
pub use error::{CmmError, Result};
pub use features::{FeatureMap, ParamFunction};
pub use game::{ReLaGame, SlackReport};
pub use solver::{GameTrace, IvanovConfig, SolverConfig};
