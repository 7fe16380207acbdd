//! Desk-scale open-set recognition with episodic meta-learning.
//!
//! The crate trains embedding networks whose class posteriors come from a
//! softmax over (negated) distances to class prototypes, in two regimes:
//!
//! - **few-shot**: prototypes and diagonal precisions are estimated from a
//!   small support set inside every episode;
//! - **large-scale**: prototypes and precisions are ordinary parameters
//!   learned by back-propagation, and each episode hides a few classes to
//!   play the role of unseen data.
//!
//! Episodes mix queries from the seen classes (scored with cross-entropy)
//! with queries from unseen classes, whose seen-class posterior entropy is
//! pushed up by an auxiliary loss. At test time a query is rejected as
//! unseen when its maximum seen-class probability is small; accuracy and
//! AUROC over repeated episodes measure the two halves of the task.
//!
//! Everything runs on a small built-in `f64` autodiff engine and is
//! deterministic given a base seed.
//!
//! ```
//! use osml_core::config::TrainConfig;
//! use osml_core::data::{generate_gaussian_mixture, split_classes};
//! use osml_core::eval::{evaluate, EvalOptions};
//! use osml_core::optim::{train, SilentObserver};
//!
//! # fn main() -> osml_core::Result<()> {
//! let mut cfg = TrainConfig::default();
//! cfg.synthetic.n_classes = 12;
//! cfg.synthetic.dim = 4;
//! cfg.synthetic.samples_per_class = 30;
//! cfg.way = 3;
//! cfg.open_way = 2;
//! cfg.query_per_class = 5;
//! cfg.open_query_per_class = 5;
//! cfg.hidden = vec![16];
//! cfg.embed_dim = 8;
//! cfg.episodes = 100;
//! cfg.milestones = vec![80];
//!
//! let dataset = generate_gaussian_mixture(&cfg.synthetic)?;
//! let split = split_classes(&dataset, cfg.split_fractions, cfg.split_seed, true)?;
//! let state = train(&dataset, &split, &cfg, None, &mut SilentObserver)?;
//!
//! let report = evaluate(
//!     &state.params,
//!     &dataset,
//!     &split,
//!     &EvalOptions {
//!         episode: cfg.episode_config(),
//!         batch_per_class: cfg.batch_per_class,
//!         n_episodes: 20,
//!         base_seed: cfg.seed + 1,
//!         workers: 1,
//!     },
//! )?;
//! assert!(report.accuracy_mean > 0.3); // far above 1/3 chance in practice
//! assert!(report.auroc_mean.is_some());
//! # Ok(())
//! # }
//! ```

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod episode;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
