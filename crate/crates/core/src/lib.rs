//! Privacy-aware model design toolkit.
//!
//! Trains small fully-connected models with DP-SGD, accounts for the privacy
//! cost of whole search workflows (architecture search, feature selection),
//! and measures how differential-privacy noise penalizes model complexity.
//!
//! Module map:
//! - [`numerics`]: seeded substreams, samplers, entropy, vector helpers
//! - [`mechanisms`]: Gaussian/Laplace calibration and output perturbation
//! - [`accountant`]: RDP accounting for DP-SGD and workflow composition
//! - [`models`]: FCNs with manual backprop, SGD/DP-SGD, layer freezing
//! - [`data`]: datasets, CSV, one-hot, splits, PCA, synthetic generators
//! - [`feature_selection`]: CFS (greedy/GA), DP entropy, PAFS
//! - [`arch_search`]: PAAS, RS and MGRS over declarative search spaces
//! - [`theory`]: output-perturbation error analysis, crossover epsilon, curve fits
//! - [`runner`]: experiment configs, run reports and curve emission

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod arch_search;
pub mod data;
pub mod error;
pub mod feature_selection;
pub mod mechanisms;
pub mod models;
pub mod numerics;
pub mod runner;
pub mod theory;

pub use accountant::{CompositionLedger, DpSgdSetting};
pub use data::{Dataset, Labels, Split};
pub use error::{Error, Result};
pub use mechanisms::PrivacyBudget;
pub use models::{Activation, Architecture, LayerSpec, Model, ParamVector, Task, TrainConfig};
pub use numerics::{Matrix, RngStream};
pub use theory::AccuracyCurve;
