//! Multi-objective session-based recommendation with preference-conditioned
//! training: one model approximates the whole click/order Pareto front.
//!
//! Pipeline: ingest event logs into labeled sessions ([`data`]), train a
//! small causal self-attention recommender ([`model`], [`training`]) on
//! Dirichlet-sampled preference vectors ([`sampling`]) under a scalarized,
//! regularized objective ([`losses`]), then sweep a preference grid and
//! score the resulting front with dominance filtering, hypervolume and
//! Recall@K ([`evaluation`]).

pub mod data;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod sampling;
pub mod tape;
pub mod tensor;
pub mod training;

pub use losses::{GFunction, LossBreakdown};
pub use model::{ModelConfig, Parameters, Scores};
pub use sampling::{DirichletParams, PreferenceVector};
