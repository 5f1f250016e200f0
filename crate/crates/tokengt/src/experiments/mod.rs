//! Desk-scale experiments: the supervised basis-approximation study under
//! different identifier configurations, a structure-sensitive regression
//! ablation, and attention-distance analysis reports.

pub mod data;
pub mod regression;
pub mod synthetic;

pub use data::{ba_dataset, conditional_variance_bound, dataset_stats, StandardizedTargets};
pub use regression::{
    attention_distance_report, train_regression, train_regression_demo, RegressionConfig,
    RegressionModel, RegressionOutcome, RegressionRun,
};
pub use synthetic::{
    attention_dump, eval_basis_l2, eval_constructed_l2, make_basis_targets, train_synthetic,
    BasisTargets, EvalResult, Layout, NodeIdMode, SynthModel, SyntheticConfig,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Graph(#[from] crate::graphs::GraphError),
    #[error(transparent)]
    Identifier(#[from] crate::identifiers::IdentifierError),
    #[error(transparent)]
    Tokenize(#[from] crate::tokenizer::TokenizeError),
    #[error(transparent)]
    Attention(#[from] crate::attention::AttentionError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}
