//! Autotuning with random-forest Bayesian optimization.
//!
//! Build a [`space::ParamSpace`], pick an [`evaluate::Evaluator`], and drive
//! an [`optimizer::Search`] with [`optimizer::run_search`]. Records go to a
//! [`store::TrialLog`].

pub mod cli;
pub mod evaluate;
pub mod launch;
pub mod mold;
pub mod optimizer;
pub mod space;
pub mod store;
pub mod surrogate;
