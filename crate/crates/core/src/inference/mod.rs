//! Double-loop variational inference: an inner penalized least-squares
//! solve, exact inference over latent states and closed-form hyperparameter
//! updates with the Gaussian variances `z` fixed; outer refits of `z` and of
//! the Student's t tangents.

pub mod bound;
pub mod config;
pub mod engine;
pub mod hypers;
pub mod pls;

pub use bound::{phi_dense, DenseModel, Slot};
pub use config::{Budgets, Estimator, Model, ModelConfig, VarianceSource};
pub use engine::{
    init_hypers, run, run_with, Engine, Problem, RunResult, Stage, TraceEvent, VariationalState,
};
pub use hypers::{
    closed_form_scale, fit_prior, student_tau_newton, student_tau_objective, EmFit, Hypers,
    LevelPrior, TauFit, HYPER_MAX, HYPER_MIN,
};
pub use pls::{minimize, PlsObjective, PlsReport, WeightedPenalty};
