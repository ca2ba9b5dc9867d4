//! Deep ensembles for heteroscedastic regression with an analytic Bayesian
//! post-processing step.
//!
//! Each member is a MAP network `y | x ~ N(W phi(x), sigma^2(x) I)`. After
//! training, every member's last-layer weights get an isotropic Gaussian
//! posterior `N(W_l, gamma_l I)` whose variance maximises a closed-form
//! evidence lower bound. The extended moments add the term
//! `mean_l gamma_l ||phi_l(x)||^2` to the usual ensemble spread.
//!
//! Modules, bottom up: [`nn`] (dense layers, Adam), [`data`], [`hetero`]
//! (the two-headed network and its loss), [`ensemble`], [`posterior`]
//! (gamma, moments, samplers), [`metrics`], [`plot`] and [`experiment`].

// `!(x > 0.0)` style checks are intentional: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod hetero;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod posterior;

pub use data::{Dataset, NormStats, SplitTag};
pub use ensemble::{train_ensemble, Ensemble, Execution};
pub use error::{Error, Result};
pub use experiment::{run_experiment, run_pipeline, ExperimentConfig, RunResult};
pub use hetero::{Architecture, HeteroNet, Prediction, Schedule, TrainConfig};
pub use metrics::{EvalReport, RatioMode, Variant};
pub use posterior::{
    compute_gamma, elbo_coeffs, predictive_moments_classical, predictive_moments_extended,
    regression_moments_classical, regression_moments_extended, ElboCoeffs, GammaSet, MomentPair,
    PosteriorSampler,
};
