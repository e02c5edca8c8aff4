//! InfoMax Option Critic.
//!
//! Options whose termination functions are trained to maximize the
//! conditional mutual information I(X_f; O | X_s) between options and the
//! state transitions they produce, plus the tabular oracle that checks every
//! gradient estimator exactly.

pub mod agent;
pub mod baselines;
pub mod error;
pub mod infomax;
pub mod mdp;
pub mod nn;
pub mod options;
pub mod oracle;
pub mod ppo_ext;
pub mod run;
pub mod verify;

pub use error::{Error, Result};
