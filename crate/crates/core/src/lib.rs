//! Decomposed temporal-difference learning for slate recommendation.
//!
//! The crate is organised bottom-up:
//!
//! * [`approx`]: feed-forward approximators with analytic gradients and a
//!   finite-difference gradient checker.
//! * [`env`]: a synthetic stochastic user with Bernoulli clicks, interest
//!   drift and a temper budget that ends sessions.
//! * [`tdcore`]: value-based, Q-based, action and state TD objectives, the
//!   importance weight β and the residual decomposition.
//! * [`agents`]: A2C, DQN, DDPG, HAC-lite and dueling DQN, each runnable
//!   with the original or decomposed TD rule.
//! * [`buffer`]: FIFO experience replay storing behaviour log-likelihoods.
//! * [`oracle`]: exactly solvable tabular MDPs and Monte Carlo references.
//! * [`harness`]: configuration, the online training loop, sweeps and CSV.

pub mod agents;
pub mod approx;
pub mod buffer;
pub mod env;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod rng;
pub mod selftest;
pub mod tabular;
pub mod tdcore;

pub use error::{Error, Result};
