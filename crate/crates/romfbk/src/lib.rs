//! Reduced-order feedback control for steering probability distributions.
//!
//! The toolkit covers an offline phase and an online phase:
//!
//! * **Offline** — simulate a controlled Fokker–Planck plant on a uniform
//!   finite-volume grid ([`grid`]), generate optimal state–control
//!   trajectories with a discrete-adjoint gradient and L-BFGS ([`ocp`]),
//!   compress states and controls with POD and/or autoencoders
//!   ([`reduction`]), and fit a latent feedback policy plus an optional
//!   latent forward model ([`training`], [`neural`]).
//! * **Online** — close the loop: observe (possibly noisy) states, act
//!   through the decoded policy, or propagate the latent surrogate without
//!   touching the plant at all ([`controller`]).
//!
//! Artifacts (datasets, reducers, models, loop reports) share one binary
//! container and a small CLI drives the whole pipeline ([`io`], [`cli`]).
//!
//! Everything is double precision and deterministic: a single global seed
//! fans out into named sub-seeds, and batch reductions use fixed orders, so
//! re-running any stage reproduces its artifact bit for bit.

pub mod book;
pub mod cli;
pub mod config;
pub mod controller;
mod error;
pub mod grid;
pub mod io;
pub mod neural;
pub mod ocp;
pub mod reduction;
pub mod seed;
pub mod sym;
pub mod training;

pub use error::{Error, Result};
