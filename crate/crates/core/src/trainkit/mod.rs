//! Training substrate: named parameters, Adam, finite-difference checks, seeding.

mod adam;
mod gradcheck;
mod params;
mod seed;
mod step;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use gradcheck::{grad_check, rel_error};
pub use params::{Bound, ParamId, ParamSet};
pub use seed::{derive_seed, randn, rng_from, shuffled, Rng};
pub use step::{grad_check_graph, loss_and_grads, train_step, train_step_pair};
