//! Continuous-time disease progression forecasting.
//!
//! A shared encoder maps each visit to an embedding `f`; a family of parallel
//! hyperplanes `w·f + α·t + β = 0` turns that embedding into a risk score
//! `r = w·f` and a conversion probability `p_t = σ(r + α·t + β)` for any future
//! time `t`. Training uses pairs of visits from the same eye; see [`losses`].

pub mod checkpoint;
pub mod cohort_io;
pub mod config;
pub mod domain;
pub mod encoder;
pub mod error;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod predict;
pub mod synth;
pub mod trainer;

pub use domain::{validate_cohort, Cohort, Eye, SurvivalLabel, TimeNormalizer, Visit};
pub use error::{Error, Result};
pub use head::{Calibrator, HyperplaneHead};
pub use model::Model;
