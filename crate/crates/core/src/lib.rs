//! Continuous-time classification of time series with missing values.
//!
//! Three views of every series are built: the zero-filled raw observations,
//! a natural cubic spline control path through the observed points, and a
//! latent trajectory from a neural ODE, CDE or SDE integrated with explicit
//! Euler steps. Each view is refined by temporal multi-head attention, the
//! three results are weighted by learnable Gumbel-Sigmoid stream gates, and
//! the fused final-time vector feeds a two-layer classifier.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod experiment;
pub mod gating;
pub mod interp;
pub mod model;
pub mod nde;
pub mod nn;
pub mod report;
pub mod rng;
pub mod search;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod train;
