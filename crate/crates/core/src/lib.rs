//! Synthesizer parameter estimation toolkit: an FM/subtractive renderer,
//! labeled dataset generation, convolutional and fully connected
//! estimators, and reconstruction metrics.

pub mod checkpoint;
pub mod dataset;
pub mod features;
pub mod metrics;
pub mod neural;
pub mod params;
pub mod pipeline;
pub mod synth;
