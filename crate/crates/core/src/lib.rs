pub mod api;
pub mod baselines;
pub mod conceiver;
pub mod experiment;
pub mod interaction;
pub mod intervention;
pub mod metrics;
pub mod numerics;
pub mod observer;
pub mod pipeline;
pub mod predictor;
pub mod schema;
pub mod synth;
pub mod train;
