pub mod analysis;
pub mod critic;
pub mod data;
pub mod diffusion;
pub mod envs;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod rng;
