//! Synthesis of longitudinal multimodal EHR sequences with a predictive
//! denoising diffusion model, plus fidelity, privacy and time-accuracy
//! evaluation of the synthetic output.

pub mod autodiff;
pub mod catalyst;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pddpm;
pub mod punet;
pub mod real;
pub mod time_embed;
pub mod trainer;
