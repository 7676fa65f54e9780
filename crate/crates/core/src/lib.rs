//! Guided reverse-diffusion purification on synthetic data.
//!
//! The pipeline: draw pure noise, run ancestral reverse diffusion under a
//! score model, and during a middle window of steps add Manhattan-distance
//! guidance toward the (possibly attacked) input, both directly and after
//! a x4 bicubic lift. The modules mirror that pipeline:
//!
//! - [`schedule`]: discrete signal-fraction schedule and the forward process
//! - [`score`]: analytic mixture score and a small trainable score network
//! - [`sampler`]: Tweedie estimate and ancestral stepping
//! - [`operators`]: sign, distances, bicubic x4 upsampling and its adjoint
//! - [`guidance`]: guidance terms, guided factor, gating, the purify loop
//! - [`attack`]: toy classifier, FGSM/PGD, accuracy, IDX reader
//! - [`data`]: procedurally generated toy datasets
//! - [`harness`]: metrics, ablation grid, timing, config and file outputs

pub mod attack;
pub mod data;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod nn;
pub mod operators;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod tensor_io;

pub use error::{Error, Result};
