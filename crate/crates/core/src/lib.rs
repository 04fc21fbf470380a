//! Multi-frame single-object tracker with reliability-gated prior tokens.
//!
//! A one-stream transformer reads a template, up to three reference crops
//! from the tracking history and a search crop. Attention is frame-wise
//! causal: every frame sees itself and the frames before it. A small gate
//! scores each reference, and the scored reference summaries are turned into
//! prior tokens placed in front of the template. Everything runs on a
//! from-scratch 64-bit autodiff kernel, and a synthetic world supplies
//! sequences with scheduled drift events.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod guidance;
pub mod numerics;
pub mod profiler;
pub mod reliability;
pub mod simworld;
pub mod tracker;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/attention.md")]
    struct Attention;
    #[doc = include_str!("../../../book/src/reliability.md")]
    struct Reliability;
    #[doc = include_str!("../../../book/src/tracking.md")]
    struct Tracking;
    #[doc = include_str!("../../../book/src/cost.md")]
    struct Cost;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
