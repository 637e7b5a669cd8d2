//! Codec-resynthesised speech deepfake detection by fusing two frozen
//! encoder views in hyperbolic space.
//!
//! The pipeline runs `codecsim` (synthesise a labelled corpus) → `dataio`
//! (on-disk layout, validation) → `model` + `trainer` (fit a variant) →
//! `evalsuite` (reports, sweeps, transfer, significance). The `cfdetect`
//! binary exposes each stage as a subcommand; see [`cli`].

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod alignment;
pub mod cli;
pub mod codecsim;
pub mod dataio;
pub mod evalsuite;
pub mod geometry;
pub mod model;
pub mod seeding;
pub mod trainer;
