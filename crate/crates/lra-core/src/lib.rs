//! Look-Recite-Answer inference orchestration.
//!
//! This crate drives frozen multimodal and text backends through a
//! three-stage diagnosis pipeline — describe the image (*look*), recite
//! parametric knowledge for each candidate answer (*recite*), and align
//! recited knowledge against the description to pick a winner (*answer*)
//! — plus the surrounding tooling: a curriculum builder for training
//! retrieval routers and a two-tier evaluation harness.
//!
//! All backend access goes through [`gateway::Gateway`]; every stage
//! records its exact prompts and responses into a [`pipeline::PipelineTrace`]
//! so that any prediction can be audited offline.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod gateway;
pub(crate) mod parallel;
pub mod perception;
pub mod prompts;
pub mod recite;
pub mod pipeline;
pub mod template;
pub mod verdict;

pub use error::{Error, Result};
