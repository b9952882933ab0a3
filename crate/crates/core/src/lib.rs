//! Desk-scale knowledge-distillation lab.
//!
//! Trains small teachers and students on CPU with a self-contained
//! reverse-mode autodiff engine, and implements nasty-teacher training:
//! a teacher optimized to keep its own accuracy while its softened outputs
//! diverge from a frozen, normally-trained reference network, so that
//! students distilling from it degrade.

pub mod acceptance;
pub mod autodiff;
pub mod datafree;
pub mod datasets;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod models;
pub mod objectives;
pub mod optim;

pub use error::{Error, Result};
