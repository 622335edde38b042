//! Decision Transformer augmented with a frozen associative memory of expert
//! experience, plus toy environments, datasets and an ablation harness.
//!
//! Pipeline: [`env`] generates tiered datasets ([`data`]); [`amb`] trains the
//! component autoencoder and builds the memory buffer; [`policy`] holds the
//! transformer with retrieval fusion; [`train`] orchestrates the two training
//! stages and evaluation; [`harness`] expands ablation matrices and renders
//! reports.

pub mod amb;
pub mod binio;
pub mod data;
pub mod env;
pub mod error;
pub mod harness;
pub mod nn;
pub mod policy;
pub mod train;

pub use error::{Error, Result};
