//! Neural text simplification with back-translation augmentation.
//!
//! Modules build on each other bottom-up: [`textpipe`] turns raw text into
//! id sequences, [`autodiff`] and [`seq2seq`] define the attention
//! encoder-decoder, [`trainer`] fits it, [`decoder`] runs inference,
//! [`augment`] synthesizes extra pairs and [`evalmetrics`] scores outputs.

pub mod augment;
pub mod autodiff;
pub mod decoder;
mod error;
pub mod evalmetrics;
pub mod seeds;
pub mod seq2seq;
pub mod textpipe;
pub mod trainer;

pub use augment::{Origin, SentencePair};
pub use error::{Error, Result};
