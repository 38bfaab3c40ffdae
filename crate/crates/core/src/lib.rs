//! Reference-free, non-autoregressive accent conversion.
//!
//! A FastSpeech2-style text-to-speech model is trained on native speech, a
//! speech encoder is then aligned to its length-regulated linguistic states,
//! and finally adapted on accented speech so that accented input decodes to
//! native-accent mel-spectrograms.

pub mod config;
pub mod error;
pub mod eval;
pub mod data;
pub mod features;
pub mod inference;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod tensor_file;
pub mod training;
pub mod text;
pub mod toy;

pub use error::{Error, Result};
