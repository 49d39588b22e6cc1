//! Automatic construction, training and evaluation of amortized variational
//! families for pyramidal hierarchical Bayesian models.
//!
//! A model is declared as a [`template::Template`]: plates, named constants
//! and random-variable templates. [`template::Template::validate`] checks the
//! pyramidal rules and extracts [`template::Descriptors`], from which
//! [`family::DualFamily::build`] derives a hierarchical set-transformer
//! encoder and one conditional normalizing flow per latent variable. The
//! resulting family has a parameter count that does not depend on plate
//! cardinalities and can be trained with [`train::train`].

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod distributions;
pub mod encoder;
pub mod error;
pub mod family;
pub mod flow;
pub mod gradcheck;
pub mod ground;
pub mod link;
pub mod mfvi;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod tape;
pub mod template;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;
