//! Adapter-based continual learning on a frozen convolutional feature extractor.
//!
//! A pretrained [`backbone::Backbone`] is frozen once. Every learning round adds a
//! [`adapter::AdapterSet`] between its stages and a [`heads::TaskHead`] with an
//! `others` output; afterwards all heads are fine-tuned together on a
//! class-balanced set drawn from the [`memory::RehearsalMemory`]. At inference the
//! head least convinced that the input belongs elsewhere makes the call.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration and
//! the command line live in the companion `acl-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adapter;
pub mod backbone;
pub mod baselines;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod heads;
pub mod ids;
pub mod layers;
pub mod memory;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod split;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use ids::{ClassId, TaskId};
pub use tensor::{Parameter, Tensor};
