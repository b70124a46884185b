#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod child;
pub mod controller;
pub mod error;
pub mod gradcheck;
pub mod landmarks;
pub mod metrics;
pub mod rl;
pub mod rng;
pub mod search;
pub mod space;
pub mod spectral;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
