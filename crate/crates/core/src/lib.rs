//! Multiple-salient-object detection building blocks.
//!
//! A small reverse-mode tensor engine ([`tape`]) carries a toy saliency
//! network made of a bottom-up backbone, a stack of dual-space non-local
//! blocks ([`nlgm`]), an edge refinement module with a channel-attention
//! fusion gate ([`fusion`]) and a top-down decoder ([`model`]). Alongside
//! sit the usual evaluation metrics ([`metrics`]) and the dataset
//! primitives used to build multi-object scene collections ([`data`]).
//!
//! The crate is `no_std` and only needs `alloc`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image;
mod kernels;
pub mod metrics;
pub mod model;
pub mod nlgm;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Padding, Tape, Var};
pub use tensor::Tensor;
