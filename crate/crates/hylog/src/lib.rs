//! Hybrid local-global attention networks for single-image dehazing.
//!
//! The crate is self-contained: a reverse-mode tensor core ([`tensor`]),
//! attention building blocks ([`vit`], [`blocks`]), a channel-attention
//! fusion module ([`cfsm`]), the joint decomposition/dehazing network
//! ([`net`]), losses and image metrics ([`loss`]), synthetic haze data
//! ([`data`]), training machinery ([`optim`]) and an analytic attention
//! cost model with a timing harness ([`flops`]).
//!
//! Everything is verifiable at desk scale: every differentiable op is
//! covered by the finite-difference suite in [`gradcheck`], and the
//! `hylog` binary exposes the same checks from the command line.

pub mod blocks;
#[cfg(doctest)]
mod book;
pub mod cfsm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
mod init;
pub mod layers;
pub mod loss;
pub mod net;
pub mod optim;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Elem, Tensor};
