//! A desk-scale autoregressive transformer stack with five strategies for
//! adapting a frozen backbone to dialogue response generation.

pub mod error;
pub mod adapters;
pub mod corpus;
pub mod evalgen;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
