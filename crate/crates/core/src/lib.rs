//! Rule-based rewards and REINFORCE++ policy optimization for logical
//! reasoning over paired text and audio token streams.

pub mod cli;
pub mod datapipe;
pub mod env;
pub mod error;
pub mod metrics;
pub mod optimizer;
pub mod policy;
pub mod reward;

pub use error::{Error, Result};
