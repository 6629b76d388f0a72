//! Confounder-corrected SNP association testing with implicit generative models.

pub mod assoc;
pub mod cli;
pub mod error;
pub mod icm;
pub mod lfvi;
pub mod numerics;
pub mod simgen;
pub mod verify;

pub use error::{Error, Result};
