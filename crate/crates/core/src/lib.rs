pub mod attnlayout;
pub mod cli;
pub mod config;
pub mod dem;
pub mod diffcore;
pub mod ditnet;
pub mod evalkit;
pub mod gradsuite;
pub mod encoders;
pub mod flow;
mod error;
pub mod layers;
pub mod params;
pub mod promptkit;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
