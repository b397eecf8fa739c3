pub mod config;
pub mod emit;
pub mod error;
pub mod run;
