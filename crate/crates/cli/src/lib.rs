//! Command-line surface: configuration, subcommands, synthetic worlds and
//! table rendering.

pub mod cli;
pub mod commands;
pub mod config;
pub mod synth;
pub mod tables;

pub use cli::{execute, main_with, Cli};
