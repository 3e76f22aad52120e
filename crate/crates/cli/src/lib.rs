//! Library side of the `fairaug` command-line tool: configuration parsing
//! and the pipeline stages run by each subcommand.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_augment, cmd_evaluate, cmd_generate, cmd_split, cmd_sweep, cmd_train, load_split, Layout,
};
pub use config::{Overrides, RunConfig};
