pub mod args;
pub mod commands;
pub mod manifest;
pub mod service;

pub use args::Cli;
pub use commands::run;

/// Exit status for usage errors (bad flags, unknown subcommands).
pub const EXIT_USAGE: i32 = 1;
/// Exit status for failures while running a valid command.
pub const EXIT_RUNTIME: i32 = 2;
