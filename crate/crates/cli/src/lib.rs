//! Experiment orchestration for the `audiocap` binary: config documents,
//! run-directory layout, caption files and one function per subcommand.

pub mod captions;
pub mod commands;
pub mod config;
pub mod layout;

pub use captions::{read_captions, write_captions, CaptionMap};
pub use commands::{run, Cli};
pub use config::ExperimentConfig;
pub use layout::RunDir;
