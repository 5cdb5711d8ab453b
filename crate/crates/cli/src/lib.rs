pub mod config;
pub mod output;
pub mod pipeline;

pub use config::PipelineConfig;
pub use pipeline::{run_through, Experiment, RunReport, Stage};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "UPO_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "out";
