//! Run orchestration for the explanation-alignment pipeline: run
//! directories with hashed artifacts, the pipeline stages behind the
//! `exagree` command, the `/v1` HTTP service and an HTTP client for
//! natural-language preference backends.

pub mod error;
pub mod llm;
pub mod pipeline;
pub mod run;
pub mod server;

pub use error::{CliError, Result};
pub use run::{RunDir, RunManifest, Stage};
