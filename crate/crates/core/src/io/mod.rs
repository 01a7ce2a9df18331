//! File formats and persistence: line-delimited dataset files, the
//! synthetic imbalanced benchmark generator, checkpointing, flat key=value
//! configs, and report tables.
//!
//! Every writer is atomic: content goes to a temporary file in the target
//! directory which is renamed into place, so a killed process never leaves
//! a half-written artifact.

mod checkpoint;
mod config;
mod dataset;
mod report;
mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{parse_synth_spec, parse_train_config, render_train_config};
pub use dataset::{load_dataset, load_split_file, save_dataset, FORMAT_VERSION};
pub use report::{render_eval_report, render_expert_usage, render_sweep_table};
pub use synth::{synth_generate, SynthSpec};

use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch: file is corrupt")]
    Corrupt,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error("dataset error: {0}")]
    Dataset(String),
}

/// Write `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = path.with_extension(format!(
        "{}.tmp.{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
