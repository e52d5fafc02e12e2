//! Files: schema sidecars, JSONL datasets, run configuration and the
//! synthetic corpus generator.

mod config;
mod dataset;
mod synth;

use std::fs;
use std::io;
use std::path::Path;

pub use config::{load_run_config, Paths, Precision, RunConfig};
pub use dataset::{
    load_dataset, load_schema, parse_dataset, read_text, render_dataset, save_dataset, save_schema, EntityRecord,
    IoError, PairRule, Record, RelationRecord, SchemaFile,
};
pub use synth::{make_synthetic, SplitMode, SynthConfig, SynthCorpus, SynthProfile, SYNTH_MAX_WIDTH};

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
