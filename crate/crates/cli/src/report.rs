//! Output files. Every report carries the seed and the resolved
//! configuration it was produced with.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// The configuration as embedded in reports. The output directory is left
/// out along with the worker count so that reruns elsewhere are comparable.
pub fn embedded_config(cfg: &RunConfig) -> serde_json::Value {
    let mut c = cfg.clone();
    c.output_dir = None;
    serde_json::to_value(&c).expect("configuration serializes")
}

pub fn prepare_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(rsate::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Writes a CSV file preceded by `# seed:` and `# config:` comment lines.
pub fn write_csv<F>(path: &Path, cfg: &RunConfig, seed: u64, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> rsate::Result<()>,
{
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# seed: {seed}")?;
    writeln!(w, "# config: {}", embedded_config(cfg))?;
    body(&mut w)?;
    w.flush()?;
    log::info!("wrote {}", path.display());
    Ok(())
}
