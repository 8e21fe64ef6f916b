pub mod eval;
pub mod gen_data;
pub mod plot;
pub mod reconstruct;
pub mod train;

use std::fs;
use std::path::Path;

use crate::error::{CliError, Result};

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}
