//! Dataset directories as written by `gen-data`.

use std::fs;
use std::path::{Path, PathBuf};

use hydra_core::data::{load_cube, load_rgb, split_indices, HsiCube, RgbImage};

use crate::error::{CliError, Result};

pub fn cube_name(index: usize) -> String {
    format!("cube_{index:04}.hsic")
}

pub fn rgb_name(index: usize) -> String {
    format!("rgb_{index:04}.hsic")
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub cube_path: PathBuf,
    pub rgb_path: PathBuf,
}

/// Which part of the split a command works on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    Train,
    Val,
    All,
}

impl std::str::FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            "all" => Ok(Subset::All),
            other => Err(format!("unknown subset {other:?}")),
        }
    }
}

impl std::fmt::Display for Subset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::All => "all",
        })
    }
}

/// Lists `cube_NNNN.hsic` files in index order; each needs its `rgb_NNNN.hsic`.
pub fn list_samples(dir: &Path) -> Result<Vec<Sample>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(idx) = name
            .strip_prefix("cube_")
            .and_then(|s| s.strip_suffix(".hsic"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            indices.push(idx);
        }
    }
    indices.sort_unstable();
    indices
        .into_iter()
        .map(|i| {
            let rgb_path = dir.join(rgb_name(i));
            if !rgb_path.is_file() {
                return Err(CliError::Data(format!("{} has no paired {}", cube_name(i), rgb_path.display())));
            }
            Ok(Sample {
                name: format!("{i:04}"),
                cube_path: dir.join(cube_name(i)),
                rgb_path,
            })
        })
        .collect()
}

/// Applies the seeded train/validation split and returns the requested side.
pub fn select(samples: Vec<Sample>, subset: Subset, val_fraction: f64, seed: u64) -> Result<Vec<Sample>> {
    if subset == Subset::All {
        return Ok(samples);
    }
    if samples.is_empty() {
        return Err(CliError::Data("dataset holds no cubes".into()));
    }
    let (train, val) = split_indices(samples.len(), (1.0 - val_fraction, val_fraction), seed)?;
    let pick = if subset == Subset::Train { train } else { val };
    Ok(pick.into_iter().map(|i| samples[i].clone()).collect())
}

pub fn load_pairs(samples: &[Sample]) -> Result<Vec<(RgbImage, HsiCube)>> {
    samples
        .iter()
        .map(|s| Ok((load_rgb(&s.rgb_path)?, load_cube(&s.cube_path)?)))
        .collect()
}
