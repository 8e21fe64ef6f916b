//! `key = value` config files merged with command-line flags.
//!
//! Keys are flag names with `-` written as `_`. A key may be qualified as
//! `stageN.key` to apply only to `train --stage N`. Flags win over the file,
//! the file wins over defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, Result};

/// Every key any subcommand understands.
pub const KNOWN_KEYS: &[&str] = &[
    "h",
    "w",
    "b",
    "n",
    "materials",
    "seed",
    "library_seed",
    "sharpness",
    "blobs",
    "blob_radius_min",
    "blob_radius_max",
    "noise_sigma",
    "noise_bands",
    "drop_bands",
    "data",
    "out",
    "from",
    "latent",
    "teacher_width",
    "se_ratio",
    "kernel",
    "pixel_stride",
    "width",
    "heads",
    "encoder_blocks",
    "decoder_blocks",
    "ffn_expansion",
    "epochs",
    "batch_size",
    "lr",
    "min_lr",
    "loss",
    "huber_delta",
    "frozen",
    "val_fraction",
    "split_seed",
    "set",
    "checkpoint",
    "eps",
    "spectra_pixels",
    "spectra_seed",
    "heatmap_max",
    "flops",
    "input",
    "gt",
    "pred",
];

#[derive(Clone, Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    scope: Option<String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text)
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut file = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let key = key.trim().replace('-', "_");
            let bare = match key.split_once('.') {
                Some((scope, rest)) if is_stage_scope(scope) => rest,
                Some(_) => return Err(CliError::Config(format!("line {}: unknown scope in key {key:?}", n + 1))),
                None => key.as_str(),
            };
            if !KNOWN_KEYS.contains(&bare) {
                return Err(CliError::Config(format!("line {}: unknown key {key:?}", n + 1)));
            }
            file.insert(key, value.trim().to_owned());
        }
        Ok(Self {
            file,
            ..Self::default()
        })
    }

    /// Makes `stageN.key` entries take precedence over plain `key` entries.
    pub fn scoped(mut self, stage: u8) -> Self {
        self.scope = Some(format!("stage{stage}"));
        self
    }

    fn file_value(&self, key: &str) -> Option<&str> {
        self.scope
            .as_ref()
            .and_then(|s| self.file.get(&format!("{s}.{key}")))
            .or_else(|| self.file.get(key))
            .map(String::as_str)
    }

    fn raw(&self, key: &str, flag: Option<String>) -> Option<String> {
        flag.or_else(|| self.file_value(key).map(str::to_owned))
    }

    /// Resolves `key` as flag, then file, then `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
    {
        Ok(self.opt(key, flag)?.unwrap_or_else(|| {
            self.resolved.insert(key.to_owned(), default.to_string());
            default
        }))
    }

    pub fn opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
    {
        let Some(text) = self.raw(key, flag.map(|v| v.to_string())) else {
            return Ok(None);
        };
        let value = text
            .parse()
            .map_err(|_| CliError::Config(format!("invalid value {text:?} for {key}")))?;
        self.resolved.insert(key.to_owned(), text);
        Ok(Some(value))
    }

    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Display,
    {
        self.opt(key, flag)?
            .ok_or_else(|| CliError::Config(format!("missing required setting --{}", key.replace('_', "-"))))
    }

    /// Raw string value without parsing, recorded when present.
    pub fn text(&mut self, key: &str, flag: Option<String>) -> Option<String> {
        let v = self.raw(key, flag)?;
        self.resolved.insert(key.to_owned(), v.clone());
        Some(v)
    }

    pub fn record(&mut self, key: &str, value: impl Display) {
        self.resolved.insert(key.to_owned(), value.to_string());
    }

    /// Every setting the command used, after resolution.
    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}

fn is_stage_scope(s: &str) -> bool {
    matches!(s, "stage1" | "stage2" | "stage3")
}

/// Parses `a..b` band ranges separated by commas.
pub fn parse_ranges(text: &str) -> Result<Vec<std::ops::Range<usize>>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|part| {
            let bad = || CliError::Config(format!("invalid band range {part:?}, expected start..end"));
            let (a, b) = part.split_once("..").ok_or_else(bad)?;
            let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if a >= b {
                return Err(bad());
            }
            Ok(a..b)
        })
        .collect()
}

/// Parses a comma-separated list of exactly `N` block counts.
pub fn parse_blocks<const N: usize>(key: &str, text: &str) -> Result<[usize; N]> {
    let values: Vec<usize> = text
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Config(format!("invalid block list {text:?} for {key}")))?;
    values
        .try_into()
        .map_err(|_| CliError::Config(format!("{key} needs {N} comma-separated counts, got {text:?}")))
}
