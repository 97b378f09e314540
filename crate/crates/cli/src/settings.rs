//! Optional `key=value` config file merged under command-line flags.

use std::path::Path;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use pix2affect::manifest::Manifest;

use crate::Exit;

#[derive(Debug, Default)]
pub struct Settings {
    file: Manifest,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => Manifest::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => Manifest::new(),
        };
        Ok(Self { file })
    }

    /// The flag if given, else the config-file value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.file.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| Exit::usage(format!("config value {key}={raw} is malformed")).into()),
            None => Ok(default),
        }
    }

    pub fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.file
            .get(key)
            .map(|raw| {
                raw.parse()
                    .map_err(|_| Exit::usage(format!("config value {key}={raw} is malformed")).into())
            })
            .transpose()
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Starts a run manifest with the fields every command records.
pub fn run_manifest(command: &str, seed: u64, started: u64) -> Manifest {
    let mut m = Manifest::new();
    m.set("command", command)
        .set("tool_version", env!("CARGO_PKG_VERSION"))
        .set("seed", seed)
        .set("started_unix", started);
    m
}

pub fn finish_manifest(mut m: Manifest, path: &Path) -> Result<()> {
    m.set("finished_unix", unix_now());
    m.save(path).with_context(|| format!("writing manifest {}", path.display()))
}
