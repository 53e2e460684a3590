//! Config files, run manifests and output directories.
//!
//! Config files are TOML. Every table is optional and every key inside a
//! table defaults to the built-in value:
//!
//! ```toml
//! seed = 7                 # master seed
//!
//! [data]                   # benchmark generation
//! per_domain = 250
//! split_ratio = [4, 1]
//! target_shift = [{ kind = "gamma", magnitude = 2.2 }]
//!
//! [model]
//! channels = [16, 32, 64]
//!
//! [source]                 # supervised source training
//! epochs = 10
//! learning_rate = 1e-3
//!
//! [adapt]                  # self-training
//! method = "fairld"
//! use_wc = true
//! use_ei = true
//! threshold = { alpha = 0.3, lambda = 0.2 }
//! ```
//!
//! Precedence: command-line flags, then the file, then defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfuda_core::data::BenchmarkSpec;
use sfuda_core::model::ModelDescriptor;
use sfuda_core::trainer::{AdaptationConfig, SourceConfig};
use sfuda_core::{Error, Result};

pub const DEFAULT_SEED: u64 = 7;
pub const HOME_VAR: &str = "SFUDA_STABLE_HOME";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub data: Option<BenchmarkSpec>,
    pub model: Option<ModelDescriptor>,
    pub source: Option<SourceConfig>,
    pub adapt: Option<AdaptationConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }
}

/// Written to `manifest.json` before any work starts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    pub output_dir: String,
    pub master_seed: u64,
    pub tool_version: String,
}

/// `--out`, else `$SFUDA_STABLE_HOME/<name>`, else `runs/<name>`.
pub fn output_dir(flag: Option<&Path>, name: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(HOME_VAR) {
        Some(home) if !home.is_empty() => PathBuf::from(home).join(name),
        _ => PathBuf::from("runs").join(name),
    }
}

/// Claims `dir` for a new run and writes the manifest into it.
///
/// A non-empty directory is refused unless `force` is set and it holds a
/// `manifest.json` from an earlier run, in which case it is replaced.
pub fn start_run(dir: &Path, force: bool, command: &str, config: Option<&Path>, seed: u64) -> Result<()> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::Io { path: p, source: e }
    };
    if dir.exists() {
        let empty = fs::read_dir(dir).map_err(io(dir))?.next().is_none();
        if !empty {
            if !force {
                return Err(Error::Config(format!(
                    "output directory {} is not empty; pass --force to replace it",
                    dir.display()
                )));
            }
            if !dir.join("manifest.json").is_file() {
                return Err(Error::Config(format!(
                    "refusing to replace {}: it was not written by this tool (no manifest.json)",
                    dir.display()
                )));
            }
        }
        fs::remove_dir_all(dir).map_err(io(dir))?;
    }
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::create_dir(dir).map_err(io(dir))?;
    let manifest = RunManifest {
        command: command.to_string(),
        config_path: config.map(|p| p.display().to_string()).unwrap_or_default(),
        output_dir: dir.display().to_string(),
        master_seed: seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(io(&path))
}
