//! `--config` TOML file. Command-line flags win over file values.

use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub index: Option<PathBuf>,
    pub documents: Option<PathBuf>,
    pub embedder: Option<String>,
    pub provider: Option<String>,
    pub toolchain: Option<PathBuf>,
    pub k_values: Option<Vec<usize>>,
    #[serde(default)]
    pub retrieval: RetrievalFile,
    #[serde(default)]
    pub generation: GenerationFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalFile {
    pub pool_size: Option<usize>,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
    pub k_max: Option<usize>,
    pub mode: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationFile {
    pub profile: Option<String>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_tokens: Option<u32>,
    pub samples: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl FileConfig {
    /// Relative paths in the file resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.index, &mut cfg.documents, &mut cfg.toolchain].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(spec) = &cfg.provider {
            if let Some(file) = spec.strip_prefix("mock:") {
                if Path::new(file).is_relative() {
                    cfg.provider = Some(format!("mock:{}", base.join(file).display()));
                }
            }
        }
        Ok(cfg)
    }
}
