//! Optional key=value config file plus environment defaults.
//!
//! Precedence everywhere: command-line flag, then config file, then the
//! built-in default. `DEFACER_DATA_DIR` supplies the data directory when
//! neither flag nor config names one.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use defacer_core::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected 'key = value'",
                    path.display(),
                    lineno + 1
                )));
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("config key '{key}' has unparsable value '{raw}'"))
            }),
        }
    }

    pub fn get_path(&self, key: &str) -> Option<PathBuf> {
        self.values.get(key).map(PathBuf::from)
    }
}

/// flag > config file > env (data dir only) > default
pub fn pick<T>(flag: Option<T>, config: Option<T>, default: T) -> T {
    flag.or(config).unwrap_or(default)
}

pub fn resolve_data_dir(flag: Option<PathBuf>, config: &FileConfig) -> Result<PathBuf> {
    if let Some(dir) = flag {
        return Ok(dir);
    }
    if let Some(dir) = config.get_path("data_dir") {
        return Ok(dir);
    }
    if let Ok(dir) = std::env::var("DEFACER_DATA_DIR") {
        return Ok(PathBuf::from(dir));
    }
    Err(Error::Usage(
        "no data directory: pass --data, set data_dir in the config, or export DEFACER_DATA_DIR"
            .into(),
    ))
}
