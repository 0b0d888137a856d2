//! Flat key=value run configuration. Every training run writes its resolved
//! configuration next to its outputs so results can be reproduced.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: expected key=value, got {text:?}")]
    Malformed { path: String, line: usize, text: String },
    #[error("key {key}: cannot parse {value:?} as {ty}")]
    BadValue { key: String, value: String, ty: &'static str },
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                text: raw.to_string(),
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Config { map })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, ty: &'static str) -> Result<Option<T>, ConfigError> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                ty,
            }),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        Ok(self.parse::<usize>(key, "usize")?.unwrap_or(default))
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        Ok(self.parse::<u64>(key, "u64")?.unwrap_or(default))
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.parse::<f64>(key, "f64")?.unwrap_or(default))
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        Ok(self.parse::<bool>(key, "bool")?.unwrap_or(default))
    }

    /// Serialize as sorted key=value lines.
    pub fn write(&self, path: &Path) -> Result<(), ConfigError> {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# comment\nepochs = 12\nlr=0.003\n\nseed=5\n").unwrap();
        let cfg = Config::from_file(&path).unwrap();
        assert_eq!(cfg.get_usize("epochs", 0).unwrap(), 12);
        assert_eq!(cfg.get_f64("lr", 0.0).unwrap(), 0.003);
        assert_eq!(cfg.get_u64("seed", 0).unwrap(), 5);
        assert_eq!(cfg.get_usize("missing", 9).unwrap(), 9);

        let out = dir.path().join("resolved.conf");
        cfg.write(&out).unwrap();
        let re = Config::from_file(&out).unwrap();
        assert_eq!(re.get_usize("epochs", 0).unwrap(), 12);
    }

    #[test]
    fn malformed_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        fs::write(&path, "epochs 12\n").unwrap();
        assert!(matches!(Config::from_file(&path), Err(ConfigError::Malformed { line: 1, .. })));
    }

    #[test]
    fn bad_value_names_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        fs::write(&path, "lr=fast\n").unwrap();
        let cfg = Config::from_file(&path).unwrap();
        let err = cfg.get_f64("lr", 0.0).unwrap_err();
        assert!(err.to_string().contains("lr"));
    }
}
