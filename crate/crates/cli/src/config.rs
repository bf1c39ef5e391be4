//! Flat `key = value` config files.
//!
//! Keys use the same spellings as the long command-line flags. Flags beat
//! config values, config values beat built-in defaults. Duplicate or unknown
//! keys are rejected with their line number so typos fail loudly instead of
//! silently falling back to defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Every key any subcommand understands. A config file may hold keys for
/// several pipeline stages at once; each stage reads only its own.
pub const KNOWN_KEYS: &[&str] = &[
    "batch-size",
    "center-metric",
    "curve-dir",
    "curve-out",
    "decoder-hidden",
    "dropout",
    "embeddings",
    "epochs",
    "fc-width",
    "features-dir",
    "fold",
    "input",
    "iters",
    "jobs",
    "kernels-per-path",
    "lambda-center",
    "lambda-recon",
    "manifest",
    "metrics-out",
    "model",
    "model-out",
    "out",
    "out-dir",
    "per-class",
    "percents",
    "perplexity",
    "seed",
    "sessions",
    "split",
    "total",
    "variant",
];

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Syntax { line: usize, text: String },
    UnknownKey { line: usize, key: String },
    DuplicateKey { line: usize, key: String, first: usize },
    BadValue { key: String, value: String, expected: &'static str },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "cannot read config: {e}"),
            ConfigError::Syntax { line, text } => {
                write!(f, "config line {line}: expected `key = value`, got `{text}`")
            }
            ConfigError::UnknownKey { line, key } => {
                write!(f, "config line {line}: unknown key `{key}`")
            }
            ConfigError::DuplicateKey { line, key, first } => {
                write!(f, "config line {line}: duplicate key `{key}` (first set on line {first})")
            }
            ConfigError::BadValue { key, value, expected } => {
                write!(f, "config key `{key}`: cannot parse `{value}` as {expected}")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

/// Parsed config file: key to (value, defining line).
#[derive(Debug, Default)]
pub struct FileConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
        FileConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<FileConfig, ConfigError> {
        let mut entries: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: content.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    text: content.to_string(),
                });
            }
            if !KNOWN_KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if let Some(&(_, first)) = entries.get(key) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                    first,
                });
            }
            entries.insert(key.to_string(), (value.to_string(), line));
        }
        Ok(FileConfig { entries })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Typed lookup; parse failures carry the key name.
    pub fn get<T: FromStr>(&self, key: &str, expected: &'static str) -> Result<Option<T>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                expected,
            }),
        }
    }
}

/// Flag beats config beats default; records the effective value for the
/// resolved-settings report.
pub struct Resolver<'c> {
    config: &'c FileConfig,
    resolved: Vec<(String, String)>,
}

impl<'c> Resolver<'c> {
    pub fn new(config: &'c FileConfig) -> Resolver<'c> {
        Resolver {
            config,
            resolved: Vec::new(),
        }
    }

    pub fn value<T: FromStr + fmt::Display>(
        &mut self,
        flag: Option<T>,
        key: &str,
        expected: &'static str,
        default: T,
    ) -> Result<T, ConfigError> {
        let v = match flag {
            Some(v) => v,
            None => self.config.get::<T>(key, expected)?.unwrap_or(default),
        };
        self.resolved.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    /// Like [`Resolver::value`] but with no default; absent everywhere is an
    /// error because the subcommand cannot run without it.
    pub fn required<T: FromStr + fmt::Display>(
        &mut self,
        flag: Option<T>,
        key: &str,
        expected: &'static str,
    ) -> Result<T, ConfigError> {
        let v = match flag {
            Some(v) => v,
            None => self
                .config
                .get::<T>(key, expected)?
                .ok_or(ConfigError::BadValue {
                    key: key.to_string(),
                    value: "<missing>".to_string(),
                    expected,
                })?,
        };
        self.resolved.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    pub fn optional<T: FromStr + fmt::Display>(
        &mut self,
        flag: Option<T>,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.config.get::<T>(key, expected)?,
        };
        if let Some(v) = &v {
            self.resolved.push((key.to_string(), v.to_string()));
        }
        Ok(v)
    }

    /// One `key = value` line per resolved setting, in resolution order.
    pub fn report(&self, subcommand: &str) -> String {
        let mut out = String::new();
        for (k, v) in &self.resolved {
            out.push_str(&format!("{subcommand}: {k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_values() {
        let cfg = FileConfig::parse(
            "# pipeline defaults\n\
             epochs = 40\n\
             \n\
             input = mfcc   # trailing comment\n\
             dropout=0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.raw("epochs"), Some("40"));
        assert_eq!(cfg.raw("input"), Some("mfcc"));
        assert_eq!(cfg.raw("dropout"), Some("0.5"));
        assert_eq!(cfg.get::<usize>("epochs", "integer").unwrap(), Some(40));
        assert_eq!(cfg.raw("fold"), None);
    }

    #[test]
    fn rejects_duplicates_with_both_line_numbers() {
        let err = FileConfig::parse("epochs = 1\nseed = 2\nepochs = 3\n").unwrap_err();
        match err {
            ConfigError::DuplicateKey { line, key, first } => {
                assert_eq!((line, key.as_str(), first), (3, "epochs", 1));
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn rejects_unknown_keys_and_syntax() {
        assert!(matches!(
            FileConfig::parse("epochz = 1\n"),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(
            FileConfig::parse("epochs\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            FileConfig::parse("epochs =\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn resolver_prefers_flag_then_config_then_default() {
        let cfg = FileConfig::parse("epochs = 7\n").unwrap();
        let mut r = Resolver::new(&cfg);
        assert_eq!(r.value(Some(3usize), "epochs", "integer", 1).unwrap(), 3);
        assert_eq!(r.value(None::<usize>, "epochs", "integer", 1).unwrap(), 7);
        assert_eq!(r.value(None::<usize>, "fold", "integer", 1).unwrap(), 1);
        assert_eq!(
            r.report("train"),
            "train: epochs = 3\ntrain: epochs = 7\ntrain: fold = 1\n"
        );
        let bad = FileConfig::parse("epochs = soon\n").unwrap();
        let mut r = Resolver::new(&bad);
        assert!(r.value(None::<usize>, "epochs", "integer", 1).is_err());
    }
}
