//! Minimal flag parsing: `--key value`, `--key=value`, and boolean switches.
//! Unknown flags are usage errors so typos never pass silently.

use std::collections::{BTreeMap, BTreeSet};

pub struct ArgSpec {
    pub valued: &'static [&'static str],
    pub switches: &'static [&'static str],
}

#[derive(Debug, Default)]
pub struct Args {
    values: BTreeMap<String, String>,
    switches: BTreeSet<String>,
}

pub enum ArgError {
    Unknown(String),
    MissingValue(String),
    Missing(&'static str),
    Invalid { flag: String, message: String },
}

impl std::fmt::Display for ArgError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ArgError::Unknown(flag) => write!(f, "unknown flag {flag}"),
            ArgError::MissingValue(flag) => write!(f, "flag {flag} needs a value"),
            ArgError::Missing(flag) => write!(f, "missing required flag --{flag}"),
            ArgError::Invalid { flag, message } => write!(f, "flag --{flag}: {message}"),
        }
    }
}

impl Args {
    pub fn parse(raw: &[String], spec: &ArgSpec) -> Result<Args, ArgError> {
        let mut args = Args::default();
        let mut it = raw.iter().peekable();
        while let Some(token) = it.next() {
            let Some(stripped) = token.strip_prefix("--") else {
                return Err(ArgError::Unknown(token.clone()));
            };
            let (key, inline) = match stripped.split_once('=') {
                Some((k, v)) => (k.to_string(), Some(v.to_string())),
                None => (stripped.to_string(), None),
            };
            if spec.switches.contains(&key.as_str()) {
                if inline.is_some() {
                    return Err(ArgError::Invalid {
                        flag: key,
                        message: "switch takes no value".into(),
                    });
                }
                args.switches.insert(key);
            } else if spec.valued.contains(&key.as_str()) {
                let value = match inline {
                    Some(v) => v,
                    None => match it.next() {
                        Some(v) => v.clone(),
                        None => return Err(ArgError::MissingValue(format!("--{key}"))),
                    },
                };
                args.values.insert(key, value);
            } else {
                return Err(ArgError::Unknown(format!("--{key}")));
            }
        }
        Ok(args)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &'static str) -> Result<&str, ArgError> {
        self.get(key).ok_or(ArgError::Missing(key))
    }

    pub fn switch(&self, key: &str) -> bool {
        self.switches.contains(key)
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ArgError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ArgError::Invalid {
                flag: key.to_string(),
                message: format!("cannot parse {v:?}"),
            }),
        }
    }

    /// Resolved key/value pairs for the provenance manifest.
    pub fn resolved(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .values
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for s in &self.switches {
            out.push((s.clone(), "true".into()));
        }
        out
    }
}
