//! Flat `key = value` run configuration.
//!
//! Every subcommand declares its keys with defaults. Values are resolved in
//! order: defaults, then the `--config` file, then `--set key=value`, then
//! dedicated flags. Unknown keys are rejected. The resolved set is printed
//! in the same file format, so any run can be repeated with `--config`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    values: BTreeMap<&'static str, String>,
    /// Keys given by file, `--set` or flag rather than by the schema.
    explicit: BTreeSet<&'static str>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_text(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{origin}:{}: expected `key = value`, got `{raw}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_set(item: &str) -> Result<(String, String), CliError> {
    let (k, v) = item
        .split_once('=')
        .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Resolved {
    pub fn resolve(
        schema: &[Key],
        file: Option<&Path>,
        sets: &[String],
        flags: &[(&'static str, Option<String>)],
    ) -> Result<Self, CliError> {
        let mut values: BTreeMap<&'static str, String> =
            schema.iter().map(|k| (k.name, k.default.to_string())).collect();
        let mut explicit = BTreeSet::new();
        let mut apply = |k: &str, v: String, origin: &str| -> Result<(), CliError> {
            let slot = schema
                .iter()
                .find(|s| s.name == k)
                .ok_or_else(|| {
                    let known: Vec<&str> = schema.iter().map(|s| s.name).collect();
                    usage(format!("unknown key `{k}` in {origin}; known keys: {}", known.join(", ")))
                })?;
            values.insert(slot.name, v);
            explicit.insert(slot.name);
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_text(&text, &path.display().to_string())? {
                apply(&k, v, &path.display().to_string())?;
            }
        }
        for s in sets {
            let (k, v) = parse_set(s)?;
            apply(&k, v, "--set")?;
        }
        for (k, v) in flags {
            if let Some(v) = v {
                apply(k, v.clone(), "flags")?;
            }
        }
        Ok(Self { values, explicit })
    }

    pub fn raw(&self, k: &str) -> &str {
        self.values.get(k).map(String::as_str).unwrap_or_else(|| panic!("key `{k}` is not in the schema"))
    }

    pub fn get<T: FromStr>(&self, k: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(k);
        v.parse().map_err(|e| usage(format!("{k} = `{v}`: {e}")))
    }

    /// Empty string means unset.
    pub fn opt<T: FromStr>(&self, k: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(k).is_empty() {
            Ok(None)
        } else {
            self.get(k).map(Some)
        }
    }

    pub fn path(&self, k: &str) -> Result<PathBuf, CliError> {
        self.opt(k)?.ok_or_else(|| usage(format!("`{k}` is required")))
    }

    /// Comma-separated list; empty string is the empty list.
    pub fn list<T: FromStr>(&self, k: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(k)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| usage(format!("{k}: `{s}`: {e}"))))
            .collect()
    }

    pub fn is_explicit(&self, k: &str) -> bool {
        self.explicit.contains(k)
    }

    /// Sets `k` unless the user gave it (preset-dependent defaults).
    pub fn fill(&mut self, k: &'static str, v: impl ToString) {
        let slot = self.values.get_mut(k).unwrap_or_else(|| panic!("key `{k}` is not in the schema"));
        if !self.explicit.contains(k) {
            *slot = v.to_string();
        }
    }

    /// The resolved configuration in config-file syntax.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Help text listing every key of a schema.
pub fn describe(schema: &[Key]) -> String {
    let mut out = String::new();
    for k in schema {
        let d = if k.default.is_empty() { "unset" } else { k.default };
        let _ = writeln!(out, "  {:<22} {} [default: {d}]", k.name, k.help);
    }
    out
}
