//! Run configuration: flat `key = value` lines grouped under `[section]`
//! headers. Every key has a default in [`SCHEMA`]; unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// `(section, key, default)`. An empty default means "unset".
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("run", "seed", "1"),
    ("channel", "file", ""),
    ("channel", "modulation", "pam4"),
    ("train", "batch_size", "8192"),
    ("train", "learning_rate", "1e-3"),
    ("train", "beta1", "0.9"),
    ("train", "beta2", "0.999"),
    ("train", "epsilon", "1e-8"),
    ("train", "train_symbols", "20000000"),
    ("train", "valid_symbols", "2000000"),
    ("train", "test_symbols", "10000000"),
    ("train", "snr_db", "14"),
    ("train", "validate_every", "100"),
    ("train", "state_every", "500"),
    ("neuraleq", "window", "12"),
    ("neuraleq", "target", "4"),
    ("neuraleq", "width", "32"),
    ("neuraleq", "checkpoint", ""),
    ("mlp", "window", "12"),
    ("mlp", "target", "4"),
    ("mlp", "hidden", "216, 376"),
    ("ffe", "taps", "8"),
    ("dfe", "ff", "8"),
    ("dfe", "fb", "3"),
    ("fb", "state_cap", "1048576"),
    ("sweep", "snr_db", "10, 12, 14"),
    ("sweep", "roster", "ffe, dfe, fb"),
    ("sweep", "symbols", "1000000"),
    ("sweep", "train_snr_db", ""),
    ("prune", "target_sparsity", "0.5"),
    ("prune", "fraction", "0.1"),
    ("prune", "schedule", "geometric"),
    ("prune", "finetune_batches", "500"),
    ("prune", "eval_symbols", "2000000"),
    ("robustness", "p", "0, 0.01, 0.02"),
    ("robustness", "trials", "20"),
    ("robustness", "symbols", "200000"),
    ("robustness", "snr_db", "14"),
    ("robustness", "roster", "dfe, neuraleq"),
    ("gridsearch", "widths", "8, 16, 32"),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Relative paths in the config resolve against this directory.
    base: PathBuf,
}

fn known(key: &str) -> bool {
    SCHEMA.iter().any(|(s, k, _)| format!("{s}.{k}") == key)
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = SCHEMA
            .iter()
            .map(|(s, k, v)| (format!("{s}.{k}"), v.to_string()))
            .collect();
        Self { values, base: PathBuf::from(".") }
    }
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self { base: base.to_path_buf(), ..Self::default() };
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("line {}: unterminated section header", n + 1))?;
                section = name.trim().to_string();
                if !SCHEMA.iter().any(|(s, _, _)| *s == section) {
                    bail!("line {}: unknown config section '{section}'", n + 1);
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected 'key = value', got '{line}'", n + 1))?;
            let key = key.trim();
            let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            cfg.set(&full, value.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &base).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            bail!("unknown config key '{key}'");
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("override '{assignment}' is not of the form section.key=value"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key {key} not in schema"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        if raw.is_empty() {
            bail!("config key '{key}' is required");
        }
        raw.parse().map_err(|e| anyhow!("config key '{key}': cannot parse '{raw}': {e}"))
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| anyhow!("config key '{key}': cannot parse '{s}': {e}")))
            .collect()
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        let raw = self.get::<String>(key)?;
        Ok(self.resolve(&raw))
    }

    pub fn optional_path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.optional::<String>(key)?.map(|p| self.resolve(&p)))
    }

    fn resolve(&self, raw: &str) -> PathBuf {
        let p = Path::new(raw);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Every key with its resolved value, grouped by section.
    pub fn resolved(&self) -> BTreeMap<String, BTreeMap<String, String>> {
        let mut out: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for (full, v) in &self.values {
            let (s, k) = full.split_once('.').expect("qualified key");
            out.entry(s.to_string()).or_default().insert(k.to_string(), v.clone());
        }
        out
    }
}
