//! Flat `key = value` configuration files with flag overrides, and the
//! manifest every command writes for exact reruns.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

/// Every key a config file may set. Command-line flags override file values.
pub const KNOWN_KEYS: &[&str] = &[
    "sim.kind",
    "sim.n",
    "sim.n_prime",
    "sim.k",
    "sim.k_prime",
    "sim.d",
    "sim.seed",
    "sim.beta_a",
    "sim.beta_b",
    "sim.preset",
    "sim.shared",
    "embed.type",
    "embed.m",
    "embed.isolated",
    "prior.kappa0",
    "prior.nu0",
    "prior.lambda0",
    "prior.alpha",
    "prior.beta",
    "prior.omega",
    "prior.delta",
    "prior.xi",
    "prior.l_max",
    "prior.d_prior",
    "prior.second_level",
    "prior.m_cap",
    "prior.k_max",
    "run.seed",
    "run.iters",
    "run.burnin",
    "run.thin",
    "run.chains",
    "run.init_k",
    "run.mode",
    "run.marginalize_d",
    "run.calibrate",
    "run.d_init",
    "sum.pear",
    "sum.k",
];

#[derive(Debug, Default, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (ix, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    bail!("{}:{}: expected `key = value`", path.display(), ix + 1);
                };
                let key = key.trim();
                let value = value.trim();
                if !KNOWN_KEYS.contains(&key) {
                    bail!("{}:{}: unknown config key `{key}`", path.display(), ix + 1);
                }
                values.insert(key.to_string(), value.to_string());
            }
        }
        Ok(Config { values })
    }

    /// Resolve one setting: explicit flag > config file > default.
    pub fn get<T: std::str::FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "unknown key {key}");
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("config key `{key}` = `{raw}`: {e}")),
            None => Ok(default),
        }
    }

    pub fn get_opt<T: std::str::FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config key `{key}` = `{raw}`: {e}")),
            None => Ok(None),
        }
    }
}

/// Accumulates the fully resolved settings and input digests, then writes
/// `manifest.json` so a run can be reproduced exactly.
pub struct Manifest {
    command: String,
    resolved: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    started: std::time::Instant,
}

impl Manifest {
    pub fn new(command: &str) -> Manifest {
        Manifest {
            command: command.to_string(),
            resolved: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started: std::time::Instant::now(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes =
            std::fs::read(path).with_context(|| format!("digesting {}", path.display()))?;
        let digest = Sha256::digest(&bytes);
        self.inputs
            .insert(path.display().to_string(), format!("{digest:x}"));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let doc = serde_json::json!({
            "command": self.command,
            "resolved": self.resolved,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_clock_secs": self.started.elapsed().as_secs_f64(),
            "version": env!("CARGO_PKG_VERSION"),
        });
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&doc)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
