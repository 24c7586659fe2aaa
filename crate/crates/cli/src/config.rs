//! Key table shared by config files and command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgMatches, Command};
use vsprefill_core::{Error, Result};

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const KEYS: &[Key] = &[
    key("n", "256", "sequence length of generated samples"),
    key("d", "16", "head dimension of generated samples"),
    key("d_h", "64", "indexer hidden width"),
    key("tau_v", "0.9", "cumulative mass threshold for vertical lines"),
    key("tau_s", "0.9", "cumulative mass threshold for slash lines"),
    key("min_budget", "1", "lower clamp on lines kept per direction"),
    key("max_budget", "0", "upper clamp on lines kept per direction (0 = n)"),
    key("block", "64", "tile size for streaming kernels"),
    key("steps", "2000", "optimizer steps"),
    key("lr_peak", "0.001", "peak learning rate"),
    key("warmup", "100", "linear warmup steps"),
    key("accumulation", "1", "samples accumulated per optimizer step"),
    key("seed", "0", "root seed"),
    key("eps", "1e-8", "smoothing added to the target inside the KL loss"),
    key("kl_direction", "forward", "forward = KL(pred || target), reverse = KL(target || pred)"),
    key("slash_mapping", "anchor_last", "token-to-offset map for slash logits: anchor_last or identity"),
    key("count", "32", "samples written by gen"),
    key("noise_sigma", "1.0", "per-coordinate noise on generated Q and K"),
    key("rope_base", "10000", "rotary base"),
    key("input", "", "sample directory or dataset root"),
    key("output", "", "output path"),
    key("checkpoint", "", "indexer checkpoint path"),
    key("scores", "", "score tensor read by select"),
    key("pattern", "", "index file for attend and recall (empty = dense)"),
    key("top_k", "8", "rows in the aggregate summary table"),
    key("head_reduction", "mean", "how aggregate combines heads of a dataset: mean or sum"),
    key("log_every", "100", "train prints the loss every this many steps"),
    key("D", "8", "dimension of the Gaussian query/key model"),
    key("offsets", "64", "offsets checked by theory, 0..offsets"),
    key("samples", "200000", "Monte Carlo draws"),
    key("common_random", "true", "reuse draws across offsets in the Monte Carlo"),
    key("ablation", "sparsity", "bench table: sparsity, loss or inputs"),
    key("train_samples", "32", "bench training heads"),
    key("eval_samples", "16", "bench evaluation heads"),
    key("bench_seeds", "5", "seeds per bench variant"),
];

pub fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Adds `--config` and one flag per key.
pub fn add_flags(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value file applied before flags"),
    );
    KEYS.iter().fold(cmd, |cmd, k| {
        let help = if k.default.is_empty() {
            format!("{} [default: none]", k.help)
        } else {
            format!("{} [default: {}]", k.help, k.default)
        };
        cmd.arg(Arg::new(k.name).long(k.name).value_name("VALUE").help(help))
    })
}

#[derive(Clone, Debug)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl Config {
    /// Defaults, then the `--config` file, then explicit flags.
    pub fn resolve(m: &ArgMatches) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = m.get_one::<String>("config") {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Format(format!("cannot read config {path}: {e}")))?;
            cfg.apply_text(&text)?;
        }
        for k in KEYS {
            if let Some(v) = m.get_one::<String>(k.name) {
                cfg.set(k.name, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let k = lookup(name).ok_or_else(|| Error::config(format!("unknown config key {name:?}")))?;
        self.values.insert(k.name, value.to_string());
        Ok(())
    }

    /// `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("config line {}: expected key = value", i + 1))
            })?;
            let name = name.trim();
            if lookup(name).is_none() {
                return Err(Error::config(format!(
                    "config line {}: unknown key {name:?}",
                    i + 1
                )));
            }
            if seen.contains(&name) {
                return Err(Error::config(format!(
                    "config line {}: duplicate key {name:?}",
                    i + 1
                )));
            }
            seen.push(name);
            self.set(name, value.trim())?;
        }
        Ok(())
    }

    pub fn raw(&self, name: &str) -> &str {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("key {name} missing from table"))
    }

    pub fn get<T>(&self, name: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let v = self.raw(name);
        v.parse()
            .map_err(|e| Error::config(format!("invalid value {v:?} for {name}: {e}")))
    }

    /// A path key that must be set.
    pub fn path(&self, name: &str) -> Result<PathBuf> {
        self.opt_path(name)
            .ok_or_else(|| Error::config(format!("--{name} is required")))
    }

    pub fn opt_path(&self, name: &str) -> Option<PathBuf> {
        let v = self.raw(name);
        (!v.is_empty()).then(|| Path::new(v).to_path_buf())
    }
}
