//! Flat `key = value` training configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key of
//! [`TrainConfig`] may appear at most once; anything else is rejected by name.
//! Command-line overrides use the same keys and win over the file. When
//! `beta` is set nowhere it follows `code_len` (see
//! [`default_beta`](crate::training::default_beta)).

use std::path::Path;

use crate::error::{Error, Result};
use crate::training::{default_beta, TrainConfig};

pub const KEYS: [&str; 12] = [
    "code_len",
    "batch_size",
    "lr",
    "alpha",
    "beta",
    "epochs",
    "lr_decay_every",
    "lr_decay_factor",
    "momentum",
    "weight_decay",
    "seed",
    "shuffle_iters",
];

/// Code length used when neither the file nor an override sets one.
pub const DEFAULT_CODE_LEN: usize = 16;

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::InvalidArgument(format!("override `{s}` is not key=value"))),
    }
}

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(key, format!("`{v}` is not a non-negative integer")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(bad(key, format!("`{v}` is not a finite number"))),
    }
}

fn apply(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "code_len" => cfg.code_len = parse_usize(key, v)?,
        "batch_size" => cfg.batch_size = parse_usize(key, v)?,
        "lr" => cfg.lr = parse_f64(key, v)?,
        "alpha" => cfg.alpha = parse_f64(key, v)?,
        "beta" => cfg.beta = parse_f64(key, v)?,
        "epochs" => cfg.epochs = parse_usize(key, v)?,
        "lr_decay_every" => cfg.lr_decay_every = parse_usize(key, v)?,
        "lr_decay_factor" => cfg.lr_decay_factor = parse_f64(key, v)?,
        "momentum" => cfg.momentum = parse_f64(key, v)?,
        "weight_decay" => cfg.weight_decay = parse_f64(key, v)?,
        "seed" => cfg.seed = v.parse().map_err(|_| bad(key, format!("`{v}` is not a u64")))?,
        "shuffle_iters" => cfg.shuffle_iters = parse_usize(key, v)?,
        _ => return Err(Error::UnknownKey(key.to_string())),
    }
    Ok(())
}

fn entries(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = parse_override(line).map_err(|_| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            reason: format!("expected key = value, found `{line}`"),
        })?;
        if !KEYS.contains(&k.as_str()) {
            return Err(Error::UnknownKey(k));
        }
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(bad(&k, "set more than once"));
        }
        out.push((k, v));
    }
    Ok(out)
}

/// Parses config text and applies `overrides` on top.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<TrainConfig> {
    parse_config_from(text, Path::new("<config>"), overrides)
}

fn parse_config_from(text: &str, origin: &Path, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let file = entries(text, origin)?;
    for (k, _) in overrides {
        if !KEYS.contains(&k.as_str()) {
            return Err(Error::UnknownKey(k.clone()));
        }
    }
    let all: Vec<&(String, String)> = file.iter().chain(overrides).collect();
    let mut cfg = TrainConfig::for_code_len(DEFAULT_CODE_LEN);
    for (k, v) in &all {
        apply(&mut cfg, k, v)?;
    }
    if !all.iter().any(|(k, _)| k == "beta") {
        cfg.beta = default_beta(cfg.code_len);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (or nothing) and applies `overrides`.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    match path {
        None => parse_config("", overrides),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| Error::Io {
                path: p.to_path_buf(),
                source,
            })?;
            parse_config_from(&text, p, overrides)
        }
    }
}

/// Every key, one per line, in [`KEYS`] order.
pub fn dump_config(cfg: &TrainConfig) -> String {
    let values = [
        cfg.code_len.to_string(),
        cfg.batch_size.to_string(),
        cfg.lr.to_string(),
        cfg.alpha.to_string(),
        cfg.beta.to_string(),
        cfg.epochs.to_string(),
        cfg.lr_decay_every.to_string(),
        cfg.lr_decay_factor.to_string(),
        cfg.momentum.to_string(),
        cfg.weight_decay.to_string(),
        cfg.seed.to_string(),
        cfg.shuffle_iters.to_string(),
    ];
    KEYS.iter()
        .zip(values)
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}
