//! Flat `key=value` config files, merged underneath command-line flags.
//!
//! Keys are long flag names without the leading dashes (`k=3`,
//! `no-affinity=true`). Underscores are accepted in place of hyphens.
//! Blank lines and lines starting with `#` are ignored.

use std::ffi::OsString;
use std::fs;

use anyhow::{bail, Context, Result};

/// Turns a config file into flag tokens.
pub fn config_tokens(path: &str) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config file {path}"))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{path}: line {}: expected key=value", n + 1);
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() || key == "config" {
            bail!("{path}: line {}: invalid key '{key}'", n + 1);
        }
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                out.push(format!("--{key}").into());
                out.push(value.into());
            }
        }
    }
    Ok(out)
}

/// Finds `--config <path>` or `--config=<path>` after the subcommand and
/// returns the argument list with the file's tokens spliced in ahead of the
/// user's flags, so flags given explicitly win.
pub fn merge_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("--config") => match it.next() {
                Some(p) => path = Some(p.to_string_lossy().into_owned()),
                None => rest.push(a),
            },
            Some(s) if s.starts_with("--config=") => {
                path = Some(s["--config=".len()..].to_string())
            }
            _ => rest.push(a),
        }
    }
    let Some(path) = path else { return Ok(rest) };
    if rest.len() < 2 {
        return Ok(rest);
    }
    let mut merged: Vec<OsString> = rest[..2].to_vec();
    merged.extend(config_tokens(&path)?);
    merged.extend(rest.into_iter().skip(2));
    Ok(merged)
}
