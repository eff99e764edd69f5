//! JSON run configuration merged into argv.
//!
//! A config file is an object whose keys are long flag names without the
//! leading dashes. Top-level keys apply to every subcommand that has the
//! flag; an object under a subcommand name applies to that subcommand only.
//! Config values are spliced in right after the subcommand, so flags given
//! on the command line come later and win.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Command;
use serde_json::{Map, Value};

pub fn merge_config(cmd: &Command, argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let Some(pos) = argv
        .iter()
        .position(|a| cmd.find_subcommand(a.to_string_lossy().as_ref()).is_some())
    else {
        return Ok(argv);
    };
    let name = argv[pos].to_string_lossy().into_owned();
    let sub = cmd.find_subcommand(&name).expect("checked above");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let root: Map<String, Value> = serde_json::from_str(&text)
        .with_context(|| format!("config {} is not a JSON object", path.display()))?;

    let mut extra = Vec::new();
    for (key, value) in &root {
        if let Some(other) = cmd.find_subcommand(key) {
            if other.get_name() != name {
                continue;
            }
            let Value::Object(section) = value else {
                bail!("config section `{key}` must be an object");
            };
            for (k, v) in section {
                if !push_flag(sub, k, v, &mut extra)? {
                    bail!("config key `{key}.{k}` is not a flag of `{name}`");
                }
            }
        } else if !push_flag(sub, key, value, &mut extra)? && !known_anywhere(cmd, key) {
            bail!("config key `{key}` is not a flag of any subcommand");
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

fn config_path(argv: &[OsString]) -> Option<std::path::PathBuf> {
    let mut it = argv.iter().map(|a| a.to_string_lossy());
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(|p| Path::new(p.as_ref()).to_path_buf());
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(Path::new(p).to_path_buf());
        }
    }
    None
}

fn known_anywhere(cmd: &Command, key: &str) -> bool {
    cmd.get_subcommands()
        .any(|s| s.get_arguments().any(|a| a.get_long() == Some(key)))
}

/// Appends `--key value` when `sub` has the flag; false otherwise.
fn push_flag(sub: &Command, key: &str, value: &Value, out: &mut Vec<OsString>) -> Result<bool> {
    let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key)) else {
        return Ok(false);
    };
    if key == "config" {
        return Ok(true);
    }
    let flag = format!("--{key}");
    let takes_value = arg.get_action().takes_values();
    match value {
        Value::Bool(b) if !takes_value => {
            if *b {
                out.push(flag.into());
            }
        }
        Value::Null => {}
        Value::Object(_) => bail!("config key `{key}` must not be an object"),
        v if !takes_value => bail!("config key `{key}` is a switch; use true or false, got {v}"),
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(scalar).collect::<Result<_>>()?;
            out.push(flag.into());
            out.push(parts.join(",").into());
        }
        v => {
            out.push(flag.into());
            out.push(scalar(v)?.into());
        }
    }
    Ok(true)
}

fn scalar(v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        other => bail!("expected a scalar config value, got {other}"),
    })
}
