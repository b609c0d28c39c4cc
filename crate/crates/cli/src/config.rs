//! `--config` files: `key = value` lines that fill in flags absent from argv.

use std::fs;

use clap::{ArgAction, Command};

const GLOBAL_VALUE_FLAGS: [&str; 2] = ["--threads", "--config"];

fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter().skip(1);
    while let Some(tok) = it.next() {
        if tok == "--" {
            break;
        }
        if tok == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = tok.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    None
}

fn subcommand_name(cmd: &Command, argv: &[String]) -> Option<String> {
    let mut it = argv.iter().skip(1);
    while let Some(tok) = it.next() {
        if GLOBAL_VALUE_FLAGS.contains(&tok.as_str()) {
            it.next();
            continue;
        }
        if tok.starts_with('-') {
            continue;
        }
        return cmd
            .get_subcommands()
            .find(|s| s.get_name() == tok)
            .map(|s| s.get_name().to_string());
    }
    None
}

fn given(argv: &[String], long: &str) -> bool {
    let flag = format!("--{long}");
    let prefix = format!("--{long}=");
    argv.iter().any(|t| *t == flag || t.starts_with(&prefix))
}

/// Appends a flag for every config entry whose flag argv does not already carry.
pub fn merge_config(cmd: &Command, mut argv: Vec<String>) -> Result<Vec<String>, String> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("reading config {path}: {e}"))?;
    let entries = pcrf::unary_net::parse_key_values(&text).map_err(|e| format!("config {path}: {e}"))?;
    let Some(sub_name) = subcommand_name(cmd, &argv) else {
        return Ok(argv);
    };
    let sub = cmd
        .find_subcommand(&sub_name)
        .expect("subcommand name came from the command");

    let mut extra = Vec::new();
    for (key, value) in entries {
        let long = key.replace('_', "-");
        if long == "config" {
            return Err(format!("config {path}: nested 'config' keys are not supported"));
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(long.as_str()))
            .ok_or_else(|| format!("config {path}: unknown key '{key}' for '{sub_name}'"))?;
        if given(&argv, &long) {
            continue;
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            let on: bool = value
                .parse()
                .map_err(|_| format!("config {path}: '{key}' expects true or false, got '{value}'"))?;
            if on {
                extra.push(format!("--{long}"));
            }
        } else {
            extra.push(format!("--{long}={value}"));
        }
    }
    argv.extend(extra);
    Ok(argv)
}
