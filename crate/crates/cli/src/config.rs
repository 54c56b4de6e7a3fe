//! `key = value` settings files. Keys are long flag names (`-` or `_`);
//! keys before any `[section]` apply to every command that accepts them,
//! keys under `[train]` only to `train`, and so on. The settings become
//! flags placed ahead of the user's own, which therefore win.

use std::fs;
use std::path::Path;

use anyhow::Context as _;
use clap::{ArgAction, Command};

use crate::Usage;

#[derive(Debug, PartialEq)]
struct Setting {
    section: Option<String>,
    key: String,
    value: String,
    line: usize,
}

fn parse(text: &str, path: &Path) -> Result<Vec<Setting>, Usage> {
    let mut section = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(name.trim().to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Usage(format!("{}:{}: expected `key = value`", path.display(), i + 1)))?;
        let v = v.trim();
        let v = v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v);
        out.push(Setting {
            section: section.clone(),
            key: k.trim().replace('_', "-"),
            value: v.to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

/// Position of the subcommand name, skipping the global `--config FILE`.
fn subcommand_index(argv: &[String], root: &Command) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let a = &argv[i];
        if a == "--config" {
            i += 2;
            continue;
        }
        if root.find_subcommand(a).is_some() {
            return Some(i);
        }
        if !a.starts_with('-') {
            return None;
        }
        i += 1;
    }
    None
}

fn config_path(argv: &[String]) -> Option<String> {
    argv.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            argv.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    })
}

pub fn merge_config(argv: Vec<String>, root: &Command) -> anyhow::Result<Vec<String>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
    let settings = parse(&text, path)?;
    let Some(at) = subcommand_index(&argv, root) else {
        return Ok(argv);
    };
    let name = argv[at].clone();
    let sub = root.find_subcommand(&name).expect("index points at a subcommand");
    let mut injected = Vec::new();
    for s in settings {
        let known_anywhere = root
            .get_subcommands()
            .any(|c| c.get_arguments().any(|a| a.get_long() == Some(s.key.as_str())));
        if !known_anywhere || s.key == "config" {
            return Err(Usage(format!("{}:{}: unknown setting `{}`", path.display(), s.line, s.key)).into());
        }
        if s.section.as_deref().is_some_and(|sec| sec != name) {
            continue;
        }
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(s.key.as_str())) else {
            if s.section.is_some() {
                return Err(Usage(format!("{}:{}: `{name}` has no setting `{}`", path.display(), s.line, s.key)).into());
            }
            continue;
        };
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match s.value.as_str() {
                "true" => injected.push(format!("--{}", s.key)),
                "false" => {}
                other => {
                    return Err(Usage(format!(
                        "{}:{}: `{}` takes true or false, got {other:?}",
                        path.display(),
                        s.line,
                        s.key
                    ))
                    .into())
                }
            }
        } else {
            injected.push(format!("--{}={}", s.key, s.value));
        }
    }
    let mut out = argv[..=at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[at + 1..]);
    Ok(out)
}
