//! Config resolution: defaults, then the config file, then `--set`
//! overrides, then subcommand flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use stylebook_core::config::RunConfig;
use toml::{Table, Value};

use crate::GlobalArgs;

pub struct Settings {
    pub config: RunConfig,
    pub run_dir: PathBuf,
}

impl Settings {
    pub fn resolve(args: &GlobalArgs) -> Result<Self> {
        let mut table = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                text.parse::<Table>()
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => Table::new(),
        };
        for o in &args.overrides {
            apply_override(&mut table, o)?;
        }
        let config = RunConfig::from_toml(&toml::to_string(&table)?).context("invalid configuration")?;
        let run_dir = args.run_dir.clone().unwrap_or_else(|| config.run_dir.clone());
        Ok(Settings { config, run_dir })
    }

    pub fn path_or(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.run_dir.join(default))
    }
}

/// Sets `a.b.c=value` in the table, creating intermediate tables.
fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override {spec:?} is not KEY=VALUE");
    };
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} has an empty segment");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("override key {key:?}: {p} is not a section"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}
