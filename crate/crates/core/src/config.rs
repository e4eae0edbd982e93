//! Training configuration from a preset, an optional TOML file, and
//! `dotted.key=value` overrides, applied in that order.

use std::path::Path;

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::train::{Mode, TrainConfig};

pub fn preset(mode: Mode) -> TrainConfig {
    match mode {
        Mode::Baseline => TrainConfig::baseline(),
        Mode::Segcn => TrainConfig::segcn(),
    }
}

fn merge(base: &mut Table, layer: Table) {
    for (key, value) in layer {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// Parses `value` as a TOML value, treating anything unparseable as a bare
/// string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::InvalidArgument(format!("override {assignment:?} is not key=value"))
    })?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::InvalidArgument(format!("bad override key {path:?}")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = table;
    for key in parents {
        let entry = node
            .entry(key.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            Error::InvalidArgument(format!("override path {path:?} crosses a non-table"))
        })?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn build_config(
    mode: Mode,
    file_contents: Option<&str>,
    overrides: &[String],
) -> Result<TrainConfig> {
    let mut table = Table::try_from(preset(mode))
        .map_err(|e| Error::InvalidArgument(format!("preset does not serialize: {e}")))?;
    if let Some(text) = file_contents {
        let layer: Table = text
            .parse()
            .map_err(|e| Error::InvalidArgument(format!("config file: {e}")))?;
        merge(&mut table, layer);
    }
    for assignment in overrides {
        apply_override(&mut table, assignment)?;
    }
    let config: TrainConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::InvalidArgument(format!("config: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(mode: Mode, path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let contents = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    build_config(mode, contents.as_deref(), overrides)
}
