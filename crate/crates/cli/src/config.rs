//! Effective run configuration: defaults, then the config file, then
//! `--set` overrides, each layer shadowing the one below. The winning
//! configuration is serialized back out verbatim so a run directory always
//! records exactly what it ran with.

use std::path::Path;

use eqcl_core::protocol::RunConfig;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Builds the effective config and its canonical TOML text.
pub fn effective_config(
    file: Option<&Path>,
    overrides: &[String],
) -> Result<(RunConfig, String), CliError> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };

    for spec in overrides {
        let parsed = parse_override(spec)?;
        merge(&mut table, parsed);
    }

    let de = toml::Value::Table(table);
    let config: RunConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))?;
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let canonical = toml::to_string_pretty(&config)
        .map_err(|e| CliError::Config(format!("cannot serialize effective config: {e}")))?;
    Ok((config, canonical))
}

/// One `--set key.path=value`. The right-hand side is read as a TOML value
/// (numbers, booleans, arrays, quoted strings); anything that does not parse
/// as TOML is taken as a bare string, so `scenario=PA/PA` works unquoted.
fn parse_override(spec: &str) -> Result<toml::Table, CliError> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set '{spec}': expected key.path=value")))?;
    let (key, value) = (key.trim(), value.trim());
    if key.is_empty() {
        return Err(CliError::Config(format!("--set '{spec}': empty key")));
    }
    if let Ok(table) = toml::from_str::<toml::Table>(&format!("{key} = {value}")) {
        return Ok(table);
    }
    let escaped = value.replace('\\', "\\\\").replace('"', "\\\"");
    toml::from_str::<toml::Table>(&format!("{key} = \"{escaped}\""))
        .map_err(|e| CliError::Config(format!("--set '{spec}': {e}")))
}

/// Leaves in `over` replace leaves in `base`; sibling keys survive.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn config_hash(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use eqcl_core::protocol::Scenario;

    #[test]
    fn defaults_alone_validate() {
        let (cfg, text) = effective_config(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(text.contains("[optimizer]"));
    }

    #[test]
    fn overrides_beat_defaults_and_strings_need_no_quotes() {
        let sets = vec!["memory.M=0".to_string(), "scenario=PA/PA".to_string()];
        let (cfg, _) = effective_config(None, &sets).unwrap();
        assert_eq!(cfg.memory.budget, 0);
        assert_eq!(cfg.scenario, Scenario::POSE_AGNOSTIC);
    }

    #[test]
    fn unknown_field_reports_its_path() {
        let sets = vec!["optimizer.epochz=3".to_string()];
        let err = effective_config(None, &sets).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("optimizer"), "{msg}");
        assert!(msg.contains("epochz"), "{msg}");
    }

    #[test]
    fn wrong_type_reports_its_path() {
        let sets = vec!["optimizer.epochs=fast".to_string()];
        let err = effective_config(None, &sets).unwrap_err();
        assert!(err.to_string().contains("optimizer.epochs"), "{err}");
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let (_, a) = effective_config(None, &[]).unwrap();
        let (_, b) = effective_config(None, &["seed=9".to_string()]).unwrap();
        assert_eq!(config_hash(&a), config_hash(&a));
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn arrays_parse_as_toml_values() {
        let sets = vec!["model.widths=[2, 3]".to_string()];
        let (cfg, _) = effective_config(None, &sets).unwrap();
        assert_eq!(cfg.model.widths, vec![2, 3]);
    }
}
