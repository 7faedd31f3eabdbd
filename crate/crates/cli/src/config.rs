use std::path::Path;

use ssync_core::RunConfig;

use crate::error::CliError;

/// Parses and validates a JSON config. Every field must be present.
pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let config: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string().replace('`', "")))?;
    config.validate()?;
    Ok(config)
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    parse(&text)
}

pub fn to_json(config: &RunConfig) -> String {
    let mut s = serde_json::to_string_pretty(config).expect("config serializes");
    s.push('\n');
    s
}
