//! Layered settings: built-in defaults, then the command's table in the
//! `--config` TOML document, then explicit flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::CliError;

pub fn load_document(path: Option<&Path>) -> Result<Option<toml::Table>, CliError> {
    let Some(path) = path else { return Ok(None) };
    if !path.exists() {
        return Err(CliError::Usage(format!("config file {} does not exist", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
    text.parse::<toml::Table>().map(Some).map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))
}

/// Merges defaults, the `[section]` table of `document` and `flags`.
///
/// `flags` must serialize only the options given on the command line.
pub fn resolve<S>(document: Option<&toml::Table>, section: &str, flags: &impl Serialize, seed: Option<u64>) -> Result<S, CliError>
where
    S: Serialize + DeserializeOwned + Default,
{
    let internal = |e: toml::ser::Error| CliError::Data(format!("settings: {e}"));
    let mut table = toml::Table::try_from(S::default()).map_err(internal)?;
    if let Some(doc) = document {
        if let Some(global_seed) = doc.get("seed") {
            table.insert("seed".into(), global_seed.clone());
        }
        if let Some(value) = doc.get(section) {
            let sec = value.as_table().ok_or_else(|| CliError::Usage(format!("config entry '{section}' must be a table")))?;
            for (k, v) in sec {
                table.insert(k.clone(), v.clone());
            }
        }
    }
    for (k, v) in toml::Table::try_from(flags).map_err(internal)? {
        table.insert(k, v);
    }
    if let Some(seed) = seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::Usage(format!("seed {seed} is too large")))?;
        table.insert("seed".into(), toml::Value::Integer(seed));
    }
    S::deserialize(table).map_err(|e| CliError::Usage(format!("[{section}] settings: {e}")))
}

pub fn to_toml(section: &str, settings: &impl Serialize) -> Result<String, CliError> {
    let mut doc = toml::Table::new();
    let body = toml::Table::try_from(settings).map_err(|e| CliError::Data(format!("settings: {e}")))?;
    doc.insert(section.into(), toml::Value::Table(body));
    toml::to_string(&doc).map_err(|e| CliError::Data(format!("settings: {e}")))
}
