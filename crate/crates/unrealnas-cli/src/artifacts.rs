//! File outputs shared across commands: pretty JSON, simple CSV tables, and
//! the resolved-config echo written next to every artifact. Nothing here
//! embeds timestamps, so reruns with identical seeds are byte-identical.

use crate::CliError;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

/// Writes a value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Internal(anyhow::Error::new(e)))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// The echoed resolved configuration: the command name plus every parameter
/// a rerun needs.
#[derive(Debug, Serialize)]
pub struct Echo<T: Serialize> {
    pub command: String,
    #[serde(flatten)]
    pub resolved: T,
}

pub fn write_echo<T: Serialize>(path: &Path, command: &str, resolved: &T) -> Result<(), CliError> {
    write_json(
        path,
        &Echo {
            command: command.to_string(),
            resolved,
        },
    )
}

/// Writes a CSV table. Fields containing commas, quotes, or newlines are
/// quoted with doubled inner quotes.
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), CliError> {
    let mut out = String::new();
    out.push_str(&join_row(header.iter().map(|s| s.to_string()).collect::<Vec<_>>().as_slice()));
    for row in rows {
        out.push_str(&join_row(row));
    }
    write_bytes(path, out.as_bytes())
}

fn join_row(fields: &[String]) -> String {
    let mut line = fields
        .iter()
        .map(|f| quote_field(f))
        .collect::<Vec<_>>()
        .join(",");
    line.push('\n');
    line
}

fn quote_field(f: &str) -> String {
    if f.contains(',') || f.contains('"') || f.contains('\n') {
        format!("\"{}\"", f.replace('"', "\"\""))
    } else {
        f.to_string()
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Creates the output directory up front so partial artifacts of a failing
/// run still land somewhere inspectable.
pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}
