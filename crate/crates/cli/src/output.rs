//! Small writers and readers for stage artifacts.

use std::fmt::Display;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{validation, CliError, Result};

fn non_empty(dir: &Path) -> Result<bool> {
    Ok(dir.exists() && fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?.next().is_some())
}

/// Fails early when `dir` holds files and `force` is not set.
pub fn check_out(dir: &Path, force: bool) -> Result<()> {
    if !force && non_empty(dir)? {
        return validation(format!("output directory {} is not empty (pass --force to replace it)", dir.display()));
    }
    Ok(())
}

/// Creates `dir`, clearing it first when `force` is set. A non-empty `dir`
/// without `force` is refused.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    check_out(dir, force)?;
    if non_empty(dir)? {
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn require_dir(dir: &Path, what: &str) -> Result<()> {
    if !dir.is_dir() {
        return validation(format!("missing {what} at {}", dir.display()));
    }
    Ok(())
}

pub fn write_text(dir: &Path, rel: &str, text: &str) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

pub fn write_json<T: Serialize + ?Sized>(dir: &Path, rel: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_text(dir, rel, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Comma-separated text with a fixed header. Values use Rust's shortest
/// round-trip formatting, so output is a pure function of the numbers.
pub struct Csv {
    text: String,
    width: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv {
            text: header.join(",") + "\n",
            width: header.len(),
        }
    }

    pub fn row(&mut self, cells: &[&dyn Display]) {
        assert_eq!(cells.len(), self.width, "csv row width");
        let line: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
        self.text.push_str(&line.join(","));
        self.text.push('\n');
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

/// Reads a CSV written by [`Csv`]: checks the header and returns the rows.
pub fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let found = lines.next().unwrap_or_default();
    if found != header.join(",") {
        return validation(format!("{}: unexpected header {found:?}", path.display()));
    }
    lines
        .map(|l| {
            let cells: Vec<String> = l.split(',').map(str::to_string).collect();
            if cells.len() != header.len() {
                return validation(format!("{}: row {l:?} has {} cells", path.display(), cells.len()));
            }
            Ok(cells)
        })
        .collect()
}

pub fn parse_f64(cell: &str, path: &Path) -> Result<f64> {
    cell.parse()
        .map_err(|_| CliError::Validation(format!("{}: {cell:?} is not a number", path.display())))
}
