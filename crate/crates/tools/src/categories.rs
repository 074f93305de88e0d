//! Category files: one `name,base` or `name,novel` per line. Blank lines
//! and lines starting with `#` are skipped.

use std::fs;
use std::path::Path;

use apt_core::data::{CategorySet, Split};

use crate::error::{Result, ToolError};

pub fn parse_categories_str(text: &str, source: &str) -> Result<CategorySet> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |message: String| ToolError::Parse { path: source.to_string(), line: n + 1, message };
        let (name, split) = t.rsplit_once(',').ok_or_else(|| err(format!("expected `name,base|novel`, got {t:?}")))?;
        let split = match split.trim() {
            "base" => Split::Base,
            "novel" => Split::Novel,
            other => return Err(err(format!("split must be base or novel, got {other:?}"))),
        };
        let name = name.trim();
        if name.is_empty() {
            return Err(err("empty category name".into()));
        }
        if entries.iter().any(|(n, _)| n == name) {
            return Err(err(format!("duplicate category {name:?}")));
        }
        entries.push((name.to_string(), split));
    }
    CategorySet::new(entries).map_err(|e| ToolError::Parse { path: source.to_string(), line: 0, message: e.to_string() })
}

pub fn read_categories(path: &Path) -> Result<CategorySet> {
    let text = fs::read_to_string(path).map_err(|e| ToolError::io(path, e))?;
    parse_categories_str(&text, &path.display().to_string())
}

pub fn serialize_categories(set: &CategorySet) -> String {
    set.iter().map(|(n, s)| format!("{n},{}\n", s.name())).collect()
}

pub fn write_categories(path: &Path, set: &CategorySet) -> Result<()> {
    fs::write(path, serialize_categories(set)).map_err(|e| ToolError::io(path, e))
}
