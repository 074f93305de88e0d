//! Embedding files on disk; the byte layout lives in `apt_core::store`.

use std::fs;
use std::path::Path;

use apt_core::store::EmbeddingStore;

use crate::error::{Result, ToolError};

pub fn read_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let bytes = fs::read(path).map_err(|e| ToolError::io(path, e))?;
    EmbeddingStore::decode(&bytes).map_err(|source| ToolError::Format { path: path.display().to_string(), source })
}

pub fn write_embeddings(path: &Path, store: &EmbeddingStore) -> Result<()> {
    fs::write(path, store.encode()).map_err(|e| ToolError::io(path, e))
}
