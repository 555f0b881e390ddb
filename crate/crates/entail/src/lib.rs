//! File formats, dataset IO, a shared task store and the command-line
//! driver around [`entail_core`].

pub mod artifact;
pub mod cli;
pub mod data;
mod error;
pub mod recipe;
pub mod shared;

pub use entail_core as core;
pub use error::{Error, Result};

/// Serialize to pretty JSON with a trailing newline. Field order follows
/// struct declaration order, so equal values give equal bytes.
pub fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(error::io(dir))?;
    }
    std::fs::write(path, to_json(value)).map_err(error::io(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(error::io(path))?;
    serde_json::from_str(&text).map_err(|e| error::format(format!("{}: {e}", path.display())))
}
