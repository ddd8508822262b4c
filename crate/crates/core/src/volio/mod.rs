//! Bit-exact file I/O: MetaImage volumes/masks/fields, score-table CSV,
//! and registration-config JSON.

mod config;
mod metaimage;
mod scores;

pub use config::{read_config, write_config, RegistrationConfigFile};
pub use metaimage::{read_metaimage, write_metaimage, MetaObject, MetaObjectRef};
pub use scores::{read_scores_csv, write_scores_csv, ScoreTable};

use std::path::Path;

use crate::error::Result;

/// Write a file via a temporary sibling plus rename, so a failed run never
/// leaves a partial output behind.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| crate::error::Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = match dir {
        Some(d) => d.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id())),
        None => std::path::PathBuf::from(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id())),
    };
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
