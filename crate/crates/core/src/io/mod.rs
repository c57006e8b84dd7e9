//! Persistence: synthetic shapes, xyz clouds, checkpoints, config text and metrics.

mod checkpoint;
mod config;
mod metrics;
mod shapes;
mod xyz;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DataConfig, FewShotConfig, RunConfig};
pub use metrics::{metrics_csv, write_metrics_csv};
pub use shapes::{gen_shapes, synthetic_dataset, ShapeKind, ShapeSpec};
pub use xyz::{format_xyz, parse_xyz, read_dataset, read_xyz, write_dataset, write_xyz};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
