//! Dataset directories: `NNNN_z.hsc` ground truth plus, once degraded,
//! `NNNN_x.hsc` (multispectral) and `NNNN_y.hsc` (low resolution).

use std::path::{Path, PathBuf};

use hsrkan::degradation::{HsiCube, Sample};
use hsrkan::io::read_hsc;

use crate::CliError;

pub fn cube_path(dir: &Path, index: usize, role: char) -> PathBuf {
    dir.join(format!("{index:04}_{role}.hsc"))
}

/// Indices of every `NNNN_z.hsc` in `dir`, sorted.
pub fn indices(dir: &Path) -> Result<Vec<usize>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::config(format!("cannot read {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix("_z.hsc") {
            if let Ok(i) = stem.parse::<usize>() {
                out.push(i);
            }
        }
    }
    out.sort_unstable();
    if out.is_empty() {
        return Err(CliError::config(format!("no *_z.hsc cubes in {}", dir.display())));
    }
    Ok(out)
}

pub fn load_truth(dir: &Path) -> Result<Vec<(usize, HsiCube)>, CliError> {
    indices(dir)?
        .into_iter()
        .map(|i| Ok((i, read_hsc(cube_path(dir, i, 'z'))?)))
        .collect()
}

/// Loads complete `(X, Y, Z)` triples; every cube must have been degraded.
pub fn load_samples(dir: &Path) -> Result<Vec<(usize, Sample)>, CliError> {
    let mut out = Vec::new();
    for i in indices(dir)? {
        let read = |role| {
            let p = cube_path(dir, i, role);
            if !p.exists() {
                return Err(CliError::config(format!("{} missing; run `degrade` first", p.display())));
            }
            Ok(read_hsc(p)?)
        };
        out.push((i, Sample { x: read('x')?, y: read('y')?, z: read('z')? }));
    }
    Ok(out)
}
