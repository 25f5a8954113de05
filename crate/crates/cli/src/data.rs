//! Scan directory layout shared by the commands: a dataset root holds
//! `scan_000/`, `scan_001/`, ... each a projection set directory.

use std::fs;
use std::path::{Path, PathBuf};

use mcfill_core::sim::ProjectionSet;
use mcfill_core::train::Sample;
use mcfill_core::{Error, Result, Tensor};

pub fn scan_name(index: usize) -> String {
    format!("scan_{index:03}")
}

/// Sorted scan subdirectories of a dataset root.
pub fn scan_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        let is_scan = path.is_dir()
            && path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("scan_"))
            && path.join("geometry.txt").is_file();
        if is_scan {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::invalid(format!("no scan_* directories under {}", root.display())));
    }
    Ok(dirs)
}

pub fn load_sets(root: &Path) -> Result<Vec<(String, ProjectionSet)>> {
    scan_dirs(root)?
        .into_iter()
        .map(|dir| {
            let name = dir.file_name().unwrap().to_string_lossy().into_owned();
            Ok((name, ProjectionSet::read_dir(&dir)?))
        })
        .collect()
}

/// All views of all sets as normalized training samples, and the common
/// normalization scale. Mixed scales across scans would silently skew the
/// loss, so they are rejected.
pub fn sets_to_samples(sets: &[(String, ProjectionSet)]) -> Result<(Vec<Sample<f32>>, f64)> {
    let scale = sets[0].1.norm_scale;
    let mut samples = Vec::new();
    for (name, set) in sets {
        if set.norm_scale != scale {
            return Err(Error::invalid(format!(
                "{name}: norm_scale {} differs from {scale}",
                set.norm_scale
            )));
        }
        let side = set.geom.nu;
        for view in 0..set.geom.n_views {
            let norm = set.normalized(view);
            let proj = Tensor::from_vec(&[side, side, 1], norm.into_data())?;
            samples.push(Sample::new(proj, set.masks[view].clone())?);
        }
    }
    Ok((samples, scale))
}
