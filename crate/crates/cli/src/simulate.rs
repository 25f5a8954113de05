//! `mcfill simulate`: seeded phantom scenes rendered into scan directories.

use std::path::{Path, PathBuf};

use mcfill_core::sim::io::{write_png, PROJ_WINDOW};
use mcfill_core::sim::phantom::{build_scene, scene_seed, PhantomSpec};
use mcfill_core::sim::ProjectionSet;
use mcfill_core::{Error, Geometry, Result};

use crate::config::{resolve, resolve_required, run_guarded, FileValues, Resolved};
use crate::data::scan_name;

#[derive(clap::Args)]
pub struct Args {
    /// key=value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory to create, one scan_NNN subdirectory per scene.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base seed; scan i derives its own stream from (seed, i).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of scans to simulate.
    #[arg(long)]
    pub n_scans: Option<usize>,
    /// Detector preset: desk (64x64 binned) or full (512x512).
    #[arg(long)]
    pub geometry: Option<String>,
    /// Normalization scale stored with the projections.
    #[arg(long)]
    pub norm_scale: Option<f64>,
    /// Also write windowed PNG previews into each scan directory.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub png: Option<bool>,
}

pub fn run(a: &Args) -> Result<()> {
    let mut file = FileValues::load_opt(a.config.as_ref())?;
    let out: PathBuf = resolve_required(a.out.clone(), &mut file, "out")?;
    let seed = resolve(a.seed, &mut file, "seed", 0u64)?;
    let n_scans = resolve(a.n_scans, &mut file, "n_scans", 6usize)?;
    let geometry = resolve(a.geometry.clone(), &mut file, "geometry", "desk".to_string())?;
    let norm_scale = resolve(a.norm_scale, &mut file, "norm_scale", 5.0)?;
    let png = resolve(a.png, &mut file, "png", false)?;
    file.finish()?;

    let geom = match geometry.as_str() {
        "desk" => Geometry::desk(),
        "full" => Geometry::full_scale(),
        other => {
            return Err(Error::invalid(format!("unknown geometry {other:?}, expected desk|full")))
        }
    };
    if n_scans == 0 {
        return Err(Error::invalid("n_scans must be positive".to_string()));
    }

    run_guarded(&out, || {
        let spec = PhantomSpec::default();
        for i in 0..n_scans {
            let scene = build_scene(&spec, scene_seed(seed, i))?;
            let projections = scene.anatomy_projections(&geom)?;
            let masks = scene.metal_masks(&geom)?;
            let set = ProjectionSet::from_simulation(geom.clone(), norm_scale, &projections, masks)?;
            let dir = out.join(scan_name(i));
            set.write_dir(&dir)?;
            if png {
                write_previews(&set, &dir)?;
            }
            println!("wrote {}", dir.display());
        }
        let mut r = Resolved::new();
        r.push("out", out.display());
        r.push("seed", seed);
        r.push("n_scans", n_scans);
        r.push("geometry", &geometry);
        r.push("norm_scale", norm_scale);
        r.push("png", png);
        r.write(&out.join("resolved.txt"))
    })
}

fn write_previews(set: &ProjectionSet, dir: &Path) -> Result<()> {
    let png_dir = dir.join("png");
    std::fs::create_dir_all(&png_dir)?;
    for view in 0..set.geom.n_views {
        write_png(
            &png_dir.join(format!("proj_{view:03}.png")),
            &set.projections[view],
            PROJ_WINDOW.0,
            PROJ_WINDOW.1,
        )?;
        write_png(
            &png_dir.join(format!("mask_{view:03}.png")),
            &set.masks[view].to_tensor::<f32>(),
            0.0,
            1.0,
        )?;
    }
    Ok(())
}
