//! `mcfill eval`: score inpainting variants against ground-truth scans,
//! in the projection domain and through FDK reconstruction.

use std::path::{Path, PathBuf};

use mcfill_core::metrics::{evaluate_variant, interp_inpaint, model_inpainter};
use mcfill_core::model::load_checkpoint;
use mcfill_core::sim::fdk::{fdk_reconstruct, hu_from_mu};
use mcfill_core::sim::io::{write_png, HU_WINDOW};
use mcfill_core::sim::ProjectionSet;
use mcfill_core::{ReconGrid, Result, Tensor};

use crate::config::{resolve, resolve_opt, resolve_required, run_guarded, FileValues, Resolved};
use crate::data::load_sets;

#[derive(clap::Args)]
pub struct Args {
    /// key=value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory with ground-truth scans.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for report.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional checkpoint; its variant is scored next to interp.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Reconstruction grid side in voxels.
    #[arg(long)]
    pub recon_n: Option<usize>,
    /// Reconstruction voxel size in mm.
    #[arg(long)]
    pub recon_voxel: Option<f64>,
    /// Also write the central ground-truth HU slice per scan as PNG.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub png: Option<bool>,
}

pub fn run(a: &Args) -> Result<()> {
    let mut file = FileValues::load_opt(a.config.as_ref())?;
    let data: PathBuf = resolve_required(a.data.clone(), &mut file, "data")?;
    let out: PathBuf = resolve_required(a.out.clone(), &mut file, "out")?;
    let model: Option<PathBuf> = resolve_opt(a.model.clone(), &mut file, "model")?;
    let recon_n = resolve(a.recon_n, &mut file, "recon_n", 64usize)?;
    let recon_voxel = resolve(a.recon_voxel, &mut file, "recon_voxel", 2.0)?;
    let png = resolve(a.png, &mut file, "png", false)?;
    file.finish()?;

    let grid = ReconGrid { n: recon_n, voxel_mm: recon_voxel };
    let named = load_sets(&data)?;
    let sets: Vec<ProjectionSet> = named.iter().map(|(_, s)| s.clone()).collect();

    run_guarded(&out, || {
        let mut report = evaluate_variant("interp", interp_inpaint::<f32>, &sets, &grid)?;
        if let Some(path) = &model {
            let (mcfg, norm_scale, params) = load_checkpoint::<f32>(path)?;
            let more = evaluate_variant(
                &mcfg.variant.name(),
                model_inpainter(&params, &mcfg, norm_scale),
                &sets,
                &grid,
            )?;
            report.rows.extend(more.rows);
        }
        let csv = report.to_csv();
        std::fs::write(out.join("report.csv"), &csv)?;
        print!("{csv}");

        if png {
            for (name, set) in &named {
                write_truth_slice(set, &grid, &out.join(format!("{name}_hu.png")))?;
            }
        }

        let mut r = Resolved::new();
        r.push("data", data.display());
        r.push("out", out.display());
        r.push_opt("model", model.as_ref().map(|p| p.display()));
        r.push("recon_n", recon_n);
        r.push("recon_voxel", recon_voxel);
        r.push("png", png);
        r.write(&out.join("resolved.txt"))
    })
}

/// Central axial slice of the ground-truth reconstruction in HU.
fn write_truth_slice(set: &ProjectionSet, grid: &ReconGrid, path: &Path) -> Result<()> {
    let projections: Vec<Tensor<f64>> = set
        .projections
        .iter()
        .map(|p| {
            Tensor::from_vec(p.shape(), p.data().iter().map(|&v| v as f64).collect())
                .expect("same element count")
        })
        .collect();
    let vol = fdk_reconstruct(&projections, &set.geom, [grid.n; 3], grid.voxel_mm)?;
    let n = grid.n;
    let z = n / 2;
    let mut slice = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            slice[y * n + x] = hu_from_mu(vol.get(x, y, z));
        }
    }
    write_png(path, &Tensor::from_vec(&[n, n], slice)?, HU_WINDOW.0, HU_WINDOW.1)
}
