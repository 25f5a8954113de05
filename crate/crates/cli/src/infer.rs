//! `mcfill infer`: apply a checkpoint to a dataset, writing inpainted scans.

use std::path::PathBuf;

use mcfill_core::metrics::model_inpainter;
use mcfill_core::model::load_checkpoint;
use mcfill_core::sim::io::{write_png, PROJ_WINDOW};
use mcfill_core::sim::ProjectionSet;
use mcfill_core::{Error, Result};

use crate::config::{resolve, resolve_required, run_guarded, FileValues, Resolved};
use crate::data::load_sets;

#[derive(clap::Args)]
pub struct Args {
    /// key=value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint file, typically best.mckp from a training run.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Input dataset directory; never written to.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output dataset directory with inpainted projections.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write windowed PNG previews of the inpainted views.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub png: Option<bool>,
}

pub fn run(a: &Args) -> Result<()> {
    let mut file = FileValues::load_opt(a.config.as_ref())?;
    let model: PathBuf = resolve_required(a.model.clone(), &mut file, "model")?;
    let data: PathBuf = resolve_required(a.data.clone(), &mut file, "data")?;
    let out: PathBuf = resolve_required(a.out.clone(), &mut file, "out")?;
    let png = resolve(a.png, &mut file, "png", false)?;
    file.finish()?;

    let (mcfg, norm_scale, params) = load_checkpoint::<f32>(&model)?;
    let sets = load_sets(&data)?;

    run_guarded(&out, || {
        if out.canonicalize()? == data.canonicalize()? {
            return Err(Error::invalid(
                "refusing to write inpainted scans into the input directory".to_string(),
            ));
        }
        let mut inpaint = model_inpainter(&params, &mcfg, norm_scale);
        for (name, set) in &sets {
            let mut projections = set.projections.clone();
            for view in 0..set.geom.n_views {
                if set.masks[view].any() {
                    projections[view] = inpaint(&set.projections[view], &set.masks[view])?;
                }
            }
            let filled = ProjectionSet::new(
                set.geom.clone(),
                set.norm_scale,
                projections,
                set.masks.clone(),
            )?;
            let dir = out.join(name);
            filled.write_dir(&dir)?;
            if png {
                let png_dir = dir.join("png");
                std::fs::create_dir_all(&png_dir)?;
                for view in 0..filled.geom.n_views {
                    write_png(
                        &png_dir.join(format!("proj_{view:03}.png")),
                        &filled.projections[view],
                        PROJ_WINDOW.0,
                        PROJ_WINDOW.1,
                    )?;
                }
            }
            println!("wrote {}", dir.display());
        }
        let mut r = Resolved::new();
        r.push("model", model.display());
        r.push("data", data.display());
        r.push("out", out.display());
        r.push("png", png);
        r.write(&out.join("resolved.txt"))
    })
}
