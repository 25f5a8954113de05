//! `mcfill sweep`: train and score every variant under one seed, producing
//! a single comparison table.

use std::path::PathBuf;

use mcfill_core::metrics::{evaluate_variant, interp_inpaint, model_inpainter};
use mcfill_core::model::load_checkpoint;
use mcfill_core::sim::ProjectionSet;
use mcfill_core::{ReconGrid, Result, Variant};

use crate::config::{resolve, resolve_required, run_guarded, FileValues, Resolved};
use crate::data::load_sets;
use crate::traincmd::{train_once, TrainSettings};

pub const SWEEP_VARIANTS: [&str; 6] = ["baseline", "se", "ne4", "ne8", "ne16", "ne32"];

#[derive(clap::Args)]
pub struct Args {
    /// key=value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset directory.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Held-out dataset directory for the final scores.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Output directory: one run_* subdirectory per variant plus report.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_adv: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub val_scans: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub augment: Option<bool>,
    #[arg(long)]
    pub recon_n: Option<usize>,
    #[arg(long)]
    pub recon_voxel: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub verbose: Option<bool>,
}

pub fn run(a: &Args) -> Result<()> {
    let mut file = FileValues::load_opt(a.config.as_ref())?;
    let train_data: PathBuf = resolve_required(a.train_data.clone(), &mut file, "train_data")?;
    let eval_data: PathBuf = resolve_required(a.eval_data.clone(), &mut file, "eval_data")?;
    let out: PathBuf = resolve_required(a.out.clone(), &mut file, "out")?;
    let s = TrainSettings {
        seed: resolve(a.seed, &mut file, "seed", 0u64)?,
        epochs: resolve(a.epochs, &mut file, "epochs", 100usize)?,
        batch_size: resolve(a.batch_size, &mut file, "batch_size", 4usize)?,
        lr: resolve(a.lr, &mut file, "lr", 1e-4)?,
        lambda_adv: resolve(a.lambda_adv, &mut file, "lambda_adv", 0.01)?,
        patience: resolve(a.patience, &mut file, "patience", 15usize)?,
        val_scans: resolve(a.val_scans, &mut file, "val_scans", 1usize)?,
        embed_dim: resolve(a.embed_dim, &mut file, "embed_dim", 128usize)?,
        window: resolve(a.window, &mut file, "window", 8usize)?,
        augment: resolve(a.augment, &mut file, "augment", true)?,
        verbose: resolve(a.verbose, &mut file, "verbose", false)?,
    };
    let recon_n = resolve(a.recon_n, &mut file, "recon_n", 64usize)?;
    let recon_voxel = resolve(a.recon_voxel, &mut file, "recon_voxel", 2.0)?;
    file.finish()?;

    let grid = ReconGrid { n: recon_n, voxel_mm: recon_voxel };
    let eval_sets: Vec<ProjectionSet> =
        load_sets(&eval_data)?.into_iter().map(|(_, s)| s).collect();

    run_guarded(&out, || {
        let mut report = evaluate_variant("interp", interp_inpaint::<f32>, &eval_sets, &grid)?;
        for name in SWEEP_VARIANTS {
            let variant: Variant = name.parse()?;
            let run_dir = out.join(format!("run_{name}"));
            println!("training {name}");
            train_once(&train_data, &run_dir, variant, &s)?;
            let (mcfg, norm_scale, params) = load_checkpoint::<f32>(&run_dir.join("best.mckp"))?;
            let rows = evaluate_variant(
                name,
                model_inpainter(&params, &mcfg, norm_scale),
                &eval_sets,
                &grid,
            )?;
            report.rows.extend(rows.rows);
        }
        let csv = report.to_csv();
        std::fs::write(out.join("report.csv"), &csv)?;
        print!("{csv}");

        let mut r = Resolved::new();
        r.push("train_data", train_data.display());
        r.push("eval_data", eval_data.display());
        r.push("out", out.display());
        r.push("seed", s.seed);
        r.push("epochs", s.epochs);
        r.push("batch_size", s.batch_size);
        r.push("lr", s.lr);
        r.push("lambda_adv", s.lambda_adv);
        r.push("patience", s.patience);
        r.push("val_scans", s.val_scans);
        r.push("embed_dim", s.embed_dim);
        r.push("window", s.window);
        r.push("augment", s.augment);
        r.push("recon_n", recon_n);
        r.push("recon_voxel", recon_voxel);
        r.push("verbose", s.verbose);
        r.write(&out.join("resolved.txt"))
    })
}
