//! `mcfill train`: fit one variant on a simulated dataset.

use std::path::{Path, PathBuf};

use mcfill_core::train::{fit, FitResult, TrainConfig};
use mcfill_core::{EncoderConfig, Error, ModelConfig, Result, Variant};

use crate::config::{resolve, resolve_required, run_guarded, FileValues, Resolved};
use crate::data::{load_sets, sets_to_samples};

#[derive(clap::Args)]
pub struct Args {
    /// key=value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory with scan_* subdirectories.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory for the checkpoint, history and resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model variant: baseline, se, or ne4|ne8|ne16|ne32.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_adv: Option<f64>,
    /// Epochs without validation improvement before stopping early.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Scans held out for validation, taken from the end of the sorted list.
    #[arg(long)]
    pub val_scans: Option<usize>,
    /// Stage-1 channel width of the encoder.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Attention window side in tokens.
    #[arg(long)]
    pub window: Option<usize>,
    /// Noise, mask morphology and flip augmentation during training.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub augment: Option<bool>,
    /// Per-epoch progress on stdout.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub verbose: Option<bool>,
}

/// Everything `fit` needs beyond the dataset and variant; shared with sweep.
pub struct TrainSettings {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_adv: f64,
    pub patience: usize,
    pub val_scans: usize,
    pub embed_dim: usize,
    pub window: usize,
    pub augment: bool,
    pub verbose: bool,
}

/// Split the dataset, build the model config and run `fit` into `out`.
pub fn train_once(
    data: &Path,
    out: &Path,
    variant: Variant,
    s: &TrainSettings,
) -> Result<FitResult<f32>> {
    let sets = load_sets(data)?;
    if s.val_scans == 0 || sets.len() <= s.val_scans {
        return Err(Error::invalid(format!(
            "need at least {} scans to hold {} out for validation, found {}",
            s.val_scans + 1,
            s.val_scans,
            sets.len()
        )));
    }
    let side = sets[0].1.geom.nu;
    for (name, set) in &sets {
        if set.geom.nu != side {
            return Err(Error::invalid(format!(
                "{name}: detector side {} differs from {side}",
                set.geom.nu
            )));
        }
    }
    let split = sets.len() - s.val_scans;
    let (train_samples, train_scale) = sets_to_samples(&sets[..split])?;
    let (val_samples, val_scale) = sets_to_samples(&sets[split..])?;
    if train_scale != val_scale {
        return Err(Error::invalid(format!(
            "train norm_scale {train_scale} differs from validation {val_scale}"
        )));
    }

    let encoder = EncoderConfig {
        embed_dim: s.embed_dim,
        window: s.window,
        shift: s.window / 2,
        input_side: side,
        ..EncoderConfig::default()
    };
    let mcfg = ModelConfig::new(encoder, variant);
    let tc = TrainConfig {
        max_epochs: s.epochs,
        batch_size: s.batch_size,
        lr: s.lr,
        lambda_adv: s.lambda_adv,
        seed: s.seed,
        aug_noise: s.augment,
        aug_morph: s.augment,
        aug_flips: s.augment,
        norm_scale: train_scale,
        patience: s.patience,
        verbose: s.verbose,
    };
    fit(&train_samples, &val_samples, &mcfg, &tc, Some(out))
}

pub fn run(a: &Args) -> Result<()> {
    let mut file = FileValues::load_opt(a.config.as_ref())?;
    let data: PathBuf = resolve_required(a.data.clone(), &mut file, "data")?;
    let out: PathBuf = resolve_required(a.out.clone(), &mut file, "out")?;
    let variant_name = resolve(a.variant.clone(), &mut file, "variant", "baseline".to_string())?;
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
    file.finish()?;
    let variant: Variant = variant_name.parse()?;

    run_guarded(&out, || {
        let result = train_once(&data, &out, variant, &s)?;
        let mut r = Resolved::new();
        r.push("data", data.display());
        r.push("out", out.display());
        r.push("variant", &variant_name);
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
        r.push("verbose", s.verbose);
        r.write(&out.join("resolved.txt"))?;
        println!(
            "{}: best epoch {} with validation metal MAE {:.6}",
            variant.name(),
            result.best_epoch,
            result.best_val
        );
        Ok(())
    })
}
