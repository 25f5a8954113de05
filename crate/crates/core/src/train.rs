//! Loss computation, augmentation, optimizer, and the training loop with
//! metal-region early stopping.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metal::MetalMask;
use crate::model::{model_forward, save_checkpoint, ModelConfig};
use crate::params::{bind_all, he_normal, rng_for, Bound, ParamStore};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, TensorId};

/// One training or validation example: the clean normalized projection and
/// the metal mask. The network input is the projection with metal pixels
/// zeroed, which `model_forward` derives itself.
#[derive(Clone)]
pub struct Sample<T: Scalar> {
    pub proj: Tensor<T>,
    pub mask: MetalMask,
}

impl<T: Scalar> Sample<T> {
    pub fn new(proj: Tensor<T>, mask: MetalMask) -> Result<Self> {
        let s = mask.side();
        if proj.shape() != [s, s, 1] {
            return Err(Error::invalid(format!(
                "sample: projection {:?} does not match mask side {s}",
                proj.shape()
            )));
        }
        Ok(Sample { proj, mask })
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_adv: f64,
    pub seed: u64,
    pub aug_noise: bool,
    pub aug_morph: bool,
    pub aug_flips: bool,
    /// Projections are divided by this scale into [0, 1]; stored in the
    /// checkpoint so evaluation can undo it.
    pub norm_scale: f64,
    pub patience: usize,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            batch_size: 4,
            lr: 1e-4,
            lambda_adv: 0.01,
            seed: 0,
            aug_noise: true,
            aug_morph: true,
            aug_flips: true,
            norm_scale: 5.0,
            patience: 15,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.max_epochs > 100 {
            return Err(Error::invalid(format!(
                "max_epochs {} must be in 1..=100",
                self.max_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive".to_string()));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::invalid(format!("lambda_adv {} must be >= 0", self.lambda_adv)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr {} must be >= 0", self.lr)));
        }
        if !(self.norm_scale > 0.0 && self.norm_scale.is_finite()) {
            return Err(Error::invalid(format!("norm_scale {} must be > 0", self.norm_scale)));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be positive".to_string()));
        }
        Ok(())
    }
}

/// Ids of the loss and its logged components.
pub struct CompositeLoss {
    pub total: TensorId,
    pub mae_full: TensorId,
    /// Absent when the mask is empty (the term is defined as 0).
    pub mae_metal: Option<TensorId>,
    /// Absent when `lambda_adv` is 0 or no discriminator logits were given.
    pub adv: Option<TensorId>,
}

fn mask_tensor<T: Scalar>(mask: &MetalMask) -> Tensor<T> {
    let s = mask.side();
    Tensor::from_vec(
        &[s, s, 1],
        mask.data().iter().map(|&m| T::from_f64(m as f64)).collect(),
    )
    .expect("mask length fixed by construction")
}

/// Prediction inside the mask, target outside, as a tape node (the target
/// equals the uncorrupted input outside the mask).
pub fn compose_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: TensorId,
    target: TensorId,
    mask: &MetalMask,
) -> Result<TensorId> {
    let m = tape.constant(mask_tensor::<T>(mask));
    let inv_data = mask.data().iter().map(|&v| T::from_f64(1.0 - v as f64)).collect();
    let s = mask.side();
    let inv = tape.constant(Tensor::from_vec(&[s, s, 1], inv_data)?);
    let inside = tape.mul(pred, m)?;
    let outside = tape.mul(target, inv)?;
    tape.add(inside, outside)
}

/// loss = MAE_full + 2 MAE_metal + lambda_adv L_gen, with L_gen the
/// non-saturating generator loss mean softplus(-D(composite)).
pub fn composite_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: TensorId,
    target: TensorId,
    mask: &MetalMask,
    disc_logits: Option<TensorId>,
    lambda_adv: f64,
) -> Result<CompositeLoss> {
    if lambda_adv < 0.0 {
        return Err(Error::invalid(format!("lambda_adv {lambda_adv} must be >= 0")));
    }
    let diff = tape.sub(pred, target)?;
    let adiff = tape.abs(diff)?;
    let mae_full = tape.mean_all(adiff)?;
    let mut total = mae_full;

    let mae_metal = if mask.any() {
        let m = tape.constant(mask_tensor::<T>(mask));
        let masked = tape.mul(adiff, m)?;
        let sum = tape.sum_all(masked)?;
        let mae = tape.scale(sum, 1.0 / mask.count() as f64)?;
        let weighted = tape.scale(mae, 2.0)?;
        total = tape.add(total, weighted)?;
        Some(mae)
    } else {
        None
    };

    let adv = match disc_logits {
        Some(logits) if lambda_adv > 0.0 => {
            let neg = tape.scale(logits, -1.0)?;
            let sp = tape.softplus(neg)?;
            let l_gen = tape.mean_all(sp)?;
            let weighted = tape.scale(l_gen, lambda_adv)?;
            total = tape.add(total, weighted)?;
            Some(l_gen)
        }
        _ => None,
    };

    Ok(CompositeLoss { total, mae_full, mae_metal, adv })
}

/// What one `augment` call actually did, for alignment tests and debugging.
#[derive(Clone, Copy, Debug, Default)]
pub struct AugmentLog {
    pub sigma: f64,
    pub dilate: bool,
    pub morph_iters: usize,
    pub morph_skipped: bool,
    pub flip_h: bool,
    pub flip_v: bool,
}

fn flip_image<T: Scalar>(t: &Tensor<T>, flip_h: bool, flip_v: bool) -> Tensor<T> {
    let s = t.shape()[0];
    let mut data = vec![T::zero(); s * s];
    for i in 0..s {
        for j in 0..s {
            let si = if flip_v { s - 1 - i } else { i };
            let sj = if flip_h { s - 1 - j } else { j };
            data[i * s + j] = t.data()[si * s + sj];
        }
    }
    Tensor::from_vec(t.shape(), data).expect("same length")
}

fn flip_mask(m: &MetalMask, flip_h: bool, flip_v: bool) -> MetalMask {
    let s = m.side();
    let mut out = MetalMask::zeros(s);
    for i in 0..s {
        for j in 0..s {
            let si = if flip_v { s - 1 - i } else { i };
            let sj = if flip_h { s - 1 - j } else { j };
            out.set(i, j, m.get(si, sj));
        }
    }
    out
}

/// Noise on non-metal pixels, mask dilation or erosion, joint flips.
/// Erosion that would erase the mask entirely is skipped.
pub fn augment<T: Scalar>(
    sample: &Sample<T>,
    tc: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (Sample<T>, AugmentLog) {
    let mut proj = sample.proj.clone();
    let mut mask = sample.mask.clone();
    let mut log = AugmentLog::default();

    if tc.aug_noise {
        log.sigma = rng.random_range(0.0..0.02);
        if log.sigma > 0.0 {
            let dist = Normal::new(0.0f64, log.sigma).expect("sigma positive");
            for (v, &m) in proj.data_mut().iter_mut().zip(sample.mask.data()) {
                if m == 0 {
                    *v = T::from_f64(v.to_f64() + dist.sample(rng));
                }
            }
        }
    }

    if tc.aug_morph {
        log.dilate = rng.random_bool(0.5);
        log.morph_iters = rng.random_range(0..=2usize);
        if log.morph_iters > 0 {
            if log.dilate {
                mask = mask.dilate(log.morph_iters);
            } else {
                let eroded = mask.erode(log.morph_iters);
                if eroded.any() || !mask.any() {
                    mask = eroded;
                } else {
                    log.morph_skipped = true;
                }
            }
        }
    }

    if tc.aug_flips {
        log.flip_h = rng.random_bool(0.5);
        log.flip_v = rng.random_bool(0.5);
        if log.flip_h || log.flip_v {
            proj = flip_image(&proj, log.flip_h, log.flip_v);
            mask = flip_mask(&mask, log.flip_h, log.flip_v);
        }
    }

    (Sample { proj, mask }, log)
}

/// Adam with f64 moment buffers keyed by parameter name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update over every bound parameter. `grads` must contain a
    /// gradient for each (backward fills zeros for untouched leaves).
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut ParamStore<T>,
        bound: &Bound,
        grads: &Gradients<T>,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, &id) in bound.iter() {
            let g = grads
                .get(id)
                .ok_or_else(|| Error::invalid(format!("adam: no gradient for `{name}`")))?;
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("adam: unknown parameter `{name}`")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for ((pv, &gv), (mv, vv)) in
                p.data_mut().iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gf = gv.to_f64();
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gf;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gf * gf;
                if self.lr != 0.0 {
                    let update = self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
                    *pv = T::from_f64(pv.to_f64() - update);
                }
            }
        }
        Ok(())
    }
}

const DISC_CHANNELS: [usize; 3] = [32, 64, 128];

/// Patch discriminator: 4 stride-2 convs mapping `[S,S,1]` to a logit map
/// `[1, S/16, S/16]`.
pub fn disc_forward<T: Scalar>(tape: &mut Tape<T>, p: &Bound, image: TensorId) -> Result<TensorId> {
    let chw = tape.permute(image, &[2, 0, 1])?;
    let mut x = chw;
    for i in 0..4 {
        let (w, b) = (p.get(&format!("disc.c{i}.w"))?, p.get(&format!("disc.c{i}.b"))?);
        x = tape.conv2d(x, w, b, 2, 1)?;
        if i < 3 {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

pub fn init_disc_params<T: Scalar>(seed: u64) -> ParamStore<T> {
    let mut rng = rng_for(seed, "disc");
    let mut store = ParamStore::new();
    let chans = [1, DISC_CHANNELS[0], DISC_CHANNELS[1], DISC_CHANNELS[2], 1];
    for i in 0..4 {
        let (ci, co) = (chans[i], chans[i + 1]);
        store.insert(format!("disc.c{i}.w"), he_normal(&mut rng, &[co, ci, 4, 4], ci * 16));
        store.insert(format!("disc.c{i}.b"), Tensor::zeros(&[co]));
    }
    store
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepMetrics {
    pub loss: f64,
    pub mae_full: f64,
    pub mae_metal: f64,
    pub adv: f64,
    pub disc_loss: f64,
}

fn tag_nonfinite(e: Error, batch_index: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} (train batch {batch_index})")),
        other => other,
    }
}

fn finite_or_abort<T: Scalar>(tape: &Tape<T>, id: TensorId, batch_index: usize) -> Result<f64> {
    let v = tape.value(id).data()[0].to_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss (train batch {batch_index})")));
    }
    Ok(v)
}

/// One optimization step: the discriminator sees real targets against
/// composited predictions and updates first; the generator then updates on
/// the composite loss. With `lambda_adv` = 0 the discriminator is untouched.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    batch: &[Sample<T>],
    gen: &mut ParamStore<T>,
    disc: &mut ParamStore<T>,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    mcfg: &ModelConfig,
    tc: &TrainConfig,
    batch_index: usize,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step: empty batch".to_string()));
    }
    let n = batch.len() as f64;
    let mut metrics = StepMetrics::default();

    if tc.lambda_adv > 0.0 {
        let mut tape = Tape::new();
        let bd = bind_all(&mut tape, disc, true);
        let bg = bind_all(&mut tape, gen, false);
        let mut total: Option<TensorId> = None;
        for sample in batch {
            let out = model_forward(&mut tape, &bg, &sample.proj, &sample.mask, mcfg)
                .map_err(|e| tag_nonfinite(e, batch_index))?;
            let target = tape.constant(sample.proj.clone());
            let comp = compose_on_tape(&mut tape, out.pred, target, &sample.mask)?;
            let d_real = disc_forward(&mut tape, &bd, target)?;
            let d_fake = disc_forward(&mut tape, &bd, comp)?;
            let neg_real = tape.scale(d_real, -1.0)?;
            let sp_real = tape.softplus(neg_real)?;
            let loss_real = tape.mean_all(sp_real)?;
            let sp_fake = tape.softplus(d_fake)?;
            let loss_fake = tape.mean_all(sp_fake)?;
            let pair = tape.add(loss_real, loss_fake)?;
            total = Some(match total {
                None => pair,
                Some(acc) => tape.add(acc, pair)?,
            });
        }
        let d_loss = tape.scale(total.expect("nonempty batch"), 1.0 / n)?;
        metrics.disc_loss = finite_or_abort(&tape, d_loss, batch_index)?;
        let grads = tape.backward(d_loss).map_err(|e| tag_nonfinite(e, batch_index))?;
        opt_d.step(disc, &bd, &grads)?;
    }

    let mut tape = Tape::new();
    let bg = bind_all(&mut tape, gen, true);
    let bd = bind_all(&mut tape, disc, false);
    let mut total: Option<TensorId> = None;
    for sample in batch {
        let out = model_forward(&mut tape, &bg, &sample.proj, &sample.mask, mcfg)
            .map_err(|e| tag_nonfinite(e, batch_index))?;
        let target = tape.constant(sample.proj.clone());
        let logits = if tc.lambda_adv > 0.0 {
            let comp = compose_on_tape(&mut tape, out.pred, target, &sample.mask)?;
            Some(disc_forward(&mut tape, &bd, comp)?)
        } else {
            None
        };
        let loss =
            composite_loss(&mut tape, out.pred, target, &sample.mask, logits, tc.lambda_adv)?;
        metrics.mae_full += tape.value(loss.mae_full).data()[0].to_f64() / n;
        if let Some(id) = loss.mae_metal {
            metrics.mae_metal += tape.value(id).data()[0].to_f64() / n;
        }
        if let Some(id) = loss.adv {
            metrics.adv += tape.value(id).data()[0].to_f64() / n;
        }
        total = Some(match total {
            None => loss.total,
            Some(acc) => tape.add(acc, loss.total)?,
        });
    }
    let g_loss = tape.scale(total.expect("nonempty batch"), 1.0 / n)?;
    metrics.loss = finite_or_abort(&tape, g_loss, batch_index)?;
    let grads = tape.backward(g_loss).map_err(|e| tag_nonfinite(e, batch_index))?;
    opt_g.step(gen, &bg, &grads)?;
    Ok(metrics)
}

/// Mean de-normalized metal-region MAE over the samples that have metal.
pub fn val_metal_mae<T: Scalar>(
    params: &ParamStore<T>,
    set: &[Sample<T>],
    mcfg: &ModelConfig,
    norm_scale: f64,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for sample in set {
        if !sample.mask.any() {
            continue;
        }
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, params, false);
        let out = model_forward(&mut tape, &b, &sample.proj, &sample.mask, mcfg)?;
        let pred = tape.value(out.pred);
        let mut acc = 0.0;
        for (idx, &m) in sample.mask.data().iter().enumerate() {
            if m == 1 {
                acc += (pred.data()[idx].to_f64() - sample.proj.data()[idx].to_f64()).abs();
            }
        }
        sum += norm_scale * acc / sample.mask.count() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid(
            "validation set has no metal pixels; selection metric undefined".to_string(),
        ));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub mae_full: f64,
    pub mae_metal: f64,
    pub adv: f64,
    pub disc_loss: f64,
    pub val_metal_mae: f64,
}

#[derive(Debug)]
pub struct FitResult<T: Scalar> {
    pub params: ParamStore<T>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub history: Vec<EpochStats>,
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,mae_full,mae_metal,adv,disc_loss,val_metal_mae\n");
    for h in history {
        out.push_str(&format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}\n",
            h.epoch, h.loss, h.mae_full, h.mae_metal, h.adv, h.disc_loss, h.val_metal_mae
        ));
    }
    out
}

fn train_config_text(tc: &TrainConfig) -> String {
    format!(
        "max_epochs={}\nbatch_size={}\nlr={:?}\nlambda_adv={:?}\nseed={}\naug_noise={}\naug_morph={}\naug_flips={}\npatience={}\n",
        tc.max_epochs,
        tc.batch_size,
        tc.lr,
        tc.lambda_adv,
        tc.seed,
        tc.aug_noise,
        tc.aug_morph,
        tc.aug_flips,
        tc.patience,
    )
}

/// Train until `max_epochs` or until validation metal MAE has not improved
/// for `patience` epochs; returns the parameters from the epoch with the
/// minimum. When `run_dir` is given, writes config.txt, history.csv and
/// best.mckp there.
pub fn fit<T: Scalar>(
    train: &[Sample<T>],
    val: &[Sample<T>],
    mcfg: &ModelConfig,
    tc: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<FitResult<T>> {
    mcfg.validate()?;
    tc.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("fit: train and validation sets must be nonempty".to_string()));
    }
    if !val.iter().any(|s| s.mask.any()) {
        return Err(Error::invalid(
            "validation set has no metal pixels; selection metric undefined".to_string(),
        ));
    }

    let mut gen = crate::model::init_params::<T>(mcfg, tc.seed);
    let mut disc = init_disc_params::<T>(tc.seed);
    let mut opt_g = Adam::new(tc.lr);
    let mut opt_d = Adam::new(tc.lr);
    let mut order_rng = rng_for(tc.seed, "order");
    let mut aug_rng = rng_for(tc.seed, "augment");

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<T>)> = None;
    let mut since_best = 0usize;
    let mut batch_counter = 0usize;

    for epoch in 0..tc.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);

        let mut acc = StepMetrics::default();
        let mut n_batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<Sample<T>> = chunk
                .iter()
                .map(|&i| {
                    if tc.aug_noise || tc.aug_morph || tc.aug_flips {
                        augment(&train[i], tc, &mut aug_rng).0
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            let m = train_step(
                &batch,
                &mut gen,
                &mut disc,
                &mut opt_g,
                &mut opt_d,
                mcfg,
                tc,
                batch_counter,
            )?;
            acc.loss += m.loss;
            acc.mae_full += m.mae_full;
            acc.mae_metal += m.mae_metal;
            acc.adv += m.adv;
            acc.disc_loss += m.disc_loss;
            n_batches += 1;
            batch_counter += 1;
        }
        let nb = n_batches as f64;
        let val_mae = val_metal_mae(&gen, val, mcfg, tc.norm_scale)?;
        let stats = EpochStats {
            epoch,
            loss: acc.loss / nb,
            mae_full: acc.mae_full / nb,
            mae_metal: acc.mae_metal / nb,
            adv: acc.adv / nb,
            disc_loss: acc.disc_loss / nb,
            val_metal_mae: val_mae,
        };
        if tc.verbose {
            eprintln!(
                "epoch {:>3}  loss {:.5}  mae_metal {:.5}  val_metal_mae {:.5}",
                epoch, stats.loss, stats.mae_metal, stats.val_metal_mae
            );
        }
        history.push(stats);

        let improved = best.as_ref().is_none_or(|(_, b, _)| val_mae < *b);
        if improved {
            best = Some((epoch, val_mae, gen.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val, params) = best.expect("at least one epoch ran");
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        let mut cfg_txt = crate::model::config_text(mcfg, tc.norm_scale);
        cfg_txt.push_str(&train_config_text(tc));
        std::fs::File::create(dir.join("config.txt"))?.write_all(cfg_txt.as_bytes())?;
        std::fs::File::create(dir.join("history.csv"))?
            .write_all(history_csv(&history).as_bytes())?;
        save_checkpoint(&dir.join("best.mckp"), mcfg, tc.norm_scale, &params)?;
    }
    Ok(FitResult { params, best_epoch, best_val, history })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::model::init_params;
    use crate::swin::EncoderConfig;
    use crate::metal::Variant;

    fn small_model(variant: Variant) -> ModelConfig {
        ModelConfig::new(
            EncoderConfig {
                patch_side: 4,
                embed_dim: 8,
                depths: [2, 2, 2],
                heads: [2, 2, 2],
                window: 8,
                shift: 4,
                input_side: 32,
            },
            variant,
        )
    }

    fn blob_sample(seed: u64) -> Sample<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..32 * 32).map(|_| rng.random_range(0.2..0.8)).collect();
        let proj = Tensor::from_vec(&[32, 32, 1], data).unwrap();
        let mut mask = MetalMask::zeros(32);
        for i in 12..17 {
            for j in 8..22 {
                mask.set(i, j, 1);
            }
        }
        Sample::new(proj, mask).unwrap()
    }

    fn quiet_tc() -> TrainConfig {
        TrainConfig {
            lambda_adv: 0.0,
            aug_noise: false,
            aug_morph: false,
            aug_flips: false,
            batch_size: 1,
            max_epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_is_zero_for_perfect_prediction() {
        let mut tape = Tape::new();
        let v = Tensor::from_vec(&[4, 4, 1], (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let a = tape.constant(v.clone());
        let b = tape.constant(v);
        let mut mask = MetalMask::zeros(4);
        mask.set(1, 2, 1);
        let loss = composite_loss(&mut tape, a, b, &mask, None, 0.0).unwrap();
        assert_eq!(tape.value(loss.total).data()[0], 0.0);
        assert!(loss.adv.is_none());
    }

    #[test]
    fn loss_on_empty_mask_is_plain_mae() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[4, 4, 1], 0.7f64));
        let b = tape.constant(Tensor::full(&[4, 4, 1], 0.2f64));
        let loss = composite_loss(&mut tape, a, b, &MetalMask::zeros(4), None, 0.0).unwrap();
        assert!((tape.value(loss.total).data()[0] - 0.5).abs() < 1e-12);
        assert!(loss.mae_metal.is_none());
    }

    #[test]
    fn loss_weights_metal_region_double() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[4, 4, 1], 0.9f64));
        let b = tape.constant(Tensor::full(&[4, 4, 1], 0.7f64));
        let mut mask = MetalMask::zeros(4);
        mask.set(0, 0, 1);
        mask.set(3, 3, 1);
        let loss = composite_loss(&mut tape, a, b, &mask, None, 0.0).unwrap();
        // MAE_full 0.2, MAE_metal 0.2 -> 0.2 + 2 * 0.2
        let got = tape.value(loss.total).data()[0];
        assert!((got - 0.6).abs() < 1e-12, "{got}");
    }

    #[test]
    fn adversarial_term_adds_softplus_of_negated_logits() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[4, 4, 1], 0.5f64));
        let b = tape.constant(Tensor::full(&[4, 4, 1], 0.5f64));
        let logits = tape.constant(Tensor::full(&[1, 2, 2], 3.0f64));
        let loss =
            composite_loss(&mut tape, a, b, &MetalMask::zeros(4), Some(logits), 0.5).unwrap();
        let want = 0.5 * (1.0 + (-3.0f64).exp()).ln();
        let got = tape.value(loss.total).data()[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        let adv = tape.value(loss.adv.unwrap()).data()[0];
        assert!((adv - (1.0 + (-3.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn augment_with_everything_disabled_is_identity() {
        let s = blob_sample(1);
        let tc = quiet_tc();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (out, log) = augment(&s, &tc, &mut rng);
        assert!(out.proj.bits_eq(&s.proj));
        assert_eq!(out.mask, s.mask);
        assert_eq!(log.sigma, 0.0);
        assert!(!log.flip_h && !log.flip_v);
    }

    #[test]
    fn augment_keeps_image_and_mask_aligned() {
        let s = blob_sample(2);
        let tc = TrainConfig {
            aug_noise: false,
            aug_morph: true,
            aug_flips: true,
            ..TrainConfig::default()
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, log) = augment(&s, &tc, &mut rng);
            let mut want_mask = s.mask.clone();
            if log.morph_iters > 0 && !log.morph_skipped {
                want_mask = if log.dilate {
                    want_mask.dilate(log.morph_iters)
                } else {
                    want_mask.erode(log.morph_iters)
                };
            }
            let want_mask = flip_mask(&want_mask, log.flip_h, log.flip_v);
            let want_proj = flip_image(&s.proj, log.flip_h, log.flip_v);
            assert_eq!(out.mask, want_mask, "seed {seed}");
            assert!(out.proj.bits_eq(&want_proj), "seed {seed}");
            if log.dilate && log.morph_iters > 0 {
                for (a, b) in s.mask.data().iter().zip(flip_mask(&out.mask, log.flip_h, log.flip_v).data()) {
                    assert!(b >= a, "dilation cleared a pixel");
                }
            }
        }
    }

    #[test]
    fn flips_are_involutions() {
        let s = blob_sample(3);
        for (fh, fv) in [(true, false), (false, true), (true, true)] {
            let twice = flip_image(&flip_image(&s.proj, fh, fv), fh, fv);
            assert!(twice.bits_eq(&s.proj));
            let mtwice = flip_mask(&flip_mask(&s.mask, fh, fv), fh, fv);
            assert_eq!(mtwice, s.mask);
        }
    }

    #[test]
    fn erosion_that_would_erase_mask_is_skipped() {
        let mut mask = MetalMask::zeros(32);
        mask.set(5, 5, 1); // single pixel: any erosion erases it
        let s = Sample::new(Tensor::zeros(&[32, 32, 1]), mask.clone()).unwrap();
        let tc = TrainConfig {
            aug_noise: false,
            aug_morph: true,
            aug_flips: false,
            ..TrainConfig::default()
        };
        let mut seen_skip = false;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, log) = augment::<f64>(&s, &tc, &mut rng);
            if !log.dilate && log.morph_iters > 0 {
                assert!(log.morph_skipped);
                assert_eq!(out.mask, mask);
                seen_skip = true;
            }
        }
        assert!(seen_skip, "no seed exercised the erosion-skip path");
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            let mut tape = Tape::new();
            let b = bind_all(&mut tape, &store, true);
            let x = b.get("x").unwrap();
            let c = tape.constant(Tensor::from_vec(&[1], vec![3.0]).unwrap());
            let d = tape.sub(x, c).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            let grads = tape.backward(loss).unwrap();
            opt.step(&mut store, &b, &grads).unwrap();
        }
        let x = store.get("x").unwrap().data()[0];
        assert!((x - 3.0).abs() < 1e-2, "x = {x}");
    }

    #[test]
    fn zero_learning_rate_keeps_params_bitwise() {
        let mcfg = small_model(Variant::SelfEmbed);
        let mut gen = init_params::<f64>(&mcfg, 3);
        let mut disc = init_disc_params::<f64>(3);
        let before = gen.clone();
        let tc = TrainConfig { lr: 0.0, ..quiet_tc() };
        let mut og = Adam::new(0.0);
        let mut od = Adam::new(0.0);
        let batch = [blob_sample(4)];
        train_step(&batch, &mut gen, &mut disc, &mut og, &mut od, &mcfg, &tc, 0).unwrap();
        assert!(gen.bits_eq(&before));
    }

    #[test]
    fn lambda_zero_never_touches_discriminator() {
        let mcfg = small_model(Variant::Baseline);
        let mut gen = init_params::<f64>(&mcfg, 5);
        let mut disc = init_disc_params::<f64>(5);
        let disc_before = disc.clone();
        let gen_before = gen.clone();
        let tc = quiet_tc();
        let mut og = Adam::new(tc.lr);
        let mut od = Adam::new(tc.lr);
        let batch = [blob_sample(6)];
        for i in 0..3 {
            train_step(&batch, &mut gen, &mut disc, &mut og, &mut od, &mcfg, &tc, i).unwrap();
        }
        assert!(disc.bits_eq(&disc_before));
        assert!(!gen.bits_eq(&gen_before), "generator should have moved");
    }

    #[test]
    fn adversarial_step_updates_both_networks() {
        let mcfg = small_model(Variant::Baseline);
        let mut gen = init_params::<f64>(&mcfg, 7);
        let mut disc = init_disc_params::<f64>(7);
        let disc_before = disc.clone();
        let tc = TrainConfig { lambda_adv: 0.01, ..quiet_tc() };
        let mut og = Adam::new(tc.lr);
        let mut od = Adam::new(tc.lr);
        let batch = [blob_sample(8)];
        let m = train_step(&batch, &mut gen, &mut disc, &mut og, &mut od, &mcfg, &tc, 0).unwrap();
        assert!(!disc.bits_eq(&disc_before));
        assert!(m.disc_loss > 0.0);
        assert!(m.adv > 0.0);
    }

    #[test]
    fn repeated_single_sample_training_reduces_loss() {
        let mcfg = small_model(Variant::Baseline);
        let mut gen = init_params::<f64>(&mcfg, 9);
        let mut disc = init_disc_params::<f64>(9);
        let tc = TrainConfig { lr: 1e-3, ..quiet_tc() };
        let mut og = Adam::new(tc.lr);
        let mut od = Adam::new(tc.lr);
        let batch = [blob_sample(10)];
        let first =
            train_step(&batch, &mut gen, &mut disc, &mut og, &mut od, &mcfg, &tc, 0).unwrap();
        let mut last = first;
        for i in 1..50 {
            last =
                train_step(&batch, &mut gen, &mut disc, &mut og, &mut od, &mcfg, &tc, i).unwrap();
        }
        assert!(
            last.loss < first.loss,
            "loss did not decrease: {} -> {}",
            first.loss,
            last.loss
        );
    }

    #[test]
    fn training_is_deterministic() {
        let mcfg = small_model(Variant::SelfEmbed);
        let run = || {
            let mut gen = init_params::<f64>(&mcfg, 11);
            let mut disc = init_disc_params::<f64>(11);
            let tc = TrainConfig { lambda_adv: 0.01, ..quiet_tc() };
            let mut og = Adam::new(tc.lr);
            let mut od = Adam::new(tc.lr);
            let batch = [blob_sample(12), blob_sample(13)];
            let mut metrics = Vec::new();
            for i in 0..3 {
                metrics.push(
                    train_step(&batch, &mut gen, &mut disc, &mut og, &mut od, &mcfg, &tc, i)
                        .unwrap()
                        .loss,
                );
            }
            (gen, metrics)
        };
        let (g1, m1) = run();
        let (g2, m2) = run();
        assert_eq!(m1, m2);
        assert!(g1.bits_eq(&g2));
    }

    #[test]
    fn non_finite_loss_reports_batch_index() {
        let mcfg = small_model(Variant::Baseline);
        let mut gen = init_params::<f64>(&mcfg, 15);
        for (_, t) in gen.iter_mut() {
            for v in t.data_mut() {
                *v = 1e200;
            }
        }
        let mut disc = init_disc_params::<f64>(15);
        let tc = quiet_tc();
        let mut og = Adam::new(tc.lr);
        let mut od = Adam::new(tc.lr);
        let batch = [blob_sample(16)];
        let err = train_step(&batch, &mut gen, &mut disc, &mut og, &mut od, &mcfg, &tc, 7)
            .unwrap_err()
            .to_string();
        assert!(err.contains("batch 7"), "{err}");
    }

    #[test]
    fn fit_single_epoch_writes_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mcfg = small_model(Variant::Baseline);
        let tc = TrainConfig { batch_size: 2, ..quiet_tc() };
        let train = [blob_sample(17), blob_sample(18)];
        let val = [blob_sample(19)];
        let result = fit(&train, &val, &mcfg, &tc, Some(dir.path())).unwrap();
        assert_eq!(result.history.len(), 1);
        assert_eq!(result.best_epoch, 0);
        assert!(dir.path().join("config.txt").exists());
        let csv = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2, "header plus one epoch");
        let (cfg, scale, loaded) =
            crate::model::load_checkpoint::<f64>(&dir.path().join("best.mckp")).unwrap();
        assert_eq!(cfg, mcfg);
        assert_eq!(scale, tc.norm_scale);
        assert!(loaded.bits_eq(&result.params));
    }

    #[test]
    fn fit_keeps_exact_minimum_of_validation_history() {
        let mcfg = small_model(Variant::Baseline);
        let tc = TrainConfig { max_epochs: 3, lr: 1e-3, ..quiet_tc() };
        let train = [blob_sample(20)];
        let val = [blob_sample(21)];
        let result = fit(&train, &val, &mcfg, &tc, None).unwrap();
        let min = result
            .history
            .iter()
            .map(|h| h.val_metal_mae)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(result.best_val, min);
        assert_eq!(result.history[result.best_epoch].val_metal_mae, min);
    }

    #[test]
    fn fit_rejects_validation_without_metal() {
        let mcfg = small_model(Variant::Baseline);
        let tc = quiet_tc();
        let train = [blob_sample(22)];
        let val = [Sample::new(Tensor::zeros(&[32, 32, 1]), MetalMask::zeros(32)).unwrap()];
        let err = fit(&train, &val, &mcfg, &tc, None).unwrap_err().to_string();
        assert!(err.contains("no metal"), "{err}");
    }
}
