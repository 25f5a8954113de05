//! Full inpainting network: Swin encoder with metal terms feeding a CNN
//! decoder with skip connections and a max-pooled mask pyramid, plus the
//! checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metal::{init_metal_params, pool_mask, stage_metal_terms, MetalMask, Variant};
use crate::params::{bind_all, he_normal, rng_for, Bound, ParamStore};
use crate::swin::{encoder_forward, init_encoder_params, EncoderConfig, TokenGrid};
use crate::tensor::io::{read_from, write_tensor_to, Mtns};
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, variant: Variant) -> Self {
        ModelConfig { encoder, variant }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.variant.validate()?;
        if self.encoder.embed_dim % 4 != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} must be divisible by 4 (decoder halves widths twice past it)",
                self.encoder.embed_dim
            )));
        }
        Ok(())
    }

    pub fn input_side(&self) -> usize {
        self.encoder.input_side
    }

    /// Output channels of the four upsampling blocks; halving mirrors the
    /// encoder's doubling.
    pub fn decoder_channels(&self) -> [usize; 4] {
        let c = self.encoder.embed_dim;
        [2 * c, c, c / 2, c / 4]
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(EncoderConfig::default(), Variant::Baseline)
    }
}

/// Token sequence `[h*w, c]` as a `[c, h, w]` feature map.
fn to_feature_map<T: Scalar>(tape: &mut Tape<T>, grid: &TokenGrid) -> Result<TensorId> {
    let hwc = tape.reshape(grid.values, &[grid.h, grid.w, grid.c])?;
    tape.permute(hwc, &[2, 0, 1])
}

/// Max-pooled mask as a one-channel feature map `[1, side/k, side/k]`.
fn mask_channel<T: Scalar>(tape: &mut Tape<T>, mask: &MetalMask, k: usize) -> Result<TensorId> {
    let pooled = pool_mask(mask, k)?;
    let g = pooled.side();
    let data = pooled.data().iter().map(|&v| T::from_f64(v as f64)).collect();
    Ok(tape.constant(Tensor::from_vec(&[1, g, g], data)?))
}

/// Decode the three stage outputs into a non-negative `[S, S, 1]` image.
///
/// The stage-2 tokens pass through a bottleneck conv; the stage-1 and
/// stage-0 tokens pass through channel-preserving adapter convs and join the
/// first two upsampling blocks as skips. Every block receives the metal mask
/// pooled to its resolution as an extra channel.
pub fn decoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    grids: &[TokenGrid; 3],
    mask: &MetalMask,
    cfg: &ModelConfig,
) -> Result<TensorId> {
    let s = cfg.input_side();
    if mask.side() != s {
        return Err(Error::invalid(format!(
            "decoder_forward: mask side {} does not match input side {s}",
            mask.side()
        )));
    }
    let fm2 = to_feature_map(tape, &grids[2])?;
    let (bw, bb) = (p.get("dec.bottleneck.w")?, p.get("dec.bottleneck.b")?);
    let mut x = tape.conv2d(fm2, bw, bb, 1, 1)?;

    let fm1 = to_feature_map(tape, &grids[1])?;
    let (w1, b1) = (p.get("dec.skip1.w")?, p.get("dec.skip1.b")?);
    let skip1 = tape.conv2d(fm1, w1, b1, 1, 1)?;
    let fm0 = to_feature_map(tape, &grids[0])?;
    let (w0, b0) = (p.get("dec.skip0.w")?, p.get("dec.skip0.b")?);
    let skip0 = tape.conv2d(fm0, w0, b0, 1, 1)?;

    let skips = [Some(skip1), Some(skip0), None, None];
    for (i, skip) in skips.iter().enumerate() {
        x = tape.upsample2x(x)?;
        let side = tape.shape(x)[1];
        let m = mask_channel(tape, mask, s / side)?;
        let parts: Vec<TensorId> = std::iter::once(x)
            .chain(skip.iter().copied())
            .chain(std::iter::once(m))
            .collect();
        let cat = tape.concat_channels(&parts)?;
        let (w, b) = (p.get(&format!("dec.up{i}.w"))?, p.get(&format!("dec.up{i}.b"))?);
        let conv = tape.conv2d(cat, w, b, 1, 1)?;
        x = tape.relu(conv)?;
    }

    let (hw, hb) = (p.get("dec.head.w")?, p.get("dec.head.b")?);
    let logits = tape.conv2d(x, hw, hb, 1, 1)?;
    let pos = tape.relu(logits)?;
    tape.permute(pos, &[1, 2, 0])
}

pub struct ModelOutput {
    /// Inpainted projection `[S, S, 1]`, elementwise non-negative.
    pub pred: TensorId,
    /// NE windows that fell back to a zero embedding (all-metal).
    pub all_metal_windows: usize,
}

/// End-to-end forward pass. Metal pixels of the projection are zeroed before
/// encoding (idempotent when the caller already did so). Composition with
/// the original input is the caller's job.
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    projection: &Tensor<T>,
    mask: &MetalMask,
    cfg: &ModelConfig,
) -> Result<ModelOutput> {
    cfg.validate()?;
    let s = cfg.input_side();
    if projection.shape() != [s, s, 1] {
        return Err(Error::invalid(format!(
            "model_forward: projection {:?} must be [{s}, {s}, 1]",
            projection.shape()
        )));
    }
    let zeroed = mask.zero_metal(projection)?;
    let image = tape.constant(zeroed);
    let terms = stage_metal_terms(tape, p, image, mask, &cfg.variant, &cfg.encoder)?;
    let grids = encoder_forward(tape, p, image, &terms.terms, &cfg.encoder)?;
    let pred = decoder_forward(tape, p, &grids, mask, cfg)?;
    Ok(ModelOutput { pred, all_metal_windows: terms.all_metal_windows })
}

/// Prediction inside the mask, original input outside; non-metal pixels stay
/// bit-identical to the input.
pub fn compose<T: Scalar>(
    pred: &Tensor<T>,
    input: &Tensor<T>,
    mask: &MetalMask,
) -> Result<Tensor<T>> {
    let s = mask.side();
    if pred.shape() != [s, s, 1] || input.shape() != [s, s, 1] {
        return Err(Error::invalid(format!(
            "compose: pred {:?} / input {:?} must be [{s}, {s}, 1]",
            pred.shape(),
            input.shape()
        )));
    }
    let data = pred
        .data()
        .iter()
        .zip(input.data())
        .zip(mask.data())
        .map(|((&p, &i), &m)| if m == 1 { p } else { i })
        .collect();
    Tensor::from_vec(pred.shape(), data)
}

fn init_decoder_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = rng_for(seed, "dec");
    let mut store = ParamStore::new();
    let dc = cfg.decoder_channels();
    let c2 = cfg.encoder.stage_channels(2);
    let mut conv = |store: &mut ParamStore<T>, name: &str, co: usize, ci: usize| {
        store.insert(format!("{name}.w"), he_normal(&mut rng, &[co, ci, 3, 3], ci * 9));
        store.insert(format!("{name}.b"), Tensor::zeros(&[co]));
    };
    conv(&mut store, "dec.bottleneck", c2, c2);
    conv(&mut store, "dec.skip1", cfg.encoder.stage_channels(1), cfg.encoder.stage_channels(1));
    conv(&mut store, "dec.skip0", cfg.encoder.stage_channels(0), cfg.encoder.stage_channels(0));
    let ins = [
        c2 + cfg.encoder.stage_channels(1) + 1,
        dc[0] + cfg.encoder.stage_channels(0) + 1,
        dc[1] + 1,
        dc[2] + 1,
    ];
    for i in 0..4 {
        conv(&mut store, &format!("dec.up{i}"), dc[i], ins[i]);
    }
    conv(&mut store, "dec.head", 1, dc[3]);
    store
}

/// Initialize all parameters of a variant. Groups draw from independent seed
/// streams, so the encoder and decoder are bitwise identical across variants
/// built from the same seed.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut store = init_encoder_params(&cfg.encoder, seed);
    store.merge(init_metal_params(&cfg.encoder, &cfg.variant, seed));
    store.merge(init_decoder_params(cfg, seed));
    store
}

/// Expected parameter names and shapes for a config, used to validate
/// checkpoints without sampling any values.
pub fn param_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let mut m = BTreeMap::new();
    let e = &cfg.encoder;
    let p2 = e.patch_side * e.patch_side;
    let n1 = e.grid_side(0) * e.grid_side(0);
    m.insert("enc.patch.w".to_string(), vec![p2, e.embed_dim]);
    m.insert("enc.patch.b".to_string(), vec![e.embed_dim]);
    m.insert("enc.pos".to_string(), vec![n1, e.embed_dim]);
    for s in 0..3 {
        let c = e.stage_channels(s);
        for l in 0..e.depths[s] {
            let pre = format!("enc.s{s}.b{l}.");
            for nm in ["ln1.g", "ln1.b", "ln2.g", "ln2.b"] {
                m.insert(format!("{pre}{nm}"), vec![c]);
            }
            for nm in ["wq", "wk", "wv", "wo"] {
                m.insert(format!("{pre}attn.{nm}"), vec![c, c]);
            }
            for nm in ["bq", "bk", "bv", "bo"] {
                m.insert(format!("{pre}attn.{nm}"), vec![c]);
            }
            m.insert(format!("{pre}mlp.w1"), vec![c, 4 * c]);
            m.insert(format!("{pre}mlp.b1"), vec![4 * c]);
            m.insert(format!("{pre}mlp.w2"), vec![4 * c, c]);
            m.insert(format!("{pre}mlp.b2"), vec![c]);
        }
        if s < 2 {
            let pre = format!("enc.m{s}.");
            m.insert(format!("{pre}ln.g"), vec![4 * c]);
            m.insert(format!("{pre}ln.b"), vec![4 * c]);
            m.insert(format!("{pre}w"), vec![4 * c, 2 * c]);
        }
    }
    match cfg.variant {
        Variant::Baseline => {}
        Variant::SelfEmbed => {
            for s in 0..3 {
                let (k, c) = (e.stage_patch_side(s), e.stage_channels(s));
                m.insert(format!("met.se.s{s}.w"), vec![k * k, c]);
                m.insert(format!("met.se.s{s}.b"), vec![c]);
            }
        }
        Variant::Neighborhood { .. } => {
            for s in 0..3 {
                let (k, c) = (e.stage_patch_side(s), e.stage_channels(s));
                m.insert(format!("met.ne.s{s}.embed.w"), vec![k * k, c]);
                m.insert(format!("met.ne.s{s}.embed.b"), vec![c]);
                for nm in ["wq", "wk", "wv"] {
                    m.insert(format!("met.ne.s{s}.{nm}"), vec![c, c]);
                }
                for nm in ["bq", "bk", "bv"] {
                    m.insert(format!("met.ne.s{s}.{nm}"), vec![c]);
                }
            }
        }
    }
    let dc = cfg.decoder_channels();
    let c2 = e.stage_channels(2);
    let conv = |m: &mut BTreeMap<String, Vec<usize>>, name: &str, co: usize, ci: usize| {
        m.insert(format!("{name}.w"), vec![co, ci, 3, 3]);
        m.insert(format!("{name}.b"), vec![co]);
    };
    conv(&mut m, "dec.bottleneck", c2, c2);
    conv(&mut m, "dec.skip1", e.stage_channels(1), e.stage_channels(1));
    conv(&mut m, "dec.skip0", e.stage_channels(0), e.stage_channels(0));
    let ins = [c2 + e.stage_channels(1) + 1, dc[0] + e.stage_channels(0) + 1, dc[1] + 1, dc[2] + 1];
    for i in 0..4 {
        conv(&mut m, &format!("dec.up{i}"), dc[i], ins[i]);
    }
    conv(&mut m, "dec.head", 1, dc[3]);
    m
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn config_text(cfg: &ModelConfig, norm_scale: f64) -> String {
    let e = &cfg.encoder;
    let join = |v: [usize; 3]| v.map(|x| x.to_string()).join(",");
    format!(
        "patch_side={}\nembed_dim={}\ndepths={}\nheads={}\nwindow={}\nshift={}\ninput_side={}\nvariant={}\nnorm_scale={:?}\n",
        e.patch_side,
        e.embed_dim,
        join(e.depths),
        join(e.heads),
        e.window,
        e.shift,
        e.input_side,
        cfg.variant.name(),
        norm_scale,
    )
}

fn parse_config_text(text: &str) -> Result<(ModelConfig, f64)> {
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("checkpoint", format!("bad config line `{line}`")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| Error::format("checkpoint", format!("missing config key `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format("checkpoint", format!("bad value for `{k}`")))
    };
    let triple = |k: &str| -> Result<[usize; 3]> {
        let parts: Vec<usize> = get(k)?
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format("checkpoint", format!("bad value for `{k}`")))?;
        parts
            .try_into()
            .map_err(|_| Error::format("checkpoint", format!("`{k}` must have 3 entries")))
    };
    let encoder = EncoderConfig {
        patch_side: num("patch_side")?,
        embed_dim: num("embed_dim")?,
        depths: triple("depths")?,
        heads: triple("heads")?,
        window: num("window")?,
        shift: num("shift")?,
        input_side: num("input_side")?,
    };
    let variant: Variant = get("variant")?.parse()?;
    let norm_scale: f64 = get("norm_scale")?
        .parse()
        .map_err(|_| Error::format("checkpoint", "bad value for `norm_scale`".to_string()))?;
    if !(norm_scale.is_finite() && norm_scale > 0.0) {
        return Err(Error::format("checkpoint", "norm_scale must be positive".to_string()));
    }
    let cfg = ModelConfig::new(encoder, variant);
    cfg.validate()?;
    Ok((cfg, norm_scale))
}

/// Write a checkpoint: magic, version, config block, then the named
/// parameter tensors.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    cfg: &ModelConfig,
    norm_scale: f64,
    params: &ParamStore<T>,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let text = config_text(cfg, norm_scale);
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor_to(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint and validate that its tensors exactly match the shapes
/// the config demands. Stored f32/f64 tensors are converted to `T`.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelConfig, f64, ParamStore<T>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let text_len = u32::from_le_bytes(u32buf) as usize;
    let mut text = vec![0u8; text_len];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text)
        .map_err(|_| Error::format("checkpoint", "config block is not UTF-8".to_string()))?;
    let (cfg, norm_scale) = parse_config_text(&text)?;

    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        r.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8".to_string()))?;
        let t: Tensor<T> = match read_from(&mut r)? {
            Mtns::F32(t) => t.cast(),
            Mtns::F64(t) => t.cast(),
            Mtns::U8(..) => {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor `{name}` must be float"),
                ))
            }
        };
        if store.get(&name).is_some() {
            return Err(Error::format("checkpoint", format!("duplicate tensor `{name}`")));
        }
        store.insert(name, t);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("checkpoint", "trailing bytes".to_string()));
    }

    let expected = param_shapes(&cfg);
    for (name, shape) in &expected {
        match store.get(name) {
            None => {
                return Err(Error::format("checkpoint", format!("missing tensor `{name}`")))
            }
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor `{name}` has shape {:?}, config demands {shape:?}", t.shape()),
                ))
            }
            Some(_) => {}
        }
    }
    if store.len() != expected.len() {
        let extra: Vec<&str> =
            store.names().filter(|n| !expected.contains_key(*n)).collect();
        return Err(Error::format("checkpoint", format!("unexpected tensors {extra:?}")));
    }
    Ok((cfg, norm_scale, store))
}

/// Convenience wrapper: run one projection through a parameter store and
/// compose the result with the input.
pub fn infer_one<T: Scalar>(
    params: &ParamStore<T>,
    projection: &Tensor<T>,
    mask: &MetalMask,
    cfg: &ModelConfig,
) -> Result<(Tensor<T>, usize)> {
    let mut tape = Tape::new();
    let bound = bind_all(&mut tape, params, false);
    let out = model_forward(&mut tape, &bound, projection, mask, cfg)?;
    let pred = tape.value(out.pred).clone();
    let composed = compose(&pred, &projection.clone(), mask)?;
    Ok((composed, out.all_metal_windows))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::randomize_for_grad_check;
    use crate::tensor::grad_check_entries;

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

    fn rand_proj(side: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(&[side, side, 1], data).unwrap()
    }

    fn blob_mask(side: usize) -> MetalMask {
        let mut m = MetalMask::zeros(side);
        for i in 10..14 {
            for j in 6..20 {
                m.set(i, j, 1);
            }
        }
        m
    }

    #[test]
    fn forward_shape_and_nonnegativity() {
        let cfg = small_model(Variant::Baseline);
        let params = init_params::<f64>(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = rand_proj(32, &mut rng);
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, &params, false);
        let out = model_forward(&mut tape, &b, &proj, &MetalMask::zeros(32), &cfg).unwrap();
        let pred = tape.value(out.pred);
        assert_eq!(pred.shape(), &[32, 32, 1]);
        assert!(pred.data().iter().all(|&v| v >= 0.0));
        assert_eq!(out.all_metal_windows, 0);
    }

    #[test]
    fn zeroed_params_with_head_bias_give_constant_output() {
        let cfg = small_model(Variant::SelfEmbed);
        let mut params = init_params::<f64>(&cfg, 7);
        for (_, t) in params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        params.get_mut("dec.head.b").unwrap().data_mut()[0] = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proj = rand_proj(32, &mut rng);
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, &params, false);
        let out = model_forward(&mut tape, &b, &proj, &blob_mask(32), &cfg).unwrap();
        assert!(tape.value(out.pred).data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn zeroed_self_embed_reproduces_baseline_bitwise() {
        let base_cfg = small_model(Variant::Baseline);
        let se_cfg = small_model(Variant::SelfEmbed);
        let base = init_params::<f64>(&base_cfg, 11);
        let mut se = init_params::<f64>(&se_cfg, 11);
        for s in 0..3 {
            se.get_mut(&format!("met.se.s{s}.w")).unwrap().data_mut().fill(0.0);
            se.get_mut(&format!("met.se.s{s}.b")).unwrap().data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proj = rand_proj(32, &mut rng);
        let mask = blob_mask(32);

        let mut t1 = Tape::new();
        let b1 = bind_all(&mut t1, &base, false);
        let o1 = model_forward(&mut t1, &b1, &proj, &mask, &base_cfg).unwrap();
        let mut t2 = Tape::new();
        let b2 = bind_all(&mut t2, &se, false);
        let o2 = model_forward(&mut t2, &b2, &proj, &mask, &se_cfg).unwrap();
        assert!(t1.value(o1.pred).bits_eq(t2.value(o2.pred)));
    }

    #[test]
    fn shared_groups_are_bitwise_identical_across_variants() {
        let a = init_params::<f32>(&small_model(Variant::Baseline), 5);
        let b = init_params::<f32>(&small_model(Variant::Neighborhood { window: 16 }), 5);
        for (name, t) in a.iter() {
            assert!(t.bits_eq(b.get(name).expect(name)), "{name} differs");
        }
    }

    #[test]
    fn init_matches_declared_param_shapes() {
        for variant in
            [Variant::Baseline, Variant::SelfEmbed, Variant::Neighborhood { window: 8 }]
        {
            let cfg = small_model(variant);
            let store = init_params::<f32>(&cfg, 1);
            let shapes = param_shapes(&cfg);
            assert_eq!(store.len(), shapes.len());
            for (name, shape) in &shapes {
                assert_eq!(store.get(name).expect(name).shape(), shape.as_slice(), "{name}");
            }
        }
    }

    #[test]
    fn composition_keeps_non_metal_pixels_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred = rand_proj(32, &mut rng);
        let input = rand_proj(32, &mut rng);
        let mask = blob_mask(32);
        let out = compose(&pred, &input, &mask).unwrap();
        for (idx, &m) in mask.data().iter().enumerate() {
            let want = if m == 1 { pred.data()[idx] } else { input.data()[idx] };
            assert_eq!(out.data()[idx].to_bits(), want.to_bits());
        }
    }

    #[test]
    fn every_param_gets_nonzero_gradient() {
        for variant in
            [Variant::Baseline, Variant::SelfEmbed, Variant::Neighborhood { window: 8 }]
        {
            let cfg = small_model(variant);
            let params = init_params::<f64>(&cfg, 13);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let proj = rand_proj(32, &mut rng);
            let target = rand_proj(32, &mut rng);
            let mask = blob_mask(32);
            let mut tape = Tape::new();
            let b = bind_all(&mut tape, &params, true);
            let out = model_forward(&mut tape, &b, &proj, &mask, &cfg).unwrap();
            let tgt = tape.constant(target);
            let diff = tape.sub(out.pred, tgt).unwrap();
            let adiff = tape.abs(diff).unwrap();
            let loss = tape.mean_all(adiff).unwrap();
            let grads = tape.backward(loss).unwrap();
            for (name, &id) in b.iter() {
                let g = grads.get(id).expect(name);
                assert!(
                    g.iter().any(|&v| v != 0.0),
                    "{name} got all-zero gradient under {}",
                    variant.name()
                );
            }
        }
    }

    #[test]
    fn model_loss_gradient_matches_finite_differences() {
        let cfg = small_model(Variant::Neighborhood { window: 8 });
        let mut params = init_params::<f64>(&cfg, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Finite differences need a non-degenerate point: moderate weights
        // keep softmax gradients above FD noise, and biases away from zero
        // keep relu pre-activations off their kinks.
        randomize_for_grad_check(&mut params, &mut rng);
        let proj = rand_proj(32, &mut rng);
        let target = rand_proj(32, &mut rng);
        let mask = blob_mask(32);
        let mask_t: Tensor<f64> = Tensor::from_vec(
            &[32, 32, 1],
            mask.data().iter().map(|&m| m as f64).collect(),
        )
        .unwrap();
        let n_metal = mask.count() as f64;

        let names: Vec<String> = params.names().map(String::from).collect();
        let inputs: Vec<Tensor<f64>> =
            names.iter().map(|n| params.get(n).unwrap().clone()).collect();
        let picks = [
            "enc.patch.w",
            "enc.s0.b0.attn.wq",
            "enc.s2.b1.mlp.w2",
            "met.ne.s1.wq",
            "met.ne.s0.embed.w",
            "dec.bottleneck.w",
            "dec.up3.w",
            "dec.head.b",
        ];
        // Check each tensor at its largest-magnitude gradient entry; tiny
        // entries sit below the FD noise floor and measure nothing.
        let mut entries = Vec::new();
        {
            let mut tape = Tape::new();
            let b = bind_all(&mut tape, &params, true);
            let out = model_forward(&mut tape, &b, &proj, &mask, &cfg).unwrap();
            let tgt = tape.constant(target.clone());
            let diff = tape.sub(out.pred, tgt).unwrap();
            let adiff = tape.abs(diff).unwrap();
            let mt = tape.constant(mask_t.clone());
            let masked = tape.mul(adiff, mt).unwrap();
            let total = tape.sum_all(masked).unwrap();
            let loss = tape.scale(total, 1.0 / n_metal).unwrap();
            let grads = tape.backward(loss).unwrap();
            for pick in picks {
                let i = names.iter().position(|n| n == pick).unwrap();
                let g = grads.get(b.get(pick).unwrap()).unwrap();
                let (j, _) = g
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                    .unwrap();
                entries.push((i, j));
            }
        }

        for (pick, entry) in picks.iter().zip(&entries) {
            let max_rel = grad_check_entries(
                |tape, ids| {
                    let mut bound = Bound::default();
                    for (n, &id) in names.iter().zip(ids) {
                        bound.insert(n.clone(), id);
                    }
                    let out = model_forward(tape, &bound, &proj, &mask, &cfg)?;
                    let tgt = tape.constant(target.clone());
                    let diff = tape.sub(out.pred, tgt)?;
                    let adiff = tape.abs(diff)?;
                    let mt = tape.constant(mask_t.clone());
                    let masked = tape.mul(adiff, mt)?;
                    let total = tape.sum_all(masked)?;
                    tape.scale(total, 1.0 / n_metal)
                },
                &inputs,
                std::slice::from_ref(entry),
            )
            .unwrap();
            assert!(max_rel <= 1e-4, "{pick}: rel {max_rel:.3e}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mckp");
        let cfg = small_model(Variant::Neighborhood { window: 4 });
        let params = init_params::<f32>(&cfg, 23);
        save_checkpoint(&path, &cfg, 5.0, &params).unwrap();
        let (cfg2, scale, loaded) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(scale, 5.0);
        assert!(loaded.bits_eq(&params));
    }

    #[test]
    fn checkpoint_rejects_mismatch_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_model(Variant::SelfEmbed);
        let params = init_params::<f32>(&cfg, 29);

        let path = dir.path().join("bad_magic.mckp");
        save_checkpoint(&path, &cfg, 5.0, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());

        let path = dir.path().join("missing.mckp");
        let mut short = params.clone();
        let removed = short.remove("met.se.s1.w");
        assert!(removed.is_some());
        save_checkpoint(&path, &cfg, 5.0, &short).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("met.se.s1.w"), "{err}");

        let path = dir.path().join("badshape.mckp");
        let mut warped = params.clone();
        *warped.get_mut("dec.head.b").unwrap() = Tensor::zeros(&[2]);
        save_checkpoint(&path, &cfg, 5.0, &warped).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("dec.head.b"), "{err}");

        let path = dir.path().join("truncated.mckp");
        save_checkpoint(&path, &cfg, 5.0, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn infer_composes_with_input() {
        let cfg = small_model(Variant::Baseline);
        let params = init_params::<f64>(&cfg, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let proj = rand_proj(32, &mut rng);
        let mask = blob_mask(32);
        let (out, warnings) = infer_one(&params, &proj, &mask, &cfg).unwrap();
        assert_eq!(warnings, 0);
        for (idx, &m) in mask.data().iter().enumerate() {
            if m == 0 {
                assert_eq!(out.data()[idx].to_bits(), proj.data()[idx].to_bits());
            }
        }
    }
}
