//! Metal-mask embeddings injected into the encoder stages.
//!
//! Two mechanisms: self-embedding (SE) linearly embeds mask patches, and
//! neighborhood embedding (NE) lets metal patches gather content from their
//! metal-free neighbors through masked attention over windows of a dedicated
//! patch embedding of the metal-zeroed image.

use crate::error::{Error, Result};
use crate::params::{rng_for, trunc_normal, Bound, ParamStore};
use crate::swin::{effective_window, window_reverse, EncoderConfig, MASK_LOGIT};
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

/// Binary metal image: 1 marks a metal pixel. Square, side `side`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetalMask {
    side: usize,
    data: Vec<u8>,
}

impl MetalMask {
    pub fn new(side: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != side * side {
            return Err(Error::invalid(format!(
                "metal mask: {} values for side {side}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("metal mask: values must be 0 or 1".to_string()));
        }
        Ok(MetalMask { side, data })
    }

    pub fn zeros(side: usize) -> Self {
        MetalMask { side, data: vec![0; side * side] }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.side + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[i * self.side + j] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v == 1)
    }

    pub fn all(&self) -> bool {
        self.data.iter().all(|&v| v == 1)
    }

    /// Mask as a float image `[side, side]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.side, self.side],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("mask length checked at construction")
    }

    /// Zero the metal pixels of an `[S, S, 1]` image.
    pub fn zero_metal<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        if image.shape() != [self.side, self.side, 1] {
            return Err(Error::invalid(format!(
                "zero_metal: image {:?} does not match mask side {}",
                image.shape(),
                self.side
            )));
        }
        let data = image
            .data()
            .iter()
            .zip(&self.data)
            .map(|(&v, &m)| if m == 1 { T::zero() } else { v })
            .collect();
        Tensor::from_vec(image.shape(), data)
    }

    /// 3x3 box dilation, `iters` times.
    pub fn dilate(&self, iters: usize) -> MetalMask {
        let mut cur = self.clone();
        let s = self.side as isize;
        for _ in 0..iters {
            let mut next = cur.clone();
            for i in 0..s {
                for j in 0..s {
                    if cur.data[(i * s + j) as usize] == 0 {
                        continue;
                    }
                    for di in -1..=1 {
                        for dj in -1..=1 {
                            let (ni, nj) = (i + di, j + dj);
                            if (0..s).contains(&ni) && (0..s).contains(&nj) {
                                next.data[(ni * s + nj) as usize] = 1;
                            }
                        }
                    }
                }
            }
            cur = next;
        }
        cur
    }

    /// 3x3 box erosion, `iters` times.
    pub fn erode(&self, iters: usize) -> MetalMask {
        let mut cur = self.clone();
        let s = self.side as isize;
        for _ in 0..iters {
            let mut next = cur.clone();
            for i in 0..s {
                for j in 0..s {
                    if cur.data[(i * s + j) as usize] == 0 {
                        continue;
                    }
                    let mut keep = true;
                    'scan: for di in -1..=1 {
                        for dj in -1..=1 {
                            let (ni, nj) = (i + di, j + dj);
                            if !(0..s).contains(&ni)
                                || !(0..s).contains(&nj)
                                || cur.data[(ni * s + nj) as usize] == 0
                            {
                                keep = false;
                                break 'scan;
                            }
                        }
                    }
                    if !keep {
                        next.data[(i * s + j) as usize] = 0;
                    }
                }
            }
            cur = next;
        }
        cur
    }
}

/// Binary metal flags for the N patches of one NE window.
#[derive(Clone, Debug)]
pub struct MetalTokenVector {
    pub m: Vec<u8>,
    pub window_id: usize,
    /// Pixel side of the patches this vector describes.
    pub patch_side: usize,
}

impl MetalTokenVector {
    pub fn new(m: Vec<u8>, window_id: usize, patch_side: usize) -> Result<Self> {
        if m.iter().any(|&v| v > 1) {
            return Err(Error::invalid("metal token vector: values must be 0 or 1".to_string()));
        }
        Ok(MetalTokenVector { m, window_id, patch_side })
    }
}

/// The rank-at-most-1 matrix M = m 1ᵀ: row i is all-ones when patch i is
/// metal, all-zeros otherwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetalAttentionMatrix {
    n: usize,
    data: Vec<u8>,
}

impl MetalAttentionMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

pub fn build_metal_attention_matrix(m: &MetalTokenVector) -> MetalAttentionMatrix {
    let n = m.m.len();
    let mut data = vec![0u8; n * n];
    for (i, &mi) in m.m.iter().enumerate() {
        if mi == 1 {
            data[i * n..(i + 1) * n].fill(1);
        }
    }
    MetalAttentionMatrix { n, data }
}

/// Max-pool a binary mask with kernel `k`: a cell is 1 iff any pixel of its
/// k x k block is metal.
pub fn pool_mask(mask: &MetalMask, k: usize) -> Result<MetalMask> {
    if k == 0 || mask.side % k != 0 {
        return Err(Error::invalid(format!(
            "pool_mask: kernel {k} does not divide side {}",
            mask.side
        )));
    }
    let g = mask.side / k;
    let mut data = vec![0u8; g * g];
    for i in 0..g {
        for j in 0..g {
            'block: for u in 0..k {
                for v in 0..k {
                    if mask.get(i * k + u, j * k + v) == 1 {
                        data[i * g + j] = 1;
                        break 'block;
                    }
                }
            }
        }
    }
    MetalMask::new(g, data)
}

/// Which embedding, if any, feeds the encoder stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    SelfEmbed,
    /// NE with the given window side in tokens.
    Neighborhood { window: usize },
}

pub const NE_WINDOWS: [usize; 4] = [4, 8, 16, 32];

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Baseline => "baseline".to_string(),
            Variant::SelfEmbed => "se".to_string(),
            Variant::Neighborhood { window } => format!("ne{window}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Variant::Neighborhood { window } = self {
            if !NE_WINDOWS.contains(window) {
                return Err(Error::invalid(format!(
                    "NE window {window} must be one of {NE_WINDOWS:?}"
                )));
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v = match s {
            "baseline" => Variant::Baseline,
            "se" => Variant::SelfEmbed,
            _ => match s.strip_prefix("ne").and_then(|w| w.parse::<usize>().ok()) {
                Some(w) => Variant::Neighborhood { window: w },
                None => return Err(Error::invalid(format!("unknown variant `{s}`"))),
            },
        };
        v.validate()?;
        Ok(v)
    }
}

/// Per-stage additive terms plus degenerate-window bookkeeping.
pub struct MetalTerms {
    pub terms: [Option<TensorId>; 3],
    /// NE windows that contained no metal-free patch and fell back to a
    /// zero embedding.
    pub all_metal_windows: usize,
}

impl MetalTerms {
    pub fn none() -> Self {
        MetalTerms { terms: [None, None, None], all_metal_windows: 0 }
    }
}

/// Masked-attention core shared by [`neighborhood_embed`] and the per-stage
/// batch path. `window_masks[w]` holds the binary metal vector of window w.
/// Returns (E `[nW, N, C]`, attention probs `[nW*heads, N, N]`, number of
/// all-metal windows).
pub(crate) fn ne_batch_probs<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    tokens: TensorId,
    window_masks: &[Vec<u8>],
    heads: usize,
) -> Result<(TensorId, TensorId, usize)> {
    let (nw, n, c) = match tape.shape(tokens) {
        [nw, n, c] => (*nw, *n, *c),
        s => return Err(Error::invalid(format!("neighborhood_embed: {s:?} must be [nW,N,C]"))),
    };
    if window_masks.len() != nw || window_masks.iter().any(|m| m.len() != n) {
        return Err(Error::invalid(format!(
            "neighborhood_embed: window masks do not match {nw} windows of {n} tokens"
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid(format!(
            "neighborhood_embed: heads {heads} must divide channels {c}"
        )));
    }
    let d = c / heads;
    let neg = T::from_f64(MASK_LOGIT);
    let all_metal: Vec<bool> = window_masks.iter().map(|m| m.iter().all(|&v| v == 1)).collect();
    let n_all_metal = all_metal.iter().filter(|&&b| b).count();

    // Column mask: keys at metal positions are inadmissible.
    let mut col = vec![T::zero(); nw * heads * n * n];
    for (w, m) in window_masks.iter().enumerate() {
        for (b, &mb) in m.iter().enumerate() {
            if mb == 1 {
                for h in 0..heads {
                    for a in 0..n {
                        col[(((w * heads + h) * n) + a) * n + b] = neg;
                    }
                }
            }
        }
    }
    let colmask = tape.constant(Tensor::from_vec(&[nw * heads, n, n], col)?);

    // Row mask M: metal rows keep their convex combination, metal-free rows
    // zero out; all-metal windows zero out entirely (degenerate fallback).
    let mut row = vec![T::zero(); nw * n * c];
    for (w, m) in window_masks.iter().enumerate() {
        if all_metal[w] {
            continue;
        }
        for (i, &mi) in m.iter().enumerate() {
            if mi == 1 {
                row[(w * n + i) * c..(w * n + i + 1) * c].fill(T::one());
            }
        }
    }
    let rowmask = tape.constant(Tensor::from_vec(&[nw, n, c], row)?);

    let split = |tape: &mut Tape<T>, x: TensorId| -> Result<TensorId> {
        let r = tape.reshape(x, &[nw, n, heads, d])?;
        let pm = tape.permute(r, &[0, 2, 1, 3])?;
        tape.reshape(pm, &[nw * heads, n, d])
    };
    let q = {
        let (w, b) = (p.get(&format!("{prefix}wq"))?, p.get(&format!("{prefix}bq"))?);
        tape.linear(tokens, w, b)?
    };
    let k = {
        let (w, b) = (p.get(&format!("{prefix}wk"))?, p.get(&format!("{prefix}bk"))?);
        tape.linear(tokens, w, b)?
    };
    let v = {
        let (w, b) = (p.get(&format!("{prefix}wv"))?, p.get(&format!("{prefix}bv"))?);
        tape.linear(tokens, w, b)?
    };
    let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
    let kt = tape.permute(kh, &[0, 2, 1])?;
    let logits = tape.matmul(qh, kt)?;
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let masked = tape.add(scaled, colmask)?;
    let probs = tape.softmax_lastdim(masked)?;
    let ctx = tape.matmul(probs, vh)?;
    let r = tape.reshape(ctx, &[nw, heads, n, d])?;
    let pm = tape.permute(r, &[0, 2, 1, 3])?;
    let merged = tape.reshape(pm, &[nw, n, c])?;
    let embed = tape.mul(merged, rowmask)?;
    Ok((embed, probs, n_all_metal))
}

/// Neighborhood embedding of one window: metal rows become convex
/// combinations of metal-free neighbors' values, metal-free rows are exactly
/// zero. Returns the `[N, C]` embedding and whether the degenerate all-metal
/// fallback fired.
pub fn neighborhood_embed<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    tokens: TensorId,
    m: &MetalTokenVector,
    heads: usize,
) -> Result<(TensorId, bool)> {
    let (e, _, degenerate) = neighborhood_embed_with_probs(tape, p, prefix, tokens, m, heads)?;
    Ok((e, degenerate))
}

/// [`neighborhood_embed`] plus the post-softmax attention probabilities
/// (`[heads, N, N]`), so callers can verify the masking directly.
pub fn neighborhood_embed_with_probs<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    tokens: TensorId,
    m: &MetalTokenVector,
    heads: usize,
) -> Result<(TensorId, TensorId, bool)> {
    let (n, c) = match tape.shape(tokens) {
        [n, c] => (*n, *c),
        s => return Err(Error::invalid(format!("neighborhood_embed: {s:?} must be [N,C]"))),
    };
    if m.m.len() != n {
        return Err(Error::invalid(format!(
            "neighborhood_embed: {} mask entries for {n} tokens",
            m.m.len()
        )));
    }
    let batched = tape.reshape(tokens, &[1, n, c])?;
    let (e, probs, degenerate) =
        ne_batch_probs(tape, p, prefix, batched, std::slice::from_ref(&m.m), heads)?;
    Ok((tape.reshape(e, &[n, c])?, probs, degenerate > 0))
}

/// Linear embedding of flattened mask patches for one stage.
pub fn self_embed<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    mask: &MetalMask,
    stage: usize,
    cfg: &EncoderConfig,
) -> Result<TensorId> {
    let k = cfg.stage_patch_side(stage);
    if mask.side() % k != 0 {
        return Err(Error::invalid(format!(
            "self_embed: mask side {} not divisible by patch side {k}",
            mask.side()
        )));
    }
    let g = mask.side() / k;
    let mut patches = vec![T::zero(); g * g * k * k];
    for gi in 0..g {
        for gj in 0..g {
            for u in 0..k {
                for v in 0..k {
                    patches[(gi * g + gj) * k * k + u * k + v] =
                        T::from_f64(mask.get(gi * k + u, gj * k + v) as f64);
                }
            }
        }
    }
    let flat = tape.constant(Tensor::from_vec(&[g * g, k * k], patches)?);
    let (w, b) = (
        p.get(&format!("met.se.s{stage}.w"))?,
        p.get(&format!("met.se.s{stage}.b"))?,
    );
    tape.linear(flat, w, b)
}

/// Patch-embed the metal-zeroed image at patch side `k` with the stage's
/// dedicated NE projection (independent of the encoder's own embedding).
fn ne_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    image: TensorId,
    stage: usize,
    k: usize,
) -> Result<TensorId> {
    let side = match tape.shape(image) {
        [a, b, 1] if a == b => *a,
        s => return Err(Error::invalid(format!("ne_tokens: image {s:?} must be [S,S,1]"))),
    };
    if side % k != 0 {
        return Err(Error::invalid(format!("ne_tokens: side {side} not divisible by {k}")));
    }
    let g = side / k;
    let r = tape.reshape(image, &[g, k, g, k])?;
    let pm = tape.permute(r, &[0, 2, 1, 3])?;
    let flat = tape.reshape(pm, &[g * g, k * k])?;
    let (w, b) = (
        p.get(&format!("met.ne.s{stage}.embed.w"))?,
        p.get(&format!("met.ne.s{stage}.embed.b"))?,
    );
    tape.linear(flat, w, b)
}

/// Effective NE window per stage after clamping to each stage's token grid.
pub fn ne_effective_windows(cfg: &EncoderConfig, window: usize) -> [usize; 3] {
    [0, 1, 2].map(|s| effective_window(window, cfg.grid_side(s)).0)
}

/// Binary metal vectors of each NE window, in window-partition order.
fn partition_mask(grid: &MetalMask, win: usize) -> Vec<Vec<u8>> {
    let g = grid.side();
    let nb = g / win;
    let mut out = Vec::with_capacity(nb * nb);
    for bh in 0..nb {
        for bw in 0..nb {
            let mut m = Vec::with_capacity(win * win);
            for u in 0..win {
                for v in 0..win {
                    m.push(grid.get(bh * win + u, bw * win + v));
                }
            }
            out.push(m);
        }
    }
    out
}

/// Build the per-stage additive encoder terms for a variant.
///
/// `image` is the metal-zeroed normalized projection `[S, S, 1]` (used by NE
/// only). Baseline returns no terms, leaving the encoder untouched.
pub fn stage_metal_terms<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    image: TensorId,
    mask: &MetalMask,
    variant: &Variant,
    cfg: &EncoderConfig,
) -> Result<MetalTerms> {
    variant.validate()?;
    if mask.side() != cfg.input_side {
        return Err(Error::invalid(format!(
            "stage_metal_terms: mask side {} does not match input_side {}",
            mask.side(),
            cfg.input_side
        )));
    }
    match variant {
        Variant::Baseline => Ok(MetalTerms::none()),
        Variant::SelfEmbed => {
            let mut terms = [None, None, None];
            for (s, slot) in terms.iter_mut().enumerate() {
                *slot = Some(self_embed(tape, p, mask, s, cfg)?);
            }
            Ok(MetalTerms { terms, all_metal_windows: 0 })
        }
        Variant::Neighborhood { window } => {
            let mut terms = [None, None, None];
            let mut warnings = 0;
            for (s, slot) in terms.iter_mut().enumerate() {
                let k = cfg.stage_patch_side(s);
                let g = cfg.grid_side(s);
                let c = cfg.stage_channels(s);
                let pooled = pool_mask(mask, k)?;
                let (win, _) = effective_window(*window, g);
                if g % win != 0 {
                    return Err(Error::invalid(format!(
                        "stage_metal_terms: NE window {win} does not tile grid {g}"
                    )));
                }
                let tokens = ne_tokens(tape, p, image, s, k)?;
                let hwc = tape.reshape(tokens, &[g, g, c])?;
                let wins = crate::swin::window_partition(tape, hwc, win, 0)?;
                let masks = partition_mask(&pooled, win);
                let (e, _, degenerate) =
                    ne_batch_probs(tape, p, &format!("met.ne.s{s}."), wins, &masks, 1)?;
                warnings += degenerate;
                let back = window_reverse(tape, e, g, g, win, 0)?;
                *slot = Some(tape.reshape(back, &[g * g, c])?);
            }
            Ok(MetalTerms { terms, all_metal_windows: warnings })
        }
    }
}

/// Initialize the parameters a variant needs (none for baseline).
pub fn init_metal_params<T: Scalar>(
    cfg: &EncoderConfig,
    variant: &Variant,
    seed: u64,
) -> ParamStore<T> {
    let mut store = ParamStore::new();
    match variant {
        Variant::Baseline => {}
        Variant::SelfEmbed => {
            let mut rng = rng_for(seed, "met.se");
            for s in 0..3 {
                let k = cfg.stage_patch_side(s);
                let c = cfg.stage_channels(s);
                store.insert(format!("met.se.s{s}.w"), trunc_normal(&mut rng, &[k * k, c], 0.02));
                store.insert(format!("met.se.s{s}.b"), Tensor::zeros(&[c]));
            }
        }
        Variant::Neighborhood { .. } => {
            let mut rng = rng_for(seed, "met.ne");
            for s in 0..3 {
                let k = cfg.stage_patch_side(s);
                let c = cfg.stage_channels(s);
                store.insert(
                    format!("met.ne.s{s}.embed.w"),
                    trunc_normal(&mut rng, &[k * k, c], 0.02),
                );
                store.insert(format!("met.ne.s{s}.embed.b"), Tensor::zeros(&[c]));
                for nm in ["wq", "wk", "wv"] {
                    store.insert(
                        format!("met.ne.s{s}.{nm}"),
                        trunc_normal(&mut rng, &[c, c], 0.02),
                    );
                }
                for nm in ["bq", "bk", "bv"] {
                    store.insert(format!("met.ne.s{s}.{nm}"), Tensor::zeros(&[c]));
                }
            }
        }
    }
    store
}
