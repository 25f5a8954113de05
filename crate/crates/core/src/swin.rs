//! Swin-style encoder: patch embedding plus three cascaded stages of
//! windowed multi-head self-attention with patch merging between stages.

use crate::error::{Error, Result};
use crate::params::{rng_for, trunc_normal, Bound, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

/// Encoder hyperparameters. Defaults follow the reference architecture;
/// tests shrink `embed_dim`/`depths` for speed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Pixels per patch side at stage 1.
    pub patch_side: usize,
    /// Stage-1 channel width; doubles per stage.
    pub embed_dim: usize,
    /// Layers per stage; even, so regular/shifted layers alternate.
    pub depths: [usize; 3],
    /// Attention heads per stage.
    pub heads: [usize; 3],
    /// Configured window side in tokens (clamped per stage, see
    /// [`effective_window`]).
    pub window: usize,
    /// Cyclic shift of the odd layers; must be `window / 2`.
    pub shift: usize,
    /// Input image side in pixels (power of two, at least 32).
    pub input_side: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_side: 4,
            embed_dim: 128,
            depths: [2, 4, 6],
            heads: [8, 16, 32],
            window: 8,
            shift: 4,
            input_side: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.input_side.is_power_of_two() || self.input_side < 32 {
            return Err(Error::invalid(format!(
                "input_side {} must be a power of two >= 32",
                self.input_side
            )));
        }
        if self.patch_side == 0 || self.input_side % self.patch_side != 0 {
            return Err(Error::invalid(format!(
                "patch_side {} must divide input_side {}",
                self.patch_side, self.input_side
            )));
        }
        for (s, &d) in self.depths.iter().enumerate() {
            if d == 0 || d % 2 != 0 {
                return Err(Error::invalid(format!("depths[{s}] = {d} must be even and nonzero")));
            }
            let c = self.stage_channels(s);
            if self.heads[s] == 0 || c % self.heads[s] != 0 {
                return Err(Error::invalid(format!(
                    "heads[{s}] = {} must divide stage channels {c}",
                    self.heads[s]
                )));
            }
        }
        if self.shift != self.window / 2 {
            return Err(Error::invalid(format!(
                "shift {} must equal window/2 = {}",
                self.shift,
                self.window / 2
            )));
        }
        // Deepest grid must still be at least one token wide.
        if self.grid_side(2) == 0 {
            return Err(Error::invalid("stage-3 token grid is empty".to_string()));
        }
        Ok(())
    }

    /// Channel width of stage `s` (0-based).
    pub fn stage_channels(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    /// Token-grid side of stage `s`.
    pub fn grid_side(&self, s: usize) -> usize {
        (self.input_side / self.patch_side) >> s
    }

    /// Patch side in pixels covered by one stage-`s` token.
    pub fn stage_patch_side(&self, s: usize) -> usize {
        self.patch_side << s
    }

    /// Closed-form learnable scalar count of the encoder.
    pub fn param_count(&self) -> usize {
        let p2 = self.patch_side * self.patch_side;
        let c0 = self.embed_dim;
        let n1 = self.grid_side(0) * self.grid_side(0);
        let mut total = p2 * c0 + c0 + n1 * c0; // patch embed + positional table
        for s in 0..3 {
            let c = self.stage_channels(s);
            // Per block: 2 layer norms (4c), q/k/v/out projections
            // (4c^2 + 4c), MLP ratio 4 (8c^2 + 5c).
            total += self.depths[s] * (12 * c * c + 13 * c);
            if s < 2 {
                // Merge: layer norm over 4c, then 4c -> 2c map without bias.
                total += 8 * c + 8 * c * c;
            }
        }
        total
    }
}

/// A stage's token sequence on the tape: `values` is `[h*w, c]`, rows in
/// row-major (h, w) order. The stage-1 positional table lives in the
/// parameter store (`enc.pos`) and is already added by [`patch_embed`].
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub values: TensorId,
}

/// Clamp a configured window to a feature-map side: effective window is
/// `min(window, side)`; the shift is half of it, disabled when one window
/// covers the whole grid.
pub fn effective_window(window: usize, side: usize) -> (usize, usize) {
    let eff = window.min(side);
    let shift = if eff == side { 0 } else { eff / 2 };
    (eff, shift)
}

/// Tile a `[h, w, c]` grid into `[n_windows, win*win, c]`, cyclically
/// rolling by `(-shift, -shift)` first. [`window_reverse`] undoes both.
pub fn window_partition<T: Scalar>(
    tape: &mut Tape<T>,
    grid: TensorId,
    win: usize,
    shift: usize,
) -> Result<TensorId> {
    let (h, w, c) = match tape.shape(grid) {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::invalid(format!("window_partition: grid {s:?} must be [h,w,c]"))),
    };
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(Error::invalid(format!(
            "window_partition: window {win} does not tile {h}x{w}"
        )));
    }
    let rolled = if shift > 0 {
        tape.roll2d(grid, -(shift as isize), -(shift as isize))?
    } else {
        grid
    };
    let r = tape.reshape(rolled, &[h / win, win, w / win, win, c])?;
    let p = tape.permute(r, &[0, 2, 1, 3, 4])?;
    tape.reshape(p, &[(h / win) * (w / win), win * win, c])
}

pub fn window_reverse<T: Scalar>(
    tape: &mut Tape<T>,
    windows: TensorId,
    h: usize,
    w: usize,
    win: usize,
    shift: usize,
) -> Result<TensorId> {
    let c = match tape.shape(windows) {
        [n, n2, c] if *n == (h / win) * (w / win) && *n2 == win * win => *c,
        s => {
            return Err(Error::invalid(format!(
                "window_reverse: windows {s:?} do not tile {h}x{w} with window {win}"
            )))
        }
    };
    let r = tape.reshape(windows, &[h / win, w / win, win, win, c])?;
    let p = tape.permute(r, &[0, 2, 1, 3, 4])?;
    let grid = tape.reshape(p, &[h, w, c])?;
    if shift > 0 {
        tape.roll2d(grid, shift as isize, shift as isize)
    } else {
        Ok(grid)
    }
}

/// Large negative logit standing in for -inf: exp underflows to exactly 0
/// after max subtraction, while every intermediate stays finite.
pub(crate) const MASK_LOGIT: f64 = -1e9;

/// Additive attention-logit mask `[n_windows, win², win²]` forbidding
/// attention across the cyclic seam of a shifted grid. Entries are 0 for
/// admissible pairs and [`MASK_LOGIT`] for cross-region pairs; ids follow
/// the three-slice region scheme in rolled coordinates.
pub fn shift_attention_mask<T: Scalar>(h: usize, w: usize, win: usize, shift: usize) -> Tensor<T> {
    debug_assert!(shift > 0 && win < h && win < w);
    let rid = |i: usize, side: usize| -> usize {
        if i < side - win {
            0
        } else if i < side - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / win, w / win);
    let n = win * win;
    let mut data = vec![T::zero(); nh * nw * n * n];
    let neg = T::from_f64(MASK_LOGIT);
    let mut ids = vec![0usize; n];
    for wh in 0..nh {
        for ww in 0..nw {
            for a in 0..n {
                let (i, j) = (wh * win + a / win, ww * win + a % win);
                ids[a] = rid(i, h) * 3 + rid(j, w);
            }
            let base = (wh * nw + ww) * n * n;
            for a in 0..n {
                for b in 0..n {
                    if ids[a] != ids[b] {
                        data[base + a * n + b] = neg;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[nh * nw, n, n], data).expect("mask shape consistent")
}

/// Multi-head self-attention over a window batch `[nW, N, C]`; returns
/// `(output, attention probabilities [nW*heads, N, N])`.
pub(crate) fn window_attention_probs<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    windows: TensorId,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<(TensorId, TensorId)> {
    let (nw, n, c) = match tape.shape(windows) {
        [nw, n, c] => (*nw, *n, *c),
        s => return Err(Error::invalid(format!("window_attention: {s:?} must be [nW,N,C]"))),
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid(format!(
            "window_attention: heads {heads} must divide channels {c}"
        )));
    }
    let d = c / heads;
    let split = |tape: &mut Tape<T>, x: TensorId| -> Result<TensorId> {
        let r = tape.reshape(x, &[nw, n, heads, d])?;
        let pm = tape.permute(r, &[0, 2, 1, 3])?;
        tape.reshape(pm, &[nw * heads, n, d])
    };
    let (wq, bq) = (p.get(&format!("{prefix}wq"))?, p.get(&format!("{prefix}bq"))?);
    let (wk, bk) = (p.get(&format!("{prefix}wk"))?, p.get(&format!("{prefix}bk"))?);
    let (wv, bv) = (p.get(&format!("{prefix}wv"))?, p.get(&format!("{prefix}bv"))?);
    let (wo, bo) = (p.get(&format!("{prefix}wo"))?, p.get(&format!("{prefix}bo"))?);
    let q = tape.linear(windows, wq, bq)?;
    let k = tape.linear(windows, wk, bk)?;
    let v = tape.linear(windows, wv, bv)?;
    let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
    let kt = tape.permute(kh, &[0, 2, 1])?;
    let logits = tape.matmul(qh, kt)?;
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let masked = match mask {
        Some(m) => {
            if m.shape() != [nw, n, n] {
                return Err(Error::invalid(format!(
                    "window_attention: mask {:?} does not match [{nw},{n},{n}]",
                    m.shape()
                )));
            }
            // Replicate per head: batch index is window * heads + head.
            let mut rep = Vec::with_capacity(nw * heads * n * n);
            for wi in 0..nw {
                let block = &m.data()[wi * n * n..(wi + 1) * n * n];
                for _ in 0..heads {
                    rep.extend_from_slice(block);
                }
            }
            let mc = tape.constant(Tensor::from_vec(&[nw * heads, n, n], rep)?);
            tape.add(scaled, mc)?
        }
        None => scaled,
    };
    let probs = tape.softmax_lastdim(masked)?;
    let ctx = tape.matmul(probs, vh)?;
    let r = tape.reshape(ctx, &[nw, heads, n, d])?;
    let pm = tape.permute(r, &[0, 2, 1, 3])?;
    let merged = tape.reshape(pm, &[nw, n, c])?;
    let out = tape.linear(merged, wo, bo)?;
    Ok((out, probs))
}

/// See [`window_attention_probs`]; drops the probabilities.
pub fn window_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    windows: TensorId,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<TensorId> {
    window_attention_probs(tape, p, prefix, windows, heads, mask).map(|(out, _)| out)
}

/// One pre-norm Swin layer: LN -> windowed MSA -> residual, then
/// LN -> MLP(ratio 4, gelu) -> residual.
fn swin_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    g: &TokenGrid,
    heads: usize,
    win: usize,
    shift: usize,
) -> Result<TokenGrid> {
    let x = g.values;
    let ln1 = {
        let (gm, bt) = (p.get(&format!("{prefix}ln1.g"))?, p.get(&format!("{prefix}ln1.b"))?);
        tape.layer_norm(x, gm, bt)?
    };
    let hwc = tape.reshape(ln1, &[g.h, g.w, g.c])?;
    let wins = window_partition(tape, hwc, win, shift)?;
    let mask = (shift > 0).then(|| shift_attention_mask::<T>(g.h, g.w, win, shift));
    let att =
        window_attention(tape, p, &format!("{prefix}attn."), wins, heads, mask.as_ref())?;
    let rev = window_reverse(tape, att, g.h, g.w, win, shift)?;
    let flat = tape.reshape(rev, &[g.h * g.w, g.c])?;
    let x1 = tape.add(x, flat)?;

    let ln2 = {
        let (gm, bt) = (p.get(&format!("{prefix}ln2.g"))?, p.get(&format!("{prefix}ln2.b"))?);
        tape.layer_norm(x1, gm, bt)?
    };
    let h1 = {
        let (w1, b1) = (p.get(&format!("{prefix}mlp.w1"))?, p.get(&format!("{prefix}mlp.b1"))?);
        tape.linear(ln2, w1, b1)?
    };
    let act = tape.gelu(h1)?;
    let h2 = {
        let (w2, b2) = (p.get(&format!("{prefix}mlp.w2"))?, p.get(&format!("{prefix}mlp.b2"))?);
        tape.linear(act, w2, b2)?
    };
    let x2 = tape.add(x1, h2)?;
    Ok(TokenGrid { values: x2, ..*g })
}

/// Embed a `[S, S, 1]` image into `(S/patch)²` tokens: learned linear map of
/// each flattened patch plus the absolute positional table.
pub fn patch_embed<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    image: TensorId,
    cfg: &EncoderConfig,
) -> Result<TokenGrid> {
    let side = match tape.shape(image) {
        [a, b, 1] if a == b => *a,
        s => return Err(Error::invalid(format!("patch_embed: image {s:?} must be [S,S,1]"))),
    };
    if side % cfg.patch_side != 0 {
        return Err(Error::invalid(format!(
            "patch_embed: side {side} not divisible by patch_side {}",
            cfg.patch_side
        )));
    }
    if side != cfg.input_side {
        return Err(Error::invalid(format!(
            "patch_embed: image side {side} does not match configured input_side {}",
            cfg.input_side
        )));
    }
    let (ps, g) = (cfg.patch_side, side / cfg.patch_side);
    let r = tape.reshape(image, &[g, ps, g, ps])?;
    let pm = tape.permute(r, &[0, 2, 1, 3])?;
    let flat = tape.reshape(pm, &[g * g, ps * ps])?;
    let emb = tape.linear(flat, p.get("enc.patch.w")?, p.get("enc.patch.b")?)?;
    let vals = tape.add(emb, p.get("enc.pos")?)?;
    Ok(TokenGrid { h: g, w: g, c: cfg.embed_dim, values: vals })
}

/// Concatenate each 2x2 token neighborhood (4C channels), layer-normalize,
/// and map to 2C; halves the grid side.
pub fn patch_merge<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    g: &TokenGrid,
) -> Result<TokenGrid> {
    if g.h % 2 != 0 || g.w % 2 != 0 {
        return Err(Error::invalid(format!(
            "patch_merge: grid {}x{} must have even extents",
            g.h, g.w
        )));
    }
    let hwc = tape.reshape(g.values, &[g.h, g.w, g.c])?;
    let r = tape.reshape(hwc, &[g.h / 2, 2, g.w / 2, 2, g.c])?;
    let pm = tape.permute(r, &[0, 2, 1, 3, 4])?;
    let flat = tape.reshape(pm, &[(g.h / 2) * (g.w / 2), 4 * g.c])?;
    let ln = {
        let (gm, bt) = (p.get(&format!("{prefix}ln.g"))?, p.get(&format!("{prefix}ln.b"))?);
        tape.layer_norm(flat, gm, bt)?
    };
    let out = tape.matmul(ln, p.get(&format!("{prefix}w"))?)?;
    Ok(TokenGrid { h: g.h / 2, w: g.w / 2, c: 2 * g.c, values: out })
}

/// Run the full encoder. `metal_terms[i]`, when present, is added to stage
/// i's input sequence (shape `[tokens_i, channels_i]`); `None` skips the add
/// so a baseline run is bitwise-identical to one with no terms at all.
/// Returns the three stage outputs (skips + bottleneck).
pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    image: TensorId,
    metal_terms: &[Option<TensorId>; 3],
    cfg: &EncoderConfig,
) -> Result<[TokenGrid; 3]> {
    cfg.validate()?;
    let mut g = patch_embed(tape, p, image, cfg)?;
    let mut outs = Vec::with_capacity(3);
    for s in 0..3 {
        if let Some(term) = metal_terms[s] {
            if tape.shape(term) != tape.shape(g.values) {
                return Err(Error::invalid(format!(
                    "encoder_forward: stage {s} metal term {:?} does not match input {:?}",
                    tape.shape(term),
                    tape.shape(g.values)
                )));
            }
            g.values = tape.add(g.values, term)?;
        }
        let (win, shift) = effective_window(cfg.window, g.h.min(g.w));
        for l in 0..cfg.depths[s] {
            let layer_shift = if l % 2 == 1 { shift } else { 0 };
            let prefix = format!("enc.s{s}.b{l}.");
            g = swin_block(tape, p, &prefix, &g, cfg.heads[s], win, layer_shift)?;
        }
        outs.push(g);
        if s < 2 {
            g = patch_merge(tape, p, &format!("enc.m{s}."), &g)?;
        }
    }
    Ok([outs[0], outs[1], outs[2]])
}

/// Initialize all encoder parameters: truncated normal (std 0.02) for linear
/// maps, ones for layer-norm gains, zeros for biases and the positional
/// table.
pub fn init_encoder_params<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> ParamStore<T> {
    let mut rng = rng_for(seed, "enc");
    let mut store = ParamStore::new();
    let p2 = cfg.patch_side * cfg.patch_side;
    let c0 = cfg.embed_dim;
    let n1 = cfg.grid_side(0) * cfg.grid_side(0);
    store.insert("enc.patch.w", trunc_normal(&mut rng, &[p2, c0], 0.02));
    store.insert("enc.patch.b", Tensor::zeros(&[c0]));
    store.insert("enc.pos", Tensor::zeros(&[n1, c0]));
    for s in 0..3 {
        let c = cfg.stage_channels(s);
        for l in 0..cfg.depths[s] {
            let pre = format!("enc.s{s}.b{l}.");
            store.insert(format!("{pre}ln1.g"), Tensor::full(&[c], T::one()));
            store.insert(format!("{pre}ln1.b"), Tensor::zeros(&[c]));
            for nm in ["wq", "wk", "wv", "wo"] {
                store.insert(format!("{pre}attn.{nm}"), trunc_normal(&mut rng, &[c, c], 0.02));
            }
            for nm in ["bq", "bk", "bv", "bo"] {
                store.insert(format!("{pre}attn.{nm}"), Tensor::zeros(&[c]));
            }
            store.insert(format!("{pre}ln2.g"), Tensor::full(&[c], T::one()));
            store.insert(format!("{pre}ln2.b"), Tensor::zeros(&[c]));
            store.insert(format!("{pre}mlp.w1"), trunc_normal(&mut rng, &[c, 4 * c], 0.02));
            store.insert(format!("{pre}mlp.b1"), Tensor::zeros(&[4 * c]));
            store.insert(format!("{pre}mlp.w2"), trunc_normal(&mut rng, &[4 * c, c], 0.02));
            store.insert(format!("{pre}mlp.b2"), Tensor::zeros(&[c]));
        }
        if s < 2 {
            let pre = format!("enc.m{s}.");
            store.insert(format!("{pre}ln.g"), Tensor::full(&[4 * c], T::one()));
            store.insert(format!("{pre}ln.b"), Tensor::zeros(&[4 * c]));
            store.insert(format!("{pre}w"), trunc_normal(&mut rng, &[4 * c, 2 * c], 0.02));
        }
    }
    store
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::bind_all;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            patch_side: 4,
            embed_dim: 8,
            depths: [2, 2, 2],
            heads: [2, 2, 2],
            window: 8,
            shift: 4,
            input_side: 32,
        }
    }

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn attn_params(c: usize, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for nm in ["wq", "wk", "wv", "wo"] {
            s.insert(format!("a.{nm}"), rand_t(&[c, c], rng));
        }
        for nm in ["bq", "bk", "bv", "bo"] {
            s.insert(format!("a.{nm}"), rand_t(&[c], rng));
        }
        s
    }

    /// Dense multi-head attention with explicit loops, f64.
    fn naive_attention(
        x: &[f64], // [n, c]
        n: usize,
        c: usize,
        heads: usize,
        s: &ParamStore<f64>,
    ) -> Vec<f64> {
        let d = c / heads;
        let proj = |w: &str, b: &str| -> Vec<f64> {
            let (w, b) = (s.get(w).unwrap().data(), s.get(b).unwrap().data());
            let mut out = vec![0.0; n * c];
            for i in 0..n {
                for j in 0..c {
                    let mut acc = b[j];
                    for k in 0..c {
                        acc += x[i * c + k] * w[k * c + j];
                    }
                    out[i * c + j] = acc;
                }
            }
            out
        };
        let (q, k, v) = (proj("a.wq", "a.bq"), proj("a.wk", "a.bk"), proj("a.wv", "a.bv"));
        let mut merged = vec![0.0; n * c];
        for h in 0..heads {
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for j in 0..n {
                    let mut dot = 0.0;
                    for e in 0..d {
                        dot += q[i * c + h * d + e] * k[j * c + h * d + e];
                    }
                    logits[j] = dot / (d as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for e in 0..d {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += exps[j] / z * v[j * c + h * d + e];
                    }
                    merged[i * c + h * d + e] = acc;
                }
            }
        }
        let (wo, bo) = (s.get("a.wo").unwrap().data(), s.get("a.bo").unwrap().data());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let mut acc = bo[j];
                for k in 0..c {
                    acc += merged[i * c + k] * wo[k * c + j];
                }
                out[i * c + j] = acc;
            }
        }
        out
    }

    #[test]
    fn attention_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, c, heads) = (4, 6, 2);
        let store = attn_params(c, &mut rng);
        let x = rand_t(&[1, n, c], &mut rng);
        let want = naive_attention(x.data(), n, c, heads, &store);
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, &store, false);
        let xi = tape.constant(x);
        let y = window_attention(&mut tape, &b, "a.", xi, heads, None).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&want) {
            assert!((got - want).abs() <= 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn single_token_window_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let c = 4;
        let store = attn_params(c, &mut rng);
        let x = rand_t(&[1, 1, c], &mut rng);
        // A = [1], so output = (x wv + bv) wo + bo.
        let want = naive_attention(x.data(), 1, c, 1, &store);
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, &store, false);
        let xi = tape.constant(x);
        let y = window_attention(&mut tape, &b, "a.", xi, 1, None).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&want) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn equal_tokens_give_equal_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (n, c) = (5, 4);
        let store = attn_params(c, &mut rng);
        let row = rand_t(&[c], &mut rng);
        let mut data = Vec::new();
        for _ in 0..n {
            data.extend_from_slice(row.data());
        }
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, &store, false);
        let xi = tape.constant(Tensor::from_vec(&[1, n, c], data).unwrap());
        let y = window_attention(&mut tape, &b, "a.", xi, 2, None).unwrap();
        let out = tape.value(y).data();
        for i in 1..n {
            assert_eq!(&out[i * c..(i + 1) * c], &out[..c]);
        }
    }

    #[test]
    fn constant_grid_is_translation_invariant_across_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let c = 4;
        let store = attn_params(c, &mut rng);
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, &store, false);
        let grid = tape.constant(Tensor::full(&[4, 4, c], 0.3f64));
        let wins = window_partition(&mut tape, grid, 2, 0).unwrap();
        let y = window_attention(&mut tape, &b, "a.", wins, 2, None).unwrap();
        let out = tape.value(y).data();
        let block = 4 * c;
        for wi in 1..4 {
            assert_eq!(&out[wi * block..(wi + 1) * block], &out[..block]);
        }
    }

    #[test]
    fn clamped_single_window_equals_unpartitioned_attention() {
        // A 4x4 grid with configured window 8 clamps to one 16-token window;
        // the result must equal dense attention over all 16 tokens.
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let c = 4;
        let store = attn_params(c, &mut rng);
        let (win, shift) = effective_window(8, 4);
        assert_eq!((win, shift), (4, 0));
        let x = rand_t(&[4, 4, c], &mut rng);
        let want = naive_attention(x.data(), 16, c, 2, &store);
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, &store, false);
        let gi = tape.constant(x);
        let wins = window_partition(&mut tape, gi, win, shift).unwrap();
        assert_eq!(tape.shape(wins), &[1, 16, c]);
        let y = window_attention(&mut tape, &b, "a.", wins, 2, None).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&want) {
            assert!((got - want).abs() <= 1e-5);
        }
    }

    #[test]
    fn partition_reverse_roundtrip_any_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for shift in [0usize, 2] {
            let x = rand_t(&[8, 8, 3], &mut rng);
            let mut tape = Tape::new();
            let gi = tape.constant(x.clone());
            let wins = window_partition(&mut tape, gi, 4, shift).unwrap();
            assert_eq!(tape.shape(wins), &[4, 16, 3]);
            let back = window_reverse(&mut tape, wins, 8, 8, 4, shift).unwrap();
            assert!(tape.value(back).bits_eq(&x));
        }
    }

    #[test]
    fn shifted_attention_never_crosses_the_seam() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let c = 4;
        let store = attn_params(c, &mut rng);
        let (h, w, win, shift) = (4, 4, 2, 1);
        let mask = shift_attention_mask::<f64>(h, w, win, shift);
        let x = rand_t(&[h, w, c], &mut rng);
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, &store, false);
        let gi = tape.constant(x);
        let wins = window_partition(&mut tape, gi, win, shift).unwrap();
        let (_, probs) =
            window_attention_probs(&mut tape, &b, "a.", wins, 2, Some(&mask)).unwrap();
        let pv = tape.value(probs);
        let n = win * win;
        let heads = 2;
        let mut masked_positions = 0;
        for wi in 0..(h / win) * (w / win) {
            for a in 0..n {
                for bk in 0..n {
                    if mask.data()[(wi * n + a) * n + bk] != 0.0 {
                        masked_positions += 1;
                        for hd in 0..heads {
                            let v = pv.data()[(((wi * heads + hd) * n) + a) * n + bk];
                            assert!(v < 1e-12, "masked weight {v}");
                        }
                    }
                }
            }
        }
        assert!(masked_positions > 0, "mask should forbid some pairs");
    }

    #[test]
    fn patch_embed_shapes_and_locality() {
        let cfg = small_cfg();
        let store = init_encoder_params::<f64>(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let img = rand_t(&[32, 32, 1], &mut rng);
        let mut img2 = img.clone();
        img2.data_mut()[5 * 32 + 9] += 1.0; // pixel (5, 9) -> token (1, 2)
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, &store, false);
        let i1 = tape.constant(img);
        let i2 = tape.constant(img2);
        let g1 = patch_embed(&mut tape, &b, i1, &cfg).unwrap();
        let g2 = patch_embed(&mut tape, &b, i2, &cfg).unwrap();
        assert_eq!((g1.h, g1.w, g1.c), (8, 8, 8));
        let (v1, v2) = (tape.value(g1.values).data(), tape.value(g2.values).data());
        for tok in 0..64 {
            let differs = v1[tok * 8..(tok + 1) * 8] != v2[tok * 8..(tok + 1) * 8];
            assert_eq!(differs, tok == 8 + 2, "token {tok}");
        }
    }

    #[test]
    fn zero_image_embeds_to_bias() {
        let cfg = small_cfg();
        let mut store = init_encoder_params::<f64>(&cfg, 1);
        // Nonzero bias, zero positional table (default), zero image.
        store.get_mut("enc.patch.b").unwrap().data_mut().fill(0.25);
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, &store, false);
        let img = tape.constant(Tensor::zeros(&[32, 32, 1]));
        let g = patch_embed(&mut tape, &b, img, &cfg).unwrap();
        assert!(tape.value(g.values).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn patch_merge_halves_grid_and_doubles_channels() {
        let cfg = small_cfg();
        let store = init_encoder_params::<f64>(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, &store, false);
        let vals = tape.constant(rand_t(&[64, 8], &mut rng));
        let g = TokenGrid { h: 8, w: 8, c: 8, values: vals };
        let m = patch_merge(&mut tape, &b, "enc.m0.", &g).unwrap();
        assert_eq!((m.h, m.w, m.c), (4, 4, 16));
        assert_eq!(tape.shape(m.values), &[16, 16]);

        let odd = TokenGrid { h: 3, w: 8, c: 8, values: vals };
        assert!(patch_merge(&mut tape, &b, "enc.m0.", &odd).is_err());
    }

    #[test]
    fn encoder_shapes_match_configuration() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        let store = init_encoder_params::<f32>(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 64 * 64;
        let img = Tensor::<f32>::from_vec(
            &[64, 64, 1],
            (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let b = bind_all(&mut tape, &store, false);
        let ii = tape.constant(img);
        let feats = encoder_forward(&mut tape, &b, ii, &[None, None, None], &cfg).unwrap();
        let dims: Vec<_> = feats.iter().map(|f| (f.h, f.w, f.c)).collect();
        assert_eq!(dims, vec![(16, 16, 128), (8, 8, 256), (4, 4, 512)]);
        assert_eq!(tape.shape(feats[2].values), &[16, 512]);
    }

    #[test]
    fn encoder_is_deterministic_and_zero_terms_are_identity() {
        let cfg = small_cfg();
        let store = init_encoder_params::<f64>(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let img = rand_t(&[32, 32, 1], &mut rng);

        let run = |terms_zero: bool| -> Vec<Tensor<f64>> {
            let mut tape = Tape::new();
            let b = bind_all(&mut tape, &store, false);
            let ii = tape.constant(img.clone());
            let terms = if terms_zero {
                let z0 = tape.constant(Tensor::zeros(&[64, 8]));
                let z1 = tape.constant(Tensor::zeros(&[16, 16]));
                let z2 = tape.constant(Tensor::zeros(&[4, 32]));
                [Some(z0), Some(z1), Some(z2)]
            } else {
                [None, None, None]
            };
            let feats = encoder_forward(&mut tape, &b, ii, &terms, &cfg).unwrap();
            feats.iter().map(|f| tape.value(f.values).clone()).collect()
        };

        let a = run(false);
        let b = run(false);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.bits_eq(y), "reruns must be bitwise identical");
        }
        let z = run(true);
        for (x, y) in a.iter().zip(&z) {
            assert_eq!(x.data(), y.data(), "zero terms must not change values");
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        for cfg in [EncoderConfig::default(), small_cfg()] {
            let store = init_encoder_params::<f32>(&cfg, 0);
            assert_eq!(store.n_scalars(), cfg.param_count());
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut c = small_cfg();
        c.depths = [1, 2, 2];
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.heads = [3, 2, 2];
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.shift = 3;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.input_side = 48;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.input_side = 16;
        assert!(c.validate().is_err());
    }
}
