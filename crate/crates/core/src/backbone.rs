//! Dual patch embedding and the L-layer pre-norm transformer encoder with the
//! HAS chain and HAM adapters wired in (Fig. 1(b), Eq. 2–11).

use std::rc::Rc;

use crate::adapters::{lowrank_tape, mlp_tape};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Gather indices turning a flattened `channels × (S·S)` image into the
/// `N × (channels·p²)` patch matrix, `N = (S/p)²`; token order is row-major
/// over patches and feature order is `(channel, dy, dx)`.
pub fn patch_index(channels: usize, image_size: usize, patch: usize) -> Result<Rc<[usize]>> {
    if patch == 0 || image_size % patch != 0 {
        return Err(Error::config(format!("image size {image_size} is not divisible by patch size {patch}")));
    }
    let per_side = image_size / patch;
    let hw = image_size * image_size;
    let mut idx = Vec::with_capacity(channels * hw);
    for py in 0..per_side {
        for px in 0..per_side {
            for c in 0..channels {
                for dy in 0..patch {
                    for dx in 0..patch {
                        idx.push(c * hw + (py * patch + dy) * image_size + px * patch + dx);
                    }
                }
            }
        }
    }
    Ok(idx.into())
}

/// Fixed input normalization `(x − μ)/σ` applied to every pixel before the
/// patch projection (both branches), the analogue of the per-channel
/// normalization RGB-pretrained ViTs expect. Without it all-positive pixels
/// make every token share one dominant direction.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Tape patch embedding: `norm(patches) · W + b`, positional embedding added
/// by the caller after assembly.
pub fn patch_embed_tape(
    g: &mut Graph,
    img: Var,
    index: &Rc<[usize]>,
    tokens: usize,
    w: Var,
    b: Var,
) -> Result<Var> {
    let (channels, _) = g.value(img).shape();
    let feat = g.value(w).rows();
    if index.len() != tokens * feat || feat % channels.max(1) != 0 {
        return Err(Error::shape(format!(
            "patch embedding expects {} input features; image has {channels} channels",
            feat
        )));
    }
    let patches = g.gather(img, index.clone(), tokens, feat)?;
    let patches = g.affine(patches, 1.0 / INPUT_STD, -INPUT_MEAN / INPUT_STD);
    let e = g.matmul(patches, w)?;
    g.add_row(e, b)
}

/// Eager patch embedding of one image segment including its slice of the
/// positional embedding.
pub fn patch_embed(img: &Matrix, image_size: usize, patch: usize, w: &Matrix, b: &Matrix, pos: &Matrix) -> Result<Matrix> {
    let channels = img.rows();
    if w.rows() != channels * patch * patch {
        return Err(Error::shape(format!(
            "branch weight expects {} channels but image has {channels}",
            w.rows() / (patch * patch).max(1)
        )));
    }
    if img.cols() != image_size * image_size {
        return Err(Error::shape("image size disagrees with the flattened image"));
    }
    let n = (image_size / patch).pow(2);
    let index = patch_index(channels, image_size, patch)?;
    let mut g = Graph::new();
    let (iv, wv, bv, pv) = (g.constant(img.clone()), g.constant(w.clone()), g.constant(b.clone()), g.constant(pos.clone()));
    let e = patch_embed_tape(&mut g, iv, &index, n, wv, bv)?;
    let out = g.add(e, pv)?;
    Ok(g.value(out).clone())
}

/// `[search; template; online]` concatenation.
pub fn assemble(search: &Matrix, template: &Matrix, online: &Matrix) -> Result<Matrix> {
    if search.shape() != template.shape() || search.shape() != online.shape() {
        return Err(Error::shape(format!(
            "segments differ: {:?} / {:?} / {:?}",
            search.shape(),
            template.shape(),
            online.shape()
        )));
    }
    Matrix::concat_rows(&[search, template, online])
}

/// Segment `k` (0 = search, 1 = template, 2 = online) of an assembled sequence.
pub fn segment(tokens: &Matrix, k: usize, n: usize) -> Result<Matrix> {
    tokens.slice_rows(k * n, (k + 1) * n)
}

/// Multi-head attention without the output projection. Returns the
/// concatenated head outputs and, when requested, the largest deviation of
/// any attention row sum from 1.
pub fn msa_tape(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, check_rows: bool) -> Result<(Var, f64)> {
    let d = g.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("width {d} is not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut dev = 0.0f64;
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = if heads == 1 { q } else { g.slice_cols(q, lo, hi)? };
        let kh = if heads == 1 { k } else { g.slice_cols(k, lo, hi)? };
        let vh = if heads == 1 { v } else { g.slice_cols(v, lo, hi)? };
        let s = g.matmul_t(qh, kh)?;
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s);
        if check_rows {
            let av = g.value(a);
            for r in 0..av.rows() {
                dev = dev.max((av.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
        outs.push(g.matmul(a, vh)?);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, dev))
}

/// Eager MSA: per-head `softmax(q kᵀ/√d_h) v`, heads concatenated.
pub fn msa(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<Matrix> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let (out, _) = msa_tape(&mut g, qv, kv, vv, heads, false)?;
    Ok(g.value(out).clone())
}

/// Tape handles for one encoder layer. Adapter entries are `(down, up)`.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1: (Var, Var),
    pub wq: (Var, Var),
    pub wk: (Var, Var),
    pub wv: (Var, Var),
    pub wo: (Var, Var),
    /// `[ln2_gain, ln2_shift, w1, b1, w2, b2]`
    pub mlp: [Var; 6],
    pub has_q: Option<(Var, Var)>,
    pub has_k: Option<(Var, Var)>,
    pub has_v: Option<(Var, Var)>,
    pub pha: Option<(Var, Var)>,
    pub sha: Option<(Var, Var)>,
}

/// Owned weights for one encoder layer, for eager use and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub ln1: (Matrix, Matrix),
    pub wq: (Matrix, Matrix),
    pub wk: (Matrix, Matrix),
    pub wv: (Matrix, Matrix),
    pub wo: (Matrix, Matrix),
    pub mlp: [Matrix; 6],
    pub has_q: Option<(Matrix, Matrix)>,
    pub has_k: Option<(Matrix, Matrix)>,
    pub has_v: Option<(Matrix, Matrix)>,
    pub pha: Option<(Matrix, Matrix)>,
    pub sha: Option<(Matrix, Matrix)>,
}

impl EncoderLayerParams {
    pub fn to_vars(&self, g: &mut Graph) -> LayerVars {
        let mut pair = |p: &(Matrix, Matrix)| (g.constant(p.0.clone()), g.constant(p.1.clone()));
        let ln1 = pair(&self.ln1);
        let wq = pair(&self.wq);
        let wk = pair(&self.wk);
        let wv = pair(&self.wv);
        let wo = pair(&self.wo);
        let has_q = self.has_q.as_ref().map(&mut pair);
        let has_k = self.has_k.as_ref().map(&mut pair);
        let has_v = self.has_v.as_ref().map(&mut pair);
        let pha = self.pha.as_ref().map(&mut pair);
        let sha = self.sha.as_ref().map(&mut pair);
        let mlp = self.mlp.clone().map(|m| g.constant(m));
        LayerVars { ln1, wq, wk, wv, wo, mlp, has_q, has_k, has_v, pha, sha }
    }
}

/// Per-layer chain instrumentation: `(input, output)` of each enabled HAS
/// branch, in layer order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChainTrace {
    pub q: Vec<(Matrix, Matrix)>,
    pub k: Vec<(Matrix, Matrix)>,
    pub v: Vec<(Matrix, Matrix)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncoderTrace {
    pub f_hs: Option<Matrix>,
    pub chain: ChainTrace,
    /// Largest |row sum − 1| over every attention matrix.
    pub attention_row_deviation: f64,
    /// Output of every layer.
    pub layer_outputs: Vec<Matrix>,
}

fn chain_step(
    g: &mut Graph,
    state: &mut Option<Var>,
    adapter: Option<(Var, Var)>,
    log: Option<&mut Vec<(Matrix, Matrix)>>,
) -> Result<Option<Var>> {
    let Some((down, up)) = adapter else { return Ok(None) };
    let input = state.ok_or_else(|| Error::State("HAS adapter present but the chain was not seeded with F^HS".into()))?;
    let out = lowrank_tape(g, input, down, up)?;
    if let Some(log) = log {
        log.push((g.value(input).clone(), g.value(out).clone()));
    }
    *state = Some(out);
    Ok(Some(out))
}

fn linear(g: &mut Graph, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Eq. 2–11 across all layers. The HAS chains for q/k/v are each seeded once
/// with `f_hs` and threaded through every layer that carries that branch.
pub fn encoder_tape(
    g: &mut Graph,
    f_e: Var,
    f_hs: Option<Var>,
    layers: &[LayerVars],
    heads: usize,
    mut trace: Option<&mut EncoderTrace>,
) -> Result<Var> {
    if let (Some(t), Some(f)) = (trace.as_deref_mut(), f_hs) {
        t.f_hs = Some(g.value(f).clone());
    }
    if let Some(f) = f_hs {
        if g.value(f).shape() != g.value(f_e).shape() {
            return Err(Error::shape("F^HS and F^E differ in shape"));
        }
    }
    let (mut cq, mut ck, mut cv) = (f_hs, f_hs, f_hs);
    let mut x = f_e;
    for l in layers {
        let xn = g.layer_norm(x, l.ln1.0, l.ln1.1)?;
        let mut q = linear(g, xn, l.wq)?;
        let mut k = linear(g, xn, l.wk)?;
        let mut v = linear(g, xn, l.wv)?;
        let logs = trace.as_deref_mut().map(|t| &mut t.chain);
        let (lq, lk, lv) = match logs {
            Some(c) => (Some(&mut c.q), Some(&mut c.k), Some(&mut c.v)),
            None => (None, None, None),
        };
        if let Some(f) = chain_step(g, &mut cq, l.has_q, lq)? {
            q = g.add(q, f)?;
        }
        if let Some(f) = chain_step(g, &mut ck, l.has_k, lk)? {
            k = g.add(k, f)?;
        }
        if let Some(f) = chain_step(g, &mut cv, l.has_v, lv)? {
            v = g.add(v, f)?;
        }
        let check = trace.is_some();
        let (attn, dev) = msa_tape(g, q, k, v, heads, check)?;
        let proj = linear(g, attn, l.wo)?;
        let f_msa = g.add(x, proj)?;
        let f_mlp = mlp_tape(g, f_msa, &l.mlp)?;
        let mut f = g.add(f_msa, f_mlp)?;
        if let Some((d, u)) = l.pha {
            let p = lowrank_tape(g, f_msa, d, u)?;
            f = g.add(f, p)?;
        }
        if let Some((d, u)) = l.sha {
            let s = lowrank_tape(g, f_mlp, d, u)?;
            f = g.add(f, s)?;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.attention_row_deviation = t.attention_row_deviation.max(dev);
            t.layer_outputs.push(g.value(f).clone());
        }
        x = f;
    }
    Ok(x)
}

/// Eager encoder over owned weights.
pub fn encoder_forward(
    f_e: &Matrix,
    f_hs: Option<&Matrix>,
    layers: &[EncoderLayerParams],
    heads: usize,
    trace: Option<&mut EncoderTrace>,
) -> Result<Matrix> {
    let mut g = Graph::new();
    let x = g.constant(f_e.clone());
    let hs = f_hs.map(|m| g.constant(m.clone()));
    let vars: Vec<LayerVars> = layers.iter().map(|l| l.to_vars(&mut g)).collect();
    let out = encoder_tape(&mut g, x, hs, &vars, heads, trace)?;
    Ok(g.value(out).clone())
}
