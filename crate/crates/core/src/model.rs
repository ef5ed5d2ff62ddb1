//! The full HyA-T model: configuration, named tensor layout, initialization
//! and the forward pass over `[search | template | online]` image pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{encoder_tape, patch_embed_tape, patch_index, EncoderTrace, LayerVars};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::head::{head_tape, BoxLogits};
use crate::hei::{enhance_tape, HeiVariant, HeiVars};
use crate::hsdata::cmf::{to_false_color, CmfMatrix};
use crate::hsdata::frame::HSFrame;
use crate::tensor::Matrix;

/// Which PEFT modules are attached.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeftConfig {
    pub hei: Option<HeiVariant>,
    pub hei_residual: bool,
    pub has_q: bool,
    pub has_k: bool,
    pub has_v: bool,
    pub ham_seq: bool,
    pub ham_par: bool,
}

impl PeftConfig {
    pub fn none() -> Self {
        Self::default()
    }

    /// The paper's configuration: HEI, HAS on q and v, HAM with both adapters.
    pub fn full() -> Self {
        Self {
            hei: Some(HeiVariant::Full),
            hei_residual: false,
            has_q: true,
            has_k: false,
            has_v: true,
            ham_seq: true,
            ham_par: true,
        }
    }

    pub fn any_has(&self) -> bool {
        self.has_q || self.has_k || self.has_v
    }

    pub fn any_ham(&self) -> bool {
        self.ham_seq || self.ham_par
    }

    pub fn is_empty(&self) -> bool {
        self.hei.is_none() && !self.any_has() && !self.any_ham()
    }

    /// Table 4 row presets.
    pub fn table4(label: &str) -> Result<Self> {
        let full = Self::full();
        Ok(match label {
            "baseline" => Self::none(),
            "+HEI" => Self { hei: full.hei, ..Self::none() },
            "+HEI+HAS" => Self { ham_seq: false, ham_par: false, ..full },
            "+HEI+HAS+HAM" => full,
            other => return Err(Error::config(format!("unknown Table 4 row `{other}`"))),
        })
    }

    /// Reads `peft.*` keys on top of `default`.
    pub fn from_kv(kv: &KvConfig, default: Self) -> Result<Self> {
        let mut p = default;
        if let Some(preset) = kv.get_opt::<String>("peft.preset")? {
            p = Self::table4(&preset)?;
        }
        let hei_default = p.hei.map_or("none".to_string(), |v| v.to_string());
        let hei: String = kv.get("peft.hei", hei_default)?;
        p.hei = if hei == "none" { None } else { Some(hei.parse()?) };
        p.hei_residual = kv.get("peft.hei_residual", p.hei_residual)?;
        let has_default: Vec<String> = [(p.has_q, "q"), (p.has_k, "k"), (p.has_v, "v")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| n.to_string())
            .collect();
        let has: Vec<String> = kv.get_list("peft.has", &has_default)?;
        for h in &has {
            if !["q", "k", "v"].contains(&h.as_str()) {
                return Err(Error::config(format!("peft.has entry `{h}` is not one of q, k, v")));
            }
        }
        p.has_q = has.iter().any(|h| h == "q");
        p.has_k = has.iter().any(|h| h == "k");
        p.has_v = has.iter().any(|h| h == "v");
        let ham_default: Vec<String> =
            [(p.ham_seq, "seq"), (p.ham_par, "par")].iter().filter(|(on, _)| *on).map(|(_, n)| n.to_string()).collect();
        let ham: Vec<String> = kv.get_list("peft.ham", &ham_default)?;
        for h in &ham {
            if !["seq", "par"].contains(&h.as_str()) {
                return Err(Error::config(format!("peft.ham entry `{h}` is not one of seq, par")));
            }
        }
        p.ham_seq = ham.iter().any(|h| h == "seq");
        p.ham_par = ham.iter().any(|h| h == "par");
        Ok(p)
    }
}

impl fmt::Display for PeftConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("baseline");
        }
        let mut parts = Vec::new();
        if let Some(v) = self.hei {
            parts.push(if v == HeiVariant::Full { "HEI".to_string() } else { format!("HEI[{v}]") });
        }
        if self.any_has() {
            let b: String = [(self.has_q, 'q'), (self.has_k, 'k'), (self.has_v, 'v')]
                .iter()
                .filter(|(on, _)| *on)
                .map(|(_, c)| *c)
                .collect();
            parts.push(if b == "qv" { "HAS".into() } else { format!("HAS[{b}]") });
        }
        if self.any_ham() {
            parts.push(match (self.ham_seq, self.ham_par) {
                (true, true) => "HAM".into(),
                (true, false) => "HAM[seq]".into(),
                _ => "HAM[par]".into(),
            });
        }
        write!(f, "+{}", parts.join("+"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square search/template crops fed to the network.
    pub image_size: usize,
    pub patch_size: usize,
    pub bands: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub rank: usize,
    pub mlp_hidden: usize,
    pub bins: usize,
    pub peft: PeftConfig,
}

pub type Shape = (usize, usize);

impl ModelConfig {
    /// Desk-scale configuration used by the experiments.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            bands: 8,
            dim: 32,
            layers: 3,
            heads: 4,
            rank: 4,
            mlp_hidden: 64,
            bins: 16,
            peft: PeftConfig::none(),
        }
    }

    /// Gradient-check configuration: N=4, D=8, L=2, heads=2, r=2, B=4.
    pub fn tiny() -> Self {
        Self {
            image_size: 4,
            patch_size: 2,
            bands: 4,
            dim: 8,
            layers: 2,
            heads: 2,
            rank: 2,
            mlp_hidden: 16,
            bins: 4,
            peft: PeftConfig::full(),
        }
    }

    /// Paper-scale configuration (ViT-B/16 widths, C=16).
    pub fn full() -> Self {
        Self {
            image_size: 256,
            patch_size: 16,
            bands: 16,
            dim: 768,
            layers: 12,
            heads: 12,
            rank: 16,
            mlp_hidden: 3072,
            bins: 16,
            peft: PeftConfig::full(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "full" => Ok(Self::full()),
            other => Err(Error::config(format!("unknown model preset `{other}` (desk, tiny, full)"))),
        }
    }

    /// Reads `model.*` and `peft.*` keys on top of the `model.preset` (desk
    /// by default).
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let preset: String = kv.get("model.preset", "desk".to_string())?;
        let d = Self::preset(&preset)?;
        let cfg = Self {
            image_size: kv.get("model.image_size", d.image_size)?,
            patch_size: kv.get("model.patch_size", d.patch_size)?,
            bands: kv.get("model.bands", d.bands)?,
            dim: kv.get("model.dim", d.dim)?,
            layers: kv.get("model.layers", d.layers)?,
            heads: kv.get("model.heads", d.heads)?,
            rank: kv.get("model.rank", d.rank)?,
            mlp_hidden: kv.get("model.mlp_hidden", d.mlp_hidden)?,
            bins: kv.get("model.bins", d.bins)?,
            peft: PeftConfig::from_kv(kv, d.peft)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!("D = {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.rank == 0 || self.rank > self.dim {
            return Err(Error::config(format!("adapter rank {} must lie in 1..=D", self.rank)));
        }
        if self.bins < 2 {
            return Err(Error::config("at least 2 bins are required"));
        }
        if self.bands == 0 || self.layers == 0 || self.mlp_hidden == 0 {
            return Err(Error::config("bands, layers and mlp_hidden must be positive"));
        }
        Ok(())
    }

    /// Tokens per segment, `N = (S/p)²`.
    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    fn layer_name(i: usize, rest: &str) -> String {
        format!("enc.{i:02}.{rest}")
    }

    /// Every base (pretrained, frozen during fine-tuning) tensor.
    pub fn base_shapes(&self) -> Vec<(String, Shape)> {
        let (d, p2, n) = (self.dim, self.patch_size * self.patch_size, self.tokens());
        let mut s = vec![
            ("embed.fc.w".to_string(), (3 * p2, d)),
            ("embed.fc.b".to_string(), (1, d)),
            ("embed.pos".to_string(), (3 * n, d)),
        ];
        for i in 0..self.layers {
            for (name, shape) in [
                ("ln1.g", (1, d)),
                ("ln1.b", (1, d)),
                ("wq", (d, d)),
                ("bq", (1, d)),
                ("wk", (d, d)),
                ("bk", (1, d)),
                ("wv", (d, d)),
                ("bv", (1, d)),
                ("wo", (d, d)),
                ("bo", (1, d)),
                ("ln2.g", (1, d)),
                ("ln2.b", (1, d)),
                ("mlp.w1", (d, self.mlp_hidden)),
                ("mlp.b1", (1, self.mlp_hidden)),
                ("mlp.w2", (self.mlp_hidden, d)),
                ("mlp.b2", (1, d)),
            ] {
                s.push((Self::layer_name(i, name), shape));
            }
        }
        s.push(("norm.g".into(), (1, d)));
        s.push(("norm.b".into(), (1, d)));
        s.push(("head.query".into(), (1, d)));
        s.push(("head.w".into(), (d, 4 * self.bins)));
        s.push(("head.b".into(), (1, 4 * self.bins)));
        s
    }

    /// Tensors added by the PEFT modules that `self.peft` enables.
    pub fn peft_shapes(&self) -> Vec<(String, Shape)> {
        let (d, r, c, p2) = (self.dim, self.rank, self.bands, self.patch_size * self.patch_size);
        let p = &self.peft;
        let mut s = Vec::new();
        if let Some(v) = p.hei {
            if v.uses_spectral_attention() {
                s.push(("hei.w_down".to_string(), (3, c)));
                s.push(("hei.w_up".to_string(), (c, 3)));
            }
            match v {
                HeiVariant::ConcatDownsample => s.push(("hei.w_proj".into(), (3, c + 3))),
                HeiVariant::DownsampleAdd | HeiVariant::SaDownsampleAdd => s.push(("hei.w_proj".into(), (3, c))),
                HeiVariant::Full => {}
            }
        }
        if p.any_has() {
            s.push(("embed.hs.w".into(), (c * p2, d)));
            s.push(("embed.hs.b".into(), (1, d)));
        }
        for i in 0..self.layers {
            for (on, b) in [(p.has_q, 'q'), (p.has_k, 'k'), (p.has_v, 'v')] {
                if on {
                    s.push((format!("has.{i:02}.{b}.down"), (d, r)));
                    s.push((format!("has.{i:02}.{b}.up"), (r, d)));
                }
            }
            for (on, b) in [(p.ham_par, "pha"), (p.ham_seq, "sha")] {
                if on {
                    s.push((format!("ham.{i:02}.{b}.down"), (d, r)));
                    s.push((format!("ham.{i:02}.{b}.up"), (r, d)));
                }
            }
        }
        s
    }

    pub fn shapes(&self) -> Vec<(String, Shape)> {
        let mut s = self.base_shapes();
        s.extend(self.peft_shapes());
        s
    }

    /// `(peft, total)` scalar counts, computed from shapes alone.
    pub fn param_counts(&self) -> (usize, usize) {
        let count = |v: Vec<(String, Shape)>| v.iter().map(|(_, (r, c))| r * c).sum::<usize>();
        let peft = count(self.peft_shapes());
        (peft, peft + count(self.base_shapes()))
    }
}

/// Named model tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Matrix>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.map.get(name).ok_or_else(|| Error::State(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.map.get_mut(name).ok_or_else(|| Error::State(format!("missing tensor `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        self.map.insert(name.into(), m);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Matrix::len).sum()
    }

    pub fn round_to_f32(&mut self) {
        self.map.values_mut().for_each(Matrix::round_to_f32);
    }
}

/// One image pair: `hs` is `C × S²`, `fc` is `3 × S²`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInput {
    pub hs: Matrix,
    pub fc: Matrix,
}

impl PairInput {
    pub fn from_crop(crop: &HSFrame, cmf: &CmfMatrix) -> Result<Self> {
        Ok(Self { hs: crop.to_matrix(), fc: to_false_color(crop, cmf)?.into_matrix() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub search: PairInput,
    pub template: PairInput,
    pub online: PairInput,
}

impl ModelInput {
    fn pairs(&self) -> [&PairInput; 3] {
        [&self.search, &self.template, &self.online]
    }
}

/// Lazily binds named parameters to tape leaves; tensors named in
/// `trainable` receive gradients.
pub struct Binder<'a> {
    params: &'a Params,
    trainable: Option<&'a BTreeSet<String>>,
    bound: BTreeMap<String, Var>,
    handles: BTreeMap<String, Var>,
    fault: Option<(&'a str, f64)>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a Params, trainable: Option<&'a BTreeSet<String>>) -> Self {
        Self { params, trainable, bound: BTreeMap::new(), handles: BTreeMap::new(), fault: None }
    }

    /// Scales every gradient reaching `name` by `factor` (fault injection).
    pub fn with_fault(mut self, name: &'a str, factor: f64) -> Self {
        self.fault = Some((name, factor));
        self
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.handles.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let grad = self.trainable.is_some_and(|t| t.contains(name));
        let mut v = g.leaf(value, grad);
        self.bound.insert(name.to_string(), v);
        if let Some((f, s)) = self.fault {
            if f == name {
                v = g.grad_scale(v, s);
            }
        }
        // Gradients are read from the leaf; callers use the (possibly
        // fault-wrapped) handle.
        self.handles.insert(name.to_string(), v);
        Ok(v)
    }

    fn pair(&mut self, g: &mut Graph, a: &str, b: &str) -> Result<(Var, Var)> {
        Ok((self.var(g, a)?, self.var(g, b)?))
    }

    /// Leaf handles of every tensor bound so far.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }
}

pub struct ForwardOutput {
    /// `1 × 4B` head logits.
    pub logits: Var,
    /// Final (normalized) `3N × D` features.
    pub features: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
}

fn normal_init(name: &str, shape: Shape, rng: &mut ChaCha8Rng) -> Matrix {
    let (r, c) = shape;
    let last = name.rsplit('.').next().unwrap_or("");
    // Larger than the usual 0.02 for the pooling query, head and positions:
    // at 0.02 the attention-pool / readout pair starts on a flat saddle and
    // desk-scale pretraining never learns to localize.
    match name {
        "head.query" => return Matrix::randn(r, c, 1.0, rng),
        "embed.pos" => return Matrix::randn(r, c, 0.5, rng),
        "head.w" => return Matrix::randn(r, c, 1.0 / (r as f64).sqrt(), rng),
        _ => {}
    }
    // HS inputs are non-negative, so a zero-mean `w_down` row can start (or
    // drift) wholly negative and its ReLU never recovers; start from a
    // positive spectral average instead.
    if name == "hei.w_down" {
        return Matrix::randn(r, c, 0.02, rng).map(|v| v + 1.0 / c as f64);
    }
    if name.starts_with("hei.") {
        return Matrix::randn(r, c, 0.02, rng);
    }
    match last {
        "g" => Matrix::filled(r, c, 1.0),
        "b" | "bq" | "bk" | "bv" | "bo" | "b1" | "b2" => Matrix::zeros(r, c),
        "up" => Matrix::zeros(r, c),
        "down" => Matrix::randn(r, c, 0.02, rng),
        _ => Matrix::randn(r, c, 1.0 / (r as f64).sqrt(), rng),
    }
}

impl Model {
    /// Fresh base network (no PEFT tensors) with f32-representable weights.
    pub fn new_base(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let cfg = ModelConfig { peft: PeftConfig::none(), ..cfg.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for (name, shape) in cfg.base_shapes() {
            params.insert(name.clone(), normal_init(&name, shape, &mut rng));
        }
        params.round_to_f32();
        Ok(Self { cfg, params })
    }

    /// Adds zero-up-initialized PEFT tensors for `peft`; HEI uses
    /// N(0, 0.02²) and the concat variant starts as the identity on V_FRGB.
    pub fn attach_peft(&mut self, peft: PeftConfig, seed: u64) -> Result<()> {
        if !self.cfg.peft.is_empty() {
            return Err(Error::State("PEFT modules are already attached".into()));
        }
        self.cfg.peft = peft;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_AD4A_7E45_0000);
        let c = self.cfg.bands;
        for (name, shape) in self.cfg.peft_shapes() {
            let mut m = normal_init(&name, shape, &mut rng);
            if name == "hei.w_proj" && peft.hei == Some(HeiVariant::ConcatDownsample) {
                for k in 0..3 {
                    m.set(k, c + k, 1.0);
                }
            }
            m.round_to_f32();
            self.params.insert(name, m);
        }
        Ok(())
    }

    /// Validates that `params` holds exactly the tensors `cfg` declares.
    pub fn from_parts(cfg: ModelConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        let expected: BTreeMap<String, Shape> = cfg.shapes().into_iter().collect();
        for (name, m) in params.iter() {
            match expected.get(name) {
                None => return Err(Error::Partition(name.clone())),
                Some(&s) if s != m.shape() => {
                    return Err(Error::shape(format!("tensor `{name}` is {:?}, config expects {s:?}", m.shape())))
                }
                _ => {}
            }
        }
        if let Some(missing) = expected.keys().find(|k| !params.contains(k)) {
            return Err(Error::State(format!("checkpoint lacks tensor `{missing}`")));
        }
        Ok(Self { cfg, params })
    }

    /// Copy restricted to the base network (PEFT removed).
    pub fn base_only(&self) -> Self {
        let mut params = self.params.clone();
        for (name, _) in self.cfg.peft_shapes() {
            params.remove(&name);
        }
        Self { cfg: ModelConfig { peft: PeftConfig::none(), ..self.cfg.clone() }, params }
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let hw = self.cfg.image_size * self.cfg.image_size;
        for p in input.pairs() {
            if p.fc.shape() != (3, hw) {
                return Err(Error::shape(format!("false-color input {:?}, expected (3, {hw})", p.fc.shape())));
            }
            if p.hs.shape() != (self.cfg.bands, hw) {
                return Err(Error::shape(format!(
                    "HS input {:?}, expected ({}, {hw})",
                    p.hs.shape(),
                    self.cfg.bands
                )));
            }
        }
        Ok(())
    }

    /// Eq. 1–4 on the tape.
    pub fn forward_tape(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        input: &ModelInput,
        trace: Option<&mut EncoderTrace>,
    ) -> Result<ForwardOutput> {
        self.check_input(input)?;
        let cfg = &self.cfg;
        let peft = cfg.peft;
        let (s, p, n) = (cfg.image_size, cfg.patch_size, cfg.tokens());
        let fc_index = patch_index(3, s, p)?;

        let hei = match peft.hei {
            Some(v) => {
                let opt = |b: &mut Binder, g: &mut Graph, name: &str| -> Result<Option<Var>> {
                    if b.params.contains(name) {
                        b.var(g, name).map(Some)
                    } else {
                        Ok(None)
                    }
                };
                Some((
                    v,
                    HeiVars {
                        w_down: opt(b, g, "hei.w_down")?,
                        w_up: opt(b, g, "hei.w_up")?,
                        w_proj: opt(b, g, "hei.w_proj")?,
                    },
                ))
            }
            None => None,
        };
        let (fc_w, fc_b) = b.pair(g, "embed.fc.w", "embed.fc.b")?;
        let mut hs_vars = Vec::with_capacity(3);
        let mut segments = Vec::with_capacity(3);
        for pair in input.pairs() {
            let v_fc = g.constant(pair.fc.clone());
            let needs_hs = hei.is_some() || peft.any_has();
            let v_hs = needs_hs.then(|| g.constant(pair.hs.clone()));
            let img = match (&hei, v_hs) {
                (Some((variant, vars)), Some(vh)) => enhance_tape(g, *variant, peft.hei_residual, vh, v_fc, vars)?,
                _ => v_fc,
            };
            segments.push(patch_embed_tape(g, img, &fc_index, n, fc_w, fc_b)?);
            hs_vars.push(v_hs);
        }
        let pos = b.var(g, "embed.pos")?;
        let f_e = g.concat_rows(&segments)?;
        let f_e = g.add(f_e, pos)?;

        let f_hs = if peft.any_has() {
            let hs_index = patch_index(cfg.bands, s, p)?;
            let (w, bias) = b.pair(g, "embed.hs.w", "embed.hs.b")?;
            let mut segs = Vec::with_capacity(3);
            for vh in hs_vars.iter().flatten() {
                segs.push(patch_embed_tape(g, *vh, &hs_index, n, w, bias)?);
            }
            let f = g.concat_rows(&segs)?;
            Some(g.add(f, pos)?)
        } else {
            None
        };

        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let l = |rest: &str| ModelConfig::layer_name(i, rest);
            let opt_pair = |b: &mut Binder, g: &mut Graph, on: bool, base: String| -> Result<Option<(Var, Var)>> {
                if on {
                    Ok(Some(b.pair(g, &format!("{base}.down"), &format!("{base}.up"))?))
                } else {
                    Ok(None)
                }
            };
            layers.push(LayerVars {
                ln1: b.pair(g, &l("ln1.g"), &l("ln1.b"))?,
                wq: b.pair(g, &l("wq"), &l("bq"))?,
                wk: b.pair(g, &l("wk"), &l("bk"))?,
                wv: b.pair(g, &l("wv"), &l("bv"))?,
                wo: b.pair(g, &l("wo"), &l("bo"))?,
                mlp: [
                    b.var(g, &l("ln2.g"))?,
                    b.var(g, &l("ln2.b"))?,
                    b.var(g, &l("mlp.w1"))?,
                    b.var(g, &l("mlp.b1"))?,
                    b.var(g, &l("mlp.w2"))?,
                    b.var(g, &l("mlp.b2"))?,
                ],
                has_q: opt_pair(b, g, peft.has_q, format!("has.{i:02}.q"))?,
                has_k: opt_pair(b, g, peft.has_k, format!("has.{i:02}.k"))?,
                has_v: opt_pair(b, g, peft.has_v, format!("has.{i:02}.v"))?,
                pha: opt_pair(b, g, peft.ham_par, format!("ham.{i:02}.pha"))?,
                sha: opt_pair(b, g, peft.ham_seq, format!("ham.{i:02}.sha"))?,
            });
        }
        let x = encoder_tape(g, f_e, f_hs, &layers, cfg.heads, trace)?;
        let (ng, nb) = b.pair(g, "norm.g", "norm.b")?;
        let features = g.layer_norm(x, ng, nb)?;
        let f_s = g.slice_rows(features, 0, n)?;
        let (q, w) = b.pair(g, "head.query", "head.w")?;
        let hb = b.var(g, "head.b")?;
        let logits = head_tape(g, f_s, q, w, hb)?;
        Ok(ForwardOutput { logits, features })
    }

    /// Inference: box logits and the final features.
    pub fn run(&self, input: &ModelInput, trace: Option<&mut EncoderTrace>) -> Result<(BoxLogits, Matrix)> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, None);
        let out = self.forward_tape(&mut g, &mut b, input, trace)?;
        let logits = BoxLogits::from_row(g.value(out.logits).row(0))?;
        Ok((logits, g.value(out.features).clone()))
    }

    pub fn predict(&self, input: &ModelInput) -> Result<BoxLogits> {
        Ok(self.run(input, None)?.0)
    }

    /// Cross-entropy against the four target bins and the gradient of every
    /// tensor in `trainable`.
    pub fn loss_and_grads(
        &self,
        input: &ModelInput,
        targets: &[usize; 4],
        trainable: &BTreeSet<String>,
        fault: Option<(&str, f64)>,
    ) -> Result<(f64, BTreeMap<String, Matrix>)> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, Some(trainable));
        if let Some((name, s)) = fault {
            b = b.with_fault(name, s);
        }
        let out = self.forward_tape(&mut g, &mut b, input, None)?;
        let loss = g.cross_entropy(out.logits, self.cfg.bins, targets)?;
        let value = g.value(loss).get(0, 0);
        let mut grads = g.backward(loss)?;
        let mut out = BTreeMap::new();
        for name in trainable {
            let g_m = match b.bound().get(name) {
                Some(&v) => grads.take(v),
                None => None,
            };
            let shape = self.params.get(name)?.shape();
            out.insert(name.clone(), g_m.unwrap_or_else(|| Matrix::zeros(shape.0, shape.1)));
        }
        Ok((value, out))
    }

    /// Loss only (used by finite differences).
    pub fn loss(&self, input: &ModelInput, targets: &[usize; 4]) -> Result<f64> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, None);
        let out = self.forward_tape(&mut g, &mut b, input, None)?;
        let loss = g.cross_entropy(out.logits, self.cfg.bins, targets)?;
        Ok(g.value(loss).get(0, 0))
    }
}

/// Uniform [0, 1) inputs of the right shapes (gradient checks, tests).
pub fn random_input(cfg: &ModelConfig, seed: u64) -> ModelInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = cfg.image_size * cfg.image_size;
    let mut pair = || PairInput {
        hs: Matrix::from_vec(cfg.bands, hw, (0..cfg.bands * hw).map(|_| rng.random::<f64>()).collect()).unwrap(),
        fc: Matrix::from_vec(3, hw, (0..3 * hw).map(|_| rng.random::<f64>()).collect()).unwrap(),
    };
    ModelInput { search: pair(), template: pair(), online: pair() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_config_budget() {
        let cfg = ModelConfig::full();
        let (peft, total) = cfg.param_counts();
        let has: usize = cfg.peft_shapes().iter().filter(|(n, _)| n.starts_with("has.")).map(|(_, (r, c))| r * c).sum();
        assert_eq!(has, 589_824);
        assert!((peft as f64) / (total as f64) < 0.05, "{peft}/{total}");
    }

    #[test]
    fn zero_init_matches_base() {
        let cfg = ModelConfig::tiny();
        let base = Model::new_base(&cfg, 1).unwrap();
        let mut adapted = base.clone();
        adapted.attach_peft(PeftConfig { hei: None, ..PeftConfig::full() }, 2).unwrap();
        let input = random_input(&cfg, 3);
        let (lb, fb) = base.run(&input, None).unwrap();
        let (la, fa) = adapted.run(&input, None).unwrap();
        assert!(fa.max_abs_diff(&fb) <= 1e-9);
        assert_eq!(la, lb);
        assert_eq!(adapted.base_only(), base);
    }

    #[test]
    fn peft_labels_and_presets() {
        for l in ["baseline", "+HEI", "+HEI+HAS", "+HEI+HAS+HAM"] {
            assert_eq!(PeftConfig::table4(l).unwrap().to_string(), l);
        }
        let kv = KvConfig::parse("peft.preset = +HEI+HAS\npeft.has = q,k\n").unwrap();
        let p = PeftConfig::from_kv(&kv, PeftConfig::none()).unwrap();
        assert!(p.has_q && p.has_k && !p.has_v && p.hei.is_some() && !p.any_ham());
        let bad = KvConfig::parse("peft.has = x").unwrap();
        assert!(PeftConfig::from_kv(&bad, PeftConfig::none()).is_err());
    }

    #[test]
    fn gradients_cover_only_trainable_tensors() {
        let cfg = ModelConfig::tiny();
        let mut m = Model::new_base(&cfg, 4).unwrap();
        m.attach_peft(PeftConfig::full(), 5).unwrap();
        let trainable: BTreeSet<String> = m.cfg.peft_shapes().into_iter().map(|(n, _)| n).collect();
        let (loss, grads) = m.loss_and_grads(&random_input(&cfg, 6), &[0, 1, 2, 3], &trainable, None).unwrap();
        assert!(loss.is_finite());
        assert_eq!(grads.keys().cloned().collect::<BTreeSet<_>>(), trainable);
        // zero up-projections: the up matrices get gradient, the down ones none
        assert!(grads["has.00.q.up"].max_abs() > 0.0);
        assert_eq!(grads["has.00.q.down"].max_abs(), 0.0);
    }

    #[test]
    fn from_parts_rejects_unknown_tensors() {
        let cfg = ModelConfig::tiny();
        let m = Model::new_base(&cfg, 1).unwrap();
        let mut p = m.params.clone();
        p.insert("mystery", Matrix::zeros(1, 1));
        assert!(matches!(Model::from_parts(m.cfg.clone(), p), Err(Error::Partition(_))));
        Model::from_parts(m.cfg.clone(), m.params.clone()).unwrap();
    }
}
