//! A small pre-norm transformer encoder used as the entropy model.
//!
//! Inputs are token slots: each slot carries the grid cell whose positional
//! embedding it uses and either a token (embedded by a dense layer after
//! dividing by `delta`) or nothing (the learned mask vector). Outputs are
//! per-slot mixture parameters for every channel.
//!
//! Parameters live in one flat `Vec<f64>` described by [`ParamLayout`], which
//! keeps the optimizer, gradient checks and checkpoints simple.

mod backprop;
mod ckpt;
pub mod ops;
mod train;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gmm::{Mixture, TokenGmm, SIGMA_MAX, SIGMA_MIN};

pub use backprop::{Gradients, Tape, Target, TrainExample};
pub use train::{grad_check, nll_m2t, nll_mt, sample_completion, train, Adam, GradCheck, TrainConfig, TrainReport};

/// Which inference scheme a model is trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Mt,
    M2t,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::Mt => 0,
            Mode::M2t => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Mode::Mt),
            1 => Ok(Mode::M2t),
            other => Err(Error::Model(format!("unknown mode code {other}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Mt => "mt",
            Mode::M2t => "m2t",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mt" => Ok(Mode::Mt),
            "m2t" => Ok(Mode::M2t),
            other => Err(Error::Model(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub mlp_hidden: usize,
    pub heads: usize,
    /// Channels per token.
    pub c: usize,
    /// Mixture components per channel.
    pub n_mix: usize,
    pub w_t: usize,
    /// Token values are divided by this before the embedding layer.
    pub delta: f64,
    pub mode: Mode,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, width 64, 4 heads, MLP 256.
    pub fn desk(c: usize, w_t: usize) -> Self {
        Self { layers: 4, width: 64, mlp_hidden: 256, heads: 4, c, n_mix: 3, w_t, delta: 5.0, mode: Mode::Mt }
    }

    /// ViT-B sized encoder. Reachable through configuration only.
    pub fn base(c: usize, w_t: usize) -> Self {
        Self { layers: 12, width: 768, mlp_hidden: 3072, heads: 12, c, n_mix: 3, w_t, delta: 5.0, mode: Mode::Mt }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.layers, self.width, self.mlp_hidden, self.heads, self.c, self.n_mix, self.w_t];
        if positive.contains(&0) {
            return Err(Error::Model(format!("config has a zero dimension: {self:?}")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Model(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::Model(format!("delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.w_t * self.w_t
    }

    /// Raw head outputs per slot: `3 * n_mix` per channel.
    pub fn head_dim(&self) -> usize {
        3 * self.n_mix * self.c
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSlots {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub range: Range<usize>,
    pub shape: Vec<usize>,
}

/// Where each named tensor lives in the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub embed_w: Range<usize>,
    pub embed_b: Range<usize>,
    pub mask_token: Range<usize>,
    pub pos: Range<usize>,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut entries = Vec::new();
        let mut next = 0usize;
        let mut add = |name: String, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let range = next..next + n;
            next += n;
            entries.push(ParamEntry { name, range: range.clone(), shape });
            range
        };
        let (d, m) = (cfg.width, cfg.mlp_hidden);
        let embed_w = add("embed.w".into(), vec![d, cfg.c]);
        let embed_b = add("embed.b".into(), vec![d]);
        let mask_token = add("mask_token".into(), vec![d]);
        let pos = add("pos".into(), vec![cfg.tokens(), d]);
        let layers = (0..cfg.layers)
            .map(|l| LayerSlots {
                ln1_g: add(format!("layer{l}.ln1.g"), vec![d]),
                ln1_b: add(format!("layer{l}.ln1.b"), vec![d]),
                wq: add(format!("layer{l}.attn.wq"), vec![d, d]),
                bq: add(format!("layer{l}.attn.bq"), vec![d]),
                wk: add(format!("layer{l}.attn.wk"), vec![d, d]),
                bk: add(format!("layer{l}.attn.bk"), vec![d]),
                wv: add(format!("layer{l}.attn.wv"), vec![d, d]),
                bv: add(format!("layer{l}.attn.bv"), vec![d]),
                wo: add(format!("layer{l}.attn.wo"), vec![d, d]),
                bo: add(format!("layer{l}.attn.bo"), vec![d]),
                ln2_g: add(format!("layer{l}.ln2.g"), vec![d]),
                ln2_b: add(format!("layer{l}.ln2.b"), vec![d]),
                w1: add(format!("layer{l}.mlp.w1"), vec![m, d]),
                b1: add(format!("layer{l}.mlp.b1"), vec![m]),
                w2: add(format!("layer{l}.mlp.w2"), vec![d, m]),
                b2: add(format!("layer{l}.mlp.b2"), vec![d]),
            })
            .collect();
        let lnf_g = add("final_ln.g".into(), vec![d]);
        let lnf_b = add("final_ln.b".into(), vec![d]);
        let head_w = add("head.w".into(), vec![cfg.head_dim(), d]);
        let head_b = add("head.b".into(), vec![cfg.head_dim()]);
        Self { entries, embed_w, embed_b, mask_token, pos, layers, lnf_g, lnf_b, head_w, head_b, total: next }
    }
}

/// Binary attention mask, `rows` queries by `cols` keys.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Shape(format!("mask {rows}x{cols} needs {} entries, got {}", rows * cols, allowed.len())));
        }
        Ok(Self { rows, cols, allowed })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self { rows, cols, allowed: vec![true; rows * cols] }
    }

    /// Next-token mask: query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|k| k % n <= k / n).collect();
        Self { rows: n, cols: n, allowed }
    }

    /// Block lower-triangular mask over consecutive groups: a query sees every
    /// key whose group is not later than its own.
    pub fn block_causal(group_sizes: &[usize]) -> Self {
        let group_of: Vec<usize> = group_sizes.iter().enumerate().flat_map(|(g, &s)| std::iter::repeat_n(g, s)).collect();
        let n = group_of.len();
        let allowed = (0..n * n).map(|k| group_of[k % n] <= group_of[k / n]).collect();
        Self { rows: n, cols: n, allowed }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn is_all_ones(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    /// Keys visible to `row`, ascending.
    pub fn keys(&self, row: usize) -> Vec<usize> {
        (0..self.cols).filter(|&c| self.get(row, c)).collect()
    }
}

/// Per-layer keys and values of every slot fed so far.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    width: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self { width: cfg.width, keys: vec![Vec::new(); cfg.layers], values: vec![Vec::new(); cfg.layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        self.keys.iter_mut().chain(self.values.iter_mut()).for_each(Vec::clear);
        self.len = 0;
    }
}

/// One input slot.
#[derive(Clone, Copy, Debug)]
pub struct Slot<'a> {
    /// Grid cell whose positional embedding the slot uses.
    pub cell: usize,
    /// Token channels, or `None` for the mask vector.
    pub token: Option<&'a [f64]>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
}

impl Model {
    /// Fresh weights: fan-in scaled uniform matrices, unit layer-norm gains,
    /// and a head biased so every scale starts near one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |r: &Range<usize>, bound: f64| {
            for p in &mut params[r.clone()] {
                *p = rng.random_range(-bound..bound);
            }
        };
        let d = config.width as f64;
        uniform(&layout.embed_w, 1.0 / (config.c as f64).sqrt());
        uniform(&layout.mask_token, 0.1);
        uniform(&layout.pos, 0.1);
        for l in &layout.layers {
            for r in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1] {
                uniform(r, 1.0 / d.sqrt());
            }
            uniform(&l.w2, 1.0 / (config.mlp_hidden as f64).sqrt());
        }
        uniform(&layout.head_w, 0.1 / d.sqrt());
        let gains: Vec<Range<usize>> =
            layout.layers.iter().flat_map(|l| [l.ln1_g.clone(), l.ln2_g.clone()]).chain([layout.lnf_g.clone()]).collect();
        for r in gains {
            params[r].iter_mut().for_each(|g| *g = 1.0);
        }
        let sigma_raw = ops::inverse_softplus(1.0 - SIGMA_MIN);
        let k = config.n_mix;
        for ch in 0..config.c {
            let base = layout.head_b.start + ch * 3 * k;
            for j in 0..k {
                params[base + k + j] = sigma_raw;
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn param(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    pub fn cache(&self) -> KvCache {
        KvCache::new(&self.config)
    }

    fn check_slots(&self, slots: &[Slot]) -> Result<()> {
        for s in slots {
            if s.cell >= self.config.tokens() {
                return Err(Error::Shape(format!("cell {} outside {} positions", s.cell, self.config.tokens())));
            }
            if let Some(t) = s.token {
                if t.len() != self.config.c {
                    return Err(Error::Shape(format!("token has {} channels, model expects {}", t.len(), self.config.c)));
                }
            }
        }
        Ok(())
    }

    /// Slot embeddings, `slots.len() x width`.
    pub fn embed(&self, slots: &[Slot]) -> Result<Vec<f64>> {
        self.check_slots(slots)?;
        let d = self.config.width;
        let mut x = vec![0.0; slots.len() * d];
        let mut scaled = vec![0.0; self.config.c];
        for (row, s) in x.chunks_exact_mut(d).zip(slots) {
            match s.token {
                Some(t) => {
                    for (o, v) in scaled.iter_mut().zip(t) {
                        *o = v / self.config.delta;
                    }
                    ops::linear(&scaled, self.param(&self.layout.embed_w), self.param(&self.layout.embed_b), row);
                }
                None => row.copy_from_slice(self.param(&self.layout.mask_token)),
            }
            let pos = &self.params[self.layout.pos.start + s.cell * d..self.layout.pos.start + (s.cell + 1) * d];
            for (o, p) in row.iter_mut().zip(pos) {
                *o += p;
            }
        }
        Ok(x)
    }

    /// Runs the encoder on embedded rows and returns raw head outputs
    /// (`rows x head_dim`).
    ///
    /// With a cache, the rows are appended after the cached prefix and may
    /// attend to it; `mask` is then `rows x (prefix + rows)`. Without a mask
    /// every row sees every key.
    pub fn forward(&self, x: &[f64], mask: Option<&AttnMask>, cache: Option<&mut KvCache>) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let d = cfg.width;
        if !x.len().is_multiple_of(d) {
            return Err(Error::Shape(format!("input length {} is not a multiple of width {d}", x.len())));
        }
        let n = x.len() / d;
        let mut local;
        let cache = match cache {
            Some(c) => {
                if c.width != d || c.keys.len() != cfg.layers {
                    return Err(Error::Model(format!(
                        "cache built for {} layers of width {}, model has {} of width {d}",
                        c.keys.len(),
                        c.width,
                        cfg.layers
                    )));
                }
                c
            }
            None => {
                local = self.cache();
                &mut local
            }
        };
        let prefix = cache.len;
        let total = prefix + n;
        if let Some(m) = mask {
            if m.rows() != n || m.cols() != total {
                return Err(Error::Shape(format!("mask is {}x{}, expected {n}x{total}", m.rows(), m.cols())));
            }
        }
        let keys: Vec<Vec<usize>> = (0..n)
            .map(|i| match mask {
                Some(m) => m.keys(i),
                None => (0..total).collect(),
            })
            .collect();

        let (dk, hm) = (cfg.head_width(), cfg.mlp_hidden);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut x = x.to_vec();
        let mut h = vec![0.0; d];
        let mut q = vec![0.0; n * d];
        let mut attn = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut u = vec![0.0; hm];
        let mut probs = Vec::new();
        for (l, ls) in self.layout.layers.iter().enumerate() {
            let (kc, vc) = (&mut cache.keys[l], &mut cache.values[l]);
            kc.resize(total * d, 0.0);
            vc.resize(total * d, 0.0);
            for i in 0..n {
                ops::layer_norm(&x[i * d..(i + 1) * d], self.param(&ls.ln1_g), self.param(&ls.ln1_b), &mut h);
                ops::linear(&h, self.param(&ls.wq), self.param(&ls.bq), &mut q[i * d..(i + 1) * d]);
                let at = (prefix + i) * d;
                ops::linear(&h, self.param(&ls.wk), self.param(&ls.bk), &mut kc[at..at + d]);
                ops::linear(&h, self.param(&ls.wv), self.param(&ls.bv), &mut vc[at..at + d]);
            }
            for i in 0..n {
                for head in 0..cfg.heads {
                    let off = head * dk;
                    ops::attend(&q[i * d + off..i * d + off + dk], &keys[i], kc, vc, d, off, scale, &mut probs, &mut attn[off..off + dk]);
                }
                ops::linear(&attn, self.param(&ls.wo), self.param(&ls.bo), &mut proj);
                let row = &mut x[i * d..(i + 1) * d];
                for (r, p) in row.iter_mut().zip(&proj) {
                    *r += p;
                }
                ops::layer_norm(row, self.param(&ls.ln2_g), self.param(&ls.ln2_b), &mut h);
                ops::linear(&h, self.param(&ls.w1), self.param(&ls.b1), &mut u);
                u.iter_mut().for_each(|v| *v = ops::gelu(*v));
                ops::linear(&u, self.param(&ls.w2), self.param(&ls.b2), &mut proj);
                for (r, p) in row.iter_mut().zip(&proj) {
                    *r += p;
                }
            }
        }
        cache.len = total;

        let hd = cfg.head_dim();
        let mut out = vec![0.0; n * hd];
        for i in 0..n {
            ops::layer_norm(&x[i * d..(i + 1) * d], self.param(&self.layout.lnf_g), self.param(&self.layout.lnf_b), &mut h);
            ops::linear(&h, self.param(&self.layout.head_w), self.param(&self.layout.head_b), &mut out[i * hd..(i + 1) * hd]);
        }
        Ok(out)
    }

    /// Maps one slot's raw head output to mixture parameters.
    pub fn decode_head(&self, raw: &[f64]) -> TokenGmm {
        let k = self.config.n_mix;
        TokenGmm::new(raw.chunks_exact(3 * k).map(|ch| head_mixture(ch, k)).collect())
    }

    /// Embeds, runs and decodes in one go.
    pub fn predict(&self, slots: &[Slot], mask: Option<&AttnMask>, cache: Option<&mut KvCache>) -> Result<Vec<TokenGmm>> {
        let x = self.embed(slots)?;
        let raw = self.forward(&x, mask, cache)?;
        Ok(raw.chunks_exact(self.config.head_dim()).map(|r| self.decode_head(r)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// `sigma = min(SIGMA_MIN + softplus(raw), SIGMA_MAX)`.
pub fn head_sigma(raw: f64) -> f64 {
    (SIGMA_MIN + ops::softplus(raw)).min(SIGMA_MAX)
}

/// Raw channel block `[means.., scale logits.., weight logits..]` to a mixture.
pub fn head_mixture(raw: &[f64], k: usize) -> Mixture {
    let mu = raw[..k].to_vec();
    let sigma = raw[k..2 * k].iter().map(|&r| head_sigma(r)).collect();
    let logits = &raw[2 * k..3 * k];
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Mixture::new(mu, sigma, exps.into_iter().map(|e| e / sum).collect())
}
