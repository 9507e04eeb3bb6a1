//! Losses, the desk-scale training loop and gradient checking.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mode, Model, Slot, Target, TrainExample};
use crate::error::{Error, Result};
use crate::gmm::{bin_pmf, BinnedPmf, Support, TokenGmm};
use crate::grid::Tile;
use crate::layout::{build_layout, M2tLayout};
use crate::sched::{make_schedule, ScheduleKind, ScheduleSpec};
use crate::source::TileSource;

fn nll_token(t: &TokenGmm, values: &[i16]) -> f64 {
    t.channels.iter().zip(values).map(|(m, &y)| -bin_pmf(m, y as f64).log2()).sum()
}

/// Bits needed for the masked tokens of `tile` under per-position `params`.
pub fn nll_mt(tile: &Tile, mask: &[bool], params: &[TokenGmm]) -> f64 {
    (0..tile.tokens()).filter(|&p| mask[p]).map(|p| nll_token(&params[p], tile.token(p))).sum()
}

/// Bits needed for the whole tile; `params[slot]` predicts
/// `tile[layout.target_perm[slot]]`.
pub fn nll_m2t(tile: &Tile, layout: &M2tLayout, params: &[TokenGmm]) -> f64 {
    layout.target_perm.iter().zip(params).map(|(&p, t)| nll_token(t, tile.token(p))).sum()
}

fn token_values(values: &[f64], c: usize, p: usize) -> Vec<f64> {
    values[p * c..(p + 1) * c].to_vec()
}

impl TrainExample {
    /// MT input: every position in raster order, masked ones replaced by
    /// the mask vector; only masked positions are targets.
    pub fn mt(values: &[f64], c: usize, masked: &[bool]) -> Self {
        let n = masked.len();
        let slots = (0..n).map(|p| (p, (!masked[p]).then(|| token_values(values, c, p)))).collect();
        let targets = (0..n).filter(|&p| masked[p]).map(|p| Target { slot: p, values: token_values(values, c, p) }).collect();
        Self { slots, mask: None, targets }
    }

    /// M2T input: permuted, padded, block-causal; every slot is a target.
    pub fn m2t(values: &[f64], c: usize, layout: &M2tLayout) -> Self {
        use crate::layout::InputSlot;
        let slots = layout
            .input_slots
            .iter()
            .map(|s| match *s {
                InputSlot::Token(p) => (p, Some(token_values(values, c, p))),
                InputSlot::Pad { predicts } => (predicts, None),
            })
            .collect();
        let targets = layout.target_perm.iter().enumerate().map(|(slot, &p)| Target { slot, values: token_values(values, c, p) }).collect();
        Self { slots, mask: Some(layout.attn_mask.clone()), targets }
    }
}

/// Adam with global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9, clip: 1.0, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let shrink = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i] * shrink;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    /// Fraction of masked tokens per MT example is uniform in this range.
    pub mask_ratio: (f64, f64),
    /// Add U(-1/2, 1/2) noise to targets and visible context.
    pub noise: bool,
    /// Fixed schedule M2T trains with.
    pub schedule: ScheduleSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            lr: 2e-3,
            warmup: 50,
            seed: 0,
            mask_ratio: (0.05, 0.99),
            noise: true,
            schedule: ScheduleSpec::new(ScheduleKind::Qlds, 12, 2.2, 0),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean training loss per step, bits per token slot.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over a window of steps.
    pub fn mean(&self, range: std::ops::Range<usize>) -> f64 {
        let w = &self.losses[range];
        w.iter().sum::<f64>() / w.len() as f64
    }
}

/// Learning rate with linear warmup and cosine decay to a tenth.
fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let span = (cfg.steps - cfg.warmup).max(1) as f64;
    let t = (step - cfg.warmup) as f64 / span;
    cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Trains `model` in its configured mode on tiles from `source`.
pub fn train(
    model: &mut Model,
    source: &mut dyn TileSource,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    let mc = model.config.clone();
    let n = mc.tokens();
    let layout = match mc.mode {
        Mode::M2t => {
            let s = cfg.schedule;
            if s.kind == ScheduleKind::Entropy {
                return Err(Error::Schedule("M2T trains with a static schedule (random or qlds)".into()));
            }
            Some(build_layout(&make_schedule(s.kind, s.steps, s.alpha, mc.w_t, s.seed)?)?)
        }
        Mode::Mt => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params.len());
    let mut report = TrainReport::default();
    let mut positions: Vec<usize> = (0..n).collect();
    for step in 0..cfg.steps {
        let mut grad = vec![0.0; model.params.len()];
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let tile = source.next_tile();
            if tile.w_t != mc.w_t || tile.c != mc.c {
                return Err(Error::Model(format!(
                    "source tiles are {}x{}x{}, model expects {}x{}x{}",
                    tile.w_t, tile.w_t, tile.c, mc.w_t, mc.w_t, mc.c
                )));
            }
            let values: Vec<f64> =
                tile.values.iter().map(|&v| v as f64 + if cfg.noise { rng.random_range(-0.5..0.5) } else { 0.0 }).collect();
            let ex = match &layout {
                Some(l) => TrainExample::m2t(&values, mc.c, l),
                None => {
                    let ratio = rng.random_range(cfg.mask_ratio.0..=cfg.mask_ratio.1);
                    let count = ((ratio * n as f64).round() as usize).clamp(1, n);
                    positions.shuffle(&mut rng);
                    let mut masked = vec![false; n];
                    for &p in &positions[..count] {
                        masked[p] = true;
                    }
                    TrainExample::mt(&values, mc.c, &masked)
                }
            };
            let (l, g) = model.loss_and_grad(&ex)?;
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let norm = (cfg.batch * n) as f64;
        let loss = loss / norm;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        grad.iter_mut().for_each(|g| *g /= norm);
        adam.step(&mut model.params, &grad, lr_at(cfg, step));
        if !model.is_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        report.losses.push(loss);
        on_step(step, loss);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Central differences on `count` random parameters against the analytic
/// gradient. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(model: &Model, ex: &TrainExample, eps: f64, count: usize, seed: u64) -> Result<GradCheck> {
    let (_, analytic) = model.loss_and_grad(ex)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut max_rel_error: f64 = 0.0;
    for _ in 0..count {
        let i = rng.random_range(0..model.params.len());
        let orig = probe.params[i];
        probe.params[i] = orig + eps;
        let up = probe.loss(ex)?;
        probe.params[i] = orig - eps;
        let down = probe.loss(ex)?;
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        max_rel_error = max_rel_error.max(rel);
    }
    Ok(GradCheck { max_rel_error, checked: count })
}

/// Fills every position not in `known` with a draw from the model's
/// prediction given the known tokens (one MT pass, channels independent).
pub fn sample_completion(model: &Model, tile: &Tile, known: &[bool], support: Support, rng: &mut impl Rng) -> Result<Tile> {
    let c = model.config.c;
    let n = tile.tokens();
    if n != model.config.tokens() || tile.c != c || known.len() != n {
        return Err(Error::Shape("tile, mask and model disagree on shape".into()));
    }
    let values: Vec<f64> = tile.values.iter().map(|&v| v as f64).collect();
    let slots: Vec<Slot> = (0..n).map(|p| Slot { cell: p, token: known[p].then(|| &values[p * c..(p + 1) * c]) }).collect();
    let params = model.predict(&slots, None, None)?;
    let mut out = tile.clone();
    for p in (0..n).filter(|&p| !known[p]) {
        for (ch, m) in params[p].channels.iter().enumerate() {
            let pmf = BinnedPmf::new(m, support);
            let total: f64 = pmf.probs.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = support.hi;
            for (y, &q) in support.symbols().zip(&pmf.probs) {
                if u < q {
                    pick = y;
                    break;
                }
                u -= q;
            }
            out.values[p * c + ch] = pick as i16;
        }
    }
    Ok(out)
}
