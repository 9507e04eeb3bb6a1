//! Recorded forward pass and reverse-mode gradients for training.

use std::f64::consts::LN_2;

use super::{head_mixture, ops, AttnMask, Model, Slot};
use crate::error::{Error, Result};
use crate::gmm::{bin_pmf_grad, SIGMA_MAX, SIGMA_MIN};

/// An output slot and the (possibly noisy) channel values it must predict.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub slot: usize,
    pub values: Vec<f64>,
}

/// One training sequence: input slots, optional attention mask, targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    /// `(cell, token)` per input slot; `None` is the mask vector.
    pub slots: Vec<(usize, Option<Vec<f64>>)>,
    pub mask: Option<AttnMask>,
    pub targets: Vec<Target>,
}

impl TrainExample {
    pub fn slot_refs(&self) -> Vec<Slot<'_>> {
        self.slots.iter().map(|(cell, t)| Slot { cell: *cell, token: t.as_deref() }).collect()
    }
}

pub type Gradients = Vec<f64>;

struct LayerTape {
    x_in: Vec<f64>,
    ln1: Vec<(f64, f64)>,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights per `(query, head)`, aligned with the key list.
    probs: Vec<Vec<f64>>,
    attn: Vec<f64>,
    x_mid: Vec<f64>,
    ln2: Vec<(f64, f64)>,
    h2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Everything the backward pass needs from a forward run.
pub struct Tape {
    n: usize,
    keys: Vec<Vec<usize>>,
    layers: Vec<LayerTape>,
    x_last: Vec<f64>,
    lnf: Vec<(f64, f64)>,
    hf: Vec<f64>,
    pub raw: Vec<f64>,
}

impl Model {
    pub fn forward_tape(&self, slots: &[Slot], mask: Option<&AttnMask>) -> Result<Tape> {
        let cfg = &self.config;
        let (d, hm, dk) = (cfg.width, cfg.mlp_hidden, cfg.head_width());
        let n = slots.len();
        if let Some(m) = mask {
            if m.rows() != n || m.cols() != n {
                return Err(Error::Shape(format!("mask is {}x{}, expected {n}x{n}", m.rows(), m.cols())));
            }
        }
        let keys: Vec<Vec<usize>> = (0..n).map(|i| mask.map_or_else(|| (0..n).collect(), |m| m.keys(i))).collect();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut x = self.embed(slots)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for ls in &self.layout.layers {
            let x_in = x.clone();
            let mut t = LayerTape {
                x_in,
                ln1: Vec::with_capacity(n),
                h1: vec![0.0; n * d],
                q: vec![0.0; n * d],
                k: vec![0.0; n * d],
                v: vec![0.0; n * d],
                probs: Vec::with_capacity(n * cfg.heads),
                attn: vec![0.0; n * d],
                x_mid: vec![0.0; n * d],
                ln2: Vec::with_capacity(n),
                h2: vec![0.0; n * d],
                u: vec![0.0; n * hm],
                g: vec![0.0; n * hm],
            };
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                let st = ops::layer_norm(&x[r.clone()], self.param(&ls.ln1_g), self.param(&ls.ln1_b), &mut t.h1[r.clone()]);
                t.ln1.push(st);
                ops::linear(&t.h1[r.clone()], self.param(&ls.wq), self.param(&ls.bq), &mut t.q[r.clone()]);
                ops::linear(&t.h1[r.clone()], self.param(&ls.wk), self.param(&ls.bk), &mut t.k[r.clone()]);
                ops::linear(&t.h1[r.clone()], self.param(&ls.wv), self.param(&ls.bv), &mut t.v[r]);
            }
            let mut proj = vec![0.0; d];
            for i in 0..n {
                for head in 0..cfg.heads {
                    let off = head * dk;
                    let mut p = Vec::new();
                    ops::attend(
                        &t.q[i * d + off..i * d + off + dk],
                        &keys[i],
                        &t.k,
                        &t.v,
                        d,
                        off,
                        scale,
                        &mut p,
                        &mut t.attn[i * d + off..i * d + off + dk],
                    );
                    t.probs.push(p);
                }
                let r = i * d..(i + 1) * d;
                ops::linear(&t.attn[r.clone()], self.param(&ls.wo), self.param(&ls.bo), &mut proj);
                for j in 0..d {
                    x[i * d + j] += proj[j];
                }
                t.x_mid[r.clone()].copy_from_slice(&x[r.clone()]);
                let st = ops::layer_norm(&x[r.clone()], self.param(&ls.ln2_g), self.param(&ls.ln2_b), &mut t.h2[r.clone()]);
                t.ln2.push(st);
                let ur = i * hm..(i + 1) * hm;
                ops::linear(&t.h2[r.clone()], self.param(&ls.w1), self.param(&ls.b1), &mut t.u[ur.clone()]);
                for j in ur.clone() {
                    t.g[j] = ops::gelu(t.u[j]);
                }
                ops::linear(&t.g[ur], self.param(&ls.w2), self.param(&ls.b2), &mut proj);
                for j in 0..d {
                    x[i * d + j] += proj[j];
                }
            }
            layers.push(t);
        }
        let hd = cfg.head_dim();
        let mut hf = vec![0.0; n * d];
        let mut raw = vec![0.0; n * hd];
        let mut lnf = Vec::with_capacity(n);
        for i in 0..n {
            let r = i * d..(i + 1) * d;
            lnf.push(ops::layer_norm(&x[r.clone()], self.param(&self.layout.lnf_g), self.param(&self.layout.lnf_b), &mut hf[r.clone()]));
            ops::linear(&hf[r], self.param(&self.layout.head_w), self.param(&self.layout.head_b), &mut raw[i * hd..(i + 1) * hd]);
        }
        Ok(Tape { n, keys, layers, x_last: x, lnf, hf, raw })
    }

    /// Parameter gradients given the gradient of the loss with respect to the
    /// raw head outputs.
    pub fn backward(&self, tape: &Tape, slots: &[Slot], d_raw: &[f64]) -> Gradients {
        let cfg = &self.config;
        let lay = &self.layout;
        let (d, hm, dk, hd) = (cfg.width, cfg.mlp_hidden, cfg.head_width(), cfg.head_dim());
        let n = tape.n;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut grad = vec![0.0; self.params.len()];

        // head and final norm
        let mut dx = vec![0.0; n * d];
        let mut dh = vec![0.0; d];
        for i in 0..n {
            dh.fill(0.0);
            {
                let (gw, gb) = split_two(&mut grad, &lay.head_w, &lay.head_b);
                ops::linear_back(&tape.hf[i * d..(i + 1) * d], self.param(&lay.head_w), &d_raw[i * hd..(i + 1) * hd], &mut dh, gw, gb);
            }
            let (gg, gb) = split_two(&mut grad, &lay.lnf_g, &lay.lnf_b);
            let (m, r) = tape.lnf[i];
            ops::layer_norm_back(&tape.x_last[i * d..(i + 1) * d], m, r, self.param(&lay.lnf_g), &dh, &mut dx[i * d..(i + 1) * d], gg, gb);
        }

        for (ls, t) in lay.layers.iter().zip(&tape.layers).rev() {
            // MLP branch: x_out = x_mid + W2 gelu(W1 ln2(x_mid))
            let mut dx_mid = dx.clone();
            let mut dg = vec![0.0; hm];
            let mut dh2 = vec![0.0; d];
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                let ur = i * hm..(i + 1) * hm;
                dg.fill(0.0);
                {
                    let (gw, gb) = split_two(&mut grad, &ls.w2, &ls.b2);
                    ops::linear_back(&t.g[ur.clone()], self.param(&ls.w2), &dx[r.clone()], &mut dg, gw, gb);
                }
                for (j, du) in dg.iter_mut().enumerate() {
                    *du *= ops::gelu_grad(t.u[i * hm + j]);
                }
                dh2.fill(0.0);
                {
                    let (gw, gb) = split_two(&mut grad, &ls.w1, &ls.b1);
                    ops::linear_back(&t.h2[r.clone()], self.param(&ls.w1), &dg, &mut dh2, gw, gb);
                }
                let (gg, gb) = split_two(&mut grad, &ls.ln2_g, &ls.ln2_b);
                let (m, rs) = t.ln2[i];
                ops::layer_norm_back(&t.x_mid[r.clone()], m, rs, self.param(&ls.ln2_g), &dh2, &mut dx_mid[r], gg, gb);
            }

            // attention branch: x_mid = x_in + Wo attn(ln1(x_in))
            let mut da = vec![0.0; n * d];
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                let (gw, gb) = split_two(&mut grad, &ls.wo, &ls.bo);
                ops::linear_back(&t.attn[r.clone()], self.param(&ls.wo), &dx_mid[r.clone()], &mut da[r], gw, gb);
            }
            let (mut dq, mut dkk, mut dv) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]);
            let mut dp = Vec::new();
            for i in 0..n {
                for head in 0..cfg.heads {
                    let off = head * dk;
                    let probs = &t.probs[i * cfg.heads + head];
                    let keys = &tape.keys[i];
                    let dout = &da[i * d + off..i * d + off + dk];
                    dp.clear();
                    for (&j, &p) in keys.iter().zip(probs) {
                        let v = &t.v[j * d + off..j * d + off + dk];
                        dp.push(dout.iter().zip(v).map(|(a, b)| a * b).sum::<f64>());
                        for s in 0..dk {
                            dv[j * d + off + s] += p * dout[s];
                        }
                    }
                    let dot: f64 = probs.iter().zip(&dp).map(|(p, g)| p * g).sum();
                    for ((&j, &p), &g) in keys.iter().zip(probs).zip(&dp) {
                        let ds = p * (g - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for s in 0..dk {
                            dq[i * d + off + s] += ds * t.k[j * d + off + s];
                            dkk[j * d + off + s] += ds * t.q[i * d + off + s];
                        }
                    }
                }
            }
            let mut dx_in = dx_mid.clone();
            let mut dh1 = vec![0.0; d];
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                dh1.fill(0.0);
                for (w, b, dy) in [(&ls.wq, &ls.bq, &dq), (&ls.wk, &ls.bk, &dkk), (&ls.wv, &ls.bv, &dv)] {
                    let (gw, gb) = split_two(&mut grad, w, b);
                    ops::linear_back(&t.h1[r.clone()], self.param(w), &dy[r.clone()], &mut dh1, gw, gb);
                }
                let (gg, gb) = split_two(&mut grad, &ls.ln1_g, &ls.ln1_b);
                let (m, rs) = t.ln1[i];
                ops::layer_norm_back(&t.x_in[r.clone()], m, rs, self.param(&ls.ln1_g), &dh1, &mut dx_in[r], gg, gb);
            }
            dx = dx_in;
        }

        // embedding
        let mut scaled = vec![0.0; cfg.c];
        let mut sink = vec![0.0; cfg.c];
        for (i, s) in slots.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            let pos = lay.pos.start + s.cell * d;
            for j in 0..d {
                grad[pos + j] += row[j];
            }
            match s.token {
                Some(tok) => {
                    for (o, v) in scaled.iter_mut().zip(tok) {
                        *o = v / cfg.delta;
                    }
                    let (gw, gb) = split_two(&mut grad, &lay.embed_w, &lay.embed_b);
                    ops::linear_back(&scaled, self.param(&lay.embed_w), row, &mut sink, gw, gb);
                }
                None => {
                    for j in 0..d {
                        grad[lay.mask_token.start + j] += row[j];
                    }
                }
            }
        }
        grad
    }

    /// Summed NLL in bits of the example's targets and its parameter gradient.
    pub fn loss_and_grad(&self, ex: &TrainExample) -> Result<(f64, Gradients)> {
        let slots = ex.slot_refs();
        let tape = self.forward_tape(&slots, ex.mask.as_ref())?;
        let (loss, d_raw) = self.head_loss(&tape.raw, &ex.targets)?;
        Ok((loss, self.backward(&tape, &slots, &d_raw)))
    }

    /// Loss only, through the same recorded path.
    pub fn loss(&self, ex: &TrainExample) -> Result<f64> {
        let slots = ex.slot_refs();
        let tape = self.forward_tape(&slots, ex.mask.as_ref())?;
        Ok(self.head_loss(&tape.raw, &ex.targets)?.0)
    }

    /// `-log2 P` of every target channel and its gradient wrt the raw outputs.
    pub fn head_loss(&self, raw: &[f64], targets: &[Target]) -> Result<(f64, Vec<f64>)> {
        let cfg = &self.config;
        let (hd, k) = (cfg.head_dim(), cfg.n_mix);
        let mut d_raw = vec![0.0; raw.len()];
        let mut loss = 0.0;
        for t in targets {
            if t.values.len() != cfg.c || (t.slot + 1) * hd > raw.len() {
                return Err(Error::Shape(format!("target for slot {} does not fit the output", t.slot)));
            }
            for (ch, &y) in t.values.iter().enumerate() {
                let at = t.slot * hd + ch * 3 * k;
                let block = &raw[at..at + 3 * k];
                let mix = head_mixture(block, k);
                let g = bin_pmf_grad(&mix, y);
                let p = g.p.max(f64::MIN_POSITIVE);
                loss -= p.log2();
                let dl_dp = -1.0 / (p * LN_2);
                let out = &mut d_raw[at..at + 3 * k];
                for j in 0..k {
                    out[j] = dl_dp * g.d_mu[j];
                    let unclamped = SIGMA_MIN + ops::softplus(block[k + j]) < SIGMA_MAX;
                    out[k + j] = if unclamped { dl_dp * g.d_sigma[j] * ops::sigmoid(block[k + j]) } else { 0.0 };
                }
                let dw: Vec<f64> = g.d_weight.iter().map(|v| dl_dp * v).collect();
                let avg: f64 = mix.weight.iter().zip(&dw).map(|(w, g)| w * g).sum();
                for j in 0..k {
                    out[2 * k + j] = mix.weight[j] * (dw[j] - avg);
                }
            }
        }
        Ok((loss, d_raw))
    }
}

/// Two disjoint mutable views into the gradient vector.
fn split_two<'a>(g: &'a mut [f64], a: &std::ops::Range<usize>, b: &std::ops::Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start || b.end <= a.start);
    if a.end <= b.start {
        let (left, right) = g.split_at_mut(b.start);
        (&mut left[a.clone()], &mut right[..b.len()])
    } else {
        let (left, right) = g.split_at_mut(a.start);
        (&mut right[..a.len()], &mut left[b.clone()])
    }
}
