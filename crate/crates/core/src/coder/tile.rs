//! Per-tile senders and receivers.
//!
//! MT runs the full-length masked encoder once per schedule step, codes the
//! tokens of that step's group and uncovers them at the input. M2T codes the
//! same groups but the sender needs a single block-causal forward pass and
//! the receiver feeds one input group per step through a key/value cache.

use std::sync::atomic::{AtomicU64, Ordering};

use super::rc::{RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::gmm::{bin_pmf, quantized_entropy, token_tables, FreqTable, Support, TokenGmm};
use crate::grid::Tile;
use crate::layout::{InputSlot, M2tLayout};
use crate::net::{AttnMask, Model, Slot};
use crate::sched::{lowest_entropy, GroupSizes, MaskSchedule};

/// Instrumentation shared by concurrent tile workers.
#[derive(Debug, Default)]
pub struct WorkCounters {
    tokens_fed: AtomicU64,
    forward_passes: AtomicU64,
}

impl WorkCounters {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, tokens: usize) {
        self.tokens_fed.fetch_add(tokens as u64, Ordering::Relaxed);
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
    }

    /// Input slots pushed through the transformer so far.
    pub fn tokens_fed(&self) -> u64 {
        self.tokens_fed.load(Ordering::Relaxed)
    }

    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }
}

/// Location rule for one tile: a fixed schedule, or lowest-entropy picks
/// with the given group sizes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TileSchedule {
    Fixed(MaskSchedule),
    Entropy(GroupSizes),
}

impl TileSchedule {
    pub fn sizes(&self) -> &GroupSizes {
        match self {
            TileSchedule::Fixed(s) => &s.sizes,
            TileSchedule::Entropy(g) => g,
        }
    }
}

/// Shared per-grid coding settings.
#[derive(Clone, Copy, Debug)]
pub struct TileCoder<'a> {
    pub model: &'a Model,
    pub support: Support,
    pub precision: u32,
    pub counters: &'a WorkCounters,
}

/// A coded tile plus the model's own cost for it.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedTile {
    pub bytes: Vec<u8>,
    pub nll_bits: f64,
}

impl TileCoder<'_> {
    fn check(&self, tile_tokens: usize, c: usize) -> Result<()> {
        let cfg = &self.model.config;
        if tile_tokens != cfg.tokens() || c != cfg.c {
            return Err(Error::Model(format!("tile of {tile_tokens} tokens x {c} channels, model expects {} x {}", cfg.tokens(), cfg.c)));
        }
        Ok(())
    }

    fn tables(&self, params: &TokenGmm) -> Result<Vec<FreqTable>> {
        token_tables(params, self.support, self.precision)
    }

    fn encode_token(&self, enc: &mut RangeEncoder, tables: &[FreqTable], params: &TokenGmm, token: &[i16]) -> Result<f64> {
        let mut bits = 0.0;
        for ((t, m), &y) in tables.iter().zip(&params.channels).zip(token) {
            let y = y as i32;
            if !self.support.contains(y) {
                return Err(Error::SymbolOutOfSupport { symbol: y as i64, lo: self.support.lo as i64, hi: self.support.hi as i64 });
            }
            enc.encode(y, t)?;
            bits -= bin_pmf(m, y as f64).log2();
        }
        Ok(bits)
    }

    fn decode_token(&self, dec: &mut RangeDecoder, tables: &[FreqTable], out: &mut [i16]) -> Result<()> {
        for (t, o) in tables.iter().zip(out.iter_mut()) {
            *o = dec.decode(t)? as i16;
        }
        Ok(())
    }

    /// One MT pass over the whole tile with `known` positions visible.
    fn mt_pass(&self, values: &[f64], known: &[bool]) -> Result<Vec<TokenGmm>> {
        let c = self.model.config.c;
        let slots: Vec<Slot> = (0..known.len()).map(|p| Slot { cell: p, token: known[p].then(|| &values[p * c..(p + 1) * c]) }).collect();
        self.counters.record(slots.len());
        self.model.predict(&slots, None, None)
    }

    /// The positions coded at `step` with their tables. The entropy rule
    /// needs tables for every remaining position and reuses the chosen ones.
    fn mt_group(
        &self,
        schedule: &TileSchedule,
        step: usize,
        params: &[TokenGmm],
        remaining: &[usize],
    ) -> Result<Vec<(usize, Vec<FreqTable>)>> {
        match schedule {
            TileSchedule::Fixed(s) => s.groups[step].iter().map(|&p| Ok((p, self.tables(&params[p])?))).collect(),
            TileSchedule::Entropy(sizes) => {
                let mut tables = remaining.iter().map(|&p| self.tables(&params[p])).collect::<Result<Vec<_>>>()?;
                let scored = remaining.iter().zip(&tables).map(|(&p, t)| (p, quantized_entropy(t))).collect();
                let picked = lowest_entropy(scored, sizes.sizes[step]);
                Ok(picked
                    .into_iter()
                    .map(|p| {
                        let i = remaining.binary_search(&p).expect("picked from remaining");
                        (p, std::mem::take(&mut tables[i]))
                    })
                    .collect())
            }
        }
    }

    pub fn encode_tile_mt(&self, tile: &Tile, schedule: &TileSchedule) -> Result<CodedTile> {
        let n = tile.tokens();
        self.check(n, tile.c)?;
        let values: Vec<f64> = tile.values.iter().map(|&v| v as f64).collect();
        let mut known = vec![false; n];
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut enc = RangeEncoder::new();
        let mut nll_bits = 0.0;
        for step in 0..schedule.sizes().steps() {
            let params = self.mt_pass(&values, &known)?;
            for (p, tables) in self.mt_group(schedule, step, &params, &remaining)? {
                nll_bits += self.encode_token(&mut enc, &tables, &params[p], tile.token(p))?;
                known[p] = true;
            }
            remaining.retain(|&p| !known[p]);
        }
        Ok(CodedTile { bytes: enc.finish(), nll_bits })
    }

    pub fn decode_tile_mt(&self, bytes: &[u8], schedule: &TileSchedule) -> Result<Tile> {
        let cfg = &self.model.config;
        let (n, c) = (cfg.tokens(), cfg.c);
        let mut out = vec![0i16; n * c];
        let mut values = vec![0.0; n * c];
        let mut known = vec![false; n];
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut dec = RangeDecoder::new(bytes);
        for step in 0..schedule.sizes().steps() {
            let params = self.mt_pass(&values, &known)?;
            for (p, tables) in self.mt_group(schedule, step, &params, &remaining)? {
                self.decode_token(&mut dec, &tables, &mut out[p * c..(p + 1) * c])?;
                for ch in 0..c {
                    values[p * c + ch] = out[p * c + ch] as f64;
                }
                known[p] = true;
            }
            remaining.retain(|&p| !known[p]);
        }
        dec.finish()?;
        Tile::new(cfg.w_t, c, out)
    }

    /// Sender: one teacher-forced pass under the block-causal mask.
    pub fn encode_tile_m2t(&self, tile: &Tile, layout: &M2tLayout) -> Result<CodedTile> {
        let n = tile.tokens();
        self.check(n, tile.c)?;
        let params = m2t_params(self.model, tile, layout)?;
        self.counters.record(n);
        let mut enc = RangeEncoder::new();
        let mut nll_bits = 0.0;
        for (&p, prm) in layout.target_perm.iter().zip(&params) {
            nll_bits += self.encode_token(&mut enc, &self.tables(prm)?, prm, tile.token(p))?;
        }
        Ok(CodedTile { bytes: enc.finish(), nll_bits })
    }

    /// Receiver: feeds one input group per step, reusing cached keys/values.
    pub fn decode_tile_m2t(&self, bytes: &[u8], layout: &M2tLayout) -> Result<Tile> {
        let cfg = &self.model.config;
        let (n, c) = (cfg.tokens(), cfg.c);
        let mut out = vec![0i16; n * c];
        let mut dec = RangeDecoder::new(bytes);
        let mut cache = self.model.cache();
        let mut feed = Vec::new();
        for g in 0..layout.steps() {
            let range = layout.group(g);
            feed.clear();
            for s in &layout.input_slots[range.clone()] {
                feed.push(match *s {
                    InputSlot::Token(p) => (p, Some(out[p * c..(p + 1) * c].iter().map(|&v| v as f64).collect::<Vec<_>>())),
                    InputSlot::Pad { predicts } => (predicts, None),
                });
            }
            let slots: Vec<Slot> = feed.iter().map(|(cell, t)| Slot { cell: *cell, token: t.as_deref() }).collect();
            self.counters.record(slots.len());
            let params = self.model.predict(&slots, None, Some(&mut cache))?;
            for (prm, &p) in params.iter().zip(&layout.target_perm[range]) {
                self.decode_token(&mut dec, &self.tables(prm)?, &mut out[p * c..(p + 1) * c])?;
            }
        }
        dec.finish()?;
        Tile::new(cfg.w_t, c, out)
    }
}

/// All output-slot parameters of the M2T layout in one masked pass.
pub fn m2t_params(model: &Model, tile: &Tile, layout: &M2tLayout) -> Result<Vec<TokenGmm>> {
    let c = tile.c;
    let values: Vec<f64> = tile.values.iter().map(|&v| v as f64).collect();
    let slots: Vec<Slot> = layout
        .input_slots
        .iter()
        .map(|s| match *s {
            InputSlot::Token(p) => Slot { cell: p, token: Some(&values[p * c..(p + 1) * c]) },
            InputSlot::Pad { predicts } => Slot { cell: predicts, token: None },
        })
        .collect();
    model.predict(&slots, Some(&layout.attn_mask), None)
}

/// M2T parameters computed group by group through the cache, as the
/// receiver sees them (ground-truth tokens fed as context).
pub fn m2t_params_cached(model: &Model, tile: &Tile, layout: &M2tLayout) -> Result<Vec<TokenGmm>> {
    let c = tile.c;
    let values: Vec<f64> = tile.values.iter().map(|&v| v as f64).collect();
    let mut cache = model.cache();
    let mut out = Vec::with_capacity(tile.tokens());
    for g in 0..layout.steps() {
        let slots: Vec<Slot> = layout.input_slots[layout.group(g)]
            .iter()
            .map(|s| match *s {
                InputSlot::Token(p) => Slot { cell: p, token: Some(&values[p * c..(p + 1) * c]) },
                InputSlot::Pad { predicts } => Slot { cell: predicts, token: None },
            })
            .collect();
        let total = cache.len() + slots.len();
        out.extend(model.predict(&slots, Some(&AttnMask::full(slots.len(), total)), Some(&mut cache))?);
    }
    Ok(out)
}

/// Static entropy order for M2T: positions sorted by the entropy of the
/// coding tables of the all-mask prediction, which depends on the model alone.
pub fn entropy_static_order(model: &Model, support: Support, precision: u32) -> Result<Vec<usize>> {
    let n = model.config.tokens();
    let slots: Vec<Slot> = (0..n).map(|p| Slot { cell: p, token: None }).collect();
    let params = model.predict(&slots, None, None)?;
    let scored = params
        .iter()
        .enumerate()
        .map(|(p, t)| Ok((p, quantized_entropy(&token_tables(t, support, precision)?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(lowest_entropy(scored, n))
}
