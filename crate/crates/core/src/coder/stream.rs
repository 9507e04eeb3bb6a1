//! Whole-grid coding and the `M2TB` bitstream.
//!
//! ```text
//! magic "M2TB" | version u8
//! h u32 | w u32 | c u32 | w_t u16 | steps u16 | alpha_milli u32 | kind u8 | seed u64
//! lo i16 | hi i16 | tile_count u32 | payload_len u32[tile_count] | payloads
//! ```
//!
//! Little-endian throughout. Tiles are independent: each payload is its own
//! range-coder stream.

use std::time::Instant;

use rayon::prelude::*;

use super::tile::{entropy_static_order, CodedTile, TileCoder, TileSchedule, WorkCounters};
use crate::error::{Error, Result};
use crate::gmm::Support;
use crate::grid::{tile, untile, TileSet, TokenGrid};
use crate::layout::{build_layout, M2tLayout};
use crate::net::{Mode, Model};
use crate::sched::{group_sizes, make_schedule, MaskSchedule, ScheduleKind, ScheduleSpec};

pub const STREAM_MAGIC: [u8; 4] = *b"M2TB";
pub const STREAM_VERSION: u8 = 1;
pub const DEFAULT_PRECISION: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub h: u32,
    pub w: u32,
    pub c: u32,
    pub w_t: u16,
    pub steps: u16,
    pub alpha_milli: u32,
    pub kind: ScheduleKind,
    pub seed: u64,
    pub lo: i16,
    pub hi: i16,
}

impl Header {
    pub fn alpha(&self) -> f64 {
        self.alpha_milli as f64 / 1000.0
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec::new(self.kind, self.steps as usize, self.alpha(), self.seed)
    }

    pub fn support(&self) -> Support {
        Support::new(self.lo as i32, self.hi as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub payloads: Vec<Vec<u8>>,
}

impl Bitstream {
    pub fn payload_bits(&self) -> u64 {
        self.payloads.iter().map(|p| 8 * p.len() as u64).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(48 + self.payloads.iter().map(|p| 4 + p.len()).sum::<usize>());
        out.extend_from_slice(&STREAM_MAGIC);
        out.push(STREAM_VERSION);
        out.extend_from_slice(&h.h.to_le_bytes());
        out.extend_from_slice(&h.w.to_le_bytes());
        out.extend_from_slice(&h.c.to_le_bytes());
        out.extend_from_slice(&h.w_t.to_le_bytes());
        out.extend_from_slice(&h.steps.to_le_bytes());
        out.extend_from_slice(&h.alpha_milli.to_le_bytes());
        out.push(h.kind.code());
        out.extend_from_slice(&h.seed.to_le_bytes());
        out.extend_from_slice(&h.lo.to_le_bytes());
        out.extend_from_slice(&h.hi.to_le_bytes());
        out.extend_from_slice(&(self.payloads.len() as u32).to_le_bytes());
        for p in &self.payloads {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
        }
        for p in &self.payloads {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(at..at + n).ok_or(Error::Truncated("bitstream"))?;
            at += n;
            Ok(s)
        };
        let found: [u8; 4] = take(4)?.try_into().unwrap();
        if found != STREAM_MAGIC {
            return Err(Error::BadMagic { expected: STREAM_MAGIC, found });
        }
        let version = take(1)?[0];
        if version != STREAM_VERSION {
            return Err(Error::BadVersion(version));
        }
        macro_rules! le {
            ($t:ty) => {
                <$t>::from_le_bytes(take(std::mem::size_of::<$t>())?.try_into().unwrap())
            };
        }
        let (h, w, c) = (le!(u32), le!(u32), le!(u32));
        let (w_t, steps, alpha_milli) = (le!(u16), le!(u16), le!(u32));
        let kind = ScheduleKind::from_code(take(1)?[0])?;
        let seed = le!(u64);
        let (lo, hi) = (le!(i16), le!(i16));
        let count = le!(u32) as usize;
        if h == 0 || w == 0 || c == 0 || w_t == 0 || steps == 0 || lo > hi {
            return Err(Error::Corrupt("degenerate header fields".into()));
        }
        let expected = crate::grid::tile_count(h as usize, w as usize, w_t as usize);
        if count != expected {
            return Err(Error::Corrupt(format!("{count} tiles recorded, dims need {expected}")));
        }
        let lens = (0..count).map(|_| Ok(le!(u32) as usize)).collect::<Result<Vec<_>>>()?;
        let payloads = lens.iter().map(|&n| take(n).map(<[u8]>::to_vec)).collect::<Result<Vec<_>>>()?;
        if at != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes after payloads", bytes.len() - at)));
        }
        let header = Header { h, w, c, w_t, steps, alpha_milli, kind, seed, lo, hi };
        Ok(Self { header, payloads })
    }
}

/// Everything that is not in the header but both sides must agree on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecOptions {
    pub path: Mode,
    pub precision: u32,
    pub threads: usize,
}

impl CodecOptions {
    pub fn new(path: Mode) -> Self {
        Self { path, precision: DEFAULT_PRECISION, threads: 1 }
    }
}

/// Schedule as the receiver rebuilds it from header fields.
#[derive(Clone, Debug)]
pub enum ResolvedSchedule {
    Mt(TileSchedule),
    M2t(M2tLayout),
}

pub fn resolve_schedule(model: &Model, spec: ScheduleSpec, support: Support, opts: CodecOptions) -> Result<ResolvedSchedule> {
    let w_t = model.config.w_t;
    let n = model.config.tokens();
    Ok(match opts.path {
        Mode::Mt => ResolvedSchedule::Mt(match spec.kind {
            ScheduleKind::Entropy => TileSchedule::Entropy(group_sizes(spec.steps, spec.alpha, n)?),
            kind => TileSchedule::Fixed(make_schedule(kind, spec.steps, spec.alpha, w_t, spec.seed)?),
        }),
        Mode::M2t => {
            if spec.alpha < 1.0 {
                return Err(Error::Schedule(format!("M2T needs alpha >= 1, got {}", spec.alpha)));
            }
            let schedule = match spec.kind {
                ScheduleKind::Entropy => {
                    let order = entropy_static_order(model, support, opts.precision)?;
                    MaskSchedule::from_order(w_t, &order, group_sizes(spec.steps, spec.alpha, n)?)?
                }
                kind => make_schedule(kind, spec.steps, spec.alpha, w_t, spec.seed)?,
            };
            ResolvedSchedule::M2t(build_layout(&schedule)?)
        }
    })
}

/// Per-run accounting returned alongside the bitstream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodingStats {
    pub tiles: usize,
    pub tokens: usize,
    pub nll_bits: f64,
    pub tile_nll_bits: Vec<f64>,
    pub coded_bits: u64,
    pub tokens_fed: u64,
    pub forward_passes: u64,
    pub seconds: f64,
}

fn run_tiles<T: Send, F>(count: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if threads <= 1 {
        return (0..count).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Model(format!("thread pool: {e}")))?;
    pool.install(|| (0..count).into_par_iter().map(f).collect())
}

fn check_model(model: &Model, c: usize, w_t: usize) -> Result<()> {
    let cfg = &model.config;
    if cfg.c != c || cfg.w_t != w_t {
        return Err(Error::Model(format!("stream has c={c}, w_t={w_t}; model has c={}, w_t={}", cfg.c, cfg.w_t)));
    }
    Ok(())
}

pub fn encode_grid(grid: &TokenGrid, model: &Model, spec: ScheduleSpec, opts: CodecOptions) -> Result<(Bitstream, CodingStats)> {
    let start = Instant::now();
    let w_t = model.config.w_t;
    check_model(model, grid.c(), w_t)?;
    let steps = u16::try_from(spec.steps).map_err(|_| Error::Schedule(format!("{} steps do not fit the header", spec.steps)))?;
    let w_t16 = u16::try_from(w_t).map_err(|_| Error::Shape(format!("w_t {w_t} does not fit the header")))?;
    if !(spec.alpha.is_finite() && spec.alpha > 0.0 && spec.alpha * 1000.0 <= u32::MAX as f64) {
        return Err(Error::Schedule(format!("alpha {} cannot be stored", spec.alpha)));
    }
    let alpha_milli = (spec.alpha * 1000.0).round() as u32;
    let (mut lo, mut hi) = grid.value_range();
    if !grid.h().is_multiple_of(w_t) || !grid.w().is_multiple_of(w_t) {
        // partial tiles are padded with zeros, which must be codable too
        lo = lo.min(0);
        hi = hi.max(0);
    }
    let header = Header {
        h: grid.h() as u32,
        w: grid.w() as u32,
        c: grid.c() as u32,
        w_t: w_t16,
        steps,
        alpha_milli,
        kind: spec.kind,
        seed: spec.seed,
        lo,
        hi,
    };
    // the receiver only sees the rounded alpha
    let support = header.support();
    let resolved = resolve_schedule(model, header.spec(), support, opts)?;
    let tiles = tile(grid, w_t)?;
    let counters = WorkCounters::new();
    let coder = TileCoder { model, support, precision: opts.precision, counters: &counters };
    let coded: Vec<CodedTile> = run_tiles(tiles.tiles.len(), opts.threads, |i| match &resolved {
        ResolvedSchedule::Mt(s) => coder.encode_tile_mt(&tiles.tiles[i], s),
        ResolvedSchedule::M2t(l) => coder.encode_tile_m2t(&tiles.tiles[i], l),
    })?;
    let tile_nll_bits: Vec<f64> = coded.iter().map(|t| t.nll_bits).collect();
    let stream = Bitstream { header, payloads: coded.into_iter().map(|t| t.bytes).collect() };
    let stats = CodingStats {
        tiles: tiles.tiles.len(),
        tokens: grid.len(),
        nll_bits: tile_nll_bits.iter().sum(),
        tile_nll_bits,
        coded_bits: stream.payload_bits(),
        tokens_fed: counters.tokens_fed(),
        forward_passes: counters.forward_passes(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((stream, stats))
}

pub fn decode_grid(stream: &Bitstream, model: &Model, opts: CodecOptions) -> Result<(TokenGrid, CodingStats)> {
    let start = Instant::now();
    let h = &stream.header;
    let (w_t, c) = (h.w_t as usize, h.c as usize);
    check_model(model, c, w_t)?;
    let support = h.support();
    let resolved = resolve_schedule(model, h.spec(), support, opts)?;
    let counters = WorkCounters::new();
    let coder = TileCoder { model, support, precision: opts.precision, counters: &counters };
    let tiles = run_tiles(stream.payloads.len(), opts.threads, |i| match &resolved {
        ResolvedSchedule::Mt(s) => coder.decode_tile_mt(&stream.payloads[i], s),
        ResolvedSchedule::M2t(l) => coder.decode_tile_m2t(&stream.payloads[i], l),
    })?;
    let set = TileSet { w_t, h: h.h as usize, w: h.w as usize, c, tiles };
    let grid = untile(&set)?;
    let stats = CodingStats {
        tiles: set.tiles.len(),
        tokens: grid.len(),
        coded_bits: stream.payload_bits(),
        tokens_fed: counters.tokens_fed(),
        forward_passes: counters.forward_passes(),
        seconds: start.elapsed().as_secs_f64(),
        ..Default::default()
    };
    Ok((grid, stats))
}
