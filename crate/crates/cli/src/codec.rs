use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Result};
use clap::Args;
use m2t::{decode_grid, encode_grid, Bitstream, Mode, Model, RunReport, ScheduleKind, ScheduleSpec, TokenGrid};

use crate::{output, parse_list, CodecFlags, ScheduleOpts};

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Grid file.
    #[arg(long)]
    input: PathBuf,
    /// Bitstream file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sched: ScheduleOpts,
    #[command(flatten)]
    codec: CodecFlags,
}

pub fn encode(a: EncodeArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let grid = TokenGrid::read(&a.input)?;
    let opts = a.codec.options(&model);
    let (stream, stats) = encode_grid(&grid, &model, a.sched.spec(), opts)?;
    std::fs::write(&a.out, stream.to_bytes())?;
    let mut r = RunReport::new(opts.path, a.sched.kind, a.sched.steps, a.sched.alpha);
    r.add_encode(&stats);
    eprintln!(
        "{} tokens in {} tiles: {:.4} bits/token, nll {:.1} bits, coded {} bits",
        r.tokens,
        r.tiles,
        r.bits_per_token(),
        r.nll_bits,
        r.coded_bits
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Bitstream file.
    #[arg(long)]
    input: PathBuf,
    /// Grid file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    codec: CodecFlags,
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let stream = Bitstream::from_bytes(&std::fs::read(&a.input)?)?;
    let (grid, _) = decode_grid(&stream, &model, a.codec.options(&model))?;
    grid.write(&a.out)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    /// Grid files to average over.
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "1,1.5,2.2,3")]
    alphas: String,
    #[arg(long, default_value = "4,8,12")]
    steps: String,
    #[arg(long, default_value = "random,entropy,qlds")]
    kinds: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also decode and check every grid.
    #[arg(long)]
    verify: bool,
    #[command(flatten)]
    codec: CodecFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One row per (alpha, S, kind). Wall times are left out so the table
/// depends on the inputs and seeds only.
pub fn sweep(a: SweepArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let grids = a.inputs.iter().map(TokenGrid::read).collect::<m2t::Result<Vec<_>>>()?;
    let alphas = parse_list::<f64>(&a.alphas)?;
    let steps = parse_list::<usize>(&a.steps)?;
    let kinds = parse_list::<ScheduleKind>(&a.kinds)?;
    let opts = a.codec.options(&model);
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "{}", RunReport::RATE_HEADER)?;
    for &alpha in &alphas {
        for &s in &steps {
            for &kind in &kinds {
                let spec = ScheduleSpec::new(kind, s, alpha, a.seed);
                let mut r = RunReport::new(opts.path, kind, s, alpha);
                for g in &grids {
                    let (stream, stats) = encode_grid(g, &model, spec, opts)?;
                    r.add_encode(&stats);
                    if a.verify && decode_grid(&stream, &model, opts)?.0 != *g {
                        bail!(m2t::Error::Corrupt(format!("{kind} S={s} alpha={alpha} did not round-trip")));
                    }
                }
                writeln!(out, "{}", r.rate_row())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "1,2,4,8,12")]
    steps: String,
    #[arg(long, default_value = "qlds")]
    kind: ScheduleKind,
    #[arg(long, default_value_t = 2.2)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Decodes per configuration; the fastest is reported.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = m2t::coder::DEFAULT_PRECISION)]
    precision: u32,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let grid = TokenGrid::read(&a.input)?;
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "{}", RunReport::CSV_HEADER)?;
    for s in parse_list::<usize>(&a.steps)? {
        for path in [Mode::Mt, Mode::M2t] {
            if path == Mode::M2t && a.alpha < 1.0 {
                continue;
            }
            let opts = m2t::CodecOptions { path, precision: a.precision, threads: a.threads.max(1) };
            let spec = ScheduleSpec::new(a.kind, s, a.alpha, a.seed);
            let (stream, enc) = encode_grid(&grid, &model, spec, opts)?;
            let mut r = RunReport::new(path, a.kind, s, a.alpha);
            r.add_encode(&enc);
            let mut best = f64::INFINITY;
            for _ in 0..a.repeats.max(1) {
                let t = Instant::now();
                let (back, _) = decode_grid(&stream, &model, opts)?;
                best = best.min(t.elapsed().as_secs_f64());
                if back != grid {
                    bail!(m2t::Error::Corrupt(format!("{path} S={s} did not round-trip")));
                }
            }
            r.decode_secs = best;
            writeln!(out, "{}", r.csv_row())?;
        }
    }
    out.flush()?;
    Ok(())
}
