use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use m2t::grid::tile;
use m2t::net::{sample_completion, Slot};
use m2t::sched::entropy_next_mask;
use m2t::{make_schedule, GaussMarkov, Mode, Model, ModelConfig, ScheduleKind, Support, TokenGrid, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{output, ScheduleOpts};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Inference path the model is trained for.
    #[arg(long, default_value = "mt")]
    mode: Mode,
    /// Channels per token.
    #[arg(long, default_value_t = 2)]
    c: usize,
    #[arg(long = "w-t", visible_alias = "w_T", default_value_t = 8)]
    w_t: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    mlp_hidden: usize,
    /// Mixture components per channel.
    #[arg(long, default_value_t = 3)]
    mix: usize,
    /// Input scale of the token embedding.
    #[arg(long, default_value_t = 5.0)]
    delta: f64,
    /// Optimizer steps.
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    /// Standard deviation of the synthetic source.
    #[arg(long, default_value_t = 4.0)]
    std: f64,
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
    /// Schedule an M2T model is trained with.
    #[command(flatten)]
    sched: ScheduleOpts,
    /// Write the loss per step as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = ModelConfig {
        layers: a.layers,
        width: a.width,
        mlp_hidden: a.mlp_hidden,
        heads: a.heads,
        c: a.c,
        n_mix: a.mix,
        w_t: a.w_t,
        delta: a.delta,
        mode: a.mode,
    };
    let mut model = Model::init(cfg, a.train_seed)?;
    let mut source = GaussMarkov::new(a.w_t, a.c, a.std, a.train_seed.wrapping_add(1)).with_rho(a.rho);
    let tc = TrainConfig {
        steps: a.iters,
        batch: a.batch,
        lr: a.lr,
        warmup: a.warmup.min(a.iters),
        seed: a.train_seed,
        schedule: a.sched.spec(),
        ..Default::default()
    };
    let mut log = match &a.log {
        Some(p) => {
            let mut w = output(Some(p))?;
            writeln!(w, "step,loss")?;
            Some(w)
        }
        None => None,
    };
    let every = (a.iters / 20).max(1);
    let mut io_err = None;
    let report = m2t::net::train(&mut model, &mut source, &tc, |step, loss| {
        if let Some(w) = log.as_mut() {
            if let Err(e) = writeln!(w, "{step},{loss:.6}") {
                io_err.get_or_insert(e);
            }
        }
        if step % every == 0 || step + 1 == a.iters {
            eprintln!("step {step:>6}  loss {loss:.4}");
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing the training log");
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    model.save(&a.out)?;
    if !report.losses.is_empty() {
        let tail = report.losses.len().saturating_sub(report.losses.len() / 10).min(report.losses.len() - 1);
        eprintln!("final mean loss {:.4} bits per slot", report.mean(tail..report.losses.len()));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Grid file to take the tile from.
    #[arg(long)]
    input: PathBuf,
    /// Tile index in row-major tile order.
    #[arg(long, default_value_t = 0)]
    tile: usize,
    #[command(flatten)]
    sched: ScheduleOpts,
    /// Draws averaged per step.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// For every step, the mean of `samples` completions of the tokens not yet
/// transmitted; transmitted tokens are reported as they are.
pub fn sample(a: SampleArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let grid = TokenGrid::read(&a.input)?;
    let w_t = model.config.w_t;
    let set = tile(&grid, w_t)?;
    let Some(t) = set.tiles.get(a.tile) else {
        bail!(m2t::Error::Shape(format!("tile {} of {}", a.tile, set.tiles.len())));
    };
    if a.samples == 0 {
        bail!(m2t::Error::Shape("need at least one sample".into()));
    }
    let (lo, hi) = grid.value_range();
    let support = Support::new(lo.min(0) as i32, hi.max(0) as i32);
    let (n, c) = (t.tokens(), t.c);
    let fixed = match a.sched.kind {
        ScheduleKind::Entropy => None,
        kind => Some(make_schedule(kind, a.sched.steps, a.sched.alpha, w_t, a.sched.seed)?),
    };
    let sizes = m2t::group_sizes(a.sched.steps, a.sched.alpha, n)?;
    let values: Vec<f64> = t.values.iter().map(|&v| v as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(a.sample_seed);
    let mut known = vec![false; n];
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "step,position,channel,known,mean")?;
    for step in 0..=sizes.steps() {
        let mut sum = vec![0.0; n * c];
        for _ in 0..a.samples {
            let s = sample_completion(&model, t, &known, support, &mut rng)?;
            for (acc, v) in sum.iter_mut().zip(&s.values) {
                *acc += *v as f64;
            }
        }
        for p in 0..n {
            for ch in 0..c {
                let mean = sum[p * c + ch] / a.samples as f64;
                writeln!(out, "{step},{p},{ch},{},{mean:.4}", known[p] as u8)?;
            }
        }
        if step == sizes.steps() {
            break;
        }
        let group = match &fixed {
            Some(s) => s.groups[step].clone(),
            None => {
                let slots: Vec<Slot> = (0..n).map(|p| Slot { cell: p, token: known[p].then(|| &values[p * c..(p + 1) * c]) }).collect();
                let params = model.predict(&slots, None, None)?;
                let remaining: Vec<usize> = (0..n).filter(|&p| !known[p]).collect();
                entropy_next_mask(&params, &remaining, sizes.sizes[step], support, m2t::coder::DEFAULT_PRECISION)?
            }
        };
        for p in group {
            known[p] = true;
        }
    }
    out.flush()?;
    Ok(())
}
