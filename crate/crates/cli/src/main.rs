use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use m2t::{Mode, ScheduleKind, ScheduleSpec};

mod codec;
mod inspect;
mod model;

#[derive(Parser, Debug)]
#[command(name = "m2t", version, about = "Lossless token-grid coding with masked-transformer entropy models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print a masking schedule and its cumulative uncover curve as CSV.
    Schedule(inspect::ScheduleArgs),
    /// Print the quantized low-discrepancy order, or coverage maps.
    Qlds(inspect::QldsArgs),
    /// Print the M2T slot table, or the attention mask.
    Layout(inspect::LayoutArgs),
    /// Write a synthetic Gauss-Markov grid.
    Gen(inspect::GenArgs),
    /// Train a toy model on synthetic tiles.
    Train(model::TrainArgs),
    /// Fill in non-transmitted tokens after each step, averaged over draws.
    Sample(model::SampleArgs),
    /// Compress a grid file.
    Encode(codec::EncodeArgs),
    /// Decompress a bitstream.
    Decode(codec::DecodeArgs),
    /// Rate of one model under many schedules.
    Sweep(codec::SweepArgs),
    /// Decode time and work counters of MT against M2T.
    Bench(codec::BenchArgs),
}

/// Schedule flags shared by several subcommands.
#[derive(Args, Debug, Clone)]
pub struct ScheduleOpts {
    /// Location rule.
    #[arg(long, default_value = "qlds")]
    pub kind: ScheduleKind,
    /// Number of coding steps S.
    #[arg(long, default_value_t = 12)]
    pub steps: usize,
    /// Power of the group-size schedule.
    #[arg(long, default_value_t = 2.2)]
    pub alpha: f64,
    /// Seed of the random location rule.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ScheduleOpts {
    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec::new(self.kind, self.steps, self.alpha, self.seed)
    }
}

/// Settings that are not stored in the bitstream.
#[derive(Args, Debug, Clone)]
pub struct CodecFlags {
    /// Inference path; defaults to the one the model was trained for.
    #[arg(long)]
    pub path: Option<Mode>,
    /// Bits of the range coder's frequency tables.
    #[arg(long, default_value_t = m2t::coder::DEFAULT_PRECISION)]
    pub precision: u32,
    /// Worker threads for independent tiles.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

impl CodecFlags {
    pub fn options(&self, model: &m2t::Model) -> m2t::CodecOptions {
        m2t::CodecOptions { path: self.path.unwrap_or(model.config.mode), precision: self.precision, threads: self.threads.max(1) }
    }
}

/// CSV and text go to `--out` when given, stdout otherwise.
pub fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<T>().map_err(|e| anyhow::anyhow!("bad list item {t:?}: {e}")))
        .collect()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use m2t::Error as E;
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<m2t::Error>()) else {
        return 1;
    };
    match e {
        E::Io(_) => 1,
        E::BadMagic { .. } | E::BadVersion(_) | E::Truncated(_) | E::Corrupt(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Schedule(a) => inspect::schedule(a),
        Command::Qlds(a) => inspect::qlds(a),
        Command::Layout(a) => inspect::layout(a),
        Command::Gen(a) => inspect::gen(a),
        Command::Train(a) => model::train(a),
        Command::Sample(a) => model::sample(a),
        Command::Encode(a) => codec::encode(a),
        Command::Decode(a) => codec::decode(a),
        Command::Sweep(a) => codec::sweep(a),
        Command::Bench(a) => codec::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
