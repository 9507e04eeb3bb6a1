use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use m2t::layout::InputSlot;
use m2t::{build_layout, group_sizes, make_schedule, qlds_order, GaussMarkov, ScheduleKind};

use crate::{output, parse_list, ScheduleOpts};

#[derive(Args, Debug)]
pub struct ScheduleArgs {
    /// Tile side.
    #[arg(long = "w-t", visible_alias = "w_T", default_value_t = 24)]
    w_t: usize,
    #[command(flatten)]
    sched: ScheduleOpts,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn schedule(a: ScheduleArgs) -> Result<()> {
    let n = a.w_t * a.w_t;
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "step,size,cumulative,fraction,positions")?;
    if a.sched.kind == ScheduleKind::Entropy {
        // locations depend on the model and the data; only sizes are fixed
        let g = group_sizes(a.sched.steps, a.sched.alpha, n)?;
        for (i, (&s, &c)) in g.sizes.iter().zip(&g.cumulative).enumerate() {
            writeln!(out, "{},{s},{c},{:.6},", i + 1, c as f64 / n as f64)?;
        }
    } else {
        let s = make_schedule(a.sched.kind, a.sched.steps, a.sched.alpha, a.w_t, a.sched.seed)?;
        for (i, group) in s.groups.iter().enumerate() {
            let cum = s.sizes.cumulative[i];
            let pos: Vec<String> = group.iter().map(usize::to_string).collect();
            writeln!(out, "{},{},{cum},{:.6},{}", i + 1, group.len(), cum as f64 / n as f64, pos.join(" "))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct QldsArgs {
    #[arg(long = "w-t", visible_alias = "w_T", default_value_t = 24)]
    w_t: usize,
    /// Print coverage maps after these many cells instead of the order.
    #[arg(long)]
    maps: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn qlds(a: QldsArgs) -> Result<()> {
    if a.w_t == 0 {
        bail!(m2t::Error::Shape("w-t must be positive".into()));
    }
    let order = qlds_order(a.w_t);
    let mut out = output(a.out.as_deref())?;
    match a.maps {
        None => {
            writeln!(out, "rank,row,col,position")?;
            for (rank, &p) in order.cells.iter().enumerate() {
                writeln!(out, "{rank},{},{},{p}", p / a.w_t, p % a.w_t)?;
            }
            eprintln!("covered {} cells after {} sequence points", order.cells.len(), order.k);
        }
        Some(list) => {
            for prefix in parse_list::<usize>(&list)? {
                let prefix = prefix.min(order.cells.len());
                let mut map = vec![b'.'; a.w_t * a.w_t];
                for &p in &order.cells[..prefix] {
                    map[p] = b'#';
                }
                writeln!(out, "# first {prefix} cells")?;
                for row in map.chunks(a.w_t) {
                    out.write_all(row)?;
                    writeln!(out)?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct LayoutArgs {
    #[arg(long = "w-t", visible_alias = "w_T", default_value_t = 4)]
    w_t: usize,
    #[command(flatten)]
    sched: ScheduleOpts,
    /// Print the attention mask instead of the slot table.
    #[arg(long)]
    mask: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn layout(a: LayoutArgs) -> Result<()> {
    if a.sched.kind == ScheduleKind::Entropy {
        bail!(m2t::Error::Schedule("the entropy kind has no static layout".into()));
    }
    let s = make_schedule(a.sched.kind, a.sched.steps, a.sched.alpha, a.w_t, a.sched.seed)?;
    let l = build_layout(&s)?;
    let mut out = output(a.out.as_deref())?;
    if a.mask {
        out.write_all(l.render_mask().as_bytes())?;
    } else {
        writeln!(out, "slot,group,input,position,target")?;
        let groups = l.slot_groups();
        for (slot, input) in l.input_slots.iter().enumerate() {
            let what = match input {
                InputSlot::Token(p) => format!("token {p}"),
                InputSlot::Pad { .. } => "pad".to_string(),
            };
            writeln!(out, "{slot},{},{what},{},{}", groups[slot], input.positional_index(), l.target_perm[slot])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    h: usize,
    #[arg(long)]
    w: usize,
    #[arg(long, default_value_t = 2)]
    c: usize,
    /// Marginal standard deviation before rounding.
    #[arg(long, default_value_t = 4.0)]
    std: f64,
    /// Correlation between neighbours.
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: std::path::PathBuf,
}

pub fn gen(a: GenArgs) -> Result<()> {
    if a.h == 0 || a.w == 0 || a.c == 0 {
        bail!(m2t::Error::Shape(format!("grid {}x{}x{} has an empty dimension", a.h, a.w, a.c)));
    }
    let grid = GaussMarkov::new(1, a.c, a.std, a.seed).with_rho(a.rho).grid(a.h, a.w);
    grid.write(&a.out)?;
    Ok(())
}
