//! Shared fixtures for the benchmarks.

use m2t::{encode_grid, Bitstream, CodecOptions, GaussMarkov, Mode, Model, ModelConfig, ScheduleKind, ScheduleSpec, TokenGrid};

/// The untrained desk-scale model on 8x8 tiles with two channels.
pub fn desk_model() -> Model {
    Model::init(ModelConfig::desk(2, 8), 1).expect("valid config")
}

pub fn grid(h: usize, w: usize) -> TokenGrid {
    GaussMarkov::new(8, 2, 4.0, 7).grid(h, w)
}

/// A QLDS-scheduled stream for `path` with `steps` steps.
pub fn stream(model: &Model, grid: &TokenGrid, path: Mode, steps: usize) -> Bitstream {
    let spec = ScheduleSpec::new(ScheduleKind::Qlds, steps, 2.2, 0);
    encode_grid(grid, model, spec, CodecOptions::new(path)).expect("encodes").0
}
