#![allow(dead_code)]

use m2t::net::train;
use m2t::{GaussMarkov, Mode, Model, ModelConfig, ScheduleKind, ScheduleSpec, TrainConfig};

pub fn toy_config(c: usize, w_t: usize, mode: Mode) -> ModelConfig {
    ModelConfig { layers: 1, width: 16, mlp_hidden: 32, heads: 2, c, n_mix: 3, w_t, delta: 5.0, mode }
}

pub fn untrained(c: usize, w_t: usize, mode: Mode, seed: u64) -> Model {
    Model::init(toy_config(c, w_t, mode), seed).unwrap()
}

/// A briefly trained toy model whose predictions track the synthetic source.
pub fn trained(c: usize, w_t: usize, mode: Mode, std: f64, steps: usize, seed: u64) -> Model {
    let mut model = untrained(c, w_t, mode, seed);
    let mut src = GaussMarkov::new(w_t, c, std, seed ^ 0x5eed);
    let cfg = TrainConfig {
        steps,
        batch: 4,
        lr: 1e-2,
        warmup: steps / 10,
        seed,
        schedule: ScheduleSpec::new(ScheduleKind::Qlds, 4, 2.2, 0),
        ..Default::default()
    };
    train(&mut model, &mut src, &cfg, |_, _| {}).unwrap();
    model
}
