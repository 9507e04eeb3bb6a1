//! Lossless coding of integer token grids with masked-transformer entropy
//! models.
//!
//! A grid is cut into `w_t × w_t` tiles. Each tile is coded in `S` steps: a
//! masking schedule splits the positions into groups, a transformer predicts
//! a Gaussian mixture per token of the next group given the groups already
//! sent, and a range coder spends `-log2 P` bits per channel.
//!
//! Two inference paths share one model family:
//!
//! * [`Mode::Mt`] feeds the whole tile with mask tokens at unknown positions,
//!   one full forward pass per step.
//! * [`Mode::M2t`] reorders the input into groups, masks attention
//!   block-causally and decodes step by step through a key/value cache, so
//!   every token is fed once.
//!
//! ```
//! use m2t::{decode_grid, encode_grid, CodecOptions, GaussMarkov, Mode, Model, ModelConfig, ScheduleKind, ScheduleSpec};
//!
//! let mut cfg = ModelConfig::desk(2, 4);
//! cfg.layers = 1;
//! cfg.width = 8;
//! cfg.mlp_hidden = 16;
//! cfg.heads = 2;
//! let model = Model::init(cfg.with_mode(Mode::M2t), 7).unwrap();
//! let grid = GaussMarkov::new(4, 2, 3.0, 1).grid(6, 5);
//! let spec = ScheduleSpec::new(ScheduleKind::Qlds, 3, 2.2, 0);
//! let opts = CodecOptions::new(Mode::M2t);
//! let (stream, _) = encode_grid(&grid, &model, spec, opts).unwrap();
//! let (back, _) = decode_grid(&stream, &model, opts).unwrap();
//! assert_eq!(back, grid);
//! ```

pub mod coder;
pub mod error;
pub mod gmm;
pub mod grid;
pub mod layout;
pub mod net;
pub mod qlds;
pub mod report;
pub mod sched;
pub mod source;

pub use coder::{decode_grid, encode_grid, Bitstream, CodecOptions, CodingStats, Header, TileCoder, WorkCounters};
pub use error::{Error, Result};
pub use gmm::{bin_pmf, freq_table, FreqTable, Mixture, Support, TokenGmm};
pub use grid::{tile, untile, Tile, TileSet, TokenGrid};
pub use layout::{build_layout, InputSlot, M2tLayout};
pub use net::{AttnMask, KvCache, Mode, Model, ModelConfig, TrainConfig};
pub use qlds::{discrepancy_1d, qlds_order, QldsOrder};
pub use report::RunReport;
pub use sched::{group_sizes, make_schedule, GroupSizes, MaskSchedule, ScheduleKind, ScheduleSpec};
pub use source::{GaussMarkov, TileSource};
