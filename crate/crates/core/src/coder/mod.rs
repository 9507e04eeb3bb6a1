//! Entropy coding: the range coder, MT/M2T tile coders and the bitstream.

pub mod rc;
pub mod stream;
pub mod tile;

pub use rc::{rc_decode, rc_encode, RangeDecoder, RangeEncoder};
pub use stream::{
    decode_grid, encode_grid, resolve_schedule, Bitstream, CodecOptions, CodingStats, Header, ResolvedSchedule, DEFAULT_PRECISION,
    STREAM_MAGIC, STREAM_VERSION,
};
pub use tile::{entropy_static_order, m2t_params, m2t_params_cached, CodedTile, TileCoder, TileSchedule, WorkCounters};
