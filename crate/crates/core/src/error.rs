use std::io;

use thiserror::Error;

/// Errors produced by the codec, the model and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u8),

    #[error("truncated input: {0}")]
    Truncated(&'static str),

    #[error("value {0} does not fit in a 16-bit token")]
    OutOfRange(i64),

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("symbol {symbol} outside coder support [{lo}, {hi}]")]
    SymbolOutOfSupport { symbol: i64, lo: i64, hi: i64 },

    #[error("support of {symbols} symbols does not fit {precision}-bit frequencies")]
    SupportTooLarge { symbols: usize, precision: u32 },

    #[error("corrupt bitstream: {0}")]
    Corrupt(String),

    #[error("model mismatch: {0}")]
    Model(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
