//! Tabular run summaries.

use std::fmt::Write as _;

use crate::coder::CodingStats;
use crate::net::Mode;
use crate::sched::ScheduleKind;

/// One row of coding results for a schedule configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub path: Mode,
    pub kind: ScheduleKind,
    pub steps: usize,
    pub alpha: f64,
    pub tiles: usize,
    pub tokens: usize,
    pub nll_bits: f64,
    pub coded_bits: u64,
    pub tokens_fed: u64,
    pub forward_passes: u64,
    pub encode_secs: f64,
    pub decode_secs: f64,
}

impl RunReport {
    pub const CSV_HEADER: &'static str = "path,kind,steps,alpha,tiles,tokens,bits_per_token,nll_bits,coded_bits,\
        tokens_fed,forward_passes,encode_secs,decode_secs";

    /// Columns of [`RunReport::rate_row`]: everything but wall times.
    pub const RATE_HEADER: &'static str = "path,kind,steps,alpha,tiles,tokens,bits_per_token,nll_bits,coded_bits,tokens_fed,forward_passes";

    pub fn new(path: Mode, kind: ScheduleKind, steps: usize, alpha: f64) -> Self {
        Self {
            path,
            kind,
            steps,
            alpha,
            tiles: 0,
            tokens: 0,
            nll_bits: 0.0,
            coded_bits: 0,
            tokens_fed: 0,
            forward_passes: 0,
            encode_secs: 0.0,
            decode_secs: 0.0,
        }
    }

    /// Folds in the encoder-side stats of one grid.
    pub fn add_encode(&mut self, s: &CodingStats) {
        self.tiles += s.tiles;
        self.tokens += s.tokens;
        self.nll_bits += s.nll_bits;
        self.coded_bits += s.coded_bits;
        self.tokens_fed += s.tokens_fed;
        self.forward_passes += s.forward_passes;
        self.encode_secs += s.seconds;
    }

    pub fn add_decode(&mut self, s: &CodingStats) {
        self.decode_secs += s.seconds;
    }

    pub fn bits_per_token(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.coded_bits as f64 / self.tokens as f64
        }
    }

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{:.6},{:.3},{},{},{},{:.6},{:.6}",
            self.path,
            self.kind,
            self.steps,
            self.alpha,
            self.tiles,
            self.tokens,
            self.bits_per_token(),
            self.nll_bits,
            self.coded_bits,
            self.tokens_fed,
            self.forward_passes,
            self.encode_secs,
            self.decode_secs
        )
        .unwrap();
        s
    }

    pub fn rate_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{:.3},{},{},{}",
            self.path,
            self.kind,
            self.steps,
            self.alpha,
            self.tiles,
            self.tokens,
            self.bits_per_token(),
            self.nll_bits,
            self.coded_bits,
            self.tokens_fed,
            self.forward_passes
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_has_one_field_per_header_column() {
        let r = RunReport::new(Mode::M2t, ScheduleKind::Qlds, 12, 2.2);
        assert_eq!(r.csv_row().split(',').count(), RunReport::CSV_HEADER.split(',').count());
        assert_eq!(r.rate_row().split(',').count(), RunReport::RATE_HEADER.split(',').count());
        assert_eq!(r.bits_per_token(), 0.0);
    }

    #[test]
    fn accumulates_encode_stats() {
        let mut r = RunReport::new(Mode::Mt, ScheduleKind::Random, 4, 1.0);
        let s = CodingStats { tiles: 2, tokens: 100, nll_bits: 250.0, coded_bits: 256, ..Default::default() };
        r.add_encode(&s);
        r.add_encode(&s);
        assert_eq!(r.tokens, 200);
        assert_eq!(r.coded_bits, 512);
        assert!((r.bits_per_token() - 2.56).abs() < 1e-12);
    }
}
