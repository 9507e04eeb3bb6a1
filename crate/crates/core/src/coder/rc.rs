//! Range coder over integer frequency tables.
//!
//! 64-bit registers: `range` is renormalized to stay at or above 2^56, so the
//! per-symbol rounding loss (`range >> precision` truncation) is below 2^-40
//! in relative terms. Carries out of `low` propagate back into the bytes
//! already written. The final flush writes the shortest prefix that still
//! identifies a value inside the last interval; the decoder reads missing
//! bytes as zero, so trailing zero bytes are dropped too.

use crate::error::{Error, Result};
use crate::gmm::FreqTable;

const TOP: u64 = 1 << 56;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: u64::MAX, out: Vec::new() }
    }

    fn carry(&mut self) {
        for b in self.out.iter_mut().rev() {
            if *b == 0xFF {
                *b = 0;
            } else {
                *b += 1;
                return;
            }
        }
        unreachable!("carry out of the first byte");
    }

    /// Codes the symbol occupying `[start, start + freq)` of `2^precision`.
    pub fn encode_range(&mut self, start: u32, freq: u32, precision: u32) {
        debug_assert!(freq > 0 && (start as u64 + freq as u64) <= 1u64 << precision);
        let r = self.range >> precision;
        let (low, overflow) = self.low.overflowing_add(r * start as u64);
        self.low = low;
        if overflow {
            self.carry();
        }
        self.range = r * freq as u64;
        while self.range < TOP {
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn encode(&mut self, y: i32, table: &FreqTable) -> Result<()> {
        let i = table.index(y).ok_or(Error::SymbolOutOfSupport {
            symbol: y as i64,
            lo: table.lo as i64,
            hi: table.symbol(table.freqs.len() - 1) as i64,
        })?;
        self.encode_range(table.cum[i], table.freqs[i], table.precision);
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        let lo = self.low as u128;
        let hi = lo + self.range as u128;
        for k in 0..=8u32 {
            let unit = 1u128 << (64 - 8 * k);
            let v = lo.div_ceil(unit) * unit;
            if v < hi {
                if v >> 64 != 0 {
                    self.carry();
                }
                let v = v as u64;
                for b in 0..k {
                    self.out.push((v >> (56 - 8 * b)) as u8);
                }
                break;
            }
        }
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u64,
    range: u64,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = Self { code: 0, range: u64::MAX, bytes, pos: 0 };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, table: &FreqTable) -> Result<i32> {
        let p = table.precision;
        let r = self.range >> p;
        let target = self.code / r;
        if target >= 1u64 << p {
            return Err(Error::Corrupt("code value past the end of the frequency table".into()));
        }
        let i = table.find(target as u32);
        let (start, freq) = (table.cum[i], table.freqs[i]);
        self.code -= r * start as u64;
        self.range = r * freq as u64;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u64;
            self.range <<= 8;
        }
        Ok(table.symbol(i))
    }

    /// Fails if the stream holds bytes the decoder never needed.
    pub fn finish(self) -> Result<()> {
        if self.pos < self.bytes.len() {
            return Err(Error::Corrupt(format!("{} unused trailing bytes in payload", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn rc_encode(symbols: &[i32], tables: &[FreqTable]) -> Result<Vec<u8>> {
    assert_eq!(symbols.len(), tables.len(), "one table per symbol");
    let mut enc = RangeEncoder::new();
    for (&y, t) in symbols.iter().zip(tables) {
        enc.encode(y, t)?;
    }
    Ok(enc.finish())
}

pub fn rc_decode(bytes: &[u8], tables: &[FreqTable]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes);
    let out = tables.iter().map(|t| dec.decode(t)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ideal_bits(symbols: &[i32], tables: &[FreqTable]) -> f64 {
        symbols.iter().zip(tables).map(|(&y, t)| t.cost_bits(y)).sum()
    }

    #[test]
    fn uniform_bytes() {
        let t = FreqTable::from_freqs(0, 16, vec![256; 256]);
        let symbols: Vec<i32> = (0..1000).map(|i| i * 37 % 256).collect();
        let tables = vec![t; 1000];
        let bytes = rc_encode(&symbols, &tables).unwrap();
        assert!(bytes.len() <= 1016, "{}", bytes.len());
        assert_eq!(rc_decode(&bytes, &tables).unwrap(), symbols);
    }

    #[test]
    fn empty_sequence() {
        let bytes = rc_encode(&[], &[]).unwrap();
        assert!(bytes.len() <= 16);
        assert_eq!(rc_decode(&bytes, &[]).unwrap(), Vec::<i32>::new());
    }

    #[test]
    fn skewed_table() {
        let t = FreqTable::from_freqs(0, 8, vec![255, 1]);
        let tables = vec![t; 1000];
        let symbols = vec![0; 1000];
        let ideal = ideal_bits(&symbols, &tables);
        assert!((ideal - 5.64).abs() < 0.01, "{ideal}");
        let bytes = rc_encode(&symbols, &tables).unwrap();
        assert!(bytes.len() as f64 <= ideal / 8.0 + 16.0);
        assert!(bytes.len() <= 2, "{}", bytes.len());
        assert_eq!(rc_decode(&bytes, &tables).unwrap(), symbols);
    }

    #[test]
    fn certain_symbols_cost_nothing() {
        let t = FreqTable::from_freqs(5, 16, vec![1 << 16]);
        let tables = vec![t; 50];
        let bytes = rc_encode(&[5; 50], &tables).unwrap();
        assert!(bytes.is_empty());
        assert_eq!(rc_decode(&bytes, &tables).unwrap(), vec![5; 50]);
    }

    #[test]
    fn errors() {
        let t = FreqTable::from_freqs(-1, 8, vec![128, 128]);
        assert!(matches!(rc_encode(&[2], std::slice::from_ref(&t)), Err(Error::SymbolOutOfSupport { .. })));
        let mut bytes = rc_encode(&[0, -1, 0], &vec![t.clone(); 3]).unwrap();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6, 7, 8, 9]);
        assert!(matches!(rc_decode(&bytes, &vec![t; 3]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn carries_propagate() {
        // symbols at the very top of the range push carries through 0xFF runs
        let t = FreqTable::from_freqs(0, 16, vec![1, 65534, 1]);
        let symbols: Vec<i32> = (0..4000).map(|i| if i % 7 == 0 { 0 } else { 2 }).collect();
        let tables = vec![t; symbols.len()];
        let bytes = rc_encode(&symbols, &tables).unwrap();
        assert_eq!(rc_decode(&bytes, &tables).unwrap(), symbols);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<i32>, Vec<FreqTable>)> {
        prop::collection::vec((prop::collection::vec(1u32..5000, 1..40), any::<prop::sample::Index>(), 8u32..=16), 0..300).prop_map(
            |items| {
                items
                    .into_iter()
                    .map(|(weights, pick, precision)| {
                        let total = 1u64 << precision;
                        let n = weights.len().min(total as usize);
                        let sum: u64 = weights[..n].iter().map(|&w| w as u64).sum();
                        let mut f: Vec<u32> = weights[..n].iter().map(|&w| ((w as u64 * (total - n as u64)) / sum) as u32 + 1).collect();
                        let short = total as u32 - f.iter().sum::<u32>();
                        f[0] += short;
                        let t = FreqTable::from_freqs(-3, precision, f);
                        (pick.index(n) as i32 - 3, t)
                    })
                    .unzip()
            },
        )
    }

    proptest! {
        #[test]
        fn round_trip_within_slack((symbols, tables) in arb_case()) {
            let bytes = rc_encode(&symbols, &tables).unwrap();
            prop_assert_eq!(rc_decode(&bytes, &tables).unwrap(), symbols.clone());
            prop_assert!(bytes.len() as f64 <= ideal_bits(&symbols, &tables) / 8.0 + 16.0);
        }
    }
}
