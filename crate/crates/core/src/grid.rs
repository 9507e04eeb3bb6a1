//! Token grids, tiling into square patches and the `M2TG` grid file.
//!
//! A grid holds `h * w` tokens of `c` channels each, stored row-major as
//! `(row, col, channel)`. Tiles are `w_t x w_t` sub-grids laid out in
//! row-major tile order; partial tiles at the right/bottom edge are zero
//! padded and the true extent is kept so [`untile`] can crop.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const GRID_MAGIC: [u8; 4] = *b"M2TG";
pub const GRID_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    h: usize,
    w: usize,
    c: usize,
    values: Vec<i16>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, c: usize, values: Vec<i16>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("grid dims must be positive, got {h}x{w}x{c}")));
        }
        if values.len() != h * w * c {
            return Err(Error::Shape(format!("expected {} values for {h}x{w}x{c}, got {}", h * w * c, values.len())));
        }
        Ok(Self { h, w, c, values })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Result<Self> {
        Self::new(h, w, c, vec![0; h * w * c])
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn values(&self) -> &[i16] {
        &self.values
    }

    /// Number of tokens (`h * w`).
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The `c` channel values of the token at `(row, col)`.
    pub fn token(&self, row: usize, col: usize) -> &[i16] {
        let at = (row * self.w + col) * self.c;
        &self.values[at..at + self.c]
    }

    pub fn token_mut(&mut self, row: usize, col: usize) -> &mut [i16] {
        let at = (row * self.w + col) * self.c;
        &mut self.values[at..at + self.c]
    }

    /// Smallest and largest value in the grid.
    pub fn value_range(&self) -> (i16, i16) {
        let lo = self.values.iter().copied().min().unwrap_or(0);
        let hi = self.values.iter().copied().max().unwrap_or(0);
        (lo, hi)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + 2 * self.values.len());
        out.extend_from_slice(&GRID_MAGIC);
        out.push(GRID_VERSION);
        for d in [self.h, self.w, self.c] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("grid magic"));
        }
        let found: [u8; 4] = bytes[..4].try_into().unwrap();
        if found != GRID_MAGIC {
            return Err(Error::BadMagic { expected: GRID_MAGIC, found });
        }
        if bytes.len() < 17 {
            return Err(Error::Truncated("grid header"));
        }
        if bytes[4] != GRID_VERSION {
            return Err(Error::BadVersion(bytes[4]));
        }
        let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(5), dim(9), dim(13));
        let n =
            h.checked_mul(w).and_then(|hw| hw.checked_mul(c)).ok_or_else(|| Error::Shape(format!("grid dims overflow: {h}x{w}x{c}")))?;
        let body = &bytes[17..];
        if body.len() < 2 * n {
            return Err(Error::Truncated("grid values"));
        }
        if body.len() > 2 * n {
            return Err(Error::Shape(format!("{} trailing bytes after grid values", body.len() - 2 * n)));
        }
        let values = body.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
        Self::new(h, w, c, values)
    }

    /// Builds a grid from wide integers, rejecting anything outside `i16`.
    pub fn from_i64(h: usize, w: usize, c: usize, values: &[i64]) -> Result<Self> {
        let values = values.iter().map(|&v| i16::try_from(v).map_err(|_| Error::OutOfRange(v))).collect::<Result<Vec<_>>>()?;
        Self::new(h, w, c, values)
    }
}

/// One `w_t x w_t x c` patch, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tile {
    pub w_t: usize,
    pub c: usize,
    pub values: Vec<i16>,
}

impl Tile {
    pub fn new(w_t: usize, c: usize, values: Vec<i16>) -> Result<Self> {
        if values.len() != w_t * w_t * c {
            return Err(Error::Shape(format!("tile {w_t}x{w_t}x{c} needs {} values, got {}", w_t * w_t * c, values.len())));
        }
        Ok(Self { w_t, c, values })
    }

    pub fn tokens(&self) -> usize {
        self.w_t * self.w_t
    }

    /// Channels of the token at flat position `pos` (`row * w_t + col`).
    pub fn token(&self, pos: usize) -> &[i16] {
        &self.values[pos * self.c..(pos + 1) * self.c]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileSet {
    pub w_t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub tiles: Vec<Tile>,
}

impl TileSet {
    pub fn tiles_down(&self) -> usize {
        self.h.div_ceil(self.w_t)
    }

    pub fn tiles_across(&self) -> usize {
        self.w.div_ceil(self.w_t)
    }
}

/// Number of tiles a `h x w` grid splits into.
pub fn tile_count(h: usize, w: usize, w_t: usize) -> usize {
    h.div_ceil(w_t) * w.div_ceil(w_t)
}

pub fn tile(grid: &TokenGrid, w_t: usize) -> Result<TileSet> {
    if w_t == 0 {
        return Err(Error::Shape("tile width must be positive".into()));
    }
    let (h, w, c) = (grid.h, grid.w, grid.c);
    let (down, across) = (h.div_ceil(w_t), w.div_ceil(w_t));
    let mut tiles = Vec::with_capacity(down * across);
    for tr in 0..down {
        for tc in 0..across {
            let mut values = vec![0i16; w_t * w_t * c];
            for r in 0..w_t {
                let gr = tr * w_t + r;
                if gr >= h {
                    break;
                }
                for q in 0..w_t {
                    let gc = tc * w_t + q;
                    if gc >= w {
                        break;
                    }
                    let at = (r * w_t + q) * c;
                    values[at..at + c].copy_from_slice(grid.token(gr, gc));
                }
            }
            tiles.push(Tile { w_t, c, values });
        }
    }
    Ok(TileSet { w_t, h, w, c, tiles })
}

pub fn untile(set: &TileSet) -> Result<TokenGrid> {
    let TileSet { w_t, h, w, c, .. } = *set;
    if w_t == 0 {
        return Err(Error::Shape("tile width must be positive".into()));
    }
    let expected = tile_count(h, w, w_t);
    if set.tiles.len() != expected {
        return Err(Error::Shape(format!("{}x{} grid at w_t={w_t} needs {expected} tiles, got {}", h, w, set.tiles.len())));
    }
    if let Some(bad) = set.tiles.iter().find(|t| t.w_t != w_t || t.c != c || t.values.len() != w_t * w_t * c) {
        return Err(Error::Shape(format!("tile {}x{}x{} does not match set {w_t}x{w_t}x{c}", bad.w_t, bad.w_t, bad.c)));
    }
    let mut grid = TokenGrid::zeros(h, w, c)?;
    let across = w.div_ceil(w_t);
    for (i, t) in set.tiles.iter().enumerate() {
        let (tr, tc) = (i / across, i % across);
        for r in 0..w_t {
            let gr = tr * w_t + r;
            if gr >= h {
                break;
            }
            for q in 0..w_t {
                let gc = tc * w_t + q;
                if gc >= w {
                    break;
                }
                let at = (r * w_t + q) * c;
                grid.token_mut(gr, gc).copy_from_slice(&t.values[at..at + c]);
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> TokenGrid {
        let values = (0..h * w * c).map(|i| (i % 30000) as i16 - 100).collect();
        TokenGrid::new(h, w, c, values).unwrap()
    }

    #[test]
    fn exact_fit_is_one_tile() {
        let g = ramp(24, 24, 2);
        let set = tile(&g, 24).unwrap();
        assert_eq!(set.tiles.len(), 1);
        assert_eq!(set.tiles[0].values, g.values);
        assert_eq!(untile(&set).unwrap(), g);
    }

    #[test]
    fn partial_rows_are_zero_padded() {
        let g = ramp(25, 24, 2);
        let set = tile(&g, 24).unwrap();
        assert_eq!(set.tiles.len(), 2);
        let second = &set.tiles[1];
        // only row 0 of the second tile is real data
        assert_eq!(second.token(0), g.token(24, 0));
        assert!(second.values[24 * 2..].iter().all(|&v| v == 0));
        assert_eq!(untile(&set).unwrap(), g);
    }

    #[test]
    fn tiles_are_row_major() {
        let g = ramp(48, 72, 3);
        let set = tile(&g, 24).unwrap();
        assert_eq!(set.tiles.len(), 6);
        for (i, t) in set.tiles.iter().enumerate() {
            let (tr, tc) = (i / 3, i % 3);
            assert_eq!(t.token(0), g.token(tr * 24, tc * 24));
            assert_eq!(t.token(24 * 24 - 1), g.token(tr * 24 + 23, tc * 24 + 23));
        }
    }

    #[test]
    fn untile_rejects_wrong_tile_count() {
        let g = ramp(25, 24, 1);
        let mut set = tile(&g, 24).unwrap();
        set.tiles.pop();
        assert!(matches!(untile(&set), Err(Error::Shape(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.m2tg");
        let g = TokenGrid::new(2, 3, 2, vec![-32768, 32767, 0, 1, -1, 7, 8, 9, 10, 11, 12, -13]).unwrap();
        g.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..5], b"M2TG\x01");
        assert_eq!(bytes.len(), 17 + 24);
        assert_eq!(TokenGrid::read(&path).unwrap(), g);
    }

    #[test]
    fn file_errors() {
        let g = ramp(3, 3, 1);
        let bytes = g.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TokenGrid::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(TokenGrid::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(TokenGrid::from_bytes(&bytes[..10]), Err(Error::Truncated(_))));
        assert!(matches!(TokenGrid::from_i64(1, 1, 1, &[40000]), Err(Error::OutOfRange(40000))));
    }

    proptest! {
        #[test]
        fn untile_inverts_tile(
            h in 1usize..=60,
            w in 1usize..=60,
            c in prop::sample::select(vec![1usize, 3, 8]),
            w_t in 1usize..=24,
            seed in any::<u64>(),
        ) {
            let values = (0..h * w * c)
                .map(|i| (seed.wrapping_mul(i as u64 + 1).rotate_left(17) >> 48) as i16)
                .collect();
            let g = TokenGrid::new(h, w, c, values).unwrap();
            let set = tile(&g, w_t).unwrap();
            prop_assert_eq!(set.tiles.len(), tile_count(h, w, w_t));
            prop_assert_eq!(untile(&set).unwrap(), g);
        }
    }
}
