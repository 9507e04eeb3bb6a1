//! Synthetic training and test data: separable Gauss-Markov random fields.
//!
//! Each channel is an independent stationary field with
//! `corr(x[i, j], x[i', j']) = rho^(|i - i'| + |j - j'|)` and standard
//! deviation `std`, rounded to integers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grid::{Tile, TokenGrid};

/// Anything that produces training tiles.
pub trait TileSource {
    fn next_tile(&mut self) -> Tile;
}

#[derive(Clone, Debug)]
pub struct GaussMarkov {
    pub w_t: usize,
    pub c: usize,
    pub rho: f64,
    pub std: f64,
    rng: ChaCha8Rng,
}

impl GaussMarkov {
    pub fn new(w_t: usize, c: usize, std: f64, seed: u64) -> Self {
        Self { w_t, c, rho: 0.9, std, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    /// One real-valued channel plane of `h x w`.
    fn plane(&mut self, h: usize, w: usize) -> Vec<f64> {
        let (r, s) = (self.rho, self.std);
        let edge = (1.0 - r * r).sqrt() * s;
        let inner = (1.0 - r * r) * s;
        let mut x = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                x[i * w + j] = match (i, j) {
                    (0, 0) => s * e,
                    (0, _) => r * x[j - 1] + edge * e,
                    (_, 0) => r * x[(i - 1) * w] + edge * e,
                    _ => r * x[(i - 1) * w + j] + r * x[i * w + j - 1] - r * r * x[(i - 1) * w + j - 1] + inner * e,
                };
            }
        }
        x
    }

    pub fn grid(&mut self, h: usize, w: usize) -> TokenGrid {
        let planes: Vec<Vec<f64>> = (0..self.c).map(|_| self.plane(h, w)).collect();
        let mut values = Vec::with_capacity(h * w * self.c);
        for k in 0..h * w {
            for p in &planes {
                values.push(p[k].round().clamp(i16::MIN as f64, i16::MAX as f64) as i16);
            }
        }
        TokenGrid::new(h, w, self.c, values).expect("dims are positive")
    }
}

impl TileSource for GaussMarkov {
    fn next_tile(&mut self) -> Tile {
        let g = self.grid(self.w_t, self.w_t);
        Tile::new(self.w_t, self.c, g.values().to_vec()).expect("tile shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_has_requested_statistics() {
        let mut src = GaussMarkov::new(32, 1, 4.0, 7);
        let (mut n, mut sum, mut sq, mut lag) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..40 {
            let g = src.grid(32, 32);
            let v: Vec<f64> = g.values().iter().map(|&x| x as f64).collect();
            for i in 0..32 {
                for j in 0..32 {
                    let a = v[i * 32 + j];
                    n += 1.0;
                    sum += a;
                    sq += a * a;
                    if j > 0 {
                        lag += a * v[i * 32 + j - 1];
                    }
                }
            }
        }
        let mean = sum / n;
        let var = sq / n - mean * mean;
        assert!(mean.abs() < 0.5, "mean {mean}");
        assert!((var.sqrt() - 4.0).abs() < 0.4, "std {}", var.sqrt());
        let corr = lag / (n * 31.0 / 32.0) / var;
        assert!((corr - 0.9).abs() < 0.05, "corr {corr}");
    }

    #[test]
    fn seeded_sources_repeat() {
        let a = GaussMarkov::new(8, 2, 2.0, 3).next_tile();
        let b = GaussMarkov::new(8, 2, 2.0, 3).next_tile();
        assert_eq!(a, b);
    }
}
