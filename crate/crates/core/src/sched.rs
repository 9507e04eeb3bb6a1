//! Masking schedules: how many tokens each step uncovers (a power law in the
//! step index) and which ones (seeded random, lowest entropy, or QLDS).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gmm::{quantized_entropy, token_tables, Support, TokenGmm};
use crate::qlds::qlds_order;

/// SplitMix64. The random location schedule is defined in terms of this
/// generator so any implementation can reproduce it from the seed:
///
/// ```text
/// state += 0x9E3779B97F4A7C15
/// z = state
/// z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
/// z = (z ^ (z >> 27)) * 0x94D049BB133111EB
/// return z ^ (z >> 31)
/// ```
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Fisher-Yates from the back: for `i = n-1..1`, swap `i` with
/// `next_u64() % (i + 1)`.
pub fn shuffled_positions(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::new(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    Random,
    Entropy,
    Qlds,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Random, ScheduleKind::Entropy, ScheduleKind::Qlds];

    pub fn code(self) -> u8 {
        match self {
            ScheduleKind::Random => 0,
            ScheduleKind::Entropy => 1,
            ScheduleKind::Qlds => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ScheduleKind::Random),
            1 => Ok(ScheduleKind::Entropy),
            2 => Ok(ScheduleKind::Qlds),
            other => Err(Error::Schedule(format!("unknown schedule kind code {other}"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Random => "random",
            ScheduleKind::Entropy => "entropy",
            ScheduleKind::Qlds => "qlds",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(ScheduleKind::Random),
            "entropy" => Ok(ScheduleKind::Entropy),
            "qlds" => Ok(ScheduleKind::Qlds),
            other => Err(Error::Schedule(format!("unknown schedule kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSizes {
    pub sizes: Vec<usize>,
    pub cumulative: Vec<usize>,
}

impl GroupSizes {
    pub fn from_sizes(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::Schedule(format!("group sizes must be non-empty and positive: {sizes:?}")));
        }
        let cumulative = sizes
            .iter()
            .scan(0, |acc, &s| {
                *acc += s;
                Some(*acc)
            })
            .collect();
        Ok(Self { sizes, cumulative })
    }

    pub fn steps(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        self.cumulative.last().copied().unwrap_or(0)
    }

    /// Start offset of group `i` in the concatenated order.
    pub fn start(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.cumulative[i - 1]
        }
    }
}

/// Power schedule `f(x) = total * (x / steps)^alpha`.
///
/// Cumulative counts are rounded half away from zero, pushed up so every
/// group gets at least one token (and capped so later groups still can),
/// then the per-step sizes are sorted ascending.
pub fn group_sizes(steps: usize, alpha: f64, total: usize) -> Result<GroupSizes> {
    if steps == 0 {
        return Err(Error::Schedule("need at least one step".into()));
    }
    if steps > total {
        return Err(Error::Schedule(format!("{steps} steps cannot each uncover one of {total} tokens")));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Schedule(format!("alpha must be positive and finite, got {alpha}")));
    }
    let mut cumulative = Vec::with_capacity(steps);
    let mut prev = 0usize;
    for i in 1..=steps {
        let raw = (total as f64 * (i as f64 / steps as f64).powf(alpha)).round() as usize;
        let ceiling = total - (steps - i);
        let c = raw.max(prev + 1).min(ceiling);
        cumulative.push(c);
        prev = c;
    }
    let mut sizes: Vec<usize> = cumulative
        .iter()
        .scan(0, |last, &c| {
            let s = c - *last;
            *last = c;
            Some(s)
        })
        .collect();
    sizes.sort_unstable();
    GroupSizes::from_sizes(sizes)
}

/// Header-level description of a schedule; enough for a receiver to rebuild it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, steps: usize, alpha: f64, seed: u64) -> Self {
        Self { kind, steps, alpha, seed }
    }
}

/// A fully resolved schedule over the `w_t * w_t` positions of a tile.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSchedule {
    pub w_t: usize,
    pub sizes: GroupSizes,
    /// Positions uncovered at each step, in emission order.
    pub groups: Vec<Vec<usize>>,
}

impl MaskSchedule {
    /// Splits a full position order into consecutive groups.
    pub fn from_order(w_t: usize, order: &[usize], sizes: GroupSizes) -> Result<Self> {
        if sizes.total() != order.len() {
            return Err(Error::Schedule(format!("group sizes cover {} tokens, order has {}", sizes.total(), order.len())));
        }
        let groups = (0..sizes.steps()).map(|i| order[sizes.start(i)..sizes.cumulative[i]].to_vec()).collect();
        Self::from_groups(w_t, groups)
    }

    pub fn from_groups(w_t: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let n = w_t * w_t;
        let mut seen = vec![false; n];
        for g in &groups {
            for &p in g {
                if p >= n || std::mem::replace(&mut seen[p], true) {
                    return Err(Error::Schedule(format!("position {p} repeated or outside {w_t}x{w_t} tile")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Schedule("schedule does not cover every position".into()));
        }
        let sizes = GroupSizes::from_sizes(groups.iter().map(Vec::len).collect())?;
        Ok(Self { w_t, sizes, groups })
    }

    pub fn steps(&self) -> usize {
        self.groups.len()
    }

    /// Binary masks `M_1..M_S`, one `w_t^2` vector per step.
    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.groups
            .iter()
            .map(|g| {
                let mut m = vec![false; self.w_t * self.w_t];
                for &p in g {
                    m[p] = true;
                }
                m
            })
            .collect()
    }

    /// All positions in uncover order.
    pub fn order(&self) -> Vec<usize> {
        self.groups.concat()
    }
}

/// Builds a static schedule. The entropy kind depends on model predictions
/// and is resolved while coding (see [`entropy_next_mask`]).
pub fn make_schedule(kind: ScheduleKind, steps: usize, alpha: f64, w_t: usize, seed: u64) -> Result<MaskSchedule> {
    let n = w_t * w_t;
    let sizes = group_sizes(steps, alpha, n)?;
    let order = match kind {
        ScheduleKind::Random => shuffled_positions(n, seed),
        ScheduleKind::Qlds => qlds_order(w_t).cells,
        ScheduleKind::Entropy => {
            return Err(Error::Schedule("entropy schedules are resolved during coding".into()));
        }
    };
    MaskSchedule::from_order(w_t, &order, sizes)
}

/// The `k` positions of `remaining` whose coding tables have the lowest
/// entropy, ties broken by ascending position. `params` is indexed by tile
/// position.
pub fn entropy_next_mask(params: &[TokenGmm], remaining: &[usize], k: usize, support: Support, precision: u32) -> Result<Vec<usize>> {
    let scored = remaining
        .iter()
        .map(|&p| Ok((p, quantized_entropy(&token_tables(&params[p], support, precision)?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(lowest_entropy(scored, k))
}

/// Sorts `(position, entropy)` pairs by entropy then position and keeps `k`.
pub fn lowest_entropy(mut scored: Vec<(usize, f64)>, k: usize) -> Vec<usize> {
    assert!(k <= scored.len(), "asked for {k} of {} positions", scored.len());
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(p, _)| p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::Mixture;
    use proptest::prelude::*;

    /// Independent integerization: round the cumulative curve, difference it.
    fn cumulative_oracle(steps: usize, alpha: f64, total: usize) -> Vec<usize> {
        let cum: Vec<usize> = (1..=steps).map(|i| (total as f64 * (i as f64 / steps as f64).powf(alpha) + 0.5).floor() as usize).collect();
        let mut prev = 0;
        cum.iter()
            .map(|&c| {
                let s = c - prev;
                prev = c;
                s
            })
            .collect()
    }

    #[test]
    fn sizes_examples() {
        assert_eq!(group_sizes(1, 2.2, 576).unwrap().sizes, vec![576]);
        assert_eq!(group_sizes(4, 1.0, 576).unwrap().sizes, vec![144; 4]);
        let oracle = cumulative_oracle(8, 2.2, 576);
        assert_eq!(oracle, vec![6, 21, 40, 58, 80, 101, 123, 147]);
        assert_eq!(group_sizes(8, 2.2, 576).unwrap().sizes, oracle);
    }

    #[test]
    fn sizes_repair_small_first_groups() {
        // 64 * (1/8)^2.2 rounds to 0; the repair still hands out one token
        let g = group_sizes(8, 2.2, 64).unwrap();
        assert!(g.sizes.iter().all(|&s| s >= 1));
        assert_eq!(g.total(), 64);
        assert!(g.sizes.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sizes_errors() {
        assert!(group_sizes(5, 1.0, 4).is_err());
        assert!(group_sizes(0, 1.0, 4).is_err());
        assert!(group_sizes(2, f64::NAN, 4).is_err());
        // every token its own group
        assert_eq!(group_sizes(4, 1.0, 4).unwrap().sizes, vec![1; 4]);
        assert_eq!(group_sizes(16, 0.3, 16).unwrap().sizes, vec![1; 16]);
    }

    #[test]
    fn qlds_schedule_follows_order() {
        let s = make_schedule(ScheduleKind::Qlds, 2, 1.0, 2, 0).unwrap();
        let order = qlds_order(2).cells;
        assert_eq!(s.sizes.sizes, vec![2, 2]);
        assert_eq!(s.groups[0], order[..2].to_vec());
        let m = s.masks();
        assert_eq!(m[0].iter().filter(|&&b| b).count(), 2);
    }

    #[test]
    fn random_schedule_is_deterministic() {
        let a = make_schedule(ScheduleKind::Random, 6, 2.2, 12, 99).unwrap();
        let b = make_schedule(ScheduleKind::Random, 6, 2.2, 12, 99).unwrap();
        let c = make_schedule(ScheduleKind::Random, 6, 2.2, 12, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn splitmix_reference_values() {
        // first outputs for seed 0 (Vigna's reference implementation)
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn single_step_is_everything() {
        for kind in [ScheduleKind::Random, ScheduleKind::Qlds] {
            let s = make_schedule(kind, 1, 2.2, 5, 3).unwrap();
            assert_eq!(s.masks(), vec![vec![true; 25]]);
        }
        assert!(make_schedule(ScheduleKind::Entropy, 2, 1.0, 4, 0).is_err());
    }

    fn mixture(mu: f64, sigma: f64) -> Mixture {
        Mixture::new(vec![mu, 0.0, 0.0], vec![sigma, 1.0, 1.0], vec![1.0, 0.0, 0.0])
    }

    #[test]
    fn entropy_ties_break_by_position() {
        let params: Vec<TokenGmm> = (0..6).map(|_| TokenGmm::new(vec![mixture(0.0, 2.0)])).collect();
        let support = Support::new(-8, 8);
        assert_eq!(entropy_next_mask(&params, &[1, 2, 3, 4, 5], 3, support, 16).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn entropy_prefers_confident_tokens() {
        let mut params: Vec<TokenGmm> = (0..6).map(|i| TokenGmm::new(vec![mixture(0.0, 1.0 + i as f64)])).collect();
        params[4] = TokenGmm::new(vec![mixture(2.0, 0.01)]);
        let support = Support::new(-8, 8);
        let remaining = [0, 2, 3, 4, 5];
        assert_eq!(entropy_next_mask(&params, &remaining, 1, support, 16).unwrap(), vec![4]);
        let mut all = entropy_next_mask(&params, &remaining, remaining.len(), support, 16).unwrap();
        all.sort_unstable();
        assert_eq!(all, remaining.to_vec());
    }

    proptest! {
        #[test]
        fn schedules_partition_the_tile(
            steps in 1usize..=12,
            alpha in 1.0f64..4.0,
            w_t in 4usize..=16,
            seed in any::<u64>(),
            random in any::<bool>(),
        ) {
            let kind = if random { ScheduleKind::Random } else { ScheduleKind::Qlds };
            let s = make_schedule(kind, steps, alpha, w_t, seed).unwrap();
            let mut seen = vec![0u32; w_t * w_t];
            for g in &s.groups {
                prop_assert!(!g.is_empty());
                for &p in g {
                    seen[p] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&n| n == 1));
            prop_assert!(s.sizes.sizes.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn faster_growth_uncovers_less_early(
            steps in 2usize..=12,
            alpha in 1.0f64..3.0,
            extra in 0.05f64..2.0,
            total in prop::sample::select(vec![64usize, 256, 576]),
        ) {
            let slow = group_sizes(steps, alpha, total).unwrap();
            let fast = group_sizes(steps, alpha + extra, total).unwrap();
            for i in 0..steps {
                prop_assert!(fast.cumulative[i] <= slow.cumulative[i], "{:?} vs {:?}", fast, slow);
            }
            prop_assert_eq!(fast.total(), total);
        }
    }
}
