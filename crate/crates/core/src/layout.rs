//! The M2T sequence layout: permuted input with mask padding, block
//! lower-triangular attention mask, and the target permutation.
//!
//! Input group `i` holds the tokens of group `i - 1` followed by mask slots
//! until it is as long as group `i`; output slot `j` of group `i` predicts
//! the `j`-th token of group `i`. With unit groups in raster order this is
//! the usual shifted next-token setup with a single leading start slot.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::net::AttnMask;
use crate::sched::{GroupSizes, MaskSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputSlot {
    /// A token already known to the receiver, at this tile position.
    Token(usize),
    /// A mask slot standing in for the token at `predicts`.
    Pad { predicts: usize },
}

impl InputSlot {
    /// Positional-table row used by the slot: a token's own cell, or for a
    /// pad the cell of the token its output slot predicts.
    pub fn positional_index(self) -> usize {
        match self {
            InputSlot::Token(p) => p,
            InputSlot::Pad { predicts } => predicts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct M2tLayout {
    pub w_t: usize,
    pub input_slots: Vec<InputSlot>,
    pub attn_mask: AttnMask,
    /// Tile position predicted at each output slot.
    pub target_perm: Vec<usize>,
    pub group_sizes: GroupSizes,
}

pub fn build_layout(schedule: &MaskSchedule) -> Result<M2tLayout> {
    let sizes = &schedule.sizes.sizes;
    if let Some(i) = sizes.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::Schedule(format!(
            "group {} ({} tokens) is smaller than the group before it ({}); cannot pad",
            i + 1,
            sizes[i + 1],
            sizes[i]
        )));
    }
    let mut input_slots = Vec::with_capacity(schedule.sizes.total());
    let empty = Vec::new();
    for (i, group) in schedule.groups.iter().enumerate() {
        let prev = if i == 0 { &empty } else { &schedule.groups[i - 1] };
        for (j, &target) in group.iter().enumerate() {
            input_slots.push(match prev.get(j) {
                Some(&p) => InputSlot::Token(p),
                None => InputSlot::Pad { predicts: target },
            });
        }
    }
    Ok(M2tLayout {
        w_t: schedule.w_t,
        input_slots,
        attn_mask: AttnMask::block_causal(sizes),
        target_perm: schedule.order(),
        group_sizes: schedule.sizes.clone(),
    })
}

impl M2tLayout {
    pub fn positional_index(&self, slot: usize) -> usize {
        self.input_slots[slot].positional_index()
    }

    pub fn steps(&self) -> usize {
        self.group_sizes.steps()
    }

    /// Slot range of group `i`, identical at input and output.
    pub fn group(&self, i: usize) -> Range<usize> {
        self.group_sizes.start(i)..self.group_sizes.cumulative[i]
    }

    /// Group index of every slot.
    pub fn slot_groups(&self) -> Vec<usize> {
        (0..self.steps()).flat_map(|g| std::iter::repeat_n(g, self.group_sizes.sizes[g])).collect()
    }

    /// Inverse of `target_perm`: output slot that predicts each position.
    pub fn inverse_target_perm(&self) -> Vec<usize> {
        let mut inv = vec![0; self.target_perm.len()];
        for (slot, &p) in self.target_perm.iter().enumerate() {
            inv[p] = slot;
        }
        inv
    }

    /// Renders the attention mask as rows of `1`/`.` characters.
    pub fn render_mask(&self) -> String {
        let n = self.attn_mask.rows();
        let mut s = String::with_capacity(n * (n + 1));
        for r in 0..n {
            for c in 0..n {
                s.push(if self.attn_mask.get(r, c) { '1' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sched::{make_schedule, ScheduleKind};
    use proptest::prelude::*;

    fn raster_unit(w_t: usize) -> MaskSchedule {
        MaskSchedule::from_groups(w_t, (0..w_t * w_t).map(|p| vec![p]).collect()).unwrap()
    }

    #[test]
    fn unit_raster_groups_shift_by_one() {
        let l = build_layout(&raster_unit(3)).unwrap();
        assert_eq!(l.input_slots[0], InputSlot::Pad { predicts: 0 });
        for i in 1..9 {
            assert_eq!(l.input_slots[i], InputSlot::Token(i - 1));
        }
        assert_eq!(l.attn_mask, AttnMask::causal(9));
        assert_eq!(l.target_perm, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn single_step_is_all_pads() {
        let s = make_schedule(ScheduleKind::Qlds, 1, 2.2, 4, 0).unwrap();
        let l = build_layout(&s).unwrap();
        assert!(l.input_slots.iter().all(|s| matches!(s, InputSlot::Pad { .. })));
        assert!(l.attn_mask.is_all_ones());
        assert_eq!(l.target_perm, s.groups[0]);
        // every pad carries the position of its own target
        for (slot, &p) in l.target_perm.iter().enumerate() {
            assert_eq!(l.positional_index(slot), p);
        }
    }

    #[test]
    fn hand_built_example() {
        let s = MaskSchedule::from_groups(2, vec![vec![2], vec![0, 1, 3]]).unwrap();
        let l = build_layout(&s).unwrap();
        assert_eq!(
            l.input_slots,
            vec![InputSlot::Pad { predicts: 2 }, InputSlot::Token(2), InputSlot::Pad { predicts: 1 }, InputSlot::Pad { predicts: 3 }]
        );
        assert_eq!(l.target_perm, vec![2, 0, 1, 3]);
        assert_eq!(l.render_mask(), "1...\n1111\n1111\n1111\n");
        assert_eq!(l.group(1), 1..4);
    }

    #[test]
    fn shrinking_groups_are_rejected() {
        let s = MaskSchedule::from_groups(2, vec![vec![0, 1, 3], vec![2]]).unwrap();
        assert!(matches!(build_layout(&s), Err(Error::Schedule(_))));
    }

    proptest! {
        #[test]
        fn layout_invariants(steps in 1usize..=10, alpha in 1.0f64..3.5, w_t in 4usize..=10, seed in any::<u64>()) {
            let s = make_schedule(ScheduleKind::Random, steps, alpha, w_t, seed).unwrap();
            let l = build_layout(&s).unwrap();
            let n = w_t * w_t;
            prop_assert_eq!(l.input_slots.len(), n);
            prop_assert_eq!(&l.target_perm, &s.order());
            let inv = l.inverse_target_perm();
            for (slot, &p) in l.target_perm.iter().enumerate() {
                prop_assert_eq!(inv[p], slot);
            }
            let groups = l.slot_groups();
            for r in 0..n {
                for c in 0..n {
                    prop_assert_eq!(l.attn_mask.get(r, c), groups[c] <= groups[r]);
                }
            }
            // a token slot in group g carries a token decoded in group g - 1
            for (slot, is) in l.input_slots.iter().enumerate() {
                if let InputSlot::Token(p) = is {
                    prop_assert_eq!(groups[inv[*p]] + 1, groups[slot]);
                }
            }
        }
    }
}
