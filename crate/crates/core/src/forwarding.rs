//! Swapping, purification and multiplexing rules.
//!
//! The functions here are the decision logic of the forwarder; the event-driven
//! plumbing that applies them lives in [`crate::network`].

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::link::WernerState;
use crate::topology::{ChannelIdx, NodeIdx};

/// Ordered node sequence covered by a pair, from one end to the other.
pub type Span = Arc<[NodeIdx]>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SwapPolicy {
    /// Swap as soon as two adjacent pairs are available.
    Asap,
    /// Swap rank per route position; lower ranks swap first. End positions
    /// carry `u32::MAX`.
    StaticOrder(Vec<u32>),
}

impl SwapPolicy {
    /// Sequential order from the source side.
    pub fn left_to_right(route_len: usize) -> Self {
        Self::from_stage_positions(route_len, (1..route_len.saturating_sub(1)).map(|p| vec![p]))
    }

    /// Sequential order from the destination side.
    pub fn right_to_left(route_len: usize) -> Self {
        Self::from_stage_positions(route_len, (1..route_len.saturating_sub(1)).rev().map(|p| vec![p]))
    }

    /// Build ranks from stages of intermediate route positions.
    pub fn from_stage_positions(route_len: usize, stages: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let mut ranks = vec![u32::MAX; route_len];
        for (rank, stage) in stages.into_iter().enumerate() {
            for pos in stage {
                ranks[pos] = rank as u32;
            }
        }
        SwapPolicy::StaticOrder(ranks)
    }

    /// Check that every intermediate position has exactly one rank and that
    /// adjacent intermediates never share one.
    pub fn validate(&self, route_len: usize) -> Result<(), String> {
        let SwapPolicy::StaticOrder(ranks) = self else {
            return Ok(());
        };
        if ranks.len() != route_len {
            return Err(format!("swap order covers {} positions, route has {}", ranks.len(), route_len));
        }
        if route_len >= 1 && (ranks[0] != u32::MAX || ranks[route_len - 1] != u32::MAX) {
            return Err("end nodes cannot appear in the swap order".into());
        }
        for pos in 1..route_len.saturating_sub(1) {
            if ranks[pos] == u32::MAX {
                return Err(format!("intermediate position {pos} missing from swap order"));
            }
            if pos + 1 < route_len - 1 && ranks[pos] == ranks[pos + 1] {
                return Err(format!("adjacent positions {pos} and {} share a swap stage", pos + 1));
            }
        }
        Ok(())
    }
}

/// Position of the partner that the node at `pos` must be paired with on one
/// side before it may swap: the nearest position in direction `step` whose rank
/// is higher (an end node counts as highest).
pub fn expected_partner(ranks: &[u32], pos: usize, toward_end: bool) -> usize {
    let mine = ranks[pos];
    let mut p = pos;
    loop {
        p = if toward_end { p + 1 } else { p - 1 };
        if p == 0 || p == ranks.len() - 1 || ranks[p] > mine {
            return p;
        }
    }
}

/// Whether the node at route position `pos` may act on a pair whose far end
/// sits at route position `far`.
///
/// End positions act only on pairs covering the whole route. Intermediate
/// positions act immediately under ASAP; under a static order the far end must
/// already be the expected partner on that side.
pub fn check_swap_conditions(policy: &SwapPolicy, route_len: usize, pos: usize, far: usize) -> bool {
    let last = route_len - 1;
    if pos == 0 || pos == last {
        return (pos == 0 && far == last) || (pos == last && far == 0);
    }
    match policy {
        SwapPolicy::Asap => true,
        SwapPolicy::StaticOrder(ranks) => far == expected_partner(ranks, pos, far > pos),
    }
}

/// Purification requirement on a route segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PurificationTarget {
    /// Lower and upper route positions of the segment.
    pub lo: usize,
    pub hi: usize,
    pub rounds: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PurificationConfig {
    pub targets: Vec<PurificationTarget>,
}

impl PurificationConfig {
    /// Rounds required for a pair spanning route positions `lo..=hi`.
    pub fn rounds_for(&self, lo: usize, hi: usize) -> u32 {
        self.targets
            .iter()
            .find(|t| t.lo == lo && t.hi == hi)
            .map_or(0, |t| t.rounds)
    }
}

/// Qubit-to-path allocation discipline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MultiplexingMode {
    /// Qubits are pre-allocated exclusively to paths; shared sides are split evenly
    /// unless a multiplexing vector is given.
    Blocking,
    /// Qubits are pre-allocated per path by explicit multiplexing vectors:
    /// channel -> node -> qubits.
    BufferSpace(BTreeMap<ChannelIdx, BTreeMap<NodeIdx, u32>>),
    /// No pre-allocation; any waiting qubit may be combined.
    Statistical,
}

impl MultiplexingMode {
    pub fn is_statistical(&self) -> bool {
        matches!(self, MultiplexingMode::Statistical)
    }
}

/// Route positions covered by `span` if it is a contiguous piece of `route`
/// (in either direction), as `(lo, hi)`.
pub fn segment_of(route: &[NodeIdx], span: &[NodeIdx]) -> Option<(usize, usize)> {
    if span.len() < 2 || span.len() > route.len() {
        return None;
    }
    let start = route.iter().position(|&n| n == span[0])?;
    let forward = route.len() - start >= span.len() && route[start..start + span.len()] == *span;
    if forward {
        return Some((start, start + span.len() - 1));
    }
    if start + 1 >= span.len() {
        let lo = start + 1 - span.len();
        if route[lo..=start].iter().rev().eq(span.iter()) {
            return Some((lo, start));
        }
    }
    None
}

/// Far end of `span` as seen from `node`, which must be one of its ends.
pub fn far_end(span: &[NodeIdx], node: NodeIdx) -> NodeIdx {
    let (a, b) = (span[0], span[span.len() - 1]);
    if a == node {
        b
    } else {
        debug_assert_eq!(b, node);
        a
    }
}

/// Concatenate two spans that meet at `node`. Returns `None` if `node` is not
/// an end of both or the result would revisit a node.
pub fn merge_spans(left: &[NodeIdx], node: NodeIdx, right: &[NodeIdx]) -> Option<Span> {
    let ends = |s: &[NodeIdx]| s[0] == node || s[s.len() - 1] == node;
    if !ends(left) || !ends(right) {
        return None;
    }
    let mut out: Vec<NodeIdx> = Vec::with_capacity(left.len() + right.len() - 1);
    if left[left.len() - 1] == node {
        out.extend_from_slice(left);
    } else {
        out.extend(left.iter().rev());
    }
    if right[0] == node {
        out.extend_from_slice(&right[1..]);
    } else {
        out.extend(right.iter().rev().skip(1));
    }
    let mut seen = out.clone();
    seen.sort_unstable();
    seen.dedup();
    (seen.len() == out.len()).then(|| out.into())
}

/// Werner parameter after swapping two Werner pairs with a perfect Bell measurement.
pub fn swap_werner(left: WernerState, right: WernerState) -> WernerState {
    WernerState::new(left.w() * right.w())
}

/// One BBPSSW recurrence step on Werner pairs of fidelities `f1` and `f2`:
/// returns `(success probability, output fidelity)`.
pub fn bbpssw(f1: f64, f2: f64) -> (f64, f64) {
    let (e1, e2) = (1.0 - f1, 1.0 - f2);
    let p = f1 * f2 + f1 * e2 / 3.0 + f2 * e1 / 3.0 + 5.0 * e1 * e2 / 9.0;
    let f = (f1 * f2 + e1 * e2 / 9.0) / p;
    (p, f)
}

/// A waiting qubit offered as a swap partner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub qubit: usize,
    pub waiting_since: f64,
}

/// Earliest-waiting candidate accepted by `compatible`; ties go to the lower qubit id.
pub fn select_swap_partner<F>(candidates: &[Candidate], mut compatible: F) -> Option<usize>
where
    F: FnMut(usize) -> bool,
{
    candidates
        .iter()
        .filter(|c| compatible(c.qubit))
        .min_by(|a, b| a.waiting_since.total_cmp(&b.waiting_since).then(a.qubit.cmp(&b.qubit)))
        .map(|c| c.qubit)
}
