//! Qubit lifecycle state machine.
//!
//! Every memory qubit moves through
//! `RAW -> ACTIVE -> RESERVED -> ENTANGLED -> PURIF (<-> PENDING) -> ELIGIBLE -> RELEASE -> RAW`.
//! Besides the edges of that cycle, a qubit holding a pair may be released
//! from any entangled state when its pair decoheres or a remote operation on
//! it fails, and a remote swap update re-points it to a longer pair, sending
//! it back to `ENTANGLED` for re-evaluation.

use std::fmt;

use crate::topology::{ChannelIdx, NodeIdx};

pub type QubitId = usize;
pub type PairId = u64;
pub type PathIdx = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QubitState {
    Raw,
    Active,
    Reserved,
    Entangled,
    Purif,
    Pending,
    Eligible,
    Release,
}

impl QubitState {
    pub const ALL: [QubitState; 8] = [
        QubitState::Raw,
        QubitState::Active,
        QubitState::Reserved,
        QubitState::Entangled,
        QubitState::Purif,
        QubitState::Pending,
        QubitState::Eligible,
        QubitState::Release,
    ];

    /// States in which the qubit holds (one end of) an EPR pair.
    pub fn holds_pair(self) -> bool {
        matches!(
            self,
            QubitState::Entangled | QubitState::Purif | QubitState::Pending | QubitState::Eligible
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            QubitState::Raw => "RAW",
            QubitState::Active => "ACTIVE",
            QubitState::Reserved => "RESERVED",
            QubitState::Entangled => "ENTANGLED",
            QubitState::Purif => "PURIF",
            QubitState::Pending => "PENDING",
            QubitState::Eligible => "ELIGIBLE",
            QubitState::Release => "RELEASE",
        }
    }

    /// Successor state for `trigger`, or `None` when no such edge exists.
    pub fn next(self, trigger: Trigger) -> Option<QubitState> {
        use QubitState::*;
        use Trigger::*;
        Some(match (self, trigger) {
            (Raw, StartReservation) => Active,
            (Active, RemoteAvailable) => Reserved,
            (Reserved, EprCreated) => Entangled,
            (Entangled, SwapConditionsMet) => Purif,
            (Purif, StartRound) => Pending,
            (Pending, RoundSuccess) => Purif,
            (Pending, RoundFailure) => Release,
            (Pending, Consumed) => Release,
            (Purif, PurificationDone) => Eligible,
            (Eligible, Consumed) => Release,
            (Release, Freed) => Raw,
            (Entangled | Purif | Eligible, RemoteFailed) => Release,
            (Entangled | Purif | Pending | Eligible, Decohered) => Release,
            (Entangled | Purif | Eligible, SwapUpdate) => Entangled,
            _ => return None,
        })
    }
}

impl fmt::Display for QubitState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Trigger {
    /// Primary begins, or secondary accepts, a reservation exchange.
    StartReservation,
    /// The partner node confirmed a free qubit.
    RemoteAvailable,
    EprCreated,
    /// It is this node's turn to act on the pair.
    SwapConditionsMet,
    /// A purification round was started (solicit sent).
    StartRound,
    RoundSuccess,
    RoundFailure,
    /// Purification rounds done or none needed.
    PurificationDone,
    /// Swapped, delivered, or sacrificed in purification.
    Consumed,
    /// Remote swap or purification failed.
    RemoteFailed,
    /// The pair outlived the memory coherence time.
    Decohered,
    /// A remote swap extended the pair this qubit holds.
    SwapUpdate,
    Freed,
}

impl Trigger {
    pub const ALL: [Trigger; 13] = [
        Trigger::StartReservation,
        Trigger::RemoteAvailable,
        Trigger::EprCreated,
        Trigger::SwapConditionsMet,
        Trigger::StartRound,
        Trigger::RoundSuccess,
        Trigger::RoundFailure,
        Trigger::PurificationDone,
        Trigger::Consumed,
        Trigger::RemoteFailed,
        Trigger::Decohered,
        Trigger::SwapUpdate,
        Trigger::Freed,
    ];
}

/// A memory slot bound to one side of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Qubit {
    pub qubit_id: QubitId,
    pub owner_node: NodeIdx,
    pub bound_channel: ChannelIdx,
    pub state: QubitState,
    /// Pair this qubit believes it holds.
    pub epr_ref: Option<PairId>,
    /// Installed path the qubit is allocated to (blocking and buffer-space modes).
    pub path_ref: Option<PathIdx>,
    pub state_entered_at: f64,
}

impl Qubit {
    pub fn new(qubit_id: QubitId, owner_node: NodeIdx, bound_channel: ChannelIdx, path_ref: Option<PathIdx>) -> Self {
        Self {
            qubit_id,
            owner_node,
            bound_channel,
            state: QubitState::Raw,
            epr_ref: None,
            path_ref,
            state_entered_at: 0.0,
        }
    }

    /// Apply `trigger` at time `now`. Panics on an edge the state machine does not have.
    pub fn transition(&mut self, trigger: Trigger, now: f64) -> QubitState {
        let next = self.state.next(trigger).unwrap_or_else(|| {
            panic!(
                "illegal qubit transition: qubit {} in {} on {:?}",
                self.qubit_id, self.state, trigger
            )
        });
        self.state = next;
        self.state_entered_at = now;
        if !next.holds_pair() {
            self.epr_ref = None;
        }
        next
    }
}
