//! Event-driven forwarding plane.
//!
//! A [`Simulation`] owns every qubit, every live EPR pair and the event queue
//! of one run. Each qubit tracks two views of the pair it holds: the physical
//! pair (updated the instant a remote swap extends or destroys it) and the
//! pair the owning node knows about (updated when the corresponding classical
//! message arrives). Forwarding decisions use the node's knowledge; a swap is
//! committed against the physical pairs and aborted when they disagree in a
//! way that would produce a pair outside every installed flow.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ScenarioConfig, DEFAULT_CLASSICAL_SPEED};
use crate::control::{allocate_qubits, build_instructions, fiber_distances, Phase, PathInstruction, TimingConfig};
use crate::engine::{Event, EventKind, RngStreams, Scheduler, Target};
use crate::error::{ConfigError, Result};
use crate::forwarding::{
    bbpssw, check_swap_conditions, merge_spans, segment_of, select_swap_partner, swap_werner, Candidate, Span,
};
use crate::link::{decayed_werner, initial_werner, sample_rounds_to_success, LinkPhysics, WernerState};
use crate::metrics::{ChannelMetrics, FlowMetrics, RunMetrics};
use crate::qubit::{PairId, PathIdx, Qubit, QubitId, QubitState, Trigger};
use crate::topology::{ChannelIdx, NetworkTopology, NodeIdx};

#[derive(Debug, Clone)]
pub enum Payload {
    Install { path: PathIdx },
    ReserveRequest { channel: ChannelIdx, qubit: QubitId },
    ReserveConfirm { qubit: QubitId, peer: QubitId },
    GenerationStart { qubit: QubitId, peer: QubitId },
    AttemptComplete { qubit: QubitId, peer: QubitId, rounds: u64 },
    SwapUpdate { qubit: QubitId, gen: u64, pair: PairId, span: Span },
    RemoteFailed { qubit: QubitId, gen: u64 },
    Expiry { pair: PairId },
    PurifResolve { keep: PairId, sacrifice: PairId },
    Freed { qubit: QubitId, gen: u64 },
    SlotBoundary { slot: u64, phase: Phase },
}

impl EventKind for Payload {
    fn kind(&self) -> &'static str {
        match self {
            Payload::Install { .. } => "ClassicalMessage:install",
            Payload::ReserveRequest { .. } => "ClassicalMessage:reserve",
            Payload::ReserveConfirm { .. } => "ClassicalMessage:confirm",
            Payload::GenerationStart { .. } => "GenerationStart",
            Payload::AttemptComplete { .. } => "AttemptComplete",
            Payload::SwapUpdate { .. } => "ClassicalMessage:swap_update",
            Payload::RemoteFailed { .. } => "ClassicalMessage:remote_failed",
            Payload::Expiry { .. } => "CutoffExpiry",
            Payload::PurifResolve { .. } => "ClassicalMessage:purif",
            Payload::Freed { .. } => "QubitReset",
            Payload::SlotBoundary { .. } => "SlotBoundary",
        }
    }
}

/// What a node may do with the pair a qubit holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Idle,
    Swap,
    Deliver(PathIdx),
}

#[derive(Debug, Clone)]
struct Slot {
    q: Qubit,
    /// 0 on the channel's primary side, 1 on the secondary side.
    side: usize,
    /// Bumped on every release so stale messages can be recognized.
    gen: u64,
    phys: Option<PairId>,
    known: Option<Span>,
    role: Role,
    rounds_needed: u32,
}

#[derive(Debug, Clone)]
struct Pair {
    /// Qubits at `span[0]` and `span[last]`.
    ends: [QubitId; 2],
    span: Span,
    w_ref: f64,
    t_ref: f64,
    created_at: f64,
    t_coh: f64,
    flow: PathIdx,
    rounds_done: u32,
}

impl Pair {
    fn other_end(&self, q: QubitId) -> QubitId {
        if self.ends[0] == q {
            self.ends[1]
        } else {
            debug_assert_eq!(self.ends[1], q);
            self.ends[0]
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Ending {
    Delivered,
    Decohered,
    Swapped,
    Purified,
}

/// One configured, ready-to-run simulation instance.
pub struct Simulation {
    topo: NetworkTopology,
    paths: Vec<PathInstruction>,
    timing: TimingConfig,
    duration: f64,
    seed: u64,
    idealized: bool,
    reset_latency: f64,
    sched: Scheduler<Payload>,
    qubits: Vec<Slot>,
    node_qubits: Vec<Vec<QubitId>>,
    side_qubits: Vec<[Vec<QubitId>; 2]>,
    deferred: Vec<VecDeque<QubitId>>,
    link: Vec<LinkPhysics>,
    initial_w: Vec<f64>,
    node_t_coh: Vec<f64>,
    pairs: HashMap<PairId, Pair>,
    next_pair: PairId,
    installed: Vec<Vec<bool>>,
    channel_rng: Vec<ChaCha8Rng>,
    node_rng: Vec<ChaCha8Rng>,
    phase: Option<(u64, Phase)>,
    gen_wait: Vec<(QubitId, QubitId)>,
    /// Qubits per node in PURIF or ELIGIBLE.
    ready: Vec<BTreeSet<QubitId>>,
    /// Qubits that became ready since internal or application work last ran.
    fresh_int: Vec<Vec<QubitId>>,
    fresh_app: Vec<Vec<QubitId>>,
    flows: Vec<FlowMetrics>,
    channels: Vec<ChannelMetrics>,
    conflicts: u64,
    stale: u64,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig, seed: u64) -> Result<Self> {
        let topo = NetworkTopology::load(cfg)?;
        let paths = build_instructions(&topo, &cfg.paths)?;
        let alloc = allocate_qubits(&topo, &paths)?;
        if cfg.timing.t_r.is_some() {
            return Err(ConfigError::ReactiveUnimplemented.into());
        }
        let timing = TimingConfig::from_section(&cfg.timing)?;
        let sim = &cfg.simulation;
        if !(sim.duration > 0.0) {
            return Err(ConfigError::invalid("simulation", "duration", "must be > 0").into());
        }
        if !(sim.qubit_reset_latency >= 0.0) {
            return Err(ConfigError::invalid("simulation", "qubit_reset_latency", "must be >= 0").into());
        }
        let default_t_coh = match sim.coherence_time {
            Some(t) if t > 0.0 => t,
            Some(_) => return Err(ConfigError::invalid("simulation", "coherence_time", "must be > 0").into()),
            None => f64::INFINITY,
        };
        let node_t_coh = topo
            .nodes
            .iter()
            .map(|n| match n.coherence_time {
                Some(t) if t > 0.0 => Ok(t),
                Some(_) => Err(ConfigError::invalid("node", &n.id, "coherence_time must be > 0")),
                None => Ok(default_t_coh),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;

        let streams = RngStreams::new(seed);
        let channel_rng = topo.channels.iter().map(|c| streams.stream("channel", &c.id)).collect();
        let node_rng = topo.nodes.iter().map(|n| streams.stream("node", &n.id)).collect();
        let link: Vec<LinkPhysics> = topo.channels.iter().map(LinkPhysics::of).collect();
        let initial_w = topo
            .channels
            .iter()
            .map(|c| initial_werner(c).map(WernerState::w))
            .collect::<std::result::Result<Vec<_>, _>>()?;

        // Qubits: channel by channel, primary side first.
        let mut qubits = Vec::new();
        let mut node_qubits = vec![Vec::new(); topo.nodes.len()];
        let mut side_qubits = vec![[Vec::new(), Vec::new()]; topo.channels.len()];
        for (c, ch) in topo.channels.iter().enumerate() {
            for (side, node) in [ch.primary, ch.secondary].into_iter().enumerate() {
                let owners: Vec<Option<PathIdx>> = match &alloc {
                    None => vec![None; ch.qubits_at(node) as usize],
                    Some(per_path) => per_path
                        .iter()
                        .enumerate()
                        .flat_map(|(p, a)| {
                            std::iter::repeat_n(Some(p), a.get(&(c, node)).copied().unwrap_or(0) as usize)
                        })
                        .collect(),
                };
                for path_ref in owners {
                    let id = qubits.len();
                    qubits.push(Slot {
                        q: Qubit::new(id, node, c, path_ref),
                        side,
                        gen: 0,
                        phys: None,
                        known: None,
                        role: Role::Idle,
                        rounds_needed: 0,
                    });
                    node_qubits[node].push(id);
                    side_qubits[c][side].push(id);
                }
            }
        }

        let flows = paths
            .iter()
            .map(|p| FlowMetrics {
                id: p.id.clone(),
                src: topo.nodes[p.src()].id.clone(),
                dst: topo.nodes[p.dst()].id.clone(),
                ..Default::default()
            })
            .collect();
        let channels = topo
            .channels
            .iter()
            .map(|c| ChannelMetrics {
                id: c.id.clone(),
                ..Default::default()
            })
            .collect();

        let n_nodes = topo.nodes.len();
        let n_paths = paths.len();
        let mut s = Simulation {
            deferred: vec![VecDeque::new(); topo.channels.len()],
            installed: vec![vec![false; n_paths]; n_nodes],
            topo,
            paths,
            timing,
            duration: sim.duration,
            seed,
            idealized: sim.idealized_coordination,
            reset_latency: sim.qubit_reset_latency,
            sched: Scheduler::new(),
            qubits,
            node_qubits,
            side_qubits,
            link,
            initial_w,
            node_t_coh,
            pairs: HashMap::new(),
            next_pair: 0,
            channel_rng,
            node_rng,
            phase: None,
            gen_wait: Vec::new(),
            ready: vec![BTreeSet::new(); n_nodes],
            fresh_int: vec![Vec::new(); n_nodes],
            fresh_app: vec![Vec::new(); n_nodes],
            flows,
            channels,
            conflicts: 0,
            stale: 0,
        };
        s.bootstrap(sim.controller.as_deref(), sim.controller_latency)?;
        Ok(s)
    }

    /// Record a `time seq target kind` line per dispatched event.
    pub fn with_trace(mut self, out: Box<dyn Write + Send>) -> Self {
        let sched = std::mem::take(&mut self.sched);
        self.sched = sched.with_trace(out);
        self
    }

    fn bootstrap(&mut self, controller: Option<&str>, latency: Option<f64>) -> Result<()> {
        if let Some(ts) = self.timing.slot_length() {
            debug_assert!(ts > 0.0);
            self.sched
                .schedule(0.0, Target::Controller, Payload::SlotBoundary { slot: 0, phase: Phase::External })
                .expect("time zero is never in the past");
        }
        let ctrl = match controller {
            Some(id) => self
                .topo
                .node_index(id)
                .ok_or_else(|| ConfigError::invalid("simulation", "controller", format!("unknown node `{id}`")))?,
            None => 0,
        };
        let dist = fiber_distances(&self.topo, ctrl);
        for p in 0..self.paths.len() {
            let at = self.paths[p].install_at;
            if at == 0.0 {
                for &n in &self.paths[p].route {
                    self.installed[n][p] = true;
                }
                continue;
            }
            for i in 0..self.paths[p].route.len() {
                let n = self.paths[p].route[i];
                let delay = latency.unwrap_or(dist[n] / DEFAULT_CLASSICAL_SPEED);
                if !delay.is_finite() {
                    return Err(ConfigError::invalid("simulation", "controller", "controller cannot reach every path node").into());
                }
                self.sched
                    .schedule(at + delay, Target::Node(n as u32), Payload::Install { path: p })
                    .expect("install times are non-negative");
            }
        }
        for c in 0..self.topo.channels.len() {
            for i in 0..self.side_qubits[c][0].len() {
                let q = self.side_qubits[c][0][i];
                self.start_reservation(q);
            }
        }
        Ok(())
    }

    /// Run to the configured duration and collect metrics.
    pub fn run(mut self) -> RunMetrics {
        let wall = Instant::now();
        let t_end = self.duration;
        while let Some(ev) = self.sched.pop_until(t_end) {
            self.dispatch(ev);
        }
        self.sched.finish_at(t_end);
        let violations = self.check_invariants();
        let mut flows = std::mem::take(&mut self.flows);
        for pair in self.pairs.values() {
            flows[pair.flow].live_pairs += 1;
        }
        RunMetrics {
            seed: self.seed,
            duration: self.duration,
            events: self.sched.dispatched(),
            conflicts: self.conflicts,
            stale_messages: self.stale,
            flows,
            channels: std::mem::take(&mut self.channels),
            violations,
            wall_clock_s: wall.elapsed().as_secs_f64(),
        }
    }

    pub fn topology(&self) -> &NetworkTopology {
        &self.topo
    }

    pub fn paths(&self) -> &[PathInstruction] {
        &self.paths
    }

    fn now(&self) -> f64 {
        self.sched.clock()
    }

    fn dispatch(&mut self, ev: Event<Payload>) {
        match ev.payload {
            Payload::Install { path } => {
                let Target::Node(n) = ev.target else { unreachable!() };
                self.on_install(n as usize, path);
            }
            Payload::ReserveRequest { channel, qubit } => self.on_reserve_request(channel, qubit),
            Payload::ReserveConfirm { qubit, peer } => {
                self.transition(qubit, Trigger::RemoteAvailable);
                self.launch_generation(qubit, peer);
            }
            Payload::GenerationStart { qubit, peer } => self.launch_generation(qubit, peer),
            Payload::AttemptComplete { qubit, peer, rounds } => self.on_attempt_complete(qubit, peer, rounds),
            Payload::SwapUpdate { qubit, gen, pair, span } => self.on_swap_update(qubit, gen, pair, span),
            Payload::RemoteFailed { qubit, gen } => self.on_remote_failed(qubit, gen),
            Payload::Expiry { pair } => self.on_expiry(pair),
            Payload::PurifResolve { keep, sacrifice } => self.on_purif_resolve(keep, sacrifice),
            Payload::Freed { qubit, gen } => {
                if self.qubits[qubit].gen == gen && self.qubits[qubit].q.state == QubitState::Release {
                    self.free(qubit);
                }
            }
            Payload::SlotBoundary { slot, phase } => self.on_slot_boundary(slot, phase),
        }
    }

    // ---- lifecycle helpers ----

    fn transition(&mut self, q: QubitId, t: Trigger) {
        let now = self.now();
        let state = self.qubits[q].q.transition(t, now);
        let x = self.qubits[q].q.owner_node;
        if matches!(state, QubitState::Purif | QubitState::Eligible) {
            self.ready[x].insert(q);
            self.fresh_int[x].push(q);
            self.fresh_app[x].push(q);
        } else {
            self.ready[x].remove(&q);
        }
    }

    fn one_way(&self, c: ChannelIdx) -> f64 {
        self.topo.channels[c].one_way_latency()
    }

    /// Classical latency along the consecutive nodes of `span`.
    fn span_latency(&self, span: &[NodeIdx]) -> f64 {
        span.windows(2)
            .map(|w| {
                let c = self.topo.channel_between(w[0], w[1]).expect("spans follow channels");
                self.one_way(c)
            })
            .sum()
    }

    fn channel_active_at(&self, node: NodeIdx, q: QubitId) -> bool {
        let slot = &self.qubits[q];
        match slot.q.path_ref {
            Some(p) => self.installed[node][p],
            None => (0..self.paths.len()).any(|p| self.installed[node][p] && self.paths[p].channels.contains(&slot.q.bound_channel)),
        }
    }

    fn start_reservation(&mut self, q: QubitId) {
        let node = self.qubits[q].q.owner_node;
        if self.qubits[q].q.state != QubitState::Raw || self.qubits[q].side != 0 || !self.channel_active_at(node, q) {
            return;
        }
        let c = self.qubits[q].q.bound_channel;
        self.transition(q, Trigger::StartReservation);
        self.channels[c].reservations += 1;
        let peer = self.topo.channels[c].secondary;
        let delay = self.one_way(c);
        self.sched
            .schedule_in(delay, Target::Node(peer as u32), Payload::ReserveRequest { channel: c, qubit: q });
    }

    fn on_reserve_request(&mut self, c: ChannelIdx, pq: QubitId) {
        let want = self.qubits[pq].q.path_ref;
        let free = self.side_qubits[c][1]
            .iter()
            .copied()
            .find(|&s| self.qubits[s].q.state == QubitState::Raw && self.qubits[s].q.path_ref == want);
        match free {
            Some(sq) => self.accept_reservation(sq, pq),
            None => self.deferred[c].push_back(pq),
        }
    }

    fn accept_reservation(&mut self, sq: QubitId, pq: QubitId) {
        self.transition(sq, Trigger::StartReservation);
        self.transition(sq, Trigger::RemoteAvailable);
        let c = self.qubits[sq].q.bound_channel;
        let primary = self.topo.channels[c].primary;
        let delay = self.one_way(c);
        self.sched
            .schedule_in(delay, Target::Node(primary as u32), Payload::ReserveConfirm { qubit: pq, peer: sq });
    }

    fn serve_deferred(&mut self, sq: QubitId) {
        let c = self.qubits[sq].q.bound_channel;
        let want = self.qubits[sq].q.path_ref;
        if let Some(i) = self.deferred[c].iter().position(|&pq| self.qubits[pq].q.path_ref == want) {
            let pq = self.deferred[c].remove(i).expect("index from position");
            self.accept_reservation(sq, pq);
        }
    }

    fn launch_generation(&mut self, pq: QubitId, sq: QubitId) {
        let c = self.qubits[pq].q.bound_channel;
        let LinkPhysics { p_success, round_duration: tau, .. } = self.link[c];
        let k = sample_rounds_to_success(p_success, &mut self.channel_rng[c]).expect("validated probability");
        let now = self.now();
        let target = Target::Channel(c as u32);
        match self.timing {
            TimingConfig::Async => {
                self.sched
                    .schedule_in(k as f64 * tau, target, Payload::AttemptComplete { qubit: pq, peer: sq, rounds: k });
            }
            TimingConfig::Sync { .. } => {
                let Some((slot, Phase::External)) = self.phase else {
                    self.gen_wait.push((pq, sq));
                    return;
                };
                let ext_end = self.timing.phase_start(slot, Phase::Internal);
                let mut fit = ((ext_end - now) / tau).floor().max(0.0) as u64;
                while fit > 0 && now + fit as f64 * tau >= ext_end {
                    fit -= 1;
                }
                if k <= fit {
                    self.sched
                        .schedule_in(k as f64 * tau, target, Payload::AttemptComplete { qubit: pq, peer: sq, rounds: k });
                } else {
                    // The attempts that fit all failed; resample next slot.
                    self.channels[c].attempts += fit;
                    self.gen_wait.push((pq, sq));
                }
            }
        }
    }

    fn on_attempt_complete(&mut self, pq: QubitId, sq: QubitId, rounds: u64) {
        let c = self.qubits[pq].q.bound_channel;
        let now = self.now();
        if let TimingConfig::Sync { .. } = self.timing {
            let ok = matches!(self.phase, Some((slot, Phase::External)) if now < self.timing.phase_start(slot, Phase::Internal));
            assert!(ok, "EPR created outside the external phase at t={now}");
        }
        self.channels[c].attempts += rounds;
        self.channels[c].successes += 1;
        let ch = &self.topo.channels[c];
        let span: Span = Arc::from([ch.primary, ch.secondary].as_slice());
        let t_coh = self.node_t_coh[ch.primary].min(self.node_t_coh[ch.secondary]);
        let flow = match self.qubits[pq].q.path_ref {
            Some(p) => p,
            None => self.flow_for_span(&span).expect("reserved channels lie on an installed path"),
        };
        let id = self.register_pair(Pair {
            ends: [pq, sq],
            span: span.clone(),
            w_ref: self.initial_w[c],
            t_ref: now,
            created_at: now,
            t_coh,
            flow,
            rounds_done: 0,
        });
        for q in [pq, sq] {
            self.transition(q, Trigger::EprCreated);
            let slot = &mut self.qubits[q];
            slot.q.epr_ref = Some(id);
            slot.phys = Some(id);
            slot.known = Some(span.clone());
            self.evaluate(q);
        }
        let (a, b) = (self.topo.channels[c].primary, self.topo.channels[c].secondary);
        self.try_act(a);
        self.try_act(b);
    }

    fn register_pair(&mut self, pair: Pair) -> PairId {
        let id = self.next_pair;
        self.next_pair += 1;
        self.flows[pair.flow].ledger.created += 1;
        if pair.t_coh.is_finite() {
            let at = pair.created_at + pair.t_coh;
            self.sched
                .schedule(at.max(self.now()), Target::Node(self.qubits[pair.ends[0]].q.owner_node as u32), Payload::Expiry { pair: id })
                .expect("expiry is not in the past");
        }
        self.pairs.insert(id, pair);
        id
    }

    fn end_pair(&mut self, id: PairId, how: Ending) -> Pair {
        let pair = self.pairs.remove(&id).expect("ending a live pair");
        let l = &mut self.flows[pair.flow].ledger;
        match how {
            Ending::Delivered => l.delivered += 1,
            Ending::Decohered => {
                l.decohered += 1;
                self.flows[pair.flow].decohered += 1;
            }
            Ending::Swapped => l.swap_consumed += 1,
            Ending::Purified => l.purif_consumed += 1,
        }
        pair
    }

    fn werner_now(&self, pair: &Pair) -> WernerState {
        decayed_werner(WernerState::new(pair.w_ref), self.now() - pair.t_ref, pair.t_coh)
    }

    /// First installed path (in declaration order) containing `span`.
    fn flow_for_span(&self, span: &[NodeIdx]) -> Option<PathIdx> {
        (0..self.paths.len()).find(|&p| segment_of(&self.paths[p].route, span).is_some())
    }

    /// Move `q` to RELEASE and on toward RAW.
    fn release(&mut self, q: QubitId, t: Trigger) {
        self.transition(q, t);
        let slot = &mut self.qubits[q];
        slot.phys = None;
        slot.known = None;
        slot.role = Role::Idle;
        slot.rounds_needed = 0;
        slot.gen += 1;
        if self.reset_latency > 0.0 {
            let node = slot.q.owner_node;
            let gen = slot.gen;
            self.sched
                .schedule_in(self.reset_latency, Target::Node(node as u32), Payload::Freed { qubit: q, gen });
        } else {
            self.free(q);
        }
    }

    fn free(&mut self, q: QubitId) {
        self.transition(q, Trigger::Freed);
        if self.qubits[q].side == 0 {
            self.start_reservation(q);
        } else {
            self.serve_deferred(q);
        }
    }

    // ---- forwarding decisions ----

    /// Decide whether the node may act on the pair `q` holds and move it on
    /// to PURIF/ELIGIBLE. Called on qubits in ENTANGLED.
    fn evaluate(&mut self, q: QubitId) {
        debug_assert_eq!(self.qubits[q].q.state, QubitState::Entangled);
        let Some((role, rounds)) = self.classify(q) else {
            return;
        };
        self.transition(q, Trigger::SwapConditionsMet);
        let slot = &mut self.qubits[q];
        slot.role = role;
        slot.rounds_needed = rounds;
        self.maybe_finish_purification(q);
    }

    fn classify(&self, q: QubitId) -> Option<(Role, u32)> {
        let slot = &self.qubits[q];
        let x = slot.q.owner_node;
        let span = slot.known.as_ref()?;
        match slot.q.path_ref {
            Some(p) => {
                if !self.installed[x][p] {
                    return None;
                }
                let path = &self.paths[p];
                let (lo, hi) = segment_of(&path.route, span).expect("pair spans stay on their path");
                let pos = if path.route[lo] == x { lo } else { hi };
                let far = if pos == lo { hi } else { lo };
                if !check_swap_conditions(&path.swap_policy, path.route.len(), pos, far) {
                    return None;
                }
                let role = if pos == 0 || pos == path.route.len() - 1 { Role::Deliver(p) } else { Role::Swap };
                Some((role, path.purification.rounds_for(lo, hi)))
            }
            None => {
                let installed = || (0..self.paths.len()).filter(move |&p| self.installed[x][p]);
                for p in installed() {
                    let path = &self.paths[p];
                    if span.len() == path.route.len() && segment_of(&path.route, span).is_some() {
                        return Some((Role::Deliver(p), path.purification.rounds_for(0, path.route.len() - 1)));
                    }
                }
                for p in installed() {
                    let path = &self.paths[p];
                    if let Some((lo, hi)) = segment_of(&path.route, span) {
                        let pos = path.position(x).expect("x ends the span");
                        if pos != 0 && pos != path.route.len() - 1 {
                            return Some((Role::Swap, path.purification.rounds_for(lo, hi)));
                        }
                    }
                }
                None
            }
        }
    }

    /// PURIF -> ELIGIBLE once the pair has had its configured rounds.
    fn maybe_finish_purification(&mut self, q: QubitId) {
        let slot = &self.qubits[q];
        if slot.q.state != QubitState::Purif {
            return;
        }
        let done = slot.rounds_needed == 0
            || (slot.phys == slot.q.epr_ref
                && slot.phys.is_some_and(|p| self.pairs[&p].rounds_done >= slot.rounds_needed));
        if done {
            self.transition(q, Trigger::PurificationDone);
        }
    }

    fn allow_internal(&self) -> bool {
        matches!(self.phase, None | Some((_, Phase::Internal)))
    }

    fn allow_application(&self) -> bool {
        matches!(self.phase, None | Some((_, Phase::Application)))
    }

    /// Perform every purification, swap and delivery node `x` can do now.
    /// Only qubits that became ready since the last pass can enable new work.
    fn try_act(&mut self, x: NodeIdx) {
        if self.allow_internal() {
            while !self.fresh_int[x].is_empty() {
                let fresh = std::mem::take(&mut self.fresh_int[x]);
                self.try_purify_at(x, &fresh);
                self.try_swaps_at(x, &fresh);
            }
        }
        if self.allow_application() && !self.fresh_app[x].is_empty() {
            let fresh = std::mem::take(&mut self.fresh_app[x]);
            self.try_deliver_at(&fresh);
        }
    }

    fn in_sync(&self, q: QubitId, state: QubitState) -> Option<PairId> {
        let s = &self.qubits[q];
        (s.q.state == state && s.phys.is_some() && s.phys == s.q.epr_ref).then(|| s.phys.unwrap())
    }

    fn purif_waiting(&self, q: QubitId) -> Option<PairId> {
        let p = self.in_sync(q, QubitState::Purif)?;
        let pair = &self.pairs[&p];
        (pair.rounds_done < self.qubits[q].rounds_needed
            && self.in_sync(pair.other_end(q), QubitState::Purif) == Some(p))
        .then_some(p)
    }

    fn try_purify_at(&mut self, x: NodeIdx, fresh: &[QubitId]) {
        for &a in fresh {
            let Some(pa) = self.purif_waiting(a) else { continue };
            let cands: Vec<Candidate> = self.ready[x]
                .iter()
                .filter(|&&b| b != a)
                .map(|&b| Candidate { qubit: b, waiting_since: self.qubits[b].q.state_entered_at })
                .collect();
            let span = &self.pairs[&pa].span;
            let partner = select_swap_partner(&cands, |b| {
                self.qubits[b].q.path_ref == self.qubits[a].q.path_ref
                    && self.purif_waiting(b).is_some_and(|pb| {
                        let sb = &self.pairs[&pb].span;
                        sb == span || sb.iter().rev().eq(span.iter())
                    })
            });
            if let Some(b) = partner {
                self.start_purification(pa, self.qubits[b].phys.unwrap());
            }
        }
    }

    fn start_purification(&mut self, p1: PairId, p2: PairId) {
        let (w1, w2) = (self.werner_now(&self.pairs[&p1]).w(), self.werner_now(&self.pairs[&p2]).w());
        let (keep, sacrifice) = if w2 > w1 { (p2, p1) } else { (p1, p2) };
        let flow = self.pairs[&keep].flow;
        self.flows[flow].purif_attempts += 1;
        for p in [keep, sacrifice] {
            for q in self.pairs[&p].ends {
                self.transition(q, Trigger::StartRound);
            }
        }
        let delay = 2.0 * self.span_latency(&self.pairs[&keep].span.clone());
        let node = self.qubits[self.pairs[&keep].ends[0]].q.owner_node;
        self.sched
            .schedule_in(delay, Target::Node(node as u32), Payload::PurifResolve { keep, sacrifice });
    }

    fn on_purif_resolve(&mut self, keep: PairId, sacrifice: PairId) {
        let mut touched = Vec::new();
        match (self.pairs.contains_key(&keep), self.pairs.contains_key(&sacrifice)) {
            (true, true) => {
                let fk = self.werner_now(&self.pairs[&keep]).fidelity();
                let fs = self.werner_now(&self.pairs[&sacrifice]).fidelity();
                let (p, f) = bbpssw(fk, fs);
                let node = self.qubits[self.pairs[&keep].ends[0]].q.owner_node;
                let ok = self.node_rng[node].gen::<f64>() < p;
                let sac = self.end_pair(sacrifice, Ending::Purified);
                for q in sac.ends {
                    touched.push(self.qubits[q].q.owner_node);
                    self.release(q, Trigger::Consumed);
                }
                if ok {
                    let now = self.now();
                    let flow = {
                        let pair = self.pairs.get_mut(&keep).unwrap();
                        pair.w_ref = WernerState::from_fidelity(f).w();
                        pair.t_ref = now;
                        pair.rounds_done += 1;
                        pair.flow
                    };
                    self.flows[flow].purif_successes += 1;
                    for q in self.pairs[&keep].ends {
                        self.transition(q, Trigger::RoundSuccess);
                        self.maybe_finish_purification(q);
                    }
                } else {
                    let kept = self.end_pair(keep, Ending::Purified);
                    for q in kept.ends {
                        self.release(q, Trigger::RoundFailure);
                    }
                }
            }
            (true, false) => {
                let kept = self.end_pair(keep, Ending::Purified);
                for q in kept.ends {
                    touched.push(self.qubits[q].q.owner_node);
                    self.release(q, Trigger::RoundFailure);
                }
            }
            (false, true) => {
                let sac = self.end_pair(sacrifice, Ending::Purified);
                for q in sac.ends {
                    touched.push(self.qubits[q].q.owner_node);
                    self.release(q, Trigger::Consumed);
                }
            }
            (false, false) => {}
        }
        for n in touched {
            self.try_act(n);
        }
    }

    /// Whether a pair over `span` may exist for the flow context of qubit `q`.
    fn span_allowed(&self, q: QubitId, span: &[NodeIdx]) -> bool {
        let x = self.qubits[q].q.owner_node;
        match self.qubits[q].q.path_ref {
            Some(p) => segment_of(&self.paths[p].route, span).is_some(),
            None => (0..self.paths.len()).any(|p| self.installed[x][p] && segment_of(&self.paths[p].route, span).is_some()),
        }
    }

    fn swap_ready(&self, q: QubitId) -> bool {
        self.qubits[q].q.state == QubitState::Eligible && self.qubits[q].role == Role::Swap
    }

    fn try_swaps_at(&mut self, x: NodeIdx, fresh: &[QubitId]) {
        let mut fresh = fresh.to_vec();
        fresh.sort_by(|&a, &b| {
            let (sa, sb) = (&self.qubits[a].q, &self.qubits[b].q);
            sa.state_entered_at.total_cmp(&sb.state_entered_at).then(a.cmp(&b))
        });
        fresh.dedup();
        for a in fresh {
            if !self.swap_ready(a) {
                continue;
            }
            let cands: Vec<Candidate> = self.ready[x]
                .iter()
                .filter(|&&b| b != a)
                .map(|&b| Candidate { qubit: b, waiting_since: self.qubits[b].q.state_entered_at })
                .collect();
            let ka = self.qubits[a].known.as_ref().unwrap();
            let partner = select_swap_partner(&cands, |b| {
                if !self.swap_ready(b) || self.qubits[b].q.path_ref != self.qubits[a].q.path_ref {
                    return false;
                }
                let kb = self.qubits[b].known.as_ref().unwrap();
                merge_spans(ka, x, kb).is_some_and(|m| self.span_allowed(a, &m))
            });
            if let Some(b) = partner {
                self.attempt_swap(x, a, b);
            }
        }
    }

    fn attempt_swap(&mut self, x: NodeIdx, a: QubitId, b: QubitId) {
        let (pa, pb) = (self.qubits[a].phys, self.qubits[b].phys);
        if let (Some(pa), Some(pb)) = (pa, pb) {
            let merged = merge_spans(&self.pairs[&pa].span, x, &self.pairs[&pb].span).filter(|m| self.span_allowed(a, m));
            let Some(merged) = merged else {
                // The physical pairs have moved on since the last update; learn
                // their true extent instead of creating an orphan pair.
                self.conflicts += 1;
                for (q, p) in [(a, pa), (b, pb)] {
                    let span = self.pairs[&p].span.clone();
                    self.transition(q, Trigger::SwapUpdate);
                    let slot = &mut self.qubits[q];
                    slot.q.epr_ref = Some(p);
                    slot.known = Some(span);
                    slot.role = Role::Idle;
                    self.evaluate(q);
                }
                return;
            };
            let flow = self.qubits[a].q.path_ref.or_else(|| self.flow_for_span(&merged)).expect("allowed span has a flow");
            self.flows[flow].swap_attempts += 1;
            let q_swap = self.topo.nodes[x].swap_success_prob;
            let ok = self.node_rng[x].gen::<f64>() < q_swap;
            let left = self.end_pair(pa, Ending::Swapped);
            let right = self.end_pair(pb, Ending::Swapped);
            let (fa, fb) = (left.other_end(a), right.other_end(b));
            self.release(a, Trigger::Consumed);
            self.release(b, Trigger::Consumed);
            let at_x = merged.iter().position(|&n| n == x).expect("swap node inside merged span");
            let lat_a = self.span_latency(&merged[..=at_x]);
            let lat_b = self.span_latency(&merged[at_x..]);
            let (lat_a, lat_b) = if self.idealized { (0.0, 0.0) } else { (lat_a, lat_b) };
            if ok {
                self.flows[flow].swap_successes += 1;
                let now = self.now();
                let w = swap_werner(self.werner_now(&left), self.werner_now(&right));
                let id = self.register_pair(Pair {
                    ends: [fa, fb],
                    span: merged.clone(),
                    w_ref: w.w(),
                    t_ref: now,
                    created_at: left.created_at.min(right.created_at),
                    t_coh: left.t_coh.min(right.t_coh),
                    flow,
                    rounds_done: 0,
                });
                for (f, lat) in [(fa, lat_a), (fb, lat_b)] {
                    self.qubits[f].phys = Some(id);
                    let (node, gen) = (self.qubits[f].q.owner_node, self.qubits[f].gen);
                    self.sched.schedule_in(
                        lat,
                        Target::Node(node as u32),
                        Payload::SwapUpdate { qubit: f, gen, pair: id, span: merged.clone() },
                    );
                }
            } else {
                for (f, lat) in [(fa, lat_a), (fb, lat_b)] {
                    self.notify_failed(f, lat);
                }
            }
            return;
        }
        // At least one of the pairs was already destroyed remotely: the
        // measurement cannot produce a pair, so the live side is lost too.
        let flow = self.qubits[a].q.path_ref.unwrap_or_else(|| {
            [pa, pb].into_iter().flatten().map(|p| self.pairs[&p].flow).next().unwrap_or(0)
        });
        self.flows[flow].swap_attempts += 1;
        for (q, p) in [(a, pa), (b, pb)] {
            if let Some(p) = p {
                let pair = self.end_pair(p, Ending::Swapped);
                let f = pair.other_end(q);
                let lat = if self.idealized { 0.0 } else { self.span_latency(&pair.span) };
                self.notify_failed(f, lat);
            }
        }
        self.release(a, Trigger::Consumed);
        self.release(b, Trigger::Consumed);
    }

    fn notify_failed(&mut self, q: QubitId, latency: f64) {
        self.qubits[q].phys = None;
        let (node, gen) = (self.qubits[q].q.owner_node, self.qubits[q].gen);
        self.sched
            .schedule_in(latency, Target::Node(node as u32), Payload::RemoteFailed { qubit: q, gen });
    }

    fn try_deliver_at(&mut self, fresh: &[QubitId]) {
        for &q in fresh {
            let Role::Deliver(path) = self.qubits[q].role else { continue };
            let Some(p) = self.in_sync(q, QubitState::Eligible) else { continue };
            let other = self.pairs[&p].other_end(q);
            if self.in_sync(other, QubitState::Eligible) != Some(p) || !matches!(self.qubits[other].role, Role::Deliver(_)) {
                continue;
            }
            let pair = self.end_pair(p, Ending::Delivered);
            let fidelity = self.werner_now(&pair).fidelity();
            let f = &mut self.flows[path];
            f.delivered += 1;
            f.fidelity_sum += fidelity;
            self.release(q, Trigger::Consumed);
            self.release(other, Trigger::Consumed);
        }
    }

    // ---- message handlers ----

    fn on_install(&mut self, x: NodeIdx, path: PathIdx) {
        if self.installed[x][path] {
            return;
        }
        self.installed[x][path] = true;
        for i in 0..self.node_qubits[x].len() {
            let q = self.node_qubits[x][i];
            match self.qubits[q].q.state {
                QubitState::Raw if self.qubits[q].side == 0 => self.start_reservation(q),
                QubitState::Entangled => self.evaluate(q),
                _ => {}
            }
        }
        self.try_act(x);
    }

    fn on_swap_update(&mut self, q: QubitId, gen: u64, pair: PairId, span: Span) {
        let slot = &self.qubits[q];
        if slot.gen != gen || slot.q.epr_ref.is_some_and(|k| k >= pair) {
            self.stale += 1;
            return;
        }
        assert!(
            slot.q.state != QubitState::Pending,
            "swap update for qubit {q} during a purification round"
        );
        assert!(slot.q.state.holds_pair(), "swap update for qubit {q} in {}", slot.q.state);
        self.transition(q, Trigger::SwapUpdate);
        let slot = &mut self.qubits[q];
        slot.q.epr_ref = Some(pair);
        slot.known = Some(span);
        slot.role = Role::Idle;
        slot.rounds_needed = 0;
        self.evaluate(q);
        let x = self.qubits[q].q.owner_node;
        self.try_act(x);
    }

    fn on_remote_failed(&mut self, q: QubitId, gen: u64) {
        if self.qubits[q].gen != gen {
            self.stale += 1;
            return;
        }
        assert!(self.qubits[q].phys.is_none(), "failure notice for qubit {q} that still holds a pair");
        self.release(q, Trigger::RemoteFailed);
        let x = self.qubits[q].q.owner_node;
        self.try_act(x);
    }

    fn on_expiry(&mut self, id: PairId) {
        let Some(pair) = self.pairs.get(&id) else { return };
        if pair.created_at + pair.t_coh > self.now() {
            return;
        }
        let pair = self.end_pair(id, Ending::Decohered);
        for q in pair.ends {
            self.release(q, Trigger::Decohered);
        }
        for q in pair.ends {
            let x = self.qubits[q].q.owner_node;
            self.try_act(x);
        }
    }

    fn on_slot_boundary(&mut self, slot: u64, phase: Phase) {
        self.phase = Some((slot, phase));
        let (ns, np, at) = self.timing.advance_slot(slot, phase);
        if at <= self.duration {
            self.sched
                .schedule(at, Target::Controller, Payload::SlotBoundary { slot: ns, phase: np })
                .expect("slot boundaries move forward");
        }
        match phase {
            Phase::External => {
                for (pq, sq) in std::mem::take(&mut self.gen_wait) {
                    self.launch_generation(pq, sq);
                }
            }
            Phase::Internal | Phase::Application => {
                for x in 0..self.topo.nodes.len() {
                    let all: Vec<QubitId> = self.ready[x].iter().copied().collect();
                    match phase {
                        Phase::Internal => self.fresh_int[x] = all,
                        _ => self.fresh_app[x] = all,
                    }
                    self.try_act(x);
                }
            }
        }
    }

    // ---- invariants ----

    /// Structural invariants over qubits, pairs and the per-flow ledger.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (i, s) in self.qubits.iter().enumerate() {
            if s.q.state.holds_pair() != s.q.epr_ref.is_some() {
                v.push(format!("qubit {i}: state {} with epr_ref {:?}", s.q.state, s.q.epr_ref));
            }
            if let Some(p) = s.phys {
                match self.pairs.get(&p) {
                    Some(pair) if pair.ends.contains(&i) => {}
                    _ => v.push(format!("qubit {i}: physical pair {p} does not list it")),
                }
                if !s.q.state.holds_pair() {
                    v.push(format!("qubit {i}: holds pair {p} in state {}", s.q.state));
                }
            }
        }
        let mut live = vec![0u64; self.paths.len()];
        for (id, pair) in &self.pairs {
            live[pair.flow] += 1;
            for q in pair.ends {
                if self.qubits[q].phys != Some(*id) {
                    v.push(format!("pair {id}: end qubit {q} does not hold it"));
                }
            }
            let (a, b) = (pair.span[0], pair.span[pair.span.len() - 1]);
            let ends = (self.qubits[pair.ends[0]].q.owner_node, self.qubits[pair.ends[1]].q.owner_node);
            if ends != (a, b) {
                v.push(format!("pair {id}: end qubits sit at {ends:?}, span ends at ({a}, {b})"));
            }
            if self.flow_for_span(&pair.span).is_none() {
                v.push(format!("pair {id}: span lies on no installed path"));
            }
        }
        for (f, n) in self.flows.iter().zip(&live) {
            if !f.ledger.balances(*n) {
                v.push(format!("flow {}: ledger {:?} with {n} live pairs", f.id, f.ledger));
            }
        }
        let total: usize = QubitState::ALL
            .iter()
            .map(|&st| self.qubits.iter().filter(|s| s.q.state == st).count())
            .sum();
        if total != self.qubits.len() {
            v.push(format!("state occupancy {total} != {} qubits", self.qubits.len()));
        }
        v
    }

    /// Number of qubits in each lifecycle state, in [`QubitState::ALL`] order.
    pub fn state_occupancy(&self) -> [usize; 8] {
        let mut out = [0; 8];
        for s in &self.qubits {
            let i = QubitState::ALL.iter().position(|&st| st == s.q.state).unwrap();
            out[i] += 1;
        }
        out
    }
}

/// Load, simulate and measure one scenario.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<RunMetrics> {
    Ok(Simulation::new(cfg, seed)?.run())
}
