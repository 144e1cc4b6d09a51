//! Proactive centralized control: routing, path instructions, qubit
//! pre-allocation and slot timing.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use crate::config::{MultiplexingKind, OrderStage, PathConfig, SwapPolicyConfig, TimingKind, TimingSection};
use crate::error::ConfigError;
use crate::forwarding::{MultiplexingMode, PurificationConfig, PurificationTarget, SwapPolicy};
use crate::topology::{ChannelIdx, NetworkTopology, NodeIdx};

/// Controller-installed route with its forwarding configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PathInstruction {
    pub id: String,
    pub request_id: usize,
    pub route: Vec<NodeIdx>,
    /// Channel between `route[i]` and `route[i + 1]`.
    pub channels: Vec<ChannelIdx>,
    pub swap_policy: SwapPolicy,
    pub purification: PurificationConfig,
    pub multiplexing: MultiplexingMode,
    pub install_at: f64,
    pub active: bool,
}

impl PathInstruction {
    pub fn src(&self) -> NodeIdx {
        self.route[0]
    }

    pub fn dst(&self) -> NodeIdx {
        self.route[self.route.len() - 1]
    }

    pub fn position(&self, node: NodeIdx) -> Option<usize> {
        self.route.iter().position(|&n| n == node)
    }

    pub fn length_km(&self, topo: &NetworkTopology) -> f64 {
        self.channels.iter().map(|&c| topo.channels[c].length_km).sum()
    }
}

/// Minimum-hop route from `src` to `dst`; among equal-hop routes the
/// lexicographically smallest sequence of node ids wins.
pub fn compute_path(topo: &NetworkTopology, src: NodeIdx, dst: NodeIdx) -> Result<Vec<NodeIdx>, ConfigError> {
    let n = topo.nodes.len();
    let disconnected = || ConfigError::Disconnected {
        src: topo.nodes[src].id.clone(),
        dst: topo.nodes[dst].id.clone(),
    };
    if src == dst {
        return Err(ConfigError::Path {
            path: format!("{}-{}", topo.nodes[src].id, topo.nodes[dst].id),
            reason: "source equals destination".into(),
        });
    }
    // Hop distances to dst, then a greedy walk picking the smallest id among
    // neighbors one hop closer.
    let mut dist = vec![usize::MAX; n];
    dist[dst] = 0;
    let mut queue = VecDeque::from([dst]);
    while let Some(u) = queue.pop_front() {
        for v in topo.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    if dist[src] == usize::MAX {
        return Err(disconnected());
    }
    let mut route = vec![src];
    let mut cur = src;
    while cur != dst {
        cur = topo
            .neighbors(cur)
            .filter(|&v| dist[v] + 1 == dist[cur])
            .min_by(|&a, &b| topo.nodes[a].id.cmp(&topo.nodes[b].id))
            .expect("a closer neighbor exists on a shortest path");
        route.push(cur);
    }
    Ok(route)
}

/// Fiber distance in km from `from` to every node (infinite if unreachable).
pub fn fiber_distances(topo: &NetworkTopology, from: NodeIdx) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; topo.nodes.len()];
    dist[from] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((OrdF64(0.0), from)));
    while let Some(Reverse((OrdF64(d), u))) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &c in &topo.adjacency[u] {
            let ch = &topo.channels[c];
            let v = ch.other(u);
            let nd = d + ch.length_km;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Reverse((OrdF64(nd), v)));
            }
        }
    }
    dist
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn path_err(id: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Path {
        path: id.to_string(),
        reason: reason.into(),
    }
}

/// Resolve and validate the `paths` section against the topology.
pub fn build_instructions(topo: &NetworkTopology, paths: &[PathConfig]) -> Result<Vec<PathInstruction>, ConfigError> {
    let mut out: Vec<PathInstruction> = Vec::with_capacity(paths.len());
    for (request_id, p) in paths.iter().enumerate() {
        let node = |name: &str, id: &str| {
            topo.node_index(name)
                .ok_or_else(|| path_err(id, format!("unknown node `{name}`")))
        };
        let label = p.id.clone().unwrap_or_else(|| match (&p.src, &p.dst, &p.route) {
            (Some(s), Some(d), _) => format!("{s}{d}"),
            (_, _, Some(r)) if !r.is_empty() => format!("{}{}", r[0], r[r.len() - 1]),
            _ => format!("path{request_id}"),
        });
        if out.iter().any(|q| q.id == label) {
            return Err(ConfigError::Duplicate { kind: "path", id: label });
        }
        let route = match (&p.route, &p.src, &p.dst) {
            (Some(r), _, _) => {
                let route = r.iter().map(|n| node(n, &label)).collect::<Result<Vec<_>, _>>()?;
                if let (Some(s), Some(d)) = (&p.src, &p.dst) {
                    if route.first() != Some(&node(s, &label)?) || route.last() != Some(&node(d, &label)?) {
                        return Err(path_err(&label, "route endpoints disagree with src/dst"));
                    }
                }
                route
            }
            (None, Some(s), Some(d)) => compute_path(topo, node(s, &label)?, node(d, &label)?)?,
            _ => return Err(path_err(&label, "either `route` or both `src` and `dst` are required")),
        };
        if route.len() < 2 {
            return Err(path_err(&label, "route needs at least two nodes"));
        }
        let mut sorted = route.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != route.len() {
            return Err(path_err(&label, "route revisits a node"));
        }
        let channels = route
            .windows(2)
            .map(|w| {
                topo.channel_between(w[0], w[1]).ok_or_else(|| {
                    path_err(&label, format!("no channel between `{}` and `{}`", topo.nodes[w[0]].id, topo.nodes[w[1]].id))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;

        let pos = |name: &str| -> Result<usize, ConfigError> {
            let n = node(name, &label)?;
            route
                .iter()
                .position(|&r| r == n)
                .ok_or_else(|| path_err(&label, format!("node `{name}` is not on the route")))
        };

        let swap_policy = match &p.swap_policy {
            SwapPolicyConfig::Named(name) => match name.as_str() {
                "asap" => SwapPolicy::Asap,
                "l2r" => SwapPolicy::left_to_right(route.len()),
                "r2l" => SwapPolicy::right_to_left(route.len()),
                other => return Err(path_err(&label, format!("unknown swap policy `{other}`"))),
            },
            SwapPolicyConfig::Order(stages) => {
                let mut positions = Vec::with_capacity(stages.len());
                let mut seen = vec![false; route.len()];
                for stage in stages {
                    let names: Vec<&String> = match stage {
                        OrderStage::Node(n) => vec![n],
                        OrderStage::Group(g) => g.iter().collect(),
                    };
                    let mut group = Vec::new();
                    for n in names {
                        let at = pos(n)?;
                        if std::mem::replace(&mut seen[at], true) {
                            return Err(path_err(&label, format!("node `{n}` appears twice in the swap order")));
                        }
                        group.push(at);
                    }
                    positions.push(group);
                }
                SwapPolicy::from_stage_positions(route.len(), positions)
            }
        };
        swap_policy.validate(route.len()).map_err(|e| path_err(&label, e))?;

        let mut targets = Vec::new();
        for t in &p.purification {
            let (a, b) = (pos(&t.segment[0])?, pos(&t.segment[1])?);
            if a == b {
                return Err(path_err(&label, "purification segment needs two distinct nodes"));
            }
            targets.push(PurificationTarget { lo: a.min(b), hi: a.max(b), rounds: t.rounds });
        }

        let multiplexing = match p.multiplexing.mode {
            MultiplexingKind::Statistical => {
                if !p.multiplexing.mv.is_empty() {
                    return Err(path_err(&label, "statistical multiplexing takes no multiplexing vector"));
                }
                if !matches!(swap_policy, SwapPolicy::Asap) {
                    return Err(path_err(&label, "statistical multiplexing supports only the asap policy"));
                }
                MultiplexingMode::Statistical
            }
            kind => {
                let mut mv = BTreeMap::new();
                for (cid, per_node) in &p.multiplexing.mv {
                    let c = topo
                        .channel_index(cid)
                        .filter(|c| channels.contains(c))
                        .ok_or_else(|| path_err(&label, format!("channel `{cid}` is not on the route")))?;
                    let mut entry = BTreeMap::new();
                    for (nid, &q) in per_node {
                        let n = node(nid, &label)?;
                        if n != topo.channels[c].primary && n != topo.channels[c].secondary {
                            return Err(path_err(&label, format!("node `{nid}` is not an endpoint of `{cid}`")));
                        }
                        entry.insert(n, q);
                    }
                    mv.insert(c, entry);
                }
                if kind == MultiplexingKind::Blocking && mv.is_empty() {
                    MultiplexingMode::Blocking
                } else {
                    MultiplexingMode::BufferSpace(mv)
                }
            }
        };
        if !(p.install_at >= 0.0) {
            return Err(path_err(&label, "install_at must be >= 0"));
        }

        out.push(PathInstruction {
            id: label,
            request_id,
            route,
            channels,
            swap_policy,
            purification: PurificationConfig { targets },
            multiplexing,
            install_at: p.install_at,
            active: true,
        });
    }
    let stat = out.iter().filter(|p| p.multiplexing.is_statistical()).count();
    if stat != 0 && stat != out.len() {
        return Err(path_err(&out[0].id, "statistical multiplexing cannot be mixed with pre-allocated paths"));
    }
    Ok(out)
}

/// Qubits each path owns on each channel side: `(channel, node) -> count`.
pub type PathAllocation = BTreeMap<(ChannelIdx, NodeIdx), u32>;

/// Pre-allocate channel qubits to paths. Statistical multiplexing yields no
/// allocation (every qubit is shared).
pub fn allocate_qubits(topo: &NetworkTopology, paths: &[PathInstruction]) -> Result<Option<Vec<PathAllocation>>, ConfigError> {
    if paths.is_empty() || paths[0].multiplexing.is_statistical() {
        return Ok(None);
    }
    let mut alloc = vec![PathAllocation::new(); paths.len()];
    for (c, ch) in topo.channels.iter().enumerate() {
        let users: Vec<usize> = (0..paths.len()).filter(|&p| paths[p].channels.contains(&c)).collect();
        if users.is_empty() {
            continue;
        }
        for node in [ch.primary, ch.secondary] {
            let side = ch.qubits_at(node);
            let explicit = |p: usize| match &paths[p].multiplexing {
                MultiplexingMode::BufferSpace(mv) => mv.get(&c).and_then(|m| m.get(&node)).copied(),
                _ => None,
            };
            let fixed: u32 = users.iter().filter_map(|&p| explicit(p)).sum();
            if fixed > side {
                return Err(path_err(
                    &paths[users[0]].id,
                    format!("multiplexing vectors on `{}` at `{}` need {fixed} qubits, side has {side}", ch.id, topo.nodes[node].id),
                ));
            }
            let open: Vec<usize> = users.iter().copied().filter(|&p| explicit(p).is_none()).collect();
            let rest = side - fixed;
            for (k, &p) in users.iter().enumerate() {
                let _ = k;
                let q = match explicit(p) {
                    Some(q) => q,
                    None => {
                        let i = open.iter().position(|&o| o == p).unwrap() as u32;
                        let n = open.len() as u32;
                        rest / n + u32::from(i < rest % n)
                    }
                };
                if q == 0 {
                    return Err(path_err(
                        &paths[p].id,
                        format!("no qubits allocated on `{}` at `{}`", ch.id, topo.nodes[node].id),
                    ));
                }
                alloc[p].insert((c, node), q);
            }
        }
    }
    Ok(Some(alloc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    External,
    Internal,
    Application,
}

/// Timing mode of the forwarding plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimingConfig {
    Async,
    Sync { t_ext: f64, t_int: f64, t_app: f64 },
}

impl TimingConfig {
    pub fn from_section(t: &TimingSection) -> Result<Self, ConfigError> {
        match t.mode {
            TimingKind::Async => Ok(TimingConfig::Async),
            TimingKind::Sync => {
                let get = |name: &str, v: Option<f64>| match v {
                    Some(x) if x > 0.0 => Ok(x),
                    _ => Err(ConfigError::invalid("timing", name, "sync phases must be given and > 0")),
                };
                Ok(TimingConfig::Sync {
                    t_ext: get("t_ext", t.t_ext)?,
                    t_int: get("t_int", t.t_int)?,
                    t_app: get("t_app", t.t_app)?,
                })
            }
        }
    }

    pub fn slot_length(&self) -> Option<f64> {
        match *self {
            TimingConfig::Async => None,
            TimingConfig::Sync { t_ext, t_int, t_app } => Some(t_ext + t_int + t_app),
        }
    }

    /// Start time of `phase` in slot `slot`.
    pub fn phase_start(&self, slot: u64, phase: Phase) -> f64 {
        let TimingConfig::Sync { t_ext, t_int, .. } = *self else {
            return 0.0;
        };
        let base = slot as f64 * self.slot_length().unwrap();
        match phase {
            Phase::External => base,
            Phase::Internal => base + t_ext,
            Phase::Application => base + t_ext + t_int,
        }
    }

    /// Phase that follows `(slot, phase)`, with its start time.
    pub fn advance_slot(&self, slot: u64, phase: Phase) -> (u64, Phase, f64) {
        let (s, p) = match phase {
            Phase::External => (slot, Phase::Internal),
            Phase::Internal => (slot, Phase::Application),
            Phase::Application => (slot + 1, Phase::External),
        };
        (s, p, self.phase_start(s, p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ChannelConfig, MultiplexingConfig, NodeConfig};
    use crate::link::Architecture;

    fn topo(edges: &[(&str, &str)], cap: u32, q: u32) -> NetworkTopology {
        let mut names: Vec<&str> = edges.iter().flat_map(|e| [e.0, e.1]).collect();
        names.sort_unstable();
        names.dedup();
        let nodes: Vec<NodeConfig> = names
            .iter()
            .map(|n| NodeConfig {
                id: n.to_string(),
                capacity: cap,
                local_op_latency: 1e-5,
                swap_prob: 1.0,
                end_node: false,
                coherence_time: None,
            })
            .collect();
        let chans: Vec<ChannelConfig> = edges
            .iter()
            .map(|(a, b)| ChannelConfig {
                id: None,
                endpoints: [a.to_string(), b.to_string()],
                primary: None,
                length_km: 30.0,
                attenuation_length_km: Some(21.715),
                loss_db_per_km: None,
                architecture: Architecture::SrDualRail,
                alpha: 0.5,
                eta_b: 1.0,
                eta_d: 1.0,
                eta_s: 1.0,
                eta_r: 1.0,
                base_fidelity: 1.0,
                qubits: Some(q),
                qubits_primary: None,
                qubits_secondary: None,
                classical_speed_km_s: 2e5,
            })
            .collect();
        NetworkTopology::from_parts(&nodes, &chans).unwrap()
    }

    const THIRTEEN: [(&str, &str); 12] = [
        ("A", "E"), ("B", "E"), ("C", "E"), ("D", "E"), ("E", "F"), ("F", "G"),
        ("F", "H"), ("F", "I"), ("F", "J"), ("J", "K"), ("J", "L"), ("J", "M"),
    ];

    fn names(t: &NetworkTopology, r: &[NodeIdx]) -> Vec<String> {
        r.iter().map(|&n| t.nodes[n].id.clone()).collect()
    }

    #[test]
    fn chain_route() {
        let t = topo(&[("S", "R1"), ("R1", "R2"), ("R2", "D")], 6, 3);
        let r = compute_path(&t, t.node_index("S").unwrap(), t.node_index("D").unwrap()).unwrap();
        assert_eq!(names(&t, &r), ["S", "R1", "R2", "D"]);
    }

    #[test]
    fn thirteen_node_route() {
        let t = topo(&THIRTEEN, 200, 2);
        let r = compute_path(&t, t.node_index("A").unwrap(), t.node_index("K").unwrap()).unwrap();
        assert_eq!(names(&t, &r), ["A", "E", "F", "J", "K"]);
    }

    #[test]
    fn lexicographic_tie_break() {
        // Square A-B-D and A-C-D.
        let t = topo(&[("A", "C"), ("C", "D"), ("A", "B"), ("B", "D")], 6, 1);
        let r = compute_path(&t, t.node_index("A").unwrap(), t.node_index("D").unwrap()).unwrap();
        assert_eq!(names(&t, &r), ["A", "B", "D"]);
    }

    #[test]
    fn disconnected_pair() {
        let t = topo(&[("A", "B"), ("C", "D")], 6, 1);
        assert!(matches!(
            compute_path(&t, t.node_index("A").unwrap(), t.node_index("D").unwrap()),
            Err(ConfigError::Disconnected { .. })
        ));
    }

    fn path(src: &str, dst: &str, mode: MultiplexingKind, mv: &[(&str, &str, u32)]) -> PathConfig {
        let mut m = BTreeMap::new();
        for (c, n, q) in mv {
            m.entry(c.to_string()).or_insert_with(BTreeMap::new).insert(n.to_string(), *q);
        }
        PathConfig {
            id: None,
            src: Some(src.into()),
            dst: Some(dst.into()),
            route: None,
            swap_policy: SwapPolicyConfig::default(),
            purification: vec![],
            multiplexing: MultiplexingConfig { mode, mv: m },
            install_at: 0.0,
        }
    }

    #[test]
    fn blocking_even_split_installs() {
        // Two paths share B-C; each gets 3 of 6 on both sides.
        let t = topo(&[("A", "B"), ("B", "C"), ("C", "D"), ("B", "E")], 20, 6);
        let paths = build_instructions(
            &t,
            &[path("A", "D", MultiplexingKind::Blocking, &[]), path("E", "D", MultiplexingKind::Blocking, &[])],
        )
        .unwrap();
        let alloc = allocate_qubits(&t, &paths).unwrap().unwrap();
        let bc = t.channel_index("B-C").unwrap();
        let b = t.node_index("B").unwrap();
        assert_eq!(alloc[0][&(bc, b)], 3);
        assert_eq!(alloc[1][&(bc, b)], 3);
    }

    #[test]
    fn oversubscribed_vector_rejected() {
        let t = topo(&[("A", "B"), ("B", "C"), ("C", "D"), ("B", "E")], 20, 6);
        let paths = build_instructions(
            &t,
            &[
                path("A", "D", MultiplexingKind::BufferSpace, &[("B-C", "B", 4)]),
                path("E", "D", MultiplexingKind::BufferSpace, &[("B-C", "B", 3)]),
            ],
        )
        .unwrap();
        assert!(matches!(allocate_qubits(&t, &paths), Err(ConfigError::Path { .. })));
    }

    #[test]
    fn thirteen_node_scenario_four_vectors() {
        let mut t = topo(&THIRTEEN, 400, 50);
        let ef = t.channel_index("E-F").unwrap();
        t.channels[ef].qubits_primary = 32;
        t.channels[ef].qubits_secondary = 62;
        let bs = MultiplexingKind::BufferSpace;
        let paths = build_instructions(
            &t,
            &[
                path("A", "K", bs, &[("E-F", "E", 8), ("E-F", "F", 17), ("F-J", "F", 17), ("F-J", "J", 11)]),
                path("B", "L", bs, &[("E-F", "E", 8), ("E-F", "F", 17), ("F-J", "F", 17), ("F-J", "J", 11)]),
                path("C", "I", bs, &[("E-F", "E", 8), ("E-F", "F", 16)]),
                path("D", "H", bs, &[("E-F", "E", 8), ("E-F", "F", 12)]),
                path("G", "M", bs, &[("F-J", "F", 16), ("F-J", "J", 10)]),
            ],
        )
        .unwrap();
        let alloc = allocate_qubits(&t, &paths).unwrap().unwrap();
        let f = t.node_index("F").unwrap();
        assert_eq!(alloc[3][&(ef, f)], 12);
    }

    #[test]
    fn zero_allocation_rejected() {
        let t = topo(&[("A", "B"), ("B", "C"), ("B", "D")], 20, 1);
        let paths = build_instructions(
            &t,
            &[path("A", "C", MultiplexingKind::Blocking, &[]), path("A", "D", MultiplexingKind::Blocking, &[])],
        )
        .unwrap();
        assert!(allocate_qubits(&t, &paths).is_err());
    }

    #[test]
    fn order_names_resolve() {
        let t = topo(&[("S", "R1"), ("R1", "R2"), ("R2", "R3"), ("R3", "R4"), ("R4", "D")], 6, 3);
        let mut p = path("S", "D", MultiplexingKind::Blocking, &[]);
        p.swap_policy = SwapPolicyConfig::Order(vec![
            OrderStage::Group(vec!["R1".into(), "R3".into()]),
            OrderStage::Node("R2".into()),
            OrderStage::Node("R4".into()),
        ]);
        let inst = build_instructions(&t, &[p.clone()]).unwrap();
        assert_eq!(inst[0].swap_policy, SwapPolicy::StaticOrder(vec![u32::MAX, 0, 1, 0, 2, u32::MAX]));
        p.swap_policy = SwapPolicyConfig::Order(vec![OrderStage::Node("S".into())]);
        assert!(build_instructions(&t, &[p]).is_err());
    }

    #[test]
    fn slot_phases() {
        let t = TimingConfig::Sync { t_ext: 1.0, t_int: 0.5, t_app: 0.25 };
        assert_eq!(t.advance_slot(0, Phase::External), (0, Phase::Internal, 1.0));
        assert_eq!(t.advance_slot(0, Phase::Internal), (0, Phase::Application, 1.5));
        assert_eq!(t.advance_slot(0, Phase::Application), (1, Phase::External, 1.75));
        assert_eq!(TimingConfig::Async.slot_length(), None);
    }

    #[test]
    fn sync_requires_positive_phases() {
        let s = TimingSection { mode: TimingKind::Sync, t_ext: Some(1.0), t_int: Some(0.0), t_app: Some(1.0), t_r: None };
        assert!(TimingConfig::from_section(&s).is_err());
    }

    #[test]
    fn fiber_distance_from_controller() {
        let t = topo(&[("A", "B"), ("B", "C")], 6, 1);
        let d = fiber_distances(&t, 0);
        assert_eq!(d, vec![0.0, 30.0, 60.0]);
    }
}
