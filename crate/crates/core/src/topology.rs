//! Nodes, channels and static per-channel memory allocation.

use std::collections::HashMap;

use crate::config::{ChannelConfig, NodeConfig, ScenarioConfig};
use crate::error::{ConfigError, LinkError};
use crate::link::{round_duration, Architecture};

pub type NodeIdx = usize;
pub type ChannelIdx = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: String,
    pub memory_capacity: u32,
    pub local_op_latency: f64,
    pub swap_success_prob: f64,
    pub is_end_node: bool,
    /// Explicit coherence time; `None` falls back to the scenario default.
    pub coherence_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    pub id: String,
    /// Initiates reservations ("left side" of the channel).
    pub primary: NodeIdx,
    pub secondary: NodeIdx,
    pub length_km: f64,
    pub attenuation_length_km: f64,
    pub architecture: Architecture,
    pub alpha: f64,
    pub eta_b: f64,
    pub eta_d: f64,
    pub eta_s: f64,
    pub eta_r: f64,
    pub base_fidelity: f64,
    pub qubits_primary: u32,
    pub qubits_secondary: u32,
    pub classical_speed_km_s: f64,
    /// Slowest local operation latency of the two endpoints.
    pub local_op_latency: f64,
}

impl ChannelSpec {
    pub fn other(&self, node: NodeIdx) -> NodeIdx {
        if node == self.primary {
            self.secondary
        } else {
            debug_assert_eq!(node, self.secondary);
            self.primary
        }
    }

    pub fn qubits_at(&self, node: NodeIdx) -> u32 {
        if node == self.primary {
            self.qubits_primary
        } else if node == self.secondary {
            self.qubits_secondary
        } else {
            0
        }
    }

    pub fn one_way_latency(&self) -> f64 {
        self.length_km / self.classical_speed_km_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTopology {
    pub nodes: Vec<NodeSpec>,
    pub channels: Vec<ChannelSpec>,
    /// Incident channels per node, in declaration order.
    pub adjacency: Vec<Vec<ChannelIdx>>,
    index: HashMap<String, NodeIdx>,
    channel_index: HashMap<String, ChannelIdx>,
}

/// Attenuation length in km for a fiber loss given in dB/km.
pub fn attenuation_length_from_db(loss_db_per_km: f64) -> Result<f64, LinkError> {
    if !(loss_db_per_km > 0.0) || !loss_db_per_km.is_finite() {
        return Err(LinkError::Loss(loss_db_per_km));
    }
    Ok(10.0 / (loss_db_per_km * std::f64::consts::LN_10))
}

fn check_unit(entity: &'static str, id: &str, name: &str, v: f64, open_low: bool) -> Result<(), ConfigError> {
    let ok = if open_low { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
    if ok {
        Ok(())
    } else {
        Err(ConfigError::invalid(entity, id, format!("{name} = {v} out of range")))
    }
}

impl NetworkTopology {
    pub fn node_index(&self, id: &str) -> Option<NodeIdx> {
        self.index.get(id).copied()
    }

    pub fn channel_index(&self, id: &str) -> Option<ChannelIdx> {
        self.channel_index.get(id).copied()
    }

    pub fn node(&self, idx: NodeIdx) -> &NodeSpec {
        &self.nodes[idx]
    }

    /// Channel joining `a` and `b`, if any.
    pub fn channel_between(&self, a: NodeIdx, b: NodeIdx) -> Option<ChannelIdx> {
        self.adjacency[a]
            .iter()
            .copied()
            .find(|&c| self.channels[c].other(a) == b)
    }

    pub fn neighbors(&self, node: NodeIdx) -> impl Iterator<Item = NodeIdx> + '_ {
        self.adjacency[node].iter().map(move |&c| self.channels[c].other(node))
    }

    /// Sum of per-side allocations over all channels incident to `node`.
    pub fn allocated_at(&self, node: NodeIdx) -> u32 {
        self.adjacency[node]
            .iter()
            .map(|&c| self.channels[c].qubits_at(node))
            .sum()
    }

    /// Validate nodes and channels of a scenario document.
    pub fn load(cfg: &ScenarioConfig) -> Result<Self, ConfigError> {
        Self::from_parts(&cfg.nodes, &cfg.channels)
    }

    pub fn from_parts(nodes: &[NodeConfig], channels: &[ChannelConfig]) -> Result<Self, ConfigError> {
        if nodes.is_empty() {
            return Err(ConfigError::invalid("topology", "nodes", "at least one node is required"));
        }
        let mut index = HashMap::new();
        let mut specs = Vec::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(ConfigError::Duplicate { kind: "node", id: n.id.clone() });
            }
            check_unit("node", &n.id, "swap_prob", n.swap_prob, false)?;
            if !(n.local_op_latency >= 0.0) {
                return Err(ConfigError::invalid("node", &n.id, "local_op_latency must be >= 0"));
            }
            if let Some(t) = n.coherence_time {
                if !(t > 0.0) {
                    return Err(ConfigError::invalid("node", &n.id, "coherence_time must be > 0"));
                }
            }
            specs.push(NodeSpec {
                id: n.id.clone(),
                memory_capacity: n.capacity,
                local_op_latency: n.local_op_latency,
                swap_success_prob: n.swap_prob,
                is_end_node: n.end_node,
                coherence_time: n.coherence_time,
            });
        }

        let mut adjacency = vec![Vec::new(); specs.len()];
        let mut channel_index = HashMap::new();
        let mut chans = Vec::with_capacity(channels.len());
        for c in channels {
            let [a, b] = &c.endpoints;
            let id = c.id.clone().unwrap_or_else(|| format!("{a}-{b}"));
            let lookup = |n: &String| {
                index.get(n).copied().ok_or_else(|| ConfigError::DanglingEndpoint {
                    channel: id.clone(),
                    node: n.clone(),
                })
            };
            let (ia, ib) = (lookup(a)?, lookup(b)?);
            if ia == ib {
                return Err(ConfigError::invalid("channel", &id, "endpoints must differ"));
            }
            let (primary, secondary) = match &c.primary {
                None => (ia, ib),
                Some(p) if p == a => (ia, ib),
                Some(p) if p == b => (ib, ia),
                Some(p) => {
                    return Err(ConfigError::invalid("channel", &id, format!("primary `{p}` is not an endpoint")))
                }
            };
            if channel_index.insert(id.clone(), chans.len()).is_some() {
                return Err(ConfigError::Duplicate { kind: "channel", id });
            }
            if !(c.length_km >= 0.0) || !c.length_km.is_finite() {
                return Err(ConfigError::invalid("channel", &id, "length_km must be >= 0"));
            }
            let l0 = match (c.attenuation_length_km, c.loss_db_per_km) {
                (Some(l0), _) => l0,
                (None, Some(db)) => attenuation_length_from_db(db)
                    .map_err(|e| ConfigError::invalid("channel", &id, e.to_string()))?,
                (None, None) => {
                    return Err(ConfigError::invalid("channel", &id, "attenuation_length_km or loss_db_per_km required"))
                }
            };
            if !(l0 > 0.0) {
                return Err(ConfigError::invalid("channel", &id, "attenuation length must be > 0"));
            }
            if !(c.alpha > 0.0 && c.alpha < 1.0) {
                return Err(ConfigError::invalid("channel", &id, format!("alpha = {} out of (0,1)", c.alpha)));
            }
            for (name, v) in [("eta_b", c.eta_b), ("eta_d", c.eta_d), ("eta_s", c.eta_s), ("eta_r", c.eta_r)] {
                check_unit("channel", &id, name, v, true)?;
            }
            if !(c.base_fidelity > 0.25 && c.base_fidelity <= 1.0) {
                return Err(ConfigError::invalid("channel", &id, "base_fidelity must be in (0.25, 1]"));
            }
            if !(c.classical_speed_km_s > 0.0) {
                return Err(ConfigError::invalid("channel", &id, "classical_speed_km_s must be > 0"));
            }
            let sym = c.qubits.unwrap_or(0);
            let qp = c.qubits_primary.unwrap_or(sym);
            let qs = c.qubits_secondary.unwrap_or(sym);
            let spec = ChannelSpec {
                id: id.clone(),
                primary,
                secondary,
                length_km: c.length_km,
                attenuation_length_km: l0,
                architecture: c.architecture,
                alpha: c.alpha,
                eta_b: c.eta_b,
                eta_d: c.eta_d,
                eta_s: c.eta_s,
                eta_r: c.eta_r,
                base_fidelity: c.base_fidelity,
                qubits_primary: qp,
                qubits_secondary: qs,
                classical_speed_km_s: c.classical_speed_km_s,
                local_op_latency: specs[primary].local_op_latency.max(specs[secondary].local_op_latency),
            };
            if !(round_duration(&spec) > 0.0) {
                return Err(ConfigError::invalid("channel", &id, "zero round duration (length and local latency both 0)"));
            }
            adjacency[primary].push(chans.len());
            adjacency[secondary].push(chans.len());
            chans.push(spec);
        }

        let topo = NetworkTopology {
            nodes: specs,
            channels: chans,
            adjacency,
            index,
            channel_index,
        };
        for (i, n) in topo.nodes.iter().enumerate() {
            let used = topo.allocated_at(i);
            if used > n.memory_capacity {
                return Err(ConfigError::CapacityExceeded {
                    node: n.id.clone(),
                    requested: used,
                    capacity: n.memory_capacity,
                });
            }
            if !topo.adjacency[i].is_empty() && n.memory_capacity == 0 {
                return Err(ConfigError::invalid("node", &n.id, "terminates a channel but has no memory"));
            }
        }
        Ok(topo)
    }

    /// Serialize back to scenario sections with every default made explicit.
    pub fn to_config(&self) -> (Vec<NodeConfig>, Vec<ChannelConfig>) {
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeConfig {
                id: n.id.clone(),
                capacity: n.memory_capacity,
                local_op_latency: n.local_op_latency,
                swap_prob: n.swap_success_prob,
                end_node: n.is_end_node,
                coherence_time: n.coherence_time,
            })
            .collect();
        let channels = self
            .channels
            .iter()
            .map(|c| ChannelConfig {
                id: Some(c.id.clone()),
                endpoints: [self.nodes[c.primary].id.clone(), self.nodes[c.secondary].id.clone()],
                primary: None,
                length_km: c.length_km,
                attenuation_length_km: Some(c.attenuation_length_km),
                loss_db_per_km: None,
                architecture: c.architecture,
                alpha: c.alpha,
                eta_b: c.eta_b,
                eta_d: c.eta_d,
                eta_s: c.eta_s,
                eta_r: c.eta_r,
                base_fidelity: c.base_fidelity,
                qubits: None,
                qubits_primary: Some(c.qubits_primary),
                qubits_secondary: Some(c.qubits_secondary),
                classical_speed_km_s: c.classical_speed_km_s,
            })
            .collect();
        (nodes, channels)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// A bare channel spec for link-model tests.
    pub(crate) fn channel(architecture: Architecture, length_km: f64) -> ChannelSpec {
        ChannelSpec {
            id: "A-B".into(),
            primary: 0,
            secondary: 1,
            length_km,
            attenuation_length_km: 21.715,
            architecture,
            alpha: 0.5,
            eta_b: 1.0,
            eta_d: 1.0,
            eta_s: 1.0,
            eta_r: 1.0,
            base_fidelity: 1.0,
            qubits_primary: 1,
            qubits_secondary: 1,
            classical_speed_km_s: 2e5,
            local_op_latency: 1e-5,
        }
    }

    fn node(id: &str, capacity: u32) -> NodeConfig {
        NodeConfig {
            id: id.into(),
            capacity,
            local_op_latency: 1e-5,
            swap_prob: 1.0,
            end_node: false,
            coherence_time: None,
        }
    }

    fn link(a: &str, b: &str, qa: u32, qb: u32) -> ChannelConfig {
        ChannelConfig {
            id: None,
            endpoints: [a.into(), b.into()],
            primary: None,
            length_km: 30.0,
            attenuation_length_km: None,
            loss_db_per_km: Some(0.2),
            architecture: Architecture::SrDualRail,
            alpha: 0.5,
            eta_b: 1.0,
            eta_d: 1.0,
            eta_s: 1.0,
            eta_r: 1.0,
            base_fidelity: 1.0,
            qubits: None,
            qubits_primary: Some(qa),
            qubits_secondary: Some(qb),
            classical_speed_km_s: 2e5,
        }
    }

    #[test]
    fn db_conversion() {
        assert_relative_eq!(attenuation_length_from_db(0.2).unwrap(), 21.715, epsilon = 1e-3);
        assert_relative_eq!(attenuation_length_from_db(0.17).unwrap(), 25.547, epsilon = 1e-3);
        assert_relative_eq!(attenuation_length_from_db(10.0 / std::f64::consts::LN_10).unwrap(), 1.0, epsilon = 1e-12);
        assert!(attenuation_length_from_db(0.0).is_err());
        assert!(attenuation_length_from_db(-1.0).is_err());
    }

    #[test]
    fn three_node_chain_loads() {
        let nodes = [node("A", 6), node("B", 6), node("C", 6)];
        let chans = [link("A", "B", 3, 3), link("B", "C", 3, 3)];
        let t = NetworkTopology::from_parts(&nodes, &chans).unwrap();
        assert_eq!(t.allocated_at(1), 6);
        assert_eq!(t.channel_between(0, 1), Some(0));
        assert_eq!(t.channel_between(0, 2), None);
        assert_eq!(t.channels[0].id, "A-B");
    }

    #[test]
    fn over_allocation_rejected_with_node_id() {
        let nodes = [node("A", 6), node("B", 6), node("C", 6)];
        let chans = [link("A", "B", 4, 4), link("B", "C", 3, 3)];
        match NetworkTopology::from_parts(&nodes, &chans) {
            Err(ConfigError::CapacityExceeded { node, requested, capacity }) => {
                assert_eq!((node.as_str(), requested, capacity), ("B", 7, 6));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_endpoint_rejected() {
        let nodes = [node("A", 6)];
        let chans = [link("A", "Z", 1, 1)];
        assert!(matches!(
            NetworkTopology::from_parts(&nodes, &chans),
            Err(ConfigError::DanglingEndpoint { node, .. }) if node == "Z"
        ));
    }

    #[test]
    fn empty_topology_rejected() {
        assert!(NetworkTopology::from_parts(&[], &[]).is_err());
    }

    #[test]
    fn explicit_primary_and_l0_precedence() {
        let nodes = [node("A", 6), node("B", 6)];
        let mut c = link("A", "B", 2, 1);
        c.primary = Some("B".into());
        c.attenuation_length_km = Some(10.0);
        let t = NetworkTopology::from_parts(&nodes, &[c]).unwrap();
        assert_eq!(t.channels[0].primary, 1);
        assert_eq!(t.channels[0].attenuation_length_km, 10.0);
    }

    #[test]
    fn zero_duration_rejected() {
        let mut a = node("A", 1);
        a.local_op_latency = 0.0;
        let mut b = node("B", 1);
        b.local_op_latency = 0.0;
        let mut c = link("A", "B", 1, 1);
        c.length_km = 0.0;
        assert!(NetworkTopology::from_parts(&[a, b], &[c]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_and_capacity(qs in proptest::collection::vec((0u32..4, 0u32..4, 1.0f64..80.0), 1..6)) {
            let n = qs.len() + 1;
            let nodes: Vec<_> = (0..n).map(|i| node(&format!("N{i}"), 8)).collect();
            let chans: Vec<_> = qs.iter().enumerate().map(|(i, &(a, b, len))| {
                let mut c = link(&format!("N{i}"), &format!("N{}", i + 1), a, b);
                c.length_km = len;
                c
            }).collect();
            let t = NetworkTopology::from_parts(&nodes, &chans).unwrap();
            for i in 0..n {
                prop_assert!(t.allocated_at(i) <= t.nodes[i].memory_capacity);
            }
            let (nc, cc) = t.to_config();
            let again = NetworkTopology::from_parts(&nc, &cc).unwrap();
            prop_assert_eq!(t, again);
        }
    }
}
