//! Multi-run execution: seed batches, parameter sweeps and the random
//! topology generator used for scalability runs.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::Value;

use crate::config::{
    set_axis, ChannelConfig, MultiplexingConfig, MultiplexingKind, NodeConfig, PathConfig, ScenarioConfig,
    SimulationSection, SwapPolicyConfig, TimingSection, DEFAULT_CLASSICAL_SPEED,
};
use crate::error::Result;
use crate::link::Architecture;
use crate::metrics::{aggregate, RunMetrics, SweepRow};
use crate::network::run_scenario;

/// Seed of run `i` in a batch starting at `base`.
pub fn run_seed(base: u64, i: u32) -> u64 {
    base.wrapping_add(i as u64)
}

/// Run `runs` independent seeds in parallel; results are in seed order.
pub fn run_seeds(cfg: &ScenarioConfig, base_seed: u64, runs: u32) -> Result<Vec<RunMetrics>> {
    (0..runs)
        .into_par_iter()
        .map(|i| run_scenario(cfg, run_seed(base_seed, i)))
        .collect()
}

/// For each value of `axis`, run `runs` seeds and aggregate mean and
/// standard deviation of every observed metric.
pub fn run_sweep(doc: &Value, axis: &str, values: &[Value], runs: u32) -> Result<Vec<SweepRow>> {
    let mut points = Vec::with_capacity(values.len());
    for v in values {
        let mut d = doc.clone();
        set_axis(&mut d, axis, v.clone())?;
        let cfg = ScenarioConfig::from_value(d)?;
        points.push((v.to_string(), cfg));
    }
    let base = points.first().map_or(0, |(_, c)| c.simulation.seed);
    let results: Vec<Vec<RunMetrics>> = points
        .par_iter()
        .map(|(_, cfg)| run_seeds(cfg, base, runs))
        .collect::<Result<_>>()?;
    Ok(points
        .iter()
        .zip(&results)
        .flat_map(|((label, _), runs)| aggregate(label, runs))
        .collect())
}

/// Parameters of a random scalability scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomTopologyParams {
    pub nodes: usize,
    pub avg_degree: f64,
    /// Qubits per node, split evenly over its channels.
    pub capacity: u32,
    pub link_km: f64,
    pub seed: u64,
}

impl Default for RandomTopologyParams {
    fn default() -> Self {
        Self {
            nodes: 16,
            avg_degree: 2.5,
            capacity: 10,
            link_km: 30.0,
            seed: 0,
        }
    }
}

/// Random connected graph (spanning tree plus uniform extra edges) with
/// `ceil(0.2 n)` source-destination requests under statistical multiplexing.
pub fn generate_random_topology(p: &RandomTopologyParams, duration: f64, coherence_time: f64) -> ScenarioConfig {
    assert!(p.nodes >= 2, "a topology needs at least two nodes");
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let n = p.nodes;
    let name = |i: usize| format!("n{i:04}");
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for i in 1..n {
        let parent = order[rng.gen_range(0..i)];
        edges.push((parent.min(order[i]), parent.max(order[i])));
    }
    let target = ((n as f64 * p.avg_degree / 2.0).round() as usize).max(n - 1);
    let max_edges = n * (n - 1) / 2;
    while edges.len() < target.min(max_edges) {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let e = (a.min(b), a.max(b));
        if a != b && !edges.contains(&e) {
            edges.push(e);
        }
    }
    edges.sort_unstable();

    let mut degree = vec![0u32; n];
    for &(a, b) in &edges {
        degree[a] += 1;
        degree[b] += 1;
    }
    // Even split of each node's memory over its channels, remainder to the
    // earliest channels.
    let mut handed = vec![0u32; n];
    let mut share = |node: usize| {
        let d = degree[node];
        let k = handed[node];
        handed[node] += 1;
        p.capacity / d + u32::from(k < p.capacity % d)
    };
    let channels: Vec<ChannelConfig> = edges
        .iter()
        .map(|&(a, b)| ChannelConfig {
            id: None,
            endpoints: [name(a), name(b)],
            primary: None,
            length_km: p.link_km,
            attenuation_length_km: None,
            loss_db_per_km: Some(0.2),
            architecture: Architecture::SrDualRail,
            alpha: 0.5,
            eta_b: 1.0,
            eta_d: 0.95,
            eta_s: 0.95,
            eta_r: 1.0,
            base_fidelity: 1.0,
            qubits: None,
            qubits_primary: Some(share(a).max(1)),
            qubits_secondary: Some(share(b).max(1)),
            classical_speed_km_s: DEFAULT_CLASSICAL_SPEED,
        })
        .collect();
    let nodes: Vec<NodeConfig> = (0..n)
        .map(|i| NodeConfig {
            id: name(i),
            capacity: p.capacity.max(degree[i]),
            local_op_latency: 1e-5,
            swap_prob: 1.0,
            end_node: false,
            coherence_time: None,
        })
        .collect();

    let requests = (n as f64 * 0.2).ceil() as usize;
    let mut picked = Vec::new();
    let mut paths = Vec::new();
    while paths.len() < requests {
        let (s, d) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if s == d || picked.contains(&(s.min(d), s.max(d))) {
            continue;
        }
        picked.push((s.min(d), s.max(d)));
        paths.push(PathConfig {
            id: Some(format!("{}-{}", name(s), name(d))),
            src: Some(name(s)),
            dst: Some(name(d)),
            route: None,
            swap_policy: SwapPolicyConfig::default(),
            purification: vec![],
            multiplexing: MultiplexingConfig {
                mode: MultiplexingKind::Statistical,
                mv: Default::default(),
            },
            install_at: 0.0,
        });
    }
    ScenarioConfig {
        nodes,
        channels,
        paths,
        timing: TimingSection::default(),
        simulation: SimulationSection {
            duration,
            seed: p.seed,
            runs: 1,
            coherence_time: Some(coherence_time),
            idealized_coordination: false,
            qubit_reset_latency: 0.0,
            purification_rule: Default::default(),
            controller: None,
            controller_latency: None,
        },
    }
}
