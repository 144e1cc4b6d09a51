//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Instant;

use qnetsim::config::{read_document, set_axis, ScenarioConfig};
use qnetsim::harness::{generate_random_topology, run_seeds, RandomTopologyParams};
use qnetsim::link::success_probability;
use qnetsim::metrics::{jain_index, linear_fit, mean_std, RunMetrics};
use qnetsim::network::run_scenario;
use qnetsim::oracle::{e2e_distribution, predict_rate, OracleInput};
use qnetsim::qubit::{Qubit, QubitState, Trigger};
use qnetsim::topology::NetworkTopology;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const RUNS: u32 = 100;

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

fn doc(name: &str) -> Value {
    read_document(&scenario_path(name)).expect("scenario document")
}

fn with(mut d: Value, edits: &[(&str, Value)]) -> ScenarioConfig {
    for (axis, v) in edits {
        set_axis(&mut d, axis, v.clone()).expect("axis");
    }
    ScenarioConfig::from_value(d).expect("scenario config")
}

/// Every run produced by the suite, keyed by scenario label, for the
/// conservation checks.
static AUDIT: Mutex<Vec<(String, usize, bool)>> = Mutex::new(Vec::new());

fn runs(label: &str, cfg: &ScenarioConfig, n: u32) -> Vec<RunMetrics> {
    let out = run_seeds(cfg, cfg.simulation.seed, n).expect("simulation");
    let mut audit = AUDIT.lock().unwrap();
    for m in &out {
        audit.push((label.to_string(), m.violations.len(), m.ledger_balances()));
    }
    out
}

fn flow_rates(ms: &[RunMetrics], flow: &str) -> Vec<f64> {
    ms.iter().map(|m| m.flow(flow).unwrap().rate(m.duration)).collect()
}

fn channel_stat(ms: &[RunMetrics], ch: &str, f: impl Fn(&qnetsim::metrics::ChannelMetrics, f64) -> f64) -> Vec<f64> {
    ms.iter().map(|m| f(m.channel(ch).unwrap(), m.duration)).collect()
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Link characteristics of an isolated link with one memory pair.
#[derive(Clone, Copy, Debug)]
struct LinkChar {
    attempt_rate: f64,
    p: f64,
    ent_rate: f64,
}

fn criterion_1() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for arch in ["dim-bk", "dim-dual-rail", "sr-dual-rail", "sim-dual-rail"] {
        let start = Instant::now();
        let cfg = ScenarioConfig::from_value(json!({
            "nodes": [{"id": "A", "capacity": 10}, {"id": "B", "capacity": 10}],
            "channels": [{"id": "A-B", "endpoints": ["A", "B"], "length_km": 30.0,
                          "attenuation_length_km": 21.715, "architecture": arch,
                          "eta_b": 0.95, "eta_d": 0.9, "eta_s": 0.9, "qubits": 10}],
            "paths": [{"id": "AB", "src": "A", "dst": "B"}],
            "simulation": {"duration": 10.0, "seed": 7, "coherence_time": 1.0}
        }))
        .unwrap();
        let p = success_probability(&NetworkTopology::load(&cfg).unwrap().channels[0]);
        let m = &runs("link_30km", &cfg, 1)[0];
        let ch = m.channel("A-B").unwrap();
        let sigma = (p * (1.0 - p) / ch.attempts as f64).sqrt();
        let measured = ch.measured_p().unwrap();
        let z = (measured - p).abs() / sigma;
        let secs = start.elapsed().as_secs_f64();
        let ok = ch.reservations >= 10_000 && z <= 3.0 && secs < 10.0;
        pass &= ok;
        lines.push(format!(
            "{arch}: p={p:.5} measured={measured:.5} z={z:.2} reservations={} {secs:.2}s",
            ch.reservations
        ));
    }
    outcome(pass, lines.join("; "))
}

fn criterion_2(chars: &mut [Option<LinkChar>; 2]) -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    let mut p_one = [0.0; 2];
    for (i, name) in ["link_32km", "link_18km"].into_iter().enumerate() {
        let (mut xs, mut att, mut ent, mut ps) = (vec![], vec![], vec![], vec![]);
        for pairs in 1..=5u32 {
            let cfg = with(
                doc(name),
                &[
                    ("channels.A-B.qubits", json!(pairs)),
                    ("nodes.A.capacity", json!(pairs)),
                    ("nodes.B.capacity", json!(pairs)),
                ],
            );
            let ms = runs(name, &cfg, RUNS);
            let a = mean_std(&channel_stat(&ms, "A-B", |c, d| c.attempt_rate(d))).0;
            let e = mean_std(&channel_stat(&ms, "A-B", |c, d| c.ent_rate(d))).0;
            let p = mean_std(&channel_stat(&ms, "A-B", |c, _| c.measured_p().unwrap())).0;
            if pairs == 1 {
                chars[i] = Some(LinkChar { attempt_rate: a, p, ent_rate: e });
                p_one[i] = p;
            }
            xs.push(pairs as f64);
            att.push(a);
            ent.push(e);
            ps.push(p);
        }
        let r2a = linear_fit(&xs, &att).2;
        let r2e = linear_fit(&xs, &ent).2;
        pass &= r2a > 0.99 && r2e > 0.99;
        lines.push(format!("{name}: R2(attempt)={r2a:.5} R2(ent)={r2e:.5} p={:.4}", mean_std(&ps).0));
    }
    pass &= p_one[1] > p_one[0];
    lines.push(format!("p18={:.4} > p32={:.4}", p_one[1], p_one[0]));
    outcome(pass, lines.join("; "))
}

fn criterion_3(chars: &[Option<LinkChar>; 2]) -> Outcome {
    let [Some(l1), Some(l2)] = *chars else {
        return outcome(false, "link characterization unavailable");
    };
    let base = doc("three_node");
    let q = base["nodes"][1].get("swap_prob").and_then(Value::as_f64).unwrap_or(1.0);
    let predict = |t_coh: f64| {
        predict_rate(&OracleInput {
            attempt_rate: [l1.attempt_rate, l2.attempt_rate],
            p: [l1.p, l2.p],
            ent_rate: [l1.ent_rate, l2.ent_rate],
            q,
            t_coh,
            length_km: [32.0, 18.0],
            classical_speed_km_s: 2e5,
            t_app: 0.0,
            sample_count: 5000,
            seed: 1,
        })
        .unwrap()
        .rate
    };
    let simulate = |t_coh: f64| {
        let cfg = with(base.clone(), &[("simulation.coherence_time", json!(t_coh))]);
        mean_std(&flow_rates(&runs("three_node", &cfg, RUNS), "AC"))
    };
    let mut pass = true;
    let mut lines = Vec::new();
    for t in [0.010, 0.020, 0.050, 0.100] {
        let (sim, _) = simulate(t);
        let pred = predict(t);
        let rel = (sim - pred).abs() / pred;
        pass &= rel <= 0.15;
        lines.push(format!("{:.0}ms sim={sim:.1} oracle={pred:.1} err={:.1}%", t * 1e3, rel * 100.0));
    }
    let (s2, sd2) = simulate(0.002);
    let (s10, sd10) = simulate(0.010);
    let se = ((sd2 * sd2 + sd10 * sd10) / RUNS as f64).sqrt();
    let (o2, o10) = (predict(0.002), predict(0.010));
    let drop = s10 - s2 > 3.0 * se && o2 < o10;
    pass &= drop;
    lines.push(format!("2ms sim={s2:.1} (10ms {s10:.1}, 3se={:.1}) oracle={o2:.1}", 3.0 * se));
    outcome(pass, lines.join("; "))
}

/// Exhaustive enumeration of attempt and swap outcomes on a three-node path.
fn brute_force(c1: u64, c2: u64, p1: f64, p2: f64, q: f64) -> Vec<f64> {
    let mut pmf = vec![0.0; c1.min(c2) as usize + 1];
    let weight = |bits: u64, n: u64, p: f64| {
        let k = bits.count_ones() as i32;
        p.powi(k) * (1.0 - p).powi(n as i32 - k)
    };
    for a in 0..1u64 << c1 {
        for b in 0..1u64 << c2 {
            let w = weight(a, c1, p1) * weight(b, c2, p2);
            let m = a.count_ones().min(b.count_ones()) as u64;
            for s in 0..1u64 << m {
                pmf[s.count_ones() as usize] += w * weight(s, m, q);
            }
        }
    }
    pmf
}

fn criterion_4() -> Outcome {
    let grid = [0.0, 0.3, 0.7, 1.0];
    let mut worst: f64 = 0.0;
    for c1 in 0..=4 {
        for c2 in 0..=4 {
            for &p1 in &grid {
                for &p2 in &grid {
                    for &q in &grid {
                        let got = e2e_distribution(c1, c2, p1, p2, q);
                        let want = brute_force(c1, c2, p1, p2, q);
                        let len = got.len().max(want.len());
                        for k in 0..len {
                            let d = got.get(k).copied().unwrap_or(0.0) - want.get(k).copied().unwrap_or(0.0);
                            worst = worst.max(d.abs());
                        }
                    }
                }
            }
        }
    }
    outcome(worst < 1e-12, format!("max abs pmf error {worst:.3e}"))
}

fn criterion_5() -> Outcome {
    let base = doc("memory_allocation");
    let topo = NetworkTopology::load(&ScenarioConfig::from_value(base.clone()).unwrap()).unwrap();
    let p_left = success_probability(&topo.channels[0]);
    let p_right = success_probability(&topo.channels[1]);
    let mut pass = true;
    let mut lines = vec![format!("p(A-B)={p_left:.4} p(B-C)={p_right:.4}")];
    for t in [0.005, 0.010] {
        for (hi, lo) in [(4u32, 2u32), (5, 1)] {
            // More qubits on the link with the lower success probability.
            let (favoured, mirrored) = if p_left < p_right { ((hi, lo), (lo, hi)) } else { ((lo, hi), (hi, lo)) };
            let rate = |(x, y): (u32, u32)| {
                let cfg = with(
                    base.clone(),
                    &[
                        ("simulation.coherence_time", json!(t)),
                        ("channels.A-B.qubits", json!(x)),
                        ("channels.B-C.qubits", json!(y)),
                    ],
                );
                mean_std(&flow_rates(&runs("memory_allocation", &cfg, RUNS), "AC"))
            };
            let (mf, sf) = rate(favoured);
            let (mm, sm) = rate(mirrored);
            let pooled = ((sf * sf + sm * sm) / 2.0).sqrt();
            let ok = mf - mm > pooled;
            pass &= ok;
            lines.push(format!(
                "{:.0}ms {favoured:?}={mf:.1} vs {mirrored:?}={mm:.1} pooled_sd={pooled:.1}",
                t * 1e3
            ));
        }
    }
    outcome(pass, lines.join("; "))
}

fn criterion_6() -> Outcome {
    let base = doc("swap_strategies");
    let strategies: [(&str, Value); 5] = [
        ("asap", json!("asap")),
        ("baln", json!([["R1", "R3"], "R2", "R4"])),
        ("baln2", json!([["R2", "R4"], "R3", "R1"])),
        ("l2r", json!("l2r")),
        ("r2l", json!("r2l")),
    ];
    let links = ["S-R1", "R1-R2", "R2-R3", "R3-R4", "R4-D"];
    let rate = |policy: &Value, alloc: [u32; 5], t: f64| {
        let mut edits = vec![("simulation.coherence_time".to_string(), json!(t)), ("paths.SD.swap_policy".to_string(), policy.clone())];
        for (l, q) in links.iter().zip(alloc) {
            edits.push((format!("channels.{l}.qubits"), json!(q)));
        }
        let edits: Vec<(&str, Value)> = edits.iter().map(|(a, v)| (a.as_str(), v.clone())).collect();
        mean_std(&flow_rates(&runs("swap_strategies", &with(base.clone(), &edits), RUNS), "SD")).0
    };
    let mut pass = true;
    let mut lines = Vec::new();
    let mut uniform_5ms = std::collections::HashMap::new();
    for t in [0.005, 0.010, 0.020] {
        let mut cells = Vec::new();
        for (name, policy) in &strategies {
            let uni = rate(policy, [3; 5], t);
            let non = rate(policy, [4, 2, 4, 2, 4], t);
            pass &= non > uni;
            if t == 0.005 {
                uniform_5ms.insert(*name, uni);
            }
            cells.push(format!("{name} {uni:.1}->{non:.1}"));
        }
        lines.push(format!("{:.0}ms [{}]", t * 1e3, cells.join(", ")));
    }
    let good = (uniform_5ms["baln2"] + uniform_5ms["r2l"]) / 2.0;
    let bad = (uniform_5ms["l2r"] + uniform_5ms["baln"]) / 2.0;
    pass &= good > bad;
    lines.push(format!("5ms mean(baln2,r2l)={good:.1} vs mean(l2r,baln)={bad:.1}"));
    outcome(pass, lines.join("; "))
}

fn criterion_7() -> Outcome {
    let flows = ["AK", "BL", "CI", "DH", "GM"];
    let mut pass = true;
    let mut lines = Vec::new();
    let mut aggregates = Vec::new();
    for name in ["multiplexing_buffer_space", "multiplexing_statistical"] {
        let cfg = ScenarioConfig::from_value(doc(name)).unwrap();
        let ms = runs(name, &cfg, RUNS);
        let per_flow: Vec<f64> = flows.iter().map(|f| mean_std(&flow_rates(&ms, f)).0).collect();
        let agg = mean_std(&ms.iter().map(|m| m.aggregate_rate()).collect::<Vec<_>>()).0;
        let jain = jain_index(&per_flow);
        pass &= jain > 0.9;
        aggregates.push(agg);
        let cells: Vec<String> = flows.iter().zip(&per_flow).map(|(f, r)| format!("{f}={r:.0}")).collect();
        lines.push(format!("{name}: aggregate={agg:.0} jain={jain:.3} [{}]", cells.join(" ")));
    }
    pass &= aggregates[1] >= aggregates[0];
    outcome(pass, lines.join("; "))
}

fn fsm_fuzz() -> Result<String, String> {
    // Every edge missing from the table must be rejected.
    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut missing = 0;
    let mut accepted = Vec::new();
    for s in QubitState::ALL {
        for t in Trigger::ALL {
            if s.next(t).is_some() {
                continue;
            }
            missing += 1;
            let mut q = Qubit::new(0, 0, 0, None);
            q.state = s;
            if panic::catch_unwind(AssertUnwindSafe(|| q.transition(t, 0.0))).is_ok() {
                accepted.push(format!("{s} on {t:?}"));
            }
        }
    }
    panic::set_hook(hook);
    if !accepted.is_empty() {
        return Err(format!("illegal edges accepted: {accepted:?}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut visited = BTreeSet::new();
    let mut steps = 0u64;
    for walk in 0..2_000u64 {
        let mut q = Qubit::new(walk as usize, 0, 0, None);
        for step in 0..200 {
            let t = *Trigger::ALL.choose(&mut rng).unwrap();
            let Some(expected) = q.state.next(t) else { continue };
            let got = q.transition(t, step as f64);
            if got != expected || q.state != expected || q.state_entered_at != step as f64 {
                return Err(format!("{t:?} led to {got}, expected {expected}"));
            }
            if got == QubitState::Entangled && rng.gen_bool(0.5) {
                q.epr_ref = Some(step);
            }
            if !got.holds_pair() && q.epr_ref.is_some() {
                return Err(format!("{got} kept a pair reference"));
            }
            visited.insert(got.name());
            steps += 1;
        }
    }
    // Every state must be able to return to RAW.
    for s in QubitState::ALL {
        let mut seen = BTreeSet::from([s.name()]);
        let mut frontier = vec![s];
        while let Some(x) = frontier.pop() {
            for t in Trigger::ALL {
                if let Some(y) = x.next(t) {
                    if seen.insert(y.name()) {
                        frontier.push(y);
                    }
                }
            }
        }
        if !seen.contains(QubitState::Raw.name()) {
            return Err(format!("{s} cannot return to RAW"));
        }
    }
    if visited.len() != QubitState::ALL.len() {
        return Err(format!("walks visited only {visited:?}"));
    }
    Ok(format!("{steps} random legal steps, {missing} missing edges rejected"))
}

fn criterion_8() -> Outcome {
    let fuzz = fsm_fuzz();
    // Scenarios the earlier criteria did not already exercise.
    for name in ["link_32km", "link_18km", "three_node", "memory_allocation", "swap_strategies"] {
        let cfg = ScenarioConfig::from_value(doc(name)).unwrap();
        runs(name, &cfg, 5);
    }
    let audit = AUDIT.lock().unwrap();
    let labels: BTreeSet<&str> = audit.iter().map(|(l, _, _)| l.as_str()).collect();
    let violations: usize = audit.iter().map(|(_, v, _)| v).sum();
    let unbalanced = audit.iter().filter(|(_, _, b)| !b).count();
    let pass = fuzz.is_ok() && violations == 0 && unbalanced == 0;
    let fuzz = fuzz.unwrap_or_else(|e| format!("fuzz failed: {e}"));
    outcome(
        pass,
        format!(
            "{fuzz}; {} runs over {} scenarios, {violations} invariant violations, {unbalanced} unbalanced ledgers",
            audit.len(),
            labels.len()
        ),
    )
}

fn criterion_9() -> Outcome {
    let names = [
        "link_32km",
        "link_18km",
        "three_node",
        "memory_allocation",
        "swap_strategies",
        "multiplexing_buffer_space",
        "multiplexing_statistical",
    ];
    let mut differing = Vec::new();
    for name in names {
        let cfg = ScenarioConfig::from_path(&scenario_path(name)).unwrap();
        let seed = cfg.simulation.seed;
        let a = run_scenario(&cfg, seed).unwrap().to_csv_string();
        let b = run_scenario(&cfg, seed).unwrap().to_csv_string();
        if a != b {
            differing.push(name);
        }
    }
    outcome(differing.is_empty(), format!("{} scenarios, differing: {differing:?}", names.len()))
}

fn criterion_10() -> Outcome {
    let params = RandomTopologyParams { nodes: 128, capacity: 10, seed: 1, ..Default::default() };
    let cfg = generate_random_topology(&params, 3.0, 0.005);
    let start = Instant::now();
    let m = run_scenario(&cfg, 1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    AUDIT.lock().unwrap().push(("random_128".into(), m.violations.len(), m.ledger_balances()));
    outcome(
        secs < 300.0 && m.events > 0,
        format!(
            "{} channels, {} flows, {} events, aggregate {:.0} pairs/s, {secs:.1}s wall-clock",
            cfg.channels.len(),
            cfg.paths.len(),
            m.events,
            m.aggregate_rate()
        ),
    )
}

fn main() -> ExitCode {
    let mut chars = [None, None];
    let mut failed = 0;
    let mut report = |label: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| outcome(false, "panicked"));
        println!(
            "criterion {label}: {} ({:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        failed += usize::from(!o.pass);
    };
    report("1 link sampling", &mut criterion_1);
    report("2 memory scaling", &mut || criterion_2(&mut chars));
    report("3 oracle agreement", &mut || criterion_3(&chars));
    report("4 oracle enumeration", &mut criterion_4);
    report("5 memory allocation", &mut criterion_5);
    report("6 swap strategies", &mut criterion_6);
    report("7 multiplexing", &mut criterion_7);
    report("9 determinism", &mut criterion_9);
    report("10 scalability", &mut criterion_10);
    report("8 lifecycle and conservation", &mut criterion_8);
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
