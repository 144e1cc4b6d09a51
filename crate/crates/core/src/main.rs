use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::Value;

use qnetsim::config::{read_document, ScenarioConfig, DEFAULT_CLASSICAL_SPEED};
use qnetsim::harness::{generate_random_topology, run_sweep, RandomTopologyParams};
use qnetsim::metrics::{write_sweep_csv, RunMetrics};
use qnetsim::network::Simulation;
use qnetsim::oracle::{predict_rate, OracleInput};
use qnetsim::{ConfigError, Error};

#[derive(Parser)]
#[command(name = "qnetsim", version, about = "Discrete-event quantum network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario with one seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the scenario's own seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event trace to stderr.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Vary one config field and aggregate over seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted path into the scenario document, e.g. `channels.A-B.qubits`.
        #[arg(long)]
        axis: String,
        /// JSON values for the axis.
        #[arg(long, num_args = 1.., required = true)]
        values: Vec<String>,
        /// Defaults to the scenario's `runs`.
        #[arg(long)]
        runs: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the end-to-end rate of a three-node path.
    Oracle {
        #[arg(long)]
        a1: f64,
        #[arg(long)]
        p1: f64,
        #[arg(long)]
        r1: f64,
        #[arg(long)]
        a2: f64,
        #[arg(long)]
        p2: f64,
        #[arg(long)]
        r2: f64,
        #[arg(long, default_value_t = 1.0)]
        q: f64,
        /// Coherence time in seconds.
        #[arg(long)]
        t_coh: f64,
        #[arg(long)]
        l1: f64,
        #[arg(long)]
        l2: f64,
        #[arg(long, default_value_t = DEFAULT_CLASSICAL_SPEED)]
        c0: f64,
        #[arg(long, default_value_t = 0.0)]
        t_app: f64,
        #[arg(long, default_value_t = 5000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Random-topology scalability run.
    Scale {
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        capacity: u32,
        #[arg(long)]
        sim_seconds: f64,
        #[arg(long, default_value_t = 2.5)]
        degree: f64,
        #[arg(long, default_value_t = 0.005)]
        coherence_time: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn simulate(cfg: &ScenarioConfig, seed: u64, trace: bool) -> Result<RunMetrics, Error> {
    let mut sim = Simulation::new(cfg, seed)?;
    if trace {
        sim = sim.with_trace(Box::new(io::stderr()));
    }
    Ok(sim.run())
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run { config, seed, trace, out } => {
            let cfg = ScenarioConfig::from_path(&config)?;
            let seed = seed.unwrap_or(cfg.simulation.seed);
            let m = simulate(&cfg, seed, trace)?;
            m.write_csv(output(&out)?)?;
            eprintln!("events={} wall_clock_s={:.3}", m.events, m.wall_clock_s);
        }
        Command::Sweep { config, axis, values, runs, out } => {
            let doc = read_document(&config)?;
            let runs = match runs {
                Some(r) => r,
                None => ScenarioConfig::from_value(doc.clone())?.simulation.runs,
            };
            let values = values
                .iter()
                .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone())))
                .collect::<Vec<_>>();
            let rows = run_sweep(&doc, &axis, &values, runs)?;
            write_sweep_csv(&rows, output(&out)?)?;
        }
        Command::Oracle { a1, p1, r1, a2, p2, r2, q, t_coh, l1, l2, c0, t_app, samples, seed } => {
            let pred = predict_rate(&OracleInput {
                attempt_rate: [a1, a2],
                p: [p1, p2],
                ent_rate: [r1, r2],
                q,
                t_coh,
                length_km: [l1, l2],
                classical_speed_km_s: c0,
                t_app,
                sample_count: samples,
                seed,
            })?;
            let mut out = io::stdout().lock();
            writeln!(out, "rate {:.6}", pred.rate)?;
            writeln!(out, "t_gen {:.6e}", pred.t_gen)?;
            writeln!(out, "t_slot {:.6e}", pred.t_slot)?;
            for (k, p) in pred.pmf.iter().enumerate() {
                writeln!(out, "pmf {k} {p:.12}")?;
            }
        }
        Command::Scale { nodes, capacity, sim_seconds, degree, coherence_time, seed, out } => {
            if nodes < 2 {
                return Err(ConfigError::invalid("scale", "nodes", "need at least two nodes").into());
            }
            let params = RandomTopologyParams { nodes, avg_degree: degree, capacity, seed, ..Default::default() };
            let cfg = generate_random_topology(&params, sim_seconds, coherence_time);
            let start = Instant::now();
            let m = simulate(&cfg, seed, false)?;
            m.write_csv(output(&out)?)?;
            eprintln!(
                "nodes={nodes} channels={} flows={} events={} wall_clock_s={:.3}",
                cfg.channels.len(),
                cfg.paths.len(),
                m.events,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match panic::catch_unwind(AssertUnwindSafe(|| execute(cli.command))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e @ (Error::Config(_) | Error::Oracle(_) | Error::Link(_)))) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(_) => {
            eprintln!("runtime assertion failed");
            ExitCode::from(2)
        }
    }
}
