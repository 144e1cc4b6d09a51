//! Run metrics, sweep aggregation and CSV emission.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Fate of every pair attributed to one flow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PairLedger {
    pub created: u64,
    pub delivered: u64,
    pub decohered: u64,
    pub swap_consumed: u64,
    pub purif_consumed: u64,
}

impl PairLedger {
    pub fn ended(&self) -> u64 {
        self.delivered + self.decohered + self.swap_consumed + self.purif_consumed
    }

    /// Every created pair is either ended exactly once or still live.
    pub fn balances(&self, live: u64) -> bool {
        self.created == self.ended() + live
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FlowMetrics {
    pub id: String,
    pub src: String,
    pub dst: String,
    pub delivered: u64,
    pub fidelity_sum: f64,
    pub swap_attempts: u64,
    pub swap_successes: u64,
    pub purif_attempts: u64,
    pub purif_successes: u64,
    pub decohered: u64,
    pub live_pairs: u64,
    pub ledger: PairLedger,
}

impl FlowMetrics {
    pub fn rate(&self, duration: f64) -> f64 {
        self.delivered as f64 / duration
    }

    pub fn mean_fidelity(&self) -> Option<f64> {
        (self.delivered > 0).then(|| self.fidelity_sum / self.delivered as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ChannelMetrics {
    pub id: String,
    pub attempts: u64,
    pub successes: u64,
    pub reservations: u64,
}

impl ChannelMetrics {
    pub fn measured_p(&self) -> Option<f64> {
        (self.attempts > 0).then(|| self.successes as f64 / self.attempts as f64)
    }

    pub fn attempt_rate(&self, duration: f64) -> f64 {
        self.attempts as f64 / duration
    }

    pub fn ent_rate(&self, duration: f64) -> f64 {
        self.successes as f64 / duration
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub duration: f64,
    pub events: u64,
    pub conflicts: u64,
    pub stale_messages: u64,
    pub flows: Vec<FlowMetrics>,
    pub channels: Vec<ChannelMetrics>,
    /// Invariant violations found at the end of the run.
    pub violations: Vec<String>,
    /// Not part of the CSV, which must be reproducible.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

const RUN_HEADER: [&str; 18] = [
    "record", "id", "src", "dst", "delivered", "rate", "mean_fidelity", "swap_attempts", "swap_successes",
    "purif_attempts", "purif_successes", "decohered", "attempts", "successes", "measured_p", "attempt_rate",
    "ent_rate", "events",
];

fn num(x: f64) -> String {
    format!("{x:.9e}")
}

impl RunMetrics {
    pub fn flow(&self, id: &str) -> Option<&FlowMetrics> {
        self.flows.iter().find(|f| f.id == id)
    }

    pub fn channel(&self, id: &str) -> Option<&ChannelMetrics> {
        self.channels.iter().find(|c| c.id == id)
    }

    /// Sum of per-flow delivery rates.
    pub fn aggregate_rate(&self) -> f64 {
        self.flows.iter().map(|f| f.rate(self.duration)).sum()
    }

    pub fn ledger_balances(&self) -> bool {
        self.flows.iter().all(|f| f.ledger.balances(f.live_pairs))
    }

    /// One `run` row, one row per flow, one row per channel.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(RUN_HEADER)?;
        let d = self.duration;
        let blank = String::new;
        w.write_record([
            "run".into(),
            self.seed.to_string(),
            blank(),
            blank(),
            self.flows.iter().map(|f| f.delivered).sum::<u64>().to_string(),
            num(self.aggregate_rate()),
            blank(),
            self.flows.iter().map(|f| f.swap_attempts).sum::<u64>().to_string(),
            self.flows.iter().map(|f| f.swap_successes).sum::<u64>().to_string(),
            self.flows.iter().map(|f| f.purif_attempts).sum::<u64>().to_string(),
            self.flows.iter().map(|f| f.purif_successes).sum::<u64>().to_string(),
            self.flows.iter().map(|f| f.decohered).sum::<u64>().to_string(),
            blank(),
            blank(),
            blank(),
            blank(),
            blank(),
            self.events.to_string(),
        ])?;
        for f in &self.flows {
            w.write_record([
                "flow".into(),
                f.id.clone(),
                f.src.clone(),
                f.dst.clone(),
                f.delivered.to_string(),
                num(f.rate(d)),
                f.mean_fidelity().map(num).unwrap_or_default(),
                f.swap_attempts.to_string(),
                f.swap_successes.to_string(),
                f.purif_attempts.to_string(),
                f.purif_successes.to_string(),
                f.decohered.to_string(),
                blank(),
                blank(),
                blank(),
                blank(),
                blank(),
                blank(),
            ])?;
        }
        for c in &self.channels {
            w.write_record([
                "channel".into(),
                c.id.clone(),
                blank(),
                blank(),
                blank(),
                blank(),
                blank(),
                blank(),
                blank(),
                blank(),
                blank(),
                blank(),
                c.attempts.to_string(),
                c.successes.to_string(),
                c.measured_p().map(num).unwrap_or_default(),
                num(c.attempt_rate(d)),
                num(c.ent_rate(d)),
                blank(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Named scalar observations used by sweeps: `(scope, id, metric, value)`.
    pub fn observations(&self) -> Vec<(&'static str, String, &'static str, f64)> {
        let d = self.duration;
        let mut out = vec![
            ("run", String::new(), "aggregate_rate", self.aggregate_rate()),
            ("run", String::new(), "events", self.events as f64),
        ];
        for f in &self.flows {
            out.push(("flow", f.id.clone(), "rate", f.rate(d)));
            out.push(("flow", f.id.clone(), "delivered", f.delivered as f64));
            if let Some(fid) = f.mean_fidelity() {
                out.push(("flow", f.id.clone(), "mean_fidelity", fid));
            }
            out.push(("flow", f.id.clone(), "decohered", f.decohered as f64));
        }
        for c in &self.channels {
            out.push(("channel", c.id.clone(), "attempt_rate", c.attempt_rate(d)));
            out.push(("channel", c.id.clone(), "ent_rate", c.ent_rate(d)));
            if let Some(p) = c.measured_p() {
                out.push(("channel", c.id.clone(), "measured_p", p));
            }
        }
        out
    }
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Jain's fairness index of non-negative allocations.
pub fn jain_index(xs: &[f64]) -> f64 {
    let s: f64 = xs.iter().sum();
    let s2: f64 = xs.iter().map(|x| x * x).sum();
    if s2 == 0.0 {
        return 1.0;
    }
    s * s / (xs.len() as f64 * s2)
}

/// Least-squares line `y = slope * x + intercept` and its coefficient of determination.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// One aggregated cell of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub scope: String,
    pub id: String,
    pub metric: String,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

/// Aggregate per-seed runs of one sweep point into rows with stable order.
pub fn aggregate(value: &str, runs: &[RunMetrics]) -> Vec<SweepRow> {
    let mut keys: Vec<(&'static str, String, &'static str)> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for r in runs {
        for (scope, id, metric, v) in r.observations() {
            let key = (scope, id, metric);
            match keys.iter().position(|k| *k == key) {
                Some(i) => values[i].push(v),
                None => {
                    keys.push(key);
                    values.push(vec![v]);
                }
            }
        }
    }
    keys.into_iter()
        .zip(values)
        .map(|((scope, id, metric), vs)| {
            let (mean, std) = mean_std(&vs);
            SweepRow {
                value: value.to_string(),
                scope: scope.to_string(),
                id,
                metric: metric.to_string(),
                runs: vs.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["value", "scope", "id", "metric", "runs", "mean", "std"])?;
    for r in rows {
        w.write_record([
            r.value.clone(),
            r.scope.clone(),
            r.id.clone(),
            r.metric.clone(),
            r.runs.to_string(),
            num(r.mean),
            num(r.std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write `rows` or `metrics` CSV to `path`.
pub fn emit_csv(path: &Path, body: impl FnOnce(&mut std::fs::File) -> Result<()>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    body(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample() -> RunMetrics {
        RunMetrics {
            seed: 7,
            duration: 2.0,
            events: 100,
            flows: vec![FlowMetrics {
                id: "AC".into(),
                src: "A".into(),
                dst: "C".into(),
                delivered: 10,
                fidelity_sum: 9.0,
                ledger: PairLedger { created: 30, delivered: 10, decohered: 5, swap_consumed: 14, purif_consumed: 0 },
                live_pairs: 1,
                ..Default::default()
            }],
            channels: vec![ChannelMetrics { id: "A-B".into(), attempts: 40, successes: 10, reservations: 10 }],
            ..Default::default()
        }
    }

    #[test]
    fn derived_values() {
        let m = sample();
        assert_eq!(m.flows[0].rate(m.duration), 5.0);
        assert_eq!(m.flows[0].mean_fidelity(), Some(0.9));
        assert_eq!(m.channels[0].measured_p(), Some(0.25));
        assert!(m.ledger_balances());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let s = sample().to_csv_string();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("record,id,src,dst"));
        assert!(lines[2].starts_with("flow,AC,A,C,10,"));
        assert_eq!(s, sample().to_csv_string());
    }

    #[test]
    fn identical_runs_have_zero_spread() {
        let runs = vec![sample(), sample(), sample()];
        let rows = aggregate("x", &runs);
        assert!(rows.iter().all(|r| r.std == 0.0 && r.runs == 3));
    }

    #[test]
    fn statistics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_relative_eq!(s, 1.0);
        assert_relative_eq!(jain_index(&[1.0, 1.0, 1.0]), 1.0);
        assert_relative_eq!(jain_index(&[1.0, 0.0]), 0.5);
        let (a, b, r2) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert_relative_eq!(a, 2.0);
        assert_relative_eq!(b, 1.0);
        assert_relative_eq!(r2, 1.0);
    }
}
