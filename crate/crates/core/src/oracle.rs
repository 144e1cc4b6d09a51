//! Closed-form throughput model for a three-node path that swaps at the
//! middle node.
//!
//! Time is slotted. In each slot link `i` makes `c_i` attempts with success
//! probability `p_i`, the middle node performs `min(E_1, E_2)` swaps that
//! each succeed with probability `q`, and the slot length is chosen from
//! the measured link rates and the memory coherence time.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::OracleError;

/// Per-link characteristics plus path-wide parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleInput {
    /// Attempt rate per link, attempts/s.
    pub attempt_rate: [f64; 2],
    /// Per-attempt success probability per link.
    pub p: [f64; 2],
    /// Link entanglement rate per link, pairs/s.
    pub ent_rate: [f64; 2],
    pub q: f64,
    pub t_coh: f64,
    pub length_km: [f64; 2],
    pub classical_speed_km_s: f64,
    pub t_app: f64,
    pub sample_count: usize,
    pub seed: u64,
}

impl OracleInput {
    pub fn validate(&self) -> Result<(), OracleError> {
        let bad = |m: String| Err(OracleError::Input(m));
        for i in 0..2 {
            if !(self.attempt_rate[i] > 0.0) {
                return bad(format!("attempt rate of link {} must be > 0", i + 1));
            }
            if !(self.p[i] > 0.0 && self.p[i] <= 1.0) {
                return bad(format!("success probability of link {} must be in (0, 1]", i + 1));
            }
            if !(self.ent_rate[i] > 0.0) {
                return bad(format!("entanglement rate of link {} must be > 0", i + 1));
            }
            if !(self.length_km[i] >= 0.0) {
                return bad(format!("length of link {} must be >= 0", i + 1));
            }
        }
        if !(0.0..=1.0).contains(&self.q) {
            return bad("swap probability must be in [0, 1]".into());
        }
        if !(self.classical_speed_km_s > 0.0) || !(self.t_app >= 0.0) || self.sample_count == 0 {
            return bad("classical speed, application time and sample count must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OraclePrediction {
    pub rate: f64,
    pub t_gen: f64,
    pub t_slot: f64,
    /// Expected attempts per slot on each link before rounding.
    pub capacity: [f64; 2],
    /// End-to-end pmf averaged over the capacity draws.
    pub pmf: Vec<f64>,
}

/// Binomial pmf over `0..=n`, evaluated in log space.
pub fn binomial_pmf(n: u64, p: f64) -> Vec<f64> {
    if p <= 0.0 {
        let mut v = vec![0.0; n as usize + 1];
        v[0] = 1.0;
        return v;
    }
    if p >= 1.0 {
        let mut v = vec![0.0; n as usize + 1];
        v[n as usize] = 1.0;
        return v;
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let lf: Vec<f64> = std::iter::once(0.0)
        .chain((1..=n).scan(0.0, |acc, i| {
            *acc += (i as f64).ln();
            Some(*acc)
        }))
        .collect();
    (0..=n)
        .map(|k| {
            let lc = lf[n as usize] - lf[k as usize] - lf[(n - k) as usize];
            (lc + k as f64 * lp + (n - k) as f64 * lq).exp()
        })
        .collect()
}

/// Distribution of end-to-end pairs per slot, indexed `0..=min(c1, c2)`.
pub fn e2e_distribution(c1: u64, c2: u64, p1: f64, p2: f64, q: f64) -> Vec<f64> {
    let e1 = binomial_pmf(c1, p1);
    let e2 = binomial_pmf(c2, p2);
    let c12 = c1.min(c2) as usize;
    let tail = |pmf: &[f64]| {
        let mut t = vec![0.0; pmf.len() + 1];
        for i in (0..pmf.len()).rev() {
            t[i] = t[i + 1] + pmf[i];
        }
        t
    };
    let (t1, t2) = (tail(&e1), tail(&e2));
    let mut out = vec![0.0; c12 + 1];
    for m in 1..=c12 {
        // P(min(E1, E2) = m)
        let pm = e1[m] * t2[m] + t1[m + 1] * e2[m];
        if pm == 0.0 {
            continue;
        }
        for (k, b) in binomial_pmf(m as u64, q).into_iter().enumerate().skip(1) {
            out[k] += pm * b;
        }
    }
    out[0] = 1.0 - out[1..].iter().sum::<f64>();
    out
}

/// `E[E12] / T_s` for a normalized pmf.
pub fn expected_throughput(pmf: &[f64], t_slot: f64) -> Result<f64, OracleError> {
    let sum: f64 = pmf.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(OracleError::Unnormalized { sum });
    }
    Ok(pmf.iter().enumerate().map(|(k, p)| k as f64 * p).sum::<f64>() / t_slot)
}

/// Generation phase and slot length: `(T_gen, T_s)`.
pub fn select_time_slot(r1: f64, r2: f64, t_coh: f64, l_max_km: f64, c0: f64, t_app: f64) -> Result<(f64, f64), OracleError> {
    let t_her = l_max_km / c0;
    let cutoff = t_coh - t_her - t_app;
    if cutoff <= 0.0 {
        return Err(OracleError::CoherenceTooShort { cutoff });
    }
    let t12 = 1.0 / r1 + 1.0 / r2 - 1.0 / (r1 + r2);
    let t_gen = t12.min(cutoff);
    Ok((t_gen, t_gen + t_her))
}

/// Round a fractional capacity down or up with probability matching its
/// fractional part, so the expectation is preserved.
pub fn mc_capacity_rounding<R: Rng + ?Sized>(c: f64, rng: &mut R) -> u64 {
    let base = c.floor();
    let r = c - base;
    base as u64 + u64::from(r > 0.0 && rng.gen::<f64>() < r)
}

pub fn predict_rate(input: &OracleInput) -> Result<OraclePrediction, OracleError> {
    input.validate()?;
    let l_max = input.length_km[0].max(input.length_km[1]);
    let (t_gen, t_slot) = select_time_slot(
        input.ent_rate[0],
        input.ent_rate[1],
        input.t_coh,
        l_max,
        input.classical_speed_km_s,
        input.t_app,
    )?;
    let capacity = [input.attempt_rate[0] * t_slot, input.attempt_rate[1] * t_slot];
    let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
    let mut cache: HashMap<(u64, u64), (f64, Vec<f64>)> = HashMap::new();
    let mut rate = 0.0;
    let mut pmf = Vec::<f64>::new();
    for _ in 0..input.sample_count {
        let c1 = mc_capacity_rounding(capacity[0], &mut rng);
        let c2 = mc_capacity_rounding(capacity[1], &mut rng);
        let (r, d) = &*match cache.entry((c1, c2)) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                let d = e2e_distribution(c1, c2, input.p[0], input.p[1], input.q);
                let r = expected_throughput(&d, t_slot)?;
                e.insert((r, d))
            }
        };
        rate += r;
        if pmf.len() < d.len() {
            pmf.resize(d.len(), 0.0);
        }
        for (acc, x) in pmf.iter_mut().zip(d) {
            *acc += x;
        }
    }
    let n = input.sample_count as f64;
    pmf.iter_mut().for_each(|x| *x /= n);
    Ok(OraclePrediction {
        rate: rate / n,
        t_gen,
        t_slot,
        capacity,
        pmf,
    })
}
