//! Heralded entanglement generation over a single channel.
//!
//! Closed-form heralding probabilities and round durations per link
//! architecture, geometric attempt sampling, and the Werner noise model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::LinkError;
use crate::topology::ChannelSpec;

/// Physical link architecture and photon encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    /// Detection-in-midpoint, single rail with the two-round Barrett-Kok scheme.
    #[serde(rename = "dim-bk")]
    DimBk,
    /// Detection-in-midpoint, dual-rail encoding.
    #[serde(rename = "dim-dual-rail")]
    DimDualRail,
    /// Sender-receiver, dual-rail encoding.
    #[serde(rename = "sr-dual-rail")]
    SrDualRail,
    /// Source-in-midpoint, dual-rail encoding.
    #[serde(rename = "sim-dual-rail")]
    SimDualRail,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::DimBk,
        Architecture::DimDualRail,
        Architecture::SrDualRail,
        Architecture::SimDualRail,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::DimBk => "dim-bk",
            Architecture::DimDualRail => "dim-dual-rail",
            Architecture::SrDualRail => "sr-dual-rail",
            Architecture::SimDualRail => "sim-dual-rail",
        }
    }
}

/// Derived per-round behaviour of one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkPhysics {
    pub architecture: Architecture,
    pub p_success: f64,
    pub round_duration: f64,
    /// Endpoint-to-BSM transmissivity (DiM architectures).
    pub eta_ab: f64,
    /// Source-to-endpoint transmissivity (SiM architecture).
    pub eta_as: f64,
}

impl LinkPhysics {
    pub fn of(channel: &ChannelSpec) -> Self {
        Self {
            architecture: channel.architecture,
            p_success: success_probability(channel),
            round_duration: round_duration(channel),
            eta_ab: channel.eta_b * (-channel.length_km / (2.0 * channel.attenuation_length_km)).exp(),
            eta_as: channel.eta_d * (-channel.length_km / (2.0 * channel.attenuation_length_km)).exp(),
        }
    }
}

/// Per-round heralding probability of `channel`.
pub fn success_probability(channel: &ChannelSpec) -> f64 {
    let l = channel.length_km;
    let l0 = channel.attenuation_length_km;
    let alpha = channel.alpha;
    let half = (-l / (2.0 * l0)).exp();
    let p = match channel.architecture {
        Architecture::DimBk => {
            let eta_ab = channel.eta_b * half;
            2.0 * alpha * alpha * eta_ab * eta_ab
        }
        Architecture::DimDualRail => {
            let eta_ab = channel.eta_b * half;
            2.0 * alpha * (1.0 - alpha) * eta_ab * eta_ab
        }
        Architecture::SrDualRail => channel.eta_d * (-l / l0).exp(),
        Architecture::SimDualRail => {
            let eta_as = channel.eta_d * half;
            eta_as * eta_as
        }
    };
    p * channel.eta_s * channel.eta_r
}

/// Time from the start of one attempt until the endpoints can begin the next.
///
/// `tau_l` is the full one-way fiber delay of the channel.
pub fn round_duration(channel: &ChannelSpec) -> f64 {
    let tau_l = channel.length_km / channel.classical_speed_km_s;
    let tau_0 = channel.local_op_latency;
    match channel.architecture {
        Architecture::DimDualRail | Architecture::SimDualRail => tau_l + tau_0,
        Architecture::DimBk => 2.0 * (tau_l + tau_0),
        Architecture::SrDualRail => 2.0 * tau_l + tau_0,
    }
}

/// Index of the first successful round, `k >= 1`, for per-round success `p`.
pub fn sample_rounds_to_success<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Result<u64, LinkError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(LinkError::Probability(p));
    }
    if p == 1.0 {
        return Ok(1);
    }
    // Inversion: k = ceil(ln U / ln(1-p)) with U uniform on (0, 1].
    let u: f64 = 1.0 - rng.gen::<f64>();
    let k = (u.ln() / (-p).ln_1p()).ceil();
    Ok(if k < 1.0 { 1 } else if k >= u64::MAX as f64 { u64::MAX } else { k as u64 })
}

/// Werner parameter of a two-qubit state; fidelity is `(3W + 1) / 4`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct WernerState(f64);

impl WernerState {
    pub fn new(w: f64) -> Self {
        Self(w.clamp(0.0, 1.0))
    }

    pub fn from_fidelity(f: f64) -> Self {
        Self::new((4.0 * f - 1.0) / 3.0)
    }

    pub fn w(self) -> f64 {
        self.0
    }

    pub fn fidelity(self) -> f64 {
        (3.0 * self.0 + 1.0) / 4.0
    }
}

/// Werner state of a freshly heralded pair on `channel`.
pub fn initial_werner(channel: &ChannelSpec) -> Result<WernerState, LinkError> {
    werner_from_base_fidelity(channel.base_fidelity)
}

pub fn werner_from_base_fidelity(f0: f64) -> Result<WernerState, LinkError> {
    if !(f0 > 0.25 && f0 <= 1.0) {
        return Err(LinkError::Fidelity(f0));
    }
    Ok(WernerState::from_fidelity(f0))
}

/// Exponential memory decay of the Werner parameter after `dt` seconds.
pub fn decayed_werner(w0: WernerState, dt: f64, t_coh: f64) -> WernerState {
    debug_assert!(dt >= 0.0);
    if t_coh.is_infinite() {
        return w0;
    }
    WernerState::new(w0.w() * (-dt / t_coh).exp())
}
