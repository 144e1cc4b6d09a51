//! Scenario document schema.
//!
//! A scenario is one JSON document with the sections `nodes`, `channels`,
//! `paths`, `timing` and `simulation`. Unknown keys are rejected everywhere.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ConfigError;
use crate::link::Architecture;

/// Light in fiber, km/s.
pub const DEFAULT_CLASSICAL_SPEED: f64 = 2e5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub nodes: Vec<NodeConfig>,
    pub channels: Vec<ChannelConfig>,
    #[serde(default)]
    pub paths: Vec<PathConfig>,
    #[serde(default)]
    pub timing: TimingSection,
    pub simulation: SimulationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: String,
    pub capacity: u32,
    /// Local operation latency in seconds.
    #[serde(default)]
    pub local_op_latency: f64,
    /// Swap success probability.
    #[serde(default = "one")]
    pub swap_prob: f64,
    #[serde(default)]
    pub end_node: bool,
    /// Memory coherence time override in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coherence_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub endpoints: [String; 2],
    /// Endpoint that initiates reservations; defaults to the first endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary: Option<String>,
    pub length_km: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attenuation_length_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_db_per_km: Option<f64>,
    pub architecture: Architecture,
    #[serde(default = "half")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub eta_b: f64,
    #[serde(default = "one")]
    pub eta_d: f64,
    #[serde(default = "one")]
    pub eta_s: f64,
    #[serde(default = "one")]
    pub eta_r: f64,
    #[serde(default = "one")]
    pub base_fidelity: f64,
    /// Symmetric per-side allocation; overridden by the per-side fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qubits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qubits_primary: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qubits_secondary: Option<u32>,
    #[serde(default = "default_speed")]
    pub classical_speed_km_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<Vec<String>>,
    #[serde(default)]
    pub swap_policy: SwapPolicyConfig,
    #[serde(default)]
    pub purification: Vec<PurificationTargetConfig>,
    #[serde(default)]
    pub multiplexing: MultiplexingConfig,
    /// Installation time in seconds; 0 means pre-installed.
    #[serde(default)]
    pub install_at: f64,
}

/// `"asap"`, `"l2r"`, `"r2l"`, or an ordered list of swap stages where each
/// stage is a node id or a list of node ids that swap concurrently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SwapPolicyConfig {
    Named(String),
    Order(Vec<OrderStage>),
}

impl Default for SwapPolicyConfig {
    fn default() -> Self {
        SwapPolicyConfig::Named("asap".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrderStage {
    Node(String),
    Group(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurificationTargetConfig {
    /// End nodes of the purified segment, in either order.
    pub segment: [String; 2],
    pub rounds: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplexingKind {
    #[default]
    Blocking,
    BufferSpace,
    Statistical,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiplexingConfig {
    #[serde(default)]
    pub mode: MultiplexingKind,
    /// Multiplexing vector entries: channel id -> node id -> qubits for this path.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mv: BTreeMap<String, BTreeMap<String, u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingKind {
    #[default]
    Async,
    Sync,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    #[serde(default)]
    pub mode: TimingKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_ext: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_int: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_app: Option<f64>,
    /// Routing interval of reactive mode. Parsed but not runnable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_r: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PurificationRule {
    #[default]
    Bbpssw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    /// Simulated seconds.
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: u32,
    /// Memory coherence time in seconds; `null` or absent disables decoherence.
    #[serde(default)]
    pub coherence_time: Option<f64>,
    #[serde(default)]
    pub idealized_coordination: bool,
    #[serde(default)]
    pub qubit_reset_latency: f64,
    #[serde(default)]
    pub purification_rule: PurificationRule,
    /// Node hosting the controller, used for runtime path installation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<String>,
    /// Constant controller-to-node latency overriding the fiber distance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller_latency: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

fn default_speed() -> f64 {
    DEFAULT_CLASSICAL_SPEED
}

fn default_runs() -> u32 {
    100
}

impl ScenarioConfig {
    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(s).map_err(|e| ConfigError::Schema(e.to_string()))
    }

    pub fn from_value(v: Value) -> Result<Self, ConfigError> {
        serde_json::from_value(v).map_err(|e| ConfigError::Schema(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Schema(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("scenario config serializes")
    }
}

/// Read a scenario file as a raw JSON tree (for sweeps that edit fields).
pub fn read_document(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Schema(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Schema(e.to_string()))
}

/// Replace the field at dotted `axis` in `doc` with `value`.
///
/// Segments address object keys, array indices, or array elements by their
/// `id` field, e.g. `simulation.coherence_time`, `channels.0.qubits`,
/// `channels.A-B.qubits`. The field must already exist.
pub fn set_axis(doc: &mut Value, axis: &str, value: Value) -> Result<(), ConfigError> {
    let unknown = || ConfigError::UnknownAxis(axis.to_string());
    let mut cur = doc;
    let segments: Vec<&str> = axis.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(unknown());
    }
    for seg in segments {
        cur = match cur {
            Value::Object(map) => map.get_mut(seg).ok_or_else(unknown)?,
            Value::Array(items) => {
                if let Ok(i) = seg.parse::<usize>() {
                    items.get_mut(i).ok_or_else(unknown)?
                } else {
                    items
                        .iter_mut()
                        .find(|it| it.get("id").and_then(Value::as_str) == Some(seg))
                        .ok_or_else(unknown)?
                }
            }
            _ => return Err(unknown()),
        };
    }
    *cur = value;
    Ok(())
}
