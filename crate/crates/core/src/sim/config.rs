use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::buffer::message_bits;
use crate::flow::FlowTable;
use crate::infer::LatencyModel;
use crate::rate::{compute_rate, ProbabilityTable};
use crate::vio::DEFAULT_DEPTH;

use super::SimError;

/// Where inference happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Engine one short channel hop away from the switch.
    #[default]
    Fenix,
    /// Features go through the switch control plane to a remote model.
    ControlPlane,
}

/// How the uniform draw compared against the transmission probability is
/// produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawPolicy {
    /// One draw per backlog, renewed after each grant: the flow transmits at
    /// the first packet whose probability exceeds it, so the grant time
    /// follows the probability curve as a CDF.
    #[default]
    PerBacklog,
    /// A fresh draw for every packet.
    PerPacket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableConfig {
    pub t_bins: usize,
    pub c_bins: usize,
    /// Evaluate the probability function directly instead of the table.
    pub exact: bool,
}

impl Default for TableConfig {
    fn default() -> Self {
        Self { t_bins: ProbabilityTable::DEFAULT_BINS, c_bins: ProbabilityTable::DEFAULT_BINS, exact: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlPlaneLatency {
    pub tx_ns: u64,
    pub infer_ns: u64,
}

impl Default for ControlPlaneLatency {
    fn default() -> Self {
        Self { tx_ns: 2_100_000, infer_ns: 1_500_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    /// Propagation from switch to engine, excluding serialization.
    pub chan_to_engine_ns: u64,
    pub chan_return_ns: u64,
    /// Fixed inference latency; `None` derives it from `latency_model`.
    pub inference_ns: Option<u64>,
    pub engine_clock_hz: f64,
    pub latency_model: LatencyModel,
    pub control_plane: ControlPlaneLatency,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            chan_to_engine_ns: 1_000,
            chan_return_ns: 1_000,
            inference_ns: None,
            engine_clock_hz: 300e6,
            latency_model: LatencyModel::default(),
            control_plane: ControlPlaneLatency::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimiterOverride {
    /// Use this probability for every packet, compared against a fresh draw
    /// per packet whatever the draw policy.
    pub forced_probability: Option<f64>,
    /// Skip the token bucket.
    pub unlimited_tokens: bool,
}

/// Flow count and packet rate assumed until the first window closes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialWindow {
    pub flows: f64,
    pub pkt_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub window_ns: u64,
    pub ring_size: u16,
    pub table_bits: u32,
    /// Inference engine throughput `F`, inferences per second.
    pub engine_rate: f64,
    /// Switch-to-engine bandwidth `B`, bits per second.
    pub bandwidth_bps: f64,
    /// Message width `W`; `None` uses a full mirror of `ring_size + 1` features.
    pub message_bits: Option<u64>,
    pub queue_depth: usize,
    /// Token bucket size in grants; `None` uses `queue_depth`.
    pub bucket_cap: Option<f64>,
    pub table: TableConfig,
    pub draw: DrawPolicy,
    pub latency: LatencyConfig,
    pub mode: Mode,
    pub limiter: LimiterOverride,
    pub initial_window: Option<InitialWindow>,
    pub seed: u64,
    pub model: Option<PathBuf>,
    pub tree: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            window_ns: 100_000_000,
            ring_size: 8,
            table_bits: FlowTable::DEFAULT_BITS,
            engine_rate: 75e6,
            bandwidth_bps: 100e9,
            message_bits: None,
            queue_depth: DEFAULT_DEPTH,
            bucket_cap: None,
            table: TableConfig::default(),
            draw: DrawPolicy::default(),
            latency: LatencyConfig::default(),
            mode: Mode::default(),
            limiter: LimiterOverride::default(),
            initial_window: None,
            seed: 0,
            model: None,
            tree: None,
        }
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let c: Self = serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config; relative model and tree paths resolve against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut c.model, &mut c.tree].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.window_ns == 0 {
            return bad("window_ns must be positive".into());
        }
        if self.ring_size == 0 || self.ring_size as usize + 1 > u8::MAX as usize {
            return bad(format!("ring_size must be in 1..=254, got {}", self.ring_size));
        }
        if !(1..=28).contains(&self.table_bits) {
            return bad(format!("table_bits must be in 1..=28, got {}", self.table_bits));
        }
        if self.queue_depth == 0 {
            return bad("queue_depth must be positive".into());
        }
        if self.table.t_bins == 0 || self.table.c_bins == 0 {
            return bad("table bins must be positive".into());
        }
        if let Some(cap) = self.bucket_cap {
            if !(cap.is_finite() && cap > 0.0) {
                return bad(format!("bucket_cap must be positive, got {cap}"));
            }
        }
        if let Some(p) = self.limiter.forced_probability {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("forced_probability must be in [0, 1], got {p}"));
            }
        }
        if let Some(w) = self.initial_window {
            if !(w.flows >= 1.0 && w.pkt_rate > 0.0 && w.flows.is_finite() && w.pkt_rate.is_finite()) {
                return bad("initial_window needs flows >= 1 and pkt_rate > 0".into());
            }
        }
        if !(self.latency.engine_clock_hz.is_finite() && self.latency.engine_clock_hz > 0.0) {
            return bad("engine_clock_hz must be positive".into());
        }
        if self.message_bits == Some(0) {
            return bad("message_bits must be positive".into());
        }
        self.token_rate()?;
        Ok(())
    }

    pub fn message_bits(&self) -> u64 {
        self.message_bits.unwrap_or_else(|| message_bits(self.ring_size as usize + 1))
    }

    /// `V = min(F, B/W)`.
    pub fn token_rate(&self) -> Result<f64, SimError> {
        compute_rate(self.engine_rate, self.bandwidth_bps, self.message_bits() as f64).map_err(SimError::Rate)
    }

    pub fn bucket_cap(&self) -> f64 {
        self.bucket_cap.unwrap_or(self.queue_depth as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = SimConfig::default();
        c.validate().unwrap();
        assert_eq!(c.message_bits(), 400);
        assert_eq!(c.token_rate().unwrap(), 75e6);
        assert_eq!(c.bucket_cap(), 64.0);
    }

    #[test]
    fn json_fills_defaults_and_rejects_unknown_keys() {
        let c = SimConfig::from_json(r#"{"window_ns": 5, "mode": "control-plane", "draw": "per_packet"}"#).unwrap();
        assert_eq!(c.window_ns, 5);
        assert_eq!(c.mode, Mode::ControlPlane);
        assert_eq!(c.draw, DrawPolicy::PerPacket);
        assert_eq!(c.ring_size, 8);
        assert!(matches!(SimConfig::from_json(r#"{"windw_ns": 5}"#), Err(SimError::Config(_))));
        assert!(matches!(SimConfig::from_json(r#"{"window_ns": 0}"#), Err(SimError::Config(_))));
        assert!(matches!(SimConfig::from_json(r#"{"engine_rate": -1}"#), Err(SimError::Rate(_))));
        assert!(matches!(
            SimConfig::from_json(r#"{"limiter": {"forced_probability": 1.5}}"#),
            Err(SimError::Config(_))
        ));
    }

    #[test]
    fn relative_paths_resolve_against_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model": "m.fxqm", "tree": "/abs/t.json"}"#).unwrap();
        let c = SimConfig::load(&p).unwrap();
        assert_eq!(c.model.unwrap(), dir.path().join("m.fxqm"));
        assert_eq!(c.tree.unwrap(), PathBuf::from("/abs/t.json"));
    }
}
