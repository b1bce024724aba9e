//! Scenario configuration: TOML schema, defaults, validation, and scalar
//! overrides for parameter sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{CachePolicy, EnergyCoefficients, RadioTimers};
use crate::engine::TrafficProfile;
use crate::error::{Error, Result};
use crate::model::{CapacityExponent, PowerCalibration, LOSS_EXPONENT_RANGE};
use crate::topology::{Area, MobilityParams, NodeId, NodeRadio, TopologyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub node_count: u32,
    pub horizon_s: f64,
    pub metrics_interval_s: f64,
    pub comm_range_m: f64,
    pub zone_radius_hops: u32,
    /// Concurrent flows; sources are spread over the nodes.
    pub flow_count: u32,
    /// Fraction of flows tagged as delay-sensitive video.
    pub prioritized_fraction: f64,
    /// Per-node transmit queue limit in packets.
    pub queue_limit: u32,
    /// Write `decisions.ndjson` alongside the figures.
    pub decision_log: bool,
    pub area: AreaConfig,
    pub radio: RadioConfig,
    pub calibration: CalibrationConfig,
    pub traffic: TrafficConfig,
    pub stream: StreamConfig,
    pub cache: CacheConfig,
    pub energy: EnergyConfig,
    pub mobility: MobilityConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AreaConfig {
    pub width_m: f64,
    pub height_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub rate_mbps: f64,
    pub loss_exponent: f64,
    pub fading_factor: f64,
    /// Per-node transmitter overrides.
    pub overrides: Vec<RadioOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioOverride {
    pub node: NodeId,
    pub rate_mbps: Option<f64>,
    pub loss_exponent: Option<f64>,
    pub fading_factor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub k_power: f64,
    pub capacity_exponent: CapacityExponent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficConfig {
    pub packet_size_bits: u32,
    pub pareto_shape: f64,
    pub pareto_scale_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    /// Chunks per stream.
    pub chunk_count: u32,
    /// Per-chunk latency bound for correct stream reception.
    pub delay_bound_s: f64,
    /// Per-packet deadline relative to creation.
    pub deadline_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub enabled: bool,
    pub capacity_bytes: u64,
    pub sigma_band: [f64; 2],
    pub sigma_scale: f64,
    /// Longest a packet stays cached, as a fraction of the stream delay bound.
    pub max_hold_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub initial_j: f64,
    pub reference_active_power_uw: f64,
    pub rx_ratio: f64,
    pub idle_ratio: f64,
    pub sleep_ratio: f64,
    pub cache_hold_uw_per_kb: f64,
    pub idle_timeout_s: f64,
    pub sleep_timeout_s: f64,
    pub wake_s: f64,
    /// Sliding window for a node's running effective throughput.
    pub eff_window_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilityConfig {
    pub v_min_mps: f64,
    pub v_max_mps: f64,
    pub epoch_mean_s: f64,
    pub grid_jitter: f64,
    pub refresh_s: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 42,
            node_count: 50,
            horizon_s: 60.0,
            metrics_interval_s: 0.5,
            comm_range_m: 15.0,
            zone_radius_hops: 2,
            flow_count: 10,
            prioritized_fraction: 0.5,
            queue_limit: 64,
            decision_log: false,
            area: AreaConfig::default(),
            radio: RadioConfig::default(),
            calibration: CalibrationConfig::default(),
            traffic: TrafficConfig::default(),
            stream: StreamConfig::default(),
            cache: CacheConfig::default(),
            energy: EnergyConfig::default(),
            mobility: MobilityConfig::default(),
        }
    }
}

impl Default for AreaConfig {
    fn default() -> Self {
        AreaConfig {
            width_m: 40.0,
            height_m: 20.0,
        }
    }
}

impl Default for RadioConfig {
    fn default() -> Self {
        let r = NodeRadio::default();
        RadioConfig {
            rate_mbps: r.rate_mbps,
            loss_exponent: r.loss_exponent,
            fading_factor: r.fading_factor,
            overrides: Vec::new(),
        }
    }
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let c = PowerCalibration::default();
        CalibrationConfig {
            k_power: c.k_power,
            capacity_exponent: c.capacity_exponent,
        }
    }
}

impl Default for TrafficConfig {
    fn default() -> Self {
        let t = TrafficProfile::default();
        TrafficConfig {
            packet_size_bits: t.packet_size_bits,
            pareto_shape: t.pareto_shape,
            pareto_scale_s: t.pareto_scale_s,
        }
    }
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            chunk_count: 8,
            delay_bound_s: 2.0,
            deadline_s: 2.0,
        }
    }
}

impl Default for CacheConfig {
    fn default() -> Self {
        let p = CachePolicy::default();
        CacheConfig {
            enabled: p.enabled,
            capacity_bytes: 1_000_000_000,
            sigma_band: [p.sigma_band.0, p.sigma_band.1],
            sigma_scale: p.sigma_scale,
            max_hold_fraction: 0.25,
        }
    }
}

impl Default for EnergyConfig {
    fn default() -> Self {
        let c = EnergyCoefficients::default();
        let t = RadioTimers::default();
        EnergyConfig {
            initial_j: 0.002,
            reference_active_power_uw: c.reference_active_power_uw,
            rx_ratio: c.rx_ratio,
            idle_ratio: c.idle_ratio,
            sleep_ratio: c.sleep_ratio,
            cache_hold_uw_per_kb: c.cache_hold_uw_per_kb,
            idle_timeout_s: t.idle_timeout_s,
            sleep_timeout_s: t.sleep_timeout_s,
            wake_s: t.wake_s,
            eff_window_s: 1.0,
        }
    }
}

impl Default for MobilityConfig {
    fn default() -> Self {
        let m = MobilityParams::default();
        MobilityConfig {
            v_min_mps: m.v_min_mps,
            v_max_mps: m.v_max_mps,
            epoch_mean_s: m.epoch_mean_s,
            grid_jitter: 0.5,
            refresh_s: 0.05,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be non-negative, got {v}")))
    }
}

fn loss_exponent(field: &str, r: f64) -> Result<()> {
    let (lo, hi) = LOSS_EXPONENT_RANGE;
    if r > lo && r <= hi {
        Ok(())
    } else {
        Err(Error::config(field, format!("must lie in ({lo}, {hi}], got {r}")))
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let scenario: Scenario =
            toml::from_str(text).map_err(|e| Error::config("<file>", e.message().to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if i64::try_from(self.seed).is_err() {
            return Err(Error::config("seed", format!("must not exceed {}", i64::MAX)));
        }
        if self.node_count < 2 {
            return Err(Error::config("node_count", "need at least 2 nodes"));
        }
        non_negative("horizon_s", self.horizon_s)?;
        positive("metrics_interval_s", self.metrics_interval_s)?;
        positive("comm_range_m", self.comm_range_m)?;
        if self.zone_radius_hops == 0 {
            return Err(Error::config("zone_radius_hops", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.prioritized_fraction) {
            return Err(Error::config("prioritized_fraction", "must lie in [0, 1]"));
        }
        if self.queue_limit == 0 {
            return Err(Error::config("queue_limit", "must be at least 1"));
        }
        positive("area.width_m", self.area.width_m)?;
        positive("area.height_m", self.area.height_m)?;
        if self.area.width_m * self.area.height_m < f64::from(self.node_count) {
            return Err(Error::config("area", "too small: need at least 1 m^2 per node"));
        }

        positive("radio.rate_mbps", self.radio.rate_mbps)?;
        loss_exponent("radio.loss_exponent", self.radio.loss_exponent)?;
        non_negative("radio.fading_factor", self.radio.fading_factor)?;
        for (i, o) in self.radio.overrides.iter().enumerate() {
            let field = |f: &str| format!("radio.overrides[{i}].{f}");
            if o.node >= self.node_count {
                return Err(Error::config(field("node"), format!("no node {}", o.node)));
            }
            if let Some(r) = o.rate_mbps {
                positive(&field("rate_mbps"), r)?;
            }
            if let Some(r) = o.loss_exponent {
                loss_exponent(&field("loss_exponent"), r)?;
            }
            if let Some(f) = o.fading_factor {
                non_negative(&field("fading_factor"), f)?;
            }
        }

        positive("calibration.k_power", self.calibration.k_power)?;

        if self.traffic.packet_size_bits == 0 {
            return Err(Error::config("traffic.packet_size_bits", "must be positive"));
        }
        if !(self.traffic.pareto_shape > 1.0) {
            return Err(Error::config("traffic.pareto_shape", "must exceed 1"));
        }
        positive("traffic.pareto_scale_s", self.traffic.pareto_scale_s)?;

        if self.stream.chunk_count == 0 {
            return Err(Error::config("stream.chunk_count", "must be at least 1"));
        }
        positive("stream.delay_bound_s", self.stream.delay_bound_s)?;
        positive("stream.deadline_s", self.stream.deadline_s)?;

        if self.cache.capacity_bytes == 0 || i64::try_from(self.cache.capacity_bytes).is_err() {
            return Err(Error::config(
                "cache.capacity_bytes",
                format!("must lie in [1, {}]", i64::MAX),
            ));
        }
        let [lo, hi] = self.cache.sigma_band;
        if !(lo > 0.0 && hi <= 1.0 && lo < hi) {
            return Err(Error::config(
                "cache.sigma_band",
                format!("need 0 < low < high <= 1, got [{lo}, {hi}]"),
            ));
        }
        positive("cache.sigma_scale", self.cache.sigma_scale)?;
        positive("cache.max_hold_fraction", self.cache.max_hold_fraction)?;

        positive("energy.initial_j", self.energy.initial_j)?;
        self.energy_coefficients().validate()?;
        positive("energy.idle_timeout_s", self.energy.idle_timeout_s)?;
        positive("energy.sleep_timeout_s", self.energy.sleep_timeout_s)?;
        non_negative("energy.wake_s", self.energy.wake_s)?;
        positive("energy.eff_window_s", self.energy.eff_window_s)?;

        non_negative("mobility.v_min_mps", self.mobility.v_min_mps)?;
        non_negative("mobility.v_max_mps", self.mobility.v_max_mps)?;
        if self.mobility.v_min_mps > self.mobility.v_max_mps {
            return Err(Error::config("mobility.v_min_mps", "exceeds v_max_mps"));
        }
        positive("mobility.epoch_mean_s", self.mobility.epoch_mean_s)?;
        if !(0.0..=1.0).contains(&self.mobility.grid_jitter) {
            return Err(Error::config("mobility.grid_jitter", "must lie in [0, 1]"));
        }
        non_negative("mobility.refresh_s", self.mobility.refresh_s)?;
        Ok(())
    }

    pub fn calibration(&self) -> PowerCalibration {
        PowerCalibration {
            k_power: self.calibration.k_power,
            capacity_exponent: self.calibration.capacity_exponent,
        }
    }

    pub fn traffic_profile(&self) -> TrafficProfile {
        TrafficProfile {
            packet_size_bits: self.traffic.packet_size_bits,
            pareto_shape: self.traffic.pareto_shape,
            pareto_scale_s: self.traffic.pareto_scale_s,
        }
    }

    pub fn cache_policy(&self) -> CachePolicy {
        CachePolicy {
            sigma_band: (self.cache.sigma_band[0], self.cache.sigma_band[1]),
            sigma_scale: self.cache.sigma_scale,
            enabled: self.cache.enabled,
        }
    }

    pub fn energy_coefficients(&self) -> EnergyCoefficients {
        EnergyCoefficients {
            reference_active_power_uw: self.energy.reference_active_power_uw,
            rx_ratio: self.energy.rx_ratio,
            idle_ratio: self.energy.idle_ratio,
            sleep_ratio: self.energy.sleep_ratio,
            cache_hold_uw_per_kb: self.energy.cache_hold_uw_per_kb,
        }
    }

    pub fn radio_timers(&self) -> RadioTimers {
        RadioTimers {
            idle_timeout_s: self.energy.idle_timeout_s,
            sleep_timeout_s: self.energy.sleep_timeout_s,
            wake_s: self.energy.wake_s,
        }
    }

    pub fn node_radio(&self, node: NodeId) -> NodeRadio {
        let mut r = NodeRadio {
            rate_mbps: self.radio.rate_mbps,
            loss_exponent: self.radio.loss_exponent,
            fading_factor: self.radio.fading_factor,
        };
        for o in self.radio.overrides.iter().filter(|o| o.node == node) {
            r.rate_mbps = o.rate_mbps.unwrap_or(r.rate_mbps);
            r.loss_exponent = o.loss_exponent.unwrap_or(r.loss_exponent);
            r.fading_factor = o.fading_factor.unwrap_or(r.fading_factor);
        }
        r
    }

    pub fn topology_config(&self) -> TopologyConfig {
        TopologyConfig {
            n_nodes: self.node_count,
            area: Area {
                width_m: self.area.width_m,
                height_m: self.area.height_m,
            },
            comm_range_m: self.comm_range_m,
            grid_jitter: self.mobility.grid_jitter,
            mobility: MobilityParams {
                v_min_mps: self.mobility.v_min_mps,
                v_max_mps: self.mobility.v_max_mps,
                epoch_mean_s: self.mobility.epoch_mean_s,
            },
            refresh_s: self.mobility.refresh_s,
            radio: self.node_radio(NodeId::MAX),
        }
    }

    /// Returns a copy with the scalar field at dotted `path` set from `value`.
    /// The value is parsed according to the field's current type.
    pub fn with_field(&self, path: &str, value: &str) -> Result<Scenario> {
        let mut root = toml::Value::try_from(self)
            .map_err(|e| Error::config(path, format!("cannot serialize scenario: {e}")))?;
        let mut slot = &mut root;
        for key in path.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(key))
                .ok_or_else(|| Error::config(path, "no such field"))?;
        }
        let bad = |what: &str| Error::config(path, format!("cannot parse `{value}` as {what}"));
        *slot = match slot {
            toml::Value::Integer(_) => toml::Value::Integer(value.trim().parse().map_err(|_| bad("an integer"))?),
            toml::Value::Float(_) => toml::Value::Float(value.trim().parse().map_err(|_| bad("a number"))?),
            toml::Value::Boolean(_) => toml::Value::Boolean(value.trim().parse().map_err(|_| bad("a boolean"))?),
            toml::Value::String(_) => toml::Value::String(value.trim().to_string()),
            _ => return Err(Error::config(path, "only scalar fields can be swept")),
        };
        let scenario: Scenario = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(path, e.message().to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Reads and validates a scenario file. An empty file yields the defaults.
pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    Scenario::from_toml_str(&text)
}
