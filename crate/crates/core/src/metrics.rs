//! Run metrics and the figure aggregations.
//!
//! Every aggregation is a pure function of [`RunMetrics`]. CSV outputs carry a
//! header row and print floats with Rust's shortest round-trip formatting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::Priority;
use crate::engine::FlowId;
use crate::error::{Error, Result};
use crate::model::{effective_throughput, effective_throughput_unclamped, ThroughputStats};
use crate::topology::NodeId;

/// Width of the σ buckets in the caching-delay table.
pub const SIGMA_BUCKET_WIDTH: f64 = 0.05;
/// Width of the link-distance buckets in the distance-grouped power table.
pub const DISTANCE_BUCKET_M: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub time_s: f64,
    pub node: NodeId,
    /// Transmitter's zone size at transmission time.
    pub zone_size: usize,
    pub distance_m: f64,
    pub power_uw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheSample {
    pub time_s: f64,
    pub node: NodeId,
    pub sigma: f64,
    pub chunk_delay_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeliverySample {
    pub flow: FlowId,
    pub priority: Priority,
    pub latency_s: f64,
}

/// Cumulative per-flow counters; the measurement window runs from the first
/// transmission to the last delivery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub flow: FlowId,
    pub priority: Priority,
    pub transmitted_blocks: u64,
    pub received_blocks: u64,
    pub delivered_bits: f64,
    pub first_tx_s: Option<f64>,
    pub last_delivery_s: Option<f64>,
    pub offered_bps: f64,
}

impl FlowMetrics {
    pub fn new(flow: FlowId, priority: Priority, offered_bps: f64) -> Self {
        FlowMetrics {
            flow,
            priority,
            transmitted_blocks: 0,
            received_blocks: 0,
            delivered_bits: 0.0,
            first_tx_s: None,
            last_delivery_s: None,
            offered_bps,
        }
    }

    pub fn stats(&self) -> ThroughputStats {
        let transfer_time_s = match (self.first_tx_s, self.last_delivery_s) {
            (Some(a), Some(b)) if b > a => b - a,
            _ => 0.0,
        };
        ThroughputStats {
            transmitted_blocks: self.transmitted_blocks,
            received_blocks: self.received_blocks,
            transfer_size_bits: if transfer_time_s > 0.0 { self.delivered_bits } else { 0.0 },
            transfer_time_s,
            bandwidth_bps: self.offered_bps,
        }
    }

    /// Effective throughput, or `None` if nothing was transmitted. A flow with
    /// no deliveries scores 0.
    pub fn effective_throughput(&self) -> Option<f64> {
        if self.transmitted_blocks == 0 {
            return None;
        }
        let stats = self.stats();
        if stats.transfer_time_s <= 0.0 {
            return Some(0.0);
        }
        effective_throughput(&stats).ok()
    }

    fn is_clamped(&self) -> bool {
        let stats = self.stats();
        stats.transfer_time_s > 0.0
            && effective_throughput_unclamped(&stats).is_ok_and(|v| !(0.0..=1.0).contains(&v))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub interval_s: f64,
    pub initial_energy_j: Vec<f64>,
    pub sample_times: Vec<f64>,
    /// `node_residual[node][k]` is the residual at `sample_times[k]`.
    pub node_residual: Vec<Vec<f64>>,
    /// Fixed partition of the nodes into zones, assigned at start-up.
    pub zones: Vec<Vec<NodeId>>,
    pub zone_mean_residual: Vec<Vec<f64>>,
    /// Total energy debited network-wide at each sample.
    pub ledger_debits_at_sample: Vec<f64>,
    pub power_samples: Vec<PowerSample>,
    pub cache_samples: Vec<CacheSample>,
    /// Every σ evaluated for a "don't care" packet, cached or not.
    pub sigma_samples: Vec<f64>,
    pub flows: Vec<FlowMetrics>,
    pub deliveries: Vec<DeliverySample>,
    pub cache_hold_s: Vec<f64>,
}

impl RunMetrics {
    pub fn new(interval_s: f64, initial_energy_j: Vec<f64>, zones: Vec<Vec<NodeId>>) -> Self {
        let n = initial_energy_j.len();
        let z = zones.len();
        RunMetrics {
            interval_s,
            initial_energy_j,
            node_residual: vec![Vec::new(); n],
            zone_mean_residual: vec![Vec::new(); z],
            zones,
            ..Default::default()
        }
    }

    /// Appends one sample to every series.
    pub fn sample_metrics(&mut self, now: f64, residuals: &[f64], total_debits_j: f64) -> Result<()> {
        if self.sample_times.last().is_some_and(|&t| t >= now) {
            return Err(Error::Invariant(format!(
                "metrics sample at {now} does not advance past {:?}",
                self.sample_times.last()
            )));
        }
        if residuals.len() != self.node_residual.len() {
            return Err(Error::Invariant("residual vector length mismatch".into()));
        }
        self.sample_times.push(now);
        for (series, &r) in self.node_residual.iter_mut().zip(residuals) {
            series.push(r);
        }
        for (series, members) in self.zone_mean_residual.iter_mut().zip(&self.zones) {
            let sum: f64 = members.iter().map(|&m| residuals[m as usize]).sum();
            series.push(sum / members.len().max(1) as f64);
        }
        self.ledger_debits_at_sample.push(total_debits_j);
        Ok(())
    }

    pub fn mean_transmit_power_uw(&self) -> f64 {
        mean(self.power_samples.iter().map(|s| s.power_uw)).unwrap_or(0.0)
    }

    pub fn mean_effective_throughput(&self) -> f64 {
        mean(self.flows.iter().filter_map(FlowMetrics::effective_throughput)).unwrap_or(0.0)
    }

    pub fn clamped_throughput_count(&self) -> usize {
        self.flows.iter().filter(|f| f.is_clamped()).count()
    }

    pub fn mean_delay_s(&self, priority: Priority) -> Option<f64> {
        mean(
            self.deliveries
                .iter()
                .filter(|d| d.priority == priority)
                .map(|d| d.latency_s),
        )
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn grouped_means<K: Ord + Copy>(pairs: impl Iterator<Item = (K, f64)>) -> Vec<(K, f64)> {
    let mut groups: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for (k, v) in pairs {
        let e = groups.entry(k).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    groups
        .into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

/// Mean transmit power grouped by the transmitter's zone size.
pub fn fig5_aggregate(m: &RunMetrics) -> Vec<(usize, f64)> {
    grouped_means(m.power_samples.iter().map(|s| (s.zone_size, s.power_uw)))
}

/// Mean transmit power grouped by link distance, bucketed upward to whole
/// meters: a row labelled `9` covers links in `(8, 9]`.
pub fn fig5_by_distance(m: &RunMetrics) -> Vec<(f64, f64)> {
    grouped_means(
        m.power_samples
            .iter()
            .map(|s| ((s.distance_m / DISTANCE_BUCKET_M).ceil() as i64, s.power_uw)),
    )
    .into_iter()
    .map(|(k, v)| (k as f64 * DISTANCE_BUCKET_M, v))
    .collect()
}

/// Mean caching delay per σ bucket; rows are labelled by the bucket's lower edge.
pub fn fig6_aggregate(m: &RunMetrics) -> Vec<(f64, f64)> {
    grouped_means(
        m.cache_samples
            .iter()
            .map(|s| ((s.sigma / SIGMA_BUCKET_WIDTH + 1e-9).floor() as i64, s.chunk_delay_s)),
    )
    .into_iter()
    .map(|(k, v)| (k as f64 * SIGMA_BUCKET_WIDTH, v))
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig7Row {
    pub mean_eff_throughput: f64,
    pub mean_power_uw: f64,
}

/// Run-level mean effective throughput against mean transmit power.
pub fn fig7_aggregate(m: &RunMetrics) -> Fig7Row {
    Fig7Row {
        mean_eff_throughput: m.mean_effective_throughput(),
        mean_power_uw: m.mean_transmit_power_uw(),
    }
}

/// Points not dominated by any other (less or equal power with at least the
/// same throughput, one of them strict), sorted by power.
pub fn efficiency_frontier(points: &[Fig7Row]) -> Vec<Fig7Row> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.mean_power_uw
            .total_cmp(&b.mean_power_uw)
            .then(b.mean_eff_throughput.total_cmp(&a.mean_eff_throughput))
    });
    let mut out: Vec<Fig7Row> = Vec::new();
    for p in sorted {
        if out.last().is_none_or(|l| p.mean_eff_throughput > l.mean_eff_throughput) {
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig8Row {
    pub time_s: f64,
    pub zone_id: usize,
    pub mean_residual_j: f64,
}

/// Mean residual energy of each zone at each sample time.
pub fn fig8_aggregate(m: &RunMetrics) -> Vec<Fig8Row> {
    m.sample_times
        .iter()
        .enumerate()
        .flat_map(|(k, &time_s)| {
            m.zone_mean_residual
                .iter()
                .enumerate()
                .map(move |(zone_id, series)| Fig8Row {
                    time_s,
                    zone_id,
                    mean_residual_j: series[k],
                })
        })
        .collect()
}

/// Energy consumed between the first and last samples, recovered from the
/// zone means and zone sizes.
pub fn fig8_consumed_j(m: &RunMetrics) -> f64 {
    m.zones
        .iter()
        .zip(&m.zone_mean_residual)
        .map(|(members, series)| match (series.first(), series.last()) {
            (Some(a), Some(b)) => (a - b) * members.len() as f64,
            _ => 0.0,
        })
        .sum()
}

fn write_rows<const N: usize>(path: &Path, header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `fig5.csv`, `fig5_by_distance.csv`, `fig6.csv`, `fig7.csv` and `fig8.csv`.
pub fn write_figures(dir: &Path, m: &RunMetrics) -> Result<()> {
    write_rows(
        &dir.join("fig5.csv"),
        ["zone_node_count", "mean_power_uW"],
        fig5_aggregate(m)
            .into_iter()
            .map(|(k, v)| [k.to_string(), v.to_string()]),
    )?;
    write_rows(
        &dir.join("fig5_by_distance.csv"),
        ["max_link_distance_m", "mean_power_uW"],
        fig5_by_distance(m)
            .into_iter()
            .map(|(k, v)| [k.to_string(), v.to_string()]),
    )?;
    write_rows(
        &dir.join("fig6.csv"),
        ["sigma_bucket", "mean_caching_delay_s"],
        fig6_aggregate(m)
            .into_iter()
            .map(|(k, v)| [k.to_string(), v.to_string()]),
    )?;
    let f7 = fig7_aggregate(m);
    write_rows(
        &dir.join("fig7.csv"),
        ["mean_eff_throughput", "mean_power_uW"],
        std::iter::once([f7.mean_eff_throughput.to_string(), f7.mean_power_uw.to_string()]),
    )?;
    write_rows(
        &dir.join("fig8.csv"),
        ["time_s", "zone_id", "mean_residual_j"],
        fig8_aggregate(m).into_iter().map(|r| {
            [
                r.time_s.to_string(),
                r.zone_id.to_string(),
                r.mean_residual_j.to_string(),
            ]
        }),
    )?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PacketCounts {
    pub generated: u64,
    pub delivered: u64,
    pub dropped: BTreeMap<String, u64>,
    pub dropped_total: u64,
    pub cached_at_end: u64,
    pub in_flight_at_end: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StreamCounts {
    pub completed: u64,
    pub in_bound: u64,
    pub bound_violated: u64,
    pub violation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyTotals {
    pub initial_total_j: f64,
    pub consumed_total_j: f64,
    pub residual_total_j: f64,
    pub dead_nodes: u64,
    pub anomalies: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CacheTotals {
    pub admitted: u64,
    pub evicted: u64,
    pub flushed: u64,
    pub expired: u64,
    pub mean_hold_s: f64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub horizon_s: f64,
    pub node_count: u32,
    pub flow_count: u32,
    pub events_processed: u64,
    pub trace_digest: String,
    pub packets: PacketCounts,
    pub loss_rate: f64,
    pub streams: StreamCounts,
    pub energy: EnergyTotals,
    pub cache: CacheTotals,
    pub mean_eff_throughput: f64,
    pub eff_throughput_clamped_flows: u64,
    pub mean_power_uw: f64,
    pub mean_delay_prioritized_s: Option<f64>,
    pub mean_delay_dont_care_s: Option<f64>,
}

impl RunSummary {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
