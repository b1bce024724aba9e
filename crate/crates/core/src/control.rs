//! Per-node decision logic: priority classes, forward/cache/drop choices,
//! cache stores, radio state machine and the energy ledger.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{FlowId, PacketId};
use crate::error::{Error, Result};
use crate::model::{
    caching_threshold, capacity_scaled_power, chunk_delay, transmission_power, CachingParams,
    CapacityState, LinkSpec, PowerCalibration,
};
use crate::topology::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    Prioritized,
    DontCare,
}

impl Priority {
    /// Maps an application tag to a class. Audio and video streams are delay
    /// sensitive; everything else, including unknown tags, is "don't care".
    pub fn from_tag(tag: &str) -> Priority {
        match tag.to_ascii_lowercase().as_str() {
            "audio" | "video" | "voice" | "stream" => Priority::Prioritized,
            _ => Priority::DontCare,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub stream_id: u64,
    pub chunk_count: u32,
    /// Whole-stream transfer time from a single peer.
    pub total_single_peer_time_s: f64,
    /// Nodes on the current route excluding the endpoints.
    pub intermediate_count: u32,
    /// Upper bound on per-chunk latency for correct reception.
    pub delay_bound_s: f64,
    pub priority: Priority,
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.delay_bound_s > 0.0) {
            return Err(Error::domain("stream delay bound must be positive"));
        }
        if self.chunk_count == 0 {
            return Err(Error::domain("stream needs at least one chunk"));
        }
        if !(self.total_single_peer_time_s > 0.0) {
            return Err(Error::domain("single-peer stream time must be positive"));
        }
        Ok(())
    }
}

pub fn classify(stream: &StreamSpec) -> Priority {
    stream.priority
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketMeta {
    pub id: PacketId,
    pub flow: FlowId,
    pub stream: StreamSpec,
    pub chunk_index: u32,
    /// Absolute virtual time by which the packet must arrive.
    pub deadline_s: f64,
    pub size_bits: u32,
    pub created_s: f64,
    pub hops_remaining: u32,
}

impl PacketMeta {
    pub fn priority(&self) -> Priority {
        self.stream.priority
    }

    pub fn size_bytes(&self) -> u64 {
        u64::from(self.size_bits).div_ceil(8)
    }

    /// True once the packet can no longer meet its deadline or the stream bound.
    pub fn is_expired(&self, now: f64) -> bool {
        now > self.deadline_s || now - self.created_s > self.stream.delay_bound_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Expired,
    NoRoute,
    NoNextHop,
    QueueOverflow,
    LinkLost,
    NodeDead,
}

impl DropReason {
    pub const ALL: [DropReason; 6] = [
        DropReason::Expired,
        DropReason::NoRoute,
        DropReason::NoNextHop,
        DropReason::QueueOverflow,
        DropReason::LinkLost,
        DropReason::NodeDead,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::Expired => "expired",
            DropReason::NoRoute => "no_route",
            DropReason::NoNextHop => "no_next_hop",
            DropReason::QueueOverflow => "queue_overflow",
            DropReason::LinkLost => "link_lost",
            DropReason::NodeDead => "node_dead",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CachePolicy {
    /// Open interval of σ values for which caching is allowed.
    pub sigma_band: (f64, f64),
    /// Reference value of `Σ R·d / δ̄` (Mb/s·m/s) that maps raw thresholds
    /// onto the band's scale.
    pub sigma_scale: f64,
    pub enabled: bool,
}

impl Default for CachePolicy {
    fn default() -> Self {
        CachePolicy {
            sigma_band: (0.2, 0.99),
            sigma_scale: 2500.0,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionInput<'a> {
    pub now: f64,
    pub packet: &'a PacketMeta,
    /// Whether a live next hop is in range (after at most one re-discovery).
    pub next_hop_reachable: bool,
    /// Links from this node to the destination.
    pub remaining_links: &'a [LinkSpec],
    /// A prioritized packet is waiting in this node's queue.
    pub prioritized_queued: bool,
    /// Node chosen to host the packet if it is cached, when admission there
    /// would succeed.
    pub cache_site: Option<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum Action {
    Forward,
    Cache { site: NodeId },
    Drop { reason: DropReason },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    /// Scaled caching threshold, for "don't care" packets that were evaluated.
    pub sigma: Option<f64>,
    /// Per-chunk delay used for σ.
    pub chunk_delay_s: Option<f64>,
}

/// Forward, cache or drop a packet at an intermediate node.
pub fn forward_decision(input: &DecisionInput<'_>, policy: &CachePolicy) -> Result<Decision> {
    let decided = |action| Decision {
        action,
        sigma: None,
        chunk_delay_s: None,
    };
    let packet = input.packet;
    if packet.is_expired(input.now) {
        return Ok(decided(Action::Drop {
            reason: DropReason::Expired,
        }));
    }
    if !input.next_hop_reachable || input.remaining_links.is_empty() {
        return Ok(decided(Action::Drop {
            reason: DropReason::NoNextHop,
        }));
    }
    if packet.priority() == Priority::Prioritized || !policy.enabled {
        return Ok(decided(Action::Forward));
    }
    // Peers on the remaining path, this node included.
    let peer_count = input.remaining_links.len() as u32 + 1;
    let delay = chunk_delay(&CachingParams {
        tau0_s: packet.stream.total_single_peer_time_s,
        chunk_count: packet.stream.chunk_count,
        peer_count,
    })?;
    let sigma = caching_threshold(input.remaining_links, delay)? / policy.sigma_scale;
    let (lo, hi) = policy.sigma_band;
    let action = match input.cache_site {
        Some(site) if sigma > lo && sigma < hi && input.prioritized_queued => Action::Cache { site },
        _ => Action::Forward,
    };
    Ok(Decision {
        action,
        sigma: Some(sigma),
        chunk_delay_s: Some(delay),
    })
}

/// Picks the intermediate node of `path` that should hold a cached packet:
/// the highest residual energy among nodes with room for `packet_bytes`
/// (lowest id on ties), or the highest residual overall if none has room.
/// `state` returns `(residual_j, free_bytes)` for a node.
pub fn nre_cache_site(
    path: &[NodeId],
    packet_bytes: u64,
    state: impl Fn(NodeId) -> (f64, u64),
) -> Option<NodeId> {
    if path.len() < 3 {
        return None;
    }
    let intermediates = &path[1..path.len() - 1];
    let best = |with_space: bool| {
        intermediates
            .iter()
            .map(|&n| (n, state(n)))
            .filter(|(_, (_, free))| !with_space || *free >= packet_bytes)
            .fold(None::<(NodeId, f64)>, |acc, (n, (res, _))| match acc {
                Some((bn, br)) if br > res || (br == res && bn < n) => Some((bn, br)),
                _ => Some((n, res)),
            })
            .map(|(n, _)| n)
    };
    best(true).or_else(|| best(false))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub packet: PacketMeta,
    pub bytes: u64,
    pub admitted_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CacheAdmission {
    pub admitted: bool,
    /// Entries pushed out to make room; callers re-forward them.
    pub evicted: Vec<CacheEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheStore {
    capacity_bytes: u64,
    occupancy_bytes: u64,
    entries: BTreeMap<PacketId, CacheEntry>,
}

impl CacheStore {
    pub fn new(capacity_bytes: u64) -> Self {
        CacheStore {
            capacity_bytes,
            occupancy_bytes: 0,
            entries: BTreeMap::new(),
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn occupancy_bytes(&self) -> u64 {
        self.occupancy_bytes
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity_bytes - self.occupancy_bytes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: PacketId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.values()
    }

    pub fn capacity_state(&self) -> CapacityState {
        CapacityState::new(self.capacity_bytes.max(1), self.occupancy_bytes.min(self.capacity_bytes.max(1)))
            .expect("occupancy never exceeds capacity")
    }

    // DontCare entries an incoming packet may displace, nearest deadline first.
    fn eviction_candidates(&self, incoming: &PacketMeta) -> Vec<(f64, PacketId, u64)> {
        let mut v: Vec<_> = self
            .entries
            .values()
            .filter(|e| {
                e.packet.priority() == Priority::DontCare && e.packet.deadline_s > incoming.deadline_s
            })
            .map(|e| (e.packet.deadline_s, e.packet.id, e.bytes))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        v
    }

    /// Whether `cache_admit` would succeed, without changing the store.
    pub fn can_admit(&self, packet: &PacketMeta, now: f64) -> bool {
        let bytes = packet.size_bytes();
        if packet.is_expired(now)
            || packet.priority() == Priority::Prioritized
            || bytes > self.capacity_bytes
            || self.contains(packet.id)
        {
            return false;
        }
        let reclaimable: u64 = self.eviction_candidates(packet).iter().map(|c| c.2).sum();
        self.free_bytes() + reclaimable >= bytes
    }

    pub fn remove(&mut self, id: PacketId) -> Option<CacheEntry> {
        let entry = self.entries.remove(&id)?;
        self.occupancy_bytes -= entry.bytes;
        Some(entry)
    }

    /// Removes and returns all entries, earliest deadline first.
    pub fn drain_by_deadline(&mut self) -> Vec<CacheEntry> {
        let mut all: Vec<_> = std::mem::take(&mut self.entries).into_values().collect();
        self.occupancy_bytes = 0;
        all.sort_by(|a, b| {
            a.packet
                .deadline_s
                .total_cmp(&b.packet.deadline_s)
                .then(a.packet.id.cmp(&b.packet.id))
        });
        all
    }

    /// Removes entries whose packets can no longer meet their deadline.
    pub fn expire(&mut self, now: f64) -> Vec<CacheEntry> {
        let expired: Vec<PacketId> = self
            .entries
            .values()
            .filter(|e| e.packet.is_expired(now))
            .map(|e| e.packet.id)
            .collect();
        expired.into_iter().filter_map(|id| self.remove(id)).collect()
    }
}

/// Admits a "don't care" packet into the store, evicting later-deadline
/// entries nearest-deadline first when space is short. Expired and
/// prioritized packets are rejected; nothing is evicted on rejection.
pub fn cache_admit(store: &mut CacheStore, packet: &PacketMeta, now: f64) -> CacheAdmission {
    if !store.can_admit(packet, now) {
        return CacheAdmission::default();
    }
    let bytes = packet.size_bytes();
    let mut evicted = Vec::new();
    for (_, id, _) in store.eviction_candidates(packet) {
        if store.free_bytes() >= bytes {
            break;
        }
        evicted.extend(store.remove(id));
    }
    debug_assert!(store.free_bytes() >= bytes);
    store.occupancy_bytes += bytes;
    store.entries.insert(
        packet.id,
        CacheEntry {
            packet: *packet,
            bytes,
            admitted_s: now,
        },
    );
    CacheAdmission {
        admitted: true,
        evicted,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadioState {
    Active,
    Idle,
    Sleep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioTimers {
    pub idle_timeout_s: f64,
    pub sleep_timeout_s: f64,
    pub wake_s: f64,
}

impl Default for RadioTimers {
    fn default() -> Self {
        RadioTimers {
            idle_timeout_s: 0.5,
            sleep_timeout_s: 2.0,
            wake_s: 0.002,
        }
    }
}

/// Radio state implied by the node's workload and time since its last activity.
pub fn radio_state_update(busy: bool, last_activity_s: f64, now: f64, timers: &RadioTimers) -> RadioState {
    let quiet = now - last_activity_s;
    if busy || quiet < timers.idle_timeout_s {
        RadioState::Active
    } else if quiet < timers.idle_timeout_s + timers.sleep_timeout_s {
        RadioState::Idle
    } else {
        RadioState::Sleep
    }
}

/// Energy drain coefficients. Idle and sleep draws are fractions of the
/// reference active power; receive energy is a fraction of the link's
/// per-bit transmit energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyCoefficients {
    pub reference_active_power_uw: f64,
    pub rx_ratio: f64,
    pub idle_ratio: f64,
    pub sleep_ratio: f64,
    /// Holding cost of cached data, µW per kilobyte.
    pub cache_hold_uw_per_kb: f64,
}

impl Default for EnergyCoefficients {
    fn default() -> Self {
        EnergyCoefficients {
            reference_active_power_uw: 100.0,
            rx_ratio: 0.5,
            idle_ratio: 0.05,
            sleep_ratio: 0.01,
            cache_hold_uw_per_kb: 0.1,
        }
    }
}

impl EnergyCoefficients {
    pub fn validate(&self) -> Result<()> {
        if !(self.reference_active_power_uw > 0.0) {
            return Err(Error::config(
                "energy.reference_active_power_uw",
                "must be positive",
            ));
        }
        if !(self.rx_ratio > 0.0) {
            return Err(Error::config("energy.rx_ratio", "must be positive"));
        }
        if !(self.sleep_ratio > 0.0 && self.sleep_ratio < self.idle_ratio && self.idle_ratio < 1.0) {
            return Err(Error::config(
                "energy",
                "ratios must satisfy 0 < sleep_ratio < idle_ratio < 1 (active)",
            ));
        }
        if !(self.cache_hold_uw_per_kb >= 0.0) {
            return Err(Error::config("energy.cache_hold_uw_per_kb", "must be non-negative"));
        }
        Ok(())
    }

    pub fn idle_power_uw(&self) -> f64 {
        self.idle_ratio * self.reference_active_power_uw
    }

    pub fn sleep_power_uw(&self) -> f64 {
        self.sleep_ratio * self.reference_active_power_uw
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activity {
    Transmit {
        link: LinkSpec,
        bits: u32,
        capacity: CapacityState,
        /// Node's running effective throughput.
        eff: f64,
    },
    Receive {
        link: LinkSpec,
        bits: u32,
    },
    CacheHold {
        bytes: u64,
        seconds: f64,
    },
    IdleTick {
        seconds: f64,
    },
    SleepTick {
        seconds: f64,
    },
}

/// Transmit power after capacity scaling, in µW.
pub fn transmit_power_uw(
    link: &LinkSpec,
    capacity: &CapacityState,
    eff: f64,
    calib: &PowerCalibration,
) -> Result<f64> {
    capacity_scaled_power(transmission_power(link, calib)?, capacity, eff, calib)
}

fn airtime_s(bits: u32, link: &LinkSpec) -> f64 {
    f64::from(bits) / (link.rate_mbps * 1e6)
}

/// Energy cost of an activity in joules.
pub fn activity_cost_j(
    activity: &Activity,
    coeffs: &EnergyCoefficients,
    calib: &PowerCalibration,
) -> Result<f64> {
    const UW: f64 = 1e-6;
    let cost = match *activity {
        Activity::Transmit {
            link,
            bits,
            capacity,
            eff,
        } => transmit_power_uw(&link, &capacity, eff, calib)? * UW * airtime_s(bits, &link),
        Activity::Receive { link, bits } => {
            coeffs.rx_ratio * transmission_power(&link, calib)? * UW * airtime_s(bits, &link)
        }
        Activity::CacheHold { bytes, seconds } => {
            coeffs.cache_hold_uw_per_kb * (bytes as f64 / 1000.0) * UW * seconds
        }
        Activity::IdleTick { seconds } => coeffs.idle_power_uw() * UW * seconds,
        Activity::SleepTick { seconds } => coeffs.sleep_power_uw() * UW * seconds,
    };
    if !(cost >= 0.0) {
        return Err(Error::domain(format!("negative or undefined activity cost {cost}")));
    }
    Ok(cost)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeEnergy {
    pub initial_j: f64,
    pub residual_j: f64,
    /// Sum of every debit actually charged.
    pub debited_j: f64,
    pub radio_state: RadioState,
    pub state_entered_s: f64,
    /// Background drain has been charged up to this time.
    pub settled_s: f64,
    /// Activities attempted after depletion.
    pub anomalies: u64,
}

impl NodeEnergy {
    pub fn new(initial_j: f64) -> Self {
        NodeEnergy {
            initial_j,
            residual_j: initial_j,
            debited_j: 0.0,
            radio_state: RadioState::Active,
            state_entered_s: 0.0,
            settled_s: 0.0,
            anomalies: 0,
        }
    }

    pub fn is_depleted(&self) -> bool {
        self.residual_j <= 0.0
    }

    /// Removes up to `cost_j` from the residual. Returns the amount charged.
    pub fn charge(&mut self, cost_j: f64) -> f64 {
        if self.is_depleted() {
            if cost_j > 0.0 {
                self.anomalies += 1;
            }
            return 0.0;
        }
        let charged = cost_j.min(self.residual_j);
        self.residual_j -= charged;
        self.debited_j += charged;
        charged
    }

    /// Charges background drain from `settled_s` to `now` at the current
    /// state's rate. Returns the amount charged.
    pub fn settle(&mut self, now: f64, coeffs: &EnergyCoefficients, calib: &PowerCalibration) -> Result<f64> {
        if now <= self.settled_s {
            return Ok(0.0);
        }
        let seconds = now - self.settled_s;
        self.settled_s = now;
        let activity = match self.radio_state {
            RadioState::Active | RadioState::Idle => Activity::IdleTick { seconds },
            RadioState::Sleep => Activity::SleepTick { seconds },
        };
        debit_energy(self, &activity, coeffs, calib)
    }

    pub fn enter(&mut self, state: RadioState, now: f64) {
        if self.radio_state != state {
            self.radio_state = state;
            self.state_entered_s = now;
        }
    }
}

/// Charges `activity` against the node and returns the new residual. A node
/// reaching zero is put to sleep permanently; activities on a depleted node
/// are counted as anomalies and cost nothing.
pub fn debit_energy(
    node: &mut NodeEnergy,
    activity: &Activity,
    coeffs: &EnergyCoefficients,
    calib: &PowerCalibration,
) -> Result<f64> {
    let cost = activity_cost_j(activity, coeffs, calib)?;
    node.charge(cost);
    if node.is_depleted() {
        node.radio_state = RadioState::Sleep;
    }
    Ok(node.residual_j)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamOutcome {
    InBound,
    BoundViolated,
}

/// `latencies[k]` is the delivery latency of chunk `k`, `None` if dropped.
pub fn stream_complete(stream: &StreamSpec, latencies: &[Option<f64>]) -> StreamOutcome {
    let all_on_time = latencies.len() == stream.chunk_count as usize
        && latencies
            .iter()
            .all(|l| matches!(l, Some(t) if *t <= stream.delay_bound_s));
    if all_on_time {
        StreamOutcome::InBound
    } else {
        StreamOutcome::BoundViolated
    }
}

/// One line of the optional per-decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub time_s: f64,
    pub node: NodeId,
    pub packet_id: PacketId,
    pub decision: String,
    pub sigma: Option<f64>,
    pub residual_j: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(priority: Priority) -> StreamSpec {
        StreamSpec {
            stream_id: 1,
            chunk_count: 4,
            total_single_peer_time_s: 0.4,
            intermediate_count: 1,
            delay_bound_s: 2.0,
            priority,
        }
    }

    fn packet(id: PacketId, priority: Priority, deadline_s: f64) -> PacketMeta {
        PacketMeta {
            id,
            flow: 0,
            stream: stream(priority),
            chunk_index: 0,
            deadline_s,
            size_bits: 4096,
            created_s: 0.0,
            hops_remaining: 2,
        }
    }

    #[test]
    fn tags_map_to_priorities() {
        assert_eq!(Priority::from_tag("video"), Priority::Prioritized);
        assert_eq!(Priority::from_tag("Audio"), Priority::Prioritized);
        assert_eq!(Priority::from_tag("bulk"), Priority::DontCare);
        assert_eq!(Priority::from_tag("mystery"), Priority::DontCare);
        assert_eq!(classify(&stream(Priority::Prioritized)), Priority::Prioritized);
    }

    #[test]
    fn prioritized_packets_forward() {
        let p = packet(1, Priority::Prioritized, 1.0);
        let links = [LinkSpec::new(5.0, 11.0, 3.0)];
        let input = DecisionInput {
            now: 0.1,
            packet: &p,
            next_hop_reachable: true,
            remaining_links: &links,
            prioritized_queued: true,
            cache_site: Some(3),
        };
        let d = forward_decision(&input, &CachePolicy::default()).unwrap();
        assert_eq!(d.action, Action::Forward);
        assert_eq!(d.sigma, None);
    }

    #[test]
    fn expired_packets_drop() {
        let p = packet(1, Priority::Prioritized, 1.0);
        let links = [LinkSpec::new(5.0, 11.0, 3.0)];
        let input = DecisionInput {
            now: 1.5,
            packet: &p,
            next_hop_reachable: true,
            remaining_links: &links,
            prioritized_queued: false,
            cache_site: None,
        };
        let d = forward_decision(&input, &CachePolicy::default()).unwrap();
        assert_eq!(
            d.action,
            Action::Drop {
                reason: DropReason::Expired
            }
        );
        // Stream bound applies even when τ is later.
        let mut late = packet(2, Priority::DontCare, 10.0);
        late.stream.delay_bound_s = 1.0;
        assert!(late.is_expired(1.01));
    }

    #[test]
    fn unreachable_next_hop_drops() {
        let p = packet(1, Priority::DontCare, 1.0);
        let links = [LinkSpec::new(5.0, 11.0, 3.0)];
        let input = DecisionInput {
            now: 0.0,
            packet: &p,
            next_hop_reachable: false,
            remaining_links: &links,
            prioritized_queued: false,
            cache_site: None,
        };
        let d = forward_decision(&input, &CachePolicy::default()).unwrap();
        assert_eq!(
            d.action,
            Action::Drop {
                reason: DropReason::NoNextHop
            }
        );
    }

    #[test]
    fn dont_care_caches_inside_band_only() {
        // Remaining path: two hops, three peers, δ̄ = (0.4/4)·log2(3).
        let p = packet(1, Priority::DontCare, 1.0);
        let links = [LinkSpec::new(2.0, 1.0, 3.0), LinkSpec::new(3.0, 1.0, 3.0)];
        let delay = 0.1 * 3f64.log2();
        let raw = 5.0 / delay;
        let policy = CachePolicy {
            sigma_scale: raw / 0.5,
            ..Default::default()
        };
        let base = DecisionInput {
            now: 0.0,
            packet: &p,
            next_hop_reachable: true,
            remaining_links: &links,
            prioritized_queued: true,
            cache_site: Some(4),
        };
        let d = forward_decision(&base, &policy).unwrap();
        assert_eq!(d.action, Action::Cache { site: 4 });
        assert!((d.sigma.unwrap() - 0.5).abs() < 1e-12);
        assert!((d.chunk_delay_s.unwrap() - delay).abs() < 1e-15);

        let no_prio = DecisionInput {
            prioritized_queued: false,
            ..base
        };
        assert_eq!(forward_decision(&no_prio, &policy).unwrap().action, Action::Forward);
        let no_site = DecisionInput {
            cache_site: None,
            ..base
        };
        assert_eq!(forward_decision(&no_site, &policy).unwrap().action, Action::Forward);
        let outside = CachePolicy {
            sigma_scale: raw,
            ..policy
        };
        let d = forward_decision(&base, &outside).unwrap();
        assert_eq!(d.action, Action::Forward);
        assert!((d.sigma.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nre_site_examples() {
        let state = |res: Vec<f64>, free: Vec<u64>| {
            move |n: NodeId| (res[n as usize], free[n as usize])
        };
        assert_eq!(nre_cache_site(&[0, 1, 2], 512, state(vec![0.0, 0.3, 0.0], vec![0, 0, 0])), Some(1));
        assert_eq!(
            nre_cache_site(&[0, 1, 2, 3, 4], 512, state(vec![0.0, 0.9, 0.5, 0.7, 0.0], vec![1024; 5])),
            Some(1)
        );
        assert_eq!(
            nre_cache_site(&[0, 1, 2, 3, 4], 512, state(vec![0.0, 0.9, 0.5, 0.7, 0.0], vec![1024, 0, 1024, 1024, 1024])),
            Some(3)
        );
        // Ties go to the lower id; without space anywhere, the max-residual node.
        assert_eq!(
            nre_cache_site(&[0, 3, 1, 4], 512, state(vec![0.0, 0.5, 0.0, 0.5, 0.0], vec![0; 5])),
            Some(1)
        );
        assert_eq!(nre_cache_site(&[0, 1], 512, state(vec![1.0, 1.0], vec![1024; 2])), None);
    }

    #[test]
    fn cache_admission_rules() {
        let mut store = CacheStore::new(1024);
        assert!(cache_admit(&mut store, &packet(1, Priority::DontCare, 5.0), 0.0).admitted);
        assert!(cache_admit(&mut store, &packet(2, Priority::DontCare, 6.0), 0.0).admitted);
        assert_eq!(store.occupancy_bytes(), 1024);
        // Later deadline than everything cached: rejected, nothing evicted.
        let r = cache_admit(&mut store, &packet(3, Priority::DontCare, 7.0), 0.0);
        assert!(!r.admitted && r.evicted.is_empty());
        // Earlier deadline: evicts the nearest of the later-deadline entries.
        let r = cache_admit(&mut store, &packet(4, Priority::DontCare, 4.0), 0.0);
        assert!(r.admitted);
        assert_eq!(r.evicted.iter().map(|e| e.packet.id).collect::<Vec<_>>(), vec![1]);
        assert_eq!(store.occupancy_bytes(), 1024);
        // Expired and prioritized packets never enter.
        let mut empty = CacheStore::new(4096);
        assert!(!cache_admit(&mut empty, &packet(5, Priority::DontCare, 1.0), 1.5).admitted);
        assert!(!cache_admit(&mut empty, &packet(6, Priority::Prioritized, 9.0), 0.0).admitted);
        assert!(empty.is_empty());
    }

    #[test]
    fn expire_removes_stale_entries() {
        let mut store = CacheStore::new(4096);
        cache_admit(&mut store, &packet(1, Priority::DontCare, 1.0), 0.0);
        cache_admit(&mut store, &packet(2, Priority::DontCare, 3.0), 0.0);
        let gone = store.expire(1.5);
        assert_eq!(gone.len(), 1);
        assert_eq!(gone[0].packet.id, 1);
        assert_eq!(store.occupancy_bytes(), 512);
    }

    #[test]
    fn drain_orders_by_deadline() {
        let mut store = CacheStore::new(4096);
        for (id, dl) in [(1, 3.0), (2, 1.5), (3, 2.0)] {
            cache_admit(&mut store, &packet(id, Priority::DontCare, dl), 0.0);
        }
        let ids: Vec<_> = store.drain_by_deadline().iter().map(|e| e.packet.id).collect();
        assert_eq!(ids, vec![2, 3, 1]);
        assert_eq!(store.occupancy_bytes(), 0);
    }

    #[test]
    fn radio_states_follow_timeouts() {
        let t = RadioTimers {
            idle_timeout_s: 1.0,
            sleep_timeout_s: 2.0,
            wake_s: 0.01,
        };
        assert_eq!(radio_state_update(true, 0.0, 100.0, &t), RadioState::Active);
        assert_eq!(radio_state_update(false, 0.0, 0.5, &t), RadioState::Active);
        assert_eq!(radio_state_update(false, 0.0, 1.0, &t), RadioState::Idle);
        assert_eq!(radio_state_update(false, 0.0, 3.0, &t), RadioState::Sleep);
    }

    #[test]
    fn coefficient_ordering_is_enforced() {
        let c = EnergyCoefficients::default();
        c.validate().unwrap();
        let calib = PowerCalibration::default();
        let cost = |a| activity_cost_j(&a, &c, &calib).unwrap();
        let sleep = cost(Activity::SleepTick { seconds: 1.0 });
        let idle = cost(Activity::IdleTick { seconds: 1.0 });
        assert!(sleep < idle && idle < c.reference_active_power_uw * 1e-6);
        for bad in [
            EnergyCoefficients { sleep_ratio: 0.05, ..c },
            EnergyCoefficients { idle_ratio: 1.2, ..c },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn transmit_cost_composes_power_chain() {
        let c = EnergyCoefficients::default();
        let calib = PowerCalibration::default();
        let link = LinkSpec::new(9.0, 11.0, 3.0);
        let capacity = CapacityState::new(1_000_000_000, 0).unwrap();
        let eff = 0.25;
        let expected = 0.2 * 11.0 * 729.0 * (-0.25f64).exp() * 1e-6 * (4096.0 / 11e6);
        let got = activity_cost_j(
            &Activity::Transmit {
                link,
                bits: 4096,
                capacity,
                eff,
            },
            &c,
            &calib,
        )
        .unwrap();
        assert!((got - expected).abs() <= 1e-15 * expected);
        let zero = [
            Activity::IdleTick { seconds: 0.0 },
            Activity::SleepTick { seconds: 0.0 },
            Activity::CacheHold { bytes: 512, seconds: 0.0 },
        ];
        for a in zero {
            assert_eq!(activity_cost_j(&a, &c, &calib).unwrap(), 0.0);
        }
    }

    #[test]
    fn depletion_kills_node() {
        let c = EnergyCoefficients::default();
        let calib = PowerCalibration::default();
        let mut node = NodeEnergy::new(1e-6);
        let res = debit_energy(&mut node, &Activity::IdleTick { seconds: 1.0 }, &c, &calib).unwrap();
        assert_eq!(res, 0.0);
        assert_eq!(node.radio_state, RadioState::Sleep);
        assert_eq!(node.debited_j, 1e-6);
        debit_energy(&mut node, &Activity::IdleTick { seconds: 1.0 }, &c, &calib).unwrap();
        assert_eq!(node.anomalies, 1);
        assert_eq!(node.debited_j, 1e-6);
    }

    #[test]
    fn settle_charges_state_rate() {
        let c = EnergyCoefficients::default();
        let calib = PowerCalibration::default();
        let mut node = NodeEnergy::new(1.0);
        node.settle(2.0, &c, &calib).unwrap();
        node.enter(RadioState::Sleep, 2.0);
        node.settle(5.0, &c, &calib).unwrap();
        let expected = 2.0 * c.idle_power_uw() * 1e-6 + 3.0 * c.sleep_power_uw() * 1e-6;
        assert!((node.debited_j - expected).abs() < 1e-18);
        assert!((1.0 - node.residual_j - node.debited_j).abs() < 1e-15);
    }

    #[test]
    fn stream_bounds() {
        let s = stream(Priority::Prioritized);
        assert_eq!(stream_complete(&s, &[Some(0.1), Some(0.5), Some(1.9), Some(2.0)]), StreamOutcome::InBound);
        assert_eq!(stream_complete(&s, &[Some(0.1), None, Some(0.2), Some(0.3)]), StreamOutcome::BoundViolated);
        assert_eq!(
            stream_complete(&s, &[Some(0.1), Some(0.1), Some(0.2), Some(2.0 + 1e-9)]),
            StreamOutcome::BoundViolated
        );
    }
}
