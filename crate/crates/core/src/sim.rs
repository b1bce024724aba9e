//! One simulation run: wires the topology, traffic, decision engine and
//! energy ledger onto the event kernel.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::control::{
    cache_admit, debit_energy, forward_decision, nre_cache_site, stream_complete, transmit_power_uw,
    Action, Activity, CacheEntry, CachePolicy, CacheStore, DecisionInput, DecisionRecord,
    DropReason, EnergyCoefficients, NodeEnergy, PacketMeta, Priority, RadioState, RadioTimers,
    StreamOutcome, StreamSpec,
};
use crate::engine::{
    pareto_interarrival, rng_stream, EventKind, FlowId, FlowTable, PacketId, RngStream, Scheduler,
    SimRng,
};
use crate::error::{Error, Result};
use crate::metrics::{
    CacheSample, CacheTotals, DeliverySample, EnergyTotals, FlowMetrics, PacketCounts, PowerSample,
    RunMetrics, RunSummary, StreamCounts,
};
use crate::model::{effective_throughput, LinkSpec, PowerCalibration, ThroughputStats};
use crate::scenario::Scenario;
use crate::topology::{build_topology, NodeId, Topology};

/// Relative tolerance of the energy ledger conservation check.
pub const ENERGY_LEDGER_TOLERANCE: f64 = 1e-9;

/// A flow to install instead of the randomly drawn ones.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub src: NodeId,
    pub dst: Option<NodeId>,
    pub tag: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub summary: RunSummary,
    pub decisions: Vec<DecisionRecord>,
    pub topology: Topology,
    /// Final energy state of every node.
    pub energy: Vec<NodeEnergy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Location {
    Queued(NodeId),
    OnAir,
    Arriving(NodeId),
    Cached(NodeId),
}

#[derive(Debug, Clone)]
struct LivePacket {
    meta: PacketMeta,
    dst: NodeId,
    hops: Vec<NodeId>,
    /// Index in `hops` of the node currently holding the packet.
    hop: usize,
    /// Last transmitter and the link it used.
    prev: Option<(NodeId, LinkSpec)>,
    cache_target: Option<NodeId>,
    pending_sigma: Option<(f64, f64)>,
    cached_once: bool,
    location: Location,
}

#[derive(Debug, Clone, Copy)]
struct Tx {
    packet: PacketId,
    to: NodeId,
}

#[derive(Debug, Clone)]
struct NodeCtl {
    energy: NodeEnergy,
    prio: VecDeque<PacketId>,
    bulk: VecDeque<PacketId>,
    tx: Option<Tx>,
    cache: CacheStore,
    last_activity_s: f64,
    timer_gen: u64,
    /// Recent transmissions: (time, bits, received).
    window: VecDeque<(f64, u32, bool)>,
}

impl NodeCtl {
    fn queued(&self) -> usize {
        self.prio.len() + self.bulk.len()
    }

    fn busy(&self) -> bool {
        self.tx.is_some() || self.queued() > 0 || !self.cache.is_empty()
    }
}

#[derive(Debug, Clone)]
struct StreamTrack {
    spec: StreamSpec,
    latencies: Vec<Option<f64>>,
    accounted: u32,
}

#[derive(Debug, Default, Clone)]
struct Counters {
    generated: u64,
    delivered: u64,
    dropped: BTreeMap<DropReason, u64>,
    cache: CacheTotals,
    in_bound: u64,
    violated: u64,
}

pub struct Simulation {
    scenario: Scenario,
    calib: PowerCalibration,
    coeffs: EnergyCoefficients,
    timers: RadioTimers,
    policy: CachePolicy,
    topo: Topology,
    flows: FlowTable,
    flow_seq: Vec<u64>,
    nodes: Vec<NodeCtl>,
    packets: BTreeMap<PacketId, LivePacket>,
    next_packet: PacketId,
    streams: BTreeMap<u64, StreamTrack>,
    routes: HashMap<(NodeId, NodeId), Option<Vec<NodeId>>>,
    routes_at: f64,
    metrics: RunMetrics,
    counters: Counters,
    decisions: Option<Vec<DecisionRecord>>,
    mobility_rng: SimRng,
    traffic_rng: SimRng,
    sample_index: u64,
    sample_count: u64,
}

/// Builds and runs the scenario to its horizon.
pub fn simulate(scenario: &Scenario) -> Result<RunOutput> {
    Simulation::new(scenario)?.run()
}

/// Number of metrics samples taken at `0, Δ, 2Δ, …` strictly before the horizon.
pub fn sample_count(horizon_s: f64, interval_s: f64) -> u64 {
    (horizon_s / interval_s - 1e-9).ceil().max(0.0) as u64
}

/// Greedy zone partition: the lowest unassigned node claims every unassigned
/// member of its zone.
pub fn partition_zones(topo: &Topology, radius_hops: u32) -> Vec<Vec<NodeId>> {
    let mut assigned = vec![false; topo.len()];
    let mut zones = Vec::new();
    for c in 0..topo.len() as NodeId {
        if assigned[c as usize] {
            continue;
        }
        let members: Vec<NodeId> = topo
            .compute_zone(c, radius_hops)
            .members
            .into_iter()
            .filter(|&m| !assigned[m as usize])
            .collect();
        for &m in &members {
            assigned[m as usize] = true;
        }
        zones.push(members);
    }
    zones
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let calib = scenario.calibration();
        let mut placement = rng_stream(scenario.seed, RngStream::Placement);
        let topo = build_topology(&scenario.topology_config(), calib, &mut placement)?;
        Self::with_topology(scenario, topo, None)
    }

    /// Runs on a caller-supplied topology. With `flows = None`, flows are drawn
    /// from the scenario: uniform sources and destinations, the first share
    /// tagged as video.
    pub fn with_topology(scenario: &Scenario, mut topo: Topology, flows: Option<Vec<FlowSpec>>) -> Result<Self> {
        scenario.validate()?;
        let n = topo.len();
        if n != scenario.node_count as usize {
            return Err(Error::config(
                "node_count",
                format!("topology has {n} nodes, scenario expects {}", scenario.node_count),
            ));
        }
        for node in 0..n as NodeId {
            topo.set_radio(node, scenario.node_radio(node));
        }
        let calib = scenario.calibration();
        let profile = scenario.traffic_profile();
        let mut flow_rng = rng_stream(scenario.seed, RngStream::Flows);
        let mut table = FlowTable::new();
        let specs = match flows {
            Some(f) => f,
            None => {
                let k = scenario.flow_count;
                let prio = (f64::from(k) * scenario.prioritized_fraction).round() as u32;
                (0..k)
                    .map(|i| {
                        use rand::Rng;
                        FlowSpec {
                            src: flow_rng.random_range(0..n as NodeId),
                            dst: None,
                            tag: if i < prio { "video" } else { "bulk" }.to_string(),
                        }
                    })
                    .collect()
            }
        };
        let alive = vec![true; n];
        for spec in specs {
            table.spawn_flow(spec.src, spec.dst, profile, spec.tag, &alive, &mut flow_rng)?;
        }
        let initial = scenario.energy.initial_j;
        let nodes = (0..n)
            .map(|_| NodeCtl {
                energy: NodeEnergy::new(initial),
                prio: VecDeque::new(),
                bulk: VecDeque::new(),
                tx: None,
                cache: CacheStore::new(scenario.cache.capacity_bytes),
                last_activity_s: 0.0,
                timer_gen: 0,
                window: VecDeque::new(),
            })
            .collect();
        let zones = partition_zones(&topo, scenario.zone_radius_hops);
        let offered = profile.offered_bps();
        let metrics_flows = table
            .flows()
            .iter()
            .map(|f| FlowMetrics::new(f.id, Priority::from_tag(&f.tag), offered))
            .collect();
        let mut metrics = RunMetrics::new(scenario.metrics_interval_s, vec![initial; n], zones);
        metrics.flows = metrics_flows;
        Ok(Simulation {
            calib,
            coeffs: scenario.energy_coefficients(),
            timers: scenario.radio_timers(),
            policy: scenario.cache_policy(),
            flow_seq: vec![0; table.len()],
            flows: table,
            nodes,
            packets: BTreeMap::new(),
            next_packet: 0,
            streams: BTreeMap::new(),
            routes: HashMap::new(),
            routes_at: f64::NAN,
            metrics,
            counters: Counters::default(),
            decisions: scenario.decision_log.then(Vec::new),
            mobility_rng: rng_stream(scenario.seed, RngStream::Mobility),
            traffic_rng: rng_stream(scenario.seed, RngStream::Traffic),
            sample_index: 0,
            sample_count: sample_count(scenario.horizon_s, scenario.metrics_interval_s),
            topo,
            scenario: scenario.clone(),
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn run(mut self) -> Result<RunOutput> {
        let mut sched = Scheduler::new();
        self.bootstrap(&mut sched)?;
        let horizon = self.scenario.horizon_s;
        sched.run_until(horizon, |s, ev| self.handle(s, ev.kind))?;
        self.finish(&sched)
    }

    fn bootstrap(&mut self, s: &mut Scheduler) -> Result<()> {
        let profile = self.scenario.traffic_profile();
        for f in 0..self.flows.len() as FlowId {
            let gap = pareto_interarrival(&mut self.traffic_rng, &profile);
            s.schedule(gap, EventKind::FlowEmit { flow: f })?;
        }
        if self.topo.is_mobile() {
            for node in 0..self.topo.len() as NodeId {
                s.schedule(0.0, EventKind::MobilityStep { node })?;
            }
        }
        if self.sample_count > 0 {
            s.schedule(0.0, EventKind::MetricsSample)?;
        }
        for node in 0..self.topo.len() as NodeId {
            self.arm_timer(s, node)?;
        }
        Ok(())
    }

    fn handle(&mut self, s: &mut Scheduler, kind: EventKind) -> Result<()> {
        let before = self.topo.snapshot_time();
        self.topo.sync(s.now());
        if self.topo.snapshot_time() != before || self.routes_at.is_nan() {
            self.routes.clear();
            self.routes_at = self.topo.snapshot_time();
        }
        match kind {
            EventKind::FlowEmit { flow } => self.on_flow_emit(s, flow),
            EventKind::PacketArrival { node, packet } => self.on_arrival(s, node, packet),
            EventKind::TransmissionComplete { node } => self.on_tx_complete(s, node),
            EventKind::CacheFlush { node, packet } => self.on_cache_flush(s, node, packet),
            EventKind::MobilityStep { node } => {
                let next = self.topo.mobility_step(node, s.now(), &mut self.mobility_rng);
                s.schedule(next, EventKind::MobilityStep { node })?;
                Ok(())
            }
            EventKind::StateTimer { node, generation } => self.on_state_timer(s, node, generation),
            EventKind::MetricsSample => self.on_sample(s),
        }
    }

    fn is_dead(&self, n: NodeId) -> bool {
        !self.topo.is_alive(n)
    }

    fn route_to(&mut self, src: NodeId, dst: NodeId) -> Option<Vec<NodeId>> {
        if let Some(r) = self.routes.get(&(src, dst)) {
            return r.clone();
        }
        let ttl = self.topo.len() as u32;
        let hops = self
            .topo
            .interzone_route(src, dst, self.scenario.zone_radius_hops, ttl)
            .ok()
            .map(|r| r.hops);
        self.routes.insert((src, dst), hops.clone());
        hops
    }

    fn links_along(&self, hops: &[NodeId]) -> Option<Vec<LinkSpec>> {
        hops.windows(2)
            .map(|w| self.topo.directed_link(w[0], w[1]).ok())
            .collect()
    }

    // Remaining links from the packet's holder, re-discovering the route once
    // if the stored one no longer holds.
    fn remaining_links(&mut self, pid: PacketId) -> Option<Vec<LinkSpec>> {
        let pkt = &self.packets[&pid];
        if let Some(links) = self.links_along(&pkt.hops[pkt.hop..]) {
            return Some(links);
        }
        let (here, dst) = (pkt.hops[pkt.hop], pkt.dst);
        let hops = self.route_to(here, dst)?;
        let links = self.links_along(&hops)?;
        let pkt = self.packets.get_mut(&pid).expect("live packet");
        pkt.hops = hops;
        pkt.hop = 0;
        Some(links)
    }

    fn next_hop(&mut self, pid: PacketId) -> Option<(NodeId, LinkSpec)> {
        let pkt = &self.packets[&pid];
        let here = pkt.hops[pkt.hop];
        let next = *pkt.hops.get(pkt.hop + 1)?;
        if let Ok(link) = self.topo.directed_link(here, next) {
            return Some((next, link));
        }
        let dst = pkt.dst;
        let hops = self.route_to(here, dst)?;
        let next = *hops.get(1)?;
        let link = self.topo.directed_link(here, next).ok()?;
        let pkt = self.packets.get_mut(&pid).expect("live packet");
        pkt.hops = hops;
        pkt.hop = 0;
        Some((next, link))
    }

    fn node_eff(&mut self, n: NodeId, now: f64) -> f64 {
        let window_s = self.scenario.energy.eff_window_s;
        let rate_bps = self.topo.radio(n).rate_mbps * 1e6;
        let w = &mut self.nodes[n as usize].window;
        while w.front().is_some_and(|e| e.0 < now - window_s) {
            w.pop_front();
        }
        if w.is_empty() {
            return 0.0;
        }
        let ok_bits: f64 = w.iter().filter(|e| e.2).map(|e| f64::from(e.1)).sum();
        let stats = ThroughputStats {
            transmitted_blocks: w.len() as u64,
            received_blocks: w.iter().filter(|e| e.2).count() as u64,
            transfer_size_bits: ok_bits,
            transfer_time_s: window_s,
            bandwidth_bps: rate_bps,
        };
        effective_throughput(&stats).unwrap_or(0.0)
    }

    /// Settles background drain and charges `activity`. Returns false if the
    /// node is (now) dead.
    fn charge(&mut self, n: NodeId, activity: Activity, now: f64) -> Result<bool> {
        if self.is_dead(n) {
            return Ok(false);
        }
        let node = &mut self.nodes[n as usize];
        node.energy.settle(now, &self.coeffs, &self.calib)?;
        if !node.energy.is_depleted() {
            debit_energy(&mut node.energy, &activity, &self.coeffs, &self.calib)?;
        }
        if node.energy.is_depleted() {
            self.on_death(n)?;
            return Ok(false);
        }
        Ok(true)
    }

    fn settle(&mut self, n: NodeId, now: f64) -> Result<()> {
        if self.is_dead(n) {
            return Ok(());
        }
        let e = &mut self.nodes[n as usize].energy;
        e.settle(now, &self.coeffs, &self.calib)?;
        if e.is_depleted() {
            self.on_death(n)?;
        }
        Ok(())
    }

    fn on_death(&mut self, n: NodeId) -> Result<()> {
        if self.is_dead(n) {
            return Ok(());
        }
        self.topo.kill(n);
        self.routes.clear();
        let node = &mut self.nodes[n as usize];
        node.energy.radio_state = RadioState::Sleep;
        let mut lost: Vec<PacketId> = node.prio.drain(..).chain(node.bulk.drain(..)).collect();
        lost.extend(node.cache.drain_by_deadline().into_iter().map(|e| e.packet.id));
        for pid in lost {
            self.drop_packet(pid, DropReason::NodeDead);
        }
        Ok(())
    }

    /// Marks activity at `n`, waking it to Active and invalidating timers.
    fn touch(&mut self, n: NodeId, now: f64) -> Result<()> {
        if self.is_dead(n) {
            return Ok(());
        }
        let state = self.nodes[n as usize].energy.radio_state;
        if state != RadioState::Active {
            self.settle(n, now)?;
            self.nodes[n as usize].energy.enter(RadioState::Active, now);
        }
        let node = &mut self.nodes[n as usize];
        node.last_activity_s = now;
        node.timer_gen += 1;
        Ok(())
    }

    fn arm_timer(&mut self, s: &mut Scheduler, n: NodeId) -> Result<()> {
        let node = &self.nodes[n as usize];
        if self.is_dead(n) || node.busy() || node.energy.radio_state != RadioState::Active {
            return Ok(());
        }
        let at = node.last_activity_s + self.timers.idle_timeout_s;
        s.schedule(
            at.max(s.now()),
            EventKind::StateTimer {
                node: n,
                generation: node.timer_gen,
            },
        )?;
        Ok(())
    }

    fn on_state_timer(&mut self, s: &mut Scheduler, n: NodeId, generation: u64) -> Result<()> {
        let node = &self.nodes[n as usize];
        if self.is_dead(n) || node.timer_gen != generation || node.busy() {
            return Ok(());
        }
        let now = s.now();
        match node.energy.radio_state {
            RadioState::Active => {
                self.settle(n, now)?;
                if self.is_dead(n) {
                    return Ok(());
                }
                self.nodes[n as usize].energy.enter(RadioState::Idle, now);
                s.schedule_in(
                    self.timers.sleep_timeout_s,
                    EventKind::StateTimer {
                        node: n,
                        generation,
                    },
                )?;
            }
            RadioState::Idle => {
                self.settle(n, now)?;
                if !self.is_dead(n) {
                    self.nodes[n as usize].energy.enter(RadioState::Sleep, now);
                }
            }
            RadioState::Sleep => {}
        }
        Ok(())
    }

    fn drop_packet(&mut self, pid: PacketId, reason: DropReason) {
        let Some(pkt) = self.packets.remove(&pid) else {
            return;
        };
        *self.counters.dropped.entry(reason).or_default() += 1;
        self.account_chunk(&pkt.meta, None);
    }

    fn account_chunk(&mut self, meta: &PacketMeta, latency: Option<f64>) {
        let Some(track) = self.streams.get_mut(&meta.stream.stream_id) else {
            return;
        };
        track.latencies[meta.chunk_index as usize] = latency;
        track.accounted += 1;
        if track.accounted == track.spec.chunk_count {
            let track = self
                .streams
                .remove(&meta.stream.stream_id)
                .expect("tracked stream");
            match stream_complete(&track.spec, &track.latencies) {
                StreamOutcome::InBound => self.counters.in_bound += 1,
                StreamOutcome::BoundViolated => self.counters.violated += 1,
            }
        }
    }

    fn log(&mut self, now: f64, node: NodeId, pid: PacketId, decision: String, sigma: Option<f64>) {
        let residual_j = self.nodes[node as usize].energy.residual_j;
        if let Some(log) = &mut self.decisions {
            log.push(DecisionRecord {
                time_s: now,
                node,
                packet_id: pid,
                decision,
                sigma,
                residual_j,
            });
        }
    }

    fn on_flow_emit(&mut self, s: &mut Scheduler, f: FlowId) -> Result<()> {
        let now = s.now();
        let flow = self.flows.get(f).expect("registered flow").clone();
        if self.is_dead(flow.src) {
            return Ok(());
        }
        let m = self.scenario.stream.chunk_count;
        let seq = self.flow_seq[f as usize];
        self.flow_seq[f as usize] += 1;
        let chunk_index = (seq % u64::from(m)) as u32;
        let stream_id = (u64::from(f) << 32) | (seq / u64::from(m));
        let route = if self.is_dead(flow.dst) {
            None
        } else {
            self.route_to(flow.src, flow.dst)
        };
        let priority = Priority::from_tag(&flow.tag);
        let spec = StreamSpec {
            stream_id,
            chunk_count: m,
            total_single_peer_time_s: f64::from(m) * flow.profile.mean_interarrival_s(),
            intermediate_count: route.as_ref().map_or(0, |h| h.len().saturating_sub(2) as u32),
            delay_bound_s: self.scenario.stream.delay_bound_s,
            priority,
        };
        let pid = self.next_packet;
        self.next_packet += 1;
        let meta = PacketMeta {
            id: pid,
            flow: f,
            stream: spec,
            chunk_index,
            deadline_s: now + self.scenario.stream.deadline_s,
            size_bits: flow.profile.packet_size_bits,
            created_s: now,
            hops_remaining: route.as_ref().map_or(0, |h| h.len().saturating_sub(1) as u32),
        };
        self.counters.generated += 1;
        let fm = &mut self.metrics.flows[f as usize];
        fm.transmitted_blocks += 1;
        fm.first_tx_s.get_or_insert(now);
        self.streams.entry(stream_id).or_insert_with(|| StreamTrack {
            spec,
            latencies: vec![None; m as usize],
            accounted: 0,
        });
        self.packets.insert(
            pid,
            LivePacket {
                meta,
                dst: flow.dst,
                hops: route.clone().unwrap_or_else(|| vec![flow.src, flow.dst]),
                hop: 0,
                prev: None,
                cache_target: None,
                pending_sigma: None,
                cached_once: false,
                location: Location::Queued(flow.src),
            },
        );
        match route {
            Some(_) => self.enqueue(s, flow.src, pid)?,
            None => self.drop_packet(pid, DropReason::NoRoute),
        }
        let gap = pareto_interarrival(&mut self.traffic_rng, &flow.profile);
        s.schedule_in(gap, EventKind::FlowEmit { flow: f })?;
        Ok(())
    }

    fn enqueue(&mut self, s: &mut Scheduler, n: NodeId, pid: PacketId) -> Result<()> {
        if self.is_dead(n) {
            self.drop_packet(pid, DropReason::NodeDead);
            return Ok(());
        }
        if self.nodes[n as usize].queued() >= self.scenario.queue_limit as usize {
            self.drop_packet(pid, DropReason::QueueOverflow);
            return Ok(());
        }
        let pkt = self.packets.get_mut(&pid).expect("live packet");
        pkt.location = Location::Queued(n);
        let node = &mut self.nodes[n as usize];
        match pkt.meta.priority() {
            Priority::Prioritized => node.prio.push_back(pid),
            Priority::DontCare => node.bulk.push_back(pid),
        }
        self.touch(n, s.now())?;
        self.try_start_tx(s, n)
    }

    fn try_start_tx(&mut self, s: &mut Scheduler, n: NodeId) -> Result<()> {
        let now = s.now();
        loop {
            if self.is_dead(n) || self.nodes[n as usize].tx.is_some() {
                return Ok(());
            }
            let node = &mut self.nodes[n as usize];
            let Some(pid) = node.prio.pop_front().or_else(|| node.bulk.pop_front()) else {
                return Ok(());
            };
            if self.packets[&pid].meta.is_expired(now) {
                self.drop_packet(pid, DropReason::Expired);
                continue;
            }
            let Some((next, link)) = self.next_hop(pid) else {
                self.drop_packet(pid, DropReason::NoNextHop);
                continue;
            };
            let eff = self.node_eff(n, now);
            let capacity = self.nodes[n as usize].cache.capacity_state();
            let power_uw = transmit_power_uw(&link, &capacity, eff, &self.calib)?;
            let zone_size = self.topo.zone_cardinality(n, self.scenario.zone_radius_hops);
            self.metrics.power_samples.push(PowerSample {
                time_s: now,
                node: n,
                zone_size,
                distance_m: link.distance_m,
                power_uw,
            });
            let bits = self.packets[&pid].meta.size_bits;
            self.touch(n, now)?;
            let activity = Activity::Transmit {
                link,
                bits,
                capacity,
                eff,
            };
            if !self.charge(n, activity, now)? {
                self.drop_packet(pid, DropReason::NodeDead);
                return Ok(());
            }
            let pkt = self.packets.get_mut(&pid).expect("live packet");
            pkt.location = Location::OnAir;
            pkt.prev = Some((n, link));
            self.nodes[n as usize].tx = Some(Tx { packet: pid, to: next });
            let airtime = f64::from(bits) / (link.rate_mbps * 1e6);
            s.schedule_in(airtime, EventKind::TransmissionComplete { node: n })?;
            return Ok(());
        }
    }

    fn on_tx_complete(&mut self, s: &mut Scheduler, n: NodeId) -> Result<()> {
        let now = s.now();
        let Some(tx) = self.nodes[n as usize].tx.take() else {
            return Err(Error::Invariant(format!(
                "transmission completed at idle node {n}"
            )));
        };
        if self.is_dead(n) {
            self.drop_packet(tx.packet, DropReason::NodeDead);
            return Ok(());
        }
        let ok = self.topo.is_alive(tx.to) && self.topo.distance(n, tx.to) <= self.topo.comm_range_m();
        let bits = self.packets[&tx.packet].meta.size_bits;
        self.nodes[n as usize].window.push_back((now, bits, ok));
        if ok {
            self.packets.get_mut(&tx.packet).expect("live packet").location = Location::Arriving(tx.to);
            s.schedule(
                now,
                EventKind::PacketArrival {
                    node: tx.to,
                    packet: tx.packet,
                },
            )?;
        } else {
            self.drop_packet(tx.packet, DropReason::LinkLost);
        }
        self.touch(n, now)?;
        let node = &self.nodes[n as usize];
        if node.prio.is_empty() && !node.cache.is_empty() {
            self.flush_all(s, n)?;
        }
        self.try_start_tx(s, n)?;
        self.arm_timer(s, n)
    }

    fn on_arrival(&mut self, s: &mut Scheduler, n: NodeId, pid: PacketId) -> Result<()> {
        let now = s.now();
        if !self.packets.contains_key(&pid) {
            return Ok(());
        }
        if self.is_dead(n) {
            self.drop_packet(pid, DropReason::NodeDead);
            return Ok(());
        }
        if self.nodes[n as usize].energy.radio_state == RadioState::Sleep {
            self.settle(n, now)?;
            if self.is_dead(n) {
                self.drop_packet(pid, DropReason::NodeDead);
                return Ok(());
            }
            let wake_s = self.timers.wake_s;
            let e = &mut self.nodes[n as usize].energy;
            e.enter(RadioState::Active, now);
            debit_energy(e, &Activity::IdleTick { seconds: wake_s }, &self.coeffs, &self.calib)?;
            e.settled_s = now + wake_s;
            if e.is_depleted() {
                self.on_death(n)?;
                self.drop_packet(pid, DropReason::NodeDead);
                return Ok(());
            }
            self.touch(n, now)?;
            s.schedule_in(wake_s, EventKind::PacketArrival { node: n, packet: pid })?;
            return Ok(());
        }
        let pkt = &self.packets[&pid];
        let link = pkt.prev.map(|p| p.1).ok_or_else(|| {
            Error::Invariant(format!("packet {pid} arrived without a transmitter"))
        })?;
        let bits = pkt.meta.size_bits;
        if !self.charge(n, Activity::Receive { link, bits }, now)? {
            self.drop_packet(pid, DropReason::NodeDead);
            return Ok(());
        }
        self.touch(n, now)?;
        let pkt = self.packets.get_mut(&pid).expect("live packet");
        pkt.hop += 1;
        if pkt.hops.get(pkt.hop) != Some(&n) {
            return Err(Error::Invariant(format!(
                "packet {pid} arrived at {n} off its route"
            )));
        }
        if n == pkt.dst {
            self.deliver(now, pid);
        } else {
            self.decide(s, n, pid)?;
        }
        self.arm_timer(s, n)
    }

    fn deliver(&mut self, now: f64, pid: PacketId) {
        let pkt = self.packets.remove(&pid).expect("live packet");
        let latency_s = now - pkt.meta.created_s;
        self.counters.delivered += 1;
        let fm = &mut self.metrics.flows[pkt.meta.flow as usize];
        fm.received_blocks += 1;
        fm.delivered_bits += f64::from(pkt.meta.size_bits);
        fm.last_delivery_s = Some(now);
        self.metrics.deliveries.push(DeliverySample {
            flow: pkt.meta.flow,
            priority: pkt.meta.priority(),
            latency_s,
        });
        self.account_chunk(&pkt.meta, Some(latency_s));
    }

    fn decide(&mut self, s: &mut Scheduler, n: NodeId, pid: PacketId) -> Result<()> {
        let now = s.now();
        let pkt = self.packets.get_mut(&pid).expect("live packet");
        if pkt.cache_target == Some(n) {
            pkt.cache_target = None;
            let sigma = pkt.pending_sigma.take();
            if self.cache_here(s, n, pid, sigma)? {
                self.log(now, n, pid, "cache".to_string(), sigma.map(|x| x.0));
                return Ok(());
            }
            return self.enqueue(s, n, pid);
        }
        let remaining = self.remaining_links(pid);
        let reachable = remaining.is_some();
        let links = remaining.unwrap_or_default();
        let prioritized_queued = !self.nodes[n as usize].prio.is_empty();
        let pkt = &self.packets[&pid];
        let cache_site = if self.policy.enabled
            && reachable
            && prioritized_queued
            && !pkt.cached_once
            && pkt.meta.priority() == Priority::DontCare
        {
            let mut path = Vec::with_capacity(pkt.hops.len() + 1);
            path.extend(pkt.prev.map(|p| p.0));
            path.extend_from_slice(&pkt.hops[pkt.hop..]);
            let bytes = pkt.meta.size_bytes();
            nre_cache_site(&path, bytes, |m| {
                let node = &self.nodes[m as usize];
                (node.energy.residual_j, node.cache.free_bytes())
            })
            .filter(|&m| self.topo.is_alive(m) && self.nodes[m as usize].cache.can_admit(&pkt.meta, now))
        } else {
            None
        };
        let meta = pkt.meta;
        let decision = forward_decision(
            &DecisionInput {
                now,
                packet: &meta,
                next_hop_reachable: reachable,
                remaining_links: &links,
                prioritized_queued,
                cache_site,
            },
            &self.policy,
        )?;
        if let Some(sigma) = decision.sigma {
            self.metrics.sigma_samples.push(sigma);
        }
        let pending = decision.sigma.zip(decision.chunk_delay_s);
        match decision.action {
            Action::Drop { reason } => {
                self.log(now, n, pid, format!("drop:{}", reason.as_str()), decision.sigma);
                self.drop_packet(pid, reason);
                Ok(())
            }
            Action::Forward => {
                self.log(now, n, pid, "forward".to_string(), decision.sigma);
                self.enqueue(s, n, pid)
            }
            Action::Cache { site } if site == n => {
                if self.cache_here(s, n, pid, pending)? {
                    self.log(now, n, pid, "cache".to_string(), decision.sigma);
                    Ok(())
                } else {
                    self.log(now, n, pid, "forward".to_string(), decision.sigma);
                    self.enqueue(s, n, pid)
                }
            }
            Action::Cache { site } => {
                self.log(now, n, pid, format!("cache_at:{site}"), decision.sigma);
                let pkt = self.packets.get_mut(&pid).expect("live packet");
                pkt.cache_target = Some(site);
                pkt.pending_sigma = pending;
                self.enqueue(s, n, pid)
            }
        }
    }

    fn cache_here(
        &mut self,
        s: &mut Scheduler,
        n: NodeId,
        pid: PacketId,
        sigma: Option<(f64, f64)>,
    ) -> Result<bool> {
        let now = s.now();
        let meta = self.packets[&pid].meta;
        let admission = cache_admit(&mut self.nodes[n as usize].cache, &meta, now);
        if !admission.admitted {
            return Ok(false);
        }
        self.counters.cache.admitted += 1;
        let pkt = self.packets.get_mut(&pid).expect("live packet");
        pkt.cached_once = true;
        pkt.location = Location::Cached(n);
        if let Some((sigma, chunk_delay_s)) = sigma {
            self.metrics.cache_samples.push(CacheSample {
                time_s: now,
                node: n,
                sigma,
                chunk_delay_s,
            });
        }
        let hold = self.scenario.cache.max_hold_fraction * meta.stream.delay_bound_s;
        s.schedule_in(hold, EventKind::CacheFlush { node: n, packet: pid })?;
        self.touch(n, now)?;
        for entry in admission.evicted {
            self.counters.cache.evicted += 1;
            self.release(s, n, entry)?;
        }
        Ok(true)
    }

    // Takes a packet out of the cache: charges its hold and forwards it, or
    // drops it if it has expired.
    fn release(&mut self, s: &mut Scheduler, n: NodeId, entry: CacheEntry) -> Result<()> {
        let now = s.now();
        let held = (now - entry.admitted_s).max(0.0);
        self.metrics.cache_hold_s.push(held);
        let hold = Activity::CacheHold {
            bytes: entry.bytes,
            seconds: held,
        };
        let pid = entry.packet.id;
        if !self.charge(n, hold, now)? {
            self.drop_packet(pid, DropReason::NodeDead);
            return Ok(());
        }
        if entry.packet.is_expired(now) {
            self.counters.cache.expired += 1;
            self.drop_packet(pid, DropReason::Expired);
            return Ok(());
        }
        self.counters.cache.flushed += 1;
        self.enqueue(s, n, pid)
    }

    fn flush_all(&mut self, s: &mut Scheduler, n: NodeId) -> Result<()> {
        let entries = self.nodes[n as usize].cache.drain_by_deadline();
        for entry in entries {
            self.release(s, n, entry)?;
        }
        Ok(())
    }

    fn on_cache_flush(&mut self, s: &mut Scheduler, n: NodeId, pid: PacketId) -> Result<()> {
        let Some(entry) = self.nodes[n as usize].cache.remove(pid) else {
            return Ok(());
        };
        let now = s.now();
        let expired = self.nodes[n as usize].cache.expire(now);
        self.release(s, n, entry)?;
        for e in expired {
            self.release(s, n, e)?;
        }
        self.arm_timer(s, n)
    }

    fn on_sample(&mut self, s: &mut Scheduler) -> Result<()> {
        let now = s.now();
        for n in 0..self.topo.len() as NodeId {
            self.settle(n, now)?;
        }
        let residuals: Vec<f64> = self.nodes.iter().map(|n| n.energy.residual_j).collect();
        let debits: f64 = self.nodes.iter().map(|n| n.energy.debited_j).sum();
        self.metrics.sample_metrics(now, &residuals, debits)?;
        self.sample_index += 1;
        if self.sample_index < self.sample_count {
            let at = self.sample_index as f64 * self.scenario.metrics_interval_s;
            s.schedule(at, EventKind::MetricsSample)?;
        }
        Ok(())
    }

    fn finish(mut self, sched: &Scheduler) -> Result<RunOutput> {
        let horizon = self.scenario.horizon_s;
        for n in 0..self.topo.len() as NodeId {
            self.settle(n, horizon)?;
        }
        self.check_invariants()?;

        let cached = self
            .packets
            .values()
            .filter(|p| matches!(p.location, Location::Cached(_)))
            .count() as u64;
        let in_flight = self.packets.len() as u64 - cached;
        let c = &self.counters;
        let dropped_total: u64 = c.dropped.values().sum();
        let dropped = c
            .dropped
            .iter()
            .map(|(r, v)| (r.as_str().to_string(), *v))
            .collect();
        let completed = c.in_bound + c.violated;
        let initial_total_j: f64 = self.nodes.iter().map(|n| n.energy.initial_j).sum();
        let residual_total_j: f64 = self.nodes.iter().map(|n| n.energy.residual_j).sum();
        let consumed_total_j: f64 = self.nodes.iter().map(|n| n.energy.debited_j).sum();
        let mut cache = c.cache.clone();
        let holds = &self.metrics.cache_hold_s;
        cache.mean_hold_s = if holds.is_empty() {
            0.0
        } else {
            holds.iter().sum::<f64>() / holds.len() as f64
        };
        let summary = RunSummary {
            seed: self.scenario.seed,
            horizon_s: horizon,
            node_count: self.scenario.node_count,
            flow_count: self.flows.len() as u32,
            events_processed: sched.processed(),
            trace_digest: sched.trace_digest(),
            packets: PacketCounts {
                generated: c.generated,
                delivered: c.delivered,
                dropped,
                dropped_total,
                cached_at_end: cached,
                in_flight_at_end: in_flight,
            },
            loss_rate: if c.generated == 0 {
                0.0
            } else {
                dropped_total as f64 / c.generated as f64
            },
            streams: StreamCounts {
                completed,
                in_bound: c.in_bound,
                bound_violated: c.violated,
                violation_rate: if completed == 0 {
                    0.0
                } else {
                    c.violated as f64 / completed as f64
                },
            },
            energy: EnergyTotals {
                initial_total_j,
                consumed_total_j,
                residual_total_j,
                dead_nodes: (0..self.topo.len() as NodeId).filter(|&n| self.is_dead(n)).count() as u64,
                anomalies: self.nodes.iter().map(|n| n.energy.anomalies).sum(),
            },
            cache,
            mean_eff_throughput: self.metrics.mean_effective_throughput(),
            eff_throughput_clamped_flows: self.metrics.clamped_throughput_count() as u64,
            mean_power_uw: self.metrics.mean_transmit_power_uw(),
            mean_delay_prioritized_s: self.metrics.mean_delay_s(Priority::Prioritized),
            mean_delay_dont_care_s: self.metrics.mean_delay_s(Priority::DontCare),
        };
        Ok(RunOutput {
            metrics: self.metrics,
            summary,
            decisions: self.decisions.unwrap_or_default(),
            energy: self.nodes.iter().map(|n| n.energy).collect(),
            topology: self.topo,
        })
    }

    fn check_invariants(&self) -> Result<()> {
        let c = &self.counters;
        let dropped: u64 = c.dropped.values().sum();
        let live = self.packets.len() as u64;
        if c.generated != c.delivered + dropped + live {
            return Err(Error::Invariant(format!(
                "packet conservation: generated {} != delivered {} + dropped {} + live {}",
                c.generated, c.delivered, dropped, live
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let e = &node.energy;
            let gap = (e.initial_j - e.residual_j - e.debited_j).abs();
            if gap > ENERGY_LEDGER_TOLERANCE * e.initial_j.max(1.0) || e.residual_j < 0.0 {
                return Err(Error::Invariant(format!(
                    "energy ledger of node {i} off by {gap} J"
                )));
            }
            if node.cache.occupancy_bytes() > node.cache.capacity_bytes() {
                return Err(Error::Invariant(format!("cache of node {i} over capacity")));
            }
        }
        for (i, series) in self.metrics.node_residual.iter().enumerate() {
            if series.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::Invariant(format!(
                    "residual energy of node {i} increased"
                )));
            }
        }
        Ok(())
    }
}
