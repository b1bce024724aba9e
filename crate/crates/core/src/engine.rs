//! Discrete-event kernel: virtual clock, ordered event queue, seeded random
//! streams and Pareto traffic generators.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::topology::NodeId;

pub type SimRng = ChaCha8Rng;
pub type FlowId = u32;
pub type PacketId = u64;

/// Independent random streams used by one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum RngStream {
    Placement = 1,
    Mobility = 2,
    Traffic = 3,
    Flows = 4,
}

/// Deterministic generator for `(seed, stream)`.
pub fn rng_stream(seed: u64, stream: RngStream) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    /// A flow emits its next packet at the source.
    FlowEmit { flow: FlowId },
    PacketArrival { node: NodeId, packet: PacketId },
    TransmissionComplete { node: NodeId },
    CacheFlush { node: NodeId, packet: PacketId },
    MobilityStep { node: NodeId },
    StateTimer { node: NodeId, generation: u64 },
    MetricsSample,
}

impl EventKind {
    fn encode(&self) -> [u8; 17] {
        let (tag, a, b): (u8, u64, u64) = match *self {
            EventKind::FlowEmit { flow } => (0, flow.into(), 0),
            EventKind::PacketArrival { node, packet } => (1, node.into(), packet),
            EventKind::TransmissionComplete { node } => (2, node.into(), 0),
            EventKind::CacheFlush { node, packet } => (3, node.into(), packet),
            EventKind::MobilityStep { node } => (4, node.into(), 0),
            EventKind::StateTimer { node, generation } => (5, node.into(), generation),
            EventKind::MetricsSample => (6, 0, 0),
        };
        let mut out = [0u8; 17];
        out[0] = tag;
        out[1..9].copy_from_slice(&a.to_le_bytes());
        out[9..].copy_from_slice(&b.to_le_bytes());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub fire_time_s: f64,
    pub sequence_no: u64,
    pub kind: EventKind,
}

// Min-heap order on (fire_time, sequence_no).
struct Pending(Event);

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .fire_time_s
            .total_cmp(&self.0.fire_time_s)
            .then_with(|| other.0.sequence_no.cmp(&self.0.sequence_no))
    }
}

/// Event queue plus virtual clock. Single-threaded by construction.
pub struct Scheduler {
    now: f64,
    next_seq: u64,
    queue: BinaryHeap<Pending>,
    processed: u64,
    trace: Sha256,
    trace_log: Option<Vec<Event>>,
}

impl Default for Scheduler {
    fn default() -> Self {
        Self::new()
    }
}

impl Scheduler {
    pub fn new() -> Self {
        Scheduler {
            now: 0.0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            processed: 0,
            trace: Sha256::new(),
            trace_log: None,
        }
    }

    /// Keep every processed event in memory for later inspection.
    pub fn with_trace_log(mut self) -> Self {
        self.trace_log = Some(Vec::new());
        self
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn scheduled(&self) -> u64 {
        self.next_seq
    }

    pub fn trace_log(&self) -> Option<&[Event]> {
        self.trace_log.as_deref()
    }

    /// Hex SHA-256 over the processed event sequence.
    pub fn trace_digest(&self) -> String {
        hex::encode(self.trace.clone().finalize())
    }

    pub fn schedule(&mut self, fire_time_s: f64, kind: EventKind) -> Result<u64> {
        if !(fire_time_s >= self.now) {
            return Err(Error::PastEvent {
                fire_time_s,
                now_s: self.now,
            });
        }
        let sequence_no = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Pending(Event {
            fire_time_s,
            sequence_no,
            kind,
        }));
        Ok(sequence_no)
    }

    pub fn schedule_in(&mut self, delay_s: f64, kind: EventKind) -> Result<u64> {
        self.schedule(self.now + delay_s, kind)
    }

    /// Pops the next event if it fires no later than `t_end_s`, advancing the clock.
    pub fn pop_until(&mut self, t_end_s: f64) -> Option<Event> {
        match self.queue.peek() {
            Some(p) if p.0.fire_time_s <= t_end_s => {}
            _ => return None,
        }
        let Pending(event) = self.queue.pop()?;
        debug_assert!(event.fire_time_s >= self.now);
        self.now = event.fire_time_s;
        self.processed += 1;
        self.trace.update(event.fire_time_s.to_le_bytes());
        self.trace.update(event.sequence_no.to_le_bytes());
        self.trace.update(event.kind.encode());
        if let Some(log) = &mut self.trace_log {
            log.push(event);
        }
        Some(event)
    }

    /// Processes every event with `fire_time ≤ t_end_s` in order, then sets the
    /// clock to `t_end_s`. Returns the number of events processed.
    pub fn run_until<F>(&mut self, t_end_s: f64, mut handler: F) -> Result<u64>
    where
        F: FnMut(&mut Scheduler, Event) -> Result<()>,
    {
        if !(t_end_s >= self.now) {
            return Err(Error::PastEvent {
                fire_time_s: t_end_s,
                now_s: self.now,
            });
        }
        let mut count = 0;
        while let Some(event) = self.pop_until(t_end_s) {
            handler(self, event)?;
            count += 1;
        }
        self.now = t_end_s;
        Ok(count)
    }
}

/// Constant-bit-rate flow whose inter-arrival gaps are Pareto distributed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficProfile {
    pub packet_size_bits: u32,
    pub pareto_shape: f64,
    pub pareto_scale_s: f64,
}

impl Default for TrafficProfile {
    fn default() -> Self {
        // Shape 2.5 with a 0.06 s scale gives a 0.1 s mean gap, ~10 packets/s.
        TrafficProfile {
            packet_size_bits: 4096,
            pareto_shape: 2.5,
            pareto_scale_s: 0.06,
        }
    }
}

impl TrafficProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.pareto_shape > 1.0) {
            return Err(Error::domain(format!(
                "pareto shape must exceed 1, got {}",
                self.pareto_shape
            )));
        }
        if !(self.pareto_scale_s > 0.0) {
            return Err(Error::domain("pareto scale must be positive"));
        }
        if self.packet_size_bits == 0 {
            return Err(Error::domain("packet size must be positive"));
        }
        Ok(())
    }

    /// Mean inter-arrival `a·x_m / (a − 1)`.
    pub fn mean_interarrival_s(&self) -> f64 {
        self.pareto_shape * self.pareto_scale_s / (self.pareto_shape - 1.0)
    }

    /// Offered load of one flow in bits per second.
    pub fn offered_bps(&self) -> f64 {
        f64::from(self.packet_size_bits) / self.mean_interarrival_s()
    }
}

/// Draws one inter-arrival gap `x_m · U^(−1/a)`.
pub fn pareto_interarrival<R: Rng + ?Sized>(rng: &mut R, profile: &TrafficProfile) -> f64 {
    Pareto::new(profile.pareto_scale_s, profile.pareto_shape)
        .expect("validated traffic profile")
        .sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub id: FlowId,
    pub src: NodeId,
    pub dst: NodeId,
    pub profile: TrafficProfile,
    /// Application tag used for priority classification.
    pub tag: String,
}

#[derive(Debug, Clone, Default)]
pub struct FlowTable {
    flows: Vec<Flow>,
}

impl FlowTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn flows(&self) -> &[Flow] {
        &self.flows
    }

    pub fn get(&self, id: FlowId) -> Option<&Flow> {
        self.flows.get(id as usize)
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    /// Registers a flow. When `dst` is `None` the destination is drawn uniformly
    /// from the live nodes other than `src`.
    pub fn spawn_flow<R: Rng + ?Sized>(
        &mut self,
        src: NodeId,
        dst: Option<NodeId>,
        profile: TrafficProfile,
        tag: impl Into<String>,
        alive: &[bool],
        rng: &mut R,
    ) -> Result<FlowId> {
        profile.validate()?;
        let is_alive = |n: NodeId| alive.get(n as usize).copied().unwrap_or(false);
        if !is_alive(src) {
            return Err(Error::InvalidFlow(format!("source node {src} is not alive")));
        }
        let dst = match dst {
            Some(d) if d == src => {
                return Err(Error::InvalidFlow(format!(
                    "source and destination are both node {src}"
                )))
            }
            Some(d) if !is_alive(d) => {
                return Err(Error::InvalidFlow(format!(
                    "destination node {d} is not alive"
                )))
            }
            Some(d) => d,
            None => {
                let candidates: Vec<NodeId> = (0..alive.len() as NodeId)
                    .filter(|&n| n != src && is_alive(n))
                    .collect();
                if candidates.is_empty() {
                    return Err(Error::InvalidFlow(format!(
                        "no live destination available for node {src}"
                    )));
                }
                candidates[rng.random_range(0..candidates.len())]
            }
        };
        let id = self.flows.len() as FlowId;
        self.flows.push(Flow {
            id,
            src,
            dst,
            profile,
            tag: tag.into(),
        });
        Ok(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_times_pop_in_scheduling_order() {
        let mut s = Scheduler::new();
        s.schedule(1.0, EventKind::MobilityStep { node: 7 }).unwrap();
        s.schedule(1.0, EventKind::MobilityStep { node: 3 }).unwrap();
        s.schedule(0.5, EventKind::MetricsSample).unwrap();
        let order: Vec<_> = std::iter::from_fn(|| s.pop_until(10.0))
            .map(|e| e.kind)
            .collect();
        assert_eq!(
            order,
            vec![
                EventKind::MetricsSample,
                EventKind::MobilityStep { node: 7 },
                EventKind::MobilityStep { node: 3 },
            ]
        );
    }

    #[test]
    fn schedule_at_now_fires_first() {
        let mut s = Scheduler::new();
        s.schedule(2.0, EventKind::MetricsSample).unwrap();
        s.run_until(1.0, |_, _| Ok(())).unwrap();
        s.schedule(1.0, EventKind::TransmissionComplete { node: 1 }).unwrap();
        let first = s.pop_until(5.0).unwrap();
        assert_eq!(first.kind, EventKind::TransmissionComplete { node: 1 });
    }

    #[test]
    fn past_events_are_rejected() {
        let mut s = Scheduler::new();
        s.run_until(3.0, |_, _| Ok(())).unwrap();
        let err = s.schedule(3.0 - 1e-9, EventKind::MetricsSample).unwrap_err();
        assert!(matches!(err, Error::PastEvent { .. }));
        assert!(s.run_until(2.0, |_, _| Ok(())).is_err());
    }

    #[test]
    fn run_until_on_empty_queue_advances_clock() {
        let mut s = Scheduler::new();
        assert_eq!(s.run_until(10.0, |_, _| Ok(())).unwrap(), 0);
        assert_eq!(s.now(), 10.0);
    }

    #[test]
    fn run_until_stops_at_horizon() {
        let mut s = Scheduler::new();
        for t in [1.0, 2.0, 3.0, 4.5] {
            s.schedule(t, EventKind::MetricsSample).unwrap();
        }
        let mut seen = Vec::new();
        let n = s
            .run_until(4.0, |sch, e| {
                assert_eq!(sch.now(), e.fire_time_s);
                seen.push(e.fire_time_s);
                Ok(())
            })
            .unwrap();
        assert_eq!(n, 3);
        assert_eq!(seen, vec![1.0, 2.0, 3.0]);
        assert_eq!(s.pending(), 1);
        assert_eq!(s.scheduled(), s.processed() + s.pending() as u64);
    }

    #[test]
    fn handlers_can_schedule_follow_ups() {
        let mut s = Scheduler::new().with_trace_log();
        s.schedule(0.0, EventKind::FlowEmit { flow: 0 }).unwrap();
        let n = s
            .run_until(1.0, |sch, e| {
                if e.fire_time_s < 0.95 {
                    sch.schedule_in(0.1, e.kind)?;
                }
                Ok(())
            })
            .unwrap();
        assert_eq!(n, 11);
        let log = s.trace_log().unwrap();
        assert!(log.windows(2).all(|w| w[0].fire_time_s <= w[1].fire_time_s));
    }

    #[test]
    fn pareto_samples_respect_support_and_mean() {
        let profile = TrafficProfile {
            packet_size_bits: 4096,
            pareto_shape: 2.0,
            pareto_scale_s: 1.0,
        };
        let mut rng = rng_stream(7, RngStream::Traffic);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = pareto_interarrival(&mut rng, &profile);
            assert!(x >= 1.0);
            sum += x;
        }
        let mean = sum / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
    }

    #[test]
    fn pareto_with_huge_shape_collapses_to_scale() {
        let profile = TrafficProfile {
            packet_size_bits: 4096,
            pareto_shape: 1e9,
            pareto_scale_s: 0.25,
        };
        let mut rng = rng_stream(1, RngStream::Traffic);
        for _ in 0..1000 {
            let x = pareto_interarrival(&mut rng, &profile);
            assert!((x - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn spawn_flow_validation() {
        let mut table = FlowTable::new();
        let mut rng = rng_stream(3, RngStream::Flows);
        let alive = [true, true, false];
        let p = TrafficProfile::default();
        assert!(table.spawn_flow(0, Some(0), p, "bulk", &alive, &mut rng).is_err());
        assert!(table.spawn_flow(2, Some(0), p, "bulk", &alive, &mut rng).is_err());
        assert!(table.spawn_flow(0, Some(2), p, "bulk", &alive, &mut rng).is_err());
        let id = table.spawn_flow(0, None, p, "bulk", &alive, &mut rng).unwrap();
        assert_eq!(table.get(id).unwrap().dst, 1);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| 0).scan(rng_stream(9, RngStream::Mobility), |r, _| Some(r.random())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(rng_stream(9, RngStream::Mobility), |r, _| Some(r.random())).collect();
        let c: Vec<u64> = (0..4).map(|_| 0).scan(rng_stream(9, RngStream::Traffic), |r, _| Some(r.random())).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
