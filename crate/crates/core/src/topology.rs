//! Grid topology with asynchronous random-direction mobility, directed link
//! derivation, and zone routing (proactive inside a zone, bordercast outside).

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{transmission_power, LinkSpec, PowerCalibration};

pub type NodeId = u32;

/// Links shorter than this are treated as this long; the power law is
/// undefined at zero distance.
pub const MIN_LINK_DISTANCE_M: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Area {
    pub width_m: f64,
    pub height_m: f64,
}

impl Area {
    pub fn diagonal_m(&self) -> f64 {
        self.width_m.hypot(self.height_m)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.width_m).contains(&x) && (0.0..=self.height_m).contains(&y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodePosition {
    pub node_id: NodeId,
    pub x_m: f64,
    pub y_m: f64,
}

/// Transmitter-side radio parameters of one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeRadio {
    pub rate_mbps: f64,
    pub loss_exponent: f64,
    pub fading_factor: f64,
}

impl Default for NodeRadio {
    fn default() -> Self {
        NodeRadio {
            rate_mbps: 11.0,
            loss_exponent: 3.0,
            fading_factor: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobilityParams {
    pub v_min_mps: f64,
    pub v_max_mps: f64,
    /// Mean of the exponential gap between a node's direction changes.
    pub epoch_mean_s: f64,
}

impl Default for MobilityParams {
    fn default() -> Self {
        MobilityParams {
            v_min_mps: 0.0,
            v_max_mps: 0.5,
            epoch_mean_s: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyConfig {
    pub n_nodes: u32,
    pub area: Area,
    pub comm_range_m: f64,
    /// Jitter as a fraction of the grid cell side, in `[0, 1]`.
    pub grid_jitter: f64,
    pub mobility: MobilityParams,
    /// Maximum age of the connectivity snapshot before it is rebuilt.
    pub refresh_s: f64,
    pub radio: NodeRadio,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            n_nodes: 50,
            area: Area {
                width_m: 40.0,
                height_m: 20.0,
            },
            comm_range_m: 15.0,
            grid_jitter: 0.5,
            mobility: MobilityParams::default(),
            refresh_s: 0.05,
            radio: NodeRadio::default(),
        }
    }
}

// Straight-line motion since the last epoch; positions fold back into the area.
#[derive(Debug, Clone, Copy)]
struct Motion {
    x0: f64,
    y0: f64,
    t0: f64,
    vx: f64,
    vy: f64,
}

fn reflect(v: f64, len: f64) -> f64 {
    if len <= 0.0 {
        return 0.0;
    }
    let m = v.rem_euclid(2.0 * len);
    if m > len {
        2.0 * len - m
    } else {
        m
    }
}

#[derive(Debug, Clone)]
struct Snapshot {
    time_s: f64,
    positions: Vec<(f64, f64)>,
    adjacency: Vec<Vec<NodeId>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Zone {
    pub center_node: NodeId,
    pub radius_hops: u32,
    /// Sorted member ids, center included.
    pub members: Vec<NodeId>,
    /// Members at exactly `radius_hops` hops.
    pub border: Vec<NodeId>,
}

impl Zone {
    pub fn contains(&self, node: NodeId) -> bool {
        self.members.binary_search(&node).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub hops: Vec<NodeId>,
    pub links: Vec<LinkSpec>,
}

impl Route {
    pub fn src(&self) -> NodeId {
        self.hops[0]
    }

    pub fn dst(&self) -> NodeId {
        *self.hops.last().expect("route has at least one hop")
    }

    pub fn hop_count(&self) -> usize {
        self.links.len()
    }

    /// Nodes strictly between the endpoints.
    pub fn intermediates(&self) -> &[NodeId] {
        if self.hops.len() <= 2 {
            &[]
        } else {
            &self.hops[1..self.hops.len() - 1]
        }
    }
}

#[derive(Debug, Clone)]
pub struct Topology {
    area: Area,
    comm_range_m: f64,
    mobility: MobilityParams,
    refresh_s: f64,
    calib: PowerCalibration,
    motion: Vec<Motion>,
    radios: Vec<NodeRadio>,
    alive: Vec<bool>,
    snapshot: Snapshot,
    dirty: bool,
}

/// Places `n_nodes` on a jittered grid covering the area.
pub fn build_topology<R: Rng + ?Sized>(
    cfg: &TopologyConfig,
    calib: PowerCalibration,
    rng: &mut R,
) -> Result<Topology> {
    if cfg.n_nodes < 2 {
        return Err(Error::Topology("need at least two nodes".into()));
    }
    if !(cfg.comm_range_m > 0.0) {
        return Err(Error::Topology("communication range must be positive".into()));
    }
    let Area { width_m, height_m } = cfg.area;
    if !(width_m > 0.0 && height_m > 0.0) || width_m * height_m < f64::from(cfg.n_nodes) {
        return Err(Error::Topology(format!(
            "area {width_m} x {height_m} m is too small for {} nodes (need 1 m^2 per node)",
            cfg.n_nodes
        )));
    }
    if !(0.0..=1.0).contains(&cfg.grid_jitter) {
        return Err(Error::Topology("grid jitter must lie in [0, 1]".into()));
    }
    let n = cfg.n_nodes as usize;
    let cols = ((n as f64 * width_m / height_m).sqrt().ceil() as usize).clamp(1, n);
    let rows = n.div_ceil(cols);
    let cell_w = width_m / cols as f64;
    let cell_h = height_m / rows as f64;
    let positions = (0..n)
        .map(|i| {
            let (c, r) = (i % cols, i / cols);
            let jx = (rng.random::<f64>() - 0.5) * cfg.grid_jitter * cell_w;
            let jy = (rng.random::<f64>() - 0.5) * cfg.grid_jitter * cell_h;
            (
                ((c as f64 + 0.5) * cell_w + jx).clamp(0.0, width_m),
                ((r as f64 + 0.5) * cell_h + jy).clamp(0.0, height_m),
            )
        })
        .collect();
    let mut topo = Topology::from_positions(cfg.area, positions, cfg.comm_range_m, cfg.radio, calib)?;
    topo.mobility = cfg.mobility;
    topo.refresh_s = cfg.refresh_s;
    Ok(topo)
}

impl Topology {
    /// Static topology with explicit positions and a shared radio config.
    pub fn from_positions(
        area: Area,
        positions: Vec<(f64, f64)>,
        comm_range_m: f64,
        radio: NodeRadio,
        calib: PowerCalibration,
    ) -> Result<Self> {
        if let Some((x, y)) = positions.iter().find(|(x, y)| !area.contains(*x, *y)) {
            return Err(Error::Topology(format!("position ({x}, {y}) lies outside the area")));
        }
        let n = positions.len();
        let motion = positions
            .iter()
            .map(|&(x, y)| Motion {
                x0: x,
                y0: y,
                t0: 0.0,
                vx: 0.0,
                vy: 0.0,
            })
            .collect();
        let mut topo = Topology {
            area,
            comm_range_m,
            mobility: MobilityParams {
                v_min_mps: 0.0,
                v_max_mps: 0.0,
                epoch_mean_s: 1.0,
            },
            refresh_s: 0.0,
            calib,
            motion,
            radios: vec![radio; n],
            alive: vec![true; n],
            snapshot: Snapshot {
                time_s: 0.0,
                positions: Vec::new(),
                adjacency: Vec::new(),
            },
            dirty: true,
        };
        topo.rebuild(0.0);
        Ok(topo)
    }

    pub fn len(&self) -> usize {
        self.motion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motion.is_empty()
    }

    pub fn area(&self) -> Area {
        self.area
    }

    pub fn comm_range_m(&self) -> f64 {
        self.comm_range_m
    }

    pub fn calibration(&self) -> &PowerCalibration {
        &self.calib
    }

    pub fn radio(&self, node: NodeId) -> &NodeRadio {
        &self.radios[node as usize]
    }

    pub fn set_radio(&mut self, node: NodeId, radio: NodeRadio) {
        self.radios[node as usize] = radio;
    }

    pub fn is_alive(&self, node: NodeId) -> bool {
        self.alive[node as usize]
    }

    pub fn alive(&self) -> &[bool] {
        &self.alive
    }

    /// Removes a node from the connectivity graph permanently.
    pub fn kill(&mut self, node: NodeId) {
        if std::mem::replace(&mut self.alive[node as usize], false) {
            self.dirty = true;
        }
    }

    fn position_at(&self, node: NodeId, t: f64) -> (f64, f64) {
        let m = &self.motion[node as usize];
        let dt = t - m.t0;
        (
            reflect(m.x0 + m.vx * dt, self.area.width_m),
            reflect(m.y0 + m.vy * dt, self.area.height_m),
        )
    }

    /// Rebuilds the connectivity snapshot if it is stale or invalidated.
    pub fn sync(&mut self, now: f64) {
        if self.dirty || now - self.snapshot.time_s > self.refresh_s {
            self.rebuild(now);
        }
    }

    fn rebuild(&mut self, now: f64) {
        let n = self.len();
        let positions: Vec<_> = (0..n as NodeId).map(|i| self.position_at(i, now)).collect();
        let mut adjacency = vec![Vec::new(); n];
        for a in 0..n {
            if !self.alive[a] {
                continue;
            }
            for b in (a + 1)..n {
                if !self.alive[b] {
                    continue;
                }
                let (xa, ya) = positions[a];
                let (xb, yb) = positions[b];
                if (xa - xb).hypot(ya - yb) <= self.comm_range_m {
                    adjacency[a].push(b as NodeId);
                    adjacency[b].push(a as NodeId);
                }
            }
        }
        self.snapshot = Snapshot {
            time_s: now,
            positions,
            adjacency,
        };
        self.dirty = false;
    }

    pub fn snapshot_time(&self) -> f64 {
        self.snapshot.time_s
    }

    pub fn positions(&self) -> Vec<NodePosition> {
        self.snapshot
            .positions
            .iter()
            .enumerate()
            .map(|(i, &(x_m, y_m))| NodePosition {
                node_id: i as NodeId,
                x_m,
                y_m,
            })
            .collect()
    }

    pub fn neighbors(&self, node: NodeId) -> &[NodeId] {
        &self.snapshot.adjacency[node as usize]
    }

    /// Undirected edges `(a, b)` with `a < b`.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.snapshot
            .adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| {
                ns.iter()
                    .filter(move |&&b| b as usize > a)
                    .map(move |&b| (a as NodeId, b))
            })
            .collect()
    }

    pub fn distance(&self, a: NodeId, b: NodeId) -> f64 {
        let (xa, ya) = self.snapshot.positions[a as usize];
        let (xb, yb) = self.snapshot.positions[b as usize];
        (xa - xb).hypot(ya - yb)
    }

    pub fn connected(&self, a: NodeId, b: NodeId) -> bool {
        self.neighbors(a).binary_search(&b).is_ok()
    }

    /// True if every live node reaches every other live node.
    pub fn is_connected(&self) -> bool {
        let Some(start) = (0..self.len() as NodeId).find(|&n| self.is_alive(n)) else {
            return true;
        };
        let reached = self.hop_distances(start, u32::MAX).iter().flatten().count();
        reached == self.alive.iter().filter(|a| **a).count()
    }

    /// Starts a new mobility epoch for `node` at `now`: fixes its current
    /// position, draws a direction and speed, and returns the next epoch time.
    pub fn mobility_step<R: Rng + ?Sized>(&mut self, node: NodeId, now: f64, rng: &mut R) -> f64 {
        let (x, y) = self.position_at(node, now);
        let MobilityParams {
            v_min_mps,
            v_max_mps,
            epoch_mean_s,
        } = self.mobility;
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let speed = if v_max_mps > v_min_mps {
            rng.random_range(v_min_mps..=v_max_mps)
        } else {
            v_max_mps
        };
        self.motion[node as usize] = Motion {
            x0: x,
            y0: y,
            t0: now,
            vx: speed * theta.cos(),
            vy: speed * theta.sin(),
        };
        let gap = Exp::new(1.0 / epoch_mean_s)
            .expect("positive epoch mean")
            .sample(rng);
        now + gap
    }

    /// Whether nodes move at all under the configured mobility law.
    pub fn is_mobile(&self) -> bool {
        self.mobility.v_max_mps > 0.0
    }

    /// Directed link `a → b` using the transmitter's radio parameters.
    pub fn directed_link(&self, a: NodeId, b: NodeId) -> Result<LinkSpec> {
        let d = self.distance(a, b);
        if a == b || d > self.comm_range_m || !self.is_alive(a) || !self.is_alive(b) {
            return Err(Error::OutOfRange { a, b });
        }
        let radio = self.radios[a as usize];
        Ok(LinkSpec {
            distance_m: d.max(MIN_LINK_DISTANCE_M),
            rate_mbps: radio.rate_mbps,
            loss_exponent: radio.loss_exponent,
            fading_factor: radio.fading_factor,
        })
    }

    fn link_power(&self, a: NodeId, b: NodeId) -> f64 {
        self.directed_link(a, b)
            .and_then(|l| transmission_power(&l, &self.calib))
            .unwrap_or(f64::INFINITY)
    }

    /// BFS hop distances from `src`, truncated at `max_hops`.
    pub fn hop_distances(&self, src: NodeId, max_hops: u32) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.len()];
        if !self.is_alive(src) {
            dist[src as usize] = Some(0);
            return dist;
        }
        dist[src as usize] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u as usize].unwrap();
            if du >= max_hops {
                continue;
            }
            for &v in self.neighbors(u) {
                if dist[v as usize].is_none() {
                    dist[v as usize] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn compute_zone(&self, node: NodeId, radius_hops: u32) -> Zone {
        let dist = self.hop_distances(node, radius_hops);
        let mut members = Vec::new();
        let mut border = Vec::new();
        for (i, d) in dist.iter().enumerate() {
            if let Some(d) = *d {
                members.push(i as NodeId);
                if d == radius_hops && radius_hops > 0 {
                    border.push(i as NodeId);
                }
            }
        }
        Zone {
            center_node: node,
            radius_hops,
            members,
            border,
        }
    }

    /// Zone size without materializing the member list.
    pub fn zone_cardinality(&self, node: NodeId, radius_hops: u32) -> usize {
        self.hop_distances(node, radius_hops).iter().flatten().count()
    }

    fn route_from_hops(&self, hops: Vec<NodeId>) -> Result<Route> {
        let links = hops
            .windows(2)
            .map(|w| self.directed_link(w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Route { hops, links })
    }

    /// Fewest-hop path to `dst` inside the zone of `src`; equal-hop paths are
    /// ranked by total transmission power.
    pub fn intrazone_route(&self, src: NodeId, dst: NodeId, radius_hops: u32) -> Result<Route> {
        if src == dst {
            return Ok(Route {
                hops: vec![src],
                links: Vec::new(),
            });
        }
        let zone = self.compute_zone(src, radius_hops);
        if !zone.contains(dst) {
            return Err(Error::NoRoute { src, dst });
        }
        let hops = self
            .min_cost_path(src, dst, |n| zone.contains(n))
            .ok_or(Error::NoRoute { src, dst })?;
        self.route_from_hops(hops)
    }

    // Dijkstra on lexicographic (hop count, power) restricted to `allowed` nodes.
    fn min_cost_path(
        &self,
        src: NodeId,
        dst: NodeId,
        allowed: impl Fn(NodeId) -> bool,
    ) -> Option<Vec<NodeId>> {
        #[derive(PartialEq)]
        struct Cost(u32, f64, NodeId);
        impl Eq for Cost {}
        impl PartialOrd for Cost {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Cost {
            fn cmp(&self, other: &Self) -> Ordering {
                self.0
                    .cmp(&other.0)
                    .then(self.1.total_cmp(&other.1))
                    .then(self.2.cmp(&other.2))
            }
        }

        let n = self.len();
        let mut best: Vec<Option<(u32, f64)>> = vec![None; n];
        let mut prev: Vec<Option<NodeId>> = vec![None; n];
        let mut done = vec![false; n];
        best[src as usize] = Some((0, 0.0));
        let mut heap = BinaryHeap::from([Reverse(Cost(0, 0.0, src))]);
        while let Some(Reverse(Cost(h, p, u))) = heap.pop() {
            if std::mem::replace(&mut done[u as usize], true) {
                continue;
            }
            if u == dst {
                break;
            }
            for &v in self.neighbors(u) {
                if done[v as usize] || !allowed(v) {
                    continue;
                }
                let cand = (h + 1, p + self.link_power(u, v));
                let better = match best[v as usize] {
                    None => true,
                    Some(cur) => cand.0 < cur.0 || (cand.0 == cur.0 && cand.1 < cur.1),
                };
                if better {
                    best[v as usize] = Some(cand);
                    prev[v as usize] = Some(u);
                    heap.push(Reverse(Cost(cand.0, cand.1, v)));
                }
            }
        }
        best[dst as usize]?;
        let mut hops = vec![dst];
        let mut cur = dst;
        while cur != src {
            cur = prev[cur as usize]?;
            hops.push(cur);
        }
        hops.reverse();
        Some(hops)
    }

    /// Route to any destination: intra-zone when `dst` is in the zone of `src`,
    /// otherwise bordercast through peripheral nodes, at most `ttl` levels deep.
    pub fn interzone_route(
        &self,
        src: NodeId,
        dst: NodeId,
        radius_hops: u32,
        ttl: u32,
    ) -> Result<Route> {
        let radius_hops = radius_hops.max(1);
        let no_route = Error::NoRoute { src, dst };
        if !self.is_alive(src) || !self.is_alive(dst) {
            return Err(no_route);
        }
        let home = self.compute_zone(src, radius_hops);
        if home.contains(dst) {
            return self.intrazone_route(src, dst, radius_hops);
        }
        let mut queried = BTreeSet::from([src]);
        let mut queue = VecDeque::from([(src, vec![src], 0u32)]);
        while let Some((q, path, depth)) = queue.pop_front() {
            let zone = if q == src {
                home.clone()
            } else {
                self.compute_zone(q, radius_hops)
            };
            if zone.contains(dst) {
                let tail = self.intrazone_route(q, dst, radius_hops)?;
                let mut hops = path;
                hops.extend_from_slice(&tail.hops[1..]);
                return self.route_from_hops(remove_loops(hops));
            }
            if depth >= ttl {
                continue;
            }
            for &b in &zone.border {
                if !queried.insert(b) {
                    continue;
                }
                let seg = self.intrazone_route(q, b, radius_hops)?;
                let mut next = path.clone();
                next.extend_from_slice(&seg.hops[1..]);
                queue.push_back((b, next, depth + 1));
            }
        }
        Err(no_route)
    }

    /// Writes `node_id,x_m,y_m` rows.
    pub fn write_nodes_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["node_id", "x_m", "y_m", "alive"])?;
        for p in self.positions() {
            w.write_record([
                p.node_id.to_string(),
                p.x_m.to_string(),
                p.y_m.to_string(),
                self.is_alive(p.node_id).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `a,b,distance_m` rows for the undirected edge set.
    pub fn write_edges_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["a", "b", "distance_m"])?;
        for (a, b) in self.edges() {
            w.write_record([a.to_string(), b.to_string(), self.distance(a, b).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Cuts cycles out of a walk so no node repeats.
fn remove_loops(walk: Vec<NodeId>) -> Vec<NodeId> {
    let mut out: Vec<NodeId> = Vec::with_capacity(walk.len());
    for n in walk {
        if let Some(pos) = out.iter().position(|&m| m == n) {
            out.truncate(pos + 1);
        } else {
            out.push(n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{rng_stream, RngStream};

    fn line(n: usize, spacing: f64, range: f64) -> Topology {
        let area = Area {
            width_m: spacing * n as f64,
            height_m: 1.0,
        };
        let pos = (0..n).map(|i| (spacing * i as f64, 0.5)).collect();
        Topology::from_positions(area, pos, range, NodeRadio::default(), PowerCalibration::default())
            .unwrap()
    }

    #[test]
    fn reflection_stays_in_bounds() {
        for v in [-25.0, -3.0, 0.0, 4.0, 10.0, 13.0, 47.5] {
            let r = reflect(v, 10.0);
            assert!((0.0..=10.0).contains(&r), "{v} -> {r}");
        }
        assert_eq!(reflect(12.0, 10.0), 8.0);
        assert_eq!(reflect(-2.0, 10.0), 2.0);
    }

    #[test]
    fn large_range_gives_complete_graph() {
        let cfg = TopologyConfig {
            n_nodes: 4,
            area: Area {
                width_m: 10.0,
                height_m: 10.0,
            },
            comm_range_m: 15.0,
            ..Default::default()
        };
        let topo = build_topology(&cfg, PowerCalibration::default(), &mut rng_stream(1, RngStream::Placement)).unwrap();
        assert_eq!(topo.edges().len(), 6);
    }

    #[test]
    fn tiny_range_gives_no_edges() {
        let cfg = TopologyConfig {
            comm_range_m: 1e-9,
            ..Default::default()
        };
        let topo = build_topology(&cfg, PowerCalibration::default(), &mut rng_stream(1, RngStream::Placement)).unwrap();
        assert!(topo.edges().is_empty());
    }

    #[test]
    fn rejects_degenerate_configs() {
        let calib = PowerCalibration::default();
        let mut rng = rng_stream(1, RngStream::Placement);
        let small = TopologyConfig {
            area: Area {
                width_m: 5.0,
                height_m: 5.0,
            },
            ..Default::default()
        };
        assert!(build_topology(&small, calib, &mut rng).is_err());
        let one = TopologyConfig {
            n_nodes: 1,
            ..Default::default()
        };
        assert!(build_topology(&one, calib, &mut rng).is_err());
    }

    #[test]
    fn zone_on_line() {
        let topo = line(4, 5.0, 6.0);
        assert_eq!(topo.compute_zone(0, 0).members, vec![0]);
        let z = topo.compute_zone(0, 2);
        assert_eq!(z.members, vec![0, 1, 2]);
        assert_eq!(z.border, vec![2]);
    }

    #[test]
    fn intrazone_routes() {
        let topo = line(3, 5.0, 6.0);
        assert_eq!(topo.intrazone_route(1, 1, 2).unwrap().hops, vec![1]);
        let r = topo.intrazone_route(0, 2, 2).unwrap();
        assert_eq!(r.hops, vec![0, 1, 2]);
        assert_eq!(r.links.len(), 2);
        assert!(topo.intrazone_route(0, 2, 1).is_err());
    }

    #[test]
    fn interzone_on_six_node_line() {
        let topo = line(6, 5.0, 6.0);
        // dst 3 is one hop past the border node 2 of zone(0, 2).
        let r = topo.interzone_route(0, 3, 2, 10).unwrap();
        assert_eq!(r.hops, vec![0, 1, 2, 3]);
        let r = topo.interzone_route(0, 5, 2, 10).unwrap();
        assert_eq!(r.hops, vec![0, 1, 2, 3, 4, 5]);
        // Delegates to the intra-zone route inside the zone.
        assert_eq!(
            topo.interzone_route(0, 2, 2, 10).unwrap(),
            topo.intrazone_route(0, 2, 2).unwrap()
        );
        // TTL exhausted.
        assert!(topo.interzone_route(0, 5, 2, 1).is_err());
    }

    #[test]
    fn partitioned_graph_has_no_route() {
        let area = Area {
            width_m: 100.0,
            height_m: 1.0,
        };
        let pos = vec![(0.0, 0.5), (5.0, 0.5), (90.0, 0.5), (95.0, 0.5)];
        let topo = Topology::from_positions(area, pos, 6.0, NodeRadio::default(), PowerCalibration::default()).unwrap();
        assert!(matches!(
            topo.interzone_route(0, 3, 1, 50),
            Err(Error::NoRoute { src: 0, dst: 3 })
        ));
    }

    #[test]
    fn diamond_prefers_lower_power_path() {
        // 0 -> {1, 2} -> 3; the path via node 1 uses shorter links.
        let area = Area {
            width_m: 20.0,
            height_m: 20.0,
        };
        let pos = vec![(0.0, 10.0), (6.0, 11.0), (6.0, 2.0), (12.0, 10.0)];
        let topo = Topology::from_positions(area, pos, 10.0, NodeRadio::default(), PowerCalibration::default()).unwrap();
        assert!(!topo.connected(0, 3));
        assert!(topo.connected(0, 2) && topo.connected(2, 3));
        let r = topo.intrazone_route(0, 3, 2).unwrap();
        assert_eq!(r.hops, vec![0, 1, 3]);
        let calib = PowerCalibration::default();
        let via = |m| {
            crate::model::path_power(
                &[topo.directed_link(0, m).unwrap(), topo.directed_link(m, 3).unwrap()],
                &calib,
            )
            .unwrap()
        };
        assert!(via(1) < via(2));
    }

    #[test]
    fn directed_links_are_asymmetric_under_rate_asymmetry() {
        let mut topo = line(2, 5.0, 6.0);
        topo.set_radio(
            1,
            NodeRadio {
                rate_mbps: 2.0,
                ..NodeRadio::default()
            },
        );
        let ab = topo.directed_link(0, 1).unwrap();
        let ba = topo.directed_link(1, 0).unwrap();
        assert_eq!(ab.distance_m, ba.distance_m);
        assert_eq!((ab.rate_mbps, ba.rate_mbps), (11.0, 2.0));
        let calib = PowerCalibration::default();
        assert_ne!(
            transmission_power(&ab, &calib).unwrap(),
            transmission_power(&ba, &calib).unwrap()
        );
        assert!(matches!(topo.directed_link(0, 0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn out_of_range_link_is_rejected() {
        let topo = line(3, 5.0, 6.0);
        assert!(matches!(topo.directed_link(0, 2), Err(Error::OutOfRange { a: 0, b: 2 })));
    }

    #[test]
    fn zero_speed_keeps_positions() {
        let cfg = TopologyConfig {
            mobility: MobilityParams {
                v_min_mps: 0.0,
                v_max_mps: 0.0,
                epoch_mean_s: 1.0,
            },
            ..Default::default()
        };
        let mut rng = rng_stream(5, RngStream::Placement);
        let mut topo = build_topology(&cfg, PowerCalibration::default(), &mut rng).unwrap();
        let before = topo.positions();
        for node in 0..50 {
            topo.mobility_step(node, 1.0, &mut rng);
        }
        topo.sync(100.0);
        assert_eq!(before, topo.positions());
    }

    #[test]
    fn moving_nodes_stay_inside_area() {
        let cfg = TopologyConfig {
            mobility: MobilityParams {
                v_min_mps: 5.0,
                v_max_mps: 20.0,
                epoch_mean_s: 0.5,
            },
            ..Default::default()
        };
        let mut rng = rng_stream(6, RngStream::Mobility);
        let mut topo = build_topology(&cfg, PowerCalibration::default(), &mut rng).unwrap();
        let mut t = 0.0;
        while t < 30.0 {
            for node in 0..50 {
                topo.mobility_step(node, t, &mut rng);
            }
            t += 0.37;
            topo.sync(t);
            for p in topo.positions() {
                assert!(cfg.area.contains(p.x_m, p.y_m), "{p:?}");
            }
        }
    }

    #[test]
    fn dead_nodes_drop_out_of_graph() {
        let mut topo = line(3, 5.0, 6.0);
        topo.kill(1);
        topo.sync(0.0);
        assert!(topo.neighbors(0).is_empty());
        assert!(topo.interzone_route(0, 2, 2, 5).is_err());
    }

    #[test]
    fn loops_are_cut() {
        assert_eq!(remove_loops(vec![0, 1, 2, 1, 3]), vec![0, 1, 3]);
        assert_eq!(remove_loops(vec![0, 1, 2, 0, 4]), vec![0, 4]);
    }
}
