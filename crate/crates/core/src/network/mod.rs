//! Road network: TNTP ingestion, BPR linearization and graph queries.

mod latency;
mod tntp;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use nalgebra::DMatrix;
use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};

pub use latency::{bpr_slope, bpr_time, linearize_latency, AffineLatency, FREE_FLOW_FLOOR};
pub use tntp::{load_tntp, RawTntpEdge, TntpNetwork};

use crate::error::{Error, Result};

pub const NETWORK_SCHEMA_VERSION: u32 = 1;

/// A directed road with latency `a + b (h + x)` where `x` is the reactive flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub tail: usize,
    pub head: usize,
    /// Free-flow time, hours.
    pub a: f64,
    /// Congestion slope, hours per vehicle.
    pub b: f64,
    /// Exogenous background flow, vehicles.
    pub h: f64,
    /// Set for edges synthesized to restore connectivity of a sub-network.
    #[serde(default)]
    pub virtual_edge: bool,
}

impl Edge {
    pub fn latency(&self, reactive_flow: f64) -> f64 {
        self.a + self.b * (self.h + reactive_flow)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RoadNetworkDoc {
    schema_version: u32,
    node_ids: Vec<u32>,
    edges: Vec<Edge>,
    charge_nodes: Vec<usize>,
    park_nodes: Vec<usize>,
}

/// Strongly connected road graph with facility locations.
///
/// Nodes are addressed by their position `0..n_nodes()`; `node_ids` keeps the
/// external (e.g. TNTP) label of each position. Facility sets hold positions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RoadNetworkDoc", into = "RoadNetworkDoc")]
pub struct RoadNetwork {
    node_ids: Vec<u32>,
    edges: Vec<Edge>,
    charge_nodes: Vec<usize>,
    park_nodes: Vec<usize>,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
}

impl TryFrom<RoadNetworkDoc> for RoadNetwork {
    type Error = Error;

    fn try_from(doc: RoadNetworkDoc) -> Result<Self> {
        if doc.schema_version != NETWORK_SCHEMA_VERSION {
            return Err(Error::Validation(format!("unsupported network schema version {}", doc.schema_version)));
        }
        RoadNetwork::new(doc.node_ids, doc.edges, doc.charge_nodes, doc.park_nodes)
    }
}

impl From<RoadNetwork> for RoadNetworkDoc {
    fn from(net: RoadNetwork) -> Self {
        RoadNetworkDoc {
            schema_version: NETWORK_SCHEMA_VERSION,
            node_ids: net.node_ids,
            edges: net.edges,
            charge_nodes: net.charge_nodes,
            park_nodes: net.park_nodes,
        }
    }
}

impl RoadNetwork {
    pub fn new(node_ids: Vec<u32>, edges: Vec<Edge>, charge_nodes: Vec<usize>, park_nodes: Vec<usize>) -> Result<Self> {
        let n = node_ids.len();
        if n == 0 {
            return Err(Error::Validation("network has no nodes".into()));
        }
        for (idx, e) in edges.iter().enumerate() {
            if e.tail >= n || e.head >= n {
                return Err(Error::Validation(format!("edge {idx} references a node outside 0..{n}")));
            }
            if e.tail == e.head {
                return Err(Error::Validation(format!("edge {idx} is a self-loop")));
            }
            if !(e.a > 0.0)
                || !(e.b >= 0.0)
                || !(e.h >= 0.0)
                || !e.a.is_finite()
                || !e.b.is_finite()
                || !e.h.is_finite()
            {
                return Err(Error::Validation(format!(
                    "edge {idx} needs a > 0, b >= 0, h >= 0 (got a={}, b={}, h={})",
                    e.a, e.b, e.h
                )));
            }
        }
        for (kind, set) in [("charging", &charge_nodes), ("parking", &park_nodes)] {
            let mut seen = set.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != set.len() {
                return Err(Error::Validation(format!("duplicate {kind} facility")));
            }
            if let Some(bad) = set.iter().find(|&&v| v >= n) {
                return Err(Error::Validation(format!("{kind} facility {bad} is not a node")));
            }
        }
        let mut out_edges = vec![Vec::new(); n];
        let mut in_edges = vec![Vec::new(); n];
        for (idx, e) in edges.iter().enumerate() {
            out_edges[e.tail].push(idx);
            in_edges[e.head].push(idx);
        }
        let net = Self { node_ids, edges, charge_nodes, park_nodes, out_edges, in_edges };
        let unreachable = net.unreachable_pairs(20);
        if !unreachable.is_empty() {
            return Err(Error::Disconnected { pairs: unreachable });
        }
        Ok(net)
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_ids(&self) -> &[u32] {
        &self.node_ids
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, idx: usize) -> &Edge {
        &self.edges[idx]
    }

    pub fn charge_nodes(&self) -> &[usize] {
        &self.charge_nodes
    }

    pub fn park_nodes(&self) -> &[usize] {
        &self.park_nodes
    }

    pub fn out_edges(&self, node: usize) -> &[usize] {
        &self.out_edges[node]
    }

    pub fn in_edges(&self, node: usize) -> &[usize] {
        &self.in_edges[node]
    }

    /// Position of an external node id.
    pub fn position(&self, node_id: u32) -> Option<usize> {
        self.node_ids.iter().position(|&id| id == node_id)
    }

    pub fn is_facility(&self, node: usize) -> bool {
        self.charge_nodes.contains(&node) || self.park_nodes.contains(&node)
    }

    /// Returns a copy with different facility locations.
    pub fn with_facilities(&self, charge_nodes: Vec<usize>, park_nodes: Vec<usize>) -> Result<Self> {
        Self::new(self.node_ids.clone(), self.edges.clone(), charge_nodes, park_nodes)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Up to `limit` ordered pairs (as external ids) with no directed path.
    pub fn unreachable_pairs(&self, limit: usize) -> Vec<(u32, u32)> {
        let n = self.n_nodes();
        let mut pairs = Vec::new();
        let forward = self.reachable_from(0, false);
        let backward = self.reachable_from(0, true);
        if forward.iter().all(|&r| r) && backward.iter().all(|&r| r) {
            return pairs;
        }
        'outer: for s in 0..n {
            let reach = self.reachable_from(s, false);
            for (t, &ok) in reach.iter().enumerate() {
                if !ok {
                    pairs.push((self.node_ids[s], self.node_ids[t]));
                    if pairs.len() >= limit {
                        break 'outer;
                    }
                }
            }
        }
        pairs
    }

    fn reachable_from(&self, start: usize, reverse: bool) -> Vec<bool> {
        let mut seen = vec![false; self.n_nodes()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(v) = queue.pop_front() {
            let adj = if reverse { &self.in_edges[v] } else { &self.out_edges[v] };
            for &e in adj {
                let w = if reverse { self.edges[e].tail } else { self.edges[e].head };
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen
    }
}

/// How the linearization point of each link is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceFlow {
    /// Tangent at the link capacity.
    Capacity,
    Zero,
    /// Tangent at the recorded flow; capacity when the link has none.
    Recorded,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildOptions {
    pub reference_flow: ReferenceFlow,
    /// Share of the recorded flow kept as background flow `h`.
    pub background_flow_fraction: f64,
    /// Multiplier converting file time units to hours (1/60 for minutes).
    pub time_scale: f64,
    /// External ids of the nodes to keep; `None` keeps the whole graph.
    pub node_subset: Option<Vec<u32>>,
    /// Add shortest-path virtual edges when the kept subgraph is not strongly connected.
    pub augment: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            reference_flow: ReferenceFlow::Capacity,
            background_flow_fraction: 0.8,
            time_scale: 1.0,
            node_subset: None,
            augment: true,
        }
    }
}

/// Linearizes every link and assembles a [`RoadNetwork`].
///
/// Facility ids are external (TNTP) ids. When a node subset is requested the
/// induced subgraph is taken; if it is not strongly connected and
/// `augment` is set, virtual edges carrying the aggregate latency of the
/// full-network shortest path are added until it is.
pub fn build_network(
    raw: &TntpNetwork,
    charge_ids: &[u32],
    park_ids: &[u32],
    opts: &BuildOptions,
) -> Result<RoadNetwork> {
    if !(0.0..=1.0).contains(&opts.background_flow_fraction) {
        return Err(Error::Validation(format!(
            "background flow fraction {} outside [0, 1]",
            opts.background_flow_fraction
        )));
    }
    if !(opts.time_scale > 0.0) {
        return Err(Error::Validation("time scale must be positive".into()));
    }

    // Linearize the full network first; virtual edges aggregate over it.
    let mut full_edges = Vec::with_capacity(raw.edges.len());
    for e in &raw.edges {
        let mut scaled = e.clone();
        scaled.free_flow_time *= opts.time_scale;
        let x_ref = match opts.reference_flow {
            ReferenceFlow::Capacity => e.capacity,
            ReferenceFlow::Zero => 0.0,
            ReferenceFlow::Recorded => e.recorded_flow.unwrap_or(e.capacity),
            ReferenceFlow::Fixed(x) => x,
        };
        let lin = linearize_latency(&scaled, x_ref)?;
        full_edges.push(Edge {
            tail: e.tail as usize - 1,
            head: e.head as usize - 1,
            a: lin.a,
            b: lin.b,
            h: opts.background_flow_fraction * e.recorded_flow.unwrap_or(0.0),
            virtual_edge: false,
        });
    }

    let kept: Vec<u32> = match &opts.node_subset {
        Some(subset) => {
            let mut s = subset.clone();
            s.sort_unstable();
            s.dedup();
            if let Some(bad) = s.iter().find(|&&id| id == 0 || id as usize > raw.node_count) {
                return Err(Error::Validation(format!("subset node {bad} does not exist")));
            }
            s
        }
        None => (1..=raw.node_count as u32).collect(),
    };
    let position: HashMap<u32, usize> = kept.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let to_positions = |ids: &[u32], kind: &str| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                position
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("{kind} facility node {id} is not in the network")))
            })
            .collect()
    };
    let charge = to_positions(charge_ids, "charging")?;
    let park = to_positions(park_ids, "parking")?;

    let mut edges: Vec<Edge> = full_edges
        .iter()
        .filter_map(|e| {
            let tail = *position.get(&(e.tail as u32 + 1))?;
            let head = *position.get(&(e.head as u32 + 1))?;
            Some(Edge { tail, head, ..e.clone() })
        })
        .collect();

    if opts.augment {
        augment_connectivity(&mut edges, &kept, &full_edges, raw.node_count)?;
    }

    RoadNetwork::new(kept, edges, charge, park)
}

/// Adds virtual edges between strongly connected components of the kept
/// subgraph until it is strongly connected.
fn augment_connectivity(edges: &mut Vec<Edge>, kept: &[u32], full_edges: &[Edge], full_nodes: usize) -> Result<()> {
    let n = kept.len();
    let mut full_out = vec![Vec::new(); full_nodes];
    for (idx, e) in full_edges.iter().enumerate() {
        full_out[e.tail].push(idx);
    }
    let weights: Vec<f64> = full_edges.iter().map(|e| e.a).collect();

    for _ in 0..n * n + 1 {
        let mut graph: DiGraph<(), ()> = DiGraph::with_capacity(n, edges.len());
        for _ in 0..n {
            graph.add_node(());
        }
        for e in edges.iter() {
            graph.add_edge(NodeIndex::new(e.tail), NodeIndex::new(e.head), ());
        }
        let sccs = tarjan_scc(&graph);
        if sccs.len() <= 1 {
            return Ok(());
        }
        let mut comp = vec![0usize; n];
        for (c, members) in sccs.iter().enumerate() {
            for v in members {
                comp[v.index()] = c;
            }
        }
        let mut has_out = vec![false; sccs.len()];
        let mut has_in = vec![false; sccs.len()];
        for e in edges.iter() {
            if comp[e.tail] != comp[e.head] {
                has_out[comp[e.tail]] = true;
                has_in[comp[e.head]] = true;
            }
        }
        let sink = (0..sccs.len()).find(|&c| !has_out[c]).unwrap_or(0);
        let prefer_sources = (0..sccs.len()).any(|c| c != sink && !has_in[c]);
        let target_ok = |v: usize| comp[v] != sink && (!prefer_sources || !has_in[comp[v]]);

        let mut best: Option<(f64, usize, usize, Vec<usize>)> = None;
        let mut sources: Vec<usize> = sccs[sink].iter().map(|v| v.index()).collect();
        sources.sort_unstable();
        for &u in &sources {
            let (dist, pred) = dijkstra(&full_out, full_edges, &weights, kept[u] as usize - 1);
            for v in (0..n).filter(|&v| target_ok(v)) {
                let d = dist[kept[v] as usize - 1];
                if d.is_finite() && best.as_ref().is_none_or(|b| d < b.0) {
                    let path = trace_path(&pred, full_edges, kept[v] as usize - 1);
                    best = Some((d, u, v, path));
                }
            }
        }
        let (_, u, v, path) = best.ok_or_else(|| Error::Disconnected {
            pairs: vec![(kept[sources[0]], kept[sccs[(sink + 1) % sccs.len()][0].index()])],
        })?;
        let a: f64 = path.iter().map(|&e| full_edges[e].a).sum();
        let b: f64 = path.iter().map(|&e| full_edges[e].b).sum();
        let bh: f64 = path.iter().map(|&e| full_edges[e].b * full_edges[e].h).sum();
        let h = if b > 0.0 { bh / b } else { 0.0 };
        log::debug!("virtual edge {} -> {} over {} links", kept[u], kept[v], path.len());
        edges.push(Edge { tail: u, head: v, a, b, h, virtual_edge: true });
    }
    Err(Error::Validation("virtual edge augmentation did not terminate".into()))
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Single-source shortest paths over `adjacency` (edge lists per node).
/// Returns distances and the predecessor edge of every node.
fn dijkstra(
    adjacency: &[Vec<usize>],
    edges: &[Edge],
    weights: &[f64],
    source: usize,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let n = adjacency.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapItem(0.0, source));
    while let Some(HeapItem(d, v)) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for &e in &adjacency[v] {
            let w = edges[e].head;
            let nd = d + weights[e];
            if nd < dist[w] {
                dist[w] = nd;
                pred[w] = Some(e);
                heap.push(HeapItem(nd, w));
            }
        }
    }
    (dist, pred)
}

fn trace_path(pred: &[Option<usize>], edges: &[Edge], target: usize) -> Vec<usize> {
    let mut path = Vec::new();
    let mut v = target;
    while let Some(e) = pred[v] {
        path.push(e);
        v = edges[e].tail;
    }
    path.reverse();
    path
}

/// Free-flow shortest-path times (sum of `a` along the path).
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    targets: Vec<usize>,
    /// `values[(source, k)]` is the time from `source` to `targets[k]`.
    values: DMatrix<f64>,
}

impl DistanceMatrix {
    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn get(&self, source: usize, target: usize) -> Option<f64> {
        let k = self.targets.iter().position(|&t| t == target)?;
        Some(self.values[(source, k)])
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

pub fn free_flow_distances(network: &RoadNetwork, targets: &[usize]) -> DistanceMatrix {
    let n = network.n_nodes();
    // Dijkstra towards each target on the reversed graph.
    let reversed: Vec<Edge> =
        network.edges().iter().map(|e| Edge { tail: e.head, head: e.tail, ..e.clone() }).collect();
    let mut adjacency = vec![Vec::new(); n];
    for (idx, e) in reversed.iter().enumerate() {
        adjacency[e.tail].push(idx);
    }
    let weights: Vec<f64> = network.edges().iter().map(|e| e.a).collect();
    let mut values = DMatrix::zeros(n, targets.len());
    for (k, &t) in targets.iter().enumerate() {
        let (dist, _) = dijkstra(&adjacency, &reversed, &weights, t);
        for v in 0..n {
            values[(v, k)] = dist[v];
        }
    }
    DistanceMatrix { targets: targets.to_vec(), values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn edge(tail: usize, head: usize, a: f64) -> Edge {
        Edge { tail, head, a, b: 0.01, h: 0.0, virtual_edge: false }
    }

    fn ring(n: usize) -> RoadNetwork {
        let edges = (0..n).map(|i| edge(i, (i + 1) % n, 1.0)).collect();
        RoadNetwork::new((1..=n as u32).collect(), edges, vec![0], vec![1]).unwrap()
    }

    #[test]
    fn three_node_ring_is_valid() {
        let net = ring(3);
        assert_eq!(net.n_edges(), 3);
        assert_eq!(net.charge_nodes(), &[0]);
        assert_eq!(net.park_nodes(), &[1]);
    }

    #[test]
    fn facility_outside_graph_is_rejected() {
        let edges = (0..50).map(|i| edge(i, (i + 1) % 50, 1.0)).collect();
        let res = RoadNetwork::new((1..=50).collect(), edges, vec![0], vec![98]);
        assert!(matches!(res, Err(Error::Validation(_))));
    }

    #[test]
    fn disconnected_graph_lists_pairs() {
        let edges = vec![edge(0, 1, 1.0), edge(1, 0, 1.0), edge(1, 2, 1.0)];
        match RoadNetwork::new(vec![1, 2, 3], edges, vec![], vec![]) {
            Err(Error::Disconnected { pairs }) => assert!(pairs.contains(&(3, 1))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_edge_distance() {
        let edges = vec![Edge { a: 0.2, ..edge(0, 1, 0.2) }, edge(1, 0, 0.7)];
        let net = RoadNetwork::new(vec![1, 2], edges, vec![], vec![]).unwrap();
        let d = free_flow_distances(&net, &[0, 1]);
        assert_relative_eq!(d.get(0, 1).unwrap(), 0.2);
        assert_relative_eq!(d.get(1, 0).unwrap(), 0.7);
        assert_eq!(d.get(0, 0).unwrap(), 0.0);
        assert_eq!(d.get(1, 1).unwrap(), 0.0);
    }

    /// Enumerates every simple path from `s` to `t`.
    fn brute_force_distance(net: &RoadNetwork, s: usize, t: usize) -> f64 {
        fn walk(net: &RoadNetwork, v: usize, t: usize, seen: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if v == t {
                *best = best.min(acc);
                return;
            }
            for &e in net.out_edges(v) {
                let w = net.edge(e).head;
                if !seen[w] {
                    seen[w] = true;
                    walk(net, w, t, seen, acc + net.edge(e).a, best);
                    seen[w] = false;
                }
            }
        }
        let mut seen = vec![false; net.n_nodes()];
        seen[s] = true;
        let mut best = f64::INFINITY;
        walk(net, s, t, &mut seen, 0.0, &mut best);
        best
    }

    #[test]
    fn two_hop_shortcut_beats_direct_edge() {
        // 0 -> 3 directly costs 5, 0 -> 1 -> 3 costs 1.5
        let edges = vec![
            edge(0, 3, 5.0),
            edge(0, 1, 0.5),
            edge(1, 3, 1.0),
            edge(0, 2, 0.3),
            edge(2, 3, 4.0),
            edge(3, 0, 1.0),
            edge(1, 2, 0.1),
            edge(2, 1, 0.3),
        ];
        let net = RoadNetwork::new(vec![1, 2, 3, 4], edges, vec![], vec![]).unwrap();
        let d = free_flow_distances(&net, &[0, 1, 2, 3]);
        for s in 0..4 {
            for t in 0..4 {
                let expected = if s == t { 0.0 } else { brute_force_distance(&net, s, t) };
                assert_relative_eq!(d.get(s, t).unwrap(), expected, epsilon = 1e-12);
            }
        }
        assert_relative_eq!(d.get(0, 3).unwrap(), 1.5, epsilon = 1e-12);
    }

    fn affine_tntp() -> TntpNetwork {
        // 4-node bidirectional ring, p = 1 so BPR is already affine
        let mut edges = Vec::new();
        for (i, (t, h)) in [(1, 2), (2, 3), (3, 4), (4, 1), (2, 1), (3, 2), (4, 3), (1, 4)].iter().enumerate() {
            edges.push(RawTntpEdge {
                tail: *t,
                head: *h,
                capacity: 100.0 + 10.0 * i as f64,
                length: 1.0,
                free_flow_time: 0.1 + 0.05 * i as f64,
                bpr_coefficient: 0.15,
                bpr_power: 1.0,
                recorded_flow: Some(50.0),
            });
        }
        TntpNetwork { node_count: 4, first_thru_node: 1, edges }
    }

    #[test]
    fn affine_file_round_trips_coefficients() {
        let raw = affine_tntp();
        let net = build_network(&raw, &[1], &[3], &BuildOptions::default()).unwrap();
        for (e, r) in net.edges().iter().zip(&raw.edges) {
            assert!((e.a - r.free_flow_time).abs() <= 1e-12);
            assert!((e.b - r.free_flow_time * r.bpr_coefficient / r.capacity).abs() <= 1e-12);
            assert!((e.h - 0.8 * 50.0).abs() <= 1e-12);
        }
        assert_eq!(net.charge_nodes(), &[0]);
        assert_eq!(net.park_nodes(), &[2]);
    }

    #[test]
    fn subset_is_augmented_with_virtual_edges() {
        // keep nodes 1, 2, 4 of a one-way ring 1->2->3->4->1: 2 can only reach 4 through 3
        let mut raw = affine_tntp();
        raw.edges.truncate(4);
        let opts = BuildOptions { node_subset: Some(vec![1, 2, 4]), ..Default::default() };
        let net = build_network(&raw, &[1], &[4], &opts).unwrap();
        let virt: Vec<&Edge> = net.edges().iter().filter(|e| e.virtual_edge).collect();
        assert_eq!(virt.len(), 1);
        let v = virt[0];
        assert_eq!((net.node_ids()[v.tail], net.node_ids()[v.head]), (2, 4));
        let (e23, e34) = (&raw.edges[1], &raw.edges[2]);
        assert_relative_eq!(v.a, e23.free_flow_time + e34.free_flow_time, epsilon = 1e-12);
        let b23 = e23.free_flow_time * 0.15 / e23.capacity;
        let b34 = e34.free_flow_time * 0.15 / e34.capacity;
        assert_relative_eq!(v.b, b23 + b34, epsilon = 1e-12);
        // latency equivalence: b h of the virtual edge equals the path sum
        assert_relative_eq!(v.b * v.h, (b23 + b34) * 40.0, epsilon = 1e-9);

        let opts = BuildOptions { augment: false, ..opts };
        assert!(matches!(build_network(&raw, &[1], &[4], &opts), Err(Error::Disconnected { .. })));
    }

    #[test]
    fn facility_outside_subset_is_rejected() {
        let opts = BuildOptions { node_subset: Some(vec![1, 2, 3]), ..Default::default() };
        assert!(build_network(&affine_tntp(), &[4], &[1], &opts).is_err());
    }

    #[test]
    fn json_round_trip() {
        let net = ring(4);
        let text = net.to_json().unwrap();
        assert!(text.contains("schema_version"));
        let back = RoadNetwork::from_json(&text).unwrap();
        assert_eq!(back.edges(), net.edges());
        assert_eq!(back.in_edges(1), net.in_edges(1));
        let broken = text.replace("\"a\": 1.0", "\"a\": -1.0");
        assert!(RoadNetwork::from_json(&broken).is_err());
    }

    proptest! {
        #[test]
        fn distances_satisfy_triangle_inequality(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let mut edges: Vec<Edge> = (0..n).map(|i| edge(i, (i + 1) % n, rng.gen_range(0.1..2.0))).collect();
            for _ in 0..8 {
                let (u, v) = (rng.gen_range(0..n), rng.gen_range(0..n));
                if u != v {
                    edges.push(edge(u, v, rng.gen_range(0.1..2.0)));
                }
            }
            let net = RoadNetwork::new((1..=n as u32).collect(), edges, vec![], vec![]).unwrap();
            let all: Vec<usize> = (0..n).collect();
            let d = free_flow_distances(&net, &all);
            for u in 0..n {
                for v in 0..n {
                    for w in 0..n {
                        let lhs = d.get(u, w).unwrap();
                        let rhs = d.get(u, v).unwrap() + d.get(v, w).unwrap();
                        prop_assert!(lhs <= rhs + 1e-12);
                    }
                }
            }
        }
    }
}
