//! Homogeneous typed circuit graphs.
//!
//! One node per net and one node per device. Current-flow connections are
//! undirected and stored as two opposing arcs; gate and bulk connections are
//! single arcs from the net into the transistor.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netlist::{DeviceKind, Netlist, Terminals};

pub const NUM_NODE_TYPES: usize = 9;
pub const NUM_EDGE_TYPES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum NodeType {
    Ground = 0,
    Power = 1,
    Net = 2,
    CurrentSource = 3,
    Nmos = 4,
    Pmos = 5,
    Resistor = 6,
    Capacitor = 7,
    Inductor = 8,
}

impl NodeType {
    pub const ALL: [NodeType; NUM_NODE_TYPES] = [
        NodeType::Ground,
        NodeType::Power,
        NodeType::Net,
        NodeType::CurrentSource,
        NodeType::Nmos,
        NodeType::Pmos,
        NodeType::Resistor,
        NodeType::Capacitor,
        NodeType::Inductor,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn is_net(self) -> bool {
        self.code() <= 2
    }

    pub fn is_device(self) -> bool {
        !self.is_net()
    }

    pub fn is_mos(self) -> bool {
        matches!(self, NodeType::Nmos | NodeType::Pmos)
    }

    /// Gate and bulk arc types for a transistor node.
    pub fn control_edges(self) -> Option<(EdgeType, EdgeType)> {
        match self {
            NodeType::Nmos => Some((EdgeType::NmosGate, EdgeType::NmosBulk)),
            NodeType::Pmos => Some((EdgeType::PmosGate, EdgeType::PmosBulk)),
            _ => None,
        }
    }

    fn from_device(kind: DeviceKind) -> Option<Self> {
        Some(match kind {
            DeviceKind::Resistor => NodeType::Resistor,
            DeviceKind::Capacitor => NodeType::Capacitor,
            DeviceKind::Inductor => NodeType::Inductor,
            DeviceKind::CurrentSource => NodeType::CurrentSource,
            DeviceKind::Nmos => NodeType::Nmos,
            DeviceKind::Pmos => NodeType::Pmos,
            DeviceKind::VoltageSupply => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum EdgeType {
    Current = 0,
    NmosGate = 1,
    NmosBulk = 2,
    PmosGate = 3,
    PmosBulk = 4,
}

impl EdgeType {
    pub const ALL: [EdgeType; NUM_EDGE_TYPES] = [
        EdgeType::Current,
        EdgeType::NmosGate,
        EdgeType::NmosBulk,
        EdgeType::PmosGate,
        EdgeType::PmosBulk,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn is_directed(self) -> bool {
        self != EdgeType::Current
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Arc {
    pub src: usize,
    pub dst: usize,
    pub etype: EdgeType,
}

impl Arc {
    pub fn new(src: usize, dst: usize, etype: EdgeType) -> Self {
        Self { src, dst, etype }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("circuit graph is not weakly connected")]
    DisconnectedCircuit,
    #[error("net `{0}` has a single connection and is neither ground nor power")]
    FloatingTerminal(String),
    #[error("device `{0}` has both current-path terminals on one net")]
    DegenerateDevice(String),
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircuitGraph {
    pub name: String,
    pub nodes: Vec<NodeType>,
    pub arcs: Vec<Arc>,
    /// Device parameter per node; `Some` exactly for device nodes.
    pub params: Vec<Option<f64>>,
    pub origin: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FloatingPolicy {
    #[default]
    Warn,
    Error,
}

#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    pub floating: FloatingPolicy,
}

/// Builds a graph, discarding floating-net warnings.
pub fn build_graph(netlist: &Netlist) -> Result<CircuitGraph, GraphError> {
    build_graph_with(netlist, &BuildOptions::default()).map(|(g, _)| g)
}

/// Builds a graph and reports floating nets as warnings (or as an error,
/// per `options.floating`).
pub fn build_graph_with(
    netlist: &Netlist,
    options: &BuildOptions,
) -> Result<(CircuitGraph, Vec<GraphError>), GraphError> {
    let power = netlist.power_nets();
    let ground = netlist.ground();

    let mut nodes: Vec<NodeType> = (0..netlist.nets.len())
        .map(|i| {
            if Some(i) == ground {
                NodeType::Ground
            } else if power.contains(&i) {
                NodeType::Power
            } else {
                NodeType::Net
            }
        })
        .collect();
    let mut params = vec![None; nodes.len()];
    let mut arcs = Vec::new();
    let mut uses = vec![0usize; netlist.nets.len()];

    for device in &netlist.devices {
        for net in device.terminals.nets() {
            uses[net] += 1;
        }
        let Some(node_type) = NodeType::from_device(device.kind) else {
            continue;
        };
        let id = nodes.len();
        nodes.push(node_type);
        params.push(Some(device.param));
        match device.terminals {
            Terminals::Two { a, b } => {
                if a == b {
                    return Err(GraphError::DegenerateDevice(device.name.clone()));
                }
                push_current(&mut arcs, a, id);
                push_current(&mut arcs, b, id);
            }
            Terminals::Mos { drain, gate, source, bulk } => {
                if drain == source {
                    return Err(GraphError::DegenerateDevice(device.name.clone()));
                }
                let (gate_edge, bulk_edge) = node_type.control_edges().expect("mos node");
                push_current(&mut arcs, drain, id);
                push_current(&mut arcs, source, id);
                arcs.push(Arc::new(gate, id, gate_edge));
                arcs.push(Arc::new(bulk, id, bulk_edge));
            }
            Terminals::Supply { .. } => unreachable!("supplies are not device nodes"),
        }
    }

    let graph = CircuitGraph {
        name: netlist.name.clone(),
        nodes,
        arcs,
        params,
        origin: netlist.name.clone(),
    };
    if !graph.is_weakly_connected() {
        return Err(GraphError::DisconnectedCircuit);
    }

    let mut warnings = Vec::new();
    for (i, &count) in uses.iter().enumerate() {
        if count == 1 && graph.nodes[i] == NodeType::Net {
            let err = GraphError::FloatingTerminal(netlist.nets[i].clone());
            match options.floating {
                FloatingPolicy::Warn => warnings.push(err),
                FloatingPolicy::Error => return Err(err),
            }
        }
    }
    Ok((graph, warnings))
}

/// Appends both directions of a current-flow connection.
pub(crate) fn push_current(arcs: &mut Vec<Arc>, net: usize, device: usize) {
    arcs.push(Arc::new(net, device, EdgeType::Current));
    arcs.push(Arc::new(device, net, EdgeType::Current));
}

impl CircuitGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.len()
    }

    pub fn device_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_device()).collect()
    }

    /// Histogram of node-type codes.
    pub fn type_counts(&self) -> [usize; NUM_NODE_TYPES] {
        let mut counts = [0; NUM_NODE_TYPES];
        for t in &self.nodes {
            counts[t.code()] += 1;
        }
        counts
    }

    /// Net endpoints of a device's current-flow path, one entry per
    /// connection, taken from the device's outgoing type-0 arcs.
    pub fn current_neighbors(&self, device: usize) -> Vec<usize> {
        self.arcs
            .iter()
            .filter(|a| a.src == device && a.etype == EdgeType::Current)
            .map(|a| a.dst)
            .collect()
    }

    /// Source net of the arc of type `etype` into `device`.
    pub fn control_source(&self, device: usize, etype: EdgeType) -> Option<usize> {
        self.arcs
            .iter()
            .find(|a| a.dst == device && a.etype == etype)
            .map(|a| a.src)
    }

    pub fn is_weakly_connected(&self) -> bool {
        let n = self.nodes.len();
        if n == 0 {
            return true;
        }
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut components = n;
        for a in &self.arcs {
            let (ra, rb) = (find(&mut parent, a.src), find(&mut parent, a.dst));
            if ra != rb {
                parent[ra] = rb;
                components -= 1;
            }
        }
        components == 1
    }

    /// Checks every structural invariant of a valid circuit graph.
    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |msg: String| Err(GraphError::Invariant(msg));
        let n = self.nodes.len();
        if self.params.len() != n {
            return bad(format!("{} params for {} nodes", self.params.len(), n));
        }
        for (i, (t, p)) in self.nodes.iter().zip(&self.params).enumerate() {
            match (t.is_device(), p) {
                (true, Some(v)) if *v > 0.0 && v.is_finite() => {}
                (true, _) => return bad(format!("device node {i} lacks a positive parameter")),
                (false, Some(_)) => return bad(format!("net node {i} carries a parameter")),
                (false, None) => {}
            }
        }

        let mut current_pairs: BTreeMap<(usize, usize), i64> = BTreeMap::new();
        let mut current_in = vec![0usize; n];
        let mut control_in: Vec<BTreeMap<EdgeType, usize>> = vec![BTreeMap::new(); n];
        for a in &self.arcs {
            if a.src >= n || a.dst >= n {
                return bad(format!("arc {a:?} references a missing node"));
            }
            if a.src == a.dst {
                return bad(format!("self-loop at node {}", a.src));
            }
            let (s, d) = (self.nodes[a.src], self.nodes[a.dst]);
            match a.etype {
                EdgeType::Current => {
                    if s.is_net() == d.is_net() {
                        return bad(format!("current arc {a:?} does not alternate net/device"));
                    }
                    *current_pairs.entry((a.src.min(a.dst), a.src.max(a.dst))).or_default() +=
                        if a.src < a.dst { 1 } else { -1 };
                    current_in[a.dst] += 1;
                }
                et => {
                    let allowed = d.control_edges().is_some_and(|(g, b)| g == et || b == et);
                    if !allowed || !s.is_net() {
                        return bad(format!("control arc {a:?} must run from a net into a matching transistor"));
                    }
                    *control_in[a.dst].entry(et).or_default() += 1;
                }
            }
        }
        if let Some((pair, _)) = current_pairs.iter().find(|(_, &bal)| bal != 0) {
            return bad(format!("current connection {pair:?} is not stored as an arc pair"));
        }
        for (i, t) in self.nodes.iter().enumerate() {
            if !t.is_device() {
                continue;
            }
            if current_in[i] != 2 {
                return bad(format!("device node {i} has {} current connections", current_in[i]));
            }
            let nets = self.current_neighbors(i);
            if nets.len() == 2 && nets[0] == nets[1] {
                return bad(format!("device node {i} has both terminals on one net"));
            }
            match t.control_edges() {
                Some((g, b)) => {
                    if control_in[i].get(&g) != Some(&1) || control_in[i].get(&b) != Some(&1) {
                        return bad(format!("transistor node {i} needs one gate and one bulk arc"));
                    }
                }
                None => {
                    if !control_in[i].is_empty() {
                        return bad(format!("device node {i} has control arcs"));
                    }
                }
            }
        }
        if !self.is_weakly_connected() {
            return Err(GraphError::DisconnectedCircuit);
        }
        Ok(())
    }

    /// One-hot node and arc features.
    pub fn init_features(&self) -> FeatureInit {
        let mut node_onehots = Array2::zeros((self.nodes.len(), NUM_NODE_TYPES));
        for (i, t) in self.nodes.iter().enumerate() {
            node_onehots[[i, t.code()]] = 1.0;
        }
        let mut edge_onehots = Array2::zeros((self.arcs.len(), NUM_EDGE_TYPES));
        for (i, a) in self.arcs.iter().enumerate() {
            edge_onehots[[i, a.etype.code()]] = 1.0;
        }
        FeatureInit { node_onehots, edge_onehots }
    }

    /// Applies a node relabeling: node `i` moves to position `perm[i]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> CircuitGraph {
        assert_eq!(perm.len(), self.nodes.len());
        let mut nodes = vec![NodeType::Ground; perm.len()];
        let mut params = vec![None; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            nodes[p] = self.nodes[i];
            params[p] = self.params[i];
        }
        let arcs = self
            .arcs
            .iter()
            .map(|a| Arc::new(perm[a.src], perm[a.dst], a.etype))
            .collect();
        CircuitGraph { name: self.name.clone(), nodes, arcs, params, origin: self.origin.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&GraphJson::from(self)).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let raw: GraphJson =
            serde_json::from_str(text).map_err(|e| GraphError::SchemaError(e.to_string()))?;
        raw.try_into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureInit {
    pub node_onehots: Array2<f64>,
    pub edge_onehots: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphJson {
    name: String,
    nodes: Vec<usize>,
    arcs: Vec<[usize; 3]>,
    params: BTreeMap<usize, f64>,
    origin: String,
}

impl From<&CircuitGraph> for GraphJson {
    fn from(g: &CircuitGraph) -> Self {
        GraphJson {
            name: g.name.clone(),
            nodes: g.nodes.iter().map(|t| t.code()).collect(),
            arcs: g.arcs.iter().map(|a| [a.src, a.dst, a.etype.code()]).collect(),
            params: g
                .params
                .iter()
                .enumerate()
                .filter_map(|(i, p)| p.map(|v| (i, v)))
                .collect(),
            origin: g.origin.clone(),
        }
    }
}

impl TryFrom<GraphJson> for CircuitGraph {
    type Error = GraphError;

    fn try_from(raw: GraphJson) -> Result<Self, GraphError> {
        let schema = |m: String| GraphError::SchemaError(m);
        let nodes = raw
            .nodes
            .iter()
            .map(|&c| NodeType::from_code(c).ok_or_else(|| schema(format!("node type {c} out of range"))))
            .collect::<Result<Vec<_>, _>>()?;
        let n = nodes.len();
        let arcs = raw
            .arcs
            .iter()
            .map(|&[s, d, t]| {
                let etype = EdgeType::from_code(t).ok_or_else(|| schema(format!("edge type {t} out of range")))?;
                if s >= n || d >= n {
                    return Err(schema(format!("arc [{s}, {d}, {t}] references a missing node")));
                }
                Ok(Arc::new(s, d, etype))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut params = vec![None; n];
        for (i, v) in raw.params {
            if i >= n {
                return Err(schema(format!("parameter for missing node {i}")));
            }
            params[i] = Some(v);
        }
        Ok(CircuitGraph { name: raw.name, nodes, arcs, params, origin: raw.origin })
    }
}
