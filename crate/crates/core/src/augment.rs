//! Positive (function-preserving) and negative (function-perturbing) graph
//! augmentation, dataset generation and the pair relation index.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Arc, CircuitGraph, EdgeType, GraphError, NodeType};

pub const DEFAULT_MAX_CHAIN: usize = 5;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RELATIONS_FILE: &str = "relations.json";

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("graph has no device nodes")]
    NoDeviceNodes,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("max_chain must be at least 1")]
    ZeroMaxChain,
    #[error("augmented graph broke an invariant: {0}")]
    Graph(#[from] GraphError),
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugKind {
    PosParallel,
    PosSeries,
    NegReplace,
}

impl AugKind {
    pub fn is_positive(self) -> bool {
        !matches!(self, AugKind::NegReplace)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugStep {
    pub kind: AugKind,
    /// Device node index in the graph the step was applied to.
    pub target: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    Original,
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub id: String,
    pub origin_id: String,
    pub graph: CircuitGraph,
    pub chain: Vec<AugStep>,
    pub polarity: Polarity,
}

impl AugmentedSample {
    pub fn original(graph: CircuitGraph) -> Self {
        let origin_id = graph.name.clone();
        Self { id: origin_id.clone(), origin_id, graph, chain: Vec::new(), polarity: Polarity::Original }
    }

    fn polarity_of(chain: &[AugStep]) -> Polarity {
        if chain.is_empty() {
            Polarity::Original
        } else if chain.iter().all(|s| s.kind.is_positive()) {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }
}

fn pick_device<R: Rng + ?Sized>(graph: &CircuitGraph, rng: &mut R) -> Result<usize, AugmentError> {
    graph.device_nodes().choose(rng).copied().ok_or(AugmentError::NoDeviceNodes)
}

fn add_node(graph: &mut CircuitGraph, t: NodeType, param: Option<f64>) -> usize {
    graph.nodes.push(t);
    graph.params.push(param);
    graph.nodes.len() - 1
}

/// Moves the current connection of `device` from net `old` to net `new`.
fn rewire(graph: &mut CircuitGraph, device: usize, old: usize, new: usize) {
    for a in graph.arcs.iter_mut().filter(|a| a.etype == EdgeType::Current) {
        if a.src == device && a.dst == old {
            a.dst = new;
        } else if a.src == old && a.dst == device {
            a.src = new;
        }
    }
}

/// Adds a device of type `t` across nets `a` and `b`. MOS devices also get
/// gate and bulk arcs from `control`.
fn add_device(
    graph: &mut CircuitGraph,
    t: NodeType,
    param: Option<f64>,
    a: usize,
    b: usize,
    control: Option<(usize, usize)>,
) -> usize {
    let dev = add_node(graph, t, param);
    crate::graph::push_current(&mut graph.arcs, a, dev);
    crate::graph::push_current(&mut graph.arcs, b, dev);
    if let (Some((gate_t, bulk_t)), Some((gate, bulk))) = (t.control_edges(), control) {
        graph.arcs.push(Arc::new(gate, dev, gate_t));
        graph.arcs.push(Arc::new(bulk, dev, bulk_t));
    }
    dev
}

/// Gate and bulk source nets of a MOS device.
fn control_nets(graph: &CircuitGraph, device: usize) -> Option<(usize, usize)> {
    let (gate_t, bulk_t) = graph.nodes[device].control_edges()?;
    Some((graph.control_source(device, gate_t)?, graph.control_source(device, bulk_t)?))
}

/// Applies one positive step to `target` in place.
pub fn apply_positive(graph: &mut CircuitGraph, target: usize, series: bool, neighbor_pick: usize) -> AugStep {
    let t = graph.nodes[target];
    let param = graph.params[target];
    let ends = graph.current_neighbors(target);
    let control = control_nets(graph, target);
    if series {
        // MOS: drain side (first current terminal); two-terminal: the chosen end.
        let end = if t.is_mos() { 0 } else { neighbor_pick % ends.len() };
        let near = ends[end];
        let mid = add_node(graph, NodeType::Net, None);
        rewire(graph, target, near, mid);
        add_device(graph, t, param, near, mid, control);
        AugStep { kind: AugKind::PosSeries, target, detail: format!("series_{}", end_name(t, end)) }
    } else {
        add_device(graph, t, param, ends[0], ends[1], control);
        AugStep { kind: AugKind::PosParallel, target, detail: "parallel".into() }
    }
}

fn end_name(t: NodeType, end: usize) -> &'static str {
    match (t.is_mos(), end) {
        (true, _) => "drain",
        (false, 0) => "first",
        (false, _) => "second",
    }
}

/// Applies one negative replacement to `target` in place. `coin` picks the
/// capacitor (true) or inductor (false) replacement for resistors.
pub fn apply_negative(graph: &mut CircuitGraph, target: usize, coin: bool) -> AugStep {
    let t = graph.nodes[target];
    let (replacement, detail) = match t {
        NodeType::Capacitor => (Some(NodeType::Inductor), "c_to_l"),
        NodeType::Inductor => (Some(NodeType::Capacitor), "l_to_c"),
        NodeType::Resistor if coin => (Some(NodeType::Capacitor), "r_to_c"),
        NodeType::Resistor => (Some(NodeType::Inductor), "r_to_l"),
        NodeType::CurrentSource => (Some(NodeType::Resistor), "i_to_r"),
        NodeType::Nmos => (None, "nmos_add_pmos_pair"),
        NodeType::Pmos => (None, "pmos_add_nmos_pair"),
        _ => unreachable!("target is a device node"),
    };
    if let Some(r) = replacement {
        graph.nodes[target] = r;
    } else {
        let counterpart = if t == NodeType::Nmos { NodeType::Pmos } else { NodeType::Nmos };
        let param = graph.params[target];
        let control = control_nets(graph, target);
        let ends = graph.current_neighbors(target);
        let (drain, source) = (ends[0], ends[1]);
        let mid = add_node(graph, NodeType::Net, None);
        rewire(graph, target, drain, mid);
        // Series counterpart between the old drain and the original; parallel
        // counterpart across the original.
        add_device(graph, counterpart, param, drain, mid, control);
        add_device(graph, counterpart, param, mid, source, control);
    }
    AugStep { kind: AugKind::NegReplace, target, detail: detail.into() }
}

/// Clones a random device in parallel or in series.
pub fn augment_positive<R: Rng + ?Sized>(graph: &CircuitGraph, rng: &mut R) -> Result<(CircuitGraph, AugStep), AugmentError> {
    let target = pick_device(graph, rng)?;
    let series = rng.gen_bool(0.5);
    let pick = rng.gen_range(0..2);
    let mut out = graph.clone();
    let step = apply_positive(&mut out, target, series, pick);
    Ok((out, step))
}

/// Replaces a random device subgraph by its rule-table counterpart.
pub fn augment_negative<R: Rng + ?Sized>(graph: &CircuitGraph, rng: &mut R) -> Result<(CircuitGraph, AugStep), AugmentError> {
    let target = pick_device(graph, rng)?;
    let coin = rng.gen_bool(0.5);
    let mut out = graph.clone();
    let step = apply_negative(&mut out, target, coin);
    Ok((out, step))
}

fn extend_positive<R: Rng + ?Sized>(
    base: &AugmentedSample,
    steps: usize,
    rng: &mut R,
) -> Result<(CircuitGraph, Vec<AugStep>), AugmentError> {
    let mut graph = base.graph.clone();
    let mut chain = base.chain.clone();
    for _ in 0..steps {
        let (g, step) = augment_positive(&graph, rng)?;
        graph = g;
        chain.push(step);
    }
    Ok((graph, chain))
}

fn origin_samples(
    origin: &CircuitGraph,
    n_pos: usize,
    n_neg: usize,
    max_chain: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AugmentedSample>, AugmentError> {
    let name = origin.name.clone();
    let mut original = AugmentedSample::original(origin.clone());
    original.graph.origin = name.clone();
    let mut samples = vec![original];

    let finish = |graph: CircuitGraph, chain: Vec<AugStep>, id: String| -> Result<AugmentedSample, AugmentError> {
        let mut graph = graph;
        graph.name = id.clone();
        graph.origin = name.clone();
        graph.validate()?;
        let polarity = AugmentedSample::polarity_of(&chain);
        Ok(AugmentedSample { id, origin_id: name.clone(), graph, chain, polarity })
    };

    for i in 0..n_pos {
        let len = rng.gen_range(1..=max_chain);
        let bases: Vec<usize> = (0..samples.len()).filter(|&k| samples[k].chain.len() < len).collect();
        let base = &samples[*bases.choose(rng).expect("original is always a base")];
        let (graph, chain) = extend_positive(base, len - base.chain.len(), rng)?;
        samples.push(finish(graph, chain, format!("{name}-p{i:05}"))?);
    }
    let positives = samples.len();
    for i in 0..n_neg {
        let prefix = rng.gen_range(0..max_chain);
        let bases: Vec<usize> = (0..positives).filter(|&k| samples[k].chain.len() <= prefix).collect();
        let base = &samples[*bases.choose(rng).expect("original is always a base")];
        let (graph, mut chain) = extend_positive(base, prefix - base.chain.len(), rng)?;
        let (graph, step) = augment_negative(&graph, rng)?;
        chain.push(step);
        samples.push(finish(graph, chain, format!("{name}-n{i:05}"))?);
    }
    Ok(samples)
}

/// Originals plus `n_pos` positive and `n_neg` negative samples per origin.
/// Each origin draws from its own stream of the seeded generator, so the
/// result does not depend on thread scheduling.
pub fn generate_dataset(
    corpus: &[CircuitGraph],
    n_pos: usize,
    n_neg: usize,
    max_chain: usize,
    seed: u64,
) -> Result<(Vec<AugmentedSample>, RelationIndex), AugmentError> {
    if corpus.is_empty() {
        return Err(AugmentError::EmptyCorpus);
    }
    if max_chain == 0 {
        return Err(AugmentError::ZeroMaxChain);
    }
    let per_origin: Vec<Vec<AugmentedSample>> = corpus
        .par_iter()
        .enumerate()
        .map(|(k, g)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            origin_samples(g, n_pos, n_neg, max_chain, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let samples: Vec<AugmentedSample> = per_origin.into_iter().flatten().collect();
    let index = RelationIndex::new(&samples);
    Ok((samples, index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    Positive,
    Negative,
    NonEqual,
}

/// Origin group and polarity of every sample, with per-origin member lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationIndex {
    /// Origin group of each sample.
    pub origin: Vec<usize>,
    pub polarity: Vec<Polarity>,
    pub origin_names: Vec<String>,
    /// Sample indices of each origin group.
    pub groups: Vec<Vec<usize>>,
}

impl RelationIndex {
    pub fn new(samples: &[AugmentedSample]) -> Self {
        Self::from_parts(samples.iter().map(|s| (s.origin_id.as_str(), s.polarity)))
    }

    pub fn from_parts<'a>(parts: impl IntoIterator<Item = (&'a str, Polarity)>) -> Self {
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        let mut origin_names = Vec::new();
        let mut origin = Vec::new();
        let mut polarity = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, (name, pol)) in parts.into_iter().enumerate() {
            let g = *ids.entry(name).or_insert_with(|| {
                origin_names.push(name.to_string());
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(i);
            origin.push(g);
            polarity.push(pol);
        }
        Self { origin, polarity, origin_names, groups }
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn relation(&self, a: usize, b: usize) -> Relation {
        if self.origin[a] != self.origin[b] {
            Relation::NonEqual
        } else if self.polarity[a] == Polarity::Negative || self.polarity[b] == Polarity::Negative {
            Relation::Negative
        } else {
            Relation::Positive
        }
    }

    /// Positively related samples of `i`, excluding `i` itself.
    pub fn positive_set(&self, i: usize) -> Vec<usize> {
        self.same_origin(i, Relation::Positive)
    }

    /// Negatively related samples of `i`, excluding `i` itself.
    pub fn negative_set(&self, i: usize) -> Vec<usize> {
        self.same_origin(i, Relation::Negative)
    }

    /// Number of positively related samples of `i`.
    pub fn n_pos(&self, i: usize) -> usize {
        self.positive_set(i).len()
    }

    /// Number of non-equal samples of `i`.
    pub fn n_non_equal(&self, i: usize) -> usize {
        self.len() - self.groups[self.origin[i]].len()
    }

    fn same_origin(&self, i: usize, rel: Relation) -> Vec<usize> {
        self.groups[self.origin[i]].iter().copied().filter(|&j| j != i && self.relation(i, j) == rel).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub origin_id: String,
    pub polarity: Polarity,
    pub chain: Vec<AugStep>,
    pub graph_file: String,
}

/// Writes `graphs/<id>.json`, the manifest and the relation index under `dir`.
pub fn write_dataset(dir: &Path, samples: &[AugmentedSample], index: &RelationIndex) -> Result<(), AugmentError> {
    let graphs = dir.join("graphs");
    fs::create_dir_all(&graphs)?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let file = format!("graphs/{}.json", s.id);
        fs::write(dir.join(&file), s.graph.to_json())?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            origin_id: s.origin_id.clone(),
            polarity: s.polarity,
            chain: s.chain.clone(),
            graph_file: file,
        });
    }
    let manifest = serde_json::to_string_pretty(&records).map_err(|e| AugmentError::Manifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    let relations = serde_json::to_string_pretty(index).map_err(|e| AugmentError::Manifest(e.to_string()))?;
    fs::write(dir.join(RELATIONS_FILE), relations)?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]; the relation index is
/// rebuilt from the manifest.
pub fn read_dataset(dir: &Path) -> Result<(Vec<AugmentedSample>, RelationIndex), AugmentError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let records: Vec<ManifestRecord> =
        serde_json::from_str(&text).map_err(|e| AugmentError::Manifest(e.to_string()))?;
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let graph = CircuitGraph::from_json(&fs::read_to_string(dir.join(&r.graph_file))?)?;
        if AugmentedSample::polarity_of(&r.chain) != r.polarity {
            return Err(AugmentError::Manifest(format!("{}: polarity does not match chain", r.id)));
        }
        samples.push(AugmentedSample { id: r.id, origin_id: r.origin_id, graph, chain: r.chain, polarity: r.polarity });
    }
    let index = RelationIndex::new(&samples);
    Ok((samples, index))
}
