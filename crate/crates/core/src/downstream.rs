//! Encoder–decoder model for graph-level prediction: a frozen pretrained
//! DICE branch beside a trainable branch, fused and refined by a series GNN,
//! then decoded together with per-device parameter features.
//!
//! Task 1 compares a target circuit with two others (three-way
//! classification over graph embeddings). Tasks 2 and 3 regress simulation
//! targets from device parameters, ingested from CSV.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentedSample;
use crate::autodiff::{Adam, Bound, Checkpoint, Matrix, ParamStore, Tape, TensorError, Var};
use crate::corpus::{Label, LabelFile, Split};
use crate::encoders::{init_mlp, mlp, readout, Arch, Encoded, EncoderError, EncoderSpec, GraphBatch, Mode, Norm};
use crate::graph::{CircuitGraph, GraphError, NUM_NODE_TYPES};

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("d_D = {0} needs a pretrained checkpoint")]
    MissingCheckpoint(usize),
    #[error("checkpoint holds a depth-{found} encoder but d_D = {expected}")]
    FrozenDepth { expected: usize, found: usize },
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("node {0} has a non-positive device parameter")]
    NonPositiveParam(usize),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("loss became non-finite at epoch {epoch}")]
    NanLoss { epoch: usize },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, DownstreamError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Concatenate node (and edge) features of both branches, then project
    /// linearly back to the hidden width.
    ConcatLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_d: usize,
    pub d_p: usize,
    pub d_s: usize,
    pub hidden: usize,
    pub fusion: Fusion,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_d: 2, d_p: 0, d_s: 2, hidden: 512, fusion: Fusion::ConcatLinear }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub dropout: f64,
    /// Normalization inside the regression decoder MLPs.
    pub norm: Norm,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { hidden: 256, dropout: 0.3, norm: Norm::Layer }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TaskTrainConfig {
    pub fn task1() -> Self {
        Self { lr: 1e-5, epochs: 20000, batch_size: 50, seed: 0 }
    }

    pub fn task2() -> Self {
        Self { lr: 1e-4, epochs: 300, batch_size: 2048, seed: 0 }
    }

    pub fn task3() -> Self {
        Self { lr: 1e-4, epochs: 300, batch_size: 1024, seed: 0 }
    }
}

/// Pretrained encoder used as the frozen branch.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    pub spec: EncoderSpec,
    pub params: ParamStore,
}

impl FrozenEncoder {
    /// Reads the encoder spec from the checkpoint header's `encoder` field.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec_value = ckpt.header.get("encoder").ok_or_else(|| DownstreamError::Header("missing `encoder`".into()))?;
        let spec: EncoderSpec =
            serde_json::from_value(spec_value.clone()).map_err(|e| DownstreamError::Header(e.to_string()))?;
        let params = ParamStore::from_checkpoint(ckpt)?;
        spec.check_params(&params, "")?;
        Ok(Self { spec, params })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Three-way comparison over concatenated graph embeddings.
    Similarity,
    /// Node-level decoder with parameter features, `out_dim` targets.
    Regression { out_dim: usize },
}

const PAR: &str = "par.";
const SER: &str = "ser.";
const DEC_NODE: &str = "dec.node";
const DEC_HEAD: &str = "dec.head";
const SIM_HEAD: &str = "head";

/// Trainable weights plus the optional frozen branch.
#[derive(Debug, Clone)]
pub struct DownstreamModel {
    pub config: EncoderConfig,
    pub decoder: DecoderConfig,
    pub head: Head,
    pub frozen: Option<FrozenEncoder>,
    pub params: ParamStore,
    /// Per-type standardization of the device rows of the parameter
    /// encoding; the identity until fitted.
    pub param_scale: Standardizer,
}

impl DownstreamModel {
    pub fn new<R: Rng + ?Sized>(
        config: EncoderConfig,
        decoder: DecoderConfig,
        head: Head,
        frozen: Option<FrozenEncoder>,
        rng: &mut R,
    ) -> Result<Self> {
        let frozen = match (config.d_d, frozen) {
            (0, _) => None,
            (d, None) => return Err(DownstreamError::MissingCheckpoint(d)),
            (d, Some(f)) if f.spec.depth != d => {
                return Err(DownstreamError::FrozenDepth { expected: d, found: f.spec.depth })
            }
            (_, Some(f)) => Some(f),
        };
        let h = config.hidden;
        let mut params = ParamStore::new();
        params.absorb(PAR, Self::branch_spec(&config, config.d_p).init_params(rng));
        if let Some(f) = &frozen {
            let width = f.spec.hidden + h;
            params.insert_glorot("fuse.node.w", width, h, rng);
            params.insert_zeros("fuse.node.b", 1, h);
            params.insert_glorot("fuse.edge.w", width, h, rng);
            params.insert_zeros("fuse.edge.b", 1, h);
        }
        Self::branch_spec(&config, config.d_s).init_layer_params(&mut params, SER, rng);
        let dh = decoder.hidden;
        match head {
            Head::Similarity => init_mlp(&mut params, SIM_HEAD, 3 * h, dh, 3, rng),
            Head::Regression { out_dim } => {
                init_mlp(&mut params, DEC_NODE, h + NUM_NODE_TYPES, dh, dh, rng);
                init_mlp(&mut params, DEC_HEAD, dh, dh, out_dim, rng);
            }
        }
        let param_scale = Standardizer::identity(NUM_NODE_TYPES);
        Ok(Self { config, decoder, head, frozen, params, param_scale })
    }

    fn branch_spec(config: &EncoderConfig, depth: usize) -> EncoderSpec {
        EncoderSpec { arch: Arch::Dice, depth, hidden: config.hidden, dropout: 0.0, ..EncoderSpec::default() }
    }

    /// Binds the trainable store (as leaves) and the frozen store (as
    /// constants) onto `tape`.
    pub fn bind(&self, tape: &mut Tape) -> (Bound, Option<Bound>) {
        let trainable = self.params.bind(tape, true);
        let frozen = self.frozen.as_ref().map(|f| f.params.bind(tape, false));
        (trainable, frozen)
    }

    /// Encoder pass over `batch`. The frozen branch always runs in eval mode
    /// and its outputs are detached.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        frozen_bound: Option<&Bound>,
        batch: &GraphBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Encoded> {
        let par = Self::branch_spec(&self.config, self.config.d_p);
        let (mut nodes, mut edges) = par.input_projection(tape, bound, PAR, batch, mode, rng)?;
        (nodes, edges) = par.message_layers(tape, bound, PAR, batch, nodes, edges, mode, rng)?;

        if let (Some(f), Some(fb)) = (&self.frozen, frozen_bound) {
            let out = f.spec.encode(tape, fb, "", batch, Mode::Eval, rng)?;
            let fn_ = tape.stop_gradient(out.nodes);
            let fe = tape.stop_gradient(out.edges);
            nodes = fuse(tape, bound, "fuse.node", fn_, nodes)?;
            edges = fuse(tape, bound, "fuse.edge", fe, edges)?;
        }

        let ser = Self::branch_spec(&self.config, self.config.d_s);
        (nodes, edges) = ser.message_layers(tape, bound, SER, batch, nodes, edges, mode, rng)?;
        let graphs = readout(tape, batch, nodes, edges)?;
        Ok(Encoded { nodes, edges, graphs })
    }

    /// Regression decoder: per-node MLP over encoder output and parameter
    /// features, sum-pooled per graph, then the output MLP.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        encoded: &Encoded,
        param_rows: &Matrix,
        batch: &GraphBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let p = tape.constant(param_rows.clone());
        let x = tape.concat_cols(&[encoded.nodes, p])?;
        let d = self.decoder;
        let h = mlp(tape, bound, DEC_NODE, x, d.norm, d.dropout, mode, rng)?;
        let pooled = tape.segment_sum(h, &batch.node_graph, batch.num_graphs)?;
        Ok(mlp(tape, bound, DEC_HEAD, pooled, d.norm, d.dropout, mode, rng)?)
    }

    /// Similarity logits for triplets of graph-embedding rows.
    pub fn similarity_logits<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        graphs: Var,
        triplets: &[(usize, usize, usize)],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let t: Vec<usize> = triplets.iter().map(|x| x.0).collect();
        let a: Vec<usize> = triplets.iter().map(|x| x.1).collect();
        let b: Vec<usize> = triplets.iter().map(|x| x.2).collect();
        let gt = tape.gather_rows(graphs, &t)?;
        let ga = tape.gather_rows(graphs, &a)?;
        let gb = tape.gather_rows(graphs, &b)?;
        let x = tape.concat_cols(&[gt, ga, gb])?;
        Ok(mlp(tape, bound, SIM_HEAD, x, Norm::Layer, self.decoder.dropout, mode, rng)?)
    }

    /// Eval-mode graph vectors from the full encoder, one row per graph.
    pub fn embed(&self, graphs: &[&CircuitGraph]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let (bound, frozen) = self.bind(&mut tape);
        let batch = GraphBatch::new(graphs);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let enc = self.encode(&mut tape, &bound, frozen.as_ref(), &batch, Mode::Eval, &mut rng)?;
        Ok(tape.value(enc.graphs).clone())
    }
}

fn fuse(tape: &mut Tape, bound: &Bound, name: &str, frozen: Var, trainable: Var) -> Result<Var> {
    let cat = tape.concat_cols(&[frozen, trainable])?;
    let w = bound.get(&format!("{name}.w"))?;
    let b = bound.get(&format!("{name}.b"))?;
    let y = tape.matmul(cat, w)?;
    Ok(tape.add_row(y, b)?)
}

/// One-hot node type scaled by `-ln(param)` for device nodes; zero rows for
/// nets.
pub fn encode_params(graph: &CircuitGraph) -> Result<Matrix> {
    let mut out = Matrix::zeros((graph.num_nodes(), NUM_NODE_TYPES));
    for (v, (t, p)) in graph.nodes.iter().zip(&graph.params).enumerate() {
        if let Some(p) = p {
            if !(*p > 0.0) || !p.is_finite() {
                return Err(DownstreamError::NonPositiveParam(v));
            }
            out[[v, t.code()]] = -p.ln();
        }
    }
    Ok(out)
}

/// Stacked parameter encodings for the graphs of a batch.
pub fn encode_params_batch(graphs: &[&CircuitGraph]) -> Result<Matrix> {
    let blocks = graphs.iter().map(|g| encode_params(g)).collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    Ok(ndarray::concatenate(ndarray::Axis(0), &views).unwrap_or_else(|_| Matrix::zeros((0, NUM_NODE_TYPES))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparison {
    First,
    Second,
    Equal,
}

impl Comparison {
    pub fn class(self) -> usize {
        match self {
            Comparison::First => 0,
            Comparison::Second => 1,
            Comparison::Equal => 2,
        }
    }
}

/// Which of `a` and `b` shares more labels with `target`.
pub fn task1_truth(target: &std::collections::BTreeSet<Label>, a: &std::collections::BTreeSet<Label>, b: &std::collections::BTreeSet<Label>) -> Comparison {
    let sa = target.intersection(a).count();
    let sb = target.intersection(b).count();
    match sa.cmp(&sb) {
        std::cmp::Ordering::Greater => Comparison::First,
        std::cmp::Ordering::Less => Comparison::Second,
        std::cmp::Ordering::Equal => Comparison::Equal,
    }
}

/// Labeled circuits for Task 1.
#[derive(Debug, Clone)]
pub struct Task1Data {
    pub labels: LabelFile,
    pub graphs: Vec<CircuitGraph>,
}

impl Task1Data {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.graphs.len()).filter(|&i| self.labels.circuits[i].split == split).collect()
    }

    fn truth(&self, (t, a, b): (usize, usize, usize)) -> usize {
        let l = |i: usize| &self.labels.circuits[i].labels;
        task1_truth(l(t), l(a), l(b)).class()
    }

    /// Every ordered pair of distinct circuits from `pool` other than `target`.
    pub fn triplets(target: usize, pool: &[usize]) -> Vec<(usize, usize, usize)> {
        let others: Vec<usize> = pool.iter().copied().filter(|&i| i != target).collect();
        let mut out = Vec::new();
        for &a in &others {
            for &b in &others {
                if a != b {
                    out.push((target, a, b));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task1Metrics {
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub test_triplets: usize,
    pub final_loss: f64,
}

fn cross_entropy(tape: &mut Tape, logits: Var, classes: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax_rows(logits);
    let mut pick = Matrix::zeros((classes.len(), 3));
    for (i, &c) in classes.iter().enumerate() {
        pick[[i, c]] = 1.0;
    }
    let pick = tape.constant(pick);
    let chosen = tape.hadamard(logp, pick)?;
    let total = tape.sum(chosen);
    Ok(tape.scalar_mul(total, -1.0 / classes.len() as f64))
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn task1_accuracy(model: &DownstreamModel, data: &Task1Data, targets: &[usize], pool: &[usize]) -> Result<(f64, usize)> {
    let graphs: Vec<&CircuitGraph> = data.graphs.iter().collect();
    let mut tape = Tape::new();
    let (bound, frozen) = model.bind(&mut tape);
    let batch = GraphBatch::new(&graphs);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let enc = model.encode(&mut tape, &bound, frozen.as_ref(), &batch, Mode::Eval, &mut rng)?;
    let triplets: Vec<_> = targets.iter().flat_map(|&t| Task1Data::triplets(t, pool)).collect();
    if triplets.is_empty() {
        return Ok((f64::NAN, 0));
    }
    let logits = model.similarity_logits(&mut tape, &bound, enc.graphs, &triplets, Mode::Eval, &mut rng)?;
    let logits = tape.value(logits);
    let correct = triplets.iter().enumerate().filter(|(i, &tr)| argmax(logits.row(*i)) == data.truth(tr)).count();
    Ok((correct as f64 / triplets.len() as f64, triplets.len()))
}

/// Trains the similarity head (and trainable encoder parts). Each step
/// samples one training target and uses every ordered pair of the other
/// training circuits; `batch_size` steps share one optimizer update.
/// Test accuracy covers test targets against all other circuits.
pub fn train_task1(
    data: &Task1Data,
    config: EncoderConfig,
    decoder: DecoderConfig,
    frozen: Option<FrozenEncoder>,
    train: &TaskTrainConfig,
) -> Result<(DownstreamModel, Task1Metrics)> {
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = DownstreamModel::new(config, decoder, Head::Similarity, frozen, &mut rng)?;
    let train_idx = data.indices(Split::Train);
    let test_idx = data.indices(Split::Test);
    if train_idx.len() < 3 {
        return Err(DownstreamError::Dataset("Task 1 needs at least three training circuits".into()));
    }
    let graphs: Vec<&CircuitGraph> = data.graphs.iter().collect();
    let batch = GraphBatch::new(&graphs);
    let mut adam = Adam::new(train.lr);
    let mut final_loss = f64::NAN;
    for epoch in 1..=train.epochs {
        let target = *train_idx.choose(&mut rng).expect("nonempty training split");
        let triplets = Task1Data::triplets(target, &train_idx);
        let classes: Vec<usize> = triplets.iter().map(|&t| data.truth(t)).collect();

        let mut tape = Tape::new();
        let (bound, frozen) = model.bind(&mut tape);
        let enc = model.encode(&mut tape, &bound, frozen.as_ref(), &batch, Mode::Train, &mut rng)?;
        let logits = model.similarity_logits(&mut tape, &bound, enc.graphs, &triplets, Mode::Train, &mut rng)?;
        let loss = cross_entropy(&mut tape, logits, &classes)?;
        final_loss = tape.scalar(loss);
        if !final_loss.is_finite() {
            return Err(DownstreamError::NanLoss { epoch });
        }
        tape.backward(loss)?;
        model.params.zero_grad();
        model.params.accumulate_grads(&tape, &bound);
        adam.step(&mut model.params);
    }
    let all: Vec<usize> = (0..data.graphs.len()).collect();
    let (test_accuracy, test_triplets) = task1_accuracy(&model, data, &test_idx, &all)?;
    let (train_accuracy, _) = task1_accuracy(&model, data, &train_idx, &train_idx)?;
    Ok((model, Task1Metrics { test_accuracy, train_accuracy, test_triplets, final_loss }))
}

/// One simulation row: the circuit, parameter overrides keyed by device node,
/// and the targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionRow {
    pub circuit: usize,
    pub params: BTreeMap<usize, f64>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset {
    pub circuit_ids: Vec<String>,
    pub graphs: Vec<CircuitGraph>,
    pub target_names: Vec<String>,
    pub rows: Vec<RegressionRow>,
}

impl RegressionDataset {
    /// The row's circuit with its parameter overrides applied.
    pub fn row_graph(&self, row: &RegressionRow) -> CircuitGraph {
        let mut g = self.graphs[row.circuit].clone();
        for (&node, &value) in &row.params {
            g.params[node] = Some(value);
        }
        g
    }

    pub fn out_dim(&self) -> usize {
        self.target_names.len()
    }
}

/// Sidecar describing which graph each circuit id uses and which device node
/// each parameter column sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub targets: Vec<String>,
    pub circuits: BTreeMap<String, SidecarCircuit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarCircuit {
    /// Circuit-graph JSON, relative to the sidecar file.
    pub graph: String,
    pub columns: BTreeMap<String, usize>,
}

fn dataset_err(e: impl std::fmt::Display) -> DownstreamError {
    DownstreamError::Dataset(e.to_string())
}

/// Reads `circuit_id, param_*, target_*` rows plus the sidecar.
pub fn read_regression_csv(csv_path: &Path, sidecar_path: &Path) -> Result<RegressionDataset> {
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path)?).map_err(dataset_err)?;
    let base = sidecar_path.parent().unwrap_or(Path::new("."));
    let mut circuit_ids = Vec::new();
    let mut graphs = Vec::new();
    let mut by_id = BTreeMap::new();
    for (id, c) in &sidecar.circuits {
        let g = CircuitGraph::from_json(&fs::read_to_string(base.join(&c.graph))?)?;
        for (col, &node) in &c.columns {
            if g.params.get(node).copied().flatten().is_none() {
                return Err(dataset_err(format!("{id}: column {col} maps to non-device node {node}")));
            }
        }
        by_id.insert(id.clone(), graphs.len());
        circuit_ids.push(id.clone());
        graphs.push(g);
    }

    let mut reader = csv::Reader::from_path(csv_path).map_err(dataset_err)?;
    let headers = reader.headers().map_err(dataset_err)?.clone();
    if headers.get(0) != Some("circuit_id") {
        return Err(dataset_err("first column must be circuit_id"));
    }
    let target_cols: Vec<usize> = sidecar
        .targets
        .iter()
        .map(|t| headers.iter().position(|h| h == t).ok_or_else(|| dataset_err(format!("missing target column {t}"))))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(dataset_err)?;
        let id = rec.get(0).unwrap_or_default();
        let &circuit = by_id.get(id).ok_or_else(|| dataset_err(format!("row {}: unknown circuit {id}", line + 1)))?;
        let num = |col: usize| -> Result<f64> {
            rec.get(col)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| dataset_err(format!("row {}: bad number in column {}", line + 1, &headers[col])))
        };
        let mut params = BTreeMap::new();
        for (col, &node) in &sidecar.circuits[id].columns {
            let c = headers.iter().position(|h| h == col).ok_or_else(|| dataset_err(format!("missing column {col}")))?;
            let v = num(c)?;
            if !(v > 0.0) {
                return Err(DownstreamError::NonPositiveParam(node));
            }
            params.insert(node, v);
        }
        let targets = target_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?;
        rows.push(RegressionRow { circuit, params, targets });
    }
    if rows.is_empty() {
        return Err(dataset_err("no rows"));
    }
    Ok(RegressionDataset { circuit_ids, graphs, target_names: sidecar.targets, rows })
}

/// Writes a dataset in the CSV-plus-sidecar layout under `dir`
/// (`data.csv`, `sidecar.json`, one graph JSON per circuit).
pub fn write_regression_csv(dir: &Path, data: &RegressionDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut circuits = BTreeMap::new();
    let mut columns_per_circuit = Vec::new();
    let mut width = 0;
    for (k, id) in data.circuit_ids.iter().enumerate() {
        let file = format!("{id}.json");
        fs::write(dir.join(&file), data.graphs[k].to_json())?;
        let devices = data.graphs[k].device_nodes();
        width = width.max(devices.len());
        let columns: BTreeMap<String, usize> =
            devices.iter().enumerate().map(|(j, &node)| (format!("param_{}", j + 1), node)).collect();
        columns_per_circuit.push(devices);
        circuits.insert(id.clone(), SidecarCircuit { graph: file, columns });
    }
    let sidecar = Sidecar { targets: data.target_names.clone(), circuits };
    fs::write(dir.join("sidecar.json"), serde_json::to_string_pretty(&sidecar).map_err(dataset_err)?)?;

    let mut w = csv::Writer::from_path(dir.join("data.csv")).map_err(dataset_err)?;
    let mut header = vec!["circuit_id".to_string()];
    header.extend((1..=width).map(|j| format!("param_{j}")));
    header.extend(data.target_names.iter().cloned());
    w.write_record(&header).map_err(dataset_err)?;
    for row in &data.rows {
        let g = data.row_graph(row);
        let mut rec = vec![data.circuit_ids[row.circuit].clone()];
        let devices = &columns_per_circuit[row.circuit];
        for j in 0..width {
            rec.push(devices.get(j).map_or(String::new(), |&n| format!("{:?}", g.params[n].expect("device"))));
        }
        rec.extend(row.targets.iter().map(|t| format!("{t:?}")));
        w.write_record(&rec).map_err(dataset_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Three-stage RC ladder with log-uniform resistances (1k to 10k) and
/// capacitances (1p to 10p). Targets are the Elmore delays at the output
/// and at the first internal node.
pub fn rc_surrogate(rows: usize, seed: u64) -> RegressionDataset {
    let text = "Vin in 0 1\nR1 in n1 1k\nC1 n1 0 1p\nR2 n1 n2 1k\nC2 n2 0 1p\nR3 n2 out 1k\nC3 out 0 1p\n";
    let netlist = crate::netlist::parse_netlist(text).expect("surrogate netlist parses").with_name("rc3");
    let graph = crate::graph::build_graph(&netlist).expect("surrogate graph builds");
    let devices = graph.device_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log_uniform = |lo: f64| lo * 10f64.powf(rng.gen::<f64>());
    let data_rows = (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..6).map(|k| if k % 2 == 0 { log_uniform(1e3) } else { log_uniform(1e-12) }).collect();
            let (r, c) = ([v[0], v[2], v[4]], [v[1], v[3], v[5]]);
            let out = r[0] * (c[0] + c[1] + c[2]) + r[1] * (c[1] + c[2]) + r[2] * c[2];
            let first = r[0] * (c[0] + c[1] + c[2]);
            let params = devices.iter().copied().zip(v).collect();
            RegressionRow { circuit: 0, params, targets: vec![out, first] }
        })
        .collect();
    RegressionDataset {
        circuit_ids: vec!["rc3".into()],
        graphs: vec![graph],
        target_names: vec!["delay_out".into(), "delay_n1".into()],
        rows: data_rows,
    }
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2_score(truth: &[f64], pred: &[f64]) -> f64 {
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean) * (y - mean)).sum();
    let ss_res: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p) * (y - p)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

/// Deterministic 8:1:1 split of `n` row indices.
pub fn split_811(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    (idx, val, test)
}

/// Per-target mean and standard deviation of the given rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[&[f64]]) -> Self {
        let m = rows[0].len();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..m).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let std = (0..m)
            .map(|k| {
                let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                if var > 0.0 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(width: usize) -> Self {
        Self { mean: vec![0.0; width], std: vec![1.0; width] }
    }

    /// Per-type mean and standard deviation of the device entries of the
    /// parameter encoding over `rows`.
    pub fn fit_params(data: &RegressionDataset, rows: &[usize]) -> Result<Self> {
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); NUM_NODE_TYPES];
        for &i in rows {
            let g = data.row_graph(&data.rows[i]);
            let enc = encode_params(&g)?;
            for (v, t) in g.nodes.iter().enumerate() {
                if g.params[v].is_some() {
                    values[t.code()].push(enc[[v, t.code()]]);
                }
            }
        }
        let mut out = Self::identity(NUM_NODE_TYPES);
        for (t, vals) in values.iter().enumerate().filter(|(_, v)| !v.is_empty()) {
            let fitted = Self::fit(&vals.iter().map(std::slice::from_ref).collect::<Vec<_>>());
            out.mean[t] = fitted.mean[0];
            out.std[t] = fitted.std[0];
        }
        Ok(out)
    }

    /// Standardizes the hot entry of every device row in place.
    fn apply_params(&self, graphs: &[&CircuitGraph], enc: &mut Matrix) {
        let mut row = 0;
        for g in graphs {
            for (t, p) in g.nodes.iter().zip(&g.params) {
                if p.is_some() {
                    let k = t.code();
                    enc[[row, k]] = (enc[[row, k]] - self.mean[k]) / self.std[k];
                }
                row += 1;
            }
        }
    }

    pub fn forward(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub test_r2: Vec<f64>,
    pub val_r2: Vec<f64>,
    pub train_loss: Vec<f64>,
    /// Epoch whose weights are kept (best mean validation R²).
    pub best_epoch: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl RegressionMetrics {
    pub fn mean_test_r2(&self) -> f64 {
        self.test_r2.iter().sum::<f64>() / self.test_r2.len() as f64
    }
}

/// Batched forward pass for regression rows; returns standardized predictions.
fn regression_forward<R: Rng + ?Sized>(
    model: &DownstreamModel,
    data: &RegressionDataset,
    rows: &[usize],
    tape: &mut Tape,
    mode: Mode,
    rng: &mut R,
) -> Result<(Var, Bound)> {
    let graphs: Vec<CircuitGraph> = rows.iter().map(|&i| data.row_graph(&data.rows[i])).collect();
    let refs: Vec<&CircuitGraph> = graphs.iter().collect();
    let batch = GraphBatch::new(&refs);
    let mut params = encode_params_batch(&refs)?;
    model.param_scale.apply_params(&refs, &mut params);
    let (bound, frozen) = model.bind(tape);

    // The encoder sees topology only, so each circuit is encoded once and its
    // node rows are shared by every row of that circuit.
    let circuits: BTreeSet<usize> = rows.iter().map(|&i| data.rows[i].circuit).collect();
    let mut offset = BTreeMap::new();
    let mut unique = Vec::with_capacity(circuits.len());
    let mut next = 0;
    for &c in &circuits {
        offset.insert(c, next);
        next += data.graphs[c].num_nodes();
        unique.push(&data.graphs[c]);
    }
    let enc = model.encode(tape, &bound, frozen.as_ref(), &GraphBatch::new(&unique), mode, rng)?;
    let index: Vec<usize> = rows
        .iter()
        .flat_map(|&i| {
            let c = data.rows[i].circuit;
            offset[&c]..offset[&c] + data.graphs[c].num_nodes()
        })
        .collect();
    let nodes = tape.gather_rows(enc.nodes, &index)?;
    let out = model.decode(tape, &bound, &Encoded { nodes, ..enc }, &params, &batch, mode, rng)?;
    Ok((out, bound))
}

/// Predictions in original units for `rows`.
pub fn predict(model: &DownstreamModel, data: &RegressionDataset, rows: &[usize], scaler: &Standardizer) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(rows.len());
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for chunk in rows.chunks(512) {
        let mut tape = Tape::new();
        let (y, _) = regression_forward(model, data, chunk, &mut tape, Mode::Eval, &mut rng)?;
        out.extend(tape.value(y).rows().into_iter().map(|r| scaler.inverse(&r.to_vec())));
    }
    Ok(out)
}

fn r2_per_target(data: &RegressionDataset, rows: &[usize], preds: &[Vec<f64>]) -> Vec<f64> {
    (0..data.out_dim())
        .map(|k| {
            let truth: Vec<f64> = rows.iter().map(|&i| data.rows[i].targets[k]).collect();
            let pred: Vec<f64> = preds.iter().map(|p| p[k]).collect();
            r2_score(&truth, &pred)
        })
        .collect()
}

/// Trains the encoder–decoder with mean squared error on standardized
/// targets, keeping the weights of the epoch with the best mean validation
/// R². R² is reported in original units.
pub fn train_regression(
    data: &RegressionDataset,
    config: EncoderConfig,
    decoder: DecoderConfig,
    frozen: Option<FrozenEncoder>,
    train: &TaskTrainConfig,
) -> Result<(DownstreamModel, Standardizer, RegressionMetrics)> {
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let out_dim = data.out_dim();
    let mut model = DownstreamModel::new(config, decoder, Head::Regression { out_dim }, frozen, &mut rng)?;
    let (train_rows, val_rows, test_rows) = split_811(data.rows.len(), train.seed);
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(dataset_err("too few rows for an 8:1:1 split"));
    }
    let scaler = Standardizer::fit(&train_rows.iter().map(|&i| data.rows[i].targets.as_slice()).collect::<Vec<_>>());
    model.param_scale = Standardizer::fit_params(data, &train_rows)?;
    let mut adam = Adam::new(train.lr);
    let mut order = train_rows.clone();
    let mut train_loss = Vec::with_capacity(train.epochs);
    let mut best: Option<(f64, usize, Vec<f64>, ParamStore)> = None;

    for epoch in 1..=train.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(train.batch_size.max(1)) {
            let mut tape = Tape::new();
            let (pred, bound) = regression_forward(&model, data, chunk, &mut tape, Mode::Train, &mut rng)?;
            let z: Vec<f64> = chunk.iter().flat_map(|&i| scaler.forward(&data.rows[i].targets)).collect();
            let target = tape.constant(Matrix::from_shape_vec((chunk.len(), out_dim), z).expect("row-major targets"));
            let diff = tape.sub(pred, target)?;
            let sq = tape.hadamard(diff, diff)?;
            let loss = tape.mean(sq);
            let l = tape.scalar(loss);
            if !l.is_finite() {
                return Err(DownstreamError::NanLoss { epoch });
            }
            losses.push(l);
            tape.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate_grads(&tape, &bound);
            adam.step(&mut model.params);
        }
        train_loss.push(losses.iter().sum::<f64>() / losses.len() as f64);
        if !val_rows.is_empty() {
            let r2 = r2_per_target(data, &val_rows, &predict(&model, data, &val_rows, &scaler)?);
            let mean = r2.iter().sum::<f64>() / r2.len() as f64;
            if best.as_ref().is_none_or(|b| mean > b.0) {
                best = Some((mean, epoch, r2, model.params.clone()));
            }
        }
    }
    let (val_r2, best_epoch) = match best {
        Some((_, epoch, r2, params)) => {
            model.params = params;
            (r2, epoch)
        }
        None => (Vec::new(), train.epochs),
    };
    let test_r2 = r2_per_target(data, &test_rows, &predict(&model, data, &test_rows, &scaler)?);
    let metrics = RegressionMetrics {
        test_r2,
        val_r2,
        train_loss,
        best_epoch,
        n_train: train_rows.len(),
        n_val: val_rows.len(),
        n_test: test_rows.len(),
    };
    Ok((model, scaler, metrics))
}

/// `{task, config, seed, metrics}` record written after each run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics<C, M> {
    pub task: String,
    pub config: C,
    pub seed: u64,
    pub metrics: M,
}

impl<C: Serialize, M: Serialize> RunMetrics<C, M> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Writes `sample_id, origin_id, polarity, dim_0..` rows.
pub fn write_embeddings_csv<W: Write>(out: W, samples: &[AugmentedSample], embeddings: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample_id".to_string(), "origin_id".into(), "polarity".into()];
    header.extend((0..embeddings.ncols()).map(|k| format!("dim_{k}")));
    w.write_record(&header).map_err(dataset_err)?;
    for (s, row) in samples.iter().zip(embeddings.rows()) {
        let polarity = format!("{:?}", s.polarity).to_lowercase();
        let mut rec = vec![s.id.clone(), s.origin_id.clone(), polarity];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(dataset_err)?;
    }
    w.flush()?;
    Ok(())
}
