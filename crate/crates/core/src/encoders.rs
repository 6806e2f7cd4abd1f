//! Graph encoders: DICE (GIN-style updates of both node and edge features)
//! plus GCN, GraphSAGE, GAT and GIN baselines.
//!
//! Every encoder projects the one-hot node and edge features to the hidden
//! width with a two-layer MLP, runs `depth` message-passing layers over the
//! in-neighbors of each node, and reads out a graph vector as the sum of all
//! final node rows plus all final arc rows.
//!
//! Several graphs are encoded at once as a disjoint union ([`GraphBatch`]);
//! the readout keeps them apart through per-row graph ids.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Bound, Matrix, ParamStore, Tape, TensorError, Var};
use crate::graph::{CircuitGraph, NUM_EDGE_TYPES, NUM_NODE_TYPES};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameters hold {found} message-passing layers, spec expects {expected}")]
    DepthParamsMismatch { expected: usize, found: usize },
    #[error("cosine of a zero vector")]
    ZeroVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Dice,
    Gcn,
    #[serde(rename = "sage")]
    GraphSage,
    Gat,
    Gin,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::Dice, Arch::Gcn, Arch::GraphSage, Arch::Gat, Arch::Gin];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    /// Row-wise layer normalization without affine terms.
    Layer,
    None,
}

/// Which endpoint's node features are scaled by the arc features in the
/// DICE message. `Receiver` follows the update rule as printed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageSource {
    Receiver,
    Sender,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub arch: Arch,
    pub depth: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub norm: Norm,
    pub message_source: MessageSource,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            arch: Arch::Dice,
            depth: 2,
            hidden: 256,
            dropout: 0.2,
            norm: Norm::Layer,
            message_source: MessageSource::Receiver,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Several graphs laid out as one disjoint union.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub num_graphs: usize,
    pub node_feats: Matrix,
    pub edge_feats: Matrix,
    pub node_graph: Vec<usize>,
    pub arc_graph: Vec<usize>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// Arcs entering each node.
    pub in_degree: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&CircuitGraph]) -> Self {
        let total_nodes: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let total_arcs: usize = graphs.iter().map(|g| g.num_arcs()).sum();
        let mut node_feats = Matrix::zeros((total_nodes, NUM_NODE_TYPES));
        let mut edge_feats = Matrix::zeros((total_arcs, NUM_EDGE_TYPES));
        let mut node_graph = Vec::with_capacity(total_nodes);
        let mut arc_graph = Vec::with_capacity(total_arcs);
        let mut src = Vec::with_capacity(total_arcs);
        let mut dst = Vec::with_capacity(total_arcs);
        let mut offset = 0;
        for (gi, g) in graphs.iter().enumerate() {
            for t in &g.nodes {
                node_feats[[node_graph.len(), t.code()]] = 1.0;
                node_graph.push(gi);
            }
            for a in &g.arcs {
                edge_feats[[arc_graph.len(), a.etype.code()]] = 1.0;
                arc_graph.push(gi);
                src.push(a.src + offset);
                dst.push(a.dst + offset);
            }
            offset += g.num_nodes();
        }
        let mut in_degree = vec![0; total_nodes];
        for &d in &dst {
            in_degree[d] += 1;
        }
        Self { num_graphs: graphs.len(), node_feats, edge_feats, node_graph, arc_graph, src, dst, in_degree }
    }

    pub fn single(graph: &CircuitGraph) -> Self {
        Self::new(&[graph])
    }

    pub fn num_nodes(&self) -> usize {
        self.node_graph.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.src.len()
    }
}

/// Node, arc and graph-level outputs of one encoder pass, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub nodes: Var,
    pub edges: Var,
    pub graphs: Var,
}

/// Plain-value graph embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEmbedding {
    pub g: Vec<f64>,
    pub node_out: Matrix,
    pub edge_out: Matrix,
}

fn mlp_params<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut R) {
    store.insert_glorot(format!("{name}.0.w"), input, hidden, rng);
    store.insert_zeros(format!("{name}.0.b"), 1, hidden);
    store.insert_glorot(format!("{name}.1.w"), hidden, output, rng);
    store.insert_zeros(format!("{name}.1.b"), 1, output);
}

/// Freshly initialized two-layer MLP parameters under `name`.
pub fn init_mlp<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut R) {
    mlp_params(store, name, input, hidden, output, rng);
}

/// Two-layer MLP: linear, norm, GELU, dropout, linear.
#[allow(clippy::too_many_arguments)]
pub fn mlp<R: Rng + ?Sized>(
    tape: &mut Tape,
    bound: &Bound,
    name: &str,
    x: Var,
    norm: Norm,
    dropout: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, TensorError> {
    let w0 = bound.get(&format!("{name}.0.w"))?;
    let b0 = bound.get(&format!("{name}.0.b"))?;
    let w1 = bound.get(&format!("{name}.1.w"))?;
    let b1 = bound.get(&format!("{name}.1.b"))?;
    let h = tape.matmul(x, w0)?;
    let mut h = tape.add_row(h, b0)?;
    if norm == Norm::Layer {
        h = tape.layer_norm_rows(h);
    }
    let h = tape.gelu(h);
    let h = tape.dropout(h, dropout, mode == Mode::Train, rng);
    let h = tape.matmul(h, w1)?;
    tape.add_row(h, b1)
}

impl EncoderSpec {
    /// Parameters for the input projection and every message-passing layer.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        let h = self.hidden;
        mlp_params(&mut store, "node_in", NUM_NODE_TYPES, h, h, rng);
        mlp_params(&mut store, "edge_in", NUM_EDGE_TYPES, h, h, rng);
        self.init_layer_params(&mut store, "", rng);
        store
    }

    /// Parameters for the message-passing layers only, under `prefix`.
    pub fn init_layer_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        let h = self.hidden;
        for k in 0..self.depth {
            let layer = format!("{prefix}layer{k}");
            match self.arch {
                Arch::Dice => {
                    mlp_params(store, &format!("{layer}.node"), h, h, h, rng);
                    mlp_params(store, &format!("{layer}.edge"), h, h, h, rng);
                    store.insert_zeros(format!("{layer}.phi_h"), 1, 1);
                    store.insert_zeros(format!("{layer}.phi_e"), 1, 1);
                }
                Arch::Gcn => mlp_params(store, &format!("{layer}.node"), h, h, h, rng),
                Arch::GraphSage => mlp_params(store, &format!("{layer}.node"), 2 * h, h, h, rng),
                Arch::Gat => {}
                Arch::Gin => {
                    mlp_params(store, &format!("{layer}.node"), h, h, h, rng);
                    store.insert_zeros(format!("{layer}.eps"), 1, 1);
                }
            }
        }
    }

    /// Checks that `params` carries exactly `depth` layers (GAT layers have
    /// no parameters and are not checked).
    pub fn check_params(&self, params: &ParamStore, prefix: &str) -> Result<(), EncoderError> {
        if self.arch == Arch::Gat {
            return Ok(());
        }
        let found = (0..)
            .take_while(|k| params.get(&format!("{prefix}layer{k}.node.0.w")).is_some())
            .count();
        if found != self.depth {
            return Err(EncoderError::DepthParamsMismatch { expected: self.depth, found });
        }
        Ok(())
    }

    /// Projects the one-hot features of `batch` to the hidden width.
    pub fn input_projection<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        batch: &GraphBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Var), TensorError> {
        let x = tape.constant(batch.node_feats.clone());
        let e = tape.constant(batch.edge_feats.clone());
        let nodes = mlp(tape, bound, &format!("{prefix}node_in"), x, self.norm, self.dropout, mode, rng)?;
        let edges = mlp(tape, bound, &format!("{prefix}edge_in"), e, self.norm, self.dropout, mode, rng)?;
        Ok((nodes, edges))
    }

    /// Runs the `depth` message-passing layers stored under `prefix`.
    #[allow(clippy::too_many_arguments)]
    pub fn message_layers<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        batch: &GraphBatch,
        mut nodes: Var,
        mut edges: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Var), TensorError> {
        let n = batch.num_nodes();
        for k in 0..self.depth {
            let layer = format!("{prefix}layer{k}");
            let node_mlp = format!("{layer}.node");
            match self.arch {
                Arch::Dice => {
                    let scaled = match self.message_source {
                        MessageSource::Receiver => tape.gather_rows(nodes, &batch.dst)?,
                        MessageSource::Sender => tape.gather_rows(nodes, &batch.src)?,
                    };
                    let msg = tape.hadamard(scaled, edges)?;
                    let m = tape.segment_sum(msg, &batch.dst, n)?;

                    let phi_h = bound.get(&format!("{layer}.phi_h"))?;
                    let one_plus = tape.add_scalar(phi_h, 1.0);
                    let self_term = tape.mul_scalar(nodes, one_plus)?;
                    let node_in = tape.add(self_term, m)?;

                    let phi_e = bound.get(&format!("{layer}.phi_e"))?;
                    let one_plus = tape.add_scalar(phi_e, 1.0);
                    let edge_self = tape.mul_scalar(edges, one_plus)?;
                    let m_src = tape.gather_rows(m, &batch.src)?;
                    let m_dst = tape.gather_rows(m, &batch.dst)?;
                    let diff = tape.sub(m_src, m_dst)?;
                    let edge_in = tape.add(edge_self, diff)?;

                    nodes = mlp(tape, bound, &node_mlp, node_in, self.norm, self.dropout, mode, rng)?;
                    edges = mlp(tape, bound, &format!("{layer}.edge"), edge_in, self.norm, self.dropout, mode, rng)?;
                }
                Arch::Gcn => {
                    let coef: Vec<f64> = batch
                        .src
                        .iter()
                        .zip(&batch.dst)
                        .map(|(&u, &v)| {
                            let du = batch.in_degree[u].max(1) as f64;
                            let dv = batch.in_degree[v].max(1) as f64;
                            1.0 / (du * dv).sqrt()
                        })
                        .collect();
                    let m = weighted_sum(tape, batch, nodes, coef)?;
                    nodes = mlp(tape, bound, &node_mlp, m, self.norm, self.dropout, mode, rng)?;
                }
                Arch::GraphSage => {
                    let coef = batch.dst.iter().map(|&v| 1.0 / batch.in_degree[v] as f64).collect();
                    let m = weighted_sum(tape, batch, nodes, coef)?;
                    let cat = tape.concat_cols(&[nodes, m])?;
                    nodes = mlp(tape, bound, &node_mlp, cat, self.norm, self.dropout, mode, rng)?;
                }
                Arch::Gat => {
                    let h_src = tape.gather_rows(nodes, &batch.src)?;
                    let h_dst = tape.gather_rows(nodes, &batch.dst)?;
                    let prod = tape.hadamard(h_src, h_dst)?;
                    let logits = tape.row_sum(prod);
                    let alpha = tape.segment_softmax(logits, &batch.dst, n)?;
                    let weighted = tape.mul_col(h_src, alpha)?;
                    let m = tape.segment_sum(weighted, &batch.dst, n)?;
                    nodes = tape.add(nodes, m)?;
                }
                Arch::Gin => {
                    let h_src = tape.gather_rows(nodes, &batch.src)?;
                    let m = tape.segment_sum(h_src, &batch.dst, n)?;
                    let eps = bound.get(&format!("{layer}.eps"))?;
                    let one_plus = tape.add_scalar(eps, 1.0);
                    let self_term = tape.mul_scalar(nodes, one_plus)?;
                    let pre = tape.add(self_term, m)?;
                    nodes = mlp(tape, bound, &node_mlp, pre, self.norm, self.dropout, mode, rng)?;
                }
            }
        }
        Ok((nodes, edges))
    }

    /// Full encoder pass: projection, message passing, sum readout.
    #[allow(clippy::too_many_arguments)]
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        batch: &GraphBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Encoded, TensorError> {
        let (nodes, edges) = self.input_projection(tape, bound, prefix, batch, mode, rng)?;
        let (nodes, edges) = self.message_layers(tape, bound, prefix, batch, nodes, edges, mode, rng)?;
        let graphs = readout(tape, batch, nodes, edges)?;
        Ok(Encoded { nodes, edges, graphs })
    }

    /// Eval-mode embedding of one graph with frozen parameters.
    pub fn embed(&self, params: &ParamStore, graph: &CircuitGraph) -> Result<GraphEmbedding, EncoderError> {
        self.check_params(params, "")?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let batch = GraphBatch::single(graph);
        // Eval mode never draws from the generator.
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.encode(&mut tape, &bound, "", &batch, Mode::Eval, &mut rng)?;
        Ok(GraphEmbedding {
            g: tape.value(out.graphs).row(0).to_vec(),
            node_out: tape.value(out.nodes).clone(),
            edge_out: tape.value(out.edges).clone(),
        })
    }

    /// Eval-mode graph vectors for many graphs, one row per graph. Graphs are
    /// encoded in chunks on rayon workers; the result order is the input order.
    pub fn embed_many(&self, params: &ParamStore, graphs: &[&CircuitGraph]) -> Result<Matrix, EncoderError> {
        use rayon::prelude::*;
        self.check_params(params, "")?;
        const CHUNK: usize = 64;
        let blocks: Vec<Matrix> = graphs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, false);
                let batch = GraphBatch::new(chunk);
                let mut rng = rand::rngs::mock::StepRng::new(0, 0);
                let out = self.encode(&mut tape, &bound, "", &batch, Mode::Eval, &mut rng)?;
                Ok(tape.value(out.graphs).clone())
            })
            .collect::<Result<_, TensorError>>()?;
        let mut all = Matrix::zeros((graphs.len(), self.hidden));
        let mut row = 0;
        for b in blocks {
            let rows = b.nrows();
            all.slice_mut(ndarray::s![row..row + rows, ..]).assign(&b);
            row += rows;
        }
        Ok(all)
    }
}

/// `m_v = sum over arcs u->v of coef[arc] * h_u`.
fn weighted_sum(tape: &mut Tape, batch: &GraphBatch, nodes: Var, coef: Vec<f64>) -> Result<Var, TensorError> {
    let h_src = tape.gather_rows(nodes, &batch.src)?;
    let coef = tape.constant(Matrix::from_shape_vec((coef.len(), 1), coef).expect("one coefficient per arc"));
    let weighted = tape.mul_col(h_src, coef)?;
    tape.segment_sum(weighted, &batch.dst, batch.num_nodes())
}

/// Per-graph sum of node rows plus arc rows.
pub fn readout(tape: &mut Tape, batch: &GraphBatch, nodes: Var, edges: Var) -> Result<Var, TensorError> {
    let node_sum = tape.segment_sum(nodes, &batch.node_graph, batch.num_graphs)?;
    let edge_sum = tape.segment_sum(edges, &batch.arc_graph, batch.num_graphs)?;
    tape.add(node_sum, edge_sum)
}

/// Cosine similarity of two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EncoderError> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(EncoderError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
