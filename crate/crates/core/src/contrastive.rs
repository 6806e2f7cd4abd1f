//! Contrastive objectives (NT-Xent, SimSiam, DICE) and the masked batch
//! pretraining loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentedSample, Relation, RelationIndex};
use crate::autodiff::{Adam, Bound, Matrix, ParamStore, Tape, TensorError, Var};
use crate::encoders::{cosine, mlp, EncoderError, EncoderSpec, GraphBatch, Mode, Norm};

/// Added to excluded logits so that they vanish under softmax while staying finite.
const MASKED_LOGIT: f64 = -1e30;

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("embedding row {0} is the zero vector")]
    ZeroVector(usize),
    #[error("anchor {0} has no positive sample in the batch")]
    EmptyPositiveSet(usize),
    #[error("mask row {0} has no positive entry")]
    EmptyPositiveRow(usize),
    #[error("temperatures must be positive")]
    BadTemperature,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}")]
    NanLoss { epoch: usize },
    #[error("no batch in epoch {epoch} contains a positive pair")]
    NoAnchors { epoch: usize },
    #[error("metrics log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[serde(rename = "ntxent")]
    NtXent,
    SimSiam,
    Dice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub tau: f64,
    pub tau_p: f64,
    pub tau_n: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::Dice, tau: 0.05, tau_p: 0.2, tau_n: 0.05 }
    }
}

impl LossConfig {
    pub fn nt_xent() -> Self {
        Self { kind: LossKind::NtXent, ..Self::default() }
    }

    pub fn simsiam() -> Self {
        Self { kind: LossKind::SimSiam, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ContrastiveError> {
        if [self.tau, self.tau_p, self.tau_n].iter().all(|t| *t > 0.0 && t.is_finite()) {
            Ok(())
        } else {
            Err(ContrastiveError::BadTemperature)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 3e-4, batch_size: 1024, epochs: 200, seed: 0 }
    }
}

/// Positive and non-equal masks for one batch. Both are symmetric with a
/// zero diagonal and never overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMasks {
    pub pos: Matrix,
    pub non_equal: Matrix,
}

impl BatchMasks {
    /// Masks over `members`, which index into `index`.
    pub fn new(index: &RelationIndex, members: &[usize]) -> Self {
        let l = members.len();
        let mut pos = Matrix::zeros((l, l));
        let mut non_equal = Matrix::zeros((l, l));
        for (i, &a) in members.iter().enumerate() {
            for (j, &b) in members.iter().enumerate() {
                if i == j {
                    continue;
                }
                match index.relation(a, b) {
                    Relation::Positive => pos[[i, j]] = 1.0,
                    Relation::NonEqual => non_equal[[i, j]] = 1.0,
                    Relation::Negative => {}
                }
            }
        }
        Self { pos, non_equal }
    }

    pub fn len(&self) -> usize {
        self.pos.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows with at least one positive entry.
    pub fn anchors(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.pos.row(i).sum() > 0.0).collect()
    }
}

fn check_rows(tape: &Tape, z: Var) -> Result<(), ContrastiveError> {
    match tape.value(z).rows().into_iter().position(|r| r.iter().all(|&x| x == 0.0)) {
        Some(i) => Err(ContrastiveError::ZeroVector(i)),
        None => Ok(()),
    }
}

/// Cosine similarity matrix of the rows of `z`.
pub fn cosine_matrix(tape: &mut Tape, z: Var) -> Result<Var, ContrastiveError> {
    check_rows(tape, z)?;
    let n = tape.l2_normalize_rows(z);
    let nt = tape.transpose(n);
    Ok(tape.matmul(n, nt)?)
}

/// NT-Xent over the rows of `z`; row `i` is pulled toward row `pair[i]` and
/// pushed from every other row.
pub fn nt_xent(tape: &mut Tape, z: Var, pair: &[usize], tau: f64) -> Result<Var, ContrastiveError> {
    let rows: Vec<usize> = (0..pair.len()).collect();
    nt_xent_subset(tape, z, &rows, pair, tau)
}

fn row_cosines(tape: &mut Tape, a: Var, b: Var) -> Result<Var, ContrastiveError> {
    check_rows(tape, a)?;
    check_rows(tape, b)?;
    let a = tape.l2_normalize_rows(a);
    let b = tape.l2_normalize_rows(b);
    let prod = tape.hadamard(a, b)?;
    Ok(tape.row_sum(prod))
}

/// Symmetric negative cosine between predictor outputs and stop-gradient
/// features, averaged over rows. `predictor` names a two-layer MLP in
/// `bound`; `None` uses the identity.
pub fn simsiam(tape: &mut Tape, bound: &Bound, predictor: Option<&str>, z1: Var, z2: Var) -> Result<Var, ContrastiveError> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut predict = |tape: &mut Tape, z: Var| -> Result<Var, ContrastiveError> {
        match predictor {
            Some(name) => Ok(mlp(tape, bound, name, z, Norm::Layer, 0.0, Mode::Eval, &mut rng)?),
            None => Ok(z),
        }
    };
    let p1 = predict(tape, z1)?;
    let p2 = predict(tape, z2)?;
    let t1 = tape.stop_gradient(z1);
    let t2 = tape.stop_gradient(z2);
    let c12 = row_cosines(tape, p1, t2)?;
    let c21 = row_cosines(tape, p2, t1)?;
    let c12 = tape.mean(c12);
    let c21 = tape.mean(c21);
    let both = tape.add(c12, c21)?;
    Ok(tape.scalar_mul(both, -0.5))
}

/// Masked DICE loss from a similarity matrix `s`. Each anchor row averages its
/// positive terms against its own denominator; anchors are then averaged.
/// Strict mode rejects rows without positives, otherwise they are skipped.
pub fn dice_loss_from_similarity(
    tape: &mut Tape,
    s: Var,
    masks: &BatchMasks,
    cfg: &LossConfig,
    strict: bool,
) -> Result<Var, ContrastiveError> {
    cfg.validate()?;
    let anchors = masks.anchors();
    if strict && anchors.len() != masks.len() {
        let missing = (0..masks.len()).find(|i| !anchors.contains(i)).expect("some row lacks positives");
        return Err(ContrastiveError::EmptyPositiveRow(missing));
    }
    if anchors.is_empty() {
        return Ok(tape.constant(Matrix::zeros((1, 1))));
    }
    let pos = masks.pos.select(ndarray::Axis(0), &anchors);
    let neq = masks.non_equal.select(ndarray::Axis(0), &anchors);
    let inv_count: Vec<f64> = pos.rows().into_iter().map(|r| 1.0 / r.sum()).collect();

    let s = tape.gather_rows(s, &anchors)?;
    let pos = tape.constant(pos);
    let neq = tape.constant(neq);

    let scaled = tape.scalar_mul(s, 1.0 / cfg.tau);
    let numer = tape.hadamard(scaled, pos)?;
    let numer = tape.row_sum(numer);
    let inv = tape.constant(Matrix::from_shape_vec((anchors.len(), 1), inv_count).expect("one entry per anchor"));
    let numer = tape.hadamard(numer, inv)?;

    let sp = tape.scalar_mul(s, 1.0 / cfg.tau_p);
    let ep = tape.exp(sp);
    let ep = tape.hadamard(ep, pos)?;
    let sn = tape.scalar_mul(s, 1.0 / cfg.tau_n);
    let en = tape.exp(sn);
    let en = tape.hadamard(en, neq)?;
    let denom = tape.add(ep, en)?;
    let denom = tape.row_sum(denom);
    let log_denom = tape.log(denom);

    let per_anchor = tape.sub(numer, log_denom)?;
    let mean = tape.mean(per_anchor);
    Ok(tape.neg(mean))
}

/// Masked DICE loss of embedding rows `z`.
pub fn dice_loss_masked(tape: &mut Tape, z: Var, masks: &BatchMasks, cfg: &LossConfig) -> Result<Var, ContrastiveError> {
    let s = cosine_matrix(tape, z)?;
    dice_loss_from_similarity(tape, s, masks, cfg, true)
}

/// Literal double-loop DICE loss over plain embeddings; `members[i]` is the
/// dataset index of row `i`.
pub fn dice_loss_naive(
    z: &Matrix,
    index: &RelationIndex,
    members: &[usize],
    cfg: &LossConfig,
) -> Result<f64, ContrastiveError> {
    cfg.validate()?;
    let rows: Vec<Vec<f64>> = z.rows().into_iter().map(|r| r.to_vec()).collect();
    let sim = |i: usize, j: usize| cosine(&rows[i], &rows[j]).map_err(|_| ContrastiveError::ZeroVector(i));
    let mut total = 0.0;
    for (i, &a) in members.iter().enumerate() {
        let mut positives = Vec::new();
        let mut non_equal = Vec::new();
        for (j, &b) in members.iter().enumerate() {
            if i == j {
                continue;
            }
            match index.relation(a, b) {
                Relation::Positive => positives.push(j),
                Relation::NonEqual => non_equal.push(j),
                Relation::Negative => {}
            }
        }
        if positives.is_empty() {
            return Err(ContrastiveError::EmptyPositiveSet(i));
        }
        let mut denom = 0.0;
        for &j in &positives {
            denom += (sim(i, j)? / cfg.tau_p).exp();
        }
        for &j in &non_equal {
            denom += (sim(i, j)? / cfg.tau_n).exp();
        }
        let mut anchor = 0.0;
        for &j in &positives {
            anchor += -((sim(i, j)? / cfg.tau).exp() / denom).ln();
        }
        total += anchor / positives.len() as f64;
    }
    Ok(total / members.len() as f64)
}

/// Subsamples `batch` so that every origin present contributes the same
/// number of samples, the smallest per-origin count. Origins with a single
/// member are dropped unless no origin has more.
pub fn balance_batch<R: Rng + ?Sized>(batch: &[usize], index: &RelationIndex, rng: &mut R) -> Vec<usize> {
    let mut by_origin: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in batch {
        by_origin.entry(index.origin[i]).or_default().push(i);
    }
    if by_origin.values().any(|m| m.len() > 1) {
        by_origin.retain(|_, m| m.len() > 1);
    }
    let Some(m) = by_origin.values().map(Vec::len).min() else {
        return Vec::new();
    };
    let mut out = Vec::with_capacity(m * by_origin.len());
    for members in by_origin.values() {
        out.extend(members.choose_multiple(rng, m).copied());
    }
    out
}

/// For each row, a uniformly drawn in-batch positive, or `None`.
fn draw_pairs<R: Rng + ?Sized>(masks: &BatchMasks, rng: &mut R) -> Vec<Option<usize>> {
    (0..masks.len())
        .map(|i| {
            let cands: Vec<usize> = (0..masks.len()).filter(|&j| masks.pos[[i, j]] > 0.0).collect();
            cands.choose(rng).copied()
        })
        .collect()
}

/// Mean and standard deviation of cosine similarity per relation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelationStats {
    pub pos_mean: f64,
    pub pos_std: f64,
    pub noneq_mean: f64,
    pub noneq_std: f64,
    pub neg_mean: f64,
    pub neg_std: f64,
    pub pos_pairs: usize,
    pub noneq_pairs: usize,
    pub neg_pairs: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Relation statistics over all unordered pairs of the given embeddings.
pub fn relation_stats_from_embeddings(z: &Matrix, index: &RelationIndex) -> RelationStats {
    let mut norm = z.clone();
    for mut r in norm.rows_mut() {
        let n = r.dot(&r).sqrt().max(1e-12);
        r /= n;
    }
    let s = norm.dot(&norm.t());
    let (mut pos, mut neq, mut neg) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..index.len() {
        for j in i + 1..index.len() {
            match index.relation(i, j) {
                Relation::Positive => pos.push(s[[i, j]]),
                Relation::NonEqual => neq.push(s[[i, j]]),
                Relation::Negative => neg.push(s[[i, j]]),
            }
        }
    }
    let (pos_mean, pos_std) = mean_std(&pos);
    let (noneq_mean, noneq_std) = mean_std(&neq);
    let (neg_mean, neg_std) = mean_std(&neg);
    RelationStats {
        pos_mean,
        pos_std,
        noneq_mean,
        noneq_std,
        neg_mean,
        neg_std,
        pos_pairs: pos.len(),
        noneq_pairs: neq.len(),
        neg_pairs: neg.len(),
    }
}

/// Eval-mode relation statistics of `samples` under `params`.
pub fn relation_stats(
    spec: &EncoderSpec,
    params: &ParamStore,
    samples: &[AugmentedSample],
    index: &RelationIndex,
) -> Result<RelationStats, ContrastiveError> {
    let graphs: Vec<_> = samples.iter().map(|s| &s.graph).collect();
    let z = spec.embed_many(params, &graphs)?;
    Ok(relation_stats_from_embeddings(&z, index))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(flatten)]
    pub stats: RelationStats,
}

pub const METRICS_HEADER: &str = "epoch,mean_loss,pos_mean,pos_std,noneq_mean,noneq_std,neg_mean,neg_std";

/// Writes the metrics log as CSV.
pub fn write_metrics_csv<W: Write>(out: W, metrics: &[EpochMetrics]) -> Result<(), ContrastiveError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER.split(',')).map_err(csv_io)?;
    for m in metrics {
        let s = &m.stats;
        let fields = [s.pos_mean, s.pos_std, s.noneq_mean, s.noneq_std, s.neg_mean, s.neg_std];
        let mut rec = vec![m.epoch.to_string(), format!("{:?}", m.mean_loss)];
        rec.extend(fields.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> ContrastiveError {
    ContrastiveError::Io(std::io::Error::other(e))
}

/// Trained encoder plus the per-epoch log.
#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub params: ParamStore,
    pub metrics: Vec<EpochMetrics>,
}

pub const PREDICTOR: &str = "predictor";

/// Dataset to pretrain on and an optional held-out split for the per-epoch
/// relation statistics.
#[derive(Debug, Clone, Copy)]
pub struct PretrainData<'a> {
    pub train: &'a [AugmentedSample],
    pub train_index: &'a RelationIndex,
    pub heldout: Option<(&'a [AugmentedSample], &'a RelationIndex)>,
}

/// Batch contrastive pretraining: shuffle, balance per origin, encode,
/// normalize, loss, backward, Adam step.
pub fn pretrain(
    data: PretrainData<'_>,
    spec: &EncoderSpec,
    loss: &LossConfig,
    train: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<PretrainOutput, ContrastiveError> {
    loss.validate()?;
    if data.train.is_empty() {
        return Err(ContrastiveError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut params = spec.init_params(&mut rng);
    if loss.kind == LossKind::SimSiam {
        crate::encoders::init_mlp(&mut params, PREDICTOR, spec.hidden, spec.hidden, spec.hidden, &mut rng);
    }
    let mut adam = Adam::new(train.lr);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut metrics = Vec::with_capacity(train.epochs);

    for epoch in 1..=train.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(train.batch_size.max(1)) {
            let members = balance_batch(chunk, data.train_index, &mut rng);
            let masks = BatchMasks::new(data.train_index, &members);
            if masks.anchors().is_empty() {
                continue;
            }
            let graphs: Vec<_> = members.iter().map(|&i| &data.train[i].graph).collect();
            let batch = GraphBatch::new(&graphs);

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let enc = spec.encode(&mut tape, &bound, "", &batch, Mode::Train, &mut rng)?;
            let value = match loss.kind {
                LossKind::Dice => {
                    let s = cosine_matrix(&mut tape, enc.graphs)?;
                    dice_loss_from_similarity(&mut tape, s, &masks, loss, false)?
                }
                LossKind::NtXent | LossKind::SimSiam => {
                    let pairs = draw_pairs(&masks, &mut rng);
                    let (rows, partners): (Vec<usize>, Vec<usize>) =
                        pairs.iter().enumerate().filter_map(|(i, p)| p.map(|j| (i, j))).unzip();
                    if loss.kind == LossKind::NtXent {
                        // Rows without a positive still serve as negatives.
                        nt_xent_subset(&mut tape, enc.graphs, &rows, &partners, loss.tau)?
                    } else {
                        let z1 = tape.gather_rows(enc.graphs, &rows)?;
                        let z2 = tape.gather_rows(enc.graphs, &partners)?;
                        simsiam(&mut tape, &bound, Some(PREDICTOR), z1, z2)?
                    }
                }
            };
            let l = tape.scalar(value);
            if !l.is_finite() {
                return Err(ContrastiveError::NanLoss { epoch });
            }
            losses.push(l);
            tape.backward(value)?;
            params.zero_grad();
            params.accumulate_grads(&tape, &bound);
            adam.step(&mut params);
        }
        if losses.is_empty() {
            return Err(ContrastiveError::NoAnchors { epoch });
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let (eval, eval_index) = data.heldout.unwrap_or((data.train, data.train_index));
        let stats = relation_stats(spec, &params, eval, eval_index)?;
        let m = EpochMetrics { epoch, mean_loss, stats };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(PretrainOutput { params, metrics })
}

/// NT-Xent where only `rows` act as anchors, each paired with the matching
/// entry of `partners`; every row of `z` appears in the denominators.
pub fn nt_xent_subset(tape: &mut Tape, z: Var, rows: &[usize], partners: &[usize], tau: f64) -> Result<Var, ContrastiveError> {
    let s = cosine_matrix(tape, z)?;
    let l = tape.shape(z).0;
    let s = tape.gather_rows(s, rows)?;
    let logits = tape.scalar_mul(s, 1.0 / tau);
    let mut diag = Matrix::zeros((rows.len(), l));
    let mut pick = Matrix::zeros((rows.len(), l));
    for (k, (&i, &j)) in rows.iter().zip(partners).enumerate() {
        diag[[k, i]] = MASKED_LOGIT;
        pick[[k, j]] = 1.0;
    }
    let diag = tape.constant(diag);
    let logits = tape.add(logits, diag)?;
    let logp = tape.log_softmax_rows(logits);
    let pick = tape.constant(pick);
    let chosen = tape.hadamard(logp, pick)?;
    let total = tape.sum(chosen);
    Ok(tape.scalar_mul(total, -1.0 / rows.len() as f64))
}
