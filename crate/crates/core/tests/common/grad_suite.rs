//! Finite-difference cases for every tape operation, the five encoders, the
//! losses and the downstream model.

use circuitcl::augment::{augment_negative, augment_positive};
use circuitcl::autodiff::{Matrix, ParamStore, Tape, Var};
use circuitcl::contrastive::{cosine_matrix, dice_loss_from_similarity, nt_xent, simsiam, BatchMasks, LossConfig, PREDICTOR};
use circuitcl::corpus::bundled_graphs;
use circuitcl::downstream::{encode_params, DecoderConfig, DownstreamModel, EncoderConfig, FrozenEncoder, Fusion, Head};
use circuitcl::encoders::{init_mlp, Arch, EncoderSpec, GraphBatch, Mode, Norm};
use circuitcl::augment::RelationIndex;
use circuitcl::graph::CircuitGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_inputs, check_store, project, random_matrix, GradReport};

pub const INSTANCES: usize = 20;

type OpCase = (&'static str, fn(&mut ChaCha8Rng) -> GradReport);

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=5), rng.gen_range(1..=5))
}

/// Builds a case for a shape-preserving unary op.
fn unary(rng: &mut ChaCha8Rng, init: impl Fn(&mut ChaCha8Rng, usize, usize) -> Matrix, op: fn(&mut Tape, Var) -> Var) -> GradReport {
    let (r, c) = dims(rng);
    let x = init(rng, r, c);
    let w = random_matrix(rng, x.nrows(), x.ncols());
    check_inputs(&[x], |t, v| {
        let y = op(t, v[0]);
        project(t, y, &w)
    })
}

fn plain(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    random_matrix(rng, r, c)
}

/// Entries bounded away from zero so ReLU's kink is never straddled.
fn off_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_shape_fn((r, c), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_shape_fn((r, c), |_| rng.gen_range(0.2..2.0))
}

fn wide(rng: &mut ChaCha8Rng, r: usize, _c: usize) -> Matrix {
    let c = rng.gen_range(2..=6);
    random_matrix(rng, r, c).mapv(|x| 2.0 * x)
}

fn binary_same(rng: &mut ChaCha8Rng, op: fn(&mut Tape, Var, Var) -> Var) -> GradReport {
    let (r, c) = dims(rng);
    let a = random_matrix(rng, r, c);
    let b = random_matrix(rng, r, c);
    let w = random_matrix(rng, r, c);
    check_inputs(&[a, b], |t, v| {
        let y = op(t, v[0], v[1]);
        project(t, y, &w)
    })
}

fn segments(rng: &mut ChaCha8Rng, rows: usize) -> (Vec<usize>, usize) {
    let k = rng.gen_range(1..=4);
    ((0..rows).map(|_| rng.gen_range(0..k)).collect(), k)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", |rng| {
            let (r, k) = dims(rng);
            let c = rng.gen_range(1..=5);
            let (a, b, w) = (random_matrix(rng, r, k), random_matrix(rng, k, c), random_matrix(rng, r, c));
            check_inputs(&[a, b], |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                project(t, y, &w)
            })
        }),
        ("add", |rng| binary_same(rng, |t, a, b| t.add(a, b).unwrap())),
        ("sub", |rng| binary_same(rng, |t, a, b| t.sub(a, b).unwrap())),
        ("hadamard", |rng| binary_same(rng, |t, a, b| t.hadamard(a, b).unwrap())),
        ("hadamard_self", |rng| unary(rng, plain, |t, a| t.hadamard(a, a).unwrap())),
        ("add_row", |rng| {
            let (r, c) = dims(rng);
            let (a, b, w) = (random_matrix(rng, r, c), random_matrix(rng, 1, c), random_matrix(rng, r, c));
            check_inputs(&[a, b], |t, v| {
                let y = t.add_row(v[0], v[1]).unwrap();
                project(t, y, &w)
            })
        }),
        ("mul_col", |rng| {
            let (r, c) = dims(rng);
            let (a, b, w) = (random_matrix(rng, r, c), random_matrix(rng, r, 1), random_matrix(rng, r, c));
            check_inputs(&[a, b], |t, v| {
                let y = t.mul_col(v[0], v[1]).unwrap();
                project(t, y, &w)
            })
        }),
        ("mul_scalar", |rng| {
            let (r, c) = dims(rng);
            let (a, b, w) = (random_matrix(rng, r, c), random_matrix(rng, 1, 1), random_matrix(rng, r, c));
            check_inputs(&[a, b], |t, v| {
                let y = t.mul_scalar(v[0], v[1]).unwrap();
                project(t, y, &w)
            })
        }),
        ("scalar_mul", |rng| unary(rng, plain, |t, a| t.scalar_mul(a, -1.7))),
        ("add_scalar", |rng| unary(rng, plain, |t, a| {
            let y = t.add_scalar(a, 0.3);
            t.hadamard(y, y).unwrap()
        })),
        ("neg", |rng| unary(rng, plain, |t, a| t.neg(a))),
        ("concat_cols", |rng| {
            let (r, c1) = dims(rng);
            let c2 = rng.gen_range(1..=4);
            let (a, b, w) = (random_matrix(rng, r, c1), random_matrix(rng, r, c2), random_matrix(rng, r, c1 + c2 + c1));
            check_inputs(&[a, b], |t, v| {
                let y = t.concat_cols(&[v[0], v[1], v[0]]).unwrap();
                project(t, y, &w)
            })
        }),
        ("transpose", |rng| {
            let (r, c) = dims(rng);
            let (a, w) = (random_matrix(rng, r, c), random_matrix(rng, c, r));
            check_inputs(&[a], |t, v| {
                let y = t.transpose(v[0]);
                project(t, y, &w)
            })
        }),
        ("row_sum", |rng| {
            let (r, c) = dims(rng);
            let (a, w) = (random_matrix(rng, r, c), random_matrix(rng, r, 1));
            check_inputs(&[a], |t, v| {
                let y = t.row_sum(v[0]);
                project(t, y, &w)
            })
        }),
        ("col_sum", |rng| {
            let (r, c) = dims(rng);
            let (a, w) = (random_matrix(rng, r, c), random_matrix(rng, 1, c));
            check_inputs(&[a], |t, v| {
                let y = t.col_sum(v[0]);
                project(t, y, &w)
            })
        }),
        ("sum", |rng| {
            let (r, c) = dims(rng);
            let a = random_matrix(rng, r, c);
            check_inputs(&[a], |t, v| {
                let s = t.sum(v[0]);
                t.hadamard(s, s).unwrap()
            })
        }),
        ("mean", |rng| {
            let (r, c) = dims(rng);
            let a = random_matrix(rng, r, c);
            check_inputs(&[a], |t, v| {
                let m = t.mean(v[0]);
                t.exp(m)
            })
        }),
        ("gather_rows", |rng| {
            let (r, c) = dims(rng);
            let n = rng.gen_range(1..=7);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..r)).collect();
            let (a, w) = (random_matrix(rng, r, c), random_matrix(rng, n, c));
            check_inputs(&[a], |t, v| {
                let y = t.gather_rows(v[0], &idx).unwrap();
                project(t, y, &w)
            })
        }),
        ("segment_sum", |rng| {
            let (r, c) = dims(rng);
            let (seg, k) = segments(rng, r);
            let (a, w) = (random_matrix(rng, r, c), random_matrix(rng, k, c));
            check_inputs(&[a], |t, v| {
                let y = t.segment_sum(v[0], &seg, k).unwrap();
                project(t, y, &w)
            })
        }),
        ("segment_softmax", |rng| {
            let r = rng.gen_range(1..=8);
            let (seg, k) = segments(rng, r);
            let (a, w) = (random_matrix(rng, r, 1).mapv(|x| 2.0 * x), random_matrix(rng, r, 1));
            check_inputs(&[a], |t, v| {
                let y = t.segment_softmax(v[0], &seg, k).unwrap();
                project(t, y, &w)
            })
        }),
        ("gelu", |rng| unary(rng, |r, a, b| random_matrix(r, a, b).mapv(|x| 3.0 * x), |t, a| t.gelu(a))),
        ("relu", |rng| unary(rng, off_zero, |t, a| t.relu(a))),
        ("softmax_rows", |rng| unary(rng, wide, |t, a| t.softmax_rows(a))),
        ("log_softmax_rows", |rng| unary(rng, wide, |t, a| t.log_softmax_rows(a))),
        ("dropout", |rng| {
            let seed = rng.gen();
            let (r, c) = dims(rng);
            let (a, w) = (random_matrix(rng, r, c), random_matrix(rng, r, c));
            check_inputs(&[a], move |t, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
                let y = t.dropout(v[0], 0.3, true, &mut mask_rng);
                project(t, y, &w)
            })
        }),
        ("layer_norm_rows", |rng| unary(rng, wide, |t, a| t.layer_norm_rows(a))),
        ("l2_normalize_rows", |rng| unary(rng, off_zero, |t, a| t.l2_normalize_rows(a))),
        ("log", |rng| unary(rng, positive, |t, a| t.log(a))),
        ("exp", |rng| unary(rng, plain, |t, a| t.exp(a))),
        ("stop_gradient", |rng| {
            // Gradient of w ⊙ x ⊙ sg(x) must equal the finite-difference
            // gradient of w ⊙ x ⊙ c with c frozen at x.
            let (r, c) = dims(rng);
            let (a, w) = (random_matrix(rng, r, c), random_matrix(rng, r, c));
            let fixed = a.clone();
            let mut report = check_inputs(&[a.clone()], |t, v| {
                let k = t.constant(fixed.clone());
                let y = t.hadamard(v[0], k).unwrap();
                project(t, y, &w)
            });
            let mut t = Tape::new();
            let x = t.leaf(a);
            let sg = t.stop_gradient(x);
            let y = t.hadamard(x, sg).unwrap();
            let loss = project(&mut t, y, &w);
            t.backward(loss).unwrap();
            let expected = &fixed * &w;
            for (got, want) in t.grad(x).unwrap().iter().zip(expected.iter()) {
                let err = (got - want).abs() / want.abs().max(1e-12);
                if err > report.worst {
                    report.worst = err;
                    report.at = format!("stop_gradient: analytic {got} expected {want}");
                }
            }
            report
        }),
    ]
}

/// A random graph from the bundled corpus after up to three augmentations.
pub fn random_graph(rng: &mut ChaCha8Rng) -> CircuitGraph {
    let corpus = bundled_graphs();
    let mut g = corpus[rng.gen_range(0..corpus.len())].clone();
    for _ in 0..rng.gen_range(0..3) {
        g = if rng.gen_bool(0.7) { augment_positive(&g, rng).unwrap().0 } else { augment_negative(&g, rng).unwrap().0 };
    }
    g
}

/// Gradient check of one encoder on a random graph, covering every
/// parameter entry, in train mode with a fixed dropout mask.
pub fn encoder_case(arch: Arch, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph(&mut rng);
    let spec = EncoderSpec { arch, depth: 2, hidden: 4, dropout: 0.2, ..EncoderSpec::default() };
    let mut store = spec.init_params(&mut rng);
    // Nonzero scalars so their gradients are checked away from zero.
    for (name, p) in store.iter_mut() {
        if name.ends_with("phi_h") || name.ends_with("phi_e") || name.ends_with("eps") {
            p.value.fill(rng.gen_range(-0.5..0.5));
        }
    }
    let batch = GraphBatch::single(&g);
    let w = random_matrix(&mut rng, 1, 4);
    let mask_seed = rng.gen();
    check_store(&store, None, &mut rng, |t, b| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let out = spec.encode(t, b, "", &batch, Mode::Train, &mut mask_rng).unwrap();
        project(t, out.graphs, &w)
    })
}

fn small_index(rng: &mut ChaCha8Rng, rows: usize) -> (RelationIndex, Vec<usize>) {
    use circuitcl::augment::Polarity;
    let origins = ["a", "b", "c"];
    let mut parts: Vec<(&str, Polarity)> = Vec::new();
    for k in 0..rows {
        // Two originals per origin guarantee every row a positive.
        let o = origins[k % 3];
        let p = if k < 6 { Polarity::Original } else if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
        parts.push((o, p));
    }
    (RelationIndex::from_parts(parts), (0..rows).collect())
}

pub fn dice_loss_case(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(6..=10);
    let (index, members) = small_index(&mut rng, rows);
    let masks = BatchMasks::new(&index, &members);
    let z = random_matrix(&mut rng, rows, 4);
    let cfg = LossConfig::default();
    // Negative rows have no positives, so they enter only as columns.
    check_inputs(&[z], |t, v| {
        let s = cosine_matrix(t, v[0]).unwrap();
        dice_loss_from_similarity(t, s, &masks, &cfg, false).unwrap()
    })
}

pub fn nt_xent_case(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = rng.gen_range(1..=4);
    let pair: Vec<usize> = (0..2 * half).map(|i| i ^ 1).collect();
    let z = random_matrix(&mut rng, 2 * half, 3);
    check_inputs(&[z], |t, v| nt_xent(t, v[0], &pair, 0.5).unwrap())
}

pub fn simsiam_case(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_mlp(&mut store, PREDICTOR, 3, 5, 3, &mut rng);
    store.insert("z1", random_matrix(&mut rng, 4, 3));
    store.insert("z2", random_matrix(&mut rng, 4, 3));
    // Stop-gradient makes the loss's derivative differ from the full
    // derivative, so only the predictor weights are perturbed.
    let (z1, z2) = (store.get("z1").unwrap().value.clone(), store.get("z2").unwrap().value.clone());
    let mut pred = ParamStore::new();
    for (name, p) in store.iter().filter(|(n, _)| n.starts_with(PREDICTOR)) {
        pred.insert(name.clone(), p.value.clone());
    }
    check_store(&pred, None, &mut rng, |t, b| {
        let a = t.constant(z1.clone());
        let c = t.constant(z2.clone());
        simsiam(t, b, Some(PREDICTOR), a, c).unwrap()
    })
}

/// Full downstream model (frozen branch, both trainable branches and the
/// regression decoder) on a random graph, over a random subset of weights.
pub fn downstream_case(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph(&mut rng);
    let fspec = EncoderSpec { depth: 1, hidden: 3, ..EncoderSpec::default() };
    let frozen = FrozenEncoder { spec: fspec, params: fspec.init_params(&mut rng) };
    let cfg = EncoderConfig { d_d: 1, d_p: 1, d_s: 1, hidden: 4, fusion: Fusion::ConcatLinear };
    let model = DownstreamModel::new(cfg, DecoderConfig { hidden: 4, dropout: 0.3, norm: Norm::Layer }, Head::Regression { out_dim: 2 }, Some(frozen), &mut rng).unwrap();
    let batch = GraphBatch::single(&g);
    let p = encode_params(&g).unwrap();
    let w = random_matrix(&mut rng, 1, 2);
    let mask_seed = rng.gen();
    let frozen_store = model.frozen.as_ref().unwrap().params.clone();
    check_store(&model.params, Some(150), &mut rng, |t, b| {
        let fb = frozen_store.bind(t, false);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let enc = model.encode(t, b, Some(&fb), &batch, Mode::Train, &mut mask_rng).unwrap();
        let y = model.decode(t, b, &enc, &p, &batch, Mode::Train, &mut mask_rng).unwrap();
        project(t, y, &w)
    })
}
