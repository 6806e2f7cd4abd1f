//! Shared helpers for the integration tests: finite-difference gradient
//! checks and independent graph oracles.
#![allow(dead_code)]

pub mod grad_suite;
pub mod oracles;

use circuitcl::autodiff::{Bound, Matrix, ParamStore, Tape, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
/// Absolute floor under which a coordinate's gradient counts as zero.
pub const ABS_FLOOR: f64 = 1e-8;

/// Worst relative error seen by a check, with its coordinate.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub worst: f64,
    pub at: String,
    pub checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.worst <= REL_TOL
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Random weights that turn a matrix output into a scalar with a dense,
/// non-trivial gradient.
pub fn project(tape: &mut Tape, out: Var, weights: &Matrix) -> Var {
    let w = tape.constant(weights.clone());
    let prod = tape.hadamard(out, w).expect("projection shape");
    tape.sum(prod)
}

/// Central differences for every entry of every input of `f`.
pub fn check_inputs(inputs: &[Matrix], f: impl Fn(&mut Tape, &[Var]) -> Var) -> GradReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Matrix> = vars
        .iter()
        .zip(inputs)
        .map(|(v, m)| tape.grad(*v).cloned().unwrap_or_else(|| Matrix::zeros(m.dim())))
        .collect();

    let eval = |perturbed: &[Matrix]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|m| t.constant(m.clone())).collect();
        let l = f(&mut t, &vs);
        t.scalar(l)
    };
    let mut report = GradReport { worst: 0.0, at: String::new(), checked: 0 };
    let mut work = inputs.to_vec();
    for (k, m) in inputs.iter().enumerate() {
        for idx in ndarray::indices(m.dim()) {
            let x = m[idx];
            work[k][idx] = x + FD_STEP;
            let up = eval(&work);
            work[k][idx] = x - FD_STEP;
            let down = eval(&work);
            work[k][idx] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = rel_err(analytic[k][idx], numeric);
            report.checked += 1;
            if err > report.worst {
                report.worst = err;
                report.at = format!("input {k} {idx:?}: analytic {} numeric {numeric}", analytic[k][idx]);
            }
        }
    }
    report
}

/// Central differences for up to `max_coords` randomly chosen parameter
/// entries of `store` (all entries when `max_coords` is `None`).
pub fn check_store<R: Rng>(
    store: &ParamStore,
    max_coords: Option<usize>,
    rng: &mut R,
    f: impl Fn(&mut Tape, &Bound) -> Var,
) -> GradReport {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let loss = f(&mut tape, &bound);
    tape.backward(loss).expect("scalar loss");
    let mut grads = store.clone();
    grads.zero_grad();
    grads.accumulate_grads(&tape, &bound);

    let mut coords: Vec<(String, (usize, usize))> = store
        .iter()
        .flat_map(|(name, p)| ndarray::indices(p.value.dim()).into_iter().map(move |i| (name.clone(), i)))
        .collect();
    if let Some(n) = max_coords {
        use rand::seq::SliceRandom;
        coords.shuffle(rng);
        coords.truncate(n);
    }
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let b = s.bind(&mut t, false);
        let l = f(&mut t, &b);
        t.scalar(l)
    };
    let mut work = store.clone();
    let mut report = GradReport { worst: 0.0, at: String::new(), checked: 0 };
    for (name, idx) in coords {
        let x = store.get(&name).expect("listed").value[idx];
        work.get_mut(&name).expect("listed").value[idx] = x + FD_STEP;
        let up = eval(&work);
        work.get_mut(&name).expect("listed").value[idx] = x - FD_STEP;
        let down = eval(&work);
        work.get_mut(&name).expect("listed").value[idx] = x;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads.get(&name).expect("listed").grad[idx];
        let err = rel_err(analytic, numeric);
        report.checked += 1;
        if err > report.worst {
            report.worst = err;
            report.at = format!("{name} {idx:?}: analytic {analytic} numeric {numeric}");
        }
    }
    report
}
