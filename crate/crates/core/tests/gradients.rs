mod common;

use circuitcl::encoders::Arch;
use common::grad_suite::{self, INSTANCES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn assert_all(name: &str, reports: impl Iterator<Item = common::GradReport>) {
    for (k, r) in reports.enumerate() {
        assert!(r.passed(), "{name} instance {k}: rel err {} at {}", r.worst, r.at);
        assert!(r.checked > 0);
    }
}

#[test]
fn every_op_matches_finite_differences() {
    for (name, case) in grad_suite::op_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_all(name, (0..INSTANCES).map(|_| case(&mut rng)));
    }
}

#[test]
fn every_encoder_matches_finite_differences() {
    for arch in Arch::ALL {
        assert_all(&format!("{arch:?}"), (0..INSTANCES as u64).map(|s| grad_suite::encoder_case(arch, s)));
    }
}

#[test]
fn losses_match_finite_differences() {
    assert_all("dice", (0..INSTANCES as u64).map(grad_suite::dice_loss_case));
    assert_all("ntxent", (0..INSTANCES as u64).map(grad_suite::nt_xent_case));
    assert_all("simsiam", (0..INSTANCES as u64).map(grad_suite::simsiam_case));
}

#[test]
fn downstream_model_matches_finite_differences() {
    assert_all("downstream", (0..5).map(grad_suite::downstream_case));
}
