mod common;

use cacc::nn::{AgentNet, LossGrad, NetShape};
use common::{fd_agrees, worst_ratio, FdCase};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn randomized_cases_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    for case in 0..120 {
        let steps = 1 + case % 8;
        let fd = FdCase::random(&mut rng, steps, false);
        let pairs = fd.compare();
        for (k, &(a, n)) in pairs.iter().enumerate() {
            assert!(fd_agrees(a, n), "case {case} ({steps} steps) param {k}: analytic {a} vs numeric {n}");
        }
        checked += pairs.len();
    }
    assert!(checked > 10_000);
}

#[test]
fn single_step_critic_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let fd = FdCase::random(&mut rng, 1, true);
        assert!(worst_ratio(&fd.compare()) <= 1.0);
    }
}

#[test]
fn eight_step_unrolls() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let fd = FdCase::random(&mut rng, 8, false);
        assert!(worst_ratio(&fd.compare()) <= 1.0);
    }
}

#[test]
fn default_sized_net() {
    // Production layer sizes with orthogonal initialisation, sampled parameters.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut fd = FdCase::random(&mut rng, 6, false);
    fd.net = AgentNet::new(NetShape::new(fd.net.shape().obs_dim, 16, 4), &mut rng);
    fd.loss = (0..6)
        .map(|t| LossGrad {
            d_logits: vec![0.3, -0.1 * t as f64, 0.2, -0.4],
            d_value: 0.5,
        })
        .collect();
    assert!(worst_ratio(&fd.compare()) <= 1.0);
}
