//! Oracles shared by the integration and acceptance targets.

#![allow(dead_code)]

use cacc::env::N_ACTIONS;
use cacc::nn::{AgentNet, LossGrad, NetShape};
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-6;

/// A random net, a random observation sequence and a random linear loss
/// `Σ_t c_t·logits_t + e_t·value_t` over it.
pub struct FdCase {
    pub net: AgentNet,
    pub observations: Vec<Vec<f64>>,
    pub loss: Vec<LossGrad>,
}

impl FdCase {
    pub fn random<R: Rng>(rng: &mut R, steps: usize, critic_only: bool) -> Self {
        let shape = NetShape::new(rng.gen_range(2..6), rng.gen_range(2..5), N_ACTIONS);
        let flat: Vec<f64> = (0..shape.n_params()).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let net = AgentNet::from_flat(shape, &flat).unwrap();
        let observations = (0..steps)
            .map(|_| (0..shape.obs_dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let loss = (0..steps)
            .map(|_| LossGrad {
                d_logits: (0..N_ACTIONS)
                    .map(|_| if critic_only { 0.0 } else { rng.gen_range(-1.0..1.0) })
                    .collect(),
                d_value: rng.gen_range(-1.0..1.0),
            })
            .collect();
        Self { net, observations, loss }
    }

    pub fn loss_at(&self, net: &AgentNet) -> f64 {
        let records = net.unroll(&self.observations).unwrap();
        records
            .iter()
            .zip(&self.loss)
            .map(|(r, g)| {
                r.logits.iter().zip(&g.d_logits).map(|(z, c)| z * c).sum::<f64>() + r.value * g.d_value
            })
            .sum()
    }

    /// `(analytic, central difference)` for every parameter.
    pub fn compare(&self) -> Vec<(f64, f64)> {
        let records = self.net.unroll(&self.observations).unwrap();
        let analytic = self.net.backward(&records, &self.loss).unwrap().to_flat();
        let base = self.net.to_flat();
        let mut probe = self.net.clone();
        let mut out = Vec::with_capacity(base.len());
        for k in 0..base.len() {
            let mut theta = base.clone();
            theta[k] = base[k] + FD_STEP;
            probe.set_flat(&theta).unwrap();
            let up = self.loss_at(&probe);
            theta[k] = base[k] - FD_STEP;
            probe.set_flat(&theta).unwrap();
            let down = self.loss_at(&probe);
            out.push((analytic[k], (up - down) / (2.0 * FD_STEP)));
        }
        out
    }
}

pub fn fd_agrees(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= FD_ABS_FLOOR || err <= FD_REL_TOL * analytic.abs().max(numeric.abs())
}

/// Worst violation ratio over all parameters (≤ 1 means every entry passes).
pub fn worst_ratio(pairs: &[(f64, f64)]) -> f64 {
    pairs
        .iter()
        .map(|&(a, n)| {
            let err = (a - n).abs();
            (err / FD_ABS_FLOOR).min(err / (FD_REL_TOL * a.abs().max(n.abs())))
        })
        .fold(0.0, f64::max)
}

/// Scalar ternary error-feedback descent on `½a(w − b)²`, written out
/// directly: returns `w_0 … w_steps`.
pub fn qsgd_scalar_oracle(w0: f64, a: f64, b: f64, lr: f64, steps: usize) -> Vec<f64> {
    let mut w = w0;
    let mut e = 0.0;
    let mut path = vec![w];
    for _ in 0..steps {
        let p = a * (w - b) + e;
        let q = if p > 0.0 {
            1.0
        } else if p < 0.0 {
            -1.0
        } else {
            0.0
        };
        w -= lr * q;
        e = p - q;
        path.push(w);
    }
    path
}

/// First index from which every iterate stays within `radius` of `b`.
pub fn settling_index(path: &[f64], b: f64, radius: f64) -> Option<usize> {
    let last_out = path.iter().rposition(|w| (w - b).abs() > radius);
    match last_out {
        None => Some(0),
        Some(i) if i + 1 < path.len() => Some(i + 1),
        Some(_) => None,
    }
}
