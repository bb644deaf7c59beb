mod common;

use cacc::consensus::{
    bdc_update, dcea_update, qsgd_step, spread, ternary_quantize, wac_update, EfState, NeighborGraph,
};
use common::{qsgd_scalar_oracle, settling_index};
use proptest::prelude::*;

fn agents(n: usize, len: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, len), n)
}

fn means(w: &[Vec<f64>]) -> Vec<f64> {
    (0..w[0].len())
        .map(|k| w.iter().map(|a| a[k]).sum::<f64>() / w.len() as f64)
        .collect()
}

fn permuted(graph: &NeighborGraph, perm: &[usize]) -> NeighborGraph {
    let mut edges = Vec::new();
    for i in 0..graph.n() {
        for &j in graph.neighbors(i) {
            if i < j {
                edges.push((perm[i], perm[j]));
            }
        }
    }
    NeighborGraph::from_edges(graph.n(), &edges).unwrap()
}

#[test]
fn wac_contracts_a_four_node_path() {
    let g = NeighborGraph::line(4);
    let mut w: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64 / 3.0, 1.0 - i as f64 / 3.0, (i % 2) as f64]).collect();
    assert_eq!(spread(&w), 1.0);
    let mut prev = spread(&w);
    for _ in 0..500 {
        w = wac_update(&w, &g).unwrap();
        let s = spread(&w);
        assert!(s <= prev + 1e-15);
        prev = s;
    }
    assert!(prev <= 1e-3, "spread {prev}");
}

#[test]
fn qsgd_reaches_and_stays_near_three() {
    // Starts up to 3 away; farther ones overshoot while the residual unwinds.
    for w0 in [0.0, 1.0, 2.0, 2.5, 3.0, 3.04, 3.5, 4.0, 5.0, 6.0] {
        let oracle = qsgd_scalar_oracle(w0, 1.0, 3.0, 0.05, 2000);
        let mut w = vec![w0];
        let mut ef = EfState::zeros(1);
        for (t, expected) in oracle.iter().enumerate().skip(1) {
            let grad = [w[0] - 3.0];
            qsgd_step(&mut w, &grad, &mut ef, 0.05, 0.0).unwrap();
            assert_eq!(w[0], *expected, "w0={w0} step {t}");
        }
        let settle = settling_index(&oracle, 3.0, 0.1).expect("never settles");
        assert!(settle <= 200, "w0={w0} settles at {settle}");
    }
}

#[test]
fn qsgd_small_quadratic_example() {
    // ½w² from 1 with lr 0.1: up to rounding, |w| ≤ 0.2 for good from step 16.
    let path = qsgd_scalar_oracle(1.0, 1.0, 0.0, 0.1, 200);
    assert_eq!(settling_index(&path, 0.0, 0.2 + 1e-9), Some(16));
    let mut w = vec![1.0];
    let mut ef = EfState::zeros(1);
    for expected in &path[1..] {
        let g = [w[0]];
        qsgd_step(&mut w, &g, &mut ef, 0.1, 0.0).unwrap();
        assert_eq!(w[0], *expected);
    }
}

#[test]
fn qsgd_residual_is_quantization_error() {
    let mut w = vec![0.0, 1.0, -2.0];
    let mut ef = EfState {
        residual: vec![0.3, -0.5, 0.0],
    };
    let grad = [0.1, 0.2, -0.7];
    qsgd_step(&mut w, &grad, &mut ef, 0.5, 0.0).unwrap();
    let p = [0.4, -0.3, -0.7];
    let q = ternary_quantize(&p, 0.0);
    for k in 0..3 {
        assert_eq!(ef.residual[k], p[k] - q[k]);
    }
    assert_eq!(w, vec![-0.5, 1.5, -1.5]);
}

proptest! {
    #[test]
    fn quantizer_is_idempotent(x in proptest::collection::vec(-5.0f64..5.0, 1..20), tau in 0.0f64..0.99) {
        let q = ternary_quantize(&x, tau);
        prop_assert_eq!(ternary_quantize(&q, tau), q);
    }

    #[test]
    fn bdc_is_bounded(w in agents(5, 6), eps in 0.001f64..0.2, tau in 0.0f64..0.5) {
        let g = NeighborGraph::line(5);
        let next = bdc_update(&w, &g, eps, tau).unwrap();
        for i in 0..5 {
            let bound = 2.0 * eps * g.degree(i) as f64;
            for k in 0..6 {
                prop_assert!((next[i][k] - w[i][k]).abs() <= bound * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn bdc_fixed_point_under_shared_signs(
        mags in proptest::collection::vec(proptest::collection::vec(0.01f64..3.0, 6), 4),
        signs in proptest::collection::vec(prop::bool::ANY, 6),
        eps in 0.001f64..0.2,
    ) {
        let w: Vec<Vec<f64>> = mags
            .iter()
            .map(|m| m.iter().zip(&signs).map(|(a, &s)| if s { *a } else { -*a }).collect())
            .collect();
        let g = NeighborGraph::line(4);
        prop_assert_eq!(bdc_update(&w, &g, eps, 0.0).unwrap(), w);
    }

    #[test]
    fn dcea_conserves_the_mean(w in agents(6, 5), eps in 0.0f64..0.25, rounds in 1usize..50) {
        let g = NeighborGraph::line(6);
        let before = means(&w);
        let mut cur = w;
        let mut prev_spread = spread(&cur);
        for _ in 0..rounds {
            cur = dcea_update(&cur, &g, eps).unwrap();
            let s = spread(&cur);
            prop_assert!(s <= prev_spread + 1e-12);
            prev_spread = s;
        }
        for (a, b) in before.iter().zip(means(&cur)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn wac_spread_never_grows(w in agents(5, 4)) {
        let g = NeighborGraph::line(5);
        let next = wac_update(&w, &g).unwrap();
        prop_assert!(spread(&next) <= spread(&w) + 1e-12);
    }

    #[test]
    fn relabeling_agents_permutes_the_result(
        w in agents(5, 3),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        eps in 0.001f64..0.2,
    ) {
        let g = NeighborGraph::line(5);
        let pg = permuted(&g, &perm);
        let mut pw = vec![Vec::new(); 5];
        for i in 0..5 {
            pw[perm[i]] = w[i].clone();
        }
        let runs = [
            (bdc_update(&w, &g, eps, 0.0).unwrap(), bdc_update(&pw, &pg, eps, 0.0).unwrap()),
            (wac_update(&w, &g).unwrap(), wac_update(&pw, &pg).unwrap()),
            (dcea_update(&w, &g, eps).unwrap(), dcea_update(&pw, &pg, eps).unwrap()),
        ];
        for (plain, relabeled) in &runs {
            for i in 0..5 {
                for k in 0..3 {
                    prop_assert!((plain[i][k] - relabeled[perm[i]][k]).abs() <= 1e-14);
                }
            }
        }
    }

    #[test]
    fn qsgd_ef_settles_on_quadratics(
        a in 0.25f64..4.0,
        b in -5.0f64..5.0,
        offset in -1.0f64..1.0,
        lr in 0.01f64..0.1,
    ) {
        // Initial gradient magnitude at most 3.
        let w0 = b + offset * 3.0 / a;
        let horizon = (10.0 / (lr * a)).ceil() as usize;
        let path = qsgd_scalar_oracle(w0, a, b, lr, 4 * horizon);
        let radius = 2.0 * lr * (1.0f64).max(1.0 / a);
        let settle = settling_index(&path, b, radius);
        prop_assert!(settle.is_some_and(|s| s <= horizon), "settle {:?} horizon {}", settle, horizon);

        let mut w = vec![w0];
        let mut ef = EfState::zeros(1);
        for expected in &path[1..] {
            let g = [a * (w[0] - b)];
            qsgd_step(&mut w, &g, &mut ef, lr, 0.0).unwrap();
            prop_assert_eq!(w[0], *expected);
        }
    }
}
