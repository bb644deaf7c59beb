use cacc::config::RunConfig;
use cacc::train::{self, TrainConfig};

#[test]
fn two_vehicle_platoon_improves_on_most_seeds() {
    let mut cfg = RunConfig::default();
    cfg.scenario.n_vehicles = 2;
    cfg.train = TrainConfig {
        total_steps: 20_000,
        ..TrainConfig::desk()
    };
    let exp = cfg.experiment().unwrap();
    let outcomes: Vec<(f64, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..5u64)
            .map(|seed| {
                let (cfg, exp) = (&cfg, &exp);
                s.spawn(move || train::train(&cfg.train, exp, seed).unwrap().1.head_tail_means(0.1))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let improved = outcomes.iter().filter(|(head, tail)| tail > head).count();
    assert!(improved >= 4, "{outcomes:?}");
}
