//! One pass/fail line per acceptance criterion. Exits nonzero if any fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use cacc::config::RunConfig;
use cacc::consensus::{
    bdc_update, dcea_update, qsgd_step, spread, ternary_quantize, wac_update, EfState, NeighborGraph, Protocol,
};
use cacc::data::{extract_window, parse_trace_csv, resample};
use cacc::env::ObsMode;
use cacc::ovm::{headway_velocity, OvmParams};
use cacc::train::{self, TrainConfig};
use cacc::vehicle::{driving_force, electric_power, fit_energy_poly, rmse_against_physics, GridSpec, VehicleParams};
use common::{fd_agrees, qsgd_scalar_oracle, settling_index, FdCase};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn manifest(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn physics() -> Outcome {
    // Rolling plus aerodynamic drag on the flat, then F·v / (1000 η).
    let p = VehicleParams::default();
    let oracle_force = 1718.4 * 9.8 * 0.011 + 0.5 * 1.206 * 0.32 * 2.455 * 15.0 * 15.0;
    let oracle_power = oracle_force * 15.0 / 1000.0 / 0.9;
    let f = driving_force(&p, 15.0, 0.0);
    let pw = electric_power(&p, 15.0, 0.0);
    let ok = (f - 291.83).abs() <= 0.05
        && (pw - 4.864).abs() <= 0.005
        && (f - oracle_force).abs() <= 1e-9
        && (pw - oracle_power).abs() <= 1e-12;
    let msg = format!("force {f:.4} N (oracle {oracle_force:.4}), power {pw:.5} kW (oracle {oracle_power:.5})");
    check(ok, msg.clone(), msg)
}

fn ovm_boundaries() -> Outcome {
    let p = OvmParams::default();
    let (lo, hi, mid) = (headway_velocity(&p, 5.0), headway_velocity(&p, 35.0), headway_velocity(&p, 20.0));
    let msg = format!("v(5)={lo}, v(35)={hi}, v(20)={mid}");
    check(lo == 0.0 && hi == 30.0 && (mid - 15.0).abs() <= 1e-12, msg.clone(), msg)
}

fn energy_fit() -> Outcome {
    let p = VehicleParams::default();
    let grid = GridSpec::default();
    let fit = fit_energy_poly(&p, grid).map_err(|e| e.to_string())?;
    let held_out = rmse_against_physics(&fit.poly, &p, &grid.offset_points());
    let msg = format!("rmse {:.4} kW, held-out {held_out:.4} kW", fit.rmse_kw);
    check(fit.rmse_kw <= 0.5 && held_out <= 1.0, msg.clone(), msg)
}

fn consensus_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    let rand_agents = |rng: &mut ChaCha8Rng, n: usize, len: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect()
    };
    for case in 0..200 {
        let n = rng.gen_range(2..8);
        let g = NeighborGraph::line(n);
        let w = rand_agents(&mut rng, n, 6);
        let eps = rng.gen_range(0.001..0.2);
        let tau = rng.gen_range(0.0..0.5);

        let out = bdc_update(&w, &g, eps, tau).unwrap();
        for (i, (a, b)) in w.iter().zip(&out).enumerate() {
            let bound = 2.0 * eps * g.degree(i) as f64 + 1e-12;
            if a.iter().zip(b).any(|(x, y)| (x - y).abs() > bound) {
                failures.push(format!("bdc bound, case {case}"));
            }
        }

        // Shared quantized signs leave BDC at rest.
        let signs: Vec<f64> = (0..6).map(|_| rng.gen_range(-1i32..=1) as f64).collect();
        let same_signs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                signs
                    .iter()
                    .map(|&s| if s == 0.0 { rng.gen_range(-tau..=tau) } else { s * (tau + rng.gen_range(0.01..1.0)) })
                    .collect()
            })
            .collect();
        let q0 = ternary_quantize(&same_signs[0], tau);
        assert!(same_signs.iter().all(|w| ternary_quantize(w, tau) == q0));
        if bdc_update(&same_signs, &g, eps, tau).unwrap() != same_signs {
            failures.push(format!("bdc fixed point, case {case}"));
        }

        let mut d = w.clone();
        let mean0: Vec<f64> = (0..6).map(|k| d.iter().map(|a| a[k]).sum::<f64>() / n as f64).collect();
        let eps_d = rng.gen_range(0.0..0.25);
        for _ in 0..20 {
            d = dcea_update(&d, &g, eps_d).unwrap();
        }
        let drift = (0..6)
            .map(|k| (d.iter().map(|a| a[k]).sum::<f64>() / n as f64 - mean0[k]).abs())
            .fold(0.0, f64::max);
        if drift > 1e-12 {
            failures.push(format!("dcea drift {drift:e}, case {case}"));
        }
    }
    let g = NeighborGraph::line(4);
    let mut w = rand_agents(&mut rng, 4, 8);
    for _ in 0..500 {
        w = wac_update(&w, &g).unwrap();
    }
    let wac = spread(&w);
    if wac > 1e-3 {
        failures.push(format!("wac spread {wac:e}"));
    }
    check(
        failures.is_empty(),
        format!("200 random cases, wac spread after 500 rounds {wac:.2e}"),
        failures.join("; "),
    )
}

fn qsgd_convergence() -> Outcome {
    let oracle = qsgd_scalar_oracle(0.0, 1.0, 3.0, 0.05, 2000);
    let mut w = vec![0.0];
    let mut ef = EfState::zeros(1);
    for (t, expected) in oracle.iter().enumerate().skip(1) {
        let g = [w[0] - 3.0];
        qsgd_step(&mut w, &g, &mut ef, 0.05, 0.0).unwrap();
        if w[0] != *expected {
            return Err(format!("step {t}: {} vs oracle {expected}", w[0]));
        }
    }
    match settling_index(&oracle, 3.0, 0.1) {
        Some(s) if s <= 200 => Ok(format!("settles at step {s}, matches oracle for 2000 steps")),
        other => Err(format!("settling index {other:?}")),
    }
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cases = 0;
    let mut eight_step = 0;
    for i in 0..120 {
        let steps = if i % 4 == 0 { 8 } else { 1 + i % 8 };
        let case = FdCase::random(&mut rng, steps, i % 10 == 9);
        for (k, (a, n)) in case.compare().into_iter().enumerate() {
            if !fd_agrees(a, n) {
                return Err(format!("case {i} ({steps} steps) param {k}: analytic {a:e}, numeric {n:e}"));
            }
        }
        cases += 1;
        eight_step += usize::from(steps == 8);
    }
    check(cases >= 100 && eight_step > 0, format!("{cases} cases ({eight_step} with 8-step unrolls)"), "too few cases".into())
}

fn training_smoke() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.scenario.n_vehicles = 4;
    cfg.train = TrainConfig::desk();
    cfg.train.obs_mode = ObsMode::Ia2c;
    cfg.train.consensus.protocol = Protocol::Bdc;
    cfg.validate().map_err(|e| e.to_string())?;
    let exp = cfg.experiment().map_err(|e| e.to_string())?;
    let results: Vec<Result<(u64, f64, f64, train::EvalStats), String>> = std::thread::scope(|s| {
        let handles: Vec<_> = [0u64, 1, 2]
            .into_iter()
            .map(|seed| {
                let (cfg, exp) = (&cfg, &exp);
                s.spawn(move || {
                    let (nets, log) = train::train(&cfg.train, exp, seed).map_err(|e| e.to_string())?;
                    let (head, tail) = log.head_tail_means(0.1);
                    let report = train::evaluate(&nets, exp, cfg.train.obs_mode, cfg.train.eval_seeds).map_err(|e| e.to_string())?;
                    Ok((seed, head, tail, report.aggregate))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut improved = 0;
    let mut all_safe = true;
    let mut parts = Vec::new();
    for r in results {
        let (seed, head, tail, a) = r?;
        improved += usize::from(tail > head);
        let safe = a.collisions == 0 && (a.ivs_mean - 20.0).abs() <= 0.15 * 20.0;
        all_safe &= safe;
        parts.push(format!(
            "seed {seed}: {head:.0} -> {tail:.0}, ivs {:.2} m, collisions {}",
            a.ivs_mean, a.collisions
        ));
    }
    let msg = format!("{improved}/3 improved; {}", parts.join("; "));
    check(improved >= 2 && all_safe, msg.clone(), msg)
}

fn comm_accounting() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.train.total_steps = 3000;
    let exp = cfg.experiment().map_err(|e| e.to_string())?;
    let runs = train::compare_protocols(&cfg.train, &exp, &[Protocol::Bdc, Protocol::Wac], 0).map_err(|e| e.to_string())?;
    let (bdc, wac) = (&runs[0].log, &runs[1].log);
    let rows_match = bdc.rows.len() == wac.rows.len()
        && bdc.rows.iter().zip(&wac.rows).all(|(b, w)| b.comm_bits_cum * 16 == w.comm_bits_cum);
    let (b, w) = (bdc.total_bits(), wac.total_bits());
    let msg = format!("bdc {b} bits, wac {w} bits");
    check(rows_match && b > 0 && b * 16 == w, msg.clone(), msg)
}

fn run_cli(args: &[&str], out: &Path) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_cacc"))
        .args(args)
        .arg("--output-dir")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let trace = manifest("tests/fixtures/trace_10hz_600s.csv");
    let trace = trace.to_str().unwrap();
    let commands: [&[&str]; 5] = [
        &["train", "--steps", "1200", "--seed", "11"],
        &["eval", "--seed", "11", "--eval-seeds", "5"],
        &["fit-energy"],
        &["consensus-bench", "--rounds", "100"],
        &["replay", "--trace", trace, "--window", "316:376"],
    ];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        for args in commands {
            run_cli(args, d.path())?;
        }
    }
    let (a, b) = (csv_files(dirs[0].path()), csv_files(dirs[1].path()));
    let names = |v: &[PathBuf]| v.iter().map(|p| p.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    if names(&a) != names(&b) {
        return Err("different file sets".into());
    }
    for (x, y) in a.iter().zip(&b) {
        if std::fs::read(x).unwrap() != std::fs::read(y).unwrap() {
            return Err(format!("{} differs", x.file_name().unwrap().to_string_lossy()));
        }
    }
    Ok(format!("{} CSV files byte-identical across two runs", a.len()))
}

fn replay_pipeline() -> Outcome {
    let trace = manifest("tests/fixtures/trace_10hz_600s.csv");
    let table = resample(&parse_trace_csv(&trace).map_err(|e| e.to_string())?, 0.1).map_err(|e| e.to_string())?;
    let profile = extract_window(&table, "v1", 316.0, 376.0, 0.1).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    run_cli(&["replay", "--trace", trace.to_str().unwrap(), "--window", "316:376"], dir.path())?;
    let summary = std::fs::read_to_string(dir.path().join("replay_summary.csv")).unwrap();
    let golden = std::fs::read_to_string(manifest("tests/golden/replay_summary.csv")).unwrap();
    let rollout = std::fs::read_to_string(dir.path().join("rollout.csv")).unwrap();
    let header = std::fs::read_to_string(manifest("tests/golden/rollout_header.csv")).unwrap();
    let ok = profile.velocities.len() == 600 && summary == golden && rollout.starts_with(&header);
    let msg = format!("{} samples, summary matches golden: {}", profile.velocities.len(), summary == golden);
    check(ok, msg.clone(), msg)
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("physics exactness", physics),
        ("OVM boundary values", ovm_boundaries),
        ("energy-fit quality", energy_fit),
        ("quantizer and consensus properties", consensus_properties),
        ("QSGD-EF convergence", qsgd_convergence),
        ("gradient correctness", gradients),
        ("training smoke", training_smoke),
        ("communication accounting", comm_accounting),
        ("determinism", determinism),
        ("replay pipeline", replay_pipeline),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
