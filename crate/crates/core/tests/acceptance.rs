//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every check prints its own PASS/FAIL line; exits nonzero on any failure.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use fedpecd::design::{solve_design, DesignProblem, DEFAULT_MAX_SWEEPS, DEFAULT_TOL};
use fedpecd::harness::{generate_synthetic, mean_stderr, run_sweep, trial_seed, SweepConfig, SyntheticSpec, ThetaSpec};
use fedpecd::linalg::{Matrix, Vector};
use fedpecd::messages::{EstimateEntry, LocalEstimateUpload};
use fedpecd::protocol::{build_schedule, run_protocol, RunConfig, Variant};
use fedpecd::server::{aggregate_init, aggregate_phase, build_roster, GlobalModel, InitWeighting};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn desk_scenario(agents: usize) -> fedpecd::Scenario {
    let spec = SyntheticSpec {
        agents,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, 2024).expect("desk scenario")
}

/// Small scenario shared by the coverage and retention checks.
struct SmallRuns {
    violation_runs: usize,
    eliminated_runs: usize,
    runs: usize,
}

fn small_runs() -> SmallRuns {
    let spec = SyntheticSpec {
        arms: 5,
        d: 2,
        agents: 5,
        theta: ThetaSpec::Shared { theta: vec![1.0, 0.0] },
        sigma: 1.0,
        ..SyntheticSpec::default()
    };
    let scenario = generate_synthetic(&spec, 11).expect("small scenario");
    let schedule = build_schedule(1, 2, 5, 1 << 10).unwrap();
    let cfg = RunConfig {
        delta: 0.1,
        ..RunConfig::default()
    };
    let mut out = SmallRuns {
        violation_runs: 0,
        eliminated_runs: 0,
        runs: 200,
    };
    for t in 0..out.runs {
        let trace = run_protocol(&scenario, &schedule, &cfg, trial_seed(5, t)).unwrap();
        out.violation_runs += trace.diagnostics.coverage_violation as usize;
        out.eliminated_runs += trace.diagnostics.optimal_eliminated as usize;
    }
    out
}

fn coverage(r: &SmallRuns) -> Outcome {
    let rate = r.violation_runs as f64 / r.runs as f64;
    outcome(
        rate <= 0.15,
        format!("{} of {} runs had a confidence violation (rate {rate:.3}, bound 0.15)", r.violation_runs, r.runs),
    )
}

fn retention(r: &SmallRuns) -> Outcome {
    let rate = r.eliminated_runs as f64 / r.runs as f64;
    outcome(
        rate <= 0.15,
        format!("{} of {} runs dropped an optimal arm (rate {rate:.3}, bound 0.15)", r.eliminated_runs, r.runs),
    )
}

fn exact_beats_hidden() -> Outcome {
    let scenario = desk_scenario(25);
    let cfg = SweepConfig {
        variants: vec![Variant::Exact, Variant::Hidden],
        agents: vec![25],
        trials: 20,
        horizon: 1 << 13,
        seed: 3,
        workers: 1,
        ..SweepConfig::default()
    };
    let r = run_sweep(&scenario, &cfg).unwrap();
    let exact = r.cell(Variant::Exact, 25).unwrap();
    let hidden = r.cell(Variant::Hidden, 25).unwrap();
    let diffs: Vec<f64> = hidden
        .trials
        .iter()
        .zip(&exact.trials)
        .map(|(h, e)| {
            assert_eq!(h.seed, e.seed);
            h.final_regret - e.final_regret
        })
        .collect();
    let (mean, se) = mean_stderr(&diffs);
    outcome(
        exact.final_mean < hidden.final_mean && mean > se,
        format!(
            "exact {:.2} vs hidden {:.2}; paired difference {mean:.2} +/- {se:.2}",
            exact.final_mean, hidden.final_mean
        ),
    )
}

fn collaboration_gain() -> Outcome {
    let scenario = desk_scenario(50);
    let cfg = SweepConfig {
        variants: vec![Variant::Hidden],
        agents: vec![10, 25, 50],
        trials: 20,
        horizon: 1 << 13,
        seed: 4,
        workers: 1,
        ..SweepConfig::default()
    };
    let r = run_sweep(&scenario, &cfg).unwrap();
    let cells: Vec<_> = [10, 25, 50].iter().map(|&m| r.cell(Variant::Hidden, m).unwrap()).collect();
    let monotone = cells.windows(2).all(|w| w[1].final_mean <= w[0].final_mean);
    let se = (cells[0].final_stderr.powi(2) + cells[2].final_stderr.powi(2)).sqrt();
    let gap = cells[0].final_mean - cells[2].final_mean;
    outcome(
        monotone && gap > se,
        format!(
            "per-agent R(T): M=10 {:.2}, M=25 {:.2}, M=50 {:.2}; M=10 minus M=50 = {gap:.2} vs stderr {se:.2}",
            cells[0].final_mean, cells[1].final_mean, cells[2].final_mean
        ),
    )
}

fn sublinearity() -> Outcome {
    let scenario = desk_scenario(150);
    let per_round = |horizon: u64| {
        let schedule = build_schedule(1, 2, scenario.arms(), horizon).unwrap();
        let xs: Vec<f64> = (0..20)
            .map(|t| {
                let trace = run_protocol(&scenario, &schedule, &RunConfig::default(), trial_seed(6, t)).unwrap();
                trace.final_regret() / horizon as f64
            })
            .collect();
        mean_stderr(&xs).0
    };
    let short = per_round(1 << 10);
    let long = per_round(1 << 13);
    outcome(
        long <= 0.5 * short,
        format!("R(T)/T = {short:.4} at T=2^10, {long:.4} at T=2^13 (ratio {:.3}, bound 0.5)", long / short),
    )
}

fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

fn comm_scaling() -> Outcome {
    let big = desk_scenario(20);
    let small = big.with_agents(10).unwrap();
    let mut hs = Vec::new();
    let mut costs = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    let mut ratios = Vec::new();
    for e in [10u32, 12, 14, 16] {
        let schedule = build_schedule(1, 2, big.arms(), 1 << e).unwrap();
        let c10 = run_protocol(&small, &schedule, &RunConfig::default(), 8).unwrap().meter.total() as f64;
        let c20 = run_protocol(&big, &schedule, &RunConfig::default(), 8).unwrap().meter.total() as f64;
        hs.push(schedule.phases() as f64);
        costs.push(c10);
        let ratio = c20 / c10;
        worst_ratio = worst_ratio.max((ratio / 2.0 - 1.0).abs());
        ratios.push(ratio);
    }
    let r2 = r_squared(&hs, &costs);
    outcome(
        r2 >= 0.99 && worst_ratio <= 0.1,
        format!(
            "H = {hs:?}, cost(M=10) = {costs:?}, R^2 = {r2:.4}; cost(2M)/cost(M) = {:?}",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
        ),
    )
}

/// `sum_a log det(sum_i pi[i][a] e e^T)`, minus infinity once singular.
fn log_det_objective(dirs: &[[Vector; 2]; 2], x: f64, y: f64) -> f64 {
    let mut total = 0.0;
    for a in 0..2 {
        let g = &dirs[0][a] * dirs[0][a].transpose() * [x, 1.0 - x][a]
            + &dirs[1][a] * dirs[1][a].transpose() * [y, 1.0 - y][a];
        let det = g.determinant();
        if det <= 0.0 {
            return f64::NEG_INFINITY;
        }
        total += det.ln();
    }
    total
}

fn unit(x: f64, y: f64) -> Vector {
    Vector::from_vec(vec![x, y]).normalize()
}

fn design_oracle() -> Outcome {
    let dirs = [[unit(1.0, 0.0), unit(0.6, 0.8)], [unit(0.3, 1.0), unit(1.0, -0.2)]];
    let prob = DesignProblem::new(
        2,
        dirs.iter()
            .map(|row| vec![(0, row[0].clone()), (1, row[1].clone())])
            .collect(),
    )
    .unwrap();
    let sol = solve_design(&prob, DEFAULT_MAX_SWEEPS, DEFAULT_TOL).unwrap();
    let x = sol.allocation.get(0, 0).unwrap();
    let y = sol.allocation.get(1, 0).unwrap();
    let solver_value = log_det_objective(&dirs, x, y);
    let mut grid_best = f64::NEG_INFINITY;
    for i in 0..=1000 {
        for j in 0..=1000 {
            grid_best = grid_best.max(log_det_objective(&dirs, i as f64 / 1000.0, j as f64 / 1000.0));
        }
    }
    let grid_err = (sol.objective - grid_best).abs().max((solver_value - grid_best).abs());

    let frame = (0..3)
        .map(|a| {
            let mut e = Vector::zeros(3);
            e[a] = 1.0;
            (a, e)
        })
        .collect();
    let single = DesignProblem::new(3, vec![frame]).unwrap();
    let s = solve_design(&single, DEFAULT_MAX_SWEEPS, DEFAULT_TOL).unwrap();
    let uni_err = s
        .allocation
        .agent(0)
        .iter()
        .map(|(_, w)| (w - 1.0 / 3.0).abs())
        .fold(0.0, f64::max);
    outcome(
        grid_err <= 1e-4 && uni_err <= 1e-6,
        format!(
            "objective {:.6} at ({x:.4}, {y:.4}) vs grid {:.6} (diff {grid_err:.2e}); frame weights off uniform by {uni_err:.2e}",
            sol.objective, grid_best
        ),
    )
}

/// Gram, pseudo-inverse (via SVD) and estimate straight from the formulas.
/// `None` when the Gram is close to singular without being singular; there
/// any two pseudo-inverses legitimately differ by roundoff times the
/// condition number.
fn direct_model(terms: &[(Vector, f64, f64)], d: usize) -> Option<(Vector, Matrix)> {
    // (theta, weight in the Gram, weight in the linear term)
    let mut g = Matrix::zeros(d, d);
    let mut lin = Vector::zeros(d);
    for (t, wg, wl) in terms {
        g += t * t.transpose() * *wg;
        lin += t * *wl;
    }
    let svd = g.clone().svd(true, true);
    let top = svd.singular_values.max();
    let cut = top * 1e-10;
    if svd.singular_values.iter().any(|&s| s > cut && s < top * 1e-4) {
        return None;
    }
    let v = svd.pseudo_inverse(cut).unwrap();
    let theta = &v * lin;
    Some((theta, v))
}

fn rel_err(got: (&Vector, &Matrix), want: (&Vector, &Matrix)) -> f64 {
    let t = (got.0 - want.0).norm() / want.0.norm().max(1e-12);
    let v = (got.1 - want.1).norm() / want.1.norm().max(1e-12);
    t.max(v)
}

/// Worst deviation on one random instance, `None` if it has to be redrawn.
fn aggregation_instance(rng: &mut ChaCha8Rng) -> Option<f64> {
    let m = rng.random_range(1..=3);
    let k = rng.random_range(1..=3);
    let d = rng.random_range(1..=3);
    let rand_vec = |rng: &mut ChaCha8Rng| Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let init: Vec<LocalEstimateUpload> = (0..m)
        .map(|i| LocalEstimateUpload {
            agent: i,
            phase: 0,
            estimates: (0..k)
                .map(|a| EstimateEntry {
                    arm: a,
                    theta_hat: rand_vec(rng).iter().copied().collect(),
                    pulls: 1,
                })
                .collect(),
        })
        .collect();
    let model = aggregate_init(&init, k, d, InitWeighting::SquaredNorm).unwrap();
    let printed = aggregate_init(&init, k, d, InitWeighting::Norm).unwrap();
    let mut worst: f64 = 0.0;
    for a in 0..k {
        let thetas: Vec<Vector> = init
            .iter()
            .map(|u| Vector::from_vec(u.estimates[a].theta_hat.clone()))
            .collect();
        let sq: Vec<_> = thetas.iter().map(|t| (t.clone(), 1.0 / t.norm_squared(), 1.0)).collect();
        let (t, v) = direct_model(&sq, d)?;
        worst = worst.max(rel_err(model.get(a).unwrap(), (&t, &v)));
        let lin: Vec<_> = thetas.iter().map(|t| (t.clone(), 1.0 / t.norm(), 1.0)).collect();
        let (t, v) = direct_model(&lin, d)?;
        worst = worst.max(rel_err(printed.get(a).unwrap(), (&t, &v)));
    }

    // one phase with random active sets and pull counts
    let sets: Vec<Vec<usize>> = (0..m)
        .map(|_| {
            let mut s: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.6)).collect();
            if s.is_empty() {
                s.push(rng.random_range(0..k));
            }
            s
        })
        .collect();
    let roster = build_roster(&sets).unwrap();
    let uploads: Vec<LocalEstimateUpload> = sets
        .iter()
        .enumerate()
        .map(|(i, set)| LocalEstimateUpload {
            agent: i,
            phase: 1,
            estimates: set
                .iter()
                .filter_map(|&a| {
                    let f = rng.random_range(0..5u64);
                    (f > 0).then(|| EstimateEntry {
                        arm: a,
                        theta_hat: rand_vec(rng).iter().copied().collect(),
                        pulls: f,
                    })
                })
                .collect(),
        })
        .collect();
    let next: GlobalModel = aggregate_phase(&uploads, &roster, &model).unwrap();
    if next.arms().collect::<Vec<_>>() != roster.union {
        return Some(f64::INFINITY);
    }
    for &a in &roster.union {
        let terms: Vec<_> = uploads
            .iter()
            .flat_map(|u| u.estimates.iter().filter(|e| e.arm == a))
            .map(|e| {
                let t = Vector::from_vec(e.theta_hat.clone());
                let f = e.pulls as f64;
                let n2 = t.norm_squared();
                (t, f / n2, f)
            })
            .collect();
        let got = next.get(a).unwrap();
        if terms.is_empty() {
            worst = worst.max(rel_err(got, model.get(a).unwrap()));
        } else {
            let (t, v) = direct_model(&terms, d)?;
            worst = worst.max(rel_err(got, (&t, &v)));
        }
    }
    Some(worst)
}

fn aggregation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    let mut redrawn = 0;
    let mut done = 0;
    while done < 100 {
        match aggregation_instance(&mut rng) {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => redrawn += 1,
        }
    }
    outcome(
        worst <= 1e-8,
        format!("largest relative deviation over 100 instances: {worst:.2e} ({redrawn} near-singular draws replaced)"),
    )
}

fn noiseless_exactness() -> Outcome {
    let scenario = desk_scenario(10);
    let schedule = build_schedule(1, 2, scenario.arms(), 1 << 13).unwrap();
    let cfg = RunConfig {
        variant: Variant::Exact,
        sigma: Some(0.0),
        ..RunConfig::default()
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for seed in 0..3 {
        let trace = run_protocol(&scenario, &schedule, &cfg, seed).unwrap();
        for p in &trace.phases {
            for a in &p.agents {
                for s in &a.stats {
                    worst = worst.max((s.r_hat - s.r_true).abs());
                    checked += 1;
                }
            }
        }
    }
    outcome(
        worst <= 1e-9,
        format!("max |r_hat - r| = {worst:.2e} over {checked} (phase, agent, arm) triples"),
    )
}

fn determinism() -> Outcome {
    let scenario = desk_scenario(10);
    let csv = |workers: usize| {
        let cfg = SweepConfig {
            agents: vec![5, 10],
            trials: 4,
            horizon: 1 << 11,
            seed: 17,
            workers,
            ..SweepConfig::default()
        };
        let mut buf = Vec::new();
        run_sweep(&scenario, &cfg).unwrap().write_csv(&mut buf).unwrap();
        buf
    };
    let a = csv(1);
    let b = csv(1);
    let c = csv(3);
    outcome(
        a == b && a == c,
        format!("{} CSV bytes; identical across reruns and worker counts: {}", a.len(), a == b && a == c),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let small = small_runs();
    let mut results: BTreeMap<usize, (&str, Outcome)> = BTreeMap::new();
    results.insert(1, ("confidence coverage", coverage(&small)));
    results.insert(2, ("optimal-arm retention", retention(&small)));
    results.insert(3, ("exact beats hidden", exact_beats_hidden()));
    results.insert(4, ("collaboration gain", collaboration_gain()));
    results.insert(5, ("sublinear regret", sublinearity()));
    results.insert(6, ("communication scaling", comm_scaling()));
    results.insert(7, ("design solver oracle", design_oracle()));
    results.insert(8, ("aggregation oracle", aggregation_oracle()));
    results.insert(9, ("noiseless exactness", noiseless_exactness()));
    results.insert(10, ("sweep determinism", determinism()));
    let mut failed = 0;
    for (n, (name, o)) in &results {
        println!("criterion {n:>2} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += (!o.pass) as usize;
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
