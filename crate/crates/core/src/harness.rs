//! Experiment layer: synthetic scenarios, feature-file ingestion and
//! multi-trial sweeps with CSV/JSON output.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::derive_seed;
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::model::{Bounds, ContextDistribution, ContextId, FeatureMap, RewardParams, Scenario};
use crate::protocol::{build_schedule, run_protocol, RunConfig, Variant};
use crate::server::ServerConfig;

pub const MAX_REJECTIONS: usize = 100_000;

pub const DESK_HORIZON: u64 = 1 << 13;
pub const DESK_TRIALS: usize = 20;
pub const DESK_AGENTS: [usize; 3] = [10, 25, 50];
pub const FULL_HORIZON: u64 = 1 << 17;
pub const FULL_TRIALS: usize = 100;
pub const FULL_AGENTS: [usize; 3] = [50, 100, 150];

const TAG_TRIAL: u64 = 0x7472_6961_6c;

/// How the per-arm reward vectors are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ThetaSpec {
    /// Every arm uses the same vector.
    Shared { theta: Vec<f64> },
    /// Independent uniform directions scaled to `norm`.
    Random { norm: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(rename = "K")]
    pub arms: usize,
    pub d: usize,
    #[serde(rename = "M")]
    pub agents: usize,
    /// Suboptimality gaps at each agent's own context.
    pub gap_range: [f64; 2],
    /// `||phi||` of every generated feature.
    pub norm_range: [f64; 2],
    pub theta: ThetaSpec,
    pub sigma: f64,
    /// Length of the random offset of each perturbed context copy.
    pub perturbation: f64,
    /// Number of perturbed copies per agent.
    pub copies: usize,
    /// Mass `mu_i` puts on the copies together.
    pub copy_mass: f64,
    /// Agents observe a point mass at their own context.
    pub exact: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            arms: 10,
            d: 3,
            agents: 50,
            gap_range: [0.2, 0.4],
            norm_range: [0.5, 1.0],
            theta: ThetaSpec::Shared {
                theta: vec![1.0, 0.0, 0.0],
            },
            sigma: 1e-3,
            perturbation: 0.1,
            copies: 4,
            copy_mass: 0.5,
            exact: false,
        }
    }
}

impl SyntheticSpec {
    /// Stand-in for clustered movie-rating features: 30 arms, a wide gap
    /// spread and random reward vectors.
    pub fn movielens_like() -> Self {
        SyntheticSpec {
            arms: 30,
            d: 3,
            agents: 100,
            gap_range: [0.01, 0.8],
            norm_range: [0.4f64.sqrt(), 0.8f64.sqrt()],
            theta: ThetaSpec::Random { norm: 1.0 },
            ..SyntheticSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [glo, ghi] = self.gap_range;
        let [nlo, nhi] = self.norm_range;
        if self.arms == 0 || self.d == 0 || self.agents == 0 {
            return Err(Error::Config("K, d and M must be positive".into()));
        }
        if !(glo > 0.0 && glo <= ghi) {
            return Err(Error::Config(format!("bad gap range [{glo}, {ghi}]")));
        }
        if !(nlo > 0.0 && nlo <= nhi && nhi <= 1.0) {
            return Err(Error::Config(format!("bad norm range [{nlo}, {nhi}]")));
        }
        if !(self.perturbation >= 0.0) || !(0.0..=1.0).contains(&self.copy_mass) {
            return Err(Error::Config("perturbation must be >= 0 and copy mass in [0, 1]".into()));
        }
        if self.copies == 0 && self.copy_mass > 0.0 {
            return Err(Error::Config("copy mass without copies".into()));
        }
        match &self.theta {
            ThetaSpec::Shared { theta } if theta.len() != self.d => {
                Err(Error::Dimension(format!("shared theta has length {}, d = {}", theta.len(), self.d)))
            }
            ThetaSpec::Shared { theta } if theta.iter().all(|x| *x == 0.0) => {
                Err(Error::Config("shared theta is zero".into()))
            }
            ThetaSpec::Random { norm } if !(*norm > 0.0) => Err(Error::Config("theta norm must be positive".into())),
            _ => Ok(()),
        }
    }
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vector {
    loop {
        let z = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = z.norm();
        if n > 1e-12 {
            return z / n;
        }
    }
}

fn argmax_strict(xs: &[f64]) -> Option<usize> {
    let best = crate::environment::argmax_lowest(xs);
    xs.iter()
        .enumerate()
        .all(|(a, &x)| a == best || x < xs[best])
        .then_some(best)
}

struct Rejections {
    count: usize,
}

impl Rejections {
    fn bump(&mut self, why: &str) -> Result<()> {
        self.count += 1;
        if self.count >= MAX_REJECTIONS {
            return Err(Error::Infeasible(format!("{MAX_REJECTIONS} rejected draws, last: {why}")));
        }
        Ok(())
    }
}

/// Draws a scenario. Each agent gets its own context with the stated gaps
/// and feature norms, plus perturbed copies of it that make up the hidden
/// part of its context distribution. Draws are rejected until every
/// constraint holds, including a unique optimal arm shared by all the
/// agent's contexts and by its expected features.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d) = (spec.arms, spec.d);
    let [glo, ghi] = spec.gap_range;
    let [nlo, nhi] = spec.norm_range;
    let slack = 1e-12;

    let thetas: Vec<Vector> = match &spec.theta {
        ThetaSpec::Shared { theta } => vec![Vector::from_vec(theta.clone()); k],
        ThetaSpec::Random { norm } => (0..k).map(|_| unit(&mut rng, d) * *norm).collect(),
    };
    let s = thetas.iter().map(|t| t.norm()).fold(0.0, f64::max);
    let s_min = thetas.iter().map(|t| t.norm()).fold(f64::INFINITY, f64::min);
    let bounds = Bounds::new(nlo, nhi, s)?;

    let per_agent = spec.copies as u32 + 1;
    let mut table: Vec<BTreeMap<ContextId, Vector>> = vec![BTreeMap::new(); k];
    let mut contexts = BTreeMap::new();
    let mut agents = Vec::with_capacity(spec.agents);
    let mut rejects = Rejections { count: 0 };

    for i in 0..spec.agents {
        let base_id = i as u32 * per_agent;
        'attempt: loop {
            let best = rng.random_range(0..k);
            let top: f64 = rng.random_range(0.0..=s_min * nhi);
            let mut base = Vec::with_capacity(k);
            for a in 0..k {
                let r = if a == best {
                    top
                } else {
                    top - rng.random_range(glo..=ghi)
                };
                let t = &thetas[a];
                let along = r / t.norm();
                let lo = nlo.max(along.abs());
                if lo > nhi {
                    rejects.bump("reward out of reach of the norm range")?;
                    continue 'attempt;
                }
                let n: f64 = if d == 1 { along.abs() } else { rng.random_range(lo..=nhi) };
                if d == 1 && n < nlo {
                    rejects.bump("reward out of reach of the norm range")?;
                    continue 'attempt;
                }
                let tu = t / t.norm();
                let mut phi = &tu * along;
                if d > 1 {
                    let z = unit(&mut rng, d);
                    let perp = &z - &tu * tu.dot(&z);
                    let pn = perp.norm();
                    if pn < 1e-9 {
                        rejects.bump("degenerate orthogonal direction")?;
                        continue 'attempt;
                    }
                    phi += perp * ((n * n - along * along).max(0.0).sqrt() / pn);
                }
                base.push(phi);
            }

            let mut all = vec![base];
            for _ in 0..spec.copies {
                let mut copy = Vec::with_capacity(k);
                for phi in &all[0] {
                    loop {
                        let c = phi + unit(&mut rng, d) * spec.perturbation;
                        let n = c.norm();
                        if n >= nlo - slack && n <= nhi + slack {
                            copy.push(c);
                            break;
                        }
                        rejects.bump("perturbed feature left the norm range")?;
                    }
                }
                all.push(copy);
            }

            let weights: Vec<f64> = std::iter::once(1.0 - spec.copy_mass)
                .chain(std::iter::repeat_n(
                    spec.copy_mass / spec.copies.max(1) as f64,
                    spec.copies,
                ))
                .collect();
            for ctx in &all {
                let r: Vec<f64> = (0..k).map(|a| thetas[a].dot(&ctx[a])).collect();
                if argmax_strict(&r) != Some(best) {
                    rejects.bump("perturbed context changes the optimal arm")?;
                    continue 'attempt;
                }
            }
            let psi: Vec<Vector> = (0..k)
                .map(|a| {
                    all.iter()
                        .zip(&weights)
                        .fold(Vector::zeros(d), |acc, (ctx, w)| acc + &ctx[a] * *w)
                })
                .collect();
            if psi.iter().any(|p| p.norm() < nlo * (1.0 - 1e-12)) {
                rejects.bump("expected feature below the norm floor")?;
                continue 'attempt;
            }
            let r: Vec<f64> = (0..k).map(|a| thetas[a].dot(&psi[a])).collect();
            if argmax_strict(&r) != Some(best) {
                rejects.bump("expected features change the optimal arm")?;
                continue 'attempt;
            }

            for (j, ctx) in all.into_iter().enumerate() {
                let id = base_id + j as u32;
                contexts.insert(
                    id,
                    if j == 0 {
                        format!("agent{i}")
                    } else {
                        format!("agent{i}/copy{j}")
                    },
                );
                for (a, phi) in ctx.into_iter().enumerate() {
                    table[a].insert(id, phi);
                }
            }
            let mu = if spec.exact || spec.copies == 0 || spec.copy_mass == 0.0 {
                ContextDistribution::point_mass(base_id)
            } else {
                ContextDistribution::new(
                    weights
                        .iter()
                        .enumerate()
                        .map(|(j, &w)| (base_id + j as u32, w))
                        .collect(),
                )?
            };
            agents.push(mu);
            break;
        }
    }

    let features = FeatureMap::new(d, table, &bounds)?;
    let thetas = RewardParams::new(thetas, &bounds)?;
    Scenario::new(bounds, thetas, contexts, features, agents, spec.sigma)
}

/// Loads and validates a scenario file.
pub fn load_features(path: impl AsRef<Path>) -> Result<Scenario> {
    Scenario::load(path)
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub variants: Vec<Variant>,
    pub agents: Vec<usize>,
    pub trials: usize,
    pub c: u64,
    pub n: u64,
    pub horizon: u64,
    pub delta: f64,
    pub sigma: Option<f64>,
    pub seed: u64,
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    pub server: ServerConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            variants: vec![Variant::Exact, Variant::Hidden],
            agents: DESK_AGENTS.to_vec(),
            trials: DESK_TRIALS,
            c: 1,
            n: 2,
            horizon: DESK_HORIZON,
            delta: 0.1,
            sigma: None,
            seed: 0,
            workers: 0,
            server: ServerConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn full_scale() -> Self {
        SweepConfig {
            agents: FULL_AGENTS.to_vec(),
            trials: FULL_TRIALS,
            horizon: FULL_HORIZON,
            ..SweepConfig::default()
        }
    }
}

/// Seed of trial `t`; shared by every variant and agent count so that
/// cells are paired.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, TAG_TRIAL, trial as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    #[serde(rename = "M")]
    pub agents: usize,
    pub round: u64,
    pub mean_regret: f64,
    pub stderr: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub curve: Vec<f64>,
    pub final_regret: f64,
    pub comm_scalars: u64,
    pub coverage_violation: bool,
    pub optimal_eliminated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub variant: Variant,
    #[serde(rename = "M")]
    pub agents: usize,
    pub rounds: Vec<u64>,
    pub final_mean: f64,
    pub final_stderr: f64,
    pub trials: Vec<TrialResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub horizon: u64,
    pub phases: usize,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<CellSummary>,
}

/// Mean and standard error of the mean (zero for a single sample).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl SweepResult {
    pub fn cell(&self, variant: Variant, agents: usize) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.variant == variant && c.agents == agents)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// Runs every `(variant, M, trial)` cell, on `workers` threads, and averages
/// the per-agent regret curves over trials.
pub fn run_sweep(scenario: &Scenario, config: &SweepConfig) -> Result<SweepResult> {
    if config.trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    if config.variants.is_empty() || config.agents.is_empty() {
        return Err(Error::Config("nothing to sweep".into()));
    }
    let schedule = build_schedule(config.c, config.n, scenario.arms(), config.horizon)?;
    let rounds = schedule.checkpoints();
    let mut scenarios = BTreeMap::new();
    for &m in &config.agents {
        scenarios.insert(m, scenario.with_agents(m)?);
    }
    let jobs: Vec<(Variant, usize, usize)> = config
        .variants
        .iter()
        .flat_map(|&v| {
            config
                .agents
                .iter()
                .flat_map(move |&m| (0..config.trials).map(move |t| (v, m, t)))
        })
        .collect();

    let run_one = |&(variant, m, trial): &(Variant, usize, usize)| -> Result<TrialResult> {
        let seed = trial_seed(config.seed, trial);
        let cfg = RunConfig {
            variant,
            delta: config.delta,
            sigma: config.sigma,
            server: config.server.clone(),
            record_models: false,
            parallel_agents: false,
        };
        let trace = run_protocol(&scenarios[&m], &schedule, &cfg, seed)
            .map_err(|e| e.context(format!("variant {}, M = {m}, seed {seed}", variant.name())))?;
        Ok(TrialResult {
            seed,
            curve: rounds.iter().map(|&r| trace.mean_regret(r)).collect(),
            final_regret: trace.final_regret(),
            comm_scalars: trace.meter.total(),
            coverage_violation: trace.diagnostics.coverage_violation,
            optimal_eliminated: trace.diagnostics.optimal_eliminated,
        })
    };
    let results: Vec<Result<TrialResult>> = if config.workers == 1 {
        jobs.iter().map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run_one).collect())
    };

    let mut grouped: BTreeMap<(usize, usize), Vec<TrialResult>> = BTreeMap::new();
    for (job, res) in jobs.iter().zip(results) {
        let vi = config.variants.iter().position(|v| *v == job.0).unwrap();
        let mi = config.agents.iter().position(|m| *m == job.1).unwrap();
        grouped.entry((vi, mi)).or_default().push(res?);
    }
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for ((vi, mi), trials) in grouped {
        let (variant, m) = (config.variants[vi], config.agents[mi]);
        for (k, &round) in rounds.iter().enumerate() {
            let xs: Vec<f64> = trials.iter().map(|t| t.curve[k]).collect();
            let (mean, se) = mean_stderr(&xs);
            rows.push(SweepRow {
                variant,
                agents: m,
                round,
                mean_regret: mean,
                stderr: se,
                trials: trials.len(),
            });
        }
        let finals: Vec<f64> = trials.iter().map(|t| t.final_regret).collect();
        let (final_mean, final_stderr) = mean_stderr(&finals);
        cells.push(CellSummary {
            variant,
            agents: m,
            rounds: rounds.clone(),
            final_mean,
            final_stderr,
            trials,
        });
    }
    Ok(SweepResult {
        horizon: config.horizon,
        phases: schedule.phases(),
        rows,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_psi_set;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            agents: 6,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn default_spec_satisfies_the_bounds() {
        let s = generate_synthetic(&small_spec(), 1).unwrap();
        assert_eq!((s.arms(), s.dim(), s.agents()), (10, 3, 6));
        for a in 0..10 {
            assert_eq!(s.thetas.theta(a).as_slice(), &[1.0, 0.0, 0.0]);
            for (_, phi) in s.features.contexts(a) {
                assert!(phi.norm() >= 0.5 - 1e-12 && phi.norm() <= 1.0 + 1e-12);
            }
        }
        s.validate().unwrap();
    }

    #[test]
    fn gaps_at_own_context_are_in_range() {
        let s = generate_synthetic(&small_spec(), 2).unwrap();
        for i in 0..s.agents() {
            let base = i as u32 * 5;
            let r: Vec<f64> = (0..10)
                .map(|a| s.thetas.theta(a).dot(s.features.get(a, base).unwrap()))
                .collect();
            let best = r.iter().cloned().fold(f64::MIN, f64::max);
            let mut gaps: Vec<f64> = r.iter().map(|x| best - x).filter(|g| *g > 0.0).collect();
            assert_eq!(gaps.len(), 9);
            gaps.sort_by(f64::total_cmp);
            assert!(gaps[0] >= 0.2 - 1e-12 && gaps[8] <= 0.4 + 1e-12, "{gaps:?}");
        }
    }

    #[test]
    fn zero_perturbation_gives_identical_expected_features() {
        let hidden = SyntheticSpec {
            perturbation: 0.0,
            ..small_spec()
        };
        let exact = SyntheticSpec {
            exact: true,
            ..hidden.clone()
        };
        let h = generate_synthetic(&hidden, 3).unwrap();
        let e = generate_synthetic(&exact, 3).unwrap();
        let ph = build_psi_set(&h.features, &h.agents, &h.bounds).unwrap();
        let pe = build_psi_set(&e.features, &e.agents, &e.bounds).unwrap();
        for i in 0..6 {
            for a in 0..10 {
                assert!((ph.get(i, a) - pe.get(i, a)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_synthetic(&small_spec(), 4).unwrap();
        let b = generate_synthetic(&small_spec(), 4).unwrap();
        let c = generate_synthetic(&small_spec(), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn movielens_profile_generates() {
        let spec = SyntheticSpec {
            agents: 5,
            ..SyntheticSpec::movielens_like()
        };
        let s = generate_synthetic(&spec, 6).unwrap();
        assert_eq!((s.arms(), s.dim()), (30, 3));
    }

    #[test]
    fn infeasible_specs_are_reported() {
        // Rewards of at most 0.5 cannot be 0.9 apart.
        let spec = SyntheticSpec {
            norm_range: [0.4, 0.5],
            gap_range: [1.1, 1.2],
            agents: 1,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec, 0), Err(Error::Infeasible(_))));
        let bad = SyntheticSpec {
            gap_range: [0.3, 0.2],
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&bad, 0).is_err());
    }

    #[test]
    fn saved_scenarios_round_trip() {
        let s = generate_synthetic(&small_spec(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        s.save(&path).unwrap();
        assert_eq!(load_features(&path).unwrap(), s);
    }

    #[test]
    fn stderr_cases() {
        assert_eq!(mean_stderr(&[3.0]), (3.0, 0.0));
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_cell_sweep_has_one_row_per_checkpoint() {
        let s = generate_synthetic(&small_spec(), 8).unwrap();
        let cfg = SweepConfig {
            variants: vec![Variant::Hidden],
            agents: vec![3],
            trials: 1,
            horizon: 200,
            workers: 1,
            ..SweepConfig::default()
        };
        let r = run_sweep(&s, &cfg).unwrap();
        let sched = build_schedule(1, 2, 10, 200).unwrap();
        assert_eq!(r.rows.len(), sched.checkpoints().len());
        assert!(r.rows.windows(2).all(|w| w[0].mean_regret <= w[1].mean_regret));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "variant,M,round,mean_regret,stderr,trials");
        assert!(text.lines().nth(1).unwrap().starts_with("hidden,3,"));
    }
}
