//! Phase schedule, confidence multiplier, communication metering and the
//! synchronous orchestration of one federated run.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::AgentState;
use crate::environment::{Environment, NoiseModel, RegretShard};
use crate::error::{Error, Result};
use crate::messages::{Message, ModelEntry};
use crate::model::{build_psi_set, ContextDistribution, Scenario};
use crate::server::{Server, ServerConfig};

pub const TRACE_VERSION: u32 = 1;

/// Geometric exploration budget `f_p = c * n^p` for `p = 1..=H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub c: u64,
    pub n: u64,
    pub arms: usize,
    pub horizon: u64,
    /// `f[p - 1] = f_p`.
    pub f: Vec<u64>,
}

impl PhaseSchedule {
    /// Number of phases `H`.
    pub fn phases(&self) -> usize {
        self.f.len()
    }

    pub fn f_p(&self, p: usize) -> u64 {
        self.f[p - 1]
    }

    /// Nominal phase length `f_p + K`.
    pub fn length(&self, p: usize) -> u64 {
        self.f_p(p) + self.arms as u64
    }

    /// Reporting rounds: nominal phase ends before `T` (initialization
    /// takes the first `K` rounds), then `T` itself. Runs whose rounded-up
    /// exploration stretches a phase are still reported on this grid.
    pub fn checkpoints(&self) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.f.len() + 1);
        let mut end = self.arms as u64;
        for p in 1..=self.phases() {
            end += self.length(p);
            if end >= self.horizon {
                break;
            }
            out.push(end);
        }
        out.push(self.horizon);
        out
    }
}

/// Smallest `H` with `sum_{p <= H} (c n^p + K) >= T`.
pub fn build_schedule(c: u64, n: u64, arms: usize, horizon: u64) -> Result<PhaseSchedule> {
    if c < 1 || n < 2 || arms < 1 {
        return Err(Error::Config(format!(
            "schedule needs c >= 1, n >= 2, K >= 1 (got c = {c}, n = {n}, K = {arms})"
        )));
    }
    let k = arms as u64;
    let first = c
        .checked_mul(n)
        .and_then(|x| x.checked_add(k))
        .ok_or_else(|| Error::Config("schedule overflows".into()))?;
    if horizon < first {
        return Err(Error::Config(format!(
            "horizon {horizon} is shorter than the first phase ({first} rounds)"
        )));
    }
    let mut f = Vec::new();
    let mut fp = c;
    let mut total = 0u64;
    while total < horizon {
        fp = fp
            .checked_mul(n)
            .ok_or_else(|| Error::Config("schedule overflows".into()))?;
        total = total.saturating_add(fp + k);
        f.push(fp);
    }
    Ok(PhaseSchedule {
        c,
        n,
        arms,
        horizon,
        f,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceConfig {
    pub delta: f64,
    pub alpha: f64,
    pub k: f64,
    /// `sqrt(2 ln(2MKH / delta))`
    pub alpha_union: f64,
    /// `sqrt(2 ln(KH / delta) + d ln(k e))`
    pub alpha_dim: f64,
}

/// Confidence multiplier. `k` is the smallest `k > 1` with
/// `k d >= 2 ln(KH/delta) + d ln(k e)`, located by bisection.
pub fn compute_alpha(m: usize, arms: usize, phases: usize, dim: usize, delta: f64) -> Result<ConfidenceConfig> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
    }
    if m == 0 || arms == 0 || phases == 0 || dim == 0 {
        return Err(Error::Config("M, K, H and d must be positive".into()));
    }
    let (m, kk, h, d) = (m as f64, arms as f64, phases as f64, dim as f64);
    let alpha_union = (2.0 * (2.0 * m * kk * h / delta).ln()).sqrt();
    let b = 2.0 * (kk * h / delta).ln();
    let g = |k: f64| k * d - b - d * (k.ln() + 1.0);
    let mut lo = 1.0;
    let mut hi = 2.0;
    while g(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-12 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if g(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let k = hi;
    let alpha_dim = (b + d * (k.ln() + 1.0)).sqrt();
    Ok(ConfidenceConfig {
        delta,
        alpha: alpha_union.min(alpha_dim),
        k,
        alpha_union,
        alpha_dim,
    })
}

/// Scalars carried by one message: a vector counts its length, a matrix its
/// entries, an arm id or count one each.
pub fn meter_message(msg: Message<'_>) -> u64 {
    match msg {
        Message::LocalEstimates(up) => up.estimates.iter().map(|e| 2 + e.theta_hat.len() as u64).sum(),
        Message::ActiveSet(up) => up.arms.len() as u64,
        Message::Broadcast(b) => b
            .models
            .iter()
            .map(|m| 1 + m.theta_hat.len() as u64 + m.v.len() as u64)
            .sum(),
        Message::Allocation(a) => 2 * a.counts.len() as u64,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseComm {
    pub phase: usize,
    pub up: u64,
    pub down: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommMeter {
    pub scalars_up: u64,
    pub scalars_down: u64,
    pub phases: Vec<PhaseComm>,
}

impl CommMeter {
    pub fn total(&self) -> u64 {
        self.scalars_up + self.scalars_down
    }

    fn slot(&mut self, phase: usize) -> &mut PhaseComm {
        if self.phases.last().map(|p| p.phase) != Some(phase) {
            self.phases.push(PhaseComm {
                phase,
                ..Default::default()
            });
        }
        self.phases.last_mut().unwrap()
    }

    pub fn upload(&mut self, phase: usize, msg: Message<'_>) {
        let n = meter_message(msg);
        self.scalars_up += n;
        self.slot(phase).up += n;
    }

    /// A downlink message delivered to `copies` recipients.
    pub fn download(&mut self, phase: usize, msg: Message<'_>, copies: u64) {
        let n = meter_message(msg) * copies;
        self.scalars_down += n;
        self.slot(phase).down += n;
    }
}

/// What agents are told about their own context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Agents see the distribution `mu_i` only.
    #[default]
    Hidden,
    /// Agents see a point mass at their realized context.
    Exact,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Hidden => "hidden",
            Variant::Exact => "exact",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hidden" => Ok(Variant::Hidden),
            "exact" => Ok(Variant::Exact),
            _ => Err(Error::Config(format!("unknown variant '{s}' (expected exact or hidden)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub variant: Variant,
    pub delta: f64,
    /// Overrides the scenario's noise level.
    pub sigma: Option<f64>,
    pub server: ServerConfig,
    /// Keep every broadcast model in the trace.
    pub record_models: bool,
    /// Run agent steps on the rayon pool.
    pub parallel_agents: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Hidden,
            delta: 0.1,
            sigma: None,
            server: ServerConfig::default(),
            record_models: false,
            parallel_agents: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub arm: usize,
    pub r_hat: f64,
    pub u: f64,
    /// Expected reward at the realized context. Diagnostic only; the agent
    /// never sees it.
    pub r_true: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPhaseRecord {
    pub agent: usize,
    pub stats: Vec<ArmRecord>,
    pub active: Vec<usize>,
    pub best: usize,
    pub allocation: Vec<(usize, u64)>,
    pub explore: u64,
    pub exploit: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerPhaseRecord {
    pub union: Vec<usize>,
    pub design_objective: Option<f64>,
    pub design_sweeps: usize,
    pub design_converged: bool,
    /// Models broadcast at the start of the phase, when recorded.
    pub models: Option<Vec<ModelEntry>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: usize,
    pub f_p: u64,
    pub length: u64,
    /// Round index at the end of the phase.
    pub end: u64,
    pub agents: Vec<AgentPhaseRecord>,
    pub server: ServerPhaseRecord,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Some `|r_hat - r| >= u` for an arm active before elimination.
    pub coverage_violation: bool,
    /// Some agent dropped the arm that is optimal at its realized context.
    pub optimal_eliminated: bool,
    /// Largest `|r_hat - r|` seen.
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub variant: Variant,
    pub seed: u64,
    pub agents: usize,
    pub arms: usize,
    pub dim: usize,
    pub schedule: PhaseSchedule,
    pub confidence: ConfidenceConfig,
    pub phases: Vec<PhaseRecord>,
    pub meter: CommMeter,
    pub diagnostics: Diagnostics,
    /// Per-agent regret ledgers; rounds past the horizon are still stored
    /// but never reported.
    pub ledgers: Vec<RegretShard>,
}

impl RunTrace {
    /// Per-agent average cumulative regret over rounds `1..=round`,
    /// `round <= T`.
    pub fn mean_regret(&self, round: u64) -> f64 {
        let round = round.min(self.schedule.horizon);
        self.ledgers.iter().map(|l| l.cumulative(round)).sum::<f64>() / self.agents as f64
    }

    pub fn regret_curve(&self) -> Vec<(u64, f64)> {
        self.schedule
            .checkpoints()
            .into_iter()
            .map(|r| (r, self.mean_regret(r)))
            .collect()
    }

    pub fn final_regret(&self) -> f64 {
        self.mean_regret(self.schedule.horizon)
    }
}

fn for_each_agent<F>(parallel: bool, agents: &mut [AgentState], envs: &mut [crate::environment::AgentEnv<'_>], f: F) -> Result<()>
where
    F: Fn(&mut AgentState, &mut crate::environment::AgentEnv<'_>) -> Result<()> + Sync + Send,
{
    if parallel {
        agents
            .par_iter_mut()
            .zip(envs.par_iter_mut())
            .try_for_each(|(a, e)| f(a, e))
    } else {
        agents.iter_mut().zip(envs.iter_mut()).try_for_each(|(a, e)| f(a, e))
    }
}

/// Runs initialization and then phases until `T` rounds have elapsed.
///
/// All agents share one phase length per phase: `max(f_p + K, longest
/// exploration)`, so round indices stay aligned across agents.
pub fn run_protocol(scenario: &Scenario, schedule: &PhaseSchedule, config: &RunConfig, seed: u64) -> Result<RunTrace> {
    let (m, k, d) = (scenario.agents(), scenario.arms(), scenario.dim());
    if schedule.arms != k {
        return Err(Error::Config(format!(
            "schedule built for K = {} but scenario has K = {k}",
            schedule.arms
        )));
    }
    let conf = compute_alpha(m, k, schedule.phases(), d, config.delta)?;
    let noise = NoiseModel::gaussian(config.sigma.unwrap_or(scenario.sigma))?;
    let mut env = Environment::new(scenario, noise, seed)?;
    let truth = env.truth().clone();

    let mus: Vec<ContextDistribution> = match config.variant {
        Variant::Hidden => scenario.agents.clone(),
        Variant::Exact => (0..m)
            .map(|i| ContextDistribution::point_mass(truth.realized_context(i)))
            .collect(),
    };
    let psi = build_psi_set(&scenario.features, &mus, &scenario.bounds)?;
    let mut agents = (0..m)
        .map(|i| AgentState::new(i, psi.agent(i).to_vec(), conf.alpha, scenario.bounds.ell))
        .collect::<Result<Vec<_>>>()?;
    let mut server = Server::new(m, k, d, config.server.clone());
    let mut meter = CommMeter::default();
    let mut diag = Diagnostics::default();
    let mut phases = Vec::new();

    let mut envs = env.split();
    let mut uploads = Vec::with_capacity(m);
    for (a, e) in agents.iter_mut().zip(envs.iter_mut()) {
        let up = a.initialize(e).map_err(|err| err.context(format!("initialization, agent {}", a.id)))?;
        meter.upload(0, Message::LocalEstimates(&up));
        uploads.push(up);
    }
    let mut broadcast = server.initialize(&uploads).map_err(|e| e.context("initialization, server"))?;
    let mut rounds = k as u64;

    for p in 1..=schedule.phases() {
        if rounds >= schedule.horizon {
            break;
        }
        let f_p = schedule.f_p(p);
        meter.download(p, Message::Broadcast(&broadcast), m as u64);

        let mut records: Vec<AgentPhaseRecord> = Vec::with_capacity(m);
        let mut active_sets = Vec::with_capacity(m);
        for a in agents.iter_mut() {
            let before = a.active().to_vec();
            let (stats, up) = a
                .eliminate_step(&broadcast)
                .map_err(|e| e.context(format!("phase {p}, agent {}", a.id)))?;
            let stats: Vec<ArmRecord> = stats
                .iter()
                .map(|s| ArmRecord {
                    arm: s.arm,
                    r_hat: s.r_hat,
                    u: s.u,
                    r_true: truth.expected_reward(a.id, s.arm),
                })
                .collect();
            for s in &stats {
                let err = (s.r_hat - s.r_true).abs();
                diag.max_abs_error = diag.max_abs_error.max(err);
                if err >= s.u && before.contains(&s.arm) {
                    diag.coverage_violation = true;
                }
            }
            let opt = truth.optimal_arm(a.id);
            if before.contains(&opt) && !up.arms.contains(&opt) {
                diag.optimal_eliminated = true;
            }
            meter.upload(p, Message::ActiveSet(&up));
            records.push(AgentPhaseRecord {
                agent: a.id,
                stats,
                active: up.arms.clone(),
                best: a.best(),
                allocation: Vec::new(),
                explore: 0,
                exploit: 0,
            });
            active_sets.push(up);
        }

        let plan = server
            .plan(p, &active_sets, f_p)
            .map_err(|e| e.context(format!("phase {p}, server design")))?;
        for alloc in &plan.allocations {
            meter.download(p, Message::Allocation(alloc), 1);
        }

        let allocs = &plan.allocations;
        let results: Vec<std::sync::Mutex<Option<(crate::messages::LocalEstimateUpload, u64)>>> =
            (0..m).map(|_| std::sync::Mutex::new(None)).collect();
        for_each_agent(config.parallel_agents, &mut agents, &mut envs, |a, e| {
            let out = a
                .explore(&allocs[a.id], e)
                .map_err(|err| err.context(format!("phase {p}, agent {} exploration", a.id)))?;
            *results[a.id].lock().unwrap() = Some(out);
            Ok(())
        })?;
        let mut uploads = Vec::with_capacity(m);
        let mut explore = vec![0u64; m];
        for (i, r) in results.into_iter().enumerate() {
            let (up, pulls) = r.into_inner().unwrap().expect("every agent explored");
            meter.upload(p, Message::LocalEstimates(&up));
            explore[i] = pulls;
            uploads.push(up);
        }
        let length = explore.iter().copied().max().unwrap_or(0).max(schedule.length(p));
        for_each_agent(config.parallel_agents, &mut agents, &mut envs, |a, e| {
            a.exploit(length - explore[a.id], e)
                .map_err(|err| err.context(format!("phase {p}, agent {} exploitation", a.id)))
        })?;
        rounds += length;

        let next = server
            .aggregate(p, &uploads)
            .map_err(|e| e.context(format!("phase {p}, server aggregation")))?;
        for (rec, alloc) in records.iter_mut().zip(&plan.allocations) {
            rec.allocation = alloc.counts.clone();
            rec.explore = explore[rec.agent];
            rec.exploit = length - explore[rec.agent];
        }
        phases.push(PhaseRecord {
            phase: p,
            f_p,
            length,
            end: rounds,
            agents: records,
            server: ServerPhaseRecord {
                union: plan.roster.union.clone(),
                design_objective: plan.design.as_ref().map(|s| s.objective),
                design_sweeps: plan.design.as_ref().map_or(0, |s| s.sweeps),
                design_converged: plan.design.as_ref().is_none_or(|s| s.converged),
                models: config.record_models.then(|| broadcast.models.clone()),
            },
        });
        broadcast = next;
    }
    drop(envs);
    if rounds < schedule.horizon {
        return Err(Error::Protocol(format!(
            "schedule ended after {rounds} rounds, before the horizon {}",
            schedule.horizon
        )));
    }
    let ledgers = (0..m).map(|i| env.ledger(i).clone()).collect();
    Ok(RunTrace {
        variant: config.variant,
        seed,
        agents: m,
        arms: k,
        dim: d,
        schedule: schedule.clone(),
        confidence: conf,
        phases,
        meter,
        diagnostics: diag,
        ledgers,
    })
}

#[derive(Serialize)]
struct Line<T: Serialize> {
    v: u32,
    #[serde(flatten)]
    record: T,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TraceLine<'a> {
    Run {
        variant: Variant,
        seed: u64,
        agents: usize,
        arms: usize,
        dim: usize,
        horizon: u64,
        phases: usize,
        confidence: &'a ConfidenceConfig,
    },
    Agent {
        phase: usize,
        #[serde(flatten)]
        record: &'a AgentPhaseRecord,
    },
    Server {
        phase: usize,
        f_p: u64,
        length: u64,
        end: u64,
        #[serde(flatten)]
        record: &'a ServerPhaseRecord,
        comm: Option<&'a PhaseComm>,
    },
    Summary {
        final_regret: f64,
        curve: Vec<(u64, f64)>,
        scalars_up: u64,
        scalars_down: u64,
        diagnostics: &'a Diagnostics,
    },
}

/// Writes the trace as JSON lines: one run header, one line per agent and
/// one server line per phase, then a summary.
pub fn write_trace<W: Write>(trace: &RunTrace, mut out: W) -> Result<()> {
    let mut emit = |record: TraceLine<'_>| -> Result<()> {
        serde_json::to_writer(&mut out, &Line { v: TRACE_VERSION, record })?;
        out.write_all(b"\n")?;
        Ok(())
    };
    emit(TraceLine::Run {
        variant: trace.variant,
        seed: trace.seed,
        agents: trace.agents,
        arms: trace.arms,
        dim: trace.dim,
        horizon: trace.schedule.horizon,
        phases: trace.phases.len(),
        confidence: &trace.confidence,
    })?;
    for ph in &trace.phases {
        for rec in &ph.agents {
            emit(TraceLine::Agent { phase: ph.phase, record: rec })?;
        }
        emit(TraceLine::Server {
            phase: ph.phase,
            f_p: ph.f_p,
            length: ph.length,
            end: ph.end,
            record: &ph.server,
            comm: trace.meter.phases.iter().find(|c| c.phase == ph.phase),
        })?;
    }
    emit(TraceLine::Summary {
        final_regret: trace.final_regret(),
        curve: trace.regret_curve(),
        scalars_up: trace.meter.scalars_up,
        scalars_down: trace.meter.scalars_down,
        diagnostics: &trace.diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;
    use crate::messages::{ActiveSetUpload, EstimateEntry, GlobalBroadcast, LocalEstimateUpload};
    use crate::model::{Bounds, FeatureMap, RewardParams};
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    #[test]
    fn schedule_cases() {
        let s = build_schedule(1, 2, 10, 1 << 17).unwrap();
        for (i, &f) in s.f.iter().enumerate() {
            assert_eq!(f, 1 << (i + 1));
        }
        let s = build_schedule(1, 2, 10, 12).unwrap();
        assert_eq!(s.phases(), 1);
        let s = build_schedule(2, 3, 5, 100).unwrap();
        assert_eq!(s.phases(), 4);
        assert_eq!(s.f, vec![6, 18, 54, 162]);
        assert!(build_schedule(1, 2, 10, 11).is_err());
        assert!(build_schedule(1, 1, 10, 100).is_err());
        assert!(build_schedule(0, 2, 10, 100).is_err());
    }

    #[test]
    fn checkpoint_grid() {
        let s = build_schedule(1, 2, 3, 40).unwrap();
        // phase ends at 3 + 5, 8 + 7, 15 + 11, 26 + 19
        assert_eq!(s.checkpoints(), vec![8, 15, 26, 40]);
    }

    #[test]
    fn schedule_is_minimal() {
        for t in [12u64, 13, 100, 1000, 1 << 13] {
            let s = build_schedule(1, 2, 10, t).unwrap();
            let total: u64 = (1..=s.phases()).map(|p| s.length(p)).sum();
            assert!(total >= t);
            assert!(total - s.length(s.phases()) < t);
        }
    }

    // Reference values from a 30-digit evaluation of both branches.
    #[test]
    fn alpha_reference_values() {
        let c = compute_alpha(100, 10, 17, 3, 0.1).unwrap();
        assert_relative_eq!(c.alpha, 4.912_380_491_224_657, epsilon = 1e-8);
        assert_relative_eq!(c.k, 8.043_827_363_521_535, epsilon = 1e-8);
        assert_relative_eq!(c.alpha_union, 5.047_118_167_150_903, epsilon = 1e-12);
        let c = compute_alpha(1, 1, 1, 3, 0.1).unwrap();
        assert_relative_eq!(c.alpha, (2.0 * 20f64.ln()).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(c.alpha, 2.447_746_830_680_816_5, epsilon = 1e-12);
        let c = compute_alpha(50, 10, 12, 3, 0.1).unwrap();
        assert_relative_eq!(c.alpha, 4.830_534_024_201_160_8, epsilon = 1e-8);
        let c = compute_alpha(5, 5, 7, 2, 0.1).unwrap();
        assert_relative_eq!(c.alpha, 4.039_930_258_674_648, epsilon = 1e-8);
    }

    #[test]
    fn alpha_k_is_tight() {
        let c = compute_alpha(10, 4, 6, 3, 0.05).unwrap();
        let b = 2.0 * (4.0 * 6.0 / 0.05f64).ln();
        let g = |k: f64| 3.0 * k - b - 3.0 * (k.ln() + 1.0);
        assert!(g(c.k) >= 0.0);
        assert!(g(c.k - 1e-8) < 0.0);
        assert!(compute_alpha(1, 1, 1, 1, 1.0).is_err());
        assert!(compute_alpha(1, 1, 1, 1, 0.0).is_err());
    }

    #[test]
    fn alpha_near_one() {
        let c = compute_alpha(2, 1, 1, 3, 1.0 - 1e-12).unwrap();
        assert_relative_eq!(c.alpha_union, (2.0 * 4f64.ln()).sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn meter_cases() {
        let up = LocalEstimateUpload {
            agent: 0,
            phase: 1,
            estimates: (0..3)
                .map(|arm| EstimateEntry {
                    arm,
                    theta_hat: vec![0.0; 3],
                    pulls: 1,
                })
                .collect(),
        };
        assert_eq!(meter_message(Message::LocalEstimates(&up)), 15);
        let set = ActiveSetUpload {
            agent: 0,
            phase: 1,
            arms: vec![4],
        };
        assert_eq!(meter_message(Message::ActiveSet(&set)), 1);
        let b = GlobalBroadcast {
            phase: 1,
            models: (0..2)
                .map(|arm| ModelEntry {
                    arm,
                    theta_hat: vec![0.0; 2],
                    v: vec![0.0; 4],
                })
                .collect(),
        };
        assert_eq!(meter_message(Message::Broadcast(&b)), 14);
        let mut meter = CommMeter::default();
        meter.upload(0, Message::LocalEstimates(&up));
        meter.download(1, Message::Broadcast(&b), 3);
        meter.upload(1, Message::ActiveSet(&set));
        assert_eq!((meter.scalars_up, meter.scalars_down), (16, 42));
        assert_eq!(meter.phases.len(), 2);
        assert_eq!(meter.phases[1], PhaseComm { phase: 1, up: 1, down: 42 });
    }

    fn scenario(features: &[&[f64]], m: usize, sigma: f64) -> Scenario {
        let bounds = Bounds::new(0.1, 1.0, 1.0).unwrap();
        let d = features[0].len();
        let mut theta = vec![0.0; d];
        theta[0] = 1.0;
        let table = features
            .iter()
            .map(|f| BTreeMap::from([(0, Vector::from_vec(f.to_vec()))]))
            .collect();
        let fm = FeatureMap::new(d, table, &bounds).unwrap();
        let thetas = RewardParams::new(vec![Vector::from_vec(theta); features.len()], &bounds).unwrap();
        Scenario::new(
            bounds,
            thetas,
            BTreeMap::new(),
            fm,
            vec![ContextDistribution::point_mass(0); m],
            sigma,
        )
        .unwrap()
    }

    #[test]
    fn single_arm_has_no_regret() {
        let s = scenario(&[&[0.5, 0.5]], 3, 1e-3);
        let sched = build_schedule(1, 2, 1, 200).unwrap();
        let t = run_protocol(&s, &sched, &RunConfig::default(), 1).unwrap();
        assert_eq!(t.final_regret(), 0.0);
        for p in &t.phases {
            for a in &p.agents {
                assert_eq!(a.active, vec![0]);
            }
        }
    }

    #[test]
    fn noiseless_run_eliminates_after_first_phase() {
        let mut s = scenario(&[&[0.9, 0.1], &[0.3, 0.5], &[0.1, 0.9]], 4, 0.0);
        s.bounds.ell = 0.5;
        let sched = build_schedule(256, 2, 3, 2000).unwrap();
        let cfg = RunConfig {
            variant: Variant::Exact,
            ..RunConfig::default()
        };
        let t = run_protocol(&s, &sched, &cfg, 3).unwrap();
        // Phase 1 works from one pull per pair, too little to separate arms.
        for a in &t.phases[0].agents {
            assert_eq!(a.active, vec![0, 1, 2]);
            assert_eq!(a.best, 0);
            assert_eq!(a.allocation, vec![(0, 171), (1, 171), (2, 171)]);
            for st in &a.stats {
                assert_relative_eq!(st.r_hat, st.r_true, epsilon = 1e-12);
            }
        }
        // After 4 * 171 pulls per arm, u = alpha ||psi|| / (ell sqrt(684))
        // is below half of both gaps.
        for a in &t.phases[1].agents {
            assert_eq!(a.active, vec![0]);
            assert!(a.stats.iter().all(|s| s.u < 0.3));
        }
        // init pulls plus phase-1 exploration of the two worse arms
        let per_agent = (0.6 + 0.8) + 171.0 * (0.6 + 0.8);
        assert_relative_eq!(t.final_regret(), per_agent, epsilon = 1e-9);
        assert!(!t.diagnostics.optimal_eliminated);
        assert!(!t.diagnostics.coverage_violation);
    }

    #[test]
    fn runs_are_reproducible_and_thread_independent() {
        let s = scenario(&[&[0.9, 0.1], &[0.3, 0.5], &[0.1, 0.9]], 4, 0.5);
        let sched = build_schedule(1, 2, 3, 300).unwrap();
        let a = run_protocol(&s, &sched, &RunConfig::default(), 9).unwrap();
        let b = run_protocol(&s, &sched, &RunConfig::default(), 9).unwrap();
        let par = RunConfig {
            parallel_agents: true,
            ..RunConfig::default()
        };
        let c = run_protocol(&s, &sched, &par, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        let mut buf_a = Vec::new();
        let mut buf_c = Vec::new();
        write_trace(&a, &mut buf_a).unwrap();
        write_trace(&c, &mut buf_c).unwrap();
        assert_eq!(buf_a, buf_c);
    }

    #[test]
    fn trace_lines_are_versioned() {
        let s = scenario(&[&[0.9, 0.1], &[0.3, 0.5]], 2, 0.1);
        let sched = build_schedule(1, 2, 2, 60).unwrap();
        let t = run_protocol(&s, &sched, &RunConfig::default(), 2).unwrap();
        let mut buf = Vec::new();
        write_trace(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2 + t.phases.len() * 3);
        assert!(lines.iter().all(|l| l["v"] == 1));
        assert_eq!(lines[0]["kind"], "run");
        assert_eq!(lines.last().unwrap()["kind"], "summary");
    }

    #[test]
    fn rounds_and_ledger_accounting() {
        let s = scenario(&[&[0.9, 0.1], &[0.3, 0.5], &[0.1, 0.9]], 3, 0.3);
        let sched = build_schedule(1, 2, 3, 500).unwrap();
        let t = run_protocol(&s, &sched, &RunConfig::default(), 5).unwrap();
        let total: u64 = 3 + t.phases.iter().map(|p| p.length).sum::<u64>();
        assert!(total >= 500);
        assert_eq!(t.phases.last().unwrap().end, total);
        for l in &t.ledgers {
            assert_eq!(l.rounds(), total);
        }
        for p in &t.phases {
            for a in &p.agents {
                assert_eq!(a.explore + a.exploit, p.length);
                let budget: u64 = a.allocation.iter().map(|(_, c)| c).sum();
                assert!(budget <= p.f_p + a.active.len() as u64);
            }
        }
        let curve = t.regret_curve();
        assert_eq!(curve.last().unwrap().0, 500);
        assert!(curve.windows(2).all(|w| w[0].1 <= w[1].1 && w[0].0 < w[1].0));
    }
}
