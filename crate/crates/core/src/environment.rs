//! Ground-truth simulator. Holds each agent's realized (hidden) context,
//! produces noisy rewards and keeps the pseudo-regret ledger.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ContextId, Scenario};

/// SplitMix64 finalizer; used to derive independent stream seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for stream `(tag, index)` under `master`.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ tag) ^ index)
}

const TAG_CONTEXT: u64 = 0x636f_6e74_6578_74;
const TAG_NOISE: u64 = 0x6e6f_6973_65;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    Gaussian { sigma: f64 },
}

impl NoiseModel {
    /// Gaussian noise; `sigma` must lie in `[0, 1]` so the noise stays
    /// 1-subgaussian.
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
        }
        if sigma > 1.0 {
            return Err(Error::Config(format!(
                "noise sigma {sigma} > 1 is not guaranteed 1-subgaussian"
            )));
        }
        Ok(NoiseModel::Gaussian { sigma })
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            NoiseModel::Gaussian { sigma } => sigma,
        }
    }
}

/// Run-length encoded per-pull regret of one agent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegretShard {
    // (first round, number of pulls, regret per pull); rounds are 1-based
    segments: Vec<(u64, u64, f64)>,
    rounds: u64,
    total: f64,
}

impl RegretShard {
    fn record(&mut self, regret: f64) {
        self.rounds += 1;
        self.total += regret;
        match self.segments.last_mut() {
            Some((_, len, r)) if *r == regret => *len += 1,
            _ => self.segments.push((self.rounds, 1, regret)),
        }
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Cumulative regret over rounds `1..=upto`.
    pub fn cumulative(&self, upto: u64) -> f64 {
        let mut acc = 0.0;
        for &(start, len, r) in &self.segments {
            if start > upto {
                break;
            }
            let n = len.min(upto - start + 1);
            acc += n as f64 * r;
        }
        acc
    }
}

/// Immutable per-run truth.
#[derive(Clone, Debug)]
pub struct Truth {
    realized: Vec<ContextId>,
    /// `means[agent][arm] = <theta_a, phi(a, c_agent)>`
    means: Vec<Vec<f64>>,
    optimal: Vec<usize>,
    noise: NoiseModel,
}

impl Truth {
    pub fn expected_reward(&self, agent: usize, arm: usize) -> f64 {
        self.means[agent][arm]
    }

    pub fn optimal_arm(&self, agent: usize) -> usize {
        self.optimal[agent]
    }

    pub fn gap(&self, agent: usize, arm: usize) -> f64 {
        self.means[agent][self.optimal[agent]] - self.means[agent][arm]
    }

    pub fn realized_context(&self, agent: usize) -> ContextId {
        self.realized[agent]
    }
}

#[derive(Clone, Debug)]
struct Channel {
    rng: ChaCha8Rng,
    ledger: RegretShard,
}

/// Mutable view of the environment for a single agent.
pub struct AgentEnv<'a> {
    agent: usize,
    truth: &'a Truth,
    channel: &'a mut Channel,
}

impl AgentEnv<'_> {
    pub fn agent(&self) -> usize {
        self.agent
    }

    /// Pulls `arm`, returning a noisy reward and charging its pseudo-regret.
    pub fn pull(&mut self, arm: usize) -> Result<f64> {
        let arms = self.truth.means[self.agent].len();
        if arm >= arms {
            return Err(Error::Lookup(format!("arm {arm} out of range (K = {arms})")));
        }
        let mean = self.truth.means[self.agent][arm];
        let z: f64 = self.channel.rng.sample(StandardNormal);
        self.channel.ledger.record(self.truth.gap(self.agent, arm));
        Ok(mean + self.truth.noise.sigma() * z)
    }

    pub fn rounds(&self) -> u64 {
        self.channel.ledger.rounds()
    }
}

/// The simulated world for one run.
#[derive(Clone, Debug)]
pub struct Environment {
    truth: Truth,
    channels: Vec<Channel>,
}

impl Environment {
    /// Draws each agent's hidden context from its distribution and sets up
    /// one independent noise stream per agent.
    pub fn new(scenario: &Scenario, noise: NoiseModel, master_seed: u64) -> Result<Self> {
        let k = scenario.arms();
        let mut realized = Vec::with_capacity(scenario.agents());
        let mut means = Vec::with_capacity(scenario.agents());
        let mut optimal = Vec::with_capacity(scenario.agents());
        let mut channels = Vec::with_capacity(scenario.agents());
        for (i, mu) in scenario.agents.iter().enumerate() {
            let mut ctx_rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, TAG_CONTEXT, i as u64));
            let u: f64 = ctx_rng.random();
            let support = mu.support();
            let mut acc = 0.0;
            let mut ctx = support[support.len() - 1].0;
            for &(c, p) in support {
                acc += p;
                if u < acc {
                    ctx = c;
                    break;
                }
            }
            let row = (0..k)
                .map(|a| {
                    Ok(scenario
                        .thetas
                        .theta(a)
                        .dot(scenario.features.get(a, ctx)?))
                })
                .collect::<Result<Vec<f64>>>()?;
            optimal.push(argmax_lowest(&row));
            means.push(row);
            realized.push(ctx);
            channels.push(Channel {
                rng: ChaCha8Rng::seed_from_u64(derive_seed(master_seed, TAG_NOISE, i as u64)),
                ledger: RegretShard::default(),
            });
        }
        Ok(Environment {
            truth: Truth {
                realized,
                means,
                optimal,
                noise,
            },
            channels,
        })
    }

    pub fn truth(&self) -> &Truth {
        &self.truth
    }

    pub fn agents(&self) -> usize {
        self.channels.len()
    }

    pub fn agent(&mut self, agent: usize) -> Result<AgentEnv<'_>> {
        let m = self.channels.len();
        let channel = self
            .channels
            .get_mut(agent)
            .ok_or_else(|| Error::Lookup(format!("agent {agent} out of range (M = {m})")))?;
        Ok(AgentEnv {
            agent,
            truth: &self.truth,
            channel,
        })
    }

    /// Disjoint per-agent views, usable from separate threads.
    pub fn split(&mut self) -> Vec<AgentEnv<'_>> {
        let truth = &self.truth;
        self.channels
            .iter_mut()
            .enumerate()
            .map(|(agent, channel)| AgentEnv { agent, truth, channel })
            .collect()
    }

    pub fn pull(&mut self, agent: usize, arm: usize) -> Result<f64> {
        self.agent(agent)?.pull(arm)
    }

    pub fn optimal_arm(&self, agent: usize) -> usize {
        self.truth.optimal_arm(agent)
    }

    /// Rounds every agent has completed.
    pub fn rounds_elapsed(&self) -> u64 {
        self.channels.iter().map(|c| c.ledger.rounds()).min().unwrap_or(0)
    }

    pub fn ledger(&self, agent: usize) -> &RegretShard {
        &self.channels[agent].ledger
    }

    /// Per-agent cumulative pseudo-regret over rounds `1..=upto`, and their sum.
    pub fn cumulative_regret(&self, upto: u64) -> Result<(Vec<f64>, f64)> {
        if upto > self.rounds_elapsed() {
            return Err(Error::Config(format!(
                "requested regret up to round {upto}, only {} elapsed",
                self.rounds_elapsed()
            )));
        }
        let per: Vec<f64> = self.channels.iter().map(|c| c.ledger.cumulative(upto)).collect();
        let total = per.iter().sum();
        Ok((per, total))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
