//! Agent side of the protocol: local estimates from expected features,
//! confidence widths, elimination, budgeted exploration and exploitation.

use serde::{Deserialize, Serialize};

use crate::environment::AgentEnv;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::messages::{ActiveSetUpload, AllocationMessage, EstimateEntry, GlobalBroadcast, LocalEstimateUpload};

/// Rank-one local estimate `theta_hat = mean_reward * psi / ||psi||^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalEstimate {
    pub arm: usize,
    pub theta_hat: Vector,
    pub pulls: u64,
}

impl LocalEstimate {
    pub fn to_entry(&self) -> EstimateEntry {
        EstimateEntry {
            arm: self.arm,
            theta_hat: self.theta_hat.iter().copied().collect(),
            pulls: self.pulls,
        }
    }
}

/// Estimated reward and confidence width of one arm for one agent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub arm: usize,
    pub r_hat: f64,
    pub u: f64,
}

fn scaled_estimate(arm: usize, mean_reward: f64, psi: &Vector, pulls: u64) -> Result<LocalEstimate> {
    let n2 = psi.norm_squared();
    if !(n2 > 0.0) {
        return Err(Error::Protocol(format!("expected feature for arm {arm} is zero")));
    }
    Ok(LocalEstimate {
        arm,
        theta_hat: psi * (mean_reward / n2),
        pulls,
    })
}

/// Local estimate from the single initialization pull of `arm`.
pub fn init_local_estimate(arm: usize, y: f64, psi: &Vector) -> Result<LocalEstimate> {
    scaled_estimate(arm, y, psi, 1)
}

/// `r_hat = <psi, theta_hat>`, `u = alpha * ||psi||_V / ell`.
pub fn compute_arm_stats(
    arm: usize,
    psi: &Vector,
    alpha: f64,
    ell: f64,
    theta_hat: &Vector,
    v: &Matrix,
) -> Result<ArmStats> {
    if theta_hat.len() != psi.len() {
        return Err(Error::Dimension(format!(
            "global estimate for arm {arm} has length {}, expected {}",
            theta_hat.len(),
            psi.len()
        )));
    }
    let r_hat = psi.dot(theta_hat);
    let u = alpha * linalg::weighted_norm(psi, v)? / ell;
    Ok(ArmStats { arm, r_hat, u })
}

/// Keeps every arm whose upper bound reaches the lower bound of the
/// empirical best arm. Returns the surviving set (in `active` order) and the
/// empirical best arm (ties to the lowest arm index).
pub fn eliminate(stats: &[ArmStats], active: &[usize]) -> Result<(Vec<usize>, usize)> {
    if active.is_empty() {
        return Err(Error::Protocol("elimination on an empty active set".into()));
    }
    let mut covered: Vec<usize> = stats.iter().map(|s| s.arm).collect();
    covered.sort_unstable();
    let mut expected = active.to_vec();
    expected.sort_unstable();
    if covered != expected {
        return Err(Error::Protocol(format!(
            "statistics cover arms {covered:?} but the active set is {expected:?}"
        )));
    }
    let mut best = stats[0];
    for s in &stats[1..] {
        if s.r_hat > best.r_hat || (s.r_hat == best.r_hat && s.arm < best.arm) {
            best = *s;
        }
    }
    let floor = best.r_hat - best.u;
    let keep = active
        .iter()
        .copied()
        .filter(|a| {
            let s = stats.iter().find(|s| s.arm == *a).unwrap();
            s.arm == best.arm || s.r_hat + s.u >= floor
        })
        .collect();
    Ok((keep, best.arm))
}

/// Pulls each assigned arm `count` times and forms one local estimate per arm
/// with `count >= 1`.
pub fn explore_phase(
    psi: &[Vector],
    assignments: &[(usize, u64)],
    env: &mut AgentEnv<'_>,
) -> Result<Vec<LocalEstimate>> {
    let mut out = Vec::with_capacity(assignments.len());
    for &(arm, count) in assignments {
        if count == 0 {
            continue;
        }
        let mut sum = 0.0;
        for _ in 0..count {
            sum += env.pull(arm)?;
        }
        out.push(scaled_estimate(arm, sum / count as f64, &psi[arm], count)?);
    }
    Ok(out)
}

/// Pulls `best` exactly `rounds` times, discarding the rewards.
pub fn exploit_remainder(best: usize, rounds: u64, env: &mut AgentEnv<'_>) -> Result<()> {
    for _ in 0..rounds {
        env.pull(best)?;
    }
    Ok(())
}

/// One participant of the federation.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub id: usize,
    psi: Vec<Vector>,
    active: Vec<usize>,
    phase: usize,
    alpha: f64,
    ell: f64,
    best: usize,
}

impl AgentState {
    pub fn new(id: usize, psi: Vec<Vector>, alpha: f64, ell: f64) -> Result<Self> {
        if psi.is_empty() {
            return Err(Error::Config(format!("agent {id} has no arms")));
        }
        if !(ell > 0.0) {
            return Err(Error::Config(format!("ell must be positive, got {ell}")));
        }
        let active = (0..psi.len()).collect();
        Ok(AgentState {
            id,
            psi,
            active,
            phase: 0,
            alpha,
            ell,
            best: 0,
        })
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn phase(&self) -> usize {
        self.phase
    }

    /// Empirical best arm of the latest elimination step.
    pub fn best(&self) -> usize {
        self.best
    }

    /// Pulls every arm once and uploads the resulting estimates.
    pub fn initialize(&mut self, env: &mut AgentEnv<'_>) -> Result<LocalEstimateUpload> {
        let mut estimates = Vec::with_capacity(self.psi.len());
        for arm in 0..self.psi.len() {
            let y = env.pull(arm)?;
            estimates.push(init_local_estimate(arm, y, &self.psi[arm])?.to_entry());
        }
        self.phase = 1;
        Ok(LocalEstimateUpload {
            agent: self.id,
            phase: 0,
            estimates,
        })
    }

    /// Computes statistics for the current active arms from the broadcast,
    /// eliminates, and reports the surviving set.
    pub fn eliminate_step(&mut self, broadcast: &GlobalBroadcast) -> Result<(Vec<ArmStats>, ActiveSetUpload)> {
        let mut stats = Vec::with_capacity(self.active.len());
        for &arm in &self.active {
            let model = broadcast
                .models
                .iter()
                .find(|m| m.arm == arm)
                .ok_or_else(|| Error::Protocol(format!("broadcast has no model for active arm {arm}")))?;
            stats.push(compute_arm_stats(
                arm,
                &self.psi[arm],
                self.alpha,
                self.ell,
                &model.theta_hat(),
                &model.v(),
            )?);
        }
        let (keep, best) = eliminate(&stats, &self.active)?;
        self.active = keep;
        self.best = best;
        Ok((
            stats,
            ActiveSetUpload {
                agent: self.id,
                phase: self.phase,
                arms: self.active.clone(),
            },
        ))
    }

    /// Runs the assigned exploration and uploads the new local estimates.
    pub fn explore(&mut self, alloc: &AllocationMessage, env: &mut AgentEnv<'_>) -> Result<(LocalEstimateUpload, u64)> {
        if alloc.agent != self.id {
            return Err(Error::Protocol(format!(
                "agent {} received the allocation for agent {}",
                self.id, alloc.agent
            )));
        }
        for (arm, _) in &alloc.counts {
            if !self.active.contains(arm) {
                return Err(Error::Protocol(format!("allocation for inactive arm {arm}")));
            }
        }
        let estimates = explore_phase(&self.psi, &alloc.counts, env)?;
        let pulls = alloc.counts.iter().map(|(_, c)| c).sum();
        Ok((
            LocalEstimateUpload {
                agent: self.id,
                phase: self.phase,
                estimates: estimates.iter().map(LocalEstimate::to_entry).collect(),
            },
            pulls,
        ))
    }

    /// Fills the rest of the phase with the empirical best arm and advances
    /// the phase counter.
    pub fn exploit(&mut self, rounds: u64, env: &mut AgentEnv<'_>) -> Result<()> {
        exploit_remainder(self.best, rounds, env)?;
        self.phase += 1;
        Ok(())
    }
}
