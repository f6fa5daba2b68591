//! Server side of the protocol: aggregation of local estimates into
//! per-arm global models, rosters, design and allocation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::design::{self, DesignAllocation, DesignProblem, DesignSolution};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::messages::{ActiveSetUpload, AllocationMessage, GlobalBroadcast, LocalEstimateUpload, ModelEntry};

/// Normalization of each initial upload's outer product in the first Gram
/// matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitWeighting {
    /// `theta theta^T / ||theta||^2`: the unweighted Gram of upload
    /// directions, the same form later phases use with `f = 1`.
    #[default]
    SquaredNorm,
    /// `theta theta^T / ||theta||`: weights each direction by the upload's
    /// length.
    Norm,
}

/// Per-arm global estimate and its covariance-like matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    models: BTreeMap<usize, (Vector, Matrix)>,
}

impl GlobalModel {
    pub fn get(&self, arm: usize) -> Option<(&Vector, &Matrix)> {
        self.models.get(&arm).map(|(t, v)| (t, v))
    }

    pub fn arms(&self) -> impl Iterator<Item = usize> + '_ {
        self.models.keys().copied()
    }

    pub fn to_broadcast(&self, phase: usize, arms: &[usize]) -> Result<GlobalBroadcast> {
        let models = arms
            .iter()
            .map(|&a| {
                self.get(a)
                    .map(|(t, v)| ModelEntry::new(a, t, v))
                    .ok_or_else(|| Error::Protocol(format!("no global model for arm {a}")))
            })
            .collect::<Result<_>>()?;
        Ok(GlobalBroadcast { phase, models })
    }

    fn check(&self) -> Result<()> {
        for (arm, (_, v)) in &self.models {
            if !linalg::is_symmetric_psd(v, 1e-10) {
                return Err(Error::Protocol(format!("global V for arm {arm} is not symmetric PSD")));
            }
        }
        Ok(())
    }
}

/// `A^p` and `R_a^p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRoster {
    pub union: Vec<usize>,
    pub rosters: BTreeMap<usize, Vec<usize>>,
}

impl ArmRoster {
    pub fn roster(&self, arm: usize) -> &[usize] {
        self.rosters.get(&arm).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Union of active sets and the agent list of every arm.
pub fn build_roster(active_sets: &[Vec<usize>]) -> Result<ArmRoster> {
    let mut rosters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (agent, set) in active_sets.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::Protocol(format!("agent {agent} reported an empty active set")));
        }
        for &arm in set {
            let r = rosters.entry(arm).or_default();
            if r.last() != Some(&agent) {
                r.push(agent);
            }
        }
    }
    Ok(ArmRoster {
        union: rosters.keys().copied().collect(),
        rosters,
    })
}

/// `f[i][a] = ceil(pi[i][a] * f_p)`.
pub fn allocate(pi: &DesignAllocation, f_p: u64) -> Vec<Vec<(usize, u64)>> {
    (0..pi.agents())
        .map(|i| {
            pi.agent(i)
                .iter()
                .map(|&(a, w)| (a, (w * f_p as f64).ceil().max(0.0) as u64))
                .collect()
        })
        .collect()
}

fn upload_vectors(up: &LocalEstimateUpload) -> impl Iterator<Item = (usize, Vector, u64)> + '_ {
    up.estimates
        .iter()
        .map(|e| (e.arm, Vector::from_vec(e.theta_hat.clone()), e.pulls))
}

/// Initial model from one single-pull estimate per (agent, arm):
/// `V_a = (sum_i w(theta) theta theta^T)^+`, `theta_a = V_a sum_i theta`.
/// Zero uploads are left out of the Gram sum.
pub fn aggregate_init(
    uploads: &[LocalEstimateUpload],
    arms: usize,
    dim: usize,
    weighting: InitWeighting,
) -> Result<GlobalModel> {
    let mut gram = vec![Matrix::zeros(dim, dim); arms];
    let mut lin = vec![Vector::zeros(dim); arms];
    let mut seen = vec![0usize; arms];
    for up in uploads {
        if up.estimates.len() != arms {
            return Err(Error::Protocol(format!(
                "agent {} uploaded {} initial estimates for {arms} arms",
                up.agent,
                up.estimates.len()
            )));
        }
        for (arm, theta, _) in upload_vectors(up) {
            if arm >= arms || theta.len() != dim {
                return Err(Error::Protocol(format!("malformed initial estimate from agent {}", up.agent)));
            }
            let n = theta.norm();
            if n == 0.0 {
                continue;
            }
            let w = match weighting {
                InitWeighting::SquaredNorm => n * n,
                InitWeighting::Norm => n,
            };
            gram[arm] += &theta * theta.transpose() / w;
            lin[arm] += &theta;
            seen[arm] += 1;
        }
    }
    let mut models = BTreeMap::new();
    for arm in 0..arms {
        if seen[arm] == 0 {
            return Err(Error::DegenerateArm { arm });
        }
        let v = linalg::pinv(&gram[arm])?;
        let theta = &v * &lin[arm];
        models.insert(arm, (theta, v));
    }
    let model = GlobalModel { models };
    model.check()?;
    Ok(model)
}

/// Phase model: `V_a = (sum_i f theta theta^T / ||theta||^2)^+`,
/// `theta_a = V_a sum_i f theta`, for every arm of the roster union. Arms
/// that received no usable upload keep their previous model.
pub fn aggregate_phase(
    uploads: &[LocalEstimateUpload],
    roster: &ArmRoster,
    previous: &GlobalModel,
) -> Result<GlobalModel> {
    let dim = previous
        .models
        .values()
        .next()
        .map(|(t, _)| t.len())
        .ok_or_else(|| Error::Protocol("previous global model is empty".into()))?;
    let mut acc: BTreeMap<usize, (Matrix, Vector, usize)> = BTreeMap::new();
    for up in uploads {
        for (arm, theta, f) in upload_vectors(up) {
            if !roster.roster(arm).contains(&up.agent) {
                return Err(Error::Protocol(format!(
                    "agent {} uploaded an estimate for arm {arm} it does not hold",
                    up.agent
                )));
            }
            if theta.len() != dim {
                return Err(Error::Dimension(format!("estimate from agent {} has wrong length", up.agent)));
            }
            let n2 = theta.norm_squared();
            if f == 0 || n2 == 0.0 {
                continue;
            }
            let fw = f as f64;
            let slot = acc
                .entry(arm)
                .or_insert_with(|| (Matrix::zeros(dim, dim), Vector::zeros(dim), 0));
            slot.0 += &theta * theta.transpose() * (fw / n2);
            slot.1 += &theta * fw;
            slot.2 += 1;
        }
    }
    let mut models = BTreeMap::new();
    for &arm in &roster.union {
        match acc.remove(&arm) {
            Some((g, lin, _)) => {
                let v = linalg::pinv(&g)?;
                let theta = &v * lin;
                models.insert(arm, (theta, v));
            }
            None => {
                let (t, v) = previous
                    .get(arm)
                    .ok_or_else(|| Error::Protocol(format!("no previous model to carry for arm {arm}")))?;
                models.insert(arm, (t.clone(), v.clone()));
            }
        }
    }
    let model = GlobalModel { models };
    model.check()?;
    Ok(model)
}

/// Unit direction with the first nonzero coordinate made positive.
fn canonical_direction(theta: &Vector) -> Option<Vector> {
    let n = theta.norm();
    if n == 0.0 {
        return None;
    }
    let mut e = theta / n;
    if let Some(first) = e.iter().find(|x| **x != 0.0) {
        if *first < 0.0 {
            e = -e;
        }
    }
    Some(e)
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub init_weighting: InitWeighting,
    pub design_max_sweeps: usize,
    pub design_tol: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            init_weighting: InitWeighting::default(),
            design_max_sweeps: design::DEFAULT_MAX_SWEEPS,
            design_tol: design::DEFAULT_TOL,
        }
    }
}

/// Output of the planning step of one phase.
#[derive(Clone, Debug)]
pub struct PhasePlan {
    pub roster: ArmRoster,
    pub design: Option<DesignSolution>,
    pub allocations: Vec<AllocationMessage>,
}

/// The central server. Sees only uploads.
#[derive(Clone, Debug)]
pub struct Server {
    agents: usize,
    arms: usize,
    dim: usize,
    config: ServerConfig,
    model: Option<GlobalModel>,
    directions: BTreeMap<(usize, usize), Vector>,
    roster: Option<ArmRoster>,
    issued: BTreeMap<(usize, usize), u64>,
    warm: Option<DesignAllocation>,
}

impl Server {
    pub fn new(agents: usize, arms: usize, dim: usize, config: ServerConfig) -> Self {
        Server {
            agents,
            arms,
            dim,
            config,
            model: None,
            directions: BTreeMap::new(),
            roster: None,
            issued: BTreeMap::new(),
            warm: None,
        }
    }

    pub fn model(&self) -> Option<&GlobalModel> {
        self.model.as_ref()
    }

    fn learn_directions(&mut self, up: &LocalEstimateUpload) {
        for (arm, theta, _) in upload_vectors(up) {
            if let Some(e) = canonical_direction(&theta) {
                self.directions.insert((up.agent, arm), e);
            }
        }
    }

    /// Aggregates the initialization uploads and returns the first broadcast.
    pub fn initialize(&mut self, uploads: &[LocalEstimateUpload]) -> Result<GlobalBroadcast> {
        if uploads.len() != self.agents {
            return Err(Error::Protocol(format!(
                "expected {} initial uploads, got {}",
                self.agents,
                uploads.len()
            )));
        }
        for up in uploads {
            self.learn_directions(up);
        }
        let model = aggregate_init(uploads, self.arms, self.dim, self.config.init_weighting)?;
        let all: Vec<usize> = (0..self.arms).collect();
        let b = model.to_broadcast(1, &all)?;
        self.model = Some(model);
        Ok(b)
    }

    /// Builds rosters, solves the design and issues `ceil(pi * f_p)` counts.
    ///
    /// Pairs whose direction the server has never seen (every upload so far
    /// was exactly zero) are left out of the design and get a single pull.
    pub fn plan(&mut self, phase: usize, active: &[ActiveSetUpload], f_p: u64) -> Result<PhasePlan> {
        if active.len() != self.agents {
            return Err(Error::Protocol(format!(
                "expected {} active sets, got {}",
                self.agents,
                active.len()
            )));
        }
        let mut sets = vec![Vec::new(); self.agents];
        for up in active {
            if up.agent >= self.agents {
                return Err(Error::Protocol(format!("unknown agent {}", up.agent)));
            }
            sets[up.agent] = up.arms.clone();
        }
        let roster = build_roster(&sets)?;

        let mut design_agents = Vec::new();
        let mut rows = Vec::new();
        let mut counts: Vec<Vec<(usize, u64)>> = vec![Vec::new(); self.agents];
        for (i, set) in sets.iter().enumerate() {
            let mut row = Vec::new();
            for &a in set {
                match self.directions.get(&(i, a)) {
                    Some(e) => row.push((a, e.clone())),
                    None => counts[i].push((a, 1)),
                }
            }
            if !row.is_empty() {
                design_agents.push(i);
                rows.push(row);
            }
        }
        let design = if rows.is_empty() {
            None
        } else {
            let prob = DesignProblem::new(self.dim, rows)?;
            let warm = self.warm.as_ref().map(|w| remap(w, &design_agents, self.agents));
            let sol = design::solve_design_from(
                &prob,
                warm.as_ref(),
                self.config.design_max_sweeps,
                self.config.design_tol,
            )?;
            for (k, row) in allocate(&sol.allocation, f_p).into_iter().enumerate() {
                counts[design_agents[k]].extend(row);
            }
            self.warm = Some(unmap(&sol.allocation, &design_agents, self.agents));
            Some(sol)
        };

        self.issued.clear();
        let allocations = counts
            .into_iter()
            .enumerate()
            .map(|(agent, mut c)| {
                c.sort_by_key(|(a, _)| *a);
                for &(a, n) in &c {
                    self.issued.insert((agent, a), n);
                }
                AllocationMessage { agent, phase, counts: c }
            })
            .collect();
        self.roster = Some(roster.clone());
        Ok(PhasePlan {
            roster,
            design,
            allocations,
        })
    }

    /// Aggregates the phase uploads and returns the next broadcast, which
    /// covers the arms of the current roster union.
    pub fn aggregate(&mut self, phase: usize, uploads: &[LocalEstimateUpload]) -> Result<GlobalBroadcast> {
        let roster = self
            .roster
            .take()
            .ok_or_else(|| Error::Protocol("aggregate called before plan".into()))?;
        for up in uploads {
            for e in &up.estimates {
                let issued = self.issued.get(&(up.agent, e.arm)).copied().unwrap_or(0);
                if e.pulls != issued {
                    return Err(Error::Protocol(format!(
                        "agent {} reports {} pulls of arm {} but was allocated {issued}",
                        up.agent, e.pulls, e.arm
                    )));
                }
            }
            self.learn_directions(up);
        }
        let previous = self
            .model
            .as_ref()
            .ok_or_else(|| Error::Protocol("aggregate called before initialize".into()))?;
        let model = aggregate_phase(uploads, &roster, previous)?;
        let b = model.to_broadcast(phase + 1, &roster.union)?;
        self.model = Some(model);
        Ok(b)
    }
}

// The solver indexes agents densely; the server keeps warm starts by real id.
fn remap(w: &DesignAllocation, design_agents: &[usize], total: usize) -> DesignAllocation {
    let _ = total;
    DesignAllocation::from_weights(
        design_agents
            .iter()
            .map(|&i| if i < w.agents() { w.agent(i).to_vec() } else { Vec::new() })
            .collect(),
    )
}

fn unmap(w: &DesignAllocation, design_agents: &[usize], total: usize) -> DesignAllocation {
    let mut rows = vec![Vec::new(); total];
    for (k, &i) in design_agents.iter().enumerate() {
        rows[i] = w.agent(k).to_vec();
    }
    DesignAllocation::from_weights(rows)
}
