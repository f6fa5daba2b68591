//! Problem description: feature tables, context distributions, reward
//! parameters and the expected-feature transform agents work with.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Opaque context identifier.
pub type ContextId = u32;

/// Tolerance on `sum(probabilities) == 1`.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Slack allowed on the feature norm bounds to absorb roundoff.
const NORM_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub ell: f64,
    #[serde(rename = "L")]
    pub big_l: f64,
    pub s: f64,
}

impl Bounds {
    pub fn new(ell: f64, big_l: f64, s: f64) -> Result<Self> {
        let b = Bounds { ell, big_l, s };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ell > 0.0 && self.ell <= self.big_l && self.big_l <= 1.0) {
            return Err(Error::Config(format!(
                "bounds need 0 < ell <= L <= 1, got ell = {}, L = {}",
                self.ell, self.big_l
            )));
        }
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return Err(Error::Config(format!("bound s must be >= 0, got {}", self.s)));
        }
        Ok(())
    }

    fn norm_ok(&self, n: f64) -> bool {
        n >= self.ell - NORM_SLACK && n <= self.big_l + NORM_SLACK
    }
}

/// `phi(arm, context)` for a finite set of contexts.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    dim: usize,
    table: Vec<BTreeMap<ContextId, Vector>>,
}

impl FeatureMap {
    /// Builds the table, checking every vector against the declared norm bounds.
    pub fn new(dim: usize, table: Vec<BTreeMap<ContextId, Vector>>, bounds: &Bounds) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if table.is_empty() {
            return Err(Error::Config("feature map has no arms".into()));
        }
        for (arm, row) in table.iter().enumerate() {
            for (ctx, v) in row {
                if v.len() != dim {
                    return Err(Error::Dimension(format!(
                        "feature (arm {arm}, context {ctx}) has length {}, expected {dim}",
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("feature (arm {arm}, context {ctx})")));
                }
                let n = v.norm();
                if !bounds.norm_ok(n) {
                    return Err(Error::Config(format!(
                        "feature (arm {arm}, context {ctx}) has norm {n}, outside [{}, {}]",
                        bounds.ell, bounds.big_l
                    )));
                }
            }
        }
        Ok(FeatureMap { dim, table })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn arms(&self) -> usize {
        self.table.len()
    }

    pub fn get(&self, arm: usize, ctx: ContextId) -> Result<&Vector> {
        self.table
            .get(arm)
            .ok_or_else(|| Error::Lookup(format!("arm {arm} out of range")))?
            .get(&ctx)
            .ok_or_else(|| Error::Lookup(format!("no feature for (arm {arm}, context {ctx})")))
    }

    pub fn contexts(&self, arm: usize) -> impl Iterator<Item = (&ContextId, &Vector)> {
        self.table[arm].iter()
    }
}

/// Finite-support distribution over contexts.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextDistribution {
    support: Vec<(ContextId, f64)>,
}

impl ContextDistribution {
    pub fn new(support: Vec<(ContextId, f64)>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Config("context distribution has empty support".into()));
        }
        let mut total = 0.0;
        for &(ctx, p) in &support {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::Config(format!("context {ctx} has probability {p}")));
            }
            total += p;
        }
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Config(format!("probabilities sum to {total}, not 1")));
        }
        Ok(ContextDistribution { support })
    }

    pub fn point_mass(ctx: ContextId) -> Self {
        ContextDistribution { support: vec![(ctx, 1.0)] }
    }

    pub fn support(&self) -> &[(ContextId, f64)] {
        &self.support
    }
}

/// Per-arm reward parameters `theta_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardParams {
    thetas: Vec<Vector>,
}

impl RewardParams {
    pub fn new(thetas: Vec<Vector>, bounds: &Bounds) -> Result<Self> {
        for (arm, t) in thetas.iter().enumerate() {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("theta for arm {arm}")));
            }
            if t.norm() > bounds.s + NORM_SLACK {
                return Err(Error::Config(format!(
                    "theta for arm {arm} has norm {} > s = {}",
                    t.norm(),
                    bounds.s
                )));
            }
        }
        Ok(RewardParams { thetas })
    }

    pub fn theta(&self, arm: usize) -> &Vector {
        &self.thetas[arm]
    }

    pub fn arms(&self) -> usize {
        self.thetas.len()
    }
}

/// `psi[agent][arm]`: the expected feature each agent works with.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiSet {
    psi: Vec<Vec<Vector>>,
}

impl PsiSet {
    pub fn get(&self, agent: usize, arm: usize) -> &Vector {
        &self.psi[agent][arm]
    }

    pub fn agent(&self, agent: usize) -> &[Vector] {
        &self.psi[agent]
    }

    pub fn agents(&self) -> usize {
        self.psi.len()
    }
}

/// `sum_c mu(c) * phi(arm, c)` over the finite support.
pub fn expected_feature(phi: &FeatureMap, mu: &ContextDistribution, arm: usize) -> Result<Vector> {
    let mut acc = Vector::zeros(phi.dim());
    for &(ctx, p) in mu.support() {
        acc.axpy(p, phi.get(arm, ctx)?, 1.0);
    }
    Ok(acc)
}

/// Expected features for every (agent, arm), rejecting any entry whose norm
/// falls below `ell` since the estimators divide by `||psi||^2`.
pub fn build_psi_set(phi: &FeatureMap, mus: &[ContextDistribution], bounds: &Bounds) -> Result<PsiSet> {
    let mut psi = Vec::with_capacity(mus.len());
    for (agent, mu) in mus.iter().enumerate() {
        let mut row = Vec::with_capacity(phi.arms());
        for arm in 0..phi.arms() {
            let v = expected_feature(phi, mu, arm)
                .map_err(|e| e.context(format!("agent {agent}")))?;
            let n = v.norm();
            if n < bounds.ell * (1.0 - 1e-12) {
                return Err(Error::Config(format!(
                    "expected feature for (agent {agent}, arm {arm}) has norm {n} < ell = {}",
                    bounds.ell
                )));
            }
            row.push(v);
        }
        psi.push(row);
    }
    Ok(PsiSet { psi })
}

/// A complete bandit instance: the truth the environment simulates plus the
/// distributions agents observe.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub bounds: Bounds,
    pub thetas: RewardParams,
    pub contexts: BTreeMap<ContextId, String>,
    pub features: FeatureMap,
    pub agents: Vec<ContextDistribution>,
    /// Standard deviation of the Gaussian reward noise.
    pub sigma: f64,
}

impl Scenario {
    pub fn new(
        bounds: Bounds,
        thetas: RewardParams,
        contexts: BTreeMap<ContextId, String>,
        features: FeatureMap,
        agents: Vec<ContextDistribution>,
        sigma: f64,
    ) -> Result<Self> {
        let s = Scenario {
            bounds,
            thetas,
            contexts,
            features,
            agents,
            sigma,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn arms(&self) -> usize {
        self.features.arms()
    }

    pub fn agents(&self) -> usize {
        self.agents.len()
    }

    /// Checks cross-object consistency, including the expected-feature floor.
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.thetas.arms() != self.arms() {
            return Err(Error::Dimension(format!(
                "{} reward vectors for {} arms",
                self.thetas.arms(),
                self.arms()
            )));
        }
        for arm in 0..self.arms() {
            if self.thetas.theta(arm).len() != self.dim() {
                return Err(Error::Dimension(format!("theta for arm {arm} has wrong length")));
            }
        }
        if self.agents.is_empty() {
            return Err(Error::Config("scenario has no agents".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.sigma)));
        }
        build_psi_set(&self.features, &self.agents, &self.bounds)?;
        Ok(())
    }

    /// The same instance restricted to the first `m` agents.
    pub fn with_agents(&self, m: usize) -> Result<Scenario> {
        if m == 0 || m > self.agents() {
            return Err(Error::Config(format!(
                "cannot take {m} agents from a scenario with {}",
                self.agents()
            )));
        }
        let mut s = self.clone();
        s.agents.truncate(m);
        Ok(s)
    }

    pub fn to_file(&self) -> ScenarioFile {
        let mut features = BTreeMap::new();
        for arm in 0..self.arms() {
            let row: BTreeMap<ContextId, Vec<f64>> = self
                .features
                .contexts(arm)
                .map(|(c, v)| (*c, v.iter().copied().collect()))
                .collect();
            features.insert(arm, row);
        }
        ScenarioFile {
            d: self.dim(),
            k: self.arms(),
            m: self.agents(),
            bounds: self.bounds,
            thetas: (0..self.arms())
                .map(|a| self.thetas.theta(a).iter().copied().collect())
                .collect(),
            contexts: self.contexts.clone(),
            features,
            agents: self
                .agents
                .iter()
                .map(|mu| AgentEntry {
                    mu: mu.support().iter().map(|&(c, p)| (c, p)).collect(),
                })
                .collect(),
            sigma: self.sigma,
        }
    }

    pub fn from_file(f: ScenarioFile) -> Result<Scenario> {
        f.bounds.validate()?;
        if f.thetas.len() != f.k {
            return Err(Error::Config(format!("K = {} but {} thetas", f.k, f.thetas.len())));
        }
        if f.agents.len() != f.m {
            return Err(Error::Config(format!("M = {} but {} agents", f.m, f.agents.len())));
        }
        for (arm, t) in f.thetas.iter().enumerate() {
            if t.len() != f.d {
                return Err(Error::Dimension(format!("theta for arm {arm} has length {}", t.len())));
            }
        }
        let thetas = RewardParams::new(
            f.thetas.into_iter().map(Vector::from_vec).collect(),
            &f.bounds,
        )?;
        let mut table = vec![BTreeMap::new(); f.k];
        for (arm, row) in f.features {
            let slot = table
                .get_mut(arm)
                .ok_or_else(|| Error::Config(format!("features for arm {arm} but K = {}", f.k)))?;
            for (ctx, v) in row {
                if !f.contexts.is_empty() && !f.contexts.contains_key(&ctx) {
                    return Err(Error::Lookup(format!("context {ctx} (arm {arm}) is not declared")));
                }
                slot.insert(ctx, Vector::from_vec(v));
            }
        }
        let features = FeatureMap::new(f.d, table, &f.bounds)?;
        let agents = f
            .agents
            .into_iter()
            .enumerate()
            .map(|(i, a)| ContextDistribution::new(a.mu).map_err(|e| e.context(format!("agent {i}"))))
            .collect::<Result<Vec<_>>>()?;
        Scenario::new(f.bounds, thetas, f.contexts, features, agents, f.sigma)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let file: ScenarioFile = serde_json::from_str(&text)?;
        Scenario::from_file(file).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn default_sigma() -> f64 {
    1e-3
}

/// On-disk scenario schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub bounds: Bounds,
    pub thetas: Vec<Vec<f64>>,
    #[serde(default)]
    pub contexts: BTreeMap<ContextId, String>,
    pub features: BTreeMap<usize, BTreeMap<ContextId, Vec<f64>>>,
    pub agents: Vec<AgentEntry>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentEntry {
    pub mu: Vec<(ContextId, f64)>,
}
