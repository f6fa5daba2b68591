//! Multi-agent experimental design.
//!
//! Every agent `i` splits its exploration budget over its active arms
//! `A_i` with weights `pi[i][a]` on the simplex. Arm `a` collects the
//! weighted Gram matrix `G_a = sum_{j in R_a} pi[j][a] e_{a,j} e_{a,j}^T`
//! from the agents `R_a` that still have it active. We maximize the
//! separable surrogate `sum_a log pdet(G_a)`, whose stationary points make
//! the worst per-agent predictive variance `max_a e^T G_a^+ e` small.
//!
//! The solver is cyclic block-coordinate ascent: one block per agent,
//! each block solved by Frank–Wolfe on that agent's simplex with an exact
//! line search. The log-determinant of arm `a` is taken on the fixed
//! subspace spanned by all of its roster directions, so a step that would
//! drop a direction out of the range has objective `-inf` and is never
//! taken.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SymEigen, Vector};

/// Default stopping tolerance on the largest per-block improvement in a sweep.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Default cap on full sweeps.
pub const DEFAULT_MAX_SWEEPS: usize = 500;

const UNIT_TOL: f64 = 1e-9;
const INNER_MAX: usize = 200;
const LINE_SEARCH_STEPS: usize = 64;

/// Active arms and unit directions per agent.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignProblem {
    dim: usize,
    // per agent, sorted by arm
    agents: Vec<Vec<(usize, Vector)>>,
}

impl DesignProblem {
    pub fn new(dim: usize, agents: Vec<Vec<(usize, Vector)>>) -> Result<Self> {
        let mut agents = agents;
        for (i, arms) in agents.iter_mut().enumerate() {
            if arms.is_empty() {
                return Err(Error::Config(format!("agent {i} has no active arms")));
            }
            arms.sort_by_key(|(a, _)| *a);
            if arms.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Config(format!("agent {i} lists an arm twice")));
            }
            for (a, e) in arms.iter() {
                if e.len() != dim {
                    return Err(Error::Dimension(format!(
                        "direction (agent {i}, arm {a}) has length {}, expected {dim}",
                        e.len()
                    )));
                }
                if (e.norm() - 1.0).abs() > UNIT_TOL {
                    return Err(Error::Config(format!(
                        "direction (agent {i}, arm {a}) has norm {}, expected 1",
                        e.norm()
                    )));
                }
            }
        }
        Ok(DesignProblem { dim, agents })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn agents(&self) -> usize {
        self.agents.len()
    }

    pub fn arms_of(&self, agent: usize) -> &[(usize, Vector)] {
        &self.agents[agent]
    }

    /// `arm -> [(agent, position of the arm in that agent's list)]`.
    fn rosters(&self) -> BTreeMap<usize, Vec<(usize, usize)>> {
        let mut r: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for (i, arms) in self.agents.iter().enumerate() {
            for (pos, (a, _)) in arms.iter().enumerate() {
                r.entry(*a).or_default().push((i, pos));
            }
        }
        r
    }

    /// `sum_a rank(sum_{j in R_a} e e^T)`.
    pub fn total_rank(&self) -> Result<usize> {
        let mut total = 0;
        for (arm, members) in self.rosters() {
            let mut g = Matrix::zeros(self.dim, self.dim);
            for (i, pos) in members {
                let e = &self.agents[i][pos].1;
                g += e * e.transpose();
            }
            total += linalg::rank(&g).map_err(|e| e.context(format!("arm {arm}")))?;
        }
        Ok(total)
    }
}

/// Exploration weights `pi[agent][arm]`, one simplex per agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignAllocation {
    pi: Vec<Vec<(usize, f64)>>,
}

impl DesignAllocation {
    pub fn uniform(prob: &DesignProblem) -> Self {
        DesignAllocation {
            pi: prob
                .agents
                .iter()
                .map(|arms| {
                    let w = 1.0 / arms.len() as f64;
                    arms.iter().map(|(a, _)| (*a, w)).collect()
                })
                .collect(),
        }
    }

    pub fn from_weights(pi: Vec<Vec<(usize, f64)>>) -> Self {
        DesignAllocation { pi }
    }

    pub fn agent(&self, agent: usize) -> &[(usize, f64)] {
        &self.pi[agent]
    }

    pub fn agents(&self) -> usize {
        self.pi.len()
    }

    pub fn get(&self, agent: usize, arm: usize) -> Option<f64> {
        self.pi
            .get(agent)?
            .iter()
            .find(|(a, _)| *a == arm)
            .map(|(_, w)| *w)
    }

    /// Largest deviation of any agent's weights from the simplex.
    pub fn simplex_violation(&self) -> f64 {
        self.pi
            .iter()
            .map(|row| {
                let neg = row.iter().map(|(_, w)| (-w).max(0.0)).fold(0.0, f64::max);
                let sum: f64 = row.iter().map(|(_, w)| w).sum();
                neg.max((sum - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }

    fn matches(&self, prob: &DesignProblem) -> bool {
        self.pi.len() == prob.agents.len()
            && self
                .pi
                .iter()
                .zip(&prob.agents)
                .all(|(w, arms)| w.len() == arms.len() && w.iter().zip(arms).all(|(x, y)| x.0 == y.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSolution {
    pub allocation: DesignAllocation,
    /// `sum_a log pdet(G_a)` at the returned allocation.
    pub objective: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Objective after each sweep.
    pub history: Vec<f64>,
}

/// `sum_a log pdet(sum_j pi[j][a] e_{a,j} e_{a,j}^T)`.
pub fn design_objective(prob: &DesignProblem, pi: &DesignAllocation) -> Result<f64> {
    let mut total = 0.0;
    for (_, members) in prob.rosters() {
        let mut g = Matrix::zeros(prob.dim, prob.dim);
        for (i, pos) in members {
            let e = &prob.agents[i][pos].1;
            g += e * e.transpose() * pi.pi[i][pos].1;
        }
        total += linalg::log_det_on_range(&g)?;
    }
    Ok(total)
}

/// `g[i][a] = e_{a,i}^T (sum_j pi[j][a] e_{a,j} e_{a,j}^T)^+ e_{a,i}` for
/// every active pair, in the problem's per-agent arm order.
pub fn design_score(prob: &DesignProblem, pi: &DesignAllocation) -> Result<Vec<Vec<(usize, f64)>>> {
    let mut inv = BTreeMap::new();
    for (arm, members) in prob.rosters() {
        let mut g = Matrix::zeros(prob.dim, prob.dim);
        for (i, pos) in members {
            let e = &prob.agents[i][pos].1;
            g += e * e.transpose() * pi.pi[i][pos].1;
        }
        inv.insert(arm, linalg::pinv(&g)?);
    }
    Ok(prob
        .agents
        .iter()
        .map(|arms| {
            arms.iter()
                .map(|(a, e)| (*a, e.dot(&(&inv[a] * e))))
                .collect()
        })
        .collect())
}

/// `sum_i max_{a in A_i} g[i][a]`; at an exact optimum this equals
/// `DesignProblem::total_rank`, which is at most `d * K`.
pub fn worst_case_budget(prob: &DesignProblem, pi: &DesignAllocation) -> Result<f64> {
    Ok(design_score(prob, pi)?
        .iter()
        .map(|row| row.iter().map(|(_, g)| *g).fold(f64::NEG_INFINITY, f64::max))
        .sum())
}

/// Lower Cholesky factor of the `r x r` row-major `g` into `l`; false if
/// `g` is not positive definite.
fn cholesky(g: &[f64], r: usize, l: &mut [f64]) -> bool {
    for i in 0..r {
        for j in 0..=i {
            let mut s = g[i * r + j];
            for k in 0..j {
                s -= l[i * r + k] * l[j * r + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return false;
                }
                l[i * r + i] = s.sqrt();
            } else {
                l[i * r + j] = s / l[j * r + j];
            }
        }
    }
    true
}

/// Per-arm Gram matrix in reduced coordinates (row-major).
struct ArmBlock {
    r: usize,
    gram: Vec<f64>,
}

/// One (agent, arm) pair: its arm block and reduced direction.
struct Pair {
    block: usize,
    e: Vec<f64>,
}

struct Solver<'a> {
    prob: &'a DesignProblem,
    pi: Vec<Vec<f64>>,
    blocks: Vec<ArmBlock>,
    pairs: Vec<Vec<Pair>>,
    chol: Vec<f64>,
    work: Vec<f64>,
}

impl<'a> Solver<'a> {
    fn new(prob: &'a DesignProblem, pi: &DesignAllocation) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut pairs: Vec<Vec<Pair>> = prob.agents.iter().map(|arms| Vec::with_capacity(arms.len())).collect();
        let mut slots: Vec<Vec<Option<Pair>>> = prob.agents.iter().map(|arms| (0..arms.len()).map(|_| None).collect()).collect();
        for (_, members) in prob.rosters() {
            let mut span = Matrix::zeros(prob.dim, prob.dim);
            for &(i, pos) in &members {
                let e = &prob.agents[i][pos].1;
                span += e * e.transpose();
            }
            let basis = SymEigen::new(&span)?.range_basis();
            let r = basis.ncols();
            let block = blocks.len();
            for (i, pos) in members {
                let e = basis.transpose() * &prob.agents[i][pos].1;
                slots[i][pos] = Some(Pair {
                    block,
                    e: e.iter().copied().collect(),
                });
            }
            blocks.push(ArmBlock {
                r,
                gram: vec![0.0; r * r],
            });
        }
        for (row, out) in slots.into_iter().zip(pairs.iter_mut()) {
            out.extend(row.into_iter().map(|p| p.expect("every pair belongs to a roster")));
        }
        let mut s = Solver {
            prob,
            pi: pi.pi.iter().map(|row| row.iter().map(|(_, w)| *w).collect()).collect(),
            blocks,
            pairs,
            chol: vec![0.0; prob.dim * prob.dim],
            work: vec![0.0; prob.dim],
        };
        s.rebuild();
        Ok(s)
    }

    fn rebuild(&mut self) {
        for b in &mut self.blocks {
            b.gram.fill(0.0);
        }
        for (row, w) in self.pairs.iter().zip(&self.pi) {
            for (p, &x) in row.iter().zip(w) {
                add_outer(&mut self.blocks[p.block], &p.e, x);
            }
        }
    }

    fn block_log_det(&mut self, block: usize) -> f64 {
        let b = &self.blocks[block];
        if b.r == 0 {
            return 0.0;
        }
        if !cholesky(&b.gram, b.r, &mut self.chol) {
            return f64::NEG_INFINITY;
        }
        (0..b.r).map(|i| 2.0 * self.chol[i * b.r + i].ln()).sum()
    }

    fn objective(&mut self) -> f64 {
        (0..self.blocks.len()).map(|b| self.block_log_det(b)).sum()
    }

    fn block_objective(&mut self, agent: usize) -> f64 {
        (0..self.pairs[agent].len())
            .map(|k| self.block_log_det(self.pairs[agent][k].block))
            .sum()
    }

    /// `e^T G^-1 e` for pair `k` of `agent`.
    fn leverage(&mut self, agent: usize, k: usize) -> Option<f64> {
        let p = &self.pairs[agent][k];
        let b = &self.blocks[p.block];
        let r = b.r;
        if !cholesky(&b.gram, r, &mut self.chol) {
            return None;
        }
        let mut acc = 0.0;
        for i in 0..r {
            let mut s = p.e[i];
            for j in 0..i {
                s -= self.chol[i * r + j] * self.work[j];
            }
            self.work[i] = s / self.chol[i * r + i];
            acc += self.work[i] * self.work[i];
        }
        Some(acc)
    }

    /// Gradient of the objective w.r.t. agent `i`'s weights.
    fn gradient(&mut self, agent: usize) -> Option<Vec<f64>> {
        (0..self.pairs[agent].len()).map(|k| self.leverage(agent, k)).collect()
    }

    /// Pairwise Frank–Wolfe on one agent's simplex: mass moves from the
    /// supported arm with the smallest gradient to the arm with the largest.
    /// Returns the block improvement.
    fn update_block(&mut self, agent: usize, tol: f64) -> f64 {
        let n = self.pairs[agent].len();
        if n == 1 {
            return 0.0;
        }
        let before = self.block_objective(agent);
        for _ in 0..INNER_MAX {
            let Some(h) = self.gradient(agent) else { break };
            let w = &self.pi[agent];
            let mut up = 0;
            for k in 1..n {
                if h[k] > h[up] {
                    up = k;
                }
            }
            let mut down = None;
            for k in 0..n {
                if w[k] > 0.0 && down.is_none_or(|d: usize| h[k] < h[d]) {
                    down = Some(k);
                }
            }
            let Some(down) = down else { break };
            if h[up] - h[down] <= tol {
                break;
            }
            let cap = w[down];
            let (hu, hd) = (h[up], h[down]);
            // Along the move each arm's log det changes by ln(1 + gamma h)
            // or ln(1 - gamma h) (matrix determinant lemma).
            let slope = |gamma: f64| -> f64 {
                let den = 1.0 - gamma * hd;
                if den <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                hu / (1.0 + gamma * hu) - hd / den
            };
            let gamma = if slope(cap) >= 0.0 {
                cap
            } else {
                let (mut lo, mut hi) = (0.0, cap);
                for _ in 0..LINE_SEARCH_STEPS {
                    let mid = 0.5 * (lo + hi);
                    if slope(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                lo
            };
            if gamma == 0.0 {
                break;
            }
            let pu = &self.pairs[agent][up];
            add_outer(&mut self.blocks[pu.block], &pu.e, gamma);
            let pd = &self.pairs[agent][down];
            add_outer(&mut self.blocks[pd.block], &pd.e, -gamma);
            let row = &mut self.pi[agent];
            row[up] += gamma;
            row[down] = if gamma == cap { 0.0 } else { row[down] - gamma };
        }
        self.block_objective(agent) - before
    }

    fn allocation(&self) -> DesignAllocation {
        DesignAllocation {
            pi: self
                .prob
                .agents
                .iter()
                .zip(&self.pi)
                .map(|(arms, w)| arms.iter().map(|(a, _)| *a).zip(w.iter().copied()).collect())
                .collect(),
        }
    }
}

fn add_outer(b: &mut ArmBlock, e: &[f64], w: f64) {
    if w == 0.0 {
        return;
    }
    let r = b.r;
    for i in 0..r {
        let wi = w * e[i];
        for j in 0..r {
            b.gram[i * r + j] += wi * e[j];
        }
    }
}

/// Solves the design from the uniform allocation.
pub fn solve_design(prob: &DesignProblem, max_sweeps: usize, tol: f64) -> Result<DesignSolution> {
    solve_design_from(prob, None, max_sweeps, tol)
}

/// Solves the design, warm-starting from `warm` restricted to the current
/// active pairs when that start has a finite objective.
pub fn solve_design_from(
    prob: &DesignProblem,
    warm: Option<&DesignAllocation>,
    max_sweeps: usize,
    tol: f64,
) -> Result<DesignSolution> {
    if max_sweeps == 0 {
        return Err(Error::Config("design solver needs at least one sweep".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("design tolerance must be positive, got {tol}")));
    }
    let uniform = DesignAllocation::uniform(prob);
    let mut solver = Solver::new(prob, &uniform)?;
    if let Some(start) = warm.and_then(|w| restrict(prob, w)) {
        let mut candidate = Solver::new(prob, &start)?;
        if candidate.objective().is_finite() {
            solver = candidate;
        }
    }

    let mut history = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut best_gain = 0.0f64;
        for agent in 0..prob.agents() {
            best_gain = best_gain.max(solver.update_block(agent, tol));
        }
        // refresh the running Gram sums so rounding does not accumulate
        solver.rebuild();
        history.push(solver.objective());
        if best_gain < tol {
            converged = true;
            break;
        }
    }
    let allocation = solver.allocation();
    let objective = design_objective(prob, &allocation)?;
    Ok(DesignSolution {
        allocation,
        objective,
        sweeps,
        converged,
        history,
    })
}

fn restrict(prob: &DesignProblem, warm: &DesignAllocation) -> Option<DesignAllocation> {
    if warm.matches(prob) {
        return Some(warm.clone());
    }
    let pi = prob
        .agents
        .iter()
        .enumerate()
        .map(|(i, arms)| {
            let raw: Vec<(usize, f64)> = arms
                .iter()
                .map(|(a, _)| (*a, warm.get(i, *a).unwrap_or(0.0).max(0.0)))
                .collect();
            let s: f64 = raw.iter().map(|(_, w)| w).sum();
            if s > 0.0 {
                raw.into_iter().map(|(a, w)| (a, w / s)).collect()
            } else {
                let w = 1.0 / arms.len() as f64;
                arms.iter().map(|(a, _)| (*a, w)).collect()
            }
        })
        .collect();
    Some(DesignAllocation { pi })
}
