//! Classical bandit decision rules, used both as evaluation baselines and
//! as sources of in-context data, plus an exact posterior sampler over
//! finite task families.
//!
//! Every selector breaks ties toward the lowest action index, so each rule
//! is a deterministic function of its statistics (and, where applicable,
//! the supplied RNG).

use std::sync::Arc;

use thiserror::Error;

use crate::environments::{argmax, Task, Transition};
use crate::numerics::Rng;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("offline selection requires at least one observed action")]
    NoObservations,
    #[error("every task in the support has zero posterior mass given the data")]
    ZeroPosteriorMass,
}

pub type Result<T> = std::result::Result<T, BaselineError>;

/// Per-arm pull counts and reward sums.
#[derive(Clone, Debug)]
pub struct ArmStatistics {
    counts: Vec<usize>,
    sums: Vec<f64>,
}

impl ArmStatistics {
    pub fn new(num_arms: usize) -> ArmStatistics {
        ArmStatistics {
            counts: vec![0; num_arms],
            sums: vec![0.0; num_arms],
        }
    }

    pub fn from_dataset(num_arms: usize, data: &[Transition]) -> ArmStatistics {
        let mut stats = ArmStatistics::new(num_arms);
        for t in data {
            stats.observe(t.action, t.reward);
        }
        stats
    }

    pub fn observe(&mut self, arm: usize, reward: f64) {
        self.counts[arm] += 1;
        self.sums[arm] += reward;
    }

    pub fn num_arms(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, arm: usize) -> usize {
        self.counts[arm]
    }

    /// Empirical mean; `None` until the arm has been pulled.
    pub fn mean(&self, arm: usize) -> Option<f64> {
        (self.counts[arm] > 0).then(|| self.sums[arm] / self.counts[arm] as f64)
    }

    fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Empirical-mean argmax restricted to arms with at least one observation.
pub fn emp_select_offline(stats: &ArmStatistics) -> Result<usize> {
    if stats.total() == 0 {
        return Err(BaselineError::NoObservations);
    }
    let scores: Vec<f64> = (0..stats.num_arms())
        .map(|a| stats.mean(a).unwrap_or(f64::NEG_INFINITY))
        .collect();
    Ok(argmax(&scores))
}

/// Greedy with forced coverage: the lowest-index unpulled arm if any,
/// otherwise the empirical-mean argmax.
pub fn emp_select_online(stats: &ArmStatistics) -> usize {
    match (0..stats.num_arms()).find(|&a| stats.count(a) == 0) {
        Some(a) => a,
        None => argmax(
            &(0..stats.num_arms())
                .map(|a| stats.mean(a).expect("every arm pulled"))
                .collect::<Vec<_>>(),
        ),
    }
}

/// Optimism: argmax of μ̂_a + √(1/n_a); an unpulled arm has an infinite
/// bonus and is always taken first.
pub fn ucb_select(stats: &ArmStatistics) -> usize {
    let scores: Vec<f64> = (0..stats.num_arms())
        .map(|a| match stats.mean(a) {
            Some(m) => m + (1.0 / stats.count(a) as f64).sqrt(),
            None => f64::INFINITY,
        })
        .collect();
    argmax(&scores)
}

/// Pessimism: argmax of μ̂_a − √(1/n_a); unpulled arms are never selected.
pub fn lcb_select(stats: &ArmStatistics) -> Result<usize> {
    if stats.total() == 0 {
        return Err(BaselineError::NoObservations);
    }
    let scores: Vec<f64> = (0..stats.num_arms())
        .map(|a| match stats.mean(a) {
            Some(m) => m - (1.0 / stats.count(a) as f64).sqrt(),
            None => f64::NEG_INFINITY,
        })
        .collect();
    Ok(argmax(&scores))
}

/// The uniform interface the evaluation harness drives: feed observations,
/// ask for a one-shot (offline) or sequential (online) decision.
pub trait BanditAgent: Send {
    fn name(&self) -> String;
    /// Forget everything; the next task starts fresh.
    fn reset(&mut self);
    fn observe(&mut self, action: usize, reward: f64);
    fn select_offline(&self) -> Result<usize>;
    fn select_online(&mut self, rng: &mut Rng) -> Result<usize>;
}

pub struct EmpAgent(ArmStatistics);

impl EmpAgent {
    pub fn new(num_arms: usize) -> EmpAgent {
        EmpAgent(ArmStatistics::new(num_arms))
    }
}

impl BanditAgent for EmpAgent {
    fn name(&self) -> String {
        "emp".into()
    }

    fn reset(&mut self) {
        self.0 = ArmStatistics::new(self.0.num_arms());
    }

    fn observe(&mut self, action: usize, reward: f64) {
        self.0.observe(action, reward);
    }

    fn select_offline(&self) -> Result<usize> {
        emp_select_offline(&self.0)
    }

    fn select_online(&mut self, _rng: &mut Rng) -> Result<usize> {
        Ok(emp_select_online(&self.0))
    }
}

pub struct UcbAgent(ArmStatistics);

impl UcbAgent {
    pub fn new(num_arms: usize) -> UcbAgent {
        UcbAgent(ArmStatistics::new(num_arms))
    }
}

impl BanditAgent for UcbAgent {
    fn name(&self) -> String {
        "ucb".into()
    }

    fn reset(&mut self) {
        self.0 = ArmStatistics::new(self.0.num_arms());
    }

    fn observe(&mut self, action: usize, reward: f64) {
        self.0.observe(action, reward);
    }

    fn select_offline(&self) -> Result<usize> {
        Ok(ucb_select(&self.0))
    }

    fn select_online(&mut self, _rng: &mut Rng) -> Result<usize> {
        Ok(ucb_select(&self.0))
    }
}

pub struct LcbAgent(ArmStatistics);

impl LcbAgent {
    pub fn new(num_arms: usize) -> LcbAgent {
        LcbAgent(ArmStatistics::new(num_arms))
    }
}

impl BanditAgent for LcbAgent {
    fn name(&self) -> String {
        "lcb".into()
    }

    fn reset(&mut self) {
        self.0 = ArmStatistics::new(self.0.num_arms());
    }

    fn observe(&mut self, action: usize, reward: f64) {
        self.0.observe(action, reward);
    }

    fn select_offline(&self) -> Result<usize> {
        lcb_select(&self.0)
    }

    fn select_online(&mut self, _rng: &mut Rng) -> Result<usize> {
        lcb_select(&self.0)
    }
}

/// Thompson sampling with independent conjugate-normal posteriors per arm
/// and a known reward variance.
pub struct GaussianTs {
    prior_mean: f64,
    prior_var: f64,
    noise_var: f64,
    stats: ArmStatistics,
}

impl GaussianTs {
    pub fn new(num_arms: usize, prior_mean: f64, prior_var: f64, noise_var: f64) -> GaussianTs {
        assert!(prior_var > 0.0 && noise_var > 0.0, "variances must be positive");
        GaussianTs {
            prior_mean,
            prior_var,
            noise_var,
            stats: ArmStatistics::new(num_arms),
        }
    }

    /// Posterior over an arm's mean: precision adds, precision-weighted
    /// means add.
    pub fn posterior(&self, arm: usize) -> (f64, f64) {
        let precision = 1.0 / self.prior_var + self.stats.count(arm) as f64 / self.noise_var;
        let weighted = self.prior_mean / self.prior_var + self.stats.sums[arm] / self.noise_var;
        (weighted / precision, 1.0 / precision)
    }

    fn sample_and_select(&self, rng: &mut Rng) -> usize {
        let draws: Vec<f64> = (0..self.stats.num_arms())
            .map(|a| {
                let (mean, var) = self.posterior(a);
                mean + var.sqrt() * rng.normal()
            })
            .collect();
        argmax(&draws)
    }
}

impl BanditAgent for GaussianTs {
    fn name(&self) -> String {
        "ts".into()
    }

    fn reset(&mut self) {
        self.stats = ArmStatistics::new(self.stats.num_arms());
    }

    fn observe(&mut self, action: usize, reward: f64) {
        self.stats.observe(action, reward);
    }

    /// Greedy Bayes: argmax of the posterior means.
    fn select_offline(&self) -> Result<usize> {
        let means: Vec<f64> = (0..self.stats.num_arms())
            .map(|a| self.posterior(a).0)
            .collect();
        Ok(argmax(&means))
    }

    fn select_online(&mut self, rng: &mut Rng) -> Result<usize> {
        Ok(self.sample_and_select(rng))
    }
}

/// How many rank-1 posterior updates to apply before recomputing the
/// inverse design matrix from scratch, bounding float drift.
const LINUCB_REBUILD_EVERY: usize = 64;

/// Ridge regression over shared arm features with an elliptical bonus:
/// score(a) = ⟨θ̂, φ_a⟩ + β‖φ_a‖_{Σ̂⁻¹} where Σ̂ = I + Σ φφᵀ. β = 0 is the
/// plain regression variant.
pub struct LinUcb {
    features: Arc<Vec<Vec<f64>>>,
    beta: f64,
    dim: usize,
    /// Σ̂⁻¹, kept current by Sherman–Morrison updates.
    inv: Vec<f64>,
    /// Σ r·φ(a) over observations.
    response: Vec<f64>,
    observations: Vec<(usize, f64)>,
    updates_since_rebuild: usize,
}

impl LinUcb {
    pub fn new(features: Arc<Vec<Vec<f64>>>, beta: f64) -> LinUcb {
        let dim = features.first().map_or(0, Vec::len);
        assert!(dim > 0, "features must be non-empty");
        assert!(features.iter().all(|f| f.len() == dim));
        LinUcb {
            features,
            beta,
            dim,
            inv: identity(dim),
            response: vec![0.0; dim],
            observations: Vec::new(),
            updates_since_rebuild: 0,
        }
    }

    fn scores(&self) -> Vec<f64> {
        let theta = mat_vec(&self.inv, &self.response, self.dim);
        self.features
            .iter()
            .map(|phi| {
                let mean: f64 = theta.iter().zip(phi).map(|(t, p)| t * p).sum();
                let ellipse = mat_vec(&self.inv, phi, self.dim)
                    .iter()
                    .zip(phi)
                    .map(|(w, p)| w * p)
                    .sum::<f64>();
                mean + self.beta * ellipse.max(0.0).sqrt()
            })
            .collect()
    }

    fn rebuild(&mut self) {
        let d = self.dim;
        let mut design = identity(d);
        for &(arm, _) in &self.observations {
            let phi = &self.features[arm];
            for i in 0..d {
                for j in 0..d {
                    design[i * d + j] += phi[i] * phi[j];
                }
            }
        }
        self.inv = invert(&design, d).expect("I + Σφφᵀ is positive definite");
        self.updates_since_rebuild = 0;
    }
}

impl BanditAgent for LinUcb {
    fn name(&self) -> String {
        if self.beta == 0.0 {
            "linreg".into()
        } else {
            "linucb".into()
        }
    }

    fn reset(&mut self) {
        self.inv = identity(self.dim);
        self.response = vec![0.0; self.dim];
        self.observations.clear();
        self.updates_since_rebuild = 0;
    }

    fn observe(&mut self, action: usize, reward: f64) {
        let phi = self.features[action].clone();
        for (r, p) in self.response.iter_mut().zip(&phi) {
            *r += reward * p;
        }
        self.observations.push((action, reward));
        // Sherman–Morrison: (A + φφᵀ)⁻¹ = A⁻¹ − (A⁻¹φ)(A⁻¹φ)ᵀ / (1 + φᵀA⁻¹φ).
        let w = mat_vec(&self.inv, &phi, self.dim);
        let denom = 1.0 + phi.iter().zip(&w).map(|(p, x)| p * x).sum::<f64>();
        for i in 0..self.dim {
            for j in 0..self.dim {
                self.inv[i * self.dim + j] -= w[i] * w[j] / denom;
            }
        }
        self.updates_since_rebuild += 1;
        if self.updates_since_rebuild >= LINUCB_REBUILD_EVERY {
            self.rebuild();
        }
    }

    fn select_offline(&self) -> Result<usize> {
        Ok(argmax(&self.scores()))
    }

    fn select_online(&mut self, _rng: &mut Rng) -> Result<usize> {
        Ok(argmax(&self.scores()))
    }
}

/// Bayes-exact posterior sampling over an enumerated task set: weight each
/// task by prior times the likelihood of every observed transition, then
/// sample a task and act with its optimal policy.
pub struct ExactPosteriorSampler {
    tasks: Vec<Task>,
    log_prior: Vec<f64>,
}

impl ExactPosteriorSampler {
    pub fn uniform(tasks: Vec<Task>) -> ExactPosteriorSampler {
        let lp = -(tasks.len() as f64).ln();
        let log_prior = vec![lp; tasks.len()];
        ExactPosteriorSampler { tasks, log_prior }
    }

    pub fn with_prior(tasks: Vec<Task>, prior: &[f64]) -> ExactPosteriorSampler {
        assert_eq!(tasks.len(), prior.len());
        let log_prior = prior.iter().map(|p| p.ln()).collect();
        ExactPosteriorSampler { tasks, log_prior }
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    /// Normalized posterior over the support given the observed transitions.
    pub fn posterior(&self, data: &[Transition]) -> Result<Vec<f64>> {
        let log_w: Vec<f64> = self
            .tasks
            .iter()
            .zip(&self.log_prior)
            .map(|(task, lp)| {
                lp + data
                    .iter()
                    .map(|t| task.log_likelihood(t))
                    .sum::<f64>()
            })
            .collect();
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(BaselineError::ZeroPosteriorMass);
        }
        let unnorm: Vec<f64> = log_w.iter().map(|lw| (lw - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        Ok(unnorm.into_iter().map(|w| w / total).collect())
    }

    /// Draw a task from the posterior; returns its index and the task.
    pub fn sample(&self, data: &[Transition], rng: &mut Rng) -> Result<(usize, &Task)> {
        let posterior = self.posterior(data)?;
        let index = rng.categorical(&posterior);
        Ok((index, &self.tasks[index]))
    }
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

fn mat_vec(m: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| m[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Gauss–Jordan inverse with partial pivoting; `None` if singular.
fn invert(m: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut a = m.to_vec();
    let mut inv = identity(d);
    for col in 0..d {
        let pivot = (col..d).max_by(|&i, &j| {
            a[i * d + col]
                .abs()
                .partial_cmp(&a[j * d + col].abs())
                .expect("pivot magnitudes are comparable")
        })?;
        if a[pivot * d + col].abs() < 1e-12 {
            return None;
        }
        for j in 0..d {
            a.swap(col * d + j, pivot * d + j);
            inv.swap(col * d + j, pivot * d + j);
        }
        let diag = a[col * d + col];
        for j in 0..d {
            a[col * d + j] /= diag;
            inv[col * d + j] /= diag;
        }
        for row in 0..d {
            if row == col {
                continue;
            }
            let factor = a[row * d + col];
            for j in 0..d {
                a[row * d + j] -= factor * a[col * d + j];
                inv[row * d + j] -= factor * inv[col * d + j];
            }
        }
    }
    Some(inv)
}
