//! Pretraining-sample generation: task draws, in-context dataset sources,
//! optimal-action labels, and optional episode histories.
//!
//! A pretraining sample couples a query state and an in-context dataset with
//! the generating task's optimal action at that query state. Dataset sources
//! differ only in *how actions are chosen*; the environment always supplies
//! rewards and next states. Sources built through [`CompliantActionRule`] can
//! see nothing but the interaction history, so their action rule is the same
//! for every task that produces the same observations. The expert-biased
//! source breaks that property on purpose: it reads the task's optimal arm,
//! which is exactly the privileged access the rule interface forbids.
//!
//! Samples are addressed by `(seed, index)` and generated lazily: the same
//! pair always yields a bit-identical sample, which is what makes runs
//! replayable and generation embarrassingly parallel.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{BanditAgent, GaussianTs};
use crate::environments::{
    all_action_permutations, split_goals, BanditDistribution, BanditTask, DarkRoomTask, State,
    Task, Transition, DARKROOM_NUM_ACTIONS,
};
use crate::model::StateEncoding;
use crate::numerics::Rng;

/// Thompson-sampling defaults used by the rollout dataset source: standard
/// normal prior over arm means, reward noise variance 0.3^2.
pub const TS_PRIOR_MEAN: f64 = 0.0;
pub const TS_PRIOR_VAR: f64 = 1.0;
pub const TS_NOISE_VAR: f64 = 0.09;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid family: {0}")]
    BadFamily(String),
    #[error("dataset kind {kind} cannot be generated for family {family}")]
    KindFamilyMismatch { kind: &'static str, family: String },
    #[error("history conditioning requires an episodic (MDP) family")]
    HistoryNeedsEpisodes,
    #[error("context length must be at least 1")]
    EmptyContext,
    #[error(
        "{num_samples} samples cannot cover {num_tasks} tasks evenly; \
         pick a multiple of the task count"
    )]
    UnevenTaskCoverage { num_samples: u64, num_tasks: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T, E = DatagenError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Dataset sources
// ---------------------------------------------------------------------------

/// How in-context datasets are produced.
///
/// Every variant except `ExpertBiased` is a *compliant* source: its action
/// choices can be computed from the interaction history alone. `ExpertBiased`
/// mixes a point mass on the generating task's optimal arm into the action
/// distribution, so it is task-aware by construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    /// Bandits: arm frequencies from a symmetric Dirichlet mixed with a point
    /// mass on a uniformly random arm; actions drawn i.i.d. from the mix.
    DirichletMix,
    /// Bandits: like `DirichletMix`, but the point mass sits on the optimal
    /// arm. `omega` fixes the mixing weight; `None` draws it from the grid
    /// {0.1, 0.2, ..., 1.0} per dataset, the pretraining setting.
    ExpertBiased { omega: Option<f64> },
    /// Bandits: a sequential Thompson-sampling rollout; row order is the
    /// rollout order and carries information, so it is never shuffled.
    TsRollout,
    /// Episodic tasks: one episode under the uniform-random policy, starting
    /// from the task's initial state.
    UniformRandomRollout,
    /// Any task: rows are i.i.d. uniform (state, action) pairs with
    /// environment-sampled next state and reward.
    EnvUniformSa,
}

impl DatasetKind {
    /// Whether the source's action rule is computable without the task.
    pub fn is_compliant(self) -> bool {
        !matches!(self, DatasetKind::ExpertBiased { .. })
    }

    /// Whether training may shuffle the dataset rows of a sample. Rollout
    /// order is meaningful for Thompson-sampling data, so it is preserved.
    pub fn shuffles_for_training(self) -> bool {
        !matches!(self, DatasetKind::TsRollout)
    }

    pub fn label(self) -> &'static str {
        match self {
            DatasetKind::DirichletMix => "dirichlet_mix",
            DatasetKind::ExpertBiased { .. } => "expert_biased",
            DatasetKind::TsRollout => "ts_rollout",
            DatasetKind::UniformRandomRollout => "uniform_random_rollout",
            DatasetKind::EnvUniformSa => "env_uniform_sa",
        }
    }
}

/// An action rule that may see only the interaction so far — never the task.
///
/// Any dataset source routed through this interface is compliant by
/// construction: the task influences the data only through the environment's
/// responses, not through the action choices.
pub trait CompliantActionRule {
    /// Pick the next action given the current state and the dataset so far.
    fn choose(&mut self, state: &State, so_far: &[Transition], rng: &mut Rng) -> usize;

    /// Digest the transition that resulted from the last choice.
    fn observe(&mut self, _transition: &Transition) {}
}

/// Draws actions i.i.d. from a fixed categorical distribution.
pub struct FixedDistributionRule {
    probs: Vec<f64>,
}

impl FixedDistributionRule {
    pub fn new(probs: Vec<f64>) -> FixedDistributionRule {
        assert!(!probs.is_empty(), "need at least one action probability");
        FixedDistributionRule { probs }
    }
}

impl CompliantActionRule for FixedDistributionRule {
    fn choose(&mut self, _state: &State, _so_far: &[Transition], rng: &mut Rng) -> usize {
        rng.categorical(&self.probs)
    }
}

/// Draws actions uniformly at random.
pub struct UniformActionRule {
    num_actions: usize,
}

impl UniformActionRule {
    pub fn new(num_actions: usize) -> UniformActionRule {
        assert!(num_actions >= 1, "need at least one action");
        UniformActionRule { num_actions }
    }
}

impl CompliantActionRule for UniformActionRule {
    fn choose(&mut self, _state: &State, _so_far: &[Transition], rng: &mut Rng) -> usize {
        rng.below(self.num_actions)
    }
}

/// Gaussian Thompson sampling as a history-only action rule.
pub struct TsActionRule {
    agent: GaussianTs,
}

impl TsActionRule {
    /// Standard-normal prior over arm means, noise variance 0.3^2.
    pub fn new(num_arms: usize) -> TsActionRule {
        TsActionRule {
            agent: GaussianTs::new(num_arms, TS_PRIOR_MEAN, TS_PRIOR_VAR, TS_NOISE_VAR),
        }
    }

    pub fn with_agent(agent: GaussianTs) -> TsActionRule {
        TsActionRule { agent }
    }
}

impl CompliantActionRule for TsActionRule {
    fn choose(&mut self, _state: &State, _so_far: &[Transition], rng: &mut Rng) -> usize {
        self.agent
            .select_online(rng)
            .expect("Thompson sampling always proposes an arm")
    }

    fn observe(&mut self, transition: &Transition) {
        self.agent.observe(transition.action, transition.reward);
    }
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// Runs `rule` for `length` steps through the task's dynamics, starting from
/// the task's initial state. The rule sees only the history; the task only
/// answers with rewards and next states.
pub fn rollout_episode(
    task: &Task,
    length: usize,
    rule: &mut dyn CompliantActionRule,
    rng: &mut Rng,
) -> Vec<Transition> {
    let mut data: Vec<Transition> = Vec::with_capacity(length);
    let mut state = task.initial_state();
    for _ in 0..length {
        let action = rule.choose(&state, &data, rng);
        let (next_state, reward) = task.step(&state, action, rng);
        let transition = Transition {
            state,
            action,
            next_state,
            reward,
        };
        rule.observe(&transition);
        data.push(transition);
        state = next_state;
    }
    data
}

/// Normalized vector of `num` i.i.d. Exp(1) draws — a symmetric Dirichlet
/// sample with unit concentration.
pub fn dirichlet_uniform(num: usize, rng: &mut Rng) -> Vec<f64> {
    assert!(num >= 1, "need at least one category");
    let mut draws: Vec<f64> = (0..num).map(|_| -(1.0 - rng.uniform()).ln()).collect();
    let total: f64 = draws.iter().sum();
    for d in &mut draws {
        *d /= total;
    }
    draws
}

/// `(1 - omega) * base + omega * point-mass(anchor)`.
fn mix_with_point_mass(base: &[f64], anchor: usize, omega: f64) -> Vec<f64> {
    assert!((0.0..=1.0).contains(&omega), "mixing weight out of range");
    let mut probs: Vec<f64> = base.iter().map(|p| (1.0 - omega) * p).collect();
    probs[anchor] += omega;
    probs
}

/// The mixing-weight grid {0.1, 0.2, ..., 1.0} that dataset generators draw
/// omega from; exact-enumeration checks must average over the same values.
pub fn omega_grid() -> impl Iterator<Item = f64> {
    (1..=10).map(|i| i as f64 / 10.0)
}

/// Uniform draw from the mixing-weight grid {0.1, 0.2, ..., 1.0}.
fn omega_grid_draw(rng: &mut Rng) -> f64 {
    (rng.below(10) + 1) as f64 / 10.0
}

/// Bandit dataset with Dirichlet-mixed arm frequencies: arm probabilities are
/// `(1 - omega) * Dirichlet(1) + omega * point-mass(random arm)` with omega
/// from the grid {0.1, ..., 1.0}; actions are then i.i.d. from that vector.
pub fn gen_dirichlet_mix_dataset(task: &BanditTask, n: usize, rng: &mut Rng) -> Vec<Transition> {
    let base = dirichlet_uniform(task.num_arms(), rng);
    let anchor = rng.below(task.num_arms());
    let omega = omega_grid_draw(rng);
    let mut rule = FixedDistributionRule::new(mix_with_point_mass(&base, anchor, omega));
    rollout_episode(&Task::Bandit(task.clone()), n, &mut rule, rng)
}

/// Bandit dataset biased toward the optimal arm: arm probabilities are
/// `(1 - omega) * Dirichlet(1) + omega * point-mass(optimal arm)`.
///
/// Deliberately *not* routed through [`CompliantActionRule`]: the action
/// distribution depends on the task's optimal arm, which that interface is
/// designed to make unreachable.
pub fn gen_expert_biased_dataset(
    task: &BanditTask,
    n: usize,
    omega: f64,
    rng: &mut Rng,
) -> Vec<Transition> {
    let base = dirichlet_uniform(task.num_arms(), rng);
    let probs = mix_with_point_mass(&base, task.optimal_action(), omega);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let action = rng.categorical(&probs);
        let reward = task.sample_reward(action, rng);
        data.push(Transition {
            state: State::Unit,
            action,
            next_state: State::Unit,
            reward,
        });
    }
    data
}

/// Sequential Thompson-sampling rollout on a bandit; row order preserved.
pub fn gen_ts_rollout_dataset(task: &BanditTask, n: usize, rng: &mut Rng) -> Vec<Transition> {
    let mut rule = TsActionRule::new(task.num_arms());
    rollout_episode(&Task::Bandit(task.clone()), n, &mut rule, rng)
}

/// Dataset of i.i.d. uniform (state, action) rows with environment-sampled
/// outcomes. For bandits the state collapses to the unit state, so this is
/// plain uniform arm pulls.
pub fn gen_uniform_sa_dataset(task: &Task, size: usize, rng: &mut Rng) -> Vec<Transition> {
    let mut rule = UniformActionRule::new(task.num_actions());
    (0..size)
        .map(|_| {
            let state = uniform_state(task, rng);
            let action = rule.choose(&state, &[], rng);
            let (next_state, reward) = task.step(&state, action, rng);
            Transition {
                state,
                action,
                next_state,
                reward,
            }
        })
        .collect()
}

/// Partial-episode history for the history-conditioned variant: a length
/// drawn uniformly from {0, ..., horizon-1}, states i.i.d. uniform, each
/// paired with the task's optimal action. No environment interaction needed.
pub fn gen_history_sample(task: &Task, horizon: usize, rng: &mut Rng) -> Vec<(State, usize)> {
    assert!(horizon >= 1, "history needs a positive horizon");
    let h = rng.below(horizon);
    (0..h)
        .map(|_| {
            let state = uniform_state(task, rng);
            (state, task.optimal_action(&state))
        })
        .collect()
}

/// Episode generated by the task's own optimal policy. An evaluation-side
/// dataset source; like the expert-biased bandit source it reads the task
/// directly and is therefore outside the compliant-rule interface.
pub fn gen_expert_episode(task: &Task, length: usize, rng: &mut Rng) -> Vec<Transition> {
    let mut data = Vec::with_capacity(length);
    let mut state = task.initial_state();
    for _ in 0..length {
        let action = task.optimal_action(&state);
        let (next_state, reward) = task.step(&state, action, rng);
        data.push(Transition {
            state,
            action,
            next_state,
            reward,
        });
        state = next_state;
    }
    data
}

/// Uniform draw over a task's state space (the unit state for bandits).
pub fn uniform_state(task: &Task, rng: &mut Rng) -> State {
    match task {
        Task::Bandit(_) => State::Unit,
        Task::DarkRoom(room) => State::Grid {
            x: rng.below(room.grid_size),
            y: rng.below(room.grid_size),
        },
        Task::Tabular(mdp) => State::Discrete {
            index: rng.below(mdp.num_states),
        },
    }
}

// ---------------------------------------------------------------------------
// Task families
// ---------------------------------------------------------------------------

/// Which slice of an enumerable family a spec addresses. Grid-world goals
/// (or action permutations) are split once per family seed; `All` orders the
/// training slice first so a trailing validation fraction aligns with the
/// held-out tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalPartition {
    Train,
    Test,
    All,
}

/// A distribution over tasks, serializable so a run manifest fully determines
/// the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TaskFamilyConfig {
    /// Arm means i.i.d. Uniform[0,1], Gaussian reward noise.
    GaussianBandit { num_arms: usize, sigma: f64 },
    /// Arm means i.i.d. Uniform[0,1], Bernoulli rewards.
    BernoulliBandit { num_arms: usize },
    /// Shared arm features (fixed by `feature_seed`), task-specific parameter
    /// vector, Gaussian noise.
    LinearBandit {
        num_arms: usize,
        dim: usize,
        sigma: f64,
        feature_seed: u64,
    },
    /// Goal-reaching grid world; the goal set is split `train_fraction` /
    /// rest by `split_seed`.
    DarkRoom {
        grid_size: usize,
        horizon: usize,
        train_fraction: f64,
        split_seed: u64,
        partition: GoalPartition,
    },
    /// Grid world with the goal pinned to the far corner and the action
    /// semantics permuted; the 120 permutations are split into the first
    /// `train_permutations` (after a seeded shuffle) and the rest.
    DarkRoomPermuted {
        grid_size: usize,
        horizon: usize,
        train_permutations: usize,
        split_seed: u64,
        partition: GoalPartition,
    },
    /// An explicit finite support with uniform prior.
    Finite { tasks: Vec<Task> },
}

impl TaskFamilyConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DatagenError::BadFamily(msg));
        match self {
            TaskFamilyConfig::GaussianBandit { num_arms, sigma } => {
                if *num_arms < 1 {
                    return fail("bandit needs at least one arm".into());
                }
                if !(*sigma > 0.0) {
                    return fail(format!("noise sigma must be positive, got {sigma}"));
                }
            }
            TaskFamilyConfig::BernoulliBandit { num_arms } => {
                if *num_arms < 1 {
                    return fail("bandit needs at least one arm".into());
                }
            }
            TaskFamilyConfig::LinearBandit {
                num_arms,
                dim,
                sigma,
                ..
            } => {
                if *num_arms < 1 || *dim < 1 {
                    return fail("linear bandit needs at least one arm and dimension".into());
                }
                if !(*sigma > 0.0) {
                    return fail(format!("noise sigma must be positive, got {sigma}"));
                }
            }
            TaskFamilyConfig::DarkRoom {
                grid_size,
                horizon,
                train_fraction,
                ..
            } => {
                if *grid_size < 2 || *horizon < 1 {
                    return fail("grid world needs grid_size >= 2 and horizon >= 1".into());
                }
                if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                    return fail(format!(
                        "train_fraction must lie strictly between 0 and 1, got {train_fraction}"
                    ));
                }
            }
            TaskFamilyConfig::DarkRoomPermuted {
                grid_size,
                horizon,
                train_permutations,
                ..
            } => {
                if *grid_size < 2 || *horizon < 1 {
                    return fail("grid world needs grid_size >= 2 and horizon >= 1".into());
                }
                let total = all_action_permutations().len();
                if *train_permutations < 1 || *train_permutations >= total {
                    return fail(format!(
                        "train_permutations must lie in 1..{total} to leave held-out tasks"
                    ));
                }
            }
            TaskFamilyConfig::Finite { tasks } => {
                if tasks.is_empty() {
                    return fail("finite family needs at least one task".into());
                }
                let actions = tasks[0].num_actions();
                let state = std::mem::discriminant(&tasks[0].initial_state());
                for t in tasks {
                    if t.num_actions() != actions
                        || std::mem::discriminant(&t.initial_state()) != state
                    {
                        return fail(
                            "finite family tasks must share action and state spaces".into(),
                        );
                    }
                }
            }
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        match self {
            TaskFamilyConfig::GaussianBandit { num_arms, .. }
            | TaskFamilyConfig::BernoulliBandit { num_arms }
            | TaskFamilyConfig::LinearBandit { num_arms, .. } => *num_arms,
            TaskFamilyConfig::DarkRoom { .. } | TaskFamilyConfig::DarkRoomPermuted { .. } => {
                DARKROOM_NUM_ACTIONS
            }
            TaskFamilyConfig::Finite { tasks } => tasks[0].num_actions(),
        }
    }

    /// How models should embed this family's states.
    pub fn state_encoding(&self) -> StateEncoding {
        match self {
            TaskFamilyConfig::GaussianBandit { .. }
            | TaskFamilyConfig::BernoulliBandit { .. }
            | TaskFamilyConfig::LinearBandit { .. } => StateEncoding::Unit,
            TaskFamilyConfig::DarkRoom { grid_size, .. }
            | TaskFamilyConfig::DarkRoomPermuted { grid_size, .. } => StateEncoding::GridScaled {
                grid_size: *grid_size,
            },
            TaskFamilyConfig::Finite { tasks } => match &tasks[0] {
                Task::Bandit(_) => StateEncoding::Unit,
                Task::DarkRoom(room) => StateEncoding::GridScaled {
                    grid_size: room.grid_size,
                },
                Task::Tabular(mdp) => StateEncoding::OneHot {
                    count: mdp.num_states,
                },
            },
        }
    }

    /// Episode length for episodic families; `None` for bandits.
    pub fn episode_horizon(&self) -> Option<usize> {
        match self {
            TaskFamilyConfig::DarkRoom { horizon, .. }
            | TaskFamilyConfig::DarkRoomPermuted { horizon, .. } => Some(*horizon),
            TaskFamilyConfig::Finite { tasks } => match &tasks[0] {
                Task::DarkRoom(room) => Some(room.horizon),
                Task::Tabular(mdp) => Some(mdp.horizon),
                Task::Bandit(_) => None,
            },
            _ => None,
        }
    }

    /// The goal cells this spec addresses, training slice first for `All`.
    pub fn goals(&self) -> Option<Vec<(usize, usize)>> {
        if let TaskFamilyConfig::DarkRoom {
            grid_size,
            train_fraction,
            split_seed,
            partition,
            ..
        } = self
        {
            let (mut train, mut test) =
                split_goals(*grid_size, *train_fraction, &mut Rng::new(*split_seed));
            Some(match partition {
                GoalPartition::Train => train,
                GoalPartition::Test => test,
                GoalPartition::All => {
                    train.append(&mut test);
                    train
                }
            })
        } else {
            None
        }
    }

    /// The action permutations this spec addresses, training slice first.
    pub fn permutations(&self) -> Option<Vec<[usize; 5]>> {
        if let TaskFamilyConfig::DarkRoomPermuted {
            train_permutations,
            split_seed,
            partition,
            ..
        } = self
        {
            let mut perms = all_action_permutations();
            Rng::new(*split_seed).shuffle(&mut perms);
            Some(match partition {
                GoalPartition::Train => perms[..*train_permutations].to_vec(),
                GoalPartition::Test => perms[*train_permutations..].to_vec(),
                GoalPartition::All => perms,
            })
        } else {
            None
        }
    }

    /// Number of distinct tasks when the family is enumerable.
    pub fn num_tasks(&self) -> Option<usize> {
        match self {
            TaskFamilyConfig::DarkRoom { .. } => self.goals().map(|g| g.len()),
            TaskFamilyConfig::DarkRoomPermuted { .. } => self.permutations().map(|p| p.len()),
            TaskFamilyConfig::Finite { tasks } => Some(tasks.len()),
            _ => None,
        }
    }

    /// Every task of an enumerable family, in partition order.
    pub fn enumerate_tasks(&self) -> Option<Vec<Task>> {
        match self {
            TaskFamilyConfig::DarkRoom {
                grid_size, horizon, ..
            } => Some(
                self.goals()?
                    .into_iter()
                    .map(|goal| Task::DarkRoom(DarkRoomTask::new(*grid_size, *horizon, goal)))
                    .collect(),
            ),
            TaskFamilyConfig::DarkRoomPermuted {
                grid_size, horizon, ..
            } => {
                let goal = (*grid_size - 1, *grid_size - 1);
                Some(
                    self.permutations()?
                        .into_iter()
                        .map(|p| Task::DarkRoom(DarkRoomTask::permuted(*grid_size, *horizon, goal, p)))
                        .collect(),
                )
            }
            TaskFamilyConfig::Finite { tasks } => Some(tasks.clone()),
            _ => None,
        }
    }

    /// Task for sample `index` out of `total`. Sampled families draw i.i.d.
    /// from `rng`; enumerable families are covered in equal contiguous blocks
    /// so that a trailing validation fraction holds out whole tasks.
    pub fn task_for_index(&self, index: u64, total: u64, rng: &mut Rng) -> Task {
        match self {
            TaskFamilyConfig::GaussianBandit { num_arms, sigma } => {
                Task::Bandit(
                    BanditDistribution::Gaussian {
                        num_arms: *num_arms,
                        sigma: *sigma,
                    }
                    .sample_task(rng),
                )
            }
            TaskFamilyConfig::BernoulliBandit { num_arms } => Task::Bandit(
                BanditDistribution::Bernoulli {
                    num_arms: *num_arms,
                }
                .sample_task(rng),
            ),
            TaskFamilyConfig::LinearBandit {
                num_arms,
                dim,
                sigma,
                feature_seed,
            } => {
                let family =
                    BanditDistribution::linear(*num_arms, *dim, *sigma, &mut Rng::new(*feature_seed));
                Task::Bandit(family.sample_task(rng))
            }
            TaskFamilyConfig::DarkRoom { .. }
            | TaskFamilyConfig::DarkRoomPermuted { .. }
            | TaskFamilyConfig::Finite { .. } => {
                let tasks = self
                    .enumerate_tasks()
                    .expect("enumerable families always enumerate");
                tasks[block_slot(index, total, tasks.len())].clone()
            }
        }
    }
}

/// Maps sample `index` of `total` onto one of `count` contiguous equal
/// blocks. With `total` a multiple of `count`, every block is exactly
/// `total / count` samples wide.
fn block_slot(index: u64, total: u64, count: usize) -> usize {
    let block = (total / count as u64).max(1);
    ((index / block) as usize).min(count - 1)
}

// ---------------------------------------------------------------------------
// Pretraining specs and samples
// ---------------------------------------------------------------------------

/// A query state, an in-context dataset, and the generating task's optimal
/// action at the query — one supervised example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSample {
    pub task: Task,
    pub query: State,
    pub dataset: Vec<Transition>,
    pub label: usize,
    /// Partial-episode (state, optimal action) pairs for the
    /// history-conditioned variant.
    pub history: Option<Vec<(State, usize)>>,
    /// Index under the generating spec; `(seed, seed_index)` reproduces the
    /// sample bit-for-bit.
    pub seed_index: u64,
}

/// Everything needed to regenerate a pretraining set: family, dataset source,
/// size, and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub family: TaskFamilyConfig,
    pub kind: DatasetKind,
    pub num_samples: u64,
    /// In-context dataset length per sample.
    pub context_length: usize,
    #[serde(default)]
    pub with_history: bool,
    pub seed: u64,
}

impl PretrainSpec {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.context_length == 0 {
            return Err(DatagenError::EmptyContext);
        }
        let family_desc = family_label(&self.family);
        let bandit_family = matches!(
            &self.family,
            TaskFamilyConfig::GaussianBandit { .. }
                | TaskFamilyConfig::BernoulliBandit { .. }
                | TaskFamilyConfig::LinearBandit { .. }
        ) || matches!(&self.family, TaskFamilyConfig::Finite { tasks } if matches!(tasks[0], Task::Bandit(_)));
        let episodic = self.family.episode_horizon().is_some();
        match self.kind {
            DatasetKind::DirichletMix | DatasetKind::ExpertBiased { .. } | DatasetKind::TsRollout => {
                if !bandit_family {
                    return Err(DatagenError::KindFamilyMismatch {
                        kind: self.kind.label(),
                        family: family_desc,
                    });
                }
            }
            DatasetKind::UniformRandomRollout => {
                if !episodic {
                    return Err(DatagenError::KindFamilyMismatch {
                        kind: self.kind.label(),
                        family: family_desc,
                    });
                }
            }
            DatasetKind::EnvUniformSa => {}
        }
        if let DatasetKind::ExpertBiased { omega: Some(w) } = self.kind {
            if !(0.0..=1.0).contains(&w) {
                return Err(DatagenError::BadFamily(format!(
                    "expert mixing weight must lie in [0, 1], got {w}"
                )));
            }
        }
        if self.with_history && !episodic {
            return Err(DatagenError::HistoryNeedsEpisodes);
        }
        if let Some(num_tasks) = self.family.num_tasks() {
            if self.num_samples > 0 && self.num_samples % num_tasks as u64 != 0 {
                return Err(DatagenError::UnevenTaskCoverage {
                    num_samples: self.num_samples,
                    num_tasks,
                });
            }
        }
        Ok(())
    }

    /// Generates sample `index`. Bit-identical for the same `(seed, index)`,
    /// independent of generation order or thread count.
    pub fn sample(&self, index: u64) -> PretrainSample {
        let root = Rng::new(self.seed).derive(index);
        let mut task_rng = root.derive(0);
        let mut data_rng = root.derive(1);
        let mut query_rng = root.derive(2);
        let mut history_rng = root.derive(3);

        let task = self
            .family
            .task_for_index(index, self.num_samples, &mut task_rng);
        let dataset = self.generate_dataset(&task, &mut data_rng);
        let query = uniform_state(&task, &mut query_rng);
        let label = task.optimal_action(&query);
        let history = self.with_history.then(|| {
            let horizon = self
                .family
                .episode_horizon()
                .expect("validated: history requires an episodic family");
            gen_history_sample(&task, horizon, &mut history_rng)
        });
        PretrainSample {
            task,
            query,
            dataset,
            label,
            history,
            seed_index: index,
        }
    }

    /// All samples of the spec in index order.
    pub fn samples(&self) -> impl Iterator<Item = PretrainSample> + '_ {
        (0..self.num_samples).map(move |i| self.sample(i))
    }

    /// Whether training may shuffle in-context rows for this spec's kind.
    pub fn shuffles_for_training(&self) -> bool {
        self.kind.shuffles_for_training()
    }

    fn generate_dataset(&self, task: &Task, rng: &mut Rng) -> Vec<Transition> {
        sample_dataset(self.kind, task, self.context_length, rng)
    }
}

/// One in-context dataset of `n` rows from `kind`'s generative process.
/// Bandit-only kinds panic on non-bandit tasks; validate specs first.
pub fn sample_dataset(kind: DatasetKind, task: &Task, n: usize, rng: &mut Rng) -> Vec<Transition> {
    match kind {
        DatasetKind::DirichletMix => gen_dirichlet_mix_dataset(expect_bandit(task), n, rng),
        DatasetKind::ExpertBiased { omega } => {
            let omega = omega.unwrap_or_else(|| omega_grid_draw(rng));
            gen_expert_biased_dataset(expect_bandit(task), n, omega, rng)
        }
        DatasetKind::TsRollout => gen_ts_rollout_dataset(expect_bandit(task), n, rng),
        DatasetKind::UniformRandomRollout => {
            let mut rule = UniformActionRule::new(task.num_actions());
            rollout_episode(task, n, &mut rule, rng)
        }
        DatasetKind::EnvUniformSa => gen_uniform_sa_dataset(task, n, rng),
    }
}

fn expect_bandit(task: &Task) -> &BanditTask {
    match task {
        Task::Bandit(bandit) => bandit,
        other => panic!("bandit dataset source applied to {other:?}; validate the spec first"),
    }
}

fn family_label(family: &TaskFamilyConfig) -> String {
    match family {
        TaskFamilyConfig::GaussianBandit { .. } => "gaussian_bandit".into(),
        TaskFamilyConfig::BernoulliBandit { .. } => "bernoulli_bandit".into(),
        TaskFamilyConfig::LinearBandit { .. } => "linear_bandit".into(),
        TaskFamilyConfig::DarkRoom { .. } => "dark_room".into(),
        TaskFamilyConfig::DarkRoomPermuted { .. } => "dark_room_permuted".into(),
        TaskFamilyConfig::Finite { tasks } => format!("finite[{}]", tasks.len()),
    }
}

/// Grid-world pretraining set covering `goals` evenly: each goal owns a
/// contiguous block of `count / goals.len()` samples, every dataset is one
/// uniform-random episode, and queries are uniform over the grid.
pub fn gen_darkroom_pretrain_set(
    grid_size: usize,
    horizon: usize,
    goals: &[(usize, usize)],
    count: u64,
    with_history: bool,
    seed: u64,
) -> Result<impl Iterator<Item = PretrainSample> + '_> {
    if goals.is_empty() || (count > 0 && count % goals.len() as u64 != 0) {
        return Err(DatagenError::UnevenTaskCoverage {
            num_samples: count,
            num_tasks: goals.len(),
        });
    }
    let spec = PretrainSpec {
        family: TaskFamilyConfig::Finite {
            tasks: goals
                .iter()
                .map(|&goal| Task::DarkRoom(DarkRoomTask::new(grid_size, horizon, goal)))
                .collect(),
        },
        kind: DatasetKind::UniformRandomRollout,
        num_samples: count,
        context_length: horizon,
        with_history,
        seed,
    };
    spec.validate()?;
    Ok((0..count).map(move |i| spec.sample(i)))
}

// ---------------------------------------------------------------------------
// Archival (JSON Lines)
// ---------------------------------------------------------------------------

/// On-disk form of one sample: transitions and history entries flatten to
/// tuples so a line reads `{"task":…, "query":…, "dataset":[[s,a,s2,r],…],
/// "label":…, "history":[[s,a],…]|null, "seed_index":…}`.
#[derive(Serialize, Deserialize)]
struct SampleRecord {
    task: Task,
    query: State,
    dataset: Vec<(State, usize, State, f64)>,
    label: usize,
    history: Option<Vec<(State, usize)>>,
    seed_index: u64,
}

impl From<PretrainSample> for SampleRecord {
    fn from(sample: PretrainSample) -> SampleRecord {
        SampleRecord {
            task: sample.task,
            query: sample.query,
            dataset: sample
                .dataset
                .into_iter()
                .map(|t| (t.state, t.action, t.next_state, t.reward))
                .collect(),
            label: sample.label,
            history: sample.history,
            seed_index: sample.seed_index,
        }
    }
}

impl From<SampleRecord> for PretrainSample {
    fn from(record: SampleRecord) -> PretrainSample {
        PretrainSample {
            task: record.task,
            query: record.query,
            dataset: record
                .dataset
                .into_iter()
                .map(|(state, action, next_state, reward)| Transition {
                    state,
                    action,
                    next_state,
                    reward,
                })
                .collect(),
            label: record.label,
            history: record.history,
            seed_index: record.seed_index,
        }
    }
}

/// Writes samples as JSON Lines; returns the number of lines written.
/// Floats round-trip exactly, so archived sets replay bit-identically.
pub fn write_jsonl(
    path: &Path,
    samples: impl IntoIterator<Item = PretrainSample>,
) -> Result<u64> {
    let mut writer = BufWriter::new(File::create(path)?);
    let mut count = 0u64;
    for sample in samples {
        serde_json::to_writer(&mut writer, &SampleRecord::from(sample))?;
        writer.write_all(b"\n")?;
        count += 1;
    }
    writer.flush()?;
    Ok(count)
}

/// Reads a JSON Lines pretraining set written by [`write_jsonl`].
pub fn read_jsonl(path: &Path) -> Result<Vec<PretrainSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)?;
        samples.push(record.into());
    }
    Ok(samples)
}
