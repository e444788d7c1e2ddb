//! Scoring agents on held-out tasks.
//!
//! Offline deployment fixes an in-context dataset and lets the agent act
//! greedily: a single choice for bandits, one episode for grid worlds and
//! tabular MDPs. Online deployment starts from an empty dataset and feeds
//! the agent's own interactions back as context, one pull (bandits) or one
//! whole episode (episodic tasks) at a time. Scores are computed against the
//! true task, which the harness knows: expected per-choice suboptimality,
//! and cumulative regret against the optimal policy's expected value — so
//! instantaneous regret is nonnegative and its running sum never decreases.
//!
//! Runs fan out over (agent, task) pairs in parallel, each pair on its own
//! derived random stream, and aggregate single-threaded; the same config and
//! seed reproduce every record, CSV row, and plot byte for byte. Record CSVs
//! are long-format with the schema
//! `run_id,agent,task_index,step,metric_name,value`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    BanditAgent, EmpAgent, GaussianTs, LcbAgent, LinUcb, UcbAgent,
};
use crate::datagen::{
    gen_expert_episode, sample_dataset, DatasetKind, TaskFamilyConfig, TS_PRIOR_MEAN, TS_PRIOR_VAR,
};
use crate::environments::{argmax, BanditTask, RewardNoise, State, Task, Transition};
use crate::model::{ModelError, ModelState};
use crate::numerics::Rng;

/// Exploration coefficient for the linear-bandit baseline.
pub const LINUCB_BETA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    BadConfig(String),
    #[error("agent `{agent}` cannot run here: {reason}")]
    Incompatible { agent: &'static str, reason: String },
    #[error("the agent list includes a transformer but no model was supplied")]
    MissingModel,
    #[error("model failure: {0}")]
    Model(#[from] ModelError),
    #[error("nothing to work with: {0}")]
    Empty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Which decision-maker to deploy. The transformer variants need a trained
/// model; the rest are classical references built fresh per task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentSpec {
    /// Transformer conditioned on (query, dataset): offline argmax, online
    /// sampling.
    Dpt,
    /// Transformer additionally conditioned on the current episode's
    /// (state, action) history; episodic families only.
    DptHistory,
    /// Empirical-mean argmax.
    Emp,
    /// Upper confidence bound on arm means.
    Ucb,
    /// Lower confidence bound — the conservative offline pick.
    Lcb,
    /// Thompson sampling with a Gaussian model, noise matched to the family.
    Ts,
    /// Linear UCB over the family's shared arm features.
    LinUcb,
    /// Uniformly random choice; the floor reference.
    UniformRandom,
    /// Knows the task and always acts optimally; the ceiling reference.
    Oracle,
}

impl AgentSpec {
    pub fn label(self) -> &'static str {
        match self {
            AgentSpec::Dpt => "dpt",
            AgentSpec::DptHistory => "dpt_history",
            AgentSpec::Emp => "emp",
            AgentSpec::Ucb => "ucb",
            AgentSpec::Lcb => "lcb",
            AgentSpec::Ts => "ts",
            AgentSpec::LinUcb => "linucb",
            AgentSpec::UniformRandom => "uniform_random",
            AgentSpec::Oracle => "oracle",
        }
    }

    fn needs_model(self) -> bool {
        matches!(self, AgentSpec::Dpt | AgentSpec::DptHistory)
    }

    fn bandit_only(self) -> bool {
        matches!(
            self,
            AgentSpec::Emp | AgentSpec::Ucb | AgentSpec::Lcb | AgentSpec::Ts | AgentSpec::LinUcb
        )
    }
}

/// Where offline in-context datasets come from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OfflineSource {
    /// Reuse one of the pretraining dataset generators.
    Generator(DatasetKind),
    /// Roll out the task's own optimal policy (expert demonstrations for
    /// episodic tasks, repeated optimal-arm pulls for bandits).
    Expert,
}

/// One evaluation run: held-out tasks from `family`, an in-context dataset
/// source for offline deployment, an interaction budget for online
/// deployment, and the agents to compare. Every agent faces the same tasks
/// and the same offline datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub family: TaskFamilyConfig,
    pub num_test_tasks: usize,
    pub offline_source: OfflineSource,
    /// Rows per offline in-context dataset.
    pub offline_size: usize,
    /// Online budget: arm pulls for bandits, episodes for episodic tasks.
    pub online_steps: usize,
    pub agents: Vec<AgentSpec>,
    pub seed: u64,
}

fn family_is_bandit(family: &TaskFamilyConfig) -> bool {
    match family {
        TaskFamilyConfig::GaussianBandit { .. }
        | TaskFamilyConfig::BernoulliBandit { .. }
        | TaskFamilyConfig::LinearBandit { .. } => true,
        TaskFamilyConfig::DarkRoom { .. } | TaskFamilyConfig::DarkRoomPermuted { .. } => false,
        TaskFamilyConfig::Finite { tasks } => matches!(tasks[0], Task::Bandit(_)),
    }
}

fn family_is_linear(family: &TaskFamilyConfig) -> bool {
    match family {
        TaskFamilyConfig::LinearBandit { .. } => true,
        TaskFamilyConfig::Finite { tasks } => tasks.iter().all(|t| match t {
            Task::Bandit(b) => b.linear.is_some(),
            _ => false,
        }),
        _ => false,
    }
}

/// Reject configs whose agents, family, model, and dataset source cannot run
/// together, before any work starts.
pub fn validate_config(config: &EvalConfig, model: Option<&ModelState>) -> Result<()> {
    let bad = |msg: String| Err(EvalError::BadConfig(msg));
    config
        .family
        .validate()
        .map_err(|e| EvalError::BadConfig(e.to_string()))?;
    if config.num_test_tasks == 0 {
        return bad("need at least one test task".into());
    }
    if config.agents.is_empty() {
        return bad("need at least one agent".into());
    }
    let mut seen = std::collections::BTreeSet::new();
    for spec in &config.agents {
        if !seen.insert(spec.label()) {
            return bad(format!("agent `{}` listed twice", spec.label()));
        }
    }

    let bandit = family_is_bandit(&config.family);
    let episodic = config.family.episode_horizon().is_some();
    for &spec in &config.agents {
        let clash = |reason: String| {
            Err(EvalError::Incompatible {
                agent: spec.label(),
                reason,
            })
        };
        if spec.bandit_only() && !bandit {
            return clash("this baseline only plays multi-armed bandits".into());
        }
        if spec == AgentSpec::LinUcb && !family_is_linear(&config.family) {
            return clash("the family has no shared linear reward structure".into());
        }
        if spec.needs_model() {
            let model = model.ok_or(EvalError::MissingModel)?;
            let cfg = model.config();
            if cfg.action_dim != config.family.num_actions() {
                return clash(format!(
                    "model predicts over {} actions but the family has {}",
                    cfg.action_dim,
                    config.family.num_actions()
                ));
            }
            if cfg.state_encoding != config.family.state_encoding() {
                return clash(format!(
                    "model encodes states as {:?} but the family needs {:?}",
                    cfg.state_encoding,
                    config.family.state_encoding()
                ));
            }
            if spec == AgentSpec::DptHistory {
                if !episodic {
                    return clash("history conditioning needs an episodic family".into());
                }
                if !cfg.with_history {
                    return clash("the model was built without history rows".into());
                }
            }
        }
    }

    match config.offline_source {
        OfflineSource::Generator(kind) => match kind {
            DatasetKind::DirichletMix | DatasetKind::TsRollout => {
                if !bandit {
                    return bad(format!(
                        "offline source `{}` only generates bandit datasets",
                        kind.label()
                    ));
                }
            }
            DatasetKind::ExpertBiased { omega } => {
                if !bandit {
                    return bad(format!(
                        "offline source `{}` only generates bandit datasets",
                        kind.label()
                    ));
                }
                if let Some(w) = omega {
                    if !(0.0..=1.0).contains(&w) {
                        return bad(format!("expert mixing weight {w} outside [0, 1]"));
                    }
                }
            }
            DatasetKind::UniformRandomRollout => {
                if !episodic {
                    return bad(format!(
                        "offline source `{}` rolls episodes and needs an episodic family",
                        kind.label()
                    ));
                }
            }
            DatasetKind::EnvUniformSa => {}
        },
        OfflineSource::Expert => {}
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

/// What one agent did on one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub agent: String,
    pub task_index: usize,
    pub outcome: EvalOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EvalOutcome {
    /// One greedy choice from a fixed dataset.
    OfflineBandit {
        action: usize,
        /// Gap between the best arm's mean and the chosen arm's mean.
        suboptimality: f64,
        context_truncated: bool,
    },
    /// One greedy episode from a fixed dataset.
    OfflineEpisode {
        actions: Vec<usize>,
        episode_return: f64,
        optimal_return: f64,
        first_action_optimal: bool,
        context_truncated: bool,
    },
    /// `steps` pulls with every pull fed back into the agent's context.
    OnlineBandit {
        actions: Vec<usize>,
        instant_regret: Vec<f64>,
        cumulative_regret: Vec<f64>,
        context_truncated: bool,
    },
    /// Repeated episodes, the context growing by one whole episode each time.
    OnlineEpisodes {
        episode_returns: Vec<f64>,
        instant_regret: Vec<f64>,
        cumulative_regret: Vec<f64>,
        optimal_return: f64,
        context_truncated: bool,
    },
    /// The agent declined to act (e.g. a greedy rule with no observations).
    Skipped { reason: String },
}

/// One (step, metric, value) point extracted from a record.
pub struct MetricPoint {
    pub step: usize,
    pub metric: &'static str,
    pub value: f64,
}

/// Flatten a record into long-format metric points; this single definition
/// feeds both aggregation and the records CSV.
pub fn metric_points(record: &EvalRecord) -> Vec<MetricPoint> {
    let point = |step, metric, value| MetricPoint {
        step,
        metric,
        value,
    };
    match &record.outcome {
        EvalOutcome::OfflineBandit {
            action,
            suboptimality,
            ..
        } => vec![
            point(0, "action", *action as f64),
            point(0, "suboptimality", *suboptimality),
        ],
        EvalOutcome::OfflineEpisode {
            episode_return,
            optimal_return,
            first_action_optimal,
            ..
        } => vec![
            point(0, "episode_return", *episode_return),
            point(0, "optimal_return", *optimal_return),
            point(0, "first_action_optimal", f64::from(*first_action_optimal)),
        ],
        EvalOutcome::OnlineBandit {
            actions,
            instant_regret,
            cumulative_regret,
            ..
        } => {
            let mut points = Vec::with_capacity(3 * actions.len());
            for (k, action) in actions.iter().enumerate() {
                points.push(point(k, "action", *action as f64));
                points.push(point(k, "instant_regret", instant_regret[k]));
                points.push(point(k, "cumulative_regret", cumulative_regret[k]));
            }
            points
        }
        EvalOutcome::OnlineEpisodes {
            episode_returns,
            instant_regret,
            cumulative_regret,
            optimal_return,
            ..
        } => {
            let mut points = Vec::with_capacity(3 * episode_returns.len() + 1);
            points.push(point(0, "optimal_return", *optimal_return));
            for (k, ret) in episode_returns.iter().enumerate() {
                points.push(point(k, "episode_return", *ret));
                points.push(point(k, "instant_regret", instant_regret[k]));
                points.push(point(k, "cumulative_regret", cumulative_regret[k]));
            }
            points
        }
        EvalOutcome::Skipped { .. } => vec![point(0, "skipped", 1.0)],
    }
}

// ---------------------------------------------------------------------------
// Agents at runtime
// ---------------------------------------------------------------------------

enum Choice {
    Act(usize),
    /// The agent cannot decide from what it has seen; record a skip.
    Refuse(String),
}

enum AgentInstance<'m> {
    Model {
        model: &'m ModelState,
        with_history: bool,
        history: Vec<(State, usize)>,
        truncated: bool,
    },
    Bandit(Box<dyn BanditAgent>),
    Uniform {
        num_actions: usize,
    },
    Oracle,
}

/// Noise variance handed to the Thompson-sampling baseline: match the
/// family's Gaussian scale, or the worst-case Bernoulli variance.
fn ts_noise_var(task: &BanditTask) -> f64 {
    match task.noise {
        RewardNoise::Gaussian { sigma } => sigma * sigma,
        RewardNoise::Bernoulli => 0.25,
    }
}

fn require_bandit(spec: AgentSpec, task: &Task) -> Result<&BanditTask> {
    match task {
        Task::Bandit(b) => Ok(b),
        _ => Err(EvalError::Incompatible {
            agent: spec.label(),
            reason: "this baseline only plays multi-armed bandits".into(),
        }),
    }
}

fn build_agent<'m>(
    spec: AgentSpec,
    model: Option<&'m ModelState>,
    task: &Task,
) -> Result<AgentInstance<'m>> {
    match spec {
        AgentSpec::Dpt | AgentSpec::DptHistory => {
            let model = model.ok_or(EvalError::MissingModel)?;
            let with_history = spec == AgentSpec::DptHistory;
            if with_history && !model.config().with_history {
                return Err(EvalError::Incompatible {
                    agent: spec.label(),
                    reason: "the model was built without history rows".into(),
                });
            }
            Ok(AgentInstance::Model {
                model,
                with_history,
                history: Vec::new(),
                truncated: false,
            })
        }
        AgentSpec::Emp => Ok(AgentInstance::Bandit(Box::new(EmpAgent::new(
            require_bandit(spec, task)?.num_arms(),
        )))),
        AgentSpec::Ucb => Ok(AgentInstance::Bandit(Box::new(UcbAgent::new(
            require_bandit(spec, task)?.num_arms(),
        )))),
        AgentSpec::Lcb => Ok(AgentInstance::Bandit(Box::new(LcbAgent::new(
            require_bandit(spec, task)?.num_arms(),
        )))),
        AgentSpec::Ts => {
            let bandit = require_bandit(spec, task)?;
            Ok(AgentInstance::Bandit(Box::new(GaussianTs::new(
                bandit.num_arms(),
                TS_PRIOR_MEAN,
                TS_PRIOR_VAR,
                ts_noise_var(bandit),
            ))))
        }
        AgentSpec::LinUcb => {
            let bandit = require_bandit(spec, task)?;
            let linear = bandit.linear.as_ref().ok_or(EvalError::Incompatible {
                agent: spec.label(),
                reason: "the task carries no linear reward structure".into(),
            })?;
            Ok(AgentInstance::Bandit(Box::new(LinUcb::new(
                linear.features.clone(),
                LINUCB_BETA,
            ))))
        }
        AgentSpec::UniformRandom => Ok(AgentInstance::Uniform {
            num_actions: task.num_actions(),
        }),
        AgentSpec::Oracle => Ok(AgentInstance::Oracle),
    }
}

/// The newest `max` rows of `data`; the query is supplied separately and can
/// never be dropped. Flags whether anything was cut.
fn truncate_context(data: &[Transition], max: usize) -> (&[Transition], bool) {
    if data.len() <= max {
        (data, false)
    } else {
        (&data[data.len() - max..], true)
    }
}

impl AgentInstance<'_> {
    fn act(
        &mut self,
        task: &Task,
        state: &State,
        data: &[Transition],
        sample: bool,
        rng: &mut Rng,
    ) -> Result<Choice> {
        match self {
            AgentInstance::Model {
                model,
                with_history,
                history,
                truncated,
            } => {
                let (slice, cut) = truncate_context(data, model.config().max_context);
                *truncated |= cut;
                let hist = (*with_history && !history.is_empty()).then_some(history.as_slice());
                let probs = model.action_distribution(state, slice, hist)?;
                Ok(Choice::Act(if sample {
                    rng.categorical(&probs)
                } else {
                    argmax(&probs)
                }))
            }
            AgentInstance::Bandit(agent) => {
                let picked = if sample {
                    agent.select_online(rng)
                } else {
                    agent.select_offline()
                };
                Ok(match picked {
                    Ok(action) => Choice::Act(action),
                    Err(e) => Choice::Refuse(e.to_string()),
                })
            }
            AgentInstance::Uniform { num_actions } => Ok(Choice::Act(rng.below(*num_actions))),
            AgentInstance::Oracle => Ok(Choice::Act(task.optimal_action(state))),
        }
    }

    fn observe(&mut self, action: usize, reward: f64) {
        if let AgentInstance::Bandit(agent) = self {
            agent.observe(action, reward);
        }
    }

    fn begin_episode(&mut self) {
        if let AgentInstance::Model { history, .. } = self {
            history.clear();
        }
    }

    fn note_step(&mut self, state: &State, action: usize) {
        if let AgentInstance::Model {
            with_history: true,
            history,
            ..
        } = self
        {
            history.push((state.clone(), action));
        }
    }

    fn context_truncated(&self) -> bool {
        matches!(self, AgentInstance::Model { truncated: true, .. })
    }
}

// ---------------------------------------------------------------------------
// Task-side helpers
// ---------------------------------------------------------------------------

/// Expected value of the optimal policy: best arm mean for bandits, full
/// optimal-policy return for episodic tasks.
pub fn optimal_return(task: &Task) -> Result<f64> {
    match task {
        Task::Bandit(b) => Ok(b.means[b.optimal_action()]),
        Task::DarkRoom(d) => Ok(d.optimal_value(d.start())),
        Task::Tabular(m) => m.optimal_return().map_err(EvalError::BadConfig),
    }
}

/// Expected one-step reward of `action` at `state` under the true task.
fn expected_step_reward(task: &Task, state: &State, action: usize) -> f64 {
    match (task, state) {
        (Task::Bandit(b), State::Unit) => b.means[action],
        (Task::DarkRoom(d), State::Grid { x, y }) => d.step((*x, *y), action).1,
        (Task::Tabular(m), State::Discrete { index }) => m.reward_mean[*index][action],
        (task, state) => panic!("state {state:?} does not belong to task {task:?}"),
    }
}

fn episode_horizon(task: &Task) -> usize {
    match task {
        Task::Bandit(_) => 1,
        Task::DarkRoom(d) => d.horizon,
        Task::Tabular(m) => m.horizon,
    }
}

/// Whether `action` is *an* optimal choice at `state` — semantic, so any
/// action tied for the best value counts, not just the canonical label.
pub fn is_optimal_move(task: &Task, state: &State, action: usize) -> bool {
    match (task, state) {
        (Task::Bandit(b), State::Unit) => b.suboptimality(action) == 0.0,
        (Task::DarkRoom(d), State::Grid { x, y }) => {
            let pos = (*x, *y);
            let next = d.step(pos, action).0;
            if d.distance(pos) == 0 {
                next == d.goal
            } else {
                d.distance(next) < d.distance(pos)
            }
        }
        (Task::Tabular(m), State::Discrete { index }) => {
            m.optimal_policy().expect("stationary optimal policy")[*index] == action
        }
        (task, state) => panic!("state {state:?} does not belong to task {task:?}"),
    }
}

fn all_queries(task: &Task) -> Vec<State> {
    match task {
        Task::Bandit(_) => vec![State::Unit],
        Task::DarkRoom(d) => (0..d.grid_size)
            .flat_map(|y| (0..d.grid_size).map(move |x| State::Grid { x, y }))
            .collect(),
        Task::Tabular(m) => (0..m.num_states)
            .map(|index| State::Discrete { index })
            .collect(),
    }
}

/// Fraction of the task's states where the model's greedy action is optimal
/// in the semantic sense of [`is_optimal_move`]. Bandits have one query.
pub fn greedy_policy_agreement(
    model: &ModelState,
    task: &Task,
    data: &[Transition],
) -> Result<f64> {
    let queries = all_queries(task);
    let (slice, _) = truncate_context(data, model.config().max_context);
    let mut hits = 0usize;
    for query in &queries {
        let action = model.act_offline(query, slice)?;
        hits += usize::from(is_optimal_move(task, query, action));
    }
    Ok(hits as f64 / queries.len() as f64)
}

// ---------------------------------------------------------------------------
// Deployment
// ---------------------------------------------------------------------------

/// One agent, one task, one fixed in-context dataset, greedy deployment.
/// Deterministic given the rng state: the rng only feeds uniform-random
/// agents and the environment's reward draws.
pub fn eval_offline(
    spec: AgentSpec,
    model: Option<&ModelState>,
    task: &Task,
    data: &[Transition],
    task_index: usize,
    rng: &mut Rng,
) -> Result<EvalRecord> {
    let mut agent = build_agent(spec, model, task)?;
    let record = |outcome| EvalRecord {
        agent: spec.label().to_string(),
        task_index,
        outcome,
    };
    if let Task::Bandit(bandit) = task {
        for t in data {
            agent.observe(t.action, t.reward);
        }
        let outcome = match agent.act(task, &State::Unit, data, false, rng)? {
            Choice::Refuse(reason) => EvalOutcome::Skipped { reason },
            Choice::Act(action) => EvalOutcome::OfflineBandit {
                action,
                suboptimality: bandit.suboptimality(action),
                context_truncated: agent.context_truncated(),
            },
        };
        return Ok(record(outcome));
    }

    let horizon = episode_horizon(task);
    agent.begin_episode();
    let mut state = task.initial_state();
    let mut actions = Vec::with_capacity(horizon);
    let mut episode_return = 0.0;
    let mut first_action_optimal = false;
    for h in 0..horizon {
        let action = match agent.act(task, &state, data, false, rng)? {
            Choice::Refuse(reason) => return Ok(record(EvalOutcome::Skipped { reason })),
            Choice::Act(action) => action,
        };
        if h == 0 {
            first_action_optimal = is_optimal_move(task, &state, action);
        }
        let (next, reward) = task.step(&state, action, rng);
        agent.note_step(&state, action);
        episode_return += reward;
        actions.push(action);
        state = next;
    }
    Ok(record(EvalOutcome::OfflineEpisode {
        actions,
        episode_return,
        optimal_return: optimal_return(task)?,
        first_action_optimal,
        context_truncated: agent.context_truncated(),
    }))
}

/// One agent, one task, `steps` pulls or episodes of interaction starting
/// from an empty context. The agent's own behaviour becomes its dataset: one
/// row per pull for bandits, one whole episode at a time for episodic tasks
/// (within an episode the model sees the running history, not the unfinished
/// episode's rows).
pub fn eval_online(
    spec: AgentSpec,
    model: Option<&ModelState>,
    task: &Task,
    steps: usize,
    task_index: usize,
    rng: &mut Rng,
) -> Result<EvalRecord> {
    let mut agent = build_agent(spec, model, task)?;
    let record = |outcome| EvalRecord {
        agent: spec.label().to_string(),
        task_index,
        outcome,
    };
    let mut data: Vec<Transition> = Vec::new();
    let mut instant_regret = Vec::with_capacity(steps);
    let mut cumulative_regret = Vec::with_capacity(steps);
    let mut cumulative = 0.0;

    if let Task::Bandit(bandit) = task {
        let mut actions = Vec::with_capacity(steps);
        for _ in 0..steps {
            let action = match agent.act(task, &State::Unit, &data, true, rng)? {
                Choice::Refuse(reason) => return Ok(record(EvalOutcome::Skipped { reason })),
                Choice::Act(action) => action,
            };
            let (_, reward) = task.step(&State::Unit, action, rng);
            cumulative += bandit.suboptimality(action);
            actions.push(action);
            instant_regret.push(bandit.suboptimality(action));
            cumulative_regret.push(cumulative);
            data.push(Transition {
                state: State::Unit,
                action,
                reward,
                next_state: State::Unit,
            });
            agent.observe(action, reward);
        }
        return Ok(record(EvalOutcome::OnlineBandit {
            actions,
            instant_regret,
            cumulative_regret,
            context_truncated: agent.context_truncated(),
        }));
    }

    let best = optimal_return(task)?;
    let horizon = episode_horizon(task);
    let mut episode_returns = Vec::with_capacity(steps);
    for _ in 0..steps {
        agent.begin_episode();
        let mut state = task.initial_state();
        let mut episode = Vec::with_capacity(horizon);
        let mut realized = 0.0;
        let mut expected = 0.0;
        for _ in 0..horizon {
            let action = match agent.act(task, &state, &data, true, rng)? {
                Choice::Refuse(reason) => return Ok(record(EvalOutcome::Skipped { reason })),
                Choice::Act(action) => action,
            };
            let (next, reward) = task.step(&state, action, rng);
            agent.note_step(&state, action);
            expected += expected_step_reward(task, &state, action);
            realized += reward;
            episode.push(Transition {
                state,
                action,
                reward,
                next_state: next.clone(),
            });
            state = next;
        }
        data.extend(episode);
        // Nonnegative up to rounding: dynamics are deterministic, so the
        // walked action sequence is itself a policy bounded by `best`.
        let regret = (best - expected).max(0.0);
        cumulative += regret;
        episode_returns.push(realized);
        instant_regret.push(regret);
        cumulative_regret.push(cumulative);
    }
    Ok(record(EvalOutcome::OnlineEpisodes {
        episode_returns,
        instant_regret,
        cumulative_regret,
        optimal_return: best,
        context_truncated: agent.context_truncated(),
    }))
}

// ---------------------------------------------------------------------------
// Run drivers
// ---------------------------------------------------------------------------

const TASK_STREAM: u64 = 1;
const DATASET_STREAM: u64 = 2;
const OFFLINE_STREAM: u64 = 3;
const ONLINE_STREAM: u64 = 4;

fn stream_rng(seed: u64, stream: u64, agent: usize, task: usize) -> Rng {
    Rng::new(seed)
        .derive(stream)
        .derive(agent as u64)
        .derive(task as u64)
}

/// The held-out tasks a config addresses, in task-index order.
pub fn test_tasks(config: &EvalConfig) -> Vec<Task> {
    (0..config.num_test_tasks)
        .map(|i| {
            let mut rng = stream_rng(config.seed, TASK_STREAM, 0, i);
            config
                .family
                .task_for_index(i as u64, config.num_test_tasks as u64, &mut rng)
        })
        .collect()
}

/// Draw one offline in-context dataset for `task`.
pub fn sample_offline_dataset(
    source: OfflineSource,
    task: &Task,
    n: usize,
    rng: &mut Rng,
) -> Vec<Transition> {
    match source {
        OfflineSource::Generator(kind) => sample_dataset(kind, task, n, rng),
        OfflineSource::Expert => gen_expert_episode(task, n, rng),
    }
}

/// Greedy deployment of every agent on every test task, each pair on its own
/// derived random stream. All agents see identical datasets per task.
pub fn run_offline_eval(
    config: &EvalConfig,
    model: Option<&ModelState>,
) -> Result<Vec<EvalRecord>> {
    validate_config(config, model)?;
    let tasks = test_tasks(config);
    let datasets: Vec<Vec<Transition>> = tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let mut rng = stream_rng(config.seed, DATASET_STREAM, 0, i);
            sample_offline_dataset(config.offline_source, task, config.offline_size, &mut rng)
        })
        .collect();
    pairs(config.agents.len(), tasks.len())
        .into_par_iter()
        .map(|(a, t)| {
            let mut rng = stream_rng(config.seed, OFFLINE_STREAM, a, t);
            eval_offline(
                config.agents[a],
                model,
                &tasks[t],
                &datasets[t],
                t,
                &mut rng,
            )
        })
        .collect()
}

/// Online deployment of every agent on every test task for
/// `config.online_steps` pulls/episodes, each pair on its own stream.
pub fn run_online_eval(config: &EvalConfig, model: Option<&ModelState>) -> Result<Vec<EvalRecord>> {
    validate_config(config, model)?;
    if config.online_steps == 0 {
        return Err(EvalError::BadConfig(
            "online evaluation needs at least one step".into(),
        ));
    }
    let tasks = test_tasks(config);
    pairs(config.agents.len(), tasks.len())
        .into_par_iter()
        .map(|(a, t)| {
            let mut rng = stream_rng(config.seed, ONLINE_STREAM, a, t);
            eval_online(
                config.agents[a],
                model,
                &tasks[t],
                config.online_steps,
                t,
                &mut rng,
            )
        })
        .collect()
}

fn pairs(agents: usize, tasks: usize) -> Vec<(usize, usize)> {
    (0..agents)
        .flat_map(|a| (0..tasks).map(move |t| (a, t)))
        .collect()
}

// ---------------------------------------------------------------------------
// Aggregation and emission
// ---------------------------------------------------------------------------

/// Mean and standard error of one metric at one step for one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub agent: String,
    pub metric: String,
    pub step: usize,
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

/// Group metric points by (agent, metric, step) and reduce to mean ± standard
/// error (sample standard deviation over √n; zero for singleton groups).
/// Single-threaded and ordered, so output order is reproducible.
pub fn aggregate(records: &[EvalRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, &'static str, usize), Vec<f64>> = BTreeMap::new();
    for record in records {
        for point in metric_points(record) {
            groups
                .entry((record.agent.clone(), point.metric, point.step))
                .or_default()
                .push(point.value);
        }
    }
    groups
        .into_iter()
        .map(|((agent, metric, step), values)| {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            // Identical observations have zero spread exactly; the formula
            // below would smear rounding error from the mean over them.
            let std_error = if values.iter().all(|&v| v == values[0]) {
                0.0
            } else {
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            };
            SummaryRow {
                agent,
                metric: metric.to_string(),
                step,
                mean,
                std_error,
                count: values.len(),
            }
        })
        .collect()
}

/// Long-format records CSV: `run_id,agent,task_index,step,metric_name,value`.
pub fn records_csv(run_id: &str, records: &[EvalRecord]) -> String {
    let mut out = String::from("run_id,agent,task_index,step,metric_name,value\n");
    for record in records {
        for p in metric_points(record) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                run_id, record.agent, record.task_index, p.step, p.metric, p.value
            );
        }
    }
    out
}

pub fn write_records_csv(run_id: &str, records: &[EvalRecord], path: &Path) -> Result<()> {
    Ok(std::fs::write(path, records_csv(run_id, records))?)
}

/// Aggregated CSV: `run_id,agent,metric_name,step,mean,std_error,count`.
pub fn summary_csv(run_id: &str, summary: &[SummaryRow]) -> String {
    let mut out = String::from("run_id,agent,metric_name,step,mean,std_error,count\n");
    for row in summary {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            run_id, row.agent, row.metric, row.step, row.mean, row.std_error, row.count
        );
    }
    out
}

pub fn write_summary_csv(run_id: &str, summary: &[SummaryRow], path: &Path) -> Result<()> {
    Ok(std::fs::write(path, summary_csv(run_id, summary))?)
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

const PLOT_PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Render `metric`'s mean curve ± standard-error band, one series per agent,
/// as a standalone SVG string. Pure: the same summary yields the same bytes.
pub fn plot_svg(summary: &[SummaryRow], metric: &str) -> Result<String> {
    let mut series: BTreeMap<&str, Vec<&SummaryRow>> = BTreeMap::new();
    for row in summary {
        if row.metric == metric {
            series.entry(row.agent.as_str()).or_default().push(row);
        }
    }
    if series.is_empty() {
        return Err(EvalError::Empty(format!(
            "no rows carry metric `{metric}`"
        )));
    }
    for rows in series.values_mut() {
        rows.sort_by_key(|r| r.step);
    }

    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for rows in series.values() {
        for r in rows {
            x0 = x0.min(r.step as f64);
            x1 = x1.max(r.step as f64);
            y0 = y0.min(r.mean - r.std_error);
            y1 = y1.max(r.mean + r.std_error);
        }
    }
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let y_pad = if y1 > y0 {
        0.05 * (y1 - y0)
    } else {
        f64::max(0.5, 0.1 * y1.abs())
    };
    y0 -= y_pad;
    y1 += y_pad;

    const W: f64 = 720.0;
    const H: f64 = 440.0;
    const L: f64 = 64.0;
    const R: f64 = 16.0;
    const T: f64 = 40.0;
    const B: f64 = 48.0;
    let sx = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let sy = |y: f64| (H - B) - (y - y0) / (y1 - y0) * (H - T - B);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{metric}</text>",
        W / 2.0
    );
    let _ = writeln!(
        svg,
        "<rect x=\"{L}\" y=\"{T}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>",
        W - L - R,
        H - T - B
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * f64::from(i) / 4.0;
        let fy = y0 + (y1 - y0) * f64::from(i) / 4.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{x:.2}\" y1=\"{}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"#333\"/>",
            H - B,
            H - B + 4.0,
            x = sx(fx)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{fx}</text>",
            sx(fx),
            H - B + 18.0
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{}\" y2=\"{y:.2}\" stroke=\"#333\"/>",
            L - 4.0,
            L,
            y = sy(fy)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{fy:.4}</text>",
            L - 8.0,
            sy(fy) + 4.0
        );
    }

    for (idx, (agent, rows)) in series.iter().enumerate() {
        let color = PLOT_PALETTE[idx % PLOT_PALETTE.len()];
        let mut band = String::new();
        for r in rows.iter() {
            let _ = write!(
                band,
                "{:.2},{:.2} ",
                sx(r.step as f64),
                sy(r.mean + r.std_error)
            );
        }
        for r in rows.iter().rev() {
            let _ = write!(
                band,
                "{:.2},{:.2} ",
                sx(r.step as f64),
                sy(r.mean - r.std_error)
            );
        }
        let _ = writeln!(
            svg,
            "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>",
            band.trim_end()
        );
        let mut line = String::new();
        for r in rows.iter() {
            let _ = write!(line, "{:.2},{:.2} ", sx(r.step as f64), sy(r.mean));
        }
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            line.trim_end()
        );
        for r in rows.iter() {
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{color}\"/>",
                sx(r.step as f64),
                sy(r.mean)
            );
        }
        let ly = T + 14.0 + 16.0 * idx as f64;
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{:.2}\" width=\"12\" height=\"4\" fill=\"{color}\"/>",
            W - R - 150.0,
            ly - 4.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{ly:.2}\">{agent}</text>",
            W - R - 132.0
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Write [`plot_svg`] to disk; repeat calls produce byte-identical files.
pub fn emit_plot(summary: &[SummaryRow], metric: &str, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, plot_svg(summary, metric)?)?)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{DarkRoomTask, TabularMdp};
    use crate::model::{ModelConfig, StateEncoding};

    fn gaussian_family() -> TaskFamilyConfig {
        TaskFamilyConfig::GaussianBandit {
            num_arms: 5,
            sigma: 0.3,
        }
    }

    fn bandit_config(agents: Vec<AgentSpec>) -> EvalConfig {
        EvalConfig {
            family: gaussian_family(),
            num_test_tasks: 4,
            offline_source: OfflineSource::Generator(DatasetKind::DirichletMix),
            offline_size: 30,
            online_steps: 25,
            agents,
            seed: 11,
        }
    }

    fn fixed_bandit(means: Vec<f64>) -> Task {
        Task::Bandit(BanditTask {
            means,
            noise: RewardNoise::Gaussian { sigma: 0.3 },
            linear: None,
        })
    }

    fn tiny_room(goal: (usize, usize)) -> Task {
        Task::DarkRoom(DarkRoomTask::new(2, 2, goal))
    }

    fn unit_model(action_dim: usize, max_context: usize) -> ModelState {
        let config = ModelConfig {
            state_dim: 1,
            action_dim,
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            max_context,
            include_prefix_zero: true,
            state_encoding: StateEncoding::Unit,
            with_history: false,
        };
        ModelState::new(config, &Rng::new(9)).unwrap()
    }

    fn grid_model(with_history: bool) -> ModelState {
        let config = ModelConfig {
            state_dim: 2,
            action_dim: 5,
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            max_context: 8,
            include_prefix_zero: true,
            state_encoding: StateEncoding::GridScaled { grid_size: 2 },
            with_history,
        };
        ModelState::new(config, &Rng::new(9)).unwrap()
    }

    fn mirrored_mdps() -> (Task, Task) {
        let forward = TabularMdp {
            num_states: 2,
            num_actions: 2,
            horizon: 2,
            next_state: vec![vec![0, 1], vec![1, 0]],
            reward_mean: vec![vec![0.9, 0.1], vec![0.8, 0.2]],
            start_state: 0,
        };
        let mut mirrored = forward.clone();
        mirrored.reward_mean = vec![vec![0.1, 0.9], vec![0.2, 0.8]];
        (Task::Tabular(forward), Task::Tabular(mirrored))
    }

    #[test]
    fn configs_reject_mismatched_agents_families_and_sources() {
        let ok = bandit_config(vec![AgentSpec::Ts]);
        assert!(validate_config(&ok, None).is_ok());

        let mut c = bandit_config(vec![]);
        assert!(matches!(
            validate_config(&c, None),
            Err(EvalError::BadConfig(_))
        ));
        c = bandit_config(vec![AgentSpec::Ts, AgentSpec::Ts]);
        assert!(matches!(
            validate_config(&c, None),
            Err(EvalError::BadConfig(_))
        ));
        c = bandit_config(vec![AgentSpec::Ts]);
        c.num_test_tasks = 0;
        assert!(matches!(
            validate_config(&c, None),
            Err(EvalError::BadConfig(_))
        ));

        // Bandit-only baselines stay off episodic families.
        let room = EvalConfig {
            family: TaskFamilyConfig::Finite {
                tasks: vec![tiny_room((1, 1))],
            },
            num_test_tasks: 1,
            offline_source: OfflineSource::Expert,
            offline_size: 2,
            online_steps: 2,
            agents: vec![AgentSpec::Emp],
            seed: 0,
        };
        assert!(matches!(
            validate_config(&room, None),
            Err(EvalError::Incompatible { agent: "emp", .. })
        ));

        // Linear baseline needs linear structure.
        c = bandit_config(vec![AgentSpec::LinUcb]);
        assert!(matches!(
            validate_config(&c, None),
            Err(EvalError::Incompatible {
                agent: "linucb",
                ..
            })
        ));

        // Transformers need a model, with matching shape, and history
        // conditioning needs episodes.
        c = bandit_config(vec![AgentSpec::Dpt]);
        assert!(matches!(
            validate_config(&c, None),
            Err(EvalError::MissingModel)
        ));
        let narrow = unit_model(3, 8);
        assert!(matches!(
            validate_config(&c, Some(&narrow)),
            Err(EvalError::Incompatible { agent: "dpt", .. })
        ));
        let five = unit_model(5, 8);
        assert!(validate_config(&c, Some(&five)).is_ok());
        c = bandit_config(vec![AgentSpec::DptHistory]);
        assert!(matches!(
            validate_config(&c, Some(&five)),
            Err(EvalError::Incompatible {
                agent: "dpt_history",
                ..
            })
        ));

        // Dataset sources are checked against the family.
        c = bandit_config(vec![AgentSpec::Ts]);
        c.offline_source = OfflineSource::Generator(DatasetKind::UniformRandomRollout);
        assert!(matches!(
            validate_config(&c, None),
            Err(EvalError::BadConfig(_))
        ));
        c.offline_source =
            OfflineSource::Generator(DatasetKind::ExpertBiased { omega: Some(1.5) });
        assert!(matches!(
            validate_config(&c, None),
            Err(EvalError::BadConfig(_))
        ));
        let mut r = room.clone();
        r.agents = vec![AgentSpec::Oracle];
        r.offline_source = OfflineSource::Generator(DatasetKind::DirichletMix);
        assert!(matches!(
            validate_config(&r, None),
            Err(EvalError::BadConfig(_))
        ));
    }

    #[test]
    fn the_oracle_never_pays_regret() {
        let task = fixed_bandit(vec![0.1, 0.9, 0.3]);
        let rec = eval_offline(AgentSpec::Oracle, None, &task, &[], 0, &mut Rng::new(1)).unwrap();
        match rec.outcome {
            EvalOutcome::OfflineBandit {
                action,
                suboptimality,
                ..
            } => {
                assert_eq!(action, 1);
                assert_eq!(suboptimality, 0.0);
            }
            other => panic!("unexpected outcome {other:?}"),
        }
        let rec = eval_online(AgentSpec::Oracle, None, &task, 40, 0, &mut Rng::new(2)).unwrap();
        match rec.outcome {
            EvalOutcome::OnlineBandit {
                instant_regret,
                cumulative_regret,
                ..
            } => {
                assert!(instant_regret.iter().all(|&r| r == 0.0));
                assert!(cumulative_regret.iter().all(|&r| r == 0.0));
            }
            other => panic!("unexpected outcome {other:?}"),
        }

        // Starting on the goal, the optimal policy banks one reward per step.
        let room = Task::DarkRoom(DarkRoomTask::new(5, 20, (0, 0)));
        let rec = eval_offline(AgentSpec::Oracle, None, &room, &[], 0, &mut Rng::new(3)).unwrap();
        match rec.outcome {
            EvalOutcome::OfflineEpisode {
                episode_return,
                optimal_return,
                first_action_optimal,
                ..
            } => {
                assert_eq!(episode_return, 20.0);
                assert_eq!(optimal_return, 20.0);
                assert!(first_action_optimal);
            }
            other => panic!("unexpected outcome {other:?}"),
        }
        let rec = eval_online(AgentSpec::Oracle, None, &room, 3, 0, &mut Rng::new(4)).unwrap();
        match rec.outcome {
            EvalOutcome::OnlineEpisodes {
                episode_returns,
                cumulative_regret,
                ..
            } => {
                assert_eq!(episode_returns, vec![20.0, 20.0, 20.0]);
                assert!(cumulative_regret.iter().all(|&r| r == 0.0));
            }
            other => panic!("unexpected outcome {other:?}"),
        }
    }

    #[test]
    fn greedy_rules_skip_rather_than_crash_on_empty_datasets() {
        let task = fixed_bandit(vec![0.2, 0.8]);
        for spec in [AgentSpec::Emp, AgentSpec::Lcb] {
            let rec = eval_offline(spec, None, &task, &[], 0, &mut Rng::new(1)).unwrap();
            match rec.outcome {
                EvalOutcome::Skipped { reason } => assert!(!reason.is_empty()),
                other => panic!("{spec:?} should skip, got {other:?}"),
            }
        }

        // Through the driver the run still completes and the skips surface
        // as their own aggregate metric.
        let mut config = bandit_config(vec![AgentSpec::Emp, AgentSpec::Oracle]);
        config.offline_size = 0;
        let records = run_offline_eval(&config, None).unwrap();
        let summary = aggregate(&records);
        let skips = summary
            .iter()
            .find(|r| r.agent == "emp" && r.metric == "skipped")
            .expect("skip rows present");
        assert_eq!(skips.mean, 1.0);
        assert_eq!(skips.count, config.num_test_tasks);
        assert!(summary
            .iter()
            .any(|r| r.agent == "oracle" && r.metric == "suboptimality" && r.mean == 0.0));
    }

    #[test]
    fn evaluation_runs_repeat_bit_for_bit() {
        let config = bandit_config(vec![
            AgentSpec::Ts,
            AgentSpec::Ucb,
            AgentSpec::UniformRandom,
            AgentSpec::Oracle,
        ]);
        let a = run_offline_eval(&config, None).unwrap();
        let b = run_offline_eval(&config, None).unwrap();
        assert_eq!(a, b);
        let a = run_online_eval(&config, None).unwrap();
        let b = run_online_eval(&config, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn regret_curves_never_decrease_and_suboptimality_stays_nonnegative() {
        let config = bandit_config(vec![
            AgentSpec::Ts,
            AgentSpec::Ucb,
            AgentSpec::Emp,
            AgentSpec::Lcb,
            AgentSpec::UniformRandom,
        ]);
        for rec in run_offline_eval(&config, None).unwrap() {
            if let EvalOutcome::OfflineBandit { suboptimality, .. } = rec.outcome {
                assert!(suboptimality >= 0.0);
            }
        }
        for rec in run_online_eval(&config, None).unwrap() {
            match rec.outcome {
                // The lower-confidence rule is greedy-only: with nothing
                // observed it refuses, and the harness records that.
                EvalOutcome::Skipped { .. } => assert_eq!(rec.agent, "lcb"),
                EvalOutcome::OnlineBandit {
                    actions,
                    instant_regret,
                    cumulative_regret,
                    ..
                } => {
                    assert_eq!(actions.len(), config.online_steps);
                    assert_eq!(instant_regret.len(), config.online_steps);
                    assert!(instant_regret.iter().all(|&r| r >= 0.0));
                    assert!(cumulative_regret.windows(2).all(|w| w[1] >= w[0]));
                    let mut run = 0.0;
                    for (k, inst) in instant_regret.iter().enumerate() {
                        run += inst;
                        assert_eq!(run, cumulative_regret[k]);
                    }
                }
                other => panic!("unexpected outcome {other:?}"),
            }
        }
    }

    #[test]
    fn uniform_play_pays_the_mean_gap_per_pull() {
        let means = vec![0.9, 0.2, 0.4, 0.6, 0.3];
        let expected = 0.9 - means.iter().sum::<f64>() / 5.0;
        let task = fixed_bandit(means);
        let rec = eval_online(
            AgentSpec::UniformRandom,
            None,
            &task,
            10_000,
            0,
            &mut Rng::new(3),
        )
        .unwrap();
        match rec.outcome {
            EvalOutcome::OnlineBandit {
                cumulative_regret, ..
            } => {
                let slope = cumulative_regret.last().unwrap() / 10_000.0;
                assert!(
                    (slope - expected).abs() <= 0.05 * expected,
                    "slope {slope}, expected {expected}"
                );
            }
            other => panic!("unexpected outcome {other:?}"),
        }
    }

    #[test]
    fn learning_agents_flatten_their_regret_curves() {
        let mut config = bandit_config(vec![AgentSpec::Ts, AgentSpec::Ucb]);
        config.num_test_tasks = 40;
        config.online_steps = 200;
        config.seed = 17;
        let records = run_online_eval(&config, None).unwrap();
        for spec in &config.agents {
            let (mut early, mut late, mut n) = (0.0, 0.0, 0.0);
            for rec in records.iter().filter(|r| r.agent == spec.label()) {
                if let EvalOutcome::OnlineBandit {
                    cumulative_regret, ..
                } = &rec.outcome
                {
                    early += cumulative_regret[49];
                    late += cumulative_regret[199];
                    n += 1.0;
                }
            }
            assert_eq!(n, 40.0);
            let ratio = (late / n) / (early / n);
            assert!(
                ratio <= 3.0,
                "{}: regret(200)/regret(50) = {ratio}",
                spec.label()
            );
        }
    }

    #[test]
    fn long_contexts_are_cut_to_the_newest_rows_with_the_query_kept() {
        let model = unit_model(3, 4);
        let task = fixed_bandit(vec![0.3, 0.6, 0.1]);
        let mut rng = Rng::new(5);
        let data: Vec<Transition> = (0..10)
            .map(|_| Transition {
                state: State::Unit,
                action: rng.below(3),
                reward: rng.uniform(),
                next_state: State::Unit,
            })
            .collect();

        let rec = eval_offline(AgentSpec::Dpt, Some(&model), &task, &data, 0, &mut rng).unwrap();
        match rec.outcome {
            EvalOutcome::OfflineBandit {
                action,
                context_truncated,
                ..
            } => {
                assert!(context_truncated);
                // Identical to querying the model on the newest four rows by
                // hand: nothing else was fed in, and the query survived.
                let by_hand = argmax(
                    &model
                        .action_distribution(&State::Unit, &data[6..], None)
                        .unwrap(),
                );
                assert_eq!(action, by_hand);
            }
            other => panic!("unexpected outcome {other:?}"),
        }

        let rec =
            eval_offline(AgentSpec::Dpt, Some(&model), &task, &data[..3], 0, &mut rng).unwrap();
        assert!(matches!(
            rec.outcome,
            EvalOutcome::OfflineBandit {
                context_truncated: false,
                ..
            }
        ));

        let rec =
            eval_online(AgentSpec::Dpt, Some(&model), &task, 10, 0, &mut Rng::new(6)).unwrap();
        match rec.outcome {
            EvalOutcome::OnlineBandit {
                actions,
                context_truncated,
                ..
            } => {
                assert_eq!(actions.len(), 10);
                assert!(context_truncated, "ten pulls overflow a context of four");
            }
            other => panic!("unexpected outcome {other:?}"),
        }
    }

    #[test]
    fn episodic_runs_grow_by_whole_episodes_through_both_model_paths() {
        let model = grid_model(true);
        let config = EvalConfig {
            family: TaskFamilyConfig::Finite {
                tasks: vec![tiny_room((1, 1))],
            },
            num_test_tasks: 1,
            offline_source: OfflineSource::Generator(DatasetKind::UniformRandomRollout),
            offline_size: 4,
            online_steps: 3,
            agents: vec![
                AgentSpec::Dpt,
                AgentSpec::DptHistory,
                AgentSpec::UniformRandom,
                AgentSpec::Oracle,
            ],
            seed: 5,
        };
        let offline = run_offline_eval(&config, Some(&model)).unwrap();
        assert_eq!(offline.len(), 4);
        for rec in &offline {
            match &rec.outcome {
                EvalOutcome::OfflineEpisode {
                    actions,
                    episode_return,
                    optimal_return,
                    ..
                } => {
                    assert_eq!(actions.len(), 2);
                    assert!(actions.iter().all(|&a| a < 5));
                    assert!(*episode_return <= *optimal_return);
                    if rec.agent == "oracle" {
                        assert_eq!(*episode_return, *optimal_return);
                    }
                }
                other => panic!("unexpected outcome {other:?}"),
            }
        }

        let online = run_online_eval(&config, Some(&model)).unwrap();
        for rec in &online {
            match &rec.outcome {
                EvalOutcome::OnlineEpisodes {
                    episode_returns,
                    instant_regret,
                    cumulative_regret,
                    optimal_return,
                    ..
                } => {
                    assert_eq!(episode_returns.len(), 3);
                    assert!(instant_regret.iter().all(|&r| r >= 0.0));
                    assert!(cumulative_regret.windows(2).all(|w| w[1] >= w[0]));
                    assert!(episode_returns.iter().all(|r| r <= optimal_return));
                    if rec.agent == "oracle" {
                        assert!(cumulative_regret.iter().all(|&r| r == 0.0));
                    }
                }
                other => panic!("unexpected outcome {other:?}"),
            }
        }
    }

    #[test]
    fn greedy_agreement_counts_semantically_optimal_actions() {
        // A head initialized at zero predicts exactly uniformly, so the
        // greedy action is always index 0; agreement is then determined by
        // whether action 0 is optimal in each state.
        let (forward, mirrored) = mirrored_mdps();
        let config = ModelConfig {
            state_dim: 2,
            action_dim: 2,
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            max_context: 8,
            include_prefix_zero: true,
            state_encoding: StateEncoding::OneHot { count: 2 },
            with_history: false,
        };
        let model = ModelState::new(config, &Rng::new(2)).unwrap();
        assert_eq!(greedy_policy_agreement(&model, &forward, &[]).unwrap(), 1.0);
        assert_eq!(
            greedy_policy_agreement(&model, &mirrored, &[]).unwrap(),
            0.0
        );

        let grid = grid_model(false);
        let room = tiny_room((1, 1));
        // Action 0 moves left: never toward the goal at (1, 1), and off it
        // at (1, 1) itself.
        assert_eq!(greedy_policy_agreement(&grid, &room, &[]).unwrap(), 0.0);
    }

    #[test]
    fn optimal_moves_are_recognized_in_every_task_type() {
        let tied = fixed_bandit(vec![0.5, 0.5, 0.2]);
        assert!(is_optimal_move(&tied, &State::Unit, 0));
        assert!(is_optimal_move(&tied, &State::Unit, 1));
        assert!(!is_optimal_move(&tied, &State::Unit, 2));

        let room = Task::DarkRoom(DarkRoomTask::new(5, 20, (2, 3)));
        let corner = State::Grid { x: 0, y: 0 };
        assert!(is_optimal_move(&room, &corner, DarkRoomTask::UP));
        assert!(is_optimal_move(&room, &corner, DarkRoomTask::RIGHT));
        assert!(!is_optimal_move(&room, &corner, DarkRoomTask::LEFT));
        assert!(!is_optimal_move(&room, &corner, DarkRoomTask::DOWN));
        assert!(!is_optimal_move(&room, &corner, DarkRoomTask::STAY));
        let goal = State::Grid { x: 2, y: 3 };
        assert!(is_optimal_move(&room, &goal, DarkRoomTask::STAY));
        assert!(!is_optimal_move(&room, &goal, DarkRoomTask::LEFT));

        // Permutations relabel action indices; optimality follows the moves.
        let permuted = Task::DarkRoom(DarkRoomTask::permuted(2, 2, (1, 1), [4, 3, 2, 1, 0]));
        let start = State::Grid { x: 0, y: 0 };
        assert!(is_optimal_move(&permuted, &start, 3), "index 3 moves right");
        assert!(is_optimal_move(&permuted, &start, 2), "index 2 moves up");
        for bad in [0, 1, 4] {
            assert!(!is_optimal_move(&permuted, &start, bad));
        }

        let (forward, _) = mirrored_mdps();
        assert!(is_optimal_move(&forward, &State::Discrete { index: 0 }, 0));
        assert!(!is_optimal_move(&forward, &State::Discrete { index: 0 }, 1));
    }

    #[test]
    fn standard_errors_match_hand_computed_values() {
        let offline = |task_index, suboptimality| EvalRecord {
            agent: "emp".into(),
            task_index,
            outcome: EvalOutcome::OfflineBandit {
                action: 0,
                suboptimality,
                context_truncated: false,
            },
        };

        // Two observations x, y: SE = |x − y| / 2 exactly.
        let summary = aggregate(&[offline(0, 0.3), offline(1, 0.7)]);
        let row = summary
            .iter()
            .find(|r| r.metric == "suboptimality")
            .unwrap();
        assert_eq!(row.mean, 0.5);
        assert!((row.std_error - 0.2).abs() < 1e-15, "{}", row.std_error);
        assert_eq!(row.count, 2);

        // Identical observations collapse to zero spread.
        let summary = aggregate(&[offline(0, 0.4), offline(1, 0.4), offline(2, 0.4)]);
        let row = summary
            .iter()
            .find(|r| r.metric == "suboptimality")
            .unwrap();
        assert_eq!(row.std_error, 0.0);

        // 200 fair coin flips: SE ≈ 0.5/√200 ≈ 0.0354.
        let mut rng = Rng::new(1);
        let coins: Vec<EvalRecord> = (0..200)
            .map(|i| offline(i, rng.below(2) as f64))
            .collect();
        let summary = aggregate(&coins);
        let row = summary
            .iter()
            .find(|r| r.metric == "suboptimality")
            .unwrap();
        assert_eq!(row.count, 200);
        assert!(
            (row.std_error - 0.0354).abs() <= 0.2 * 0.0354,
            "std error {}",
            row.std_error
        );
    }

    #[test]
    fn csv_emission_follows_the_documented_schemas() {
        let mut config = bandit_config(vec![AgentSpec::Oracle, AgentSpec::UniformRandom]);
        config.num_test_tasks = 2;
        config.online_steps = 3;
        let records = run_online_eval(&config, None).unwrap();
        let csv = records_csv("run7", &records);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "run_id,agent,task_index,step,metric_name,value");
        let expected_rows: usize = records.iter().map(|r| metric_points(r).len()).sum();
        assert_eq!(lines.len(), 1 + expected_rows);
        assert_eq!(expected_rows, 2 * 2 * 3 * 3);
        assert!(lines.iter().all(|l| l.split(',').count() == 6));
        assert!(csv.contains("run7,oracle,0,0,instant_regret,0\n"));

        let summary = aggregate(&records);
        let csv = summary_csv("run7", &summary);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "run_id,agent,metric_name,step,mean,std_error,count");
        assert_eq!(lines.len(), 1 + summary.len());
        assert!(lines.iter().all(|l| l.split(',').count() == 7));
    }

    #[test]
    fn plots_are_deterministic_and_draw_one_curve_per_agent() {
        let mut config = bandit_config(vec![AgentSpec::Oracle, AgentSpec::UniformRandom]);
        config.num_test_tasks = 3;
        config.online_steps = 5;
        let summary = aggregate(&run_online_eval(&config, None).unwrap());

        let svg = plot_svg(&summary, "cumulative_regret").unwrap();
        assert_eq!(svg, plot_svg(&summary, "cumulative_regret").unwrap());
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<polygon").count(), 2);
        assert!(matches!(
            plot_svg(&summary, "no_such_metric"),
            Err(EvalError::Empty(_))
        ));

        // The oracle's regret curve is exactly flat: every vertex of its
        // polyline sits at the same height.
        let oracle_rows: Vec<SummaryRow> = summary
            .iter()
            .filter(|r| r.agent == "oracle")
            .cloned()
            .collect();
        let flat = plot_svg(&oracle_rows, "cumulative_regret").unwrap();
        let points = flat
            .split("<polyline points=\"")
            .nth(1)
            .and_then(|rest| rest.split('"').next())
            .unwrap();
        let heights: std::collections::BTreeSet<&str> = points
            .split_whitespace()
            .map(|pair| pair.split(',').nth(1).unwrap())
            .collect();
        assert_eq!(heights.len(), 1, "flat curve, one y coordinate: {points}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("regret.svg");
        emit_plot(&summary, "cumulative_regret", &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        emit_plot(&summary, "cumulative_regret", &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn eval_configs_roundtrip_through_json() {
        let config = EvalConfig {
            family: TaskFamilyConfig::LinearBandit {
                num_arms: 10,
                dim: 3,
                sigma: 0.3,
                feature_seed: 21,
            },
            num_test_tasks: 7,
            offline_source: OfflineSource::Generator(DatasetKind::ExpertBiased {
                omega: Some(1.0),
            }),
            offline_size: 50,
            online_steps: 200,
            agents: vec![AgentSpec::Dpt, AgentSpec::Ts, AgentSpec::LinUcb],
            seed: 3,
        };
        let text = serde_json::to_string(&config).unwrap();
        let back: EvalConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(config, back);

        let expert = EvalConfig {
            offline_source: OfflineSource::Expert,
            ..config
        };
        let text = serde_json::to_string(&expert).unwrap();
        assert_eq!(expert, serde_json::from_str::<EvalConfig>(&text).unwrap());
    }
}
