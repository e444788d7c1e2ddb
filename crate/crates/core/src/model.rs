//! The in-context decision model: an attention stack over transition-tuple
//! rows plus a query row, with a softmax action head and a prefix
//! cross-entropy objective.
//!
//! # Sequence layout and exact set invariance
//!
//! The prediction after j dataset rows must be a function of the query and
//! the *unordered set* of those rows — there are no positional encodings,
//! and the contract is bit-exact: permuting the dataset must not change the
//! full-context prediction by even one ULP.
//!
//! A conventional decoder layout (query row followed by dataset rows, with
//! the prediction read above row j) cannot deliver that: row j's own stream
//! passes through the residual path, so the readout treats "the row I sit
//! on" differently from its peers, and float reductions would depend on
//! storage order anyway. Instead the forward pass interleaves readout
//! copies of the query with the context rows:
//!
//! ```text
//! position:  0    1    2    3    4   ...  2j-1   2j
//! content:   v   c_1   v   c_2   v        c_j    v
//! ```
//!
//! Context row positions attend {position 0, self}: their streams become
//! functions of (own row, query) only. Readout position 2j attends itself
//! plus context positions 1,3,…,2j−1, so its stream — and the prediction
//! p̂_j read there — is a function of (query, set of first j rows). The
//! fused attention primitive runs its reductions in content-canonical
//! order, which upgrades "same set" to "same bits".
//!
//! Causality comes from the same pattern: position 2j never attends a
//! context row later than j, so p̂_j is bit-invariant to rows after j.

use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::environments::{argmax, State, Transition};
use crate::numerics::{AttentionPattern, NodeId, NumericsError, Rng, Tape, Tensor};

/// Probabilities are clamped here before logs in the training objective.
pub const PROB_FLOOR: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("in-context dataset has {got} rows but max_context is {max}")]
    ContextOverflow { got: usize, max: usize },
    #[error("action index {index} out of range for {num_actions} actions")]
    BadAction { index: usize, num_actions: usize },
    #[error("state {got:?} does not match the configured encoding {encoding:?}")]
    StateMismatch { encoding: StateEncoding, got: State },
    #[error("history rows supplied but the model was built without with_history")]
    HistoryDisabled,
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint tensor {name}: expected shape {expected:?}, got {got:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint has unexpected tensor {0}")]
    UnexpectedTensor(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// How a `State` is turned into the `state_dim` coordinates of an input row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateEncoding {
    /// The singleton bandit state, encoded as the constant 1.
    Unit,
    /// Grid coordinates scaled to [0,1] by the grid size.
    GridScaled { grid_size: usize },
    /// Discrete state index as a one-hot vector.
    OneHot { count: usize },
}

impl StateEncoding {
    pub fn dim(&self) -> usize {
        match self {
            StateEncoding::Unit => 1,
            StateEncoding::GridScaled { .. } => 2,
            StateEncoding::OneHot { count } => *count,
        }
    }

    /// Write the encoding of `s` into `out` (length `self.dim()`).
    pub fn encode(&self, s: &State, out: &mut [f64]) -> Result<()> {
        let mismatch = || ModelError::StateMismatch {
            encoding: *self,
            got: s.clone(),
        };
        match (self, s) {
            (StateEncoding::Unit, State::Unit) => out[0] = 1.0,
            (StateEncoding::GridScaled { grid_size }, State::Grid { x, y }) => {
                out[0] = *x as f64 / *grid_size as f64;
                out[1] = *y as f64 / *grid_size as f64;
            }
            (StateEncoding::OneHot { count }, State::Discrete { index }) => {
                if index >= count {
                    return Err(mismatch());
                }
                out.fill(0.0);
                out[*index] = 1.0;
            }
            _ => return Err(mismatch()),
        }
        Ok(())
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Largest number of dataset rows a sequence may carry.
    pub max_context: usize,
    /// Whether the objective also trains p̂_0, the empty-context prior.
    #[serde(default = "default_true")]
    pub include_prefix_zero: bool,
    pub state_encoding: StateEncoding,
    /// Adds a row-type coordinate and accepts (state, action) history rows
    /// appended after the dataset rows.
    #[serde(default)]
    pub with_history: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        if self.state_dim == 0 || self.action_dim == 0 || self.embed_dim == 0 {
            return bad("all dimensions must be >= 1".into());
        }
        if self.n_layers == 0 || self.n_heads == 0 {
            return bad("n_layers and n_heads must be >= 1".into());
        }
        if self.max_context == 0 {
            return bad("max_context must be >= 1".into());
        }
        if self.embed_dim % self.n_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.state_encoding.dim() != self.state_dim {
            return bad(format!(
                "state_dim {} does not match encoding width {}",
                self.state_dim,
                self.state_encoding.dim()
            ));
        }
        Ok(())
    }

    /// Width of every input row: (s, one-hot a, s′, r), plus a row-type
    /// coordinate when history rows are enabled.
    pub fn row_width(&self) -> usize {
        2 * self.state_dim + self.action_dim + 1 + usize::from(self.with_history)
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Lay out the model input: the query row, the dataset rows in the
    /// given order, and (when enabled) history rows appended last.
    pub fn build_sequence(
        &self,
        s_query: &State,
        dataset: &[Transition],
        history: Option<&[(State, usize)]>,
    ) -> Result<ModelInputSequence> {
        if dataset.len() > self.max_context {
            return Err(ModelError::ContextOverflow {
                got: dataset.len(),
                max: self.max_context,
            });
        }
        let history = match (history, self.with_history) {
            (Some(h), true) => h,
            (Some(h), false) if !h.is_empty() => return Err(ModelError::HistoryDisabled),
            _ => &[],
        };
        let check_action = |a: usize| -> Result<usize> {
            if a >= self.action_dim {
                return Err(ModelError::BadAction {
                    index: a,
                    num_actions: self.action_dim,
                });
            }
            Ok(a)
        };

        let (ds, da, w) = (self.state_dim, self.action_dim, self.row_width());
        let mut rows = vec![0.0; (1 + dataset.len() + history.len()) * w];
        self.state_encoding.encode(s_query, &mut rows[..ds])?;
        for (j, t) in dataset.iter().enumerate() {
            let row = &mut rows[(1 + j) * w..(2 + j) * w];
            self.state_encoding.encode(&t.state, &mut row[..ds])?;
            row[ds + check_action(t.action)?] = 1.0;
            self.state_encoding
                .encode(&t.next_state, &mut row[ds + da..2 * ds + da])?;
            row[2 * ds + da] = t.reward;
        }
        for (j, (s, a)) in history.iter().enumerate() {
            let row = &mut rows[(1 + dataset.len() + j) * w..(2 + dataset.len() + j) * w];
            self.state_encoding.encode(s, &mut row[..ds])?;
            row[ds + check_action(*a)?] = 1.0;
            // Next-state and reward coordinates stay zero; the trailing
            // type coordinate marks this as a history row.
            row[w - 1] = 1.0;
        }
        Ok(ModelInputSequence {
            row_width: w,
            num_dataset: dataset.len(),
            num_history: history.len(),
            rows,
        })
    }
}

/// A built model input: query row first, then dataset rows, then history
/// rows, each `row_width` floats wide.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputSequence {
    row_width: usize,
    num_dataset: usize,
    num_history: usize,
    rows: Vec<f64>,
}

impl ModelInputSequence {
    pub fn row_width(&self) -> usize {
        self.row_width
    }

    pub fn num_dataset(&self) -> usize {
        self.num_dataset
    }

    pub fn num_history(&self) -> usize {
        self.num_history
    }

    /// Dataset plus history rows: everything the readouts condition on.
    pub fn num_context(&self) -> usize {
        self.num_dataset + self.num_history
    }

    pub fn query_row(&self) -> &[f64] {
        &self.rows[..self.row_width]
    }

    /// Context row `j` (0-based), counting dataset rows then history rows.
    pub fn context_row(&self, j: usize) -> &[f64] {
        let w = self.row_width;
        &self.rows[(1 + j) * w..(2 + j) * w]
    }

    pub fn dataset_row(&self, j: usize) -> &[f64] {
        assert!(j < self.num_dataset, "dataset row {j} out of range");
        self.context_row(j)
    }

    pub fn history_row(&self, j: usize) -> &[f64] {
        assert!(j < self.num_history, "history row {j} out of range");
        self.context_row(self.num_dataset + j)
    }
}

enum Init {
    Zeros,
    Ones,
    Normal,
    /// The action head starts at zero so an untrained model is exactly
    /// uniform over actions.
    HeadZeros,
}

/// Canonical parameter list: names, shapes, and initialization, in the
/// order tensors are stored, bound to tapes, and written to checkpoints.
fn parameter_spec(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.embed_dim;
    let hidden = 4 * d;
    let mut spec = vec![
        ("embed.w".to_string(), vec![config.row_width(), d], Init::Normal),
        ("embed.b".to_string(), vec![d], Init::Zeros),
    ];
    for i in 0..config.n_layers {
        let layer: [(&str, Vec<usize>, Init); 16] = [
            ("ln1.g", vec![d], Init::Ones),
            ("ln1.b", vec![d], Init::Zeros),
            ("attn.wq", vec![d, d], Init::Normal),
            ("attn.bq", vec![d], Init::Zeros),
            ("attn.wk", vec![d, d], Init::Normal),
            ("attn.bk", vec![d], Init::Zeros),
            ("attn.wv", vec![d, d], Init::Normal),
            ("attn.bv", vec![d], Init::Zeros),
            ("attn.wo", vec![d, d], Init::Normal),
            ("attn.bo", vec![d], Init::Zeros),
            ("ln2.g", vec![d], Init::Ones),
            ("ln2.b", vec![d], Init::Zeros),
            ("mlp.w1", vec![d, hidden], Init::Normal),
            ("mlp.b1", vec![hidden], Init::Zeros),
            ("mlp.w2", vec![hidden, d], Init::Normal),
            ("mlp.b2", vec![d], Init::Zeros),
        ];
        for (suffix, shape, init) in layer {
            spec.push((format!("layer{i}.{suffix}"), shape, init));
        }
    }
    spec.push(("final_ln.g".to_string(), vec![d], Init::Ones));
    spec.push(("final_ln.b".to_string(), vec![d], Init::Zeros));
    spec.push(("head.w".to_string(), vec![d, config.action_dim], Init::HeadZeros));
    spec.push(("head.b".to_string(), vec![config.action_dim], Init::HeadZeros));
    spec
}

/// Offset of a layer's first tensor in the canonical parameter order.
fn layer_base(i: usize) -> usize {
    2 + 16 * i
}

/// The model: a config plus its named parameter tensors.
///
/// A `&ModelState` may serve forward passes from many threads at once
/// (parameter buffers are shared copy-on-write); training mutates it from
/// one thread between passes.
#[derive(Clone)]
pub struct ModelState {
    config: ModelConfig,
    parameters: Vec<(String, Tensor)>,
}

impl ModelState {
    pub fn new(config: ModelConfig, rng: &Rng) -> Result<ModelState> {
        config.validate()?;
        let parameters = parameter_spec(&config)
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape, init))| {
                let tensor = match init {
                    Init::Zeros | Init::HeadZeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::full(&shape, 1.0),
                    Init::Normal => {
                        Tensor::randn_truncated(&shape, INIT_STD, &mut rng.derive(i as u64))
                    }
                };
                (name, tensor)
            })
            .collect();
        Ok(ModelState { config, parameters })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[(String, Tensor)] {
        &self.parameters
    }

    pub fn parameters_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.parameters
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every parameter on `tape`, in canonical order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.parameters.iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    /// Run the stack over `seq` and return per-row action probabilities,
    /// shape [2·num_context+1, action_dim]. Row 2j is the prediction after
    /// the first j context rows.
    pub fn forward(&self, tape: &mut Tape, bound: &[NodeId], seq: &ModelInputSequence) -> Result<NodeId> {
        let cfg = &self.config;
        let c = seq.num_context();
        let t_len = 2 * c + 1;
        let w = seq.row_width();
        debug_assert_eq!(w, cfg.row_width());

        // Interleave: readout copies of the query at even positions,
        // context rows at odd positions.
        let mut input = vec![0.0; t_len * w];
        input[..w].copy_from_slice(seq.query_row());
        for j in 1..=c {
            input[(2 * j - 1) * w..2 * j * w].copy_from_slice(seq.context_row(j - 1));
            input[2 * j * w..(2 * j + 1) * w].copy_from_slice(seq.query_row());
        }
        let x = tape.constant(&[t_len, w], input)?;

        let mut h = tape.matmul(x, bound[0])?;
        h = tape.add(h, bound[1])?;

        let pattern = Arc::new(interleaved_pattern(c));
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        for i in 0..cfg.n_layers {
            let b = layer_base(i);
            let normed = tape.layer_norm(h, bound[b], bound[b + 1], LN_EPS)?;
            let mut qkv = Vec::with_capacity(3);
            for offset in [2usize, 4, 6] {
                let proj = tape.matmul(normed, bound[b + offset])?;
                let proj = tape.add(proj, bound[b + offset + 1])?;
                let proj = tape.reshape(proj, &[t_len, cfg.n_heads, cfg.head_dim()])?;
                qkv.push(tape.permute3(proj, [1, 0, 2])?);
            }
            let att = tape.set_attention(qkv[0], qkv[1], qkv[2], &pattern, scale)?;
            let att = tape.permute3(att, [1, 0, 2])?;
            let att = tape.reshape(att, &[t_len, cfg.embed_dim])?;
            let att = tape.matmul(att, bound[b + 8])?;
            let att = tape.add(att, bound[b + 9])?;
            h = tape.add(h, att)?;

            let normed = tape.layer_norm(h, bound[b + 10], bound[b + 11], LN_EPS)?;
            let mid = tape.matmul(normed, bound[b + 12])?;
            let mid = tape.add(mid, bound[b + 13])?;
            let mid = tape.gelu(mid);
            let mid = tape.matmul(mid, bound[b + 14])?;
            let mid = tape.add(mid, bound[b + 15])?;
            h = tape.add(h, mid)?;
        }

        let base = layer_base(cfg.n_layers);
        let h = tape.layer_norm(h, bound[base], bound[base + 1], LN_EPS)?;
        let logits = tape.matmul(h, bound[base + 2])?;
        let logits = tape.add(logits, bound[base + 3])?;
        Ok(tape.softmax(logits)?)
    }

    /// Action distributions (p̂_0, …, p̂_c): p̂_j conditions the query on the
    /// first j context rows. Dataset prefixes come first; when history rows
    /// are present they extend the sequence, so later entries condition on
    /// the full dataset plus a history prefix.
    pub fn predict_prefixes(&self, seq: &ModelInputSequence) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let probs = self.forward(&mut tape, &bound, seq)?;
        let a = self.config.action_dim;
        let values = tape.values(probs);
        Ok((0..=seq.num_context())
            .map(|j| values[2 * j * a..(2 * j + 1) * a].to_vec())
            .collect())
    }

    /// The distribution the deployed policy uses: the prediction
    /// conditioned on the entire context.
    pub fn action_distribution(
        &self,
        s: &State,
        dataset: &[Transition],
        history: Option<&[(State, usize)]>,
    ) -> Result<Vec<f64>> {
        let seq = self.config.build_sequence(s, dataset, history)?;
        let mut prefixes = self.predict_prefixes(&seq)?;
        Ok(prefixes.pop().expect("at least the empty-context prediction"))
    }

    /// Greedy deployment: the most likely action, ties to the lowest index.
    pub fn act_offline(&self, s: &State, dataset: &[Transition]) -> Result<usize> {
        Ok(argmax(&self.action_distribution(s, dataset, None)?))
    }

    /// Sampling deployment: draw from the predicted distribution.
    pub fn act_online(
        &self,
        s: &State,
        dataset: &[Transition],
        history: Option<&[(State, usize)]>,
        rng: &mut Rng,
    ) -> Result<usize> {
        Ok(rng.categorical(&self.action_distribution(s, dataset, history)?))
    }

    /// The training objective as a tape node: −Σ_j log p̂_j(label), summed
    /// over readouts j (from 0 or 1 per `include_prefix_zero`, through every
    /// context row — history readouts included when present). Probabilities
    /// are clamped at `PROB_FLOOR`; clamp events are counted on the tape.
    pub fn loss_node(
        &self,
        tape: &mut Tape,
        bound: &[NodeId],
        seq: &ModelInputSequence,
        label: usize,
    ) -> Result<NodeId> {
        if label >= self.config.action_dim {
            return Err(ModelError::BadAction {
                index: label,
                num_actions: self.config.action_dim,
            });
        }
        let probs = self.forward(tape, bound, seq)?;
        let t_len = 2 * seq.num_context() + 1;
        // Pick the label's probability on every row, then neutralize the
        // rows that are not trained readouts by filling them with 1 (whose
        // log is 0 and whose gradient is blocked).
        let mut picked_index = vec![0usize; t_len];
        let mut neutralize = vec![true; t_len];
        for j in 0..=seq.num_context() {
            picked_index[2 * j] = label;
            neutralize[2 * j] = j == 0 && !self.config.include_prefix_zero;
        }
        let picked = tape.gather_last(probs, &picked_index)?;
        let safe = tape.masked_fill(picked, &neutralize, 1.0)?;
        let logs = tape.log_clamped(safe, PROB_FLOOR);
        let total = tape.sum_all(logs);
        Ok(tape.scale(total, -1.0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            config: self.config.clone(),
            tensors: self
                .parameters
                .iter()
                .map(|(name, t)| CheckpointTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.values().to_vec(),
                })
                .collect(),
        };
        let writer = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(writer, &file)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelState> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let file: CheckpointFile = serde_json::from_reader(reader)?;
        file.config.validate()?;
        let mut by_name: std::collections::HashMap<String, CheckpointTensor> = file
            .tensors
            .into_iter()
            .map(|t| (t.name.clone(), t))
            .collect();
        let parameters = parameter_spec(&file.config)
            .into_iter()
            .map(|(name, shape, _)| {
                let t = by_name
                    .remove(&name)
                    .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
                if t.shape != shape {
                    return Err(ModelError::TensorShape {
                        name,
                        expected: shape,
                        got: t.shape,
                    });
                }
                let tensor = Tensor::new(&t.shape, t.data).map_err(ModelError::Numerics)?;
                Ok((name, tensor))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(name) = by_name.into_keys().next() {
            return Err(ModelError::UnexpectedTensor(name));
        }
        Ok(ModelState {
            config: file.config,
            parameters,
        })
    }
}

/// The loss value on already-computed prefix predictions: −Σ_j log p̂_j(a★),
/// with probabilities clamped at `PROB_FLOOR`. `predictions[j]` is the
/// distribution after j context rows.
pub fn prefix_loss(predictions: &[Vec<f64>], label: usize, include_prefix_zero: bool) -> f64 {
    let start = usize::from(!include_prefix_zero);
    predictions[start.min(predictions.len())..]
        .iter()
        .map(|p| -p[label].max(PROB_FLOOR).ln())
        .sum()
}

/// Attention pattern for the interleaved layout over `num_context` rows:
/// context positions see the first readout and themselves; readout 2j sees
/// itself and context positions 1,3,…,2j−1.
fn interleaved_pattern(num_context: usize) -> AttentionPattern {
    let mut allowed = Vec::with_capacity(2 * num_context + 1);
    allowed.push(vec![0]);
    for j in 1..=num_context {
        allowed.push(vec![0, 2 * j - 1]);
        let mut readout: Vec<usize> = (1..=j).map(|i| 2 * i - 1).collect();
        readout.push(2 * j);
        allowed.push(readout);
    }
    AttentionPattern::new(allowed).expect("interleaved pattern is causal by construction")
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: ModelConfig,
    tensors: Vec<CheckpointTensor>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;

    fn bandit_config() -> ModelConfig {
        ModelConfig {
            state_dim: 1,
            action_dim: 5,
            embed_dim: 8,
            n_layers: 2,
            n_heads: 2,
            max_context: 16,
            include_prefix_zero: true,
            state_encoding: StateEncoding::Unit,
            with_history: false,
        }
    }

    fn bandit_transition(action: usize, reward: f64) -> Transition {
        Transition {
            state: State::Unit,
            action,
            next_state: State::Unit,
            reward,
        }
    }

    fn random_dataset(n: usize, rng: &mut Rng) -> Vec<Transition> {
        (0..n)
            .map(|_| bandit_transition(rng.below(5), rng.uniform()))
            .collect()
    }

    #[test]
    fn config_validation_rejects_inconsistent_fields() {
        let mut cfg = bandit_config();
        cfg.embed_dim = 9;
        assert!(cfg.validate().is_err(), "9 not divisible by 2 heads");
        let mut cfg = bandit_config();
        cfg.state_dim = 3;
        assert!(cfg.validate().is_err(), "unit encoding is width 1");
        let mut cfg = bandit_config();
        cfg.max_context = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sequence_lays_out_bandit_rows_directly() {
        let cfg = bandit_config();
        let seq = cfg
            .build_sequence(&State::Unit, &[bandit_transition(2, 0.7)], None)
            .unwrap();
        assert_eq!(seq.row_width(), 8); // 2*1 + 5 + 1
        assert_eq!(seq.query_row(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(
            seq.dataset_row(0),
            &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.7]
        );
    }

    #[test]
    fn sequence_scales_grid_coordinates() {
        let cfg = ModelConfig {
            state_dim: 2,
            action_dim: 5,
            state_encoding: StateEncoding::GridScaled { grid_size: 10 },
            ..bandit_config()
        };
        let t = Transition {
            state: State::Grid { x: 0, y: 0 },
            action: 2,
            next_state: State::Grid { x: 0, y: 1 },
            reward: 0.0,
        };
        let seq = cfg
            .build_sequence(&State::Grid { x: 5, y: 9 }, &[t], None)
            .unwrap();
        assert_eq!(seq.query_row()[..2], [0.5, 0.9]);
        assert_eq!(
            seq.dataset_row(0),
            &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.1, 0.0]
        );
    }

    #[test]
    fn sequence_rejects_overflow_bad_actions_and_unconfigured_history() {
        let cfg = ModelConfig {
            max_context: 2,
            ..bandit_config()
        };
        let long: Vec<Transition> = (0..3).map(|_| bandit_transition(0, 0.0)).collect();
        assert!(matches!(
            cfg.build_sequence(&State::Unit, &long, None),
            Err(ModelError::ContextOverflow { got: 3, max: 2 })
        ));
        assert!(matches!(
            cfg.build_sequence(&State::Unit, &[bandit_transition(5, 0.0)], None),
            Err(ModelError::BadAction { index: 5, num_actions: 5 })
        ));
        assert!(matches!(
            cfg.build_sequence(&State::Unit, &[], Some(&[(State::Unit, 0)])),
            Err(ModelError::HistoryDisabled)
        ));
    }

    #[test]
    fn history_rows_are_marked_and_extend_the_context() {
        let cfg = ModelConfig {
            with_history: true,
            ..bandit_config()
        };
        let seq = cfg
            .build_sequence(
                &State::Unit,
                &[bandit_transition(1, 0.4)],
                Some(&[(State::Unit, 3), (State::Unit, 0)]),
            )
            .unwrap();
        assert_eq!(seq.row_width(), 9);
        assert_eq!(seq.num_context(), 3);
        // Dataset row carries type bit 0, history rows type bit 1 with
        // zeroed next-state/reward slots.
        assert_eq!(seq.dataset_row(0), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.4, 0.0]);
        assert_eq!(seq.history_row(0), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(seq.history_row(1), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);

        let model = ModelState::new(cfg, &Rng::new(5)).unwrap();
        let prefixes = model.predict_prefixes(&seq).unwrap();
        assert_eq!(prefixes.len(), 4);
    }

    #[test]
    fn fresh_model_is_uniform_for_any_context() {
        let model = ModelState::new(bandit_config(), &Rng::new(7)).unwrap();
        let mut rng = Rng::new(40);
        let seq = model
            .config()
            .build_sequence(&State::Unit, &random_dataset(6, &mut rng), None)
            .unwrap();
        for p in model.predict_prefixes(&seq).unwrap() {
            assert_eq!(p, vec![0.2; 5], "zeroed head must give exactly uniform");
        }
    }

    #[test]
    fn empty_dataset_yields_single_prior_prediction() {
        let model = ModelState::new(bandit_config(), &Rng::new(7)).unwrap();
        let seq = model.config().build_sequence(&State::Unit, &[], None).unwrap();
        let prefixes = model.predict_prefixes(&seq).unwrap();
        assert_eq!(prefixes.len(), 1);
        assert_eq!(prefixes[0].len(), 5);
    }

    /// Give the model non-trivial outputs: random weights everywhere,
    /// including the head.
    fn perturbed_model(seed: u64) -> ModelState {
        let mut model = ModelState::new(bandit_config(), &Rng::new(seed)).unwrap();
        let mut rng = Rng::new(seed ^ 0x5eed);
        for (_, t) in model.parameters_mut() {
            for v in t.values_mut() {
                *v += 0.3 * rng.normal();
            }
        }
        model
    }

    #[test]
    fn predictions_are_causal_bit_for_bit() {
        let model = perturbed_model(11);
        let mut rng = Rng::new(41);
        let data = random_dataset(6, &mut rng);
        let base = model
            .config()
            .build_sequence(&State::Unit, &data, None)
            .unwrap();
        let base_pred = model.predict_prefixes(&base).unwrap();
        for changed in [3usize, 5] {
            let mut edited = data.clone();
            edited[changed].reward += 1.0;
            edited[changed].action = (edited[changed].action + 1) % 5;
            let seq = model
                .config()
                .build_sequence(&State::Unit, &edited, None)
                .unwrap();
            let pred = model.predict_prefixes(&seq).unwrap();
            for j in 0..=changed {
                for (a, b) in base_pred[j].iter().zip(&pred[j]) {
                    assert_eq!(a.to_bits(), b.to_bits(), "p̂_{j} saw row {changed}");
                }
            }
        }
    }

    #[test]
    fn full_context_prediction_is_bit_identical_under_permutation() {
        let model = perturbed_model(13);
        let mut rng = Rng::new(42);
        let data = random_dataset(7, &mut rng);
        let seq = model
            .config()
            .build_sequence(&State::Unit, &data, None)
            .unwrap();
        let base = model.predict_prefixes(&seq).unwrap().pop().unwrap();
        let mut orders: Vec<Vec<usize>> =
            (0..3).map(|_| rng.permutation(data.len())).collect();
        orders.push((0..data.len()).rev().collect());
        for order in orders {
            let permuted: Vec<Transition> = order.iter().map(|&i| data[i].clone()).collect();
            let seq = model
                .config()
                .build_sequence(&State::Unit, &permuted, None)
                .unwrap();
            let last = model.predict_prefixes(&seq).unwrap().pop().unwrap();
            for (a, b) in base.iter().zip(&last) {
                assert_eq!(a.to_bits(), b.to_bits(), "order {order:?} leaked in");
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let model = perturbed_model(17);
        let mut rng = Rng::new(43);
        let data = random_dataset(3, &mut rng);
        let seq = model
            .config()
            .build_sequence(&State::Unit, &data, None)
            .unwrap();
        let label = 2;

        let loss_of = |m: &ModelState| {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape);
            let loss = m.loss_node(&mut tape, &bound, &seq, label).unwrap();
            tape.values(loss)[0]
        };

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let loss = model.loss_node(&mut tape, &bound, &seq, label).unwrap();
        tape.backward(loss).unwrap();

        for (i, (name, tensor)) in model.parameters().iter().enumerate() {
            let analytic = tape.grad(bound[i]).unwrap().to_vec();
            let x0 = tensor.values().to_vec();
            let mut f = |xs: &[f64]| {
                let mut m = model.clone();
                m.parameters_mut()[i].1.values_mut().copy_from_slice(xs);
                loss_of(&m)
            };
            let numeric = gradcheck::numeric_grad(&mut f, &x0, 1e-5);
            gradcheck::check(&analytic, &numeric, 1e-7, 1e-4)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn loss_node_agrees_with_direct_prefix_loss() {
        for include_zero in [true, false] {
            let mut model = perturbed_model(19);
            model.config.include_prefix_zero = include_zero;
            let mut rng = Rng::new(44);
            let data = random_dataset(5, &mut rng);
            let seq = model
                .config()
                .build_sequence(&State::Unit, &data, None)
                .unwrap();
            let direct = prefix_loss(&model.predict_prefixes(&seq).unwrap(), 1, include_zero);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let node = model.loss_node(&mut tape, &bound, &seq, 1).unwrap();
            let on_tape = tape.values(node)[0];
            assert!(
                (direct - on_tape).abs() < 1e-12,
                "{include_zero}: {direct} vs {on_tape}"
            );
        }
    }

    #[test]
    fn prefix_loss_known_values() {
        let uniform = vec![vec![0.2; 5]; 11];
        assert!((prefix_loss(&uniform, 3, true) - 11.0 * 5.0f64.ln()).abs() < 1e-12);
        assert!((prefix_loss(&uniform, 3, false) - 10.0 * 5.0f64.ln()).abs() < 1e-12);

        let mut perfect = vec![vec![0.0; 5]; 4];
        for p in &mut perfect {
            p[2] = 1.0;
        }
        assert_eq!(prefix_loss(&perfect, 2, true), 0.0);

        let halves = vec![vec![0.5, 0.5]; 2];
        assert!((prefix_loss(&halves, 1, true) - 2.0 * 2.0f64.ln()).abs() < 1e-12);

        // A zero probability clamps instead of producing infinity.
        let zero = vec![vec![1.0, 0.0]];
        assert!((prefix_loss(&zero, 1, true) + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn offline_action_breaks_ties_toward_lowest_index() {
        let model = ModelState::new(bandit_config(), &Rng::new(3)).unwrap();
        assert_eq!(model.act_offline(&State::Unit, &[]).unwrap(), 0);
    }

    #[test]
    fn online_actions_match_the_distribution_and_the_seed() {
        let model = ModelState::new(bandit_config(), &Rng::new(3)).unwrap();
        let mut rng = Rng::new(90);
        let draws = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            counts[model.act_online(&State::Unit, &[], None, &mut rng).unwrap()] += 1;
        }
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 4 degrees of freedom, critical value at p = 0.01.
        assert!(chi2 < 13.277, "chi2 {chi2} counts {counts:?}");

        let run = |seed: u64| {
            let mut rng = Rng::new(seed);
            (0..32)
                .map(|_| model.act_online(&State::Unit, &[], None, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn parameter_count_matches_hand_derived_values() {
        // Hand count for row width 8, embed 32, 4 layers:
        //   embed 8*32+32 = 288
        //   per layer: ln 64+64, attention 4*(1024+32), mlp 4096+128+4096+32
        //            = 12704, times 4 = 50816
        //   final norm 64, head 32*5+5 = 165
        let cfg = ModelConfig {
            embed_dim: 32,
            n_layers: 4,
            n_heads: 4,
            ..bandit_config()
        };
        let model = ModelState::new(cfg, &Rng::new(0)).unwrap();
        assert_eq!(model.parameter_count(), 288 + 50_816 + 64 + 165);

        let small = ModelState::new(bandit_config(), &Rng::new(0)).unwrap();
        // row width 8, embed 8, 2 layers: 64+8 + 2*(12*64+13*8) + 16 + 45.
        assert_eq!(small.parameter_count(), 72 + 2 * 872 + 16 + 45);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = perturbed_model(23);
        model.save(&path).unwrap();
        let loaded = ModelState::load(&path).unwrap();
        assert_eq!(loaded.config(), model.config());

        let mut rng = Rng::new(45);
        let seq = model
            .config()
            .build_sequence(&State::Unit, &random_dataset(4, &mut rng), None)
            .unwrap();
        let a = model.predict_prefixes(&seq).unwrap();
        let b = loaded.predict_prefixes(&seq).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            for (x, y) in pa.iter().zip(pb) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_load_validates_names_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let model = ModelState::new(bandit_config(), &Rng::new(1)).unwrap();

        let path = dir.path().join("missing.json");
        model.save(&path).unwrap();
        let mut file: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let tensors = file["tensors"].as_array_mut().unwrap();
        tensors.retain(|t| t["name"] != "head.w");
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(matches!(
            ModelState::load(&path),
            Err(ModelError::MissingTensor(name)) if name == "head.w"
        ));

        let path = dir.path().join("shape.json");
        model.save(&path).unwrap();
        let mut file: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        file["tensors"][0]["shape"] = serde_json::json!([4, 4]);
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(matches!(
            ModelState::load(&path),
            Err(ModelError::TensorShape { .. })
        ));

        let path = dir.path().join("extra.json");
        model.save(&path).unwrap();
        let mut file: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let extra = serde_json::json!({"name": "stray", "shape": [1], "data": [0.0]});
        file["tensors"].as_array_mut().unwrap().push(extra);
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(matches!(
            ModelState::load(&path),
            Err(ModelError::UnexpectedTensor(name)) if name == "stray"
        ));
    }
}
