//! Detector training: proximal policy optimization over labeled query
//! sequences, with gradients flowing through the policy/value heads and the
//! recurrent cell alike.
//!
//! Rollouts run on the plain f64 path; each update epoch re-forwards the
//! batch on a tape at the current parameters, so the clipped-surrogate
//! gradient is exact rather than approximated through a frozen recurrence.
//! A shared sliding window penalizes degenerate always-same-action policies.

use std::collections::VecDeque;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::detector::{
    fused_step, tape_fused_step, DetectorParams, DetectorState, DetectorVariant,
};
use crate::linalg::{self, Adam, Mat};
use crate::tape::{Tape, Var};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("reward ordering violated: need bias > miss > max(hit, pass, false-alarm), got bias {p_bias}, miss {w_fn}, others max {others}")]
    InvalidRewardOrdering { p_bias: f64, w_fn: f64, others: f64 },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("training set is empty")]
    EmptyTrainingSet,
}

/// Per-decision reward magnitudes. Construction enforces
/// `p_bias > w_fn > max(w_tp, w_tn, w_fp)`: missing an attack must hurt more
/// than any single correct call pays, and collapsing to one action must hurt
/// more still.
#[derive(Debug, Clone, Copy)]
pub struct RewardConfig {
    w_tp: f64,
    w_tn: f64,
    w_fp: f64,
    w_fn: f64,
    p_bias: f64,
}

impl RewardConfig {
    pub fn new(w_tp: f64, w_tn: f64, w_fp: f64, w_fn: f64, p_bias: f64) -> Result<Self, PpoError> {
        let others = w_tp.max(w_tn).max(w_fp);
        if !(p_bias > w_fn && w_fn > others) {
            return Err(PpoError::InvalidRewardOrdering { p_bias, w_fn, others });
        }
        Ok(RewardConfig { w_tp, w_tn, w_fp, w_fn, p_bias })
    }

    pub fn bias_penalty(&self) -> f64 {
        self.p_bias
    }

    /// Reward for choosing `action` (1 = flag as attack) on a user whose
    /// ground truth is `label`.
    pub fn reward(&self, label: u8, action: usize) -> f64 {
        match (label, action) {
            (1, 1) => self.w_tp,
            (0, 0) => self.w_tn,
            (0, 1) => -self.w_fp,
            (1, 0) => -self.w_fn,
            _ => unreachable!("label is binary"),
        }
    }
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig::new(1.0, 1.0, 1.0, 2.0, 3.0).expect("defaults satisfy the ordering")
    }
}

/// Sliding window over the last `cap` decisions, shared across a batch, that
/// detects a policy collapsing onto one action. The penalty only engages once
/// the window is full.
#[derive(Debug, Clone)]
pub struct BiasWindow {
    buf: VecDeque<usize>,
    cap: usize,
    threshold: f64,
}

impl BiasWindow {
    pub fn new(cap: usize, threshold: f64) -> Self {
        BiasWindow { buf: VecDeque::with_capacity(cap), cap, threshold }
    }

    /// Push a decision; true means the window is full and dominated by the
    /// action just pushed.
    pub fn push_and_check(&mut self, action: usize) -> bool {
        if self.buf.len() == self.cap {
            self.buf.pop_front();
        }
        self.buf.push_back(action);
        if self.buf.len() < self.cap {
            return false;
        }
        let same = self.buf.iter().filter(|&&a| a == action).count();
        same as f64 / self.cap as f64 > self.threshold
    }
}

/// Policy and value heads reading the detector hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValueHeads {
    pub w_p: Mat,
    pub b_p: Vec<f64>,
    pub w_v: Mat,
    pub b_v: Vec<f64>,
}

impl PolicyValueHeads {
    /// Policy weights start near zero so the initial policy is near-uniform
    /// and exploration is not strangled by the random init.
    pub fn init(hidden_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let glorot = |rows: usize, cols: usize, scale: f64, rng: &mut ChaCha20Rng| {
            let limit = (6.0 / (rows + cols) as f64).sqrt() * scale;
            Mat::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
        };
        PolicyValueHeads {
            w_p: glorot(2, hidden_dim, 0.01, rng),
            b_p: vec![0.0; 2],
            w_v: glorot(1, hidden_dim, 1.0, rng),
            b_v: vec![0.0; 1],
        }
    }

    pub fn tensor_slices(&self) -> Vec<&[f64]> {
        vec![self.w_p.data(), &self.b_p, self.w_v.data(), &self.b_v]
    }

    pub fn tensor_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w_p.data_mut(), &mut self.b_p, self.w_v.data_mut(), &mut self.b_v]
    }

    /// Policy distribution and value estimate for one hidden state.
    pub fn forward(&self, hidden: &[f64]) -> ([f64; 2], f64) {
        let logits_v = linalg::matvec(&self.w_p, hidden);
        let logits = [logits_v[0] + self.b_p[0], logits_v[1] + self.b_p[1]];
        let probs = linalg::softmax(&logits);
        let value = linalg::dot(self.w_v.row(0), hidden) + self.b_v[0];
        ([probs[0], probs[1]], value)
    }
}

struct TapeHeads {
    w_p: Var,
    b_p: Var,
    w_v: Var,
    b_v: Var,
}

impl PolicyValueHeads {
    fn leaves(&self, tape: &mut Tape) -> TapeHeads {
        TapeHeads {
            w_p: tape.leaf(self.w_p.data().to_vec()),
            b_p: tape.leaf(self.b_p.clone()),
            w_v: tape.leaf(self.w_v.data().to_vec()),
            b_v: tape.leaf(self.b_v.clone()),
        }
    }
}

/// A query sequence already embedded, with its detection label.
#[derive(Debug, Clone)]
pub struct LabeledSequence {
    pub user_id: usize,
    pub label: u8,
    pub embeddings: Vec<Vec<f64>>,
}

/// All PPO knobs in one place.
#[derive(Debug, Clone)]
pub struct PpoConfig {
    pub episodes: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub update_epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub grad_clip: f64,
    pub bias_window: usize,
    pub bias_threshold: f64,
    pub hidden_dim: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            episodes: 150,
            batch_size: 12,
            lr: 3e-3,
            clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            update_epochs: 4,
            gamma: 0.99,
            gae_lambda: 0.95,
            grad_clip: 1.0,
            bias_window: 64,
            bias_threshold: 0.9,
            hidden_dim: 32,
        }
    }
}

/// Generalized advantage estimation. `bootstrap_value` stands in for the
/// value beyond the horizon (0 for truly terminal sequences).
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t_len = rewards.len();
    let mut advantages = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        let next_v = if t + 1 < t_len { values[t + 1] } else { bootstrap_value };
        let delta = rewards[t] + gamma * next_v - values[t];
        acc = delta + gamma * lambda * acc;
        advantages[t] = acc;
    }
    let returns: Vec<f64> = advantages.iter().zip(values).map(|(&a, &v)| a + v).collect();
    (advantages, returns)
}

/// One sequence's rollout bookkeeping; embeddings stay in the batch by index.
#[derive(Debug, Clone)]
struct Trajectory {
    seq_index: usize,
    actions: Vec<usize>,
    old_log_probs: Vec<f64>,
    values: Vec<f64>,
    rewards: Vec<f64>,
    bootstrap_value: f64,
}

/// Sample actions for a batch on the f64 path, assigning per-step rewards.
/// The bias window threads through users in batch order, step order.
fn rollout(
    params: &DetectorParams,
    heads: &PolicyValueHeads,
    variant: DetectorVariant,
    batch: &[&LabeledSequence],
    reward_cfg: &RewardConfig,
    ppo: &PpoConfig,
    rng: &mut ChaCha20Rng,
) -> Vec<Trajectory> {
    let mut window = BiasWindow::new(ppo.bias_window, ppo.bias_threshold);
    let input_dim = params.input_dim();
    let hidden_dim = params.hidden_dim();
    batch
        .iter()
        .enumerate()
        .map(|(seq_index, seq)| {
            let mut state = DetectorState::new(input_dim, hidden_dim);
            let mut actions = Vec::with_capacity(seq.embeddings.len());
            let mut old_log_probs = Vec::with_capacity(seq.embeddings.len());
            let mut values = Vec::with_capacity(seq.embeddings.len());
            let mut rewards = Vec::with_capacity(seq.embeddings.len());
            for emb in &seq.embeddings {
                fused_step(params, variant, &mut state, emb);
                let (probs, value) = heads.forward(&state.hidden);
                let action = if rng.gen::<f64>() < probs[0] { 0 } else { 1 };
                let biased = window.push_and_check(action);
                let r = if biased {
                    -reward_cfg.bias_penalty()
                } else {
                    reward_cfg.reward(seq.label, action)
                };
                actions.push(action);
                old_log_probs.push(probs[action].ln());
                values.push(value);
                rewards.push(r);
                state.prev_action_probs = probs;
            }
            Trajectory {
                seq_index,
                actions,
                old_log_probs,
                values,
                rewards,
                bootstrap_value: 0.0,
            }
        })
        .collect()
}

/// Losses measured at the parameters a tape pass started from.
#[derive(Debug, Clone, Copy, Default)]
struct LossBreakdown {
    policy: f64,
    value: f64,
    entropy: f64,
}

/// Re-forward the batch on a tape and assemble the clipped PPO objective.
/// Returns the scalar loss root plus the component breakdown.
#[allow(clippy::too_many_arguments)]
fn tape_loss(
    tape: &mut Tape,
    params: &DetectorParams,
    heads: &PolicyValueHeads,
    variant: DetectorVariant,
    batch: &[&LabeledSequence],
    trajectories: &[Trajectory],
    advantages: &[Vec<f64>],
    returns: &[Vec<f64>],
    ppo: &PpoConfig,
) -> (Var, Vec<Var>, LossBreakdown) {
    let input_dim = params.input_dim();
    let hidden_dim = params.hidden_dim();
    let tp = params.leaves(tape);
    let th = heads.leaves(tape);

    let mut policy_terms: Option<Var> = None;
    let mut value_terms: Option<Var> = None;
    let mut entropy_terms: Option<Var> = None;
    let mut total_steps = 0usize;

    for traj in trajectories {
        let seq = batch[traj.seq_index];
        let mut hidden = tape.leaf(vec![0.0; hidden_dim]);
        let mut prev_emb = tape.leaf(vec![0.0; input_dim]);
        let mut prev_probs = tape.leaf(vec![0.5, 0.5]);
        for (t, emb) in seq.embeddings.iter().enumerate() {
            let emb_leaf = tape.leaf(emb.clone());
            hidden = tape_fused_step(
                tape, &tp, variant, input_dim, hidden_dim, hidden, prev_emb, prev_probs, emb_leaf,
            );
            let logits_lin = tape.matvec(th.w_p, hidden, 2, hidden_dim);
            let logits = tape.add(logits_lin, th.b_p);
            let log_probs = tape.log_softmax(logits);
            let probs = tape.softmax(logits);

            // ratio against the rollout policy
            let logp = tape.pick(log_probs, traj.actions[t]);
            let old = tape.scalar_leaf(traj.old_log_probs[t]);
            let diff = tape.sub(logp, old);
            let ratio = tape.exp(diff);
            let adv = advantages[traj.seq_index][t];
            let surr1 = tape.scale(ratio, adv);
            let clipped = tape.clamp(ratio, 1.0 - ppo.clip, 1.0 + ppo.clip);
            let surr2 = tape.scale(clipped, adv);
            let surr = tape.min_pair(surr1, surr2);
            policy_terms = Some(match policy_terms {
                None => surr,
                Some(acc) => tape.add(acc, surr),
            });

            // value regression against the empirical return
            let value_lin = tape.matvec(th.w_v, hidden, 1, hidden_dim);
            let value = tape.add(value_lin, th.b_v);
            let target = tape.scalar_leaf(returns[traj.seq_index][t]);
            let err = tape.sub(value, target);
            let sq = tape.hadamard(err, err);
            value_terms = Some(match value_terms {
                None => sq,
                Some(acc) => tape.add(acc, sq),
            });

            // policy entropy bonus
            let plogp = tape.dot(probs, log_probs);
            entropy_terms = Some(match entropy_terms {
                None => plogp,
                Some(acc) => tape.add(acc, plogp),
            });

            total_steps += 1;
            prev_emb = emb_leaf;
            prev_probs = probs;
        }
    }

    let inv_n = 1.0 / total_steps as f64;
    let policy_sum = policy_terms.expect("nonempty batch");
    let value_sum = value_terms.expect("nonempty batch");
    let neg_entropy_sum = entropy_terms.expect("nonempty batch");

    // minimize: -E[min surr] + c_v E[(v-R)^2] - c_e E[entropy]
    let policy_loss = tape.scale(policy_sum, -inv_n);
    let value_loss = tape.scale(value_sum, ppo.value_coef * inv_n);
    // entropy = -Σ p log p; bonus subtracts c_e * entropy, i.e. adds
    // c_e * Σ p log p / n
    let entropy_bonus = tape.scale(neg_entropy_sum, ppo.entropy_coef * inv_n);
    let partial = tape.add(policy_loss, value_loss);
    let loss = tape.add(partial, entropy_bonus);

    let breakdown = LossBreakdown {
        policy: tape.scalar(policy_loss),
        value: tape.scalar(value_loss) / ppo.value_coef,
        entropy: -tape.scalar(neg_entropy_sum) * inv_n,
    };

    let mut leaves = DetectorParams::leaf_vars(&tp);
    leaves.extend([th.w_p, th.b_p, th.w_v, th.b_v]);
    (loss, leaves, breakdown)
}

/// One PPO update: several epochs of tape re-forward, global-norm-clipped
/// Adam steps on every tensor. Returns the loss breakdown at entry.
fn ppo_update(
    params: &mut DetectorParams,
    heads: &mut PolicyValueHeads,
    variant: DetectorVariant,
    batch: &[&LabeledSequence],
    trajectories: &[Trajectory],
    ppo: &PpoConfig,
    optimizers: &mut [Adam],
) -> LossBreakdown {
    // advantages and returns from the rollout's value estimates
    let mut advantages: Vec<Vec<f64>> = Vec::with_capacity(trajectories.len());
    let mut returns: Vec<Vec<f64>> = Vec::with_capacity(trajectories.len());
    for traj in trajectories {
        let (a, r) =
            gae(&traj.rewards, &traj.values, traj.bootstrap_value, ppo.gamma, ppo.gae_lambda);
        advantages.push(a);
        returns.push(r);
    }
    // normalize advantages across the whole batch
    let flat: Vec<f64> = advantages.iter().flatten().copied().collect();
    let mean = linalg::mean(&flat);
    let var = linalg::mean(&flat.iter().map(|a| (a - mean) * (a - mean)).collect::<Vec<_>>());
    let std = var.sqrt().max(1e-8);
    for adv in advantages.iter_mut() {
        for a in adv.iter_mut() {
            *a = (*a - mean) / std;
        }
    }

    let mut first = LossBreakdown::default();
    for epoch in 0..ppo.update_epochs {
        let mut tape = Tape::new();
        let (loss, leaves, breakdown) = tape_loss(
            &mut tape, params, heads, variant, batch, trajectories, &advantages, &returns, ppo,
        );
        if epoch == 0 {
            first = breakdown;
        }
        let grads = tape.backward(loss);

        let mut grad_vecs: Vec<Vec<f64>> =
            leaves.iter().map(|&v| grads.get(v).to_vec()).collect();
        let norm: f64 = grad_vecs
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > ppo.grad_clip {
            let scale = ppo.grad_clip / norm;
            for g in grad_vecs.iter_mut() {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
        }

        let mut slices = params.tensor_slices_mut();
        slices.extend(heads.tensor_slices_mut());
        for ((slice, grad), opt) in slices.into_iter().zip(&grad_vecs).zip(optimizers.iter_mut()) {
            opt.step(slice, grad);
        }
    }
    first
}

/// Deterministic detector decisions (argmax) for a sequence; one per step.
pub fn decision_probs(
    params: &DetectorParams,
    heads: &PolicyValueHeads,
    variant: DetectorVariant,
    embeddings: &[Vec<f64>],
) -> Vec<[f64; 2]> {
    let mut state = DetectorState::new(params.input_dim(), params.hidden_dim());
    let mut out = Vec::with_capacity(embeddings.len());
    for emb in embeddings {
        fused_step(params, variant, &mut state, emb);
        let (probs, _) = heads.forward(&state.hidden);
        out.push(probs);
        state.prev_action_probs = probs;
    }
    out
}

/// Final-step argmax classification of each sequence.
pub fn evaluate(
    params: &DetectorParams,
    heads: &PolicyValueHeads,
    variant: DetectorVariant,
    sequences: &[LabeledSequence],
) -> Vec<u8> {
    sequences
        .iter()
        .map(|seq| {
            let probs = decision_probs(params, heads, variant, &seq.embeddings);
            let last = probs.last().expect("nonempty sequence");
            (last[1] > last[0]) as u8
        })
        .collect()
}

/// Binary confusion counts; the positive class is "attack".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(preds: &[u8], labels: &[u8]) -> Confusion {
        let mut c = Confusion::default();
        for (&p, &y) in preds.iter().zip(labels) {
            match (y, p) {
                (1, 1) => c.tp += 1,
                (0, 0) => c.tn += 1,
                (0, 1) => c.fp += 1,
                (1, 0) => c.fn_ += 1,
                _ => unreachable!("labels are binary"),
            }
        }
        c
    }

    fn ratio(num: usize, denom: usize) -> f64 {
        if denom == 0 {
            0.0
        } else {
            num as f64 / denom as f64
        }
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }
}

/// One training-log row.
#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub episode: usize,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub val_f1: f64,
}

/// Result of a training run: the best-on-validation snapshot plus the log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DetectorParams,
    pub heads: PolicyValueHeads,
    pub log: Vec<EpisodeLog>,
    pub best_val_f1: f64,
}

/// Train a detector with PPO; keeps the parameters that scored the best
/// validation F1 across episodes.
pub fn train_detector(
    train: &[LabeledSequence],
    val: &[LabeledSequence],
    variant: DetectorVariant,
    reward_cfg: &RewardConfig,
    ppo: &PpoConfig,
    seed: u64,
) -> Result<TrainOutcome, PpoError> {
    if train.is_empty() {
        return Err(PpoError::EmptyTrainingSet);
    }
    let input_dim = train[0].embeddings[0].len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = DetectorParams::init(input_dim, ppo.hidden_dim, &mut rng);
    let mut heads = PolicyValueHeads::init(ppo.hidden_dim, &mut rng);

    let mut optimizers: Vec<Adam> = params
        .tensor_slices()
        .into_iter()
        .chain(heads.tensor_slices())
        .map(|s| Adam::new(s.len(), ppo.lr))
        .collect();

    let val_labels: Vec<u8> = val.iter().map(|s| s.label).collect();
    let mut best_val_f1 = -1.0;
    let mut best = (params.clone(), heads.clone());
    let mut log = Vec::with_capacity(ppo.episodes);

    for episode in 0..ppo.episodes {
        let take = ppo.batch_size.min(train.len());
        let batch: Vec<&LabeledSequence> = rand::seq::index::sample(&mut rng, train.len(), take)
            .iter()
            .map(|i| &train[i])
            .collect();
        let trajectories =
            rollout(&params, &heads, variant, &batch, reward_cfg, ppo, &mut rng);
        let step_count: usize = trajectories.iter().map(|t| t.rewards.len()).sum();
        let mean_reward = trajectories
            .iter()
            .flat_map(|t| t.rewards.iter())
            .sum::<f64>()
            / step_count as f64;

        let breakdown =
            ppo_update(&mut params, &mut heads, variant, &batch, &trajectories, ppo, &mut optimizers);

        let val_f1 = if val.is_empty() {
            0.0
        } else {
            let preds = evaluate(&params, &heads, variant, val);
            Confusion::from_predictions(&preds, &val_labels).f1()
        };
        if val_f1 > best_val_f1 {
            best_val_f1 = val_f1;
            best = (params.clone(), heads.clone());
        }
        log.push(EpisodeLog {
            episode,
            mean_reward,
            policy_loss: breakdown.policy,
            value_loss: breakdown.value,
            entropy: breakdown.entropy,
            val_f1,
        });
    }

    Ok(TrainOutcome { params: best.0, heads: best.1, log, best_val_f1: best_val_f1.max(0.0) })
}

pub fn save_training_log(path: &Path, log: &[EpisodeLog]) -> Result<(), PpoError> {
    let mut out = String::from("episode,mean_reward,policy_loss,value_loss,entropy,val_f1\n");
    for row in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            row.episode, row.mean_reward, row.policy_loss, row.value_loss, row.entropy, row.val_f1
        ));
    }
    let mut f = std::fs::File::create(path)
        .map_err(|source| PpoError::Io { path: path.display().to_string(), source })?;
    f.write_all(out.as_bytes())
        .map_err(|source| PpoError::Io { path: path.display().to_string(), source })
}

const DETECTOR_MAGIC: &str = "ATOMdetv1";

fn write_mat(out: &mut String, m: &Mat) {
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

fn write_vec(out: &mut String, v: &[f64]) {
    let row: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    out.push_str(&row.join(" "));
    out.push('\n');
}

/// Serialize the detector cell and heads; text format, exact round-trip.
pub fn save_detector(
    path: &Path,
    params: &DetectorParams,
    heads: &PolicyValueHeads,
) -> Result<(), PpoError> {
    let mut out = format!("{DETECTOR_MAGIC}\n{} {}\n", params.input_dim(), params.hidden_dim());
    write_mat(&mut out, &params.w_g);
    write_vec(&mut out, &params.b_g);
    write_mat(&mut out, &params.w_z);
    write_mat(&mut out, &params.u_z);
    write_vec(&mut out, &params.b_z);
    write_mat(&mut out, &params.w_r);
    write_mat(&mut out, &params.u_r);
    write_vec(&mut out, &params.b_r);
    write_mat(&mut out, &params.w_h);
    write_mat(&mut out, &params.u_h);
    write_vec(&mut out, &params.b_h);
    write_mat(&mut out, &params.w_a);
    write_vec(&mut out, &params.b_a);
    write_mat(&mut out, &heads.w_p);
    write_vec(&mut out, &heads.b_p);
    write_mat(&mut out, &heads.w_v);
    write_vec(&mut out, &heads.b_v);
    let mut f = std::fs::File::create(path)
        .map_err(|source| PpoError::Io { path: path.display().to_string(), source })?;
    f.write_all(out.as_bytes())
        .map_err(|source| PpoError::Io { path: path.display().to_string(), source })
}

pub fn load_detector(path: &Path) -> Result<(DetectorParams, PolicyValueHeads), PpoError> {
    let pstr = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|source| PpoError::Io { path: pstr.clone(), source })?;
    let mut lines = text.lines();
    match lines.next() {
        Some(DETECTOR_MAGIC) => {}
        other => {
            return Err(PpoError::Format {
                path: pstr,
                msg: format!("bad magic {other:?}, expected {DETECTOR_MAGIC:?}"),
            })
        }
    }
    let dims_line = lines
        .next()
        .ok_or_else(|| PpoError::Format { path: pstr.clone(), msg: "missing dims".into() })?;
    let dims: Vec<usize> = dims_line
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| PpoError::Format {
            path: pstr.clone(),
            msg: format!("invalid dims line {dims_line:?}"),
        })?;
    let [input_dim, hidden_dim] = dims[..] else {
        return Err(PpoError::Format {
            path: pstr,
            msg: format!("expected 2 dims, found {}", dims.len()),
        });
    };

    let params = DetectorParams {
        w_g: read_mat(&mut lines, input_dim, 2 * input_dim, &pstr)?,
        b_g: read_row(&mut lines, input_dim, &pstr)?,
        w_z: read_mat(&mut lines, hidden_dim, input_dim, &pstr)?,
        u_z: read_mat(&mut lines, hidden_dim, hidden_dim, &pstr)?,
        b_z: read_row(&mut lines, hidden_dim, &pstr)?,
        w_r: read_mat(&mut lines, hidden_dim, input_dim, &pstr)?,
        u_r: read_mat(&mut lines, hidden_dim, hidden_dim, &pstr)?,
        b_r: read_row(&mut lines, hidden_dim, &pstr)?,
        w_h: read_mat(&mut lines, hidden_dim, input_dim, &pstr)?,
        u_h: read_mat(&mut lines, hidden_dim, hidden_dim, &pstr)?,
        b_h: read_row(&mut lines, hidden_dim, &pstr)?,
        w_a: read_mat(&mut lines, hidden_dim, 2, &pstr)?,
        b_a: read_row(&mut lines, hidden_dim, &pstr)?,
    };
    let heads = PolicyValueHeads {
        w_p: read_mat(&mut lines, 2, hidden_dim, &pstr)?,
        b_p: read_row(&mut lines, 2, &pstr)?,
        w_v: read_mat(&mut lines, 1, hidden_dim, &pstr)?,
        b_v: read_row(&mut lines, 1, &pstr)?,
    };
    Ok((params, heads))
}

fn read_row(lines: &mut std::str::Lines, cols: usize, path: &str) -> Result<Vec<f64>, PpoError> {
    let line = lines
        .next()
        .ok_or_else(|| PpoError::Format { path: path.to_string(), msg: "truncated".into() })?;
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| PpoError::Format {
            path: path.to_string(),
            msg: format!("invalid float row {line:?}"),
        })?;
    if vals.len() != cols {
        return Err(PpoError::Format {
            path: path.to_string(),
            msg: format!("expected {cols} values, found {}", vals.len()),
        });
    }
    Ok(vals)
}

fn read_mat(
    lines: &mut std::str::Lines,
    rows: usize,
    cols: usize,
    path: &str,
) -> Result<Mat, PpoError> {
    let mut rows_vec = Vec::with_capacity(rows);
    for _ in 0..rows {
        rows_vec.push(read_row(lines, cols, path)?);
    }
    Ok(Mat::from_rows(rows_vec))
}
