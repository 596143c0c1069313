//! Soft actor-critic with an identified-LQR gain penalty.
//!
//! The training loop interleaves three things per environment step:
//! near-origin data collection for system identification, a transition into
//! the replay buffer, and one SAC gradient step (value, twin Q, actor,
//! target EMA). Once a gain `K̂` is available the actor loss also pulls the
//! Jacobian of the deterministic action map towards `−K̂`.

use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{env_reset, env_step, linearize_env, EnvError, EnvSpec};
use crate::nn::{AdamState, GaussianPolicy, Mlp, MlpGrads, NnError};
use crate::numerics::Matrix;
use crate::rng::{stream, Stream};
use crate::sysid::{
    compute_gain, estimate_a, scaled_norm, ActionMode, GainEstimate, LinearModel, Phase, SysIdBuffer, SysIdError, SysIdReportRow,
    DEFAULT_RIDGE,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("replay buffer holds {available} transitions, {requested} requested")]
    InsufficientData { requested: usize, available: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    SysId(#[from] SysIdError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminated: bool,
}

/// Fixed-capacity ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Oldest to newest.
    pub fn iter_chronological(&self) -> impl DoubleEndedIterator<Item = &Transition> + '_ {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// Uniform sample of `k` distinct entries.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<Transition>, AgentError> {
        if k > self.items.len() {
            return Err(AgentError::InsufficientData {
                requested: k,
                available: self.items.len(),
            });
        }
        Ok(sample_indices(rng, self.items.len(), k).into_iter().map(|i| self.items[i].clone()).collect())
    }
}

/// A minibatch stacked into matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub states: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_states: Matrix,
    pub terminated: Vec<bool>,
}

impl Minibatch {
    pub fn from_transitions(batch: &[Transition]) -> Self {
        assert!(!batch.is_empty(), "minibatch must be nonempty");
        let stack = |f: &dyn Fn(&Transition) -> &Vec<f64>| {
            let cols = f(&batch[0]).len();
            let data: Vec<f64> = batch.iter().flat_map(|t| f(t).iter().copied()).collect();
            Matrix::new(batch.len(), cols, data).expect("uniform transition shapes")
        };
        Self {
            states: stack(&|t| &t.state),
            actions: stack(&|t| &t.action),
            rewards: batch.iter().map(|t| t.reward).collect(),
            next_states: stack(&|t| &t.next_state),
            terminated: batch.iter().map(|t| t.terminated).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Row-wise `[x ; u]`.
pub fn concat_columns(x: &Matrix, u: &Matrix) -> Matrix {
    let (rows, n) = x.shape();
    let m = u.cols();
    let mut out = Matrix::zeros(rows, n + m);
    for r in 0..rows {
        let row = out.row_mut(r);
        row[..n].copy_from_slice(x.row(r));
        row[n..].copy_from_slice(u.row(r));
    }
    out
}

/// Standard normal matrix.
pub fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::new(rows, cols, data).expect("sized")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacNets {
    pub value: Mlp,
    pub target_value: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub actor: GaussianPolicy,
    pub opt_value: AdamState,
    pub opt_q1: AdamState,
    pub opt_q2: AdamState,
    pub opt_actor: AdamState,
}

impl SacNets {
    pub fn init<R: Rng + ?Sized>(
        state_dim: usize,
        hidden: &[usize],
        action_low: &[f64],
        action_high: &[f64],
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let m = action_low.len();
        let dims = |input: usize, output: usize| {
            let mut d = vec![input];
            d.extend_from_slice(hidden);
            d.push(output);
            d
        };
        let value = Mlp::init(&dims(state_dim, 1), rng)?;
        let q1 = Mlp::init(&dims(state_dim + m, 1), rng)?;
        let q2 = Mlp::init(&dims(state_dim + m, 1), rng)?;
        let actor = GaussianPolicy::init(state_dim, hidden, action_low, action_high, rng)?;
        Ok(Self {
            target_value: value.clone(),
            opt_value: AdamState::new(value.param_count()),
            opt_q1: AdamState::new(q1.param_count()),
            opt_q2: AdamState::new(q2.param_count()),
            opt_actor: AdamState::new(actor.net().param_count()),
            value,
            q1,
            q2,
            actor,
        })
    }
}

fn column(v: &Matrix) -> Vec<f64> {
    (0..v.rows()).map(|r| v[(r, 0)]).collect()
}

/// `min(Q₁, Q₂)(x, a) − α·log π(a|x)` per state, for reparameterized
/// actions drawn with the given noise. Targets carry no gradient.
pub fn value_targets(nets: &SacNets, states: &Matrix, noise: &Matrix, alpha: f64) -> Result<Vec<f64>, NnError> {
    let sample = nets.actor.sample_batch(states, noise)?;
    let qa = concat_columns(states, &sample.actions);
    let q1 = column(nets.q1.forward_batch(&qa)?.output());
    let q2 = column(nets.q2.forward_batch(&qa)?.output());
    Ok((0..states.rows()).map(|b| q1[b].min(q2[b]) - alpha * sample.log_probs[b]).collect())
}

/// Single-state value target with a fresh action draw.
pub fn value_target<R: Rng + ?Sized>(x: &[f64], nets: &SacNets, alpha: f64, rng: &mut R) -> Result<f64, NnError> {
    let states = Matrix::new(1, x.len(), x.to_vec())?;
    let noise = normal_matrix(1, nets.actor.action_dim(), rng);
    Ok(value_targets(nets, &states, &noise, alpha)?[0])
}

/// Mean ½(V(x) − V̂)² and its gradient.
pub fn value_loss_and_grads(value: &Mlp, states: &Matrix, targets: &[f64]) -> Result<(f64, MlpGrads), NnError> {
    squared_loss(value, states, targets)
}

fn squared_loss(net: &Mlp, inputs: &Matrix, targets: &[f64]) -> Result<(f64, MlpGrads), NnError> {
    let batch = inputs.rows();
    let cache = net.forward_batch(inputs)?;
    let out = cache.output();
    let scale = 1.0 / batch as f64;
    let mut upstream = Matrix::zeros(batch, 1);
    let mut loss = 0.0;
    for b in 0..batch {
        let diff = out[(b, 0)] - targets[b];
        loss += 0.5 * diff * diff;
        upstream[(b, 0)] = diff * scale;
    }
    let (grads, _) = net.backward(&cache, &upstream)?;
    Ok((loss * scale, grads))
}

/// Soft Bellman targets `r + γ·(1 − terminated)·V̄(x')`.
pub fn q_targets(target_value: &Mlp, batch: &Minibatch, gamma: f64) -> Result<Vec<f64>, NnError> {
    let next = column(target_value.forward_batch(&batch.next_states)?.output());
    Ok((0..batch.len())
        .map(|b| {
            if batch.terminated[b] {
                batch.rewards[b]
            } else {
                batch.rewards[b] + gamma * next[b]
            }
        })
        .collect())
}

/// Mean ½(Q(x, a) − Q̂)² for one critic.
pub fn q_loss_and_grads(q: &Mlp, batch: &Minibatch, targets: &[f64]) -> Result<(f64, MlpGrads), NnError> {
    squared_loss(q, &concat_columns(&batch.states, &batch.actions), targets)
}

/// How the Jacobian target relates to the identified gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainSign {
    /// Target `−K̂`, matching the feedback `u = −K̂x`.
    Negative,
    /// Target `+K̂` as literally written in the loss.
    Positive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyGradient {
    Exact,
    FiniteDifference,
}

/// Everything the actor update needs to apply the gain penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct GainPenalty {
    /// Target Jacobian of the deterministic action map.
    pub target: Matrix,
    pub weight: f64,
    pub eta: f64,
    /// Coordinate scaling for the η-ball test (empty: Euclidean).
    pub norm_scale: Vec<f64>,
    pub gradient: PenaltyGradient,
}

impl GainPenalty {
    pub fn from_gain(
        gain: &GainEstimate,
        sign: GainSign,
        weight: f64,
        eta: f64,
        norm_scale: Vec<f64>,
        gradient: PenaltyGradient,
    ) -> Self {
        let target = match sign {
            GainSign::Negative => gain.k_hat.scale(-1.0),
            GainSign::Positive => gain.k_hat.clone(),
        };
        Self {
            target,
            weight,
            eta,
            norm_scale,
            gradient,
        }
    }

    /// The origin plus every batch state strictly inside the η-ball.
    pub fn eval_states(&self, states: &Matrix) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; states.cols()]];
        for r in 0..states.rows() {
            let x = states.row(r);
            if scaled_norm(x, &self.norm_scale) < self.eta {
                out.push(x.to_vec());
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ActorLoss {
    /// Mean of α·log π − min Q.
    pub loss: f64,
    /// Gain penalty value, when applied.
    pub penalty: Option<f64>,
    pub grads: MlpGrads,
}

/// Reparameterized actor loss with optional gain penalty.
pub fn actor_loss_and_grads(
    nets: &SacNets,
    states: &Matrix,
    noise: &Matrix,
    alpha: f64,
    penalty: Option<&GainPenalty>,
) -> Result<ActorLoss, NnError> {
    let batch = states.rows();
    let n = states.cols();
    let m = nets.actor.action_dim();
    let scale = 1.0 / batch as f64;
    let sample = nets.actor.sample_batch(states, noise)?;
    let qa = concat_columns(states, &sample.actions);
    let c1 = nets.q1.forward_batch(&qa)?;
    let c2 = nets.q2.forward_batch(&qa)?;
    let ones = Matrix::new(batch, 1, vec![scale; batch])?;
    let (_, dq1) = nets.q1.backward(&c1, &ones)?;
    let (_, dq2) = nets.q2.backward(&c2, &ones)?;
    let mut loss = 0.0;
    let mut d_action = Matrix::zeros(batch, m);
    for b in 0..batch {
        let (v1, v2) = (c1.output()[(b, 0)], c2.output()[(b, 0)]);
        let (q, dq) = if v1 <= v2 { (v1, &dq1) } else { (v2, &dq2) };
        loss += alpha * sample.log_probs[b] - q;
        for i in 0..m {
            d_action[(b, i)] = -dq[(b, n + i)];
        }
    }
    let d_log_prob = vec![alpha * scale; batch];
    let mut grads = nets.actor.backward_sample(&sample, &d_action, &d_log_prob)?;
    let mut penalty_value = None;
    if let Some(p) = penalty {
        let eval = p.eval_states(states);
        let (value, pg) = match p.gradient {
            PenaltyGradient::Exact => nets.actor.gain_penalty(&eval, &p.target, p.weight)?,
            PenaltyGradient::FiniteDifference => nets.actor.gain_penalty_fd(&eval, &p.target, p.weight, 1e-6)?,
        };
        grads.add_assign(&pg);
        penalty_value = Some(value);
    }
    Ok(ActorLoss {
        loss: loss * scale,
        penalty: penalty_value,
        grads,
    })
}

/// `ψ̄ ← τ·ψ + (1 − τ)·ψ̄`.
pub fn target_update(nets: &mut SacNets, tau: f64) {
    for (t, &o) in nets.target_value.params_mut().zip(nets.value.params().collect::<Vec<_>>().iter()) {
        *t = tau * o + (1.0 - tau) * *t;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub value_loss: f64,
    pub q1_loss: f64,
    pub q2_loss: f64,
    pub actor_loss: f64,
    pub gain_penalty: Option<f64>,
}

/// One gradient step on all networks. `noise` (batch × m) drives the
/// reparameterized actions of both the value target and the actor loss.
pub fn gradient_step(
    nets: &mut SacNets,
    batch: &Minibatch,
    noise: &Matrix,
    config: &TrainConfig,
    penalty: Option<&GainPenalty>,
    update_target: bool,
) -> Result<UpdateStats, NnError> {
    let lr = config.lr;
    let v_targets = value_targets(nets, &batch.states, noise, config.alpha)?;
    let (value_loss, gv) = value_loss_and_grads(&nets.value, &batch.states, &v_targets)?;
    nets.opt_value.step_mlp(&mut nets.value, &gv, lr);

    let q_hat = q_targets(&nets.target_value, batch, config.gamma)?;
    let (q1_loss, g1) = q_loss_and_grads(&nets.q1, batch, &q_hat)?;
    let (q2_loss, g2) = q_loss_and_grads(&nets.q2, batch, &q_hat)?;
    nets.opt_q1.step_mlp(&mut nets.q1, &g1, lr);
    nets.opt_q2.step_mlp(&mut nets.q2, &g2, lr);

    let actor = actor_loss_and_grads(nets, &batch.states, noise, config.alpha, penalty)?;
    nets.opt_actor.step_mlp(nets.actor.net_mut(), &actor.grads, lr);

    if update_target {
        target_update(nets, config.tau);
    }
    Ok(UpdateStats {
        value_loss,
        q1_loss,
        q2_loss,
        actor_loss: actor.loss,
        gain_penalty: actor.penalty,
    })
}

fn default_hidden() -> Vec<usize> {
    vec![16, 16]
}

/// Hidden layer sizes for the named environment.
pub fn hidden_layers_for(env_name: &str) -> Vec<usize> {
    match env_name {
        "cartpole" => vec![256, 256],
        "quad2d" => vec![256; 4],
        _ => default_hidden(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub total_steps: u64,
    pub gradient_steps: usize,
    pub target_update_interval: usize,
    pub hidden: Vec<usize>,
    pub sysid_enabled: bool,
    pub eta: f64,
    pub threshold_a: usize,
    pub threshold_b: usize,
    pub ridge: f64,
    /// Action-cost weight `R = lqr_r·I` in the DARE.
    pub lqr_r: f64,
    pub lambda_k: f64,
    pub gain_sign: GainSign,
    pub penalty_gradient: PenaltyGradient,
    /// Env steps between gain refinements once identification is done;
    /// 0 disables refinement.
    pub refit_interval: u64,
    /// Freshest near-origin transitions used by a refinement.
    pub refit_window: usize,
    /// Minimum exploratory action magnitude as a fraction of the bound.
    pub explore_floor: f64,
    /// Supplied by the enclosing run config.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha: 0.2,
            tau: 0.005,
            lr: 3e-4,
            batch_size: 256,
            buffer_capacity: 1_000_000,
            total_steps: 30_000,
            gradient_steps: 1,
            target_update_interval: 1,
            hidden: default_hidden(),
            sysid_enabled: true,
            eta: crate::sysid::DEFAULT_ETA,
            threshold_a: crate::sysid::DEFAULT_THRESHOLD,
            threshold_b: crate::sysid::DEFAULT_THRESHOLD,
            ridge: DEFAULT_RIDGE,
            lqr_r: 0.1,
            lambda_k: 1.0,
            gain_sign: GainSign::Negative,
            penalty_gradient: PenaltyGradient::Exact,
            refit_interval: 10_000,
            refit_window: 2_000,
            explore_floor: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_env(env_name: &str) -> Self {
        Self {
            hidden: hidden_layers_for(env_name),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let mut bad = Vec::new();
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            bad.push("gamma");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            bad.push("tau");
        }
        if !(self.lambda_k >= 0.0) {
            bad.push("lambda_k");
        }
        if !(self.lr > 0.0) {
            bad.push("lr");
        }
        if !(self.alpha >= 0.0) {
            bad.push("alpha");
        }
        if self.batch_size == 0 {
            bad.push("batch_size");
        }
        if self.buffer_capacity < self.batch_size {
            bad.push("buffer_capacity");
        }
        if self.target_update_interval == 0 {
            bad.push("target_update_interval");
        }
        if !(self.eta > 0.0) {
            bad.push("eta");
        }
        if !(self.ridge >= 0.0) {
            bad.push("ridge");
        }
        if !(self.lqr_r > 0.0) {
            bad.push("lqr_r");
        }
        if !(0.0..=1.0).contains(&self.explore_floor) {
            bad.push("explore_floor");
        }
        if self.hidden.iter().any(|&h| h == 0) {
            bad.push("hidden");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(AgentError::InvalidConfig(bad.join(", ")))
        }
    }

    pub fn lqr_r_matrix(&self, m: usize) -> Matrix {
        Matrix::identity(m).scale(self.lqr_r)
    }
}

/// One row per finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub env_step: u64,
    pub episode_return: f64,
    pub value_loss: Option<f64>,
    pub q1_loss: Option<f64>,
    pub q2_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub gain_penalty: Option<f64>,
    pub k_available: bool,
    pub dare_residual: Option<f64>,
}

pub const TRAIN_LOG_HEADER: &str =
    "env_step,episode_return,value_loss,q1_loss,q2_loss,actor_loss,gain_penalty,K_available,dare_residual";

pub fn write_train_log<W: Write>(mut w: W, rows: &[EpisodeLog]) -> std::io::Result<()> {
    use crate::csvfmt::{f64_cell, opt_f64};
    writeln!(w, "{TRAIN_LOG_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.env_step,
            f64_cell(r.episode_return),
            opt_f64(r.value_loss),
            opt_f64(r.q1_loss),
            opt_f64(r.q2_loss),
            opt_f64(r.actor_loss),
            opt_f64(r.gain_penalty),
            r.k_available,
            opt_f64(r.dare_residual)
        )?;
    }
    Ok(())
}

#[derive(Debug, Default)]
struct LossAccumulator {
    count: usize,
    value: f64,
    q1: f64,
    q2: f64,
    actor: f64,
    penalty_count: usize,
    penalty: f64,
}

impl LossAccumulator {
    fn add(&mut self, s: &UpdateStats) {
        self.count += 1;
        self.value += s.value_loss;
        self.q1 += s.q1_loss;
        self.q2 += s.q2_loss;
        self.actor += s.actor_loss;
        if let Some(p) = s.gain_penalty {
            self.penalty_count += 1;
            self.penalty += p;
        }
    }

    fn mean(total: f64, count: usize) -> Option<f64> {
        (count > 0).then(|| total / count as f64)
    }
}

/// Identified model and gain, as saved next to a policy checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSidecar {
    pub a_hat: Matrix,
    pub b_hat: Matrix,
    pub k_hat: Matrix,
    pub p: Matrix,
    pub schur_stable: bool,
    pub dare_residual: f64,
    pub timestamp: u64,
}

impl GainSidecar {
    pub fn new(model: &LinearModel, gain: &GainEstimate) -> Self {
        Self {
            a_hat: model.a_hat.clone(),
            b_hat: model.b_hat.clone(),
            k_hat: gain.k_hat.clone(),
            p: gain.p.clone(),
            schur_stable: gain.schur_stable,
            dare_residual: gain.dare_residual,
            timestamp: gain.timestamp,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Finalized policy (`π(0) = 0`).
    pub policy: GaussianPolicy,
    pub model: Option<LinearModel>,
    pub gain: Option<GainEstimate>,
    /// Env step at which a gain first became available.
    pub k_available_step: Option<u64>,
    pub log: Vec<EpisodeLog>,
    pub sysid_report: Vec<SysIdReportRow>,
    /// Offset subtracted by finalization.
    pub final_shift: Vec<f64>,
    /// Whether the finalized mean action at the origin needed clipping.
    pub shift_clipped: bool,
}

/// Subtracts the deterministic action at the origin so that `π(0) = 0`.
pub fn finalize_policy(policy: &mut GaussianPolicy) -> Result<Vec<f64>, NnError> {
    policy.finalize()
}

fn floor_action(u: &mut [f64], spec: &EnvSpec, floor: f64) {
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u_max = spec
        .action_bounds
        .low
        .iter()
        .zip(&spec.action_bounds.high)
        .map(|(l, h)| l.abs().max(h.abs()).powi(2))
        .sum::<f64>()
        .sqrt();
    let min = floor * u_max;
    if norm >= min || min == 0.0 {
        return;
    }
    if norm == 0.0 {
        u[0] = min;
    } else {
        u.iter_mut().for_each(|v| *v *= min / norm);
    }
    let clipped = spec.action_bounds.clip(u);
    u.copy_from_slice(&clipped);
}

/// Runs the full training loop and returns the finalized policy.
pub fn train(env: &EnvSpec, config: &TrainConfig) -> Result<TrainOutcome, AgentError> {
    train_with_checkpoints(env, config, 0, |_, _| {})
}

/// [`train`], handing the raw (unfinalized) actor to `on_checkpoint` every
/// `every` env steps. `every = 0` never calls it.
pub fn train_with_checkpoints<F>(
    env: &EnvSpec,
    config: &TrainConfig,
    every: u64,
    mut on_checkpoint: F,
) -> Result<TrainOutcome, AgentError>
where
    F: FnMut(u64, &GaussianPolicy),
{
    config.validate()?;
    env.validate()?;
    let (n, m) = (env.state_dim(), env.action_dim());
    let mut init_rng = stream(config.seed, Stream::Init);
    let mut env_rng = stream(config.seed, Stream::Env);
    let mut agent_rng = stream(config.seed, Stream::Agent);
    let mut nets = SacNets::init(n, &config.hidden, &env.action_bounds.low, &env.action_bounds.high, &mut init_rng)?;
    let mut replay = ReplayBuffer::new(config.buffer_capacity);
    let norm_scale = env.domain.half_widths();
    let mut sysid =
        SysIdBuffer::new(config.eta, config.threshold_a, config.threshold_b).with_norm_scale(norm_scale.clone());
    let truth = linearize_env(env).ok();
    let lqr_r = config.lqr_r_matrix(m);

    let mut model: Option<LinearModel> = None;
    let mut gain: Option<GainEstimate> = None;
    let mut k_available_step = None;
    let mut report = Vec::new();
    let mut b_attempt_at = config.threshold_b;
    let mut done_at: Option<u64> = None;
    let mut log = Vec::new();

    let mut x = env_reset(env, &mut env_rng);
    let mut episode_return = 0.0;
    let mut episode_len = 0usize;
    let mut losses = LossAccumulator::default();
    let mut grad_steps = 0usize;

    for step in 1..=config.total_steps {
        let mode = if config.sysid_enabled { sysid.action_mode(&x) } else { ActionMode::PolicyOnly };
        let action = match mode {
            ActionMode::Zero => vec![0.0; m],
            ActionMode::Explore | ActionMode::PolicyOnly => {
                let noise: Vec<f64> = (0..m).map(|_| agent_rng.sample::<f64, _>(StandardNormal)).collect();
                let mut u = nets.actor.sample(&x, &noise)?.action;
                if mode == ActionMode::Explore {
                    floor_action(&mut u, env, config.explore_floor);
                }
                u
            }
        };
        let result = env_step(env, &x, &action)?;
        let executed = env.action_bounds.clip(&action);
        if config.sysid_enabled {
            sysid.maybe_collect(&x, &executed, &result.next_state);
        }
        replay.push(Transition {
            state: x.clone(),
            action: executed,
            reward: result.reward,
            next_state: result.next_state.clone(),
            terminated: result.terminated,
        });
        episode_return += result.reward;
        episode_len += 1;

        if config.sysid_enabled {
            if sysid.ready_for_a() {
                if let Ok(a) = estimate_a(&sysid, config.ridge) {
                    report.push(SysIdReportRow::compare(Phase::CollectingA, &sysid, Some(&a), None, None, truth.as_ref()));
                    sysid.complete_phase_a();
                }
            } else if sysid.ready_for_b() && sysid.samples_b() >= b_attempt_at {
                let identified = LinearModel::identify(&sysid, config.ridge)
                    .and_then(|md| compute_gain(&md, &env.q_reward, &lqr_r, step).map(|g| (md, g)));
                match identified {
                    Ok((md, g)) => {
                        report.push(SysIdReportRow::compare(
                            Phase::Done,
                            &sysid,
                            Some(&md.a_hat),
                            Some(&md.b_hat),
                            Some(&g),
                            truth.as_ref(),
                        ));
                        sysid.complete_phase_b();
                        model = Some(md);
                        gain = Some(g);
                        k_available_step = Some(step);
                        done_at = Some(step);
                    }
                    Err(_) => b_attempt_at = sysid.samples_b() + (config.threshold_b / 10).max(1),
                }
            }
            if let (Some(start), true) = (done_at, config.refit_interval > 0) {
                if step > start && (step - start) % config.refit_interval == 0 {
                    if let Some((md, g)) = refit(&replay, config, env, &lqr_r, step) {
                        report.push(SysIdReportRow::compare(
                            Phase::Done,
                            &sysid,
                            Some(&md.a_hat),
                            Some(&md.b_hat),
                            Some(&g),
                            truth.as_ref(),
                        ));
                        model = Some(md);
                        gain = Some(g);
                    }
                }
            }
        }

        if replay.len() >= config.batch_size {
            let penalty = match (&gain, config.lambda_k > 0.0) {
                (Some(g), true) => Some(GainPenalty::from_gain(
                    g,
                    config.gain_sign,
                    config.lambda_k,
                    config.eta,
                    norm_scale.clone(),
                    config.penalty_gradient,
                )),
                _ => None,
            };
            for _ in 0..config.gradient_steps {
                let batch = Minibatch::from_transitions(&replay.sample(config.batch_size, &mut agent_rng)?);
                let noise = normal_matrix(config.batch_size, m, &mut agent_rng);
                grad_steps += 1;
                let update_target = grad_steps % config.target_update_interval == 0;
                let stats = gradient_step(&mut nets, &batch, &noise, config, penalty.as_ref(), update_target)?;
                losses.add(&stats);
            }
        }

        let truncated = episode_len >= env.max_episode_steps;
        if result.terminated || truncated || step == config.total_steps {
            log.push(EpisodeLog {
                env_step: step,
                episode_return,
                value_loss: LossAccumulator::mean(losses.value, losses.count),
                q1_loss: LossAccumulator::mean(losses.q1, losses.count),
                q2_loss: LossAccumulator::mean(losses.q2, losses.count),
                actor_loss: LossAccumulator::mean(losses.actor, losses.count),
                gain_penalty: LossAccumulator::mean(losses.penalty, losses.penalty_count),
                k_available: gain.is_some(),
                dare_residual: gain.as_ref().map(|g| g.dare_residual),
            });
            losses = LossAccumulator::default();
            x = env_reset(env, &mut env_rng);
            episode_return = 0.0;
            episode_len = 0;
        } else {
            x = result.next_state;
        }
        if every > 0 && step % every == 0 && step < config.total_steps {
            on_checkpoint(step, &nets.actor);
        }
    }

    let mut policy = nets.actor;
    let final_shift = finalize_policy(&mut policy)?;
    let (_, shift_clipped) = policy.mean_action_checked(&vec![0.0; n])?;
    Ok(TrainOutcome {
        policy,
        model,
        gain,
        k_available_step,
        log,
        sysid_report: report,
        final_shift,
        shift_clipped,
    })
}

/// Joint refit of `(Â, B̂)` on the freshest near-origin replay transitions.
fn refit(
    replay: &ReplayBuffer,
    config: &TrainConfig,
    env: &EnvSpec,
    lqr_r: &Matrix,
    step: u64,
) -> Option<(LinearModel, GainEstimate)> {
    let (mut xs, mut us, mut ys) = (Vec::new(), Vec::new(), Vec::new());
    for t in replay.iter_chronological().rev() {
        if xs.len() >= config.refit_window {
            break;
        }
        if scaled_norm(&t.state, &env.domain.half_widths()) < config.eta {
            xs.push(t.state.clone());
            us.push(t.action.clone());
            ys.push(t.next_state.clone());
        }
    }
    if xs.len() < config.threshold_a.max(1) {
        return None;
    }
    let md = LinearModel::identify_joint(&xs, &us, &ys, config.ridge).ok()?;
    let g = compute_gain(&md, &env.q_reward, lqr_r, step).ok()?;
    g.schur_stable.then_some((md, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn transition(v: f64) -> Transition {
        Transition {
            state: vec![v],
            action: vec![0.0],
            reward: v,
            next_state: vec![v],
            terminated: false,
        }
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut buf = ReplayBuffer::new(2);
        for v in [1.0, 2.0, 3.0] {
            buf.push(transition(v));
        }
        assert_eq!(buf.len(), 2);
        let order: Vec<f64> = buf.iter_chronological().map(|t| t.reward).collect();
        assert_eq!(order, vec![2.0, 3.0]);
    }

    #[test]
    fn sample_full_is_permutation() {
        let mut buf = ReplayBuffer::new(10);
        for v in 0..7 {
            buf.push(transition(v as f64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut got: Vec<f64> = buf.sample(7, &mut rng).unwrap().iter().map(|t| t.reward).collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, (0..7).map(f64::from).collect::<Vec<_>>());
        assert!(matches!(buf.sample(8, &mut rng), Err(AgentError::InsufficientData { requested: 8, available: 7 })));
    }

    #[test]
    fn sampling_is_uniform() {
        let mut buf = ReplayBuffer::new(10);
        for v in 0..10 {
            buf.push(transition(v as f64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            counts[buf.sample(1, &mut rng).unwrap()[0].reward as usize] += 1;
        }
        let p = 0.1;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    fn nets(seed: u64) -> SacNets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SacNets::init(2, &[8, 8], &[-2.0], &[2.0], &mut rng).unwrap()
    }

    fn constant_net(in_dim: usize, value: f64) -> Mlp {
        let mut net = Mlp::zeros(&[in_dim, 4, 1]).unwrap();
        net.layers_mut()[1].bias[0] = value;
        net
    }

    #[test]
    fn value_target_takes_min_of_twins() {
        let mut nets = nets(1);
        nets.q1 = constant_net(3, 5.0);
        nets.q2 = constant_net(3, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(value_target(&[0.3, -0.1], &nets, 0.0, &mut rng).unwrap(), 3.0);
    }

    #[test]
    fn value_target_monte_carlo_matches_entropy() {
        // 1-D policy with constant μ = 0 and log σ = ln 0.5, a = 1
        let mut net = Mlp::zeros(&[1, 2, 2]).unwrap();
        let sigma: f64 = 0.5;
        net.layers_mut()[1].bias[1] = sigma.ln();
        let actor = GaussianPolicy::new(net, vec![1.0], vec![0.0]).unwrap();
        let mut nets = SacNets::init(1, &[2], &[-1.0], &[1.0], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        nets.actor = actor;
        let q = 1.5;
        nets.q1 = constant_net(2, q);
        nets.q2 = constant_net(2, q);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let count = 100_000;
        let samples: Vec<f64> = (0..count).map(|_| value_target(&[0.2], &nets, 1.0, &mut rng).unwrap()).collect();
        let mean = samples.iter().sum::<f64>() / count as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
        // oracle: q + H(Gaussian) + E[ln(1 − tanh²(w))], expectation by quadrature
        let gauss_entropy = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln();
        let cells = 20_000;
        let (lo, hi) = (-10.0 * sigma, 10.0 * sigma);
        let h = (hi - lo) / cells as f64;
        let mut correction = 0.0;
        for i in 0..cells {
            let w = lo + (i as f64 + 0.5) * h;
            let density = (-0.5 * (w / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            correction += density * (1.0 - w.tanh().powi(2)).ln() * h;
        }
        let expected = q + gauss_entropy + correction;
        let se = (var / count as f64).sqrt();
        assert!((mean - expected).abs() <= 3.0 * se, "mean {mean} expected {expected} se {se}");
    }

    #[test]
    fn value_loss_examples() {
        let net = constant_net(1, 2.0);
        let x = Matrix::from_rows(&[&[0.4]]);
        let (loss, _) = value_loss_and_grads(&net, &x, &[1.0]).unwrap();
        assert_eq!(loss, 0.5);
        let (loss, grads) = value_loss_and_grads(&net, &x, &[2.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g == 0.0));
    }

    #[test]
    fn terminated_targets_do_not_bootstrap() {
        let target = constant_net(1, 100.0);
        let batch = Minibatch::from_transitions(&[
            Transition { state: vec![0.0], action: vec![0.0], reward: -20.0, next_state: vec![3.0], terminated: true },
            Transition { state: vec![0.0], action: vec![0.0], reward: 1.0, next_state: vec![0.1], terminated: false },
        ]);
        let t = q_targets(&target, &batch, 0.99).unwrap();
        assert_eq!(t[0], -20.0);
        assert_eq!(t[1], 1.0 + 0.99 * 100.0);
        assert_eq!(q_targets(&target, &batch, 0.0).unwrap(), vec![-20.0, 1.0]);
    }

    #[test]
    fn target_update_examples() {
        let mut n = nets(4);
        n.value.params_mut().for_each(|p| *p = 1.0);
        n.target_value.params_mut().for_each(|p| *p = 0.0);
        target_update(&mut n, 0.005);
        assert!(n.target_value.params().all(|p| p == 0.005));
        target_update(&mut n, 1.0);
        assert_eq!(n.target_value, n.value);
    }

    #[test]
    fn target_gap_shrinks_geometrically() {
        let mut n = nets(5);
        let tau = 0.1;
        let gap = |n: &SacNets| n.value.params().zip(n.target_value.params()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        n.target_value.params_mut().for_each(|p| *p += 1.0);
        let mut prev = gap(&n);
        for _ in 0..20 {
            target_update(&mut n, tau);
            let g = gap(&n);
            assert!((g / prev - (1.0 - tau)).abs() < 1e-9);
            prev = g;
        }
    }

    #[test]
    fn zero_weight_penalty_matches_plain_actor() {
        let n = nets(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let states = normal_matrix(5, 2, &mut rng).scale(0.1);
        let noise = normal_matrix(5, 1, &mut rng);
        let plain = actor_loss_and_grads(&n, &states, &noise, 0.2, None).unwrap();
        let gain = GainEstimate {
            k_hat: Matrix::from_rows(&[&[1.0, 0.5]]),
            p: Matrix::identity(2),
            schur_stable: true,
            dare_residual: 0.0,
            timestamp: 0,
        };
        let pen = GainPenalty::from_gain(&gain, GainSign::Negative, 0.0, 0.2, Vec::new(), PenaltyGradient::Exact);
        let with = actor_loss_and_grads(&n, &states, &noise, 0.2, Some(&pen)).unwrap();
        assert_eq!(plain.loss, with.loss);
        assert_eq!(plain.grads.to_vec(), with.grads.to_vec());
        assert_eq!(with.penalty, Some(0.0));
    }

    #[test]
    fn eval_states_are_origin_plus_ball() {
        let pen = GainPenalty {
            target: Matrix::zeros(1, 2),
            weight: 1.0,
            eta: 0.2,
            norm_scale: Vec::new(),
            gradient: PenaltyGradient::Exact,
        };
        let states = Matrix::from_rows(&[&[0.1, 0.1], &[0.2, 0.0], &[1.0, 0.0]]);
        assert_eq!(pen.eval_states(&states), vec![vec![0.0, 0.0], vec![0.1, 0.1]]);
    }

    #[test]
    fn config_validation_names_fields() {
        let cfg = TrainConfig { gamma: 1.0, tau: 0.0, ..TrainConfig::default() };
        match cfg.validate() {
            Err(AgentError::InvalidConfig(msg)) => assert_eq!(msg, "gamma, tau"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn floor_raises_tiny_actions() {
        let spec = EnvSpec::pendulum();
        let mut u = vec![1e-4];
        floor_action(&mut u, &spec, 0.01);
        assert!((u[0] - 0.06).abs() < 1e-12);
        let mut u = vec![-3.0];
        floor_action(&mut u, &spec, 0.01);
        assert_eq!(u, vec![-3.0]);
    }

    fn perturbed<F: Fn(&mut SacNets) -> &mut Mlp>(n: &SacNets, pick: F, idx: usize, delta: f64) -> SacNets {
        let mut c = n.clone();
        *pick(&mut c).params_mut().nth(idx).unwrap() += delta;
        c
    }

    fn check_fd<F, L>(n: &SacNets, pick: F, analytic: &MlpGrads, loss: L, seed: u64)
    where
        F: Fn(&mut SacNets) -> &mut Mlp + Copy,
        L: Fn(&SacNets) -> f64,
    {
        let flat = analytic.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        for _ in 0..20 {
            let idx = rng.random_range(0..flat.len());
            let fd = (loss(&perturbed(n, pick, idx, h)) - loss(&perturbed(n, pick, idx, -h))) / (2.0 * h);
            let rel = (fd - flat[idx]).abs() / fd.abs().max(flat[idx].abs()).max(1e-8);
            assert!(rel <= 1e-4 || (fd - flat[idx]).abs() < 1e-10, "idx {idx}: fd {fd} vs {}", flat[idx]);
        }
    }

    #[test]
    fn value_and_q_gradients_match_fd() {
        let n = nets(31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let states = normal_matrix(8, 2, &mut rng).scale(0.3);
        let targets: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let (_, g) = value_loss_and_grads(&n.value, &states, &targets).unwrap();
        check_fd(&n, |c| &mut c.value, &g, |c| value_loss_and_grads(&c.value, &states, &targets).unwrap().0, 33);

        let transitions: Vec<Transition> = (0..8)
            .map(|i| Transition {
                state: states.row(i).to_vec(),
                action: vec![rng.random_range(-2.0..2.0)],
                reward: rng.random_range(-1.0..1.0),
                next_state: vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
                terminated: i % 3 == 0,
            })
            .collect();
        let batch = Minibatch::from_transitions(&transitions);
        let y = q_targets(&n.target_value, &batch, 0.99).unwrap();
        let (_, g1) = q_loss_and_grads(&n.q1, &batch, &y).unwrap();
        check_fd(&n, |c| &mut c.q1, &g1, |c| q_loss_and_grads(&c.q1, &batch, &y).unwrap().0, 34);
        let (_, g2) = q_loss_and_grads(&n.q2, &batch, &y).unwrap();
        check_fd(&n, |c| &mut c.q2, &g2, |c| q_loss_and_grads(&c.q2, &batch, &y).unwrap().0, 35);
    }

    #[test]
    fn actor_gradient_matches_fd_quick() {
        let n = nets(21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let states = normal_matrix(6, 2, &mut rng).scale(0.1);
        let noise = normal_matrix(6, 1, &mut rng);
        let gain = GainEstimate {
            k_hat: Matrix::from_rows(&[&[1.3, 0.4]]),
            p: Matrix::identity(2),
            schur_stable: true,
            dare_residual: 0.0,
            timestamp: 0,
        };
        let pen = GainPenalty::from_gain(&gain, GainSign::Negative, 1.0, 0.2, Vec::new(), PenaltyGradient::Exact);
        for p in [None, Some(&pen)] {
            let a = actor_loss_and_grads(&n, &states, &noise, 0.2, p).unwrap();
            check_fd(&n, |c| c.actor.net_mut(), &a.grads, |c| {
                let r = actor_loss_and_grads(c, &states, &noise, 0.2, p).unwrap();
                r.loss + r.penalty.unwrap_or(0.0)
            }, 23);
        }
    }
}
