//! Hierarchical actor-critic learner.
//!
//! * critic `Ĥθ(s, a, x)`: regresses evaluative feedback (or, for the sparse
//!   reward baselines, a soft Bellman target);
//! * skill actor `πφ(a|s)`: categorical over the task's skills;
//! * parameter actors `πψ(x|s, a)`: one tanh-squashed Gaussian per skill.
//!
//! Loss functions take their sampling noise explicitly so gradients can be
//! checked against finite differences with the noise held fixed.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{Activation, Adam, Mlp, NetError, NetSpec, OutputKind, Tape};
use crate::replay::Batch;
use crate::sim::{TaskKind, TaskSpec, Workspace};
use crate::skills::{ParamLayout, SkillAction, SkillId, MAX_PARAM_DIM};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("no parameter actor for skill {0}")]
    MissingParamActor(SkillId),
    #[error("discount {0} outside [0, 1)")]
    Gamma(f64),
    #[error("non-finite loss in {0}")]
    NonFiniteLoss(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub alpha_skill: f64,
    pub alpha_param: f64,
    pub auto_alpha: bool,
    /// Polyak rate for the Bellman target critic.
    pub target_tau: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            learning_rate: Adam::DEFAULT_LR,
            alpha_skill: 0.05,
            alpha_param: 0.05,
            auto_alpha: false,
            target_tau: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle {
    pub task: TaskKind,
    pub skills: Vec<SkillId>,
    pub obs_dim: usize,
    pub obs_layout_hash: String,
    pub workspace: Workspace,
    pub critic: Mlp,
    pub skill_actor: Mlp,
    /// Aligned with `skills`; `None` for parameterless skills.
    pub param_actors: Vec<Option<Mlp>>,
    pub alpha_skill: f64,
    pub alpha_param: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub critic_loss: f64,
    pub skill_actor_loss: f64,
    pub param_actor_loss: f64,
    pub mean_entropy_skill: f64,
    pub mean_entropy_param: f64,
}

/// A loss value with the gradient for the one network it trains.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamActorGrad {
    pub loss: f64,
    /// Aligned with `bundle.skills`.
    pub grads: Vec<Option<Vec<f64>>>,
    pub entropy: f64,
}

impl PolicyBundle {
    pub fn new<R: Rng + ?Sized>(task: &TaskSpec, cfg: &AgentConfig, rng: &mut R) -> Result<Self, AgentError> {
        let k = task.available_skills.len();
        let d = task.obs_dim;
        let critic = Mlp::init(
            NetSpec::new(d + k + MAX_PARAM_DIM, &cfg.hidden, 1, cfg.activation, OutputKind::Linear),
            rng,
        )?;
        let skill_actor = Mlp::init(
            NetSpec::new(d, &cfg.hidden, k, cfg.activation, OutputKind::CategoricalLogits),
            rng,
        )?;
        let mut param_actors = Vec::with_capacity(k);
        for s in &task.available_skills {
            let dim = s.param_dim();
            param_actors.push(if dim == 0 {
                None
            } else {
                Some(Mlp::init(
                    NetSpec::new(d, &cfg.hidden, 2 * dim, cfg.activation, OutputKind::GaussianHead),
                    rng,
                )?)
            });
        }
        Ok(Self {
            task: task.kind,
            skills: task.available_skills.clone(),
            obs_dim: d,
            obs_layout_hash: task.obs_layout_hash(),
            workspace: task.workspace,
            critic,
            skill_actor,
            param_actors,
            alpha_skill: cfg.alpha_skill,
            alpha_param: cfg.alpha_param,
        })
    }

    /// A bundle whose deterministic action is `action` in every state.
    pub fn constant_policy(task: &TaskSpec, action: &SkillAction, cfg: &AgentConfig) -> Result<Self, AgentError> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut b = Self::new(task, cfg, &mut rng)?;
        let idx = task
            .skill_index(action.skill)
            .ok_or(AgentError::MissingParamActor(action.skill))?;
        b.skill_actor.zero_output_weights();
        let bias = b.skill_actor.output_bias_mut();
        bias.fill(-10.0);
        bias[idx] = 10.0;
        if let Some(actor) = b.param_actors[idx].as_mut() {
            actor.zero_output_weights();
            let dim = action.skill.param_dim();
            let bias = actor.output_bias_mut();
            for j in 0..dim {
                bias[j] = action.params_raw[j].clamp(-0.999_999, 0.999_999).atanh();
                bias[dim + j] = -5.0;
            }
        }
        Ok(b)
    }

    pub fn num_skills(&self) -> usize {
        self.skills.len()
    }

    pub fn critic_input_dim(&self) -> usize {
        self.obs_dim + self.num_skills() + MAX_PARAM_DIM
    }

    fn layout(&self, skill_idx: usize) -> ParamLayout {
        ParamLayout::new(self.skills[skill_idx], &self.workspace)
    }

    /// Rows of `(obs, one-hot, padded params)` for the critic.
    fn critic_rows(&self, obs: &[f64], skills: &[usize], params: &[[f64; MAX_PARAM_DIM]]) -> Vec<f64> {
        let d = self.obs_dim;
        let k = self.num_skills();
        let mut rows = Vec::with_capacity(skills.len() * self.critic_input_dim());
        for (i, (&a, x)) in skills.iter().zip(params).enumerate() {
            rows.extend_from_slice(&obs[i * d..(i + 1) * d]);
            rows.extend((0..k).map(|j| if j == a { 1.0 } else { 0.0 }));
            let dim = self.skills[a].param_dim();
            rows.extend((0..MAX_PARAM_DIM).map(|j| if j < dim { x[j] } else { 0.0 }));
        }
        rows
    }

    pub fn critic_predict(&self, obs: &[f64], skill_one_hot: &[f64], params_padded: &[f64]) -> Result<f64, AgentError> {
        if skill_one_hot.len() != self.num_skills() {
            return Err(NetError::Shape {
                expected: self.num_skills(),
                got: skill_one_hot.len(),
            }
            .into());
        }
        let mut input = Vec::with_capacity(self.critic_input_dim());
        input.extend_from_slice(obs);
        input.extend_from_slice(skill_one_hot);
        input.extend_from_slice(params_padded);
        Ok(self.critic.forward(&input)?[0])
    }

    /// Critic values for a batch of `(skill index, normalized params)` pairs.
    pub fn critic_batch(&self, obs: &[f64], skills: &[usize], params: &[[f64; MAX_PARAM_DIM]]) -> Result<Vec<f64>, AgentError> {
        let rows = self.critic_rows(obs, skills, params);
        let mut tape = Tape::default();
        self.critic.forward_batch(&rows, skills.len(), &mut tape)?;
        Ok(tape.output().to_vec())
    }

    /// Skill probabilities and log-probabilities, `rows x K` each.
    pub fn skill_distribution(&self, obs: &[f64], rows: usize) -> Result<(Vec<f64>, Vec<f64>), AgentError> {
        let mut tape = Tape::default();
        self.skill_actor.forward_batch(obs, rows, &mut tape)?;
        Ok(log_softmax_rows(tape.output(), self.num_skills()))
    }

    /// Reparameterized samples from skill `a`'s actor. Returns normalized
    /// params and the log-density in world units, per row.
    fn sample_params(
        &self,
        a: usize,
        obs: &[f64],
        rows: usize,
        noise: &[[f64; MAX_PARAM_DIM]],
    ) -> Result<(Vec<[f64; MAX_PARAM_DIM]>, Vec<f64>), AgentError> {
        let Some(actor) = &self.param_actors[a] else {
            return Ok((vec![[0.0; MAX_PARAM_DIM]; rows], vec![0.0; rows]));
        };
        let mut tape = Tape::default();
        actor.forward_batch(obs, rows, &mut tape)?;
        let dim = self.skills[a].param_dim();
        let log_scale = self.layout(a).log_scale();
        let out = tape.output();
        let mut xs = Vec::with_capacity(rows);
        let mut logp = Vec::with_capacity(rows);
        for r in 0..rows {
            let head = &out[r * 2 * dim..(r + 1) * 2 * dim];
            let mut x = [0.0; MAX_PARAM_DIM];
            let mut lp = -log_scale;
            for j in 0..dim {
                let (mu, ls) = (head[j], head[dim + j]);
                let e = noise[r][j];
                let u = mu + ls.exp() * e;
                x[j] = u.tanh();
                lp += -0.5 * e * e - ls - 0.5 * LN_2PI - log1m_tanh2(u);
            }
            xs.push(x);
            logp.push(lp);
        }
        Ok((xs, logp))
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, obs: &[f64], mode: SampleMode, rng: &mut R) -> Result<SkillAction, AgentError> {
        let (probs, _) = self.skill_distribution(obs, 1)?;
        let a = match mode {
            SampleMode::Deterministic => argmax(&probs),
            SampleMode::Stochastic => sample_categorical(&probs, rng),
        };
        let skill = self.skills[a];
        let Some(actor) = &self.param_actors[a] else {
            return Ok(SkillAction::bare(skill));
        };
        let head = actor.forward(obs)?;
        let dim = skill.param_dim();
        let y: Vec<f64> = (0..dim)
            .map(|j| {
                let u = match mode {
                    SampleMode::Deterministic => head[j],
                    SampleMode::Stochastic => {
                        let e: f64 = StandardNormal.sample(rng);
                        head[j] + head[dim + j].exp() * e
                    }
                };
                u.tanh()
            })
            .collect();
        Ok(SkillAction::from_normalized(skill, &y, &self.workspace))
    }

    /// Log-density of normalized parameters `y` under skill `a`'s actor, in world units.
    pub fn param_log_prob(&self, a: usize, obs: &[f64], y: &[f64]) -> Result<f64, AgentError> {
        let Some(actor) = &self.param_actors[a] else {
            return Ok(0.0);
        };
        let head = actor.forward(obs)?;
        let dim = self.skills[a].param_dim();
        let mut lp = -self.layout(a).log_scale();
        for j in 0..dim {
            let (mu, ls) = (head[j], head[dim + j]);
            let u = y[j].clamp(-1.0 + 1e-15, 1.0 - 1e-15).atanh();
            let e = (u - mu) / ls.exp();
            lp += -0.5 * e * e - ls - 0.5 * LN_2PI - log1m_tanh2(u);
        }
        Ok(lp)
    }
}

/// `ln(1 - tanh(u)^2)`, stable for large `|u|`.
fn log1m_tanh2(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn log_softmax_rows(logits: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut probs = Vec::with_capacity(logits.len());
    let mut logp = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        for z in row {
            let lp = z - lse;
            logp.push(lp);
            probs.push(lp.exp());
        }
    }
    (probs, logp)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Standard-normal noise, `rows x count` blocks of `MAX_PARAM_DIM`.
pub fn draw_noise<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Vec<[f64; MAX_PARAM_DIM]> {
    (0..rows)
        .map(|_| std::array::from_fn(|_| StandardNormal.sample(rng)))
        .collect()
}

fn check_finite(v: f64, what: &'static str) -> Result<f64, AgentError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AgentError::NonFiniteLoss(what))
    }
}

/// Mean squared error of the critic against `targets`.
pub fn critic_regression(
    bundle: &PolicyBundle,
    obs: &[f64],
    skills: &[usize],
    params: &[[f64; MAX_PARAM_DIM]],
    targets: &[f64],
) -> Result<LossGrad, AgentError> {
    let n = targets.len();
    if n == 0 {
        return Err(AgentError::EmptyBatch);
    }
    let rows = bundle.critic_rows(obs, skills, params);
    let mut tape = Tape::default();
    bundle.critic.forward_batch(&rows, n, &mut tape)?;
    let pred = tape.output();
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(n);
    for (p, t) in pred.iter().zip(targets) {
        let e = p - t;
        loss += e * e;
        upstream.push(2.0 * e / n as f64);
    }
    let mut grad = vec![0.0; bundle.critic.param_count()];
    bundle.critic.backward_batch(&tape, &upstream, &mut grad, None)?;
    Ok(LossGrad {
        loss: check_finite(loss / n as f64, "critic")?,
        grad,
    })
}

/// Feedback critic loss: squared error between `Ĥ(s, a, x)` and the label.
pub fn critic_loss(bundle: &PolicyBundle, batch: &Batch, include_affordance: bool) -> Result<LossGrad, AgentError> {
    let targets: Vec<f64> = (0..batch.rows)
        .map(|i| batch.feedback[i] + if include_affordance { batch.affordance[i] } else { 0.0 })
        .collect();
    critic_regression(bundle, &batch.obs, &batch.skill, &batch.params, &targets)
}

/// Soft state value `Σ_a π(a|s)[Q(s, a, x_a) - αφ log π(a|s) - αψ log πψ(x_a|s, a)]`
/// under `critic`, with one reparameterized parameter draw per skill.
pub fn soft_value(
    bundle: &PolicyBundle,
    critic: &Mlp,
    obs: &[f64],
    rows: usize,
    noise: &[Vec<[f64; MAX_PARAM_DIM]>],
) -> Result<Vec<f64>, AgentError> {
    let k = bundle.num_skills();
    let (probs, logp) = bundle.skill_distribution(obs, rows)?;
    let mut v = vec![0.0; rows];
    let mut tape = Tape::default();
    for a in 0..k {
        let (xs, lpx) = bundle.sample_params(a, obs, rows, &noise[a])?;
        let input = bundle.critic_rows(obs, &vec![a; rows], &xs);
        critic.forward_batch(&input, rows, &mut tape)?;
        let q = tape.output();
        for r in 0..rows {
            let p = probs[r * k + a];
            v[r] += p * (q[r] - bundle.alpha_skill * logp[r * k + a] - bundle.alpha_param * lpx[r]);
        }
    }
    Ok(v)
}

/// Sparse-reward critic loss with a soft Bellman target from `target_critic`.
/// `next_noise[a]` holds one noise row per transition for skill `a`.
pub fn bellman_critic_loss(
    bundle: &PolicyBundle,
    target_critic: &Mlp,
    batch: &Batch,
    gamma: f64,
    include_affordance: bool,
    next_noise: &[Vec<[f64; MAX_PARAM_DIM]>],
) -> Result<LossGrad, AgentError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(AgentError::Gamma(gamma));
    }
    if batch.rows == 0 {
        return Err(AgentError::EmptyBatch);
    }
    let v_next = soft_value(bundle, target_critic, &batch.next_obs, batch.rows, next_noise)?;
    let targets: Vec<f64> = (0..batch.rows)
        .map(|i| {
            let r = batch.env_reward[i] + if include_affordance { batch.affordance[i] } else { 0.0 };
            let cont = if batch.done[i] { 0.0 } else { 1.0 };
            r + gamma * cont * v_next[i]
        })
        .collect();
    critic_regression(bundle, &batch.obs, &batch.skill, &batch.params, &targets)
}

/// Skill-actor loss with the expectation over skills taken exactly.
/// `noise[a]` holds one parameter-noise row per observation for skill `a`.
pub fn skill_actor_loss(
    bundle: &PolicyBundle,
    obs: &[f64],
    rows: usize,
    noise: &[Vec<[f64; MAX_PARAM_DIM]>],
) -> Result<(LossGrad, f64), AgentError> {
    if rows == 0 {
        return Err(AgentError::EmptyBatch);
    }
    let k = bundle.num_skills();
    if bundle.param_actors.len() != k {
        return Err(AgentError::MissingParamActor(bundle.skills[bundle.param_actors.len().min(k - 1)]));
    }
    for (a, s) in bundle.skills.iter().enumerate() {
        if s.param_dim() > 0 && bundle.param_actors[a].is_none() {
            return Err(AgentError::MissingParamActor(*s));
        }
    }
    let mut q = vec![0.0; rows * k];
    for a in 0..k {
        let (xs, _) = bundle.sample_params(a, obs, rows, &noise[a])?;
        let qa = bundle.critic_batch(obs, &vec![a; rows], &xs)?;
        for r in 0..rows {
            q[r * k + a] = qa[r];
        }
    }
    let mut tape = Tape::default();
    bundle.skill_actor.forward_batch(obs, rows, &mut tape)?;
    let (probs, logp) = log_softmax_rows(tape.output(), k);
    let alpha = bundle.alpha_skill;
    let mut loss = 0.0;
    let mut entropy = 0.0;
    let mut upstream = vec![0.0; rows * k];
    for r in 0..rows {
        let f: Vec<f64> = (0..k).map(|a| alpha * logp[r * k + a] - q[r * k + a]).collect();
        let l: f64 = (0..k).map(|a| probs[r * k + a] * f[a]).sum();
        loss += l;
        entropy -= (0..k).map(|a| probs[r * k + a] * logp[r * k + a]).sum::<f64>();
        for j in 0..k {
            upstream[r * k + j] = probs[r * k + j] * (f[j] - l) / rows as f64;
        }
    }
    let mut grad = vec![0.0; bundle.skill_actor.param_count()];
    bundle.skill_actor.backward_batch(&tape, &upstream, &mut grad, None)?;
    Ok((
        LossGrad {
            loss: check_finite(loss / rows as f64, "skill actor")?,
            grad,
        },
        entropy / rows as f64,
    ))
}

/// Parameter-actor loss `αψ log πψ(x|s, a) - Ĥ(s, a, x)` over rows whose skill has
/// parameters; gradients flow through the reparameterized sample.
pub fn param_actor_loss(
    bundle: &PolicyBundle,
    obs: &[f64],
    skills: &[usize],
    noise: &[[f64; MAX_PARAM_DIM]],
) -> Result<ParamActorGrad, AgentError> {
    let d = bundle.obs_dim;
    let k = bundle.num_skills();
    let alpha = bundle.alpha_param;
    let n_eff = skills.iter().filter(|&&a| bundle.skills[a].param_dim() > 0).count();
    let mut grads: Vec<Option<Vec<f64>>> = bundle
        .param_actors
        .iter()
        .map(|a| a.as_ref().map(|n| vec![0.0; n.param_count()]))
        .collect();
    if n_eff == 0 {
        return Ok(ParamActorGrad {
            loss: 0.0,
            grads,
            entropy: 0.0,
        });
    }
    let mut loss = 0.0;
    let mut neg_logp = 0.0;
    let mut actor_tape = Tape::default();
    let mut critic_tape = Tape::default();
    let mut critic_scratch = vec![0.0; bundle.critic.param_count()];
    let mut input_grad = Vec::new();
    for a in 0..k {
        let Some(actor) = &bundle.param_actors[a] else {
            continue;
        };
        let idx: Vec<usize> = (0..skills.len()).filter(|&i| skills[i] == a).collect();
        if idx.is_empty() {
            continue;
        }
        let m = idx.len();
        let dim = bundle.skills[a].param_dim();
        let log_scale = bundle.layout(a).log_scale();
        let sub_obs: Vec<f64> = idx.iter().flat_map(|&i| obs[i * d..(i + 1) * d].iter().copied()).collect();
        actor.forward_batch(&sub_obs, m, &mut actor_tape)?;
        let head = actor_tape.output().to_vec();
        let mut us = vec![0.0; m * dim];
        let mut xs = vec![[0.0; MAX_PARAM_DIM]; m];
        for (r, &i) in idx.iter().enumerate() {
            let mut lp = -log_scale;
            for j in 0..dim {
                let (mu, ls) = (head[r * 2 * dim + j], head[r * 2 * dim + dim + j]);
                let e = noise[i][j];
                let u = mu + ls.exp() * e;
                us[r * dim + j] = u;
                xs[r][j] = u.tanh();
                lp += -0.5 * e * e - ls - 0.5 * LN_2PI - log1m_tanh2(u);
            }
            loss += alpha * lp;
            neg_logp -= lp;
        }
        let rows = bundle.critic_rows(&sub_obs, &vec![a; m], &xs);
        bundle.critic.forward_batch(&rows, m, &mut critic_tape)?;
        loss -= critic_tape.output().iter().sum::<f64>();
        bundle
            .critic
            .backward_batch(&critic_tape, &vec![1.0; m], &mut critic_scratch, Some(&mut input_grad))?;
        let width = bundle.critic_input_dim();
        let mut upstream = vec![0.0; m * 2 * dim];
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..dim {
                let u = us[r * dim + j];
                let y = xs[r][j];
                let dq_dy = input_grad[r * width + d + k + j];
                let dl_du = alpha * 2.0 * u.tanh() - dq_dy * (1.0 - y * y);
                let sigma = head[r * 2 * dim + dim + j].exp();
                upstream[r * 2 * dim + j] = dl_du / n_eff as f64;
                upstream[r * 2 * dim + dim + j] = (-alpha + dl_du * sigma * noise[i][j]) / n_eff as f64;
            }
        }
        let g = grads[a].as_mut().expect("actor exists");
        actor.backward_batch(&actor_tape, &upstream, g, None)?;
    }
    Ok(ParamActorGrad {
        loss: check_finite(loss / n_eff as f64, "param actor")?,
        grads,
        entropy: neg_logp / n_eff as f64,
    })
}

/// What the critic regresses onto.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriticTarget {
    /// Immediate feedback label (plus affordance when enabled).
    Feedback { include_affordance: bool },
    /// Feedback label bootstrapped with a discounted soft value.
    BootstrappedFeedback { include_affordance: bool, gamma: f64 },
    /// Sparse environment reward with a soft Bellman target.
    Bellman { include_affordance: bool, gamma: f64 },
}

/// Temperature with optional automatic tuning toward a target entropy.
#[derive(Debug, Clone, PartialEq)]
struct Temperature {
    log_alpha: Vec<f64>,
    opt: Adam,
    target_entropy: f64,
}

impl Temperature {
    fn new(alpha: f64, target_entropy: f64, lr: f64) -> Self {
        Self {
            log_alpha: vec![alpha.ln()],
            opt: Adam::new(1, lr),
            target_entropy,
        }
    }

    fn update(&mut self, entropy: f64) -> Result<f64, AgentError> {
        let alpha = self.log_alpha[0].exp();
        let g = alpha * (entropy - self.target_entropy);
        self.opt.step(&mut self.log_alpha, &[g])?;
        Ok(self.log_alpha[0].exp())
    }
}

/// Owns the bundle, optimizers and (for Bellman targets) a target critic.
#[derive(Debug, Clone)]
pub struct Learner {
    pub bundle: PolicyBundle,
    pub target: CriticTarget,
    critic_opt: Adam,
    skill_opt: Adam,
    param_opts: Vec<Option<Adam>>,
    target_critic: Option<Mlp>,
    tau: f64,
    temps: Option<(Temperature, Temperature)>,
}

impl Learner {
    pub fn new(bundle: PolicyBundle, cfg: &AgentConfig, target: CriticTarget) -> Self {
        let lr = cfg.learning_rate;
        let param_opts = bundle
            .param_actors
            .iter()
            .map(|a| a.as_ref().map(|n| Adam::new(n.param_count(), lr)))
            .collect();
        let needs_target = !matches!(target, CriticTarget::Feedback { .. });
        let temps = cfg.auto_alpha.then(|| {
            let k = bundle.num_skills() as f64;
            let mean_dim = bundle.skills.iter().map(|s| s.param_dim() as f64).sum::<f64>() / k;
            (
                Temperature::new(bundle.alpha_skill, 0.5 * k.ln(), lr),
                Temperature::new(bundle.alpha_param, -mean_dim, lr),
            )
        });
        Self {
            critic_opt: Adam::new(bundle.critic.param_count(), lr),
            skill_opt: Adam::new(bundle.skill_actor.param_count(), lr),
            param_opts,
            target_critic: needs_target.then(|| bundle.critic.clone()),
            tau: cfg.target_tau,
            temps,
            bundle,
            target,
        }
    }

    /// Optimizer step counters, keyed by network name.
    pub fn optimizer_steps(&self) -> Vec<(String, u64)> {
        let mut v = vec![
            ("critic".to_string(), self.critic_opt.step),
            ("skill_actor".to_string(), self.skill_opt.step),
        ];
        for (s, o) in self.bundle.skills.iter().zip(&self.param_opts) {
            if let Some(o) = o {
                v.push((format!("param_actor.{}", s.name().to_lowercase()), o.step));
            }
        }
        v
    }

    fn next_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Vec<Vec<[f64; MAX_PARAM_DIM]>> {
        (0..self.bundle.num_skills()).map(|_| draw_noise(rows, rng)).collect()
    }

    /// One gradient step on critic, skill actor and parameter actors, in that order.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<LossReport, AgentError> {
        let mut report = LossReport::default();

        let critic = match self.target {
            CriticTarget::Feedback { include_affordance } => critic_loss(&self.bundle, batch, include_affordance)?,
            CriticTarget::BootstrappedFeedback { include_affordance, gamma } => {
                let noise = self.next_noise(batch.rows, rng);
                let tc = self.target_critic.as_ref().expect("bootstrapped target keeps a target critic");
                let v = soft_value(&self.bundle, tc, &batch.next_obs, batch.rows, &noise)?;
                let targets: Vec<f64> = (0..batch.rows)
                    .map(|i| {
                        let aff = if include_affordance { batch.affordance[i] } else { 0.0 };
                        let cont = if batch.done[i] || !batch.executed[i] { 0.0 } else { 1.0 };
                        batch.feedback[i] + aff + gamma * cont * v[i]
                    })
                    .collect();
                critic_regression(&self.bundle, &batch.obs, &batch.skill, &batch.params, &targets)?
            }
            CriticTarget::Bellman { include_affordance, gamma } => {
                let noise = self.next_noise(batch.rows, rng);
                let tc = self.target_critic.as_ref().expect("bellman target keeps a target critic");
                bellman_critic_loss(&self.bundle, tc, batch, gamma, include_affordance, &noise)?
            }
        };
        self.critic_opt.step(&mut self.bundle.critic.params, &critic.grad)?;
        report.critic_loss = critic.loss;

        let noise = self.next_noise(batch.rows, rng);
        let (skill, entropy) = skill_actor_loss(&self.bundle, &batch.obs, batch.rows, &noise)?;
        self.skill_opt.step(&mut self.bundle.skill_actor.params, &skill.grad)?;
        report.skill_actor_loss = skill.loss;
        report.mean_entropy_skill = entropy;

        // skills for the parameter loss are drawn from the updated skill policy
        let k = self.bundle.num_skills();
        let (probs, _) = self.bundle.skill_distribution(&batch.obs, batch.rows)?;
        let skills: Vec<usize> = (0..batch.rows)
            .map(|r| sample_categorical(&probs[r * k..(r + 1) * k], rng))
            .collect();
        let pnoise = draw_noise(batch.rows, rng);
        let param = param_actor_loss(&self.bundle, &batch.obs, &skills, &pnoise)?;
        for ((actor, opt), g) in self
            .bundle
            .param_actors
            .iter_mut()
            .zip(self.param_opts.iter_mut())
            .zip(&param.grads)
        {
            if let (Some(actor), Some(opt), Some(g)) = (actor, opt, g) {
                opt.step(&mut actor.params, g)?;
            }
        }
        report.param_actor_loss = param.loss;
        report.mean_entropy_param = param.entropy;

        if let Some((ts, tp)) = self.temps.as_mut() {
            self.bundle.alpha_skill = ts.update(entropy)?;
            self.bundle.alpha_param = tp.update(param.entropy)?;
        }

        if let Some(tc) = self.target_critic.as_mut() {
            for (t, s) in tc.params.iter_mut().zip(&self.bundle.critic.params) {
                *t = (1.0 - self.tau) * *t + self.tau * s;
            }
        }
        Ok(report)
    }
}
