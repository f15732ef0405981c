//! Regularized multi-agent soft actor-critic: twin critics with target
//! copies, a policy loss with entropy bonus and a KL pull toward the
//! reference policy, and dual steps on the two coefficients. Behavior
//! cloning and a fixed-coefficient variant share the same machinery.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::distr::{Distribution, weighted::WeightedIndex};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::game::{Action, Game, GameError, GameState, Team};
use crate::nets::{self, NetConfig, NetError, NetKind, ParameterSet, StateInput};
use crate::par;
use crate::reference::{ReferenceError, reference_for};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("distribution and reference supports differ ({0} vs {1})")]
    SupportMismatch(usize, usize),
    #[error("action {0} is not a candidate of its agent")]
    UnknownAction(Action),
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    Game(#[from] GameError),
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Net(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainerMode {
    /// Adaptive entropy and KL coefficients.
    Arac,
    /// Adaptive entropy coefficient, fixed KL coefficient.
    Brac,
    /// Supervised fit to the reference policy.
    Bc,
    /// No learning; our team plays the reference policy.
    Ref,
}

impl fmt::Display for TrainerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainerMode::Arac => "arac",
            TrainerMode::Brac => "brac",
            TrainerMode::Bc => "bc",
            TrainerMode::Ref => "ref",
        })
    }
}

impl FromStr for TrainerMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "arac" => Ok(TrainerMode::Arac),
            "brac" => Ok(TrainerMode::Brac),
            "bc" => Ok(TrainerMode::Bc),
            "ref" => Ok(TrainerMode::Ref),
            other => Err(TrainError::InvalidConfig(format!("unknown mode {other}"))),
        }
    }
}

/// How per-agent KL values are combined into the statistic the KL
/// coefficient tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlStatistic {
    Mean,
    Sum,
}

impl FromStr for KlStatistic {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(KlStatistic::Mean),
            "sum" => Ok(KlStatistic::Sum),
            other => Err(TrainError::InvalidConfig(format!("unknown kl statistic {other}"))),
        }
    }
}

impl fmt::Display for KlStatistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlStatistic::Mean => "mean",
            KlStatistic::Sum => "sum",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub mode: TrainerMode,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub lr: f64,
    /// Step size of the two coefficient updates.
    pub dual_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub alpha_init: f64,
    pub beta_init: f64,
    /// Entropy target per agent is `entropy_factor * ln(#legal actions)`.
    pub entropy_factor: f64,
    pub target_kl: f64,
    pub kl_statistic: KlStatistic,
    /// When false the KL term is dropped entirely (coefficient zero).
    pub use_beta: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: TrainerMode::Arac,
            batch_size: 128,
            buffer_capacity: 2000,
            lr: 1e-5,
            dual_lr: 1e-5,
            gamma: 0.99,
            tau: 0.005,
            alpha_init: 0.2,
            beta_init: 1.0,
            entropy_factor: 0.05,
            target_kl: 1.0,
            kl_statistic: KlStatistic::Mean,
            use_beta: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("need 0 < batch_size <= buffer_capacity");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("gamma and tau must lie in (0, 1]");
        }
        if !(self.alpha_init > 0.0 && self.beta_init > 0.0) {
            return bad("initial coefficients must be positive");
        }
        if !(self.lr > 0.0 && self.dual_lr >= 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

/// Entropy and KL coefficients, kept in log space so both stay positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub log_alpha: f64,
    pub log_beta: f64,
    pub use_beta: bool,
    pub target_kl: f64,
    pub entropy_factor: f64,
    pub gamma: f64,
    pub tau: f64,
    pub dual_lr: f64,
}

impl Coefficients {
    pub fn from_config(cfg: &TrainerConfig) -> Self {
        Self {
            log_alpha: cfg.alpha_init.ln(),
            log_beta: cfg.beta_init.ln(),
            use_beta: cfg.use_beta,
            target_kl: cfg.target_kl,
            entropy_factor: cfg.entropy_factor,
            gamma: cfg.gamma,
            tau: cfg.tau,
            dual_lr: cfg.dual_lr,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Effective KL coefficient; zero when the KL term is disabled.
    pub fn beta(&self) -> f64 {
        if self.use_beta { self.log_beta.exp() } else { 0.0 }
    }
}

/// Gradient steps on `J(alpha) = alpha (H - H_target)` and
/// `J(beta) = beta (D_target - D)` with respect to the log coefficients.
pub fn dual_update(c: &mut Coefficients, entropy: f64, target_entropy: f64, kl: f64, update_beta: bool) {
    c.log_alpha -= c.dual_lr * c.alpha() * (entropy - target_entropy);
    if update_beta && c.use_beta {
        c.log_beta -= c.dual_lr * c.beta() * (c.target_kl - kl);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: GameState,
    /// Our team's joint action, one entry per team member.
    pub actions: Vec<Action>,
    pub reward: f64,
    pub next: GameState,
    /// True when the episode ended for a reason other than the step limit.
    pub done: bool,
}

/// Bounded FIFO replay memory.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
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

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// `batch` distinct transitions drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Transition> {
        rand::seq::index::sample(rng, self.items.len(), batch.min(self.items.len()))
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

/// Team-level entropy and KL terms of factorized policies.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTerms {
    /// Sum of per-agent entropies.
    pub entropy: f64,
    /// Sum of per-agent `KL(ref || pi)`.
    pub kl: f64,
    pub per_agent_entropy: Vec<f64>,
    pub per_agent_kl: Vec<f64>,
}

pub fn joint_terms(policies: &[Vec<f64>], references: &[Vec<f64>]) -> Result<JointTerms> {
    if policies.len() != references.len() {
        return Err(TrainError::SupportMismatch(policies.len(), references.len()));
    }
    let mut per_agent_entropy = Vec::with_capacity(policies.len());
    let mut per_agent_kl = Vec::with_capacity(policies.len());
    for (p, r) in policies.iter().zip(references) {
        if p.len() != r.len() {
            return Err(TrainError::SupportMismatch(p.len(), r.len()));
        }
        per_agent_entropy.push(-p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>());
        per_agent_kl.push(
            r.iter()
                .zip(p)
                .filter(|(rv, _)| **rv > 0.0)
                .map(|(rv, pv)| rv * (rv.ln() - pv.ln()))
                .sum(),
        );
    }
    Ok(JointTerms {
        entropy: per_agent_entropy.iter().sum(),
        kl: per_agent_kl.iter().sum(),
        per_agent_entropy,
        per_agent_kl,
    })
}

/// Reference distributions for every alive agent of `input`.
pub fn references(game: &Game, s: &GameState, input: &StateInput) -> Result<Vec<Vec<f64>>> {
    input
        .agents
        .iter()
        .map(|v| Ok(reference_for(game, s, v.agent)?.probs))
        .collect()
}

/// Read-only view of the networks one loss evaluation needs.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub game: &'a Game,
    pub mask: &'a Arc<[bool]>,
    pub actor: &'a ParameterSet,
    pub critic: &'a ParameterSet,
    pub target: &'a ParameterSet,
}

/// A loss value with the gradient of its batch mean.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

fn add_grads(acc: &mut [Vec<f64>], grads: Vec<Option<Tensor>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        if let Some(g) = g {
            a.iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
        }
    }
}

fn zero_grads(ps: &ParameterSet) -> Vec<Vec<f64>> {
    ps.values().iter().map(|t| vec![0.0; t.len()]).collect()
}

fn candidate_index(input: &StateInput, k: usize, action: Action) -> Result<usize> {
    input.agents[k]
        .candidates
        .iter()
        .position(|c| c.action == action)
        .ok_or(TrainError::UnknownAction(action))
}

/// Per-sample results are reduced in batch order so the parallel and the
/// sequential builds agree bit for bit.
fn reduce<T>(ps: &ParameterSet, parts: Vec<Result<(T, Vec<Option<Tensor>>)>>) -> Result<(Vec<T>, Vec<Vec<f64>>)> {
    let n = parts.len() as f64;
    let mut grads = zero_grads(ps);
    let mut stats = Vec::with_capacity(parts.len());
    for p in parts {
        let (s, g) = p?;
        add_grads(&mut grads, g);
        stats.push(s);
    }
    for g in &mut grads {
        g.iter_mut().for_each(|x| *x /= n);
    }
    Ok((stats, grads))
}

/// Bootstrapped target `y` for one transition. Next actions are sampled
/// from the current actor; log-probability and KL are team sums.
pub fn critic_target(m: Models<'_>, c: &Coefficients, t: &Transition, rng: &mut impl Rng) -> Result<f64> {
    if t.done {
        return Ok(t.reward);
    }
    let input = StateInput::new(m.game, &t.next);
    if input.agents.is_empty() {
        return Ok(t.reward);
    }
    let probs = nets::actor_distribution(m.actor, &input, m.mask)?;
    let refs = references(m.game, &t.next, &input)?;
    let terms = joint_terms(&probs, &refs)?;
    let tables = nets::critic_tables(m.target, &input, m.mask)?;
    let mut log_pi = 0.0;
    let mut q = [0.0; 2];
    for (p, table) in probs.iter().zip(&tables) {
        let a = WeightedIndex::new(p).expect("softmax output is a distribution").sample(rng);
        log_pi += p[a].ln();
        q[0] += table[0][a];
        q[1] += table[1][a];
    }
    let soft = q[0].min(q[1]) - c.alpha() * log_pi - c.beta() * terms.kl;
    Ok(t.reward + c.gamma * soft)
}

fn critic_sample(m: Models<'_>, t: &Transition, y: f64) -> Result<([f64; 2], Vec<Option<Tensor>>)> {
    let input = StateInput::new(m.game, &t.state);
    let mut tape = Tape::new(m.critic.values());
    let rows = nets::critic_forward(&mut tape, m.critic, &input, m.mask)?;
    let mut picked: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
    for (k, view) in input.agents.iter().enumerate() {
        let idx = candidate_index(&input, k, t.actions[view.agent])?;
        for j in 0..2 {
            picked[j].push(tape.gather_rows(rows[k][j], &[idx])?);
        }
    }
    let yv = tape.constant(Tensor::scalar(y));
    let mut losses = [0.0; 2];
    let mut total = None;
    for j in 0..2 {
        let stacked = tape.concat_rows(&picked[j])?;
        let q = tape.sum(stacked);
        let diff = tape.sub(q, yv)?;
        let sq = tape.mul(diff, diff)?;
        let half = tape.scale(sq, 0.5);
        losses[j] = tape.value(half).item();
        total = Some(match total {
            None => half,
            Some(prev) => tape.add(prev, half)?,
        });
    }
    let grads = tape.backward(total.expect("two heads"))?;
    Ok((losses, grads.into_params()))
}

/// FNV-1a over a transition's contents; keys the sampling stream of its
/// target so the loss does not depend on batch order.
pub fn transition_key(t: &Transition) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for s in [&t.state, &t.next] {
        s.positions.iter().for_each(|&p| eat(p as u64));
        s.hp.iter().for_each(|&x| eat(u64::from(x)));
        s.alive.iter().for_each(|&x| eat(u64::from(x)));
        eat(u64::from(s.step));
    }
    for a in &t.actions {
        match *a {
            Action::Move(v) => eat(v as u64),
            Action::Attack(j) => eat((1 << 32) | j as u64),
        }
    }
    eat(t.reward.to_bits());
    h
}

/// Twin critic regression onto the shared target: returns the two mean
/// losses and the gradient of their sum.
pub fn critic_loss(m: Models<'_>, c: &Coefficients, batch: &[&Transition], seed: u64) -> Result<([f64; 2], LossGrad)> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let parts = par::map_range(batch.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(transition_key(batch[i]));
        let y = critic_target(m, c, batch[i], &mut rng)?;
        critic_sample(m, batch[i], y)
    });
    let (stats, grads) = reduce(m.critic, parts)?;
    let n = stats.len() as f64;
    let l1 = stats.iter().map(|s| s[0]).sum::<f64>() / n;
    let l2 = stats.iter().map(|s| s[1]).sum::<f64>() / n;
    Ok(([l1, l2], LossGrad { loss: l1 + l2, grads }))
}

/// Batch statistics gathered while evaluating the policy loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyStats {
    pub entropy: f64,
    pub target_entropy: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Copy)]
struct SampleStats {
    entropy: f64,
    target: f64,
    kl: f64,
}

fn combine(v: &[f64], how: KlStatistic) -> f64 {
    let s: f64 = v.iter().sum();
    match how {
        KlStatistic::Sum => s,
        KlStatistic::Mean => s / v.len().max(1) as f64,
    }
}

fn policy_sample(
    m: Models<'_>,
    c: &Coefficients,
    s: &GameState,
    how: KlStatistic,
) -> Result<(SampleStats, Vec<Option<Tensor>>)> {
    let input = StateInput::new(m.game, s);
    let refs = references(m.game, s, &input)?;
    let tables = nets::critic_tables(m.critic, &input, m.mask)?;
    let mut tape = Tape::new(m.actor.values());
    let rows = nets::actor_forward(&mut tape, m.actor, &input, m.mask)?;
    let (alpha, beta) = (c.alpha(), c.beta());
    let mut total: Option<Var> = None;
    let (mut ent, mut tgt, mut kls) = (Vec::new(), Vec::new(), Vec::new());
    for ((lp, table), r) in rows.iter().zip(&tables).zip(&refs) {
        let k = r.len();
        let p = tape.exp(*lp);
        let plp = tape.mul(p, *lp)?;
        let neg_h = tape.sum(plp);
        let qmin: Vec<f64> = table[0].iter().zip(&table[1]).map(|(a, b)| a.min(*b)).collect();
        let qv = tape.constant(Tensor::row_vector(qmin));
        let pq = tape.mul(p, qv)?;
        let eq = tape.sum(pq);
        let rv = tape.constant(Tensor::row_vector(r.clone()));
        let rlp = tape.mul(rv, *lp)?;
        let cross = tape.sum(rlp);
        let ref_ent: f64 = r.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum();
        let a_term = tape.scale(neg_h, alpha);
        let b_term = tape.scale(cross, -beta);
        let lossi = tape.sub(a_term, eq)?;
        let lossi = tape.add(lossi, b_term)?;
        total = Some(match total {
            None => lossi,
            Some(prev) => tape.add(prev, lossi)?,
        });
        ent.push(-tape.value(neg_h).item());
        tgt.push(c.entropy_factor * (k as f64).ln());
        kls.push(ref_ent - tape.value(cross).item());
    }
    let Some(total) = total else {
        return Ok((
            SampleStats {
                entropy: 0.0,
                target: 0.0,
                kl: 0.0,
            },
            vec![None; m.actor.values().len()],
        ));
    };
    // The beta * sum(ref log ref) constant is left out of the tape; it has
    // no gradient.
    let grads = tape.backward(total)?;
    let stats = SampleStats {
        entropy: combine(&ent, how),
        target: combine(&tgt, how),
        kl: combine(&kls, how),
    };
    Ok((stats, grads.into_params()))
}

/// Exact-expectation policy loss
/// `E_s[ sum_i sum_a pi_i(a) (alpha log pi_i(a) - Q_i(s, a)) + beta KL(ref || pi) ]`
/// with `Q_i` the smaller of the two online heads. The reported loss
/// includes the constant part of the KL term.
pub fn policy_loss(
    m: Models<'_>,
    c: &Coefficients,
    batch: &[&Transition],
    how: KlStatistic,
) -> Result<(PolicyStats, LossGrad)> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let parts = par::map_range(batch.len(), |i| policy_sample(m, c, &batch[i].state, how));
    let (stats, grads) = reduce(m.actor, parts)?;
    let n = stats.len() as f64;
    let loss = policy_loss_value(m, c, batch)?;
    Ok((
        PolicyStats {
            entropy: stats.iter().map(|s| s.entropy).sum::<f64>() / n,
            target_entropy: stats.iter().map(|s| s.target).sum::<f64>() / n,
            kl: stats.iter().map(|s| s.kl).sum::<f64>() / n,
        },
        LossGrad { loss, grads },
    ))
}

/// Policy loss value computed from eager forward passes.
pub fn policy_loss_value(m: Models<'_>, c: &Coefficients, batch: &[&Transition]) -> Result<f64> {
    let vals = par::map_range(batch.len(), |i| -> Result<f64> {
        let s = &batch[i].state;
        let input = StateInput::new(m.game, s);
        let probs = nets::actor_distribution(m.actor, &input, m.mask)?;
        let tables = nets::critic_tables(m.critic, &input, m.mask)?;
        let refs = references(m.game, s, &input)?;
        let terms = joint_terms(&probs, &refs)?;
        let mut v = -c.alpha() * terms.entropy + c.beta() * terms.kl;
        for (p, t) in probs.iter().zip(&tables) {
            v -= p.iter().zip(t[0].iter().zip(&t[1])).map(|(pi, (a, b))| pi * a.min(*b)).sum::<f64>();
        }
        Ok(v)
    });
    let mut total = 0.0;
    for v in vals {
        total += v?;
    }
    Ok(total / batch.len() as f64)
}

fn bc_sample(m: Models<'_>, s: &GameState) -> Result<(f64, Vec<Option<Tensor>>)> {
    let input = StateInput::new(m.game, s);
    let refs = references(m.game, s, &input)?;
    let mut tape = Tape::new(m.actor.values());
    let rows = nets::actor_forward(&mut tape, m.actor, &input, m.mask)?;
    let mut total: Option<Var> = None;
    for (lp, r) in rows.iter().zip(&refs) {
        let rv = tape.constant(Tensor::row_vector(r.clone()));
        let prod = tape.mul(rv, *lp)?;
        let ce = tape.sum(prod);
        let ce = tape.scale(ce, -1.0);
        total = Some(match total {
            None => ce,
            Some(prev) => tape.add(prev, ce)?,
        });
    }
    let Some(total) = total else {
        return Ok((0.0, vec![None; m.actor.values().len()]));
    };
    let v = tape.value(total).item();
    Ok((v, tape.backward(total)?.into_params()))
}

/// Cross-entropy to the reference actions, summed over agents and
/// averaged over the batch.
pub fn bc_loss(m: Models<'_>, batch: &[&Transition]) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let parts = par::map_range(batch.len(), |i| bc_sample(m, &batch[i].state));
    let (stats, grads) = reduce(m.actor, parts)?;
    Ok(LossGrad {
        loss: stats.iter().sum::<f64>() / stats.len() as f64,
        grads,
    })
}

/// Adam with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(ps: &ParameterSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zero_grads(ps),
            v: zero_grads(ps),
        }
    }

    pub fn step(&mut self, ps: &mut ParameterSet, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in ps.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// What one call of [`Learner::train_step`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// True when the buffer held fewer transitions than a batch.
    pub skipped: bool,
    pub critic1_loss: f64,
    pub critic2_loss: f64,
    pub policy_loss: f64,
    pub alpha_before: f64,
    pub alpha: f64,
    pub beta_before: f64,
    pub beta: f64,
    pub entropy: f64,
    pub target_entropy: f64,
    pub kl: f64,
}

/// Owns the networks, optimizers and coefficients of one training run.
#[derive(Debug, Clone)]
pub struct Learner {
    pub game: Game,
    pub mask: Arc<[bool]>,
    pub cfg: TrainerConfig,
    pub actor: ParameterSet,
    pub critic: ParameterSet,
    pub target: ParameterSet,
    pub coeffs: Coefficients,
    actor_opt: Adam,
    critic_opt: Adam,
    rng: ChaCha8Rng,
}

impl Learner {
    pub fn new(game: Game, net: NetConfig, cfg: TrainerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = ParameterSet::init(net.clone(), NetKind::Actor, rng.next_u64())?;
        let critic = ParameterSet::init(net, NetKind::Critic, rng.next_u64())?;
        let target = critic.clone();
        Ok(Self {
            mask: nets::attention_mask(&game),
            game,
            coeffs: Coefficients::from_config(&cfg),
            actor_opt: Adam::new(&actor, cfg.lr),
            critic_opt: Adam::new(&critic, cfg.lr),
            actor,
            critic,
            target,
            cfg,
            rng,
        })
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            game: &self.game,
            mask: &self.mask,
            actor: &self.actor,
            critic: &self.critic,
            target: &self.target,
        }
    }

    fn idle(&self, skipped: bool) -> StepMetrics {
        let (a, b) = (self.coeffs.alpha(), self.coeffs.beta());
        StepMetrics {
            skipped,
            critic1_loss: 0.0,
            critic2_loss: 0.0,
            policy_loss: 0.0,
            alpha_before: a,
            alpha: a,
            beta_before: b,
            beta: b,
            entropy: 0.0,
            target_entropy: 0.0,
            kl: 0.0,
        }
    }

    /// One update: critics, then the policy, then the coefficients (from
    /// the statistics measured before the policy step), then the target
    /// critics.
    pub fn train_step(&mut self, buffer: &ReplayBuffer) -> Result<StepMetrics> {
        if self.cfg.mode == TrainerMode::Ref {
            return Ok(self.idle(false));
        }
        if buffer.len() < self.cfg.batch_size {
            return Ok(self.idle(true));
        }
        let batch = buffer.sample(self.cfg.batch_size, &mut self.rng);
        let mut out = self.idle(false);
        if self.cfg.mode == TrainerMode::Bc {
            let lg = bc_loss(self.models(), &batch)?;
            self.actor_opt.step(&mut self.actor, &lg.grads);
            out.policy_loss = lg.loss;
            return Ok(out);
        }
        let seed = self.rng.next_u64();
        let (losses, lg) = critic_loss(self.models(), &self.coeffs, &batch, seed)?;
        self.critic_opt.step(&mut self.critic, &lg.grads);
        let (stats, pg) = policy_loss(self.models(), &self.coeffs, &batch, self.cfg.kl_statistic)?;
        self.actor_opt.step(&mut self.actor, &pg.grads);
        dual_update(
            &mut self.coeffs,
            stats.entropy,
            stats.target_entropy,
            stats.kl,
            self.cfg.mode == TrainerMode::Arac,
        );
        self.target.soft_update_from(&self.critic, self.coeffs.tau)?;
        out.critic1_loss = losses[0];
        out.critic2_loss = losses[1];
        out.policy_loss = pg.loss;
        out.entropy = stats.entropy;
        out.target_entropy = stats.target_entropy;
        out.kl = stats.kl;
        out.alpha = self.coeffs.alpha();
        out.beta = self.coeffs.beta();
        Ok(out)
    }
}

/// Our team's actions from the actor: sampled, or the most probable
/// candidate (lowest index on ties) when `greedy`. Dead members stay put.
pub fn policy_actions(
    game: &Game,
    actor: &ParameterSet,
    mask: &Arc<[bool]>,
    s: &GameState,
    greedy: bool,
    rng: &mut impl Rng,
) -> Result<Vec<Action>> {
    let cfg = game.config();
    let input = StateInput::new(game, s);
    let probs = nets::actor_distribution(actor, &input, mask)?;
    let mut actions: Vec<Action> = cfg.members(Team::Ours).map(|k| Action::Move(s.positions[k])).collect();
    for (view, p) in input.agents.iter().zip(&probs) {
        let idx = if greedy {
            p.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
                .0
        } else {
            WeightedIndex::new(p).expect("softmax output is a distribution").sample(rng)
        };
        actions[view.agent] = view.candidates[idx].action;
    }
    Ok(actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::ScenarioConfig;
    use crate::graph::Graph;
    use crate::reference::scripted_opponents;
    use crate::tensor::grad_check_params;
    use proptest::prelude::{ProptestConfig, prop_assert, proptest};

    fn tiny_net(f: usize) -> NetConfig {
        NetConfig {
            d_model: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ff_mult: 2,
            critic_hidden: 4,
            feature_width: f,
        }
    }

    fn six_nodes(confrontation: bool) -> Game {
        let g = Graph::new(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)]).unwrap();
        let cfg = if confrontation {
            ScenarioConfig::confrontation(2)
        } else {
            ScenarioConfig::pursuit(2)
        };
        Game::new(cfg, g).unwrap()
    }

    fn learner(game: Game, cfg: TrainerConfig) -> Learner {
        let f = game.config().feature_width();
        Learner::new(game, tiny_net(f), cfg, 3).unwrap()
    }

    /// Random transitions from scripted-vs-random play.
    fn rollout(game: &Game, count: usize, seed: u64) -> Vec<Transition> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let mut s = game.reset(rng.next_u64()).unwrap();
        while out.len() < count {
            let ours: Vec<Action> = game
                .config()
                .members(Team::Ours)
                .map(|k| {
                    let legal = game.legal_actions(&s, k).unwrap();
                    legal[rng.random_range(0..legal.len())]
                })
                .collect();
            let theirs = scripted_opponents(game, &s).unwrap();
            let o = game.step(&s, &ours, &theirs).unwrap();
            let done = o.terminal && o.state.winner != crate::game::Winner::Timeout;
            out.push(Transition {
                state: s.clone(),
                actions: ours,
                reward: o.reward,
                next: o.state.clone(),
                done,
            });
            s = if o.terminal { game.reset(rng.next_u64()).unwrap() } else { o.state };
        }
        out
    }

    #[test]
    fn mode_and_defaults() {
        let c = TrainerConfig::default();
        assert_eq!((c.batch_size, c.buffer_capacity, c.lr), (128, 2000, 1e-5));
        assert_eq!((c.entropy_factor, c.target_kl), (0.05, 1.0));
        assert_eq!("BRAC".parse::<TrainerMode>().unwrap(), TrainerMode::Brac);
        assert!("sac".parse::<TrainerMode>().is_err());
    }

    #[test]
    fn joint_terms_cases() {
        let uniform = vec![0.25; 4];
        let one_hot = vec![0.0, 1.0, 0.0, 0.0];
        let t = joint_terms(std::slice::from_ref(&uniform), std::slice::from_ref(&one_hot)).unwrap();
        assert!((t.kl - 4f64.ln()).abs() < 1e-15);
        assert!((t.entropy - 4f64.ln()).abs() < 1e-15);
        let peaked = vec![0.999, 0.0005, 0.0005];
        let t = joint_terms(&[peaked], &[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!((t.kl + 0.999f64.ln()).abs() < 1e-15);
        let a = joint_terms(&[uniform.clone()], &[one_hot.clone()]).unwrap();
        let b = joint_terms(&[vec![0.5, 0.5]], &[vec![0.0, 1.0]]).unwrap();
        let both = joint_terms(&[uniform, vec![0.5, 0.5]], &[one_hot, vec![0.0, 1.0]]).unwrap();
        assert_eq!(both.kl, a.kl + b.kl);
        assert_eq!(
            joint_terms(&[vec![0.5, 0.5]], &[vec![1.0]]),
            Err(TrainError::SupportMismatch(2, 1))
        );
    }

    #[test]
    fn dual_stationary_and_signs() {
        let mut c = Coefficients::from_config(&TrainerConfig {
            dual_lr: 0.1,
            ..TrainerConfig::default()
        });
        let before = c;
        dual_update(&mut c, 0.3, 0.3, 1.0, true);
        assert_eq!(c, before);
        dual_update(&mut c, 0.3, 0.3, 2.0, true);
        assert!(c.beta() > before.beta());
        assert_eq!(c.alpha(), before.alpha());
        let b = c.beta();
        dual_update(&mut c, 0.5, 0.3, 0.5, true);
        assert!(c.beta() < b);
        assert!(c.alpha() < before.alpha());
        let frozen = c;
        dual_update(&mut c, 0.3, 0.3, 5.0, false);
        assert_eq!(c.log_beta.to_bits(), frozen.log_beta.to_bits());
    }

    #[test]
    fn buffer_is_bounded_fifo() {
        let game = six_nodes(false);
        let ts = rollout(&game, 30, 1);
        let mut buf = ReplayBuffer::new(10);
        for t in &ts {
            buf.push(t.clone());
        }
        assert_eq!(buf.len(), 10);
        assert_eq!(buf.get(0), &ts[20]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let picked = buf.sample(10, &mut rng);
        for i in 0..10 {
            for j in i + 1..10 {
                assert!(!std::ptr::eq(picked[i], picked[j]));
            }
        }
    }

    #[test]
    fn target_reductions() {
        let game = six_nodes(false);
        let l = learner(game, TrainerConfig::default());
        let mut ts = rollout(&l.game, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        ts[0].done = true;
        ts[0].reward = 7.5;
        assert_eq!(critic_target(l.models(), &l.coeffs, &ts[0], &mut rng).unwrap(), 7.5);
        let mut c = l.coeffs;
        c.gamma = 0.0;
        assert_eq!(critic_target(l.models(), &c, &ts[1], &mut rng).unwrap(), ts[1].reward);
    }

    #[test]
    fn critic_loss_matches_hand_evaluation() {
        let game = six_nodes(true);
        let l = learner(game, TrainerConfig::default());
        let ts = rollout(&l.game, 2, 3);
        let batch: Vec<&Transition> = ts.iter().collect();
        let m = l.models();
        let ([l1, l2], lg) = critic_loss(m, &l.coeffs, &batch, 99).unwrap();
        let mut expect = [0.0; 2];
        for t in &ts {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            rng.set_stream(transition_key(t));
            let y = critic_target(m, &l.coeffs, t, &mut rng).unwrap();
            let input = StateInput::new(&l.game, &t.state);
            let tables = nets::critic_tables(&l.critic, &input, &l.mask).unwrap();
            for j in 0..2 {
                let mut q = 0.0;
                for (k, view) in input.agents.iter().enumerate() {
                    let idx = view.candidates.iter().position(|c| c.action == t.actions[view.agent]).unwrap();
                    q += tables[k][j][idx];
                }
                expect[j] += 0.5 * (q - y) * (q - y) / 2.0;
            }
        }
        assert!((l1 - expect[0]).abs() < 1e-12 && (l2 - expect[1]).abs() < 1e-12);
        assert!((lg.loss - l1 - l2).abs() < 1e-15);
    }

    #[test]
    fn policy_loss_enumerates_actions() {
        // One pursuer, so the team expectation is a plain sum over actions.
        let g = Graph::new(5, &[(0, 1), (0, 2), (0, 3), (3, 4)]).unwrap();
        let game = Game::new(ScenarioConfig::pursuit(1), g).unwrap();
        let l = learner(game, TrainerConfig::default());
        let s = GameState {
            positions: vec![0, 4],
            hp: vec![3, 3],
            alive: vec![true, true],
            step: 0,
            terminal: false,
            winner: crate::game::Winner::None,
        };
        let t = Transition {
            state: s.clone(),
            actions: vec![Action::Move(1)],
            reward: 0.0,
            next: s.clone(),
            done: false,
        };
        let (stats, lg) = policy_loss(l.models(), &l.coeffs, &[&t], KlStatistic::Mean).unwrap();
        let input = StateInput::new(&l.game, &s);
        let p = &nets::actor_distribution(&l.actor, &input, &l.mask).unwrap()[0];
        let q = &nets::critic_tables(&l.critic, &input, &l.mask).unwrap()[0];
        assert_eq!(p.len(), 3);
        let (alpha, beta) = (l.coeffs.alpha(), l.coeffs.beta());
        let mut expect = 0.0;
        for a in 0..3 {
            expect += p[a] * (alpha * p[a].ln() - q[0][a].min(q[1][a]));
        }
        // reference chases 4 through node 3, the third candidate
        expect += beta * -p[2].ln();
        assert!((lg.loss - expect).abs() < 1e-12);
        assert!((stats.kl + p[2].ln()).abs() < 1e-12);
        assert!((stats.target_entropy - 0.05 * 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_beta_is_plain_soft_actor() {
        let game = six_nodes(true);
        let mut l = learner(game, TrainerConfig::default());
        l.coeffs.use_beta = false;
        let ts = rollout(&l.game, 4, 5);
        let batch: Vec<&Transition> = ts.iter().collect();
        let (_, lg) = policy_loss(l.models(), &l.coeffs, &batch, KlStatistic::Mean).unwrap();
        let mut expect = 0.0;
        for t in &ts {
            let input = StateInput::new(&l.game, &t.state);
            let ps = nets::actor_distribution(&l.actor, &input, &l.mask).unwrap();
            let qs = nets::critic_tables(&l.critic, &input, &l.mask).unwrap();
            for (p, q) in ps.iter().zip(&qs) {
                for a in 0..p.len() {
                    expect += p[a] * (l.coeffs.alpha() * p[a].ln() - q[0][a].min(q[1][a]));
                }
            }
        }
        assert!((lg.loss - expect / 4.0).abs() < 1e-12);
    }

    #[test]
    fn bc_loss_values() {
        let game = six_nodes(false);
        let mut l = learner(game, TrainerConfig::default());
        l.actor.zero_pointer();
        let ts = rollout(&l.game, 3, 6);
        let batch: Vec<&Transition> = ts.iter().collect();
        let lg = bc_loss(l.models(), &batch).unwrap();
        let mut expect = 0.0;
        for t in &ts {
            let input = StateInput::new(&l.game, &t.state);
            expect += input.agents.iter().map(|v| (v.candidates.len() as f64).ln()).sum::<f64>();
        }
        assert!((lg.loss - expect / 3.0).abs() < 1e-12);
        assert_eq!(bc_loss(l.models(), &[]).unwrap_err(), TrainError::EmptyBatch);
    }

    fn loss_grad_check(which: &str) -> f64 {
        let game = six_nodes(true);
        let l = learner(game, TrainerConfig::default());
        let ts = rollout(&l.game, 3, 7);
        let batch: Vec<&Transition> = ts.iter().collect();
        let c = l.coeffs;
        let models = l.models();
        match which {
            "critic" => {
                let ys: Vec<f64> = ts
                    .iter()
                    .map(|t| critic_target(models, &c, t, &mut ChaCha8Rng::seed_from_u64(0)).unwrap())
                    .collect();
                let coords: Vec<_> = l.critic.coordinates().into_iter().step_by(11).collect();
                grad_check_params::<_, TrainError>(
                    l.critic.values(),
                    &coords,
                    |tape| {
                        let mut total = None;
                        for (t, &y) in ts.iter().zip(&ys) {
                            let input = StateInput::new(&l.game, &t.state);
                            let rows = nets::critic_forward(tape, &l.critic, &input, &l.mask)?;
                            let mut picked = Vec::new();
                            for (k, view) in input.agents.iter().enumerate() {
                                let idx = candidate_index(&input, k, t.actions[view.agent])?;
                                picked.push(tape.gather_rows(rows[k][0], &[idx])?);
                            }
                            let st = tape.concat_rows(&picked)?;
                            let q = tape.sum(st);
                            let yv = tape.constant(Tensor::scalar(y));
                            let d = tape.sub(q, yv)?;
                            let sq = tape.mul(d, d)?;
                            total = Some(match total {
                                None => sq,
                                Some(p) => tape.add(p, sq)?,
                            });
                        }
                        Ok(total.unwrap())
                    },
                    1e-5,
                )
                .unwrap()
            }
            _ => {
                // Finite differences of the eager loss value against the
                // reduced analytic gradient.
                let lg = if which == "bc" {
                    bc_loss(models, &batch).unwrap()
                } else {
                    policy_loss(models, &c, &batch, KlStatistic::Mean).unwrap().1
                };
                let mut worst: f64 = 0.0;
                for (id, i) in l.actor.coordinates().into_iter().step_by(13) {
                    let eval = |delta: f64| {
                        let mut a = l.actor.clone();
                        a.values_mut()[id].data_mut()[i] += delta;
                        let m = Models { actor: &a, ..models };
                        if which == "bc" { bc_loss(m, &batch).unwrap().loss } else { policy_loss_value(m, &c, &batch).unwrap() }
                    };
                    let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                    let an = lg.grads[id][i];
                    worst = worst.max((an - fd).abs() / 1f64.max(an.abs()).max(fd.abs()));
                }
                worst
            }
        }
    }

    #[test]
    fn losses_pass_grad_check() {
        for which in ["critic", "policy", "bc"] {
            let err = loss_grad_check(which);
            assert!(err < 1e-4, "{which}: {err}");
        }
    }

    #[test]
    fn train_step_behaviour() {
        let game = six_nodes(true);
        let cfg = TrainerConfig {
            batch_size: 8,
            buffer_capacity: 64,
            lr: 1e-3,
            dual_lr: 1e-2,
            mode: TrainerMode::Brac,
            ..TrainerConfig::default()
        };
        let mut l = learner(game, cfg);
        let mut buf = ReplayBuffer::new(64);
        for t in rollout(&l.game, 5, 8) {
            buf.push(t);
        }
        assert!(l.train_step(&buf).unwrap().skipped);
        for t in rollout(&l.game, 40, 9) {
            buf.push(t);
        }
        let before_target = l.target.clone();
        let before_beta = l.coeffs.log_beta;
        let m = l.train_step(&buf).unwrap();
        assert!(!m.skipped);
        assert_eq!(l.coeffs.log_beta.to_bits(), before_beta.to_bits());
        assert_eq!(m.beta, m.beta_before);
        let tau = l.coeffs.tau;
        for ((a, b), c) in l.target.values().iter().zip(before_target.values()).zip(l.critic.values()) {
            for ((x, y), z) in a.data().iter().zip(b.data()).zip(c.data()) {
                assert!((x - y).abs() <= tau * (z - y).abs() + 1e-15);
            }
        }
        assert!(m.alpha > 0.0 && m.critic1_loss.is_finite() && m.policy_loss.is_finite());
    }

    #[test]
    fn arac_steps_obey_sign_laws() {
        let game = six_nodes(true);
        let cfg = TrainerConfig {
            batch_size: 8,
            buffer_capacity: 64,
            lr: 1e-3,
            dual_lr: 1e-2,
            ..TrainerConfig::default()
        };
        let mut l = learner(game, cfg);
        let mut buf = ReplayBuffer::new(64);
        for t in rollout(&l.game, 64, 10) {
            buf.push(t);
        }
        for _ in 0..5 {
            let m = l.train_step(&buf).unwrap();
            let da = m.alpha - m.alpha_before;
            let db = m.beta - m.beta_before;
            assert_eq!(da.signum(), (m.target_entropy - m.entropy).signum());
            assert_eq!(db.signum(), (m.kl - l.coeffs.target_kl).signum());
        }
    }

    #[test]
    fn ref_mode_never_updates() {
        let game = six_nodes(false);
        let cfg = TrainerConfig {
            batch_size: 4,
            buffer_capacity: 8,
            mode: TrainerMode::Ref,
            ..TrainerConfig::default()
        };
        let mut l = learner(game, cfg);
        let mut buf = ReplayBuffer::new(8);
        for t in rollout(&l.game, 8, 11) {
            buf.push(t);
        }
        let actor = l.actor.clone();
        l.train_step(&buf).unwrap();
        assert_eq!(l.actor.values(), actor.values());
    }

    #[test]
    fn batch_order_does_not_matter() {
        let game = six_nodes(true);
        let l = learner(game, TrainerConfig::default());
        let ts = rollout(&l.game, 6, 12);
        let fwd: Vec<&Transition> = ts.iter().collect();
        let rev: Vec<&Transition> = ts.iter().rev().collect();
        let a = policy_loss(l.models(), &l.coeffs, &fwd, KlStatistic::Mean).unwrap();
        let b = policy_loss(l.models(), &l.coeffs, &rev, KlStatistic::Mean).unwrap();
        assert!((a.1.loss - b.1.loss).abs() < 1e-12);
        let (ca, _) = critic_loss(l.models(), &l.coeffs, &fwd, 5).unwrap();
        let (cb, _) = critic_loss(l.models(), &l.coeffs, &rev, 5).unwrap();
        assert!((ca[0] - cb[0]).abs() < 1e-12 && (ca[1] - cb[1]).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn losses_are_finite(seed in 0u64..1000) {
            let game = six_nodes(seed % 2 == 0);
            let l = learner(game, TrainerConfig::default());
            let ts = rollout(&l.game, 4, seed);
            let batch: Vec<&Transition> = ts.iter().collect();
            let (cl, _) = critic_loss(l.models(), &l.coeffs, &batch, seed).unwrap();
            let (st, pl) = policy_loss(l.models(), &l.coeffs, &batch, KlStatistic::Mean).unwrap();
            let bl = bc_loss(l.models(), &batch).unwrap();
            prop_assert!(cl[0].is_finite() && cl[1].is_finite());
            prop_assert!(pl.loss.is_finite() && bl.loss.is_finite());
            prop_assert!(st.kl.is_finite() && st.kl >= 0.0);
        }
    }
}
