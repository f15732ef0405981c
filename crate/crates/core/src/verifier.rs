//! Numerical checks of the regularized Bellman operator on small explicit
//! MDPs: sup-norm contraction, one-step policy improvement and monotone
//! regularized policy iteration.
//!
//! The regularizer is `Omega_s(pi) = alpha H(pi(.|s)) - beta KL(ref(.|s) || pi(.|s))`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use thiserror::Error;

use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0} did not converge within {1} iterations")]
    NonConvergence(&'static str, usize),
    #[error("singular evaluation system")]
    Singular,
}

pub type Result<T> = std::result::Result<T, VerifyError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    pub states: usize,
    pub actions: usize,
    /// `p[(s * actions + a) * states + s2]`
    pub p: Vec<f64>,
    /// `r[s * actions + a]`
    pub r: Vec<f64>,
    pub gamma: f64,
}

impl TabularMDP {
    pub fn prob(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.p[(s * self.actions + a) * self.states + s2]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.r[s * self.actions + a]
    }

    /// Dirichlet(1) transition rows and rewards uniform in `[-1, 1]`.
    pub fn random(states: usize, actions: usize, gamma: f64, rng: &mut impl Rng) -> Self {
        let mut p = Vec::with_capacity(states * actions * states);
        for _ in 0..states * actions {
            p.extend(dirichlet_one(states, rng));
        }
        let r = (0..states * actions).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self {
            states,
            actions,
            p,
            r,
            gamma,
        }
    }
}

fn dirichlet_one(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1).max(1e-300)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub states: usize,
    pub actions: usize,
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(states: usize, actions: usize) -> Self {
        Self {
            states,
            actions,
            probs: vec![1.0 / actions as f64; states * actions],
        }
    }

    /// Full-support policy with Dirichlet(1) rows.
    pub fn random(states: usize, actions: usize, rng: &mut impl Rng) -> Self {
        let probs = (0..states).flat_map(|_| dirichlet_one(actions, rng)).collect();
        Self { states, actions, probs }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.actions..(s + 1) * self.actions]
    }

    /// Largest total-variation distance between rows of the two policies.
    pub fn max_tv(&self, other: &TabularPolicy) -> f64 {
        (0..self.states)
            .map(|s| 0.5 * self.row(s).iter().zip(other.row(s)).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerSpec {
    pub alpha: f64,
    pub beta: f64,
    pub reference: TabularPolicy,
}

impl RegularizerSpec {
    /// `Omega` at one state for the distribution `mu`.
    pub fn omega(&self, s: usize, mu: &[f64]) -> f64 {
        let ent: f64 = -mu.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
        let mut v = self.alpha * ent;
        if self.beta > 0.0 {
            let kl: f64 = self
                .reference
                .row(s)
                .iter()
                .zip(mu)
                .filter(|(r, _)| **r > 0.0)
                .map(|(r, m)| r * (r.ln() - m.ln()))
                .sum();
            v -= self.beta * kl;
        }
        v
    }
}

fn check(q: &[f64], pi: &TabularPolicy, mdp: &TabularMDP) -> Result<()> {
    let n = mdp.states * mdp.actions;
    if q.len() != n || pi.probs.len() != n {
        return Err(VerifyError::ShapeMismatch(format!(
            "q has {}, policy {}, expected {n}",
            q.len(),
            pi.probs.len()
        )));
    }
    Ok(())
}

/// `Q'(s,a) = r(s,a) + gamma sum_s2 P(s2|s,a) (sum_a2 pi(a2|s2) Q(s2,a2) + Omega_s2(pi))`
pub fn bellman_apply(q: &[f64], pi: &TabularPolicy, mdp: &TabularMDP, reg: &RegularizerSpec) -> Result<Vec<f64>> {
    check(q, pi, mdp)?;
    let (ns, na) = (mdp.states, mdp.actions);
    let soft: Vec<f64> = (0..ns)
        .map(|s| {
            let row = pi.row(s);
            row.iter().zip(&q[s * na..(s + 1) * na]).map(|(p, x)| p * x).sum::<f64>() + reg.omega(s, row)
        })
        .collect();
    let mut out = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let next: f64 = (0..ns).map(|s2| mdp.prob(s, a, s2) * soft[s2]).sum();
            out.push(mdp.reward(s, a) + mdp.gamma * next);
        }
    }
    Ok(out)
}

/// Exact regularized values of `pi`: solves
/// `(I - gamma P_pi) V = r_pi + Omega(pi)` and returns `(V, Q)`.
pub fn evaluate(mdp: &TabularMDP, pi: &TabularPolicy, reg: &RegularizerSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let (ns, na) = (mdp.states, mdp.actions);
    check(&vec![0.0; ns * na], pi, mdp)?;
    let mut m = DMatrix::<f64>::identity(ns, ns);
    let mut b = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        let row = pi.row(s);
        b[s] = row.iter().enumerate().map(|(a, p)| p * mdp.reward(s, a)).sum::<f64>() + reg.omega(s, row);
        for s2 in 0..ns {
            let pp: f64 = row.iter().enumerate().map(|(a, p)| p * mdp.prob(s, a, s2)).sum();
            m[(s, s2)] -= mdp.gamma * pp;
        }
    }
    let v = m.lu().solve(&b).ok_or(VerifyError::Singular)?;
    let v: Vec<f64> = v.iter().copied().collect();
    let mut q = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            q.push(mdp.reward(s, a) + mdp.gamma * (0..ns).map(|s2| mdp.prob(s, a, s2) * v[s2]).sum::<f64>());
        }
    }
    Ok((v, q))
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest `||T Q1 - T Q2|| / ||Q1 - Q2||` (sup norms) over `trials`
/// random pairs with entries uniform in `[-10, 10]`.
pub fn contraction_check(
    mdp: &TabularMDP,
    pi: &TabularPolicy,
    reg: &RegularizerSpec,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let n = mdp.states * mdp.actions;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let q1: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let q2: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let denom = sup_dist(&q1, &q2);
        if denom == 0.0 {
            continue;
        }
        let t1 = bellman_apply(&q1, pi, mdp, reg)?;
        let t2 = bellman_apply(&q2, pi, mdp, reg)?;
        worst = worst.max(sup_dist(&t1, &t2) / denom);
    }
    Ok(worst)
}

/// Iteration cap of the inner simplex solver.
pub const EG_MAX_ITERS: usize = 100_000;
/// Objective tolerance of the inner solver, certified by the simplex
/// Frank-Wolfe gap.
pub const EG_TOL: f64 = 1e-10;

/// Maximizer over the simplex of `mu . q + alpha H(mu) - beta KL(ref || mu)`
/// for one state, with the number of iterations used.
pub fn argmax_regularized(q: &[f64], reference: &[f64], alpha: f64, beta: f64) -> Result<(Vec<f64>, usize)> {
    let k = q.len();
    if alpha == 0.0 && beta == 0.0 {
        let best = q
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
            .0;
        let mut mu = vec![0.0; k];
        mu[best] = 1.0;
        return Ok((mu, 0));
    }
    if beta == 0.0 {
        let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = q.iter().map(|x| ((x - max) / alpha).exp()).collect();
        let z: f64 = w.iter().sum();
        return Ok((w.into_iter().map(|x| x / z).collect(), 0));
    }
    let scale = q.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let eta = 0.5 / (scale + alpha + beta);
    let mut mu = vec![1.0 / k as f64; k];
    let mut g = vec![0.0; k];
    for it in 0..EG_MAX_ITERS {
        for a in 0..k {
            g[a] = q[a] - alpha * (mu[a].ln() + 1.0) + beta * reference[a] / mu[a];
        }
        let gmax = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let avg: f64 = mu.iter().zip(&g).map(|(m, x)| m * x).sum();
        if gmax - avg < EG_TOL {
            return Ok((mu, it));
        }
        let mut z = 0.0;
        for a in 0..k {
            mu[a] *= (eta * (g[a] - gmax)).exp();
            z += mu[a];
        }
        mu.iter_mut().for_each(|m| *m = (*m / z).max(f64::MIN_POSITIVE));
    }
    Err(VerifyError::NonConvergence("exponentiated gradient", EG_MAX_ITERS))
}

/// Per-state regularized greedy policy with respect to `q`.
pub fn improve_policy(q: &[f64], mdp: &TabularMDP, reg: &RegularizerSpec) -> Result<TabularPolicy> {
    let (ns, na) = (mdp.states, mdp.actions);
    let mut probs = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let (mu, _) = argmax_regularized(&q[s * na..(s + 1) * na], reg.reference.row(s), reg.alpha, reg.beta)?;
        probs.extend(mu);
    }
    Ok(TabularPolicy {
        states: ns,
        actions: na,
        probs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyIteration {
    pub policy: TabularPolicy,
    pub values: Vec<f64>,
    /// Values of every evaluated policy, starting with the initial one.
    pub trace: Vec<Vec<f64>>,
}

impl PolicyIteration {
    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }

    /// Smallest per-state change between consecutive trace entries.
    pub fn min_step(&self) -> f64 {
        self.trace
            .windows(2)
            .flat_map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect::<Vec<_>>())
            .fold(f64::INFINITY, f64::min)
    }
}

pub const PI_MAX_ITERS: usize = 1000;

/// Exact evaluation alternated with [`improve_policy`], from the uniform
/// policy, until successive values agree within `1e-9`.
pub fn policy_iteration(mdp: &TabularMDP, reg: &RegularizerSpec) -> Result<PolicyIteration> {
    let mut pi = TabularPolicy::uniform(mdp.states, mdp.actions);
    let (mut v, mut q) = evaluate(mdp, &pi, reg)?;
    let mut trace = vec![v.clone()];
    for _ in 0..PI_MAX_ITERS {
        let next = improve_policy(&q, mdp, reg)?;
        let (v2, q2) = evaluate(mdp, &next, reg)?;
        let delta = sup_dist(&v, &v2);
        trace.push(v2.clone());
        pi = next;
        v = v2;
        q = q2;
        if delta < 1e-9 {
            return Ok(PolicyIteration {
                policy: pi,
                values: v,
                trace,
            });
        }
    }
    Err(VerifyError::NonConvergence("policy iteration", PI_MAX_ITERS))
}

/// Optimal unregularized values by value iteration.
pub fn value_iteration(mdp: &TabularMDP, tol: f64) -> Vec<f64> {
    let (ns, na) = (mdp.states, mdp.actions);
    let mut v = vec![0.0; ns];
    loop {
        let next: Vec<f64> = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| mdp.reward(s, a) + mdp.gamma * (0..ns).map(|s2| mdp.prob(s, a, s2) * v[s2]).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let d = sup_dist(&v, &next);
        v = next;
        if d < tol {
            return v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateConfig {
    pub instances: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            max_states: 6,
            max_actions: 4,
            gamma: 0.9,
            alpha: 0.3,
            beta: 0.5,
            trials: 200,
            seed: 0,
        }
    }
}

/// Measurements on one random instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceReport {
    pub seed: u64,
    pub states: usize,
    pub actions: usize,
    pub max_ratio: f64,
    /// `min_s V^{pi'}(s) - V^pi(s)` for a random full-support `pi`.
    pub min_improvement: f64,
    pub iterations: usize,
    pub min_trace_step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub config: CertificateConfig,
    pub instances: Vec<InstanceReport>,
}

/// Checks one random instance drawn from `seed`.
pub fn certify_instance(cfg: &CertificateConfig, seed: u64) -> Result<InstanceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = rng.random_range(1..=cfg.max_states);
    let na = rng.random_range(2..=cfg.max_actions.max(2));
    let mdp = TabularMDP::random(ns, na, cfg.gamma, &mut rng);
    let reg = RegularizerSpec {
        alpha: cfg.alpha,
        beta: cfg.beta,
        reference: TabularPolicy::random(ns, na, &mut rng),
    };
    let pi = TabularPolicy::random(ns, na, &mut rng);
    let max_ratio = contraction_check(&mdp, &pi, &reg, cfg.trials, &mut rng)?;
    let (v, q) = evaluate(&mdp, &pi, &reg)?;
    let improved = improve_policy(&q, &mdp, &reg)?;
    let (v2, _) = evaluate(&mdp, &improved, &reg)?;
    let min_improvement = v2.iter().zip(&v).map(|(b, a)| b - a).fold(f64::INFINITY, f64::min);
    let pit = policy_iteration(&mdp, &reg)?;
    Ok(InstanceReport {
        seed,
        states: ns,
        actions: na,
        max_ratio,
        min_improvement,
        iterations: pit.iterations(),
        min_trace_step: pit.min_step(),
    })
}

/// Runs every instance; instances are independent and run in parallel.
pub fn certify(cfg: &CertificateConfig) -> Result<Certificate> {
    let results = par::map_range(cfg.instances, |i| certify_instance(cfg, cfg.seed.wrapping_add(i as u64)));
    let instances = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Certificate {
        config: cfg.clone(),
        instances,
    })
}

impl Certificate {
    pub fn max_ratio(&self) -> f64 {
        self.instances.iter().map(|r| r.max_ratio).fold(0.0, f64::max)
    }

    pub fn min_improvement(&self) -> f64 {
        self.instances.iter().map(|r| r.min_improvement).fold(f64::INFINITY, f64::min)
    }

    pub fn min_trace_step(&self) -> f64 {
        self.instances.iter().map(|r| r.min_trace_step).fold(f64::INFINITY, f64::min)
    }

    pub fn max_iterations(&self) -> usize {
        self.instances.iter().map(|r| r.iterations).max().unwrap_or(0)
    }

    pub fn contraction_holds(&self) -> bool {
        self.max_ratio() <= self.config.gamma + 1e-9
    }

    pub fn improvement_holds(&self) -> bool {
        self.min_improvement() >= -1e-9 && self.min_trace_step() >= -1e-9 && self.max_iterations() < 200
    }

    pub fn report(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# instances={} max_states={} max_actions={} gamma={} alpha={} beta={} trials={} seed={}",
            c.instances, c.max_states, c.max_actions, c.gamma, c.alpha, c.beta, c.trials, c.seed
        );
        let _ = writeln!(out, "seed states actions max_ratio min_improvement iterations min_trace_step");
        for r in &self.instances {
            let _ = writeln!(
                out,
                "{} {} {} {:.12} {:.3e} {} {:.3e}",
                r.seed, r.states, r.actions, r.max_ratio, r.min_improvement, r.iterations, r.min_trace_step
            );
        }
        let _ = writeln!(out, "max_contraction_ratio {:.12}", self.max_ratio());
        let _ = writeln!(out, "min_improvement_margin {:.3e}", self.min_improvement());
        let _ = writeln!(out, "min_trace_step {:.3e}", self.min_trace_step());
        let _ = writeln!(out, "max_iterations {}", self.max_iterations());
        let _ = writeln!(out, "contraction {}", if self.contraction_holds() { "ok" } else { "VIOLATED" });
        let _ = writeln!(out, "improvement {}", if self.improvement_holds() { "ok" } else { "VIOLATED" });
        out
    }
}
