//! Scripted policies: the reference policies used as KL anchors and the
//! heuristic opponents used during training and evaluation.

use thiserror::Error;

use crate::game::{Action, Game, GameError, GameState, Scenario, Team};
use crate::graph::UNREACHABLE;

/// Range within which the confrontation script attacks instead of moving.
pub const SENSING_RANGE: u32 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReferenceError {
    #[error("agent {0} has no legal scripted action")]
    NoLegalAction(usize),
    #[error("reference policy does not apply: {0}")]
    WrongScenario(&'static str),
    #[error(transparent)]
    Game(#[from] GameError),
}

/// A distribution over an agent's legal actions. Scripted policies always
/// produce a one-hot distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDistribution {
    pub actions: Vec<Action>,
    pub probs: Vec<f64>,
}

impl ReferenceDistribution {
    fn one_hot(actions: Vec<Action>, chosen: Action) -> Self {
        let probs = actions.iter().map(|&a| if a == chosen { 1.0 } else { 0.0 }).collect();
        Self { actions, probs }
    }

    /// Index of the most probable action (the only one, for scripts).
    pub fn index(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }

    pub fn action(&self) -> Action {
        self.actions[self.index()]
    }
}

/// Neighbor minimising the hop count to `target`; lowest id on ties.
fn step_toward(game: &Game, from: usize, target: usize) -> Option<usize> {
    let d = game.distances();
    game.graph()
        .neighbors(from)
        .ok()?
        .iter()
        .copied()
        .min_by_key(|&v| (d.raw(v, target), v))
}

/// Shortest-path chase toward the evader's current node.
pub fn pursuit_reference(game: &Game, s: &GameState, agent: usize) -> Result<ReferenceDistribution, ReferenceError> {
    let cfg = game.config();
    if cfg.scenario != Scenario::Pursuit || cfg.team_of(agent) != Team::Ours {
        return Err(ReferenceError::WrongScenario("pursuit reference needs a pursuer"));
    }
    let legal = game.legal_actions(s, agent)?;
    let evader = s.positions[cfg.our_count()];
    let next = step_toward(game, s.positions[agent], evader).ok_or(ReferenceError::NoLegalAction(agent))?;
    Ok(ReferenceDistribution::one_hot(legal, Action::Move(next)))
}

/// Attack the closest living enemy within sensing range, otherwise move
/// along a shortest path toward the nearest living enemy.
pub fn confrontation_reference(
    game: &Game,
    s: &GameState,
    agent: usize,
) -> Result<ReferenceDistribution, ReferenceError> {
    let cfg = game.config();
    if cfg.scenario != Scenario::Confrontation {
        return Err(ReferenceError::WrongScenario("confrontation reference"));
    }
    let legal = game.legal_actions(s, agent)?;
    if !s.alive[agent] {
        return Ok(ReferenceDistribution::one_hot(legal.clone(), legal[0]));
    }
    let d = game.distances();
    let pos = s.positions[agent];
    let enemies: Vec<(u32, usize)> = s
        .alive_members(cfg, cfg.team_of(agent).other())
        .map(|j| (d.raw(pos, s.positions[j]), j))
        .collect();
    let nearest = enemies.iter().min().copied().ok_or(ReferenceError::NoLegalAction(agent))?;
    let attack = enemies
        .iter()
        .filter(|&&(h, j)| h <= SENSING_RANGE && legal.contains(&Action::Attack(j)))
        .min()
        .map(|&(_, j)| Action::Attack(j));
    let chosen = match attack {
        Some(a) => a,
        None if nearest.0 == UNREACHABLE || game.graph().degree(pos) == 0 => legal[0],
        None => Action::Move(step_toward(game, pos, s.positions[nearest.1]).expect("degree > 0")),
    };
    Ok(ReferenceDistribution::one_hot(legal, chosen))
}

/// Reference distribution for one of our agents in either scenario.
pub fn reference_for(game: &Game, s: &GameState, agent: usize) -> Result<ReferenceDistribution, ReferenceError> {
    match game.config().scenario {
        Scenario::Pursuit => pursuit_reference(game, s, agent),
        Scenario::Confrontation => confrontation_reference(game, s, agent),
    }
}

/// Evader move maximising the minimum hop count to every pursuer
/// (unreachable counts as infinitely far); lowest id on ties.
pub fn evader_heuristic(game: &Game, s: &GameState) -> Action {
    let cfg = game.config();
    let evader = cfg.our_count();
    let d = game.distances();
    let pos = s.positions[evader];
    let safety = |v: usize| cfg.members(Team::Ours).map(|p| d.raw(v, s.positions[p])).min().unwrap_or(UNREACHABLE);
    let best = game
        .graph()
        .neighbors(pos)
        .expect("valid node")
        .iter()
        .copied()
        .fold(None::<(u32, usize)>, |best, v| match best {
            Some((score, _)) if score >= safety(v) => best,
            _ => Some((safety(v), v)),
        });
    Action::Move(best.map_or(pos, |(_, v)| v))
}

/// The scripted opponent team: the evader heuristic in pursuit and the
/// confrontation reference script for every opponent in confrontation.
pub fn scripted_opponents(game: &Game, s: &GameState) -> Result<Vec<Action>, ReferenceError> {
    match game.config().scenario {
        Scenario::Pursuit => Ok(vec![evader_heuristic(game, s)]),
        Scenario::Confrontation => game
            .config()
            .members(Team::Opponent)
            .map(|j| {
                if s.alive[j] && s.alive_members(game.config(), Team::Ours).next().is_some() {
                    confrontation_reference(game, s, j).map(|r| r.action())
                } else {
                    Ok(Action::Move(s.positions[j]))
                }
            })
            .collect(),
    }
}

/// Our team acting with the reference policy.
pub fn scripted_ours(game: &Game, s: &GameState) -> Result<Vec<Action>, ReferenceError> {
    game.config()
        .members(Team::Ours)
        .map(|k| {
            if s.alive[k] {
                reference_for(game, s, k).map(|r| r.action())
            } else {
                Ok(Action::Move(s.positions[k]))
            }
        })
        .collect()
}
