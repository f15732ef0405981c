//! Two-team zero-sum Markov games on a graph: pursuit and confrontation.
//!
//! Agent ids `0..m` belong to our team; the remaining ids belong to the
//! opponent team (one evader in pursuit, `m` agents in confrontation). Both
//! teams act simultaneously. Rewards are reported for our team only; the
//! opponent reward is always the negation.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{all_pairs_shortest_paths, DistanceMatrix, Graph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("cannot place {agents} agents on this graph")]
    PlacementImpossible { agents: usize },
    #[error("unknown agent {0}")]
    UnknownAgent(usize),
    #[error("illegal action {action} for agent {agent}")]
    IllegalAction { agent: usize, action: Action },
    #[error("expected {expected} actions for the {team:?} team, got {got}")]
    WrongActionCount { team: Team, expected: usize, got: usize },
    #[error("cannot step a terminal state")]
    SteppingTerminalState,
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("malformed episode log: {0}")]
    MalformedLog(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    Pursuit,
    Confrontation,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Pursuit => "pursuit",
            Scenario::Confrontation => "confrontation",
        })
    }
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pursuit" => Ok(Scenario::Pursuit),
            "confrontation" => Ok(Scenario::Confrontation),
            other => Err(format!("unknown scenario {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rewards {
    pub capture: f64,
    pub kill: f64,
    pub all_kill: f64,
}

impl Default for Rewards {
    fn default() -> Self {
        Self {
            capture: 30.0,
            kill: 3.0,
            all_kill: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    /// Size of our team (`m`).
    pub team_size: usize,
    pub initial_hp: u32,
    pub attack_range: u32,
    pub base_damage: u32,
    pub max_steps: u32,
    pub rewards: Rewards,
}

impl ScenarioConfig {
    pub fn pursuit(pursuers: usize) -> Self {
        Self {
            scenario: Scenario::Pursuit,
            team_size: pursuers,
            initial_hp: 3,
            attack_range: 2,
            base_damage: 1,
            max_steps: 128,
            rewards: Rewards::default(),
        }
    }

    pub fn confrontation(team_size: usize) -> Self {
        Self {
            scenario: Scenario::Confrontation,
            ..Self::pursuit(team_size)
        }
    }

    pub fn validate(&self) -> Result<(), GameError> {
        let bad = |msg: &str| Err(GameError::InvalidConfig(msg.to_string()));
        if self.team_size == 0 {
            return bad("team_size must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.initial_hp == 0 || self.base_damage == 0 {
            return bad("initial_hp and base_damage must be positive");
        }
        let r = self.rewards;
        if !(r.capture.is_finite() && r.kill.is_finite() && r.all_kill.is_finite()) {
            return bad("rewards must be finite");
        }
        Ok(())
    }

    pub fn our_count(&self) -> usize {
        self.team_size
    }

    pub fn opponent_count(&self) -> usize {
        match self.scenario {
            Scenario::Pursuit => 1,
            Scenario::Confrontation => self.team_size,
        }
    }

    pub fn agent_count(&self) -> usize {
        self.our_count() + self.opponent_count()
    }

    pub fn features_per_agent(&self) -> usize {
        match self.scenario {
            Scenario::Pursuit => 1,
            Scenario::Confrontation => 4,
        }
    }

    /// Column count `f` of the feature matrix.
    pub fn feature_width(&self) -> usize {
        self.agent_count() * self.features_per_agent()
    }

    pub fn team_of(&self, agent: usize) -> Team {
        if agent < self.team_size {
            Team::Ours
        } else {
            Team::Opponent
        }
    }

    /// Agent ids of `team`.
    pub fn members(&self, team: Team) -> std::ops::Range<usize> {
        match team {
            Team::Ours => 0..self.our_count(),
            Team::Opponent => self.our_count()..self.agent_count(),
        }
    }

    /// Compact `key=value` rendering used in log headers and digests.
    pub fn describe(&self) -> String {
        format!(
            "scenario={} team_size={} initial_hp={} attack_range={} base_damage={} max_steps={} r_capture={} r_kill={} r_all_kill={}",
            self.scenario,
            self.team_size,
            self.initial_hp,
            self.attack_range,
            self.base_damage,
            self.max_steps,
            self.rewards.capture,
            self.rewards.kill,
            self.rewards.all_kill
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Team {
    Ours,
    Opponent,
}

impl Team {
    pub fn other(self) -> Team {
        match self {
            Team::Ours => Team::Opponent,
            Team::Opponent => Team::Ours,
        }
    }
}

/// A single agent action. A no-op is a move onto the agent's own node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Move(usize),
    Attack(usize),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Move(v) => write!(f, "m{v}"),
            Action::Attack(j) => write!(f, "a{j}"),
        }
    }
}

impl FromStr for Action {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |rest: &str| rest.parse::<usize>().map_err(|_| format!("bad action {s:?}"));
        match s.split_at_checked(1) {
            Some(("m", rest)) => parse(rest).map(Action::Move),
            Some(("a", rest)) => parse(rest).map(Action::Attack),
            _ => Err(format!("bad action {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Winner {
    None,
    Ours,
    Opponent,
    Timeout,
    /// Both teams eliminated on the same step.
    Draw,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GameState {
    pub positions: Vec<usize>,
    pub hp: Vec<u32>,
    pub alive: Vec<bool>,
    pub step: u32,
    pub terminal: bool,
    pub winner: Winner,
}

impl GameState {
    pub fn alive_members(&self, cfg: &ScenarioConfig, team: Team) -> impl Iterator<Item = usize> + '_ {
        cfg.members(team).filter(move |&k| self.alive[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: GameState,
    /// Our-team reward; the opponent receives the negation.
    pub reward: f64,
    pub terminal: bool,
}

/// Potential attack damage between node pairs, `n * n` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DamageMatrix {
    n: usize,
    dmg: Vec<f64>,
    max_damage: f64,
}

impl DamageMatrix {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.dmg[u * self.n + v]
    }

    pub fn max_damage(&self) -> f64 {
        self.max_damage
    }
}

pub fn damage_potential(d: &DistanceMatrix, cfg: &ScenarioConfig) -> DamageMatrix {
    let n = d.node_count();
    let base = f64::from(cfg.base_damage);
    let mut dmg = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            if d.hops(u, v).is_some_and(|h| h <= cfg.attack_range) {
                dmg[u * n + v] = base;
            }
        }
    }
    DamageMatrix {
        n,
        dmg,
        max_damage: base,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    Distance,
    Damage,
    Hp,
    Alive,
}

/// Normalized global state: one row per node, a block of columns per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub layout: Vec<(usize, FeatureKind)>,
}

impl FeatureMatrix {
    pub fn get(&self, node: usize, col: usize) -> f64 {
        self.values[node * self.cols + col]
    }

    pub fn column_of(&self, agent: usize, kind: FeatureKind) -> Option<usize> {
        self.layout.iter().position(|&c| c == (agent, kind))
    }
}

/// A scenario bound to a map, with its distance and damage tables.
#[derive(Debug, Clone)]
pub struct Game {
    cfg: ScenarioConfig,
    graph: Arc<Graph>,
    dist: Arc<DistanceMatrix>,
    damage: Arc<DamageMatrix>,
}

impl Game {
    pub fn new(cfg: ScenarioConfig, graph: Graph) -> Result<Self, GameError> {
        cfg.validate()?;
        let dist = all_pairs_shortest_paths(&graph);
        let damage = damage_potential(&dist, &cfg);
        Ok(Self {
            cfg,
            graph: Arc::new(graph),
            dist: Arc::new(dist),
            damage: Arc::new(damage),
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn distances(&self) -> &DistanceMatrix {
        &self.dist
    }

    pub fn damage(&self) -> &DamageMatrix {
        &self.damage
    }

    /// Random distinct spawn nodes, deterministic in `seed`.
    pub fn reset(&self, seed: u64) -> Result<GameState, GameError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &self.cfg;
        let total = cfg.agent_count();
        let n = self.graph.node_count();
        let impossible = GameError::PlacementImpossible { agents: total };
        if n < total {
            return Err(impossible);
        }
        let positions = match cfg.scenario {
            Scenario::Confrontation => {
                let mut nodes: Vec<usize> = (0..n).collect();
                nodes.shuffle(&mut rng);
                nodes.truncate(total);
                nodes
            }
            Scenario::Pursuit => {
                // Every agent must be able to move, and no pursuer may start
                // within capture distance of the evader.
                let mut evader_nodes: Vec<usize> = (0..n).filter(|&v| self.graph.degree(v) > 0).collect();
                evader_nodes.shuffle(&mut rng);
                let mut placed = None;
                for &e in &evader_nodes {
                    let mut far: Vec<usize> = (0..n)
                        .filter(|&v| v != e && self.graph.degree(v) > 0)
                        .filter(|&v| self.dist.hops(v, e).is_none_or(|h| h > 1))
                        .collect();
                    if far.len() >= cfg.team_size {
                        far.shuffle(&mut rng);
                        far.truncate(cfg.team_size);
                        far.push(e);
                        placed = Some(far);
                        break;
                    }
                }
                placed.ok_or(impossible)?
            }
        };
        Ok(GameState {
            positions,
            hp: vec![cfg.initial_hp; total],
            alive: vec![true; total],
            step: 0,
            terminal: false,
            winner: Winner::None,
        })
    }

    /// Legal actions in canonical order: moves by ascending node id, then
    /// attacks by ascending agent id. Dead or stuck agents get a no-op.
    pub fn legal_actions(&self, s: &GameState, agent: usize) -> Result<Vec<Action>, GameError> {
        if agent >= self.cfg.agent_count() {
            return Err(GameError::UnknownAgent(agent));
        }
        let pos = s.positions[agent];
        if !s.alive[agent] {
            return Ok(vec![Action::Move(pos)]);
        }
        let mut actions: Vec<Action> = self
            .graph
            .neighbors(pos)
            .expect("positions are valid nodes")
            .iter()
            .map(|&v| Action::Move(v))
            .collect();
        if self.cfg.scenario == Scenario::Confrontation {
            let enemy_team = self.cfg.team_of(agent).other();
            for j in s.alive_members(&self.cfg, enemy_team) {
                if self.damage.get(pos, s.positions[j]) > 0.0 {
                    actions.push(Action::Attack(j));
                }
            }
        }
        if actions.is_empty() {
            actions.push(Action::Move(pos));
        }
        Ok(actions)
    }

    fn check_team(&self, s: &GameState, team: Team, actions: &[Action]) -> Result<(), GameError> {
        let members = self.cfg.members(team);
        if actions.len() != members.len() {
            return Err(GameError::WrongActionCount {
                team,
                expected: members.len(),
                got: actions.len(),
            });
        }
        for (agent, &action) in members.zip(actions) {
            if !self.legal_actions(s, agent)?.contains(&action) {
                return Err(GameError::IllegalAction { agent, action });
            }
        }
        Ok(())
    }

    /// Resolves one simultaneous step. Moves happen first; attacks are then
    /// resolved against post-move positions, and every attacker alive at
    /// the start of the step deals its damage.
    pub fn step(&self, s: &GameState, ours: &[Action], theirs: &[Action]) -> Result<StepOutcome, GameError> {
        if s.terminal {
            return Err(GameError::SteppingTerminalState);
        }
        self.check_team(s, Team::Ours, ours)?;
        self.check_team(s, Team::Opponent, theirs)?;
        let cfg = &self.cfg;
        let joint: Vec<Action> = ours.iter().chain(theirs).copied().collect();
        let mut next = s.clone();
        for (agent, action) in joint.iter().enumerate() {
            if let Action::Move(v) = *action {
                if s.alive[agent] {
                    next.positions[agent] = v;
                }
            }
        }
        let mut reward = 0.0;
        match cfg.scenario {
            Scenario::Pursuit => {
                let evader = cfg.our_count();
                let captured = cfg
                    .members(Team::Ours)
                    .any(|p| self.dist.hops(next.positions[p], next.positions[evader]).is_some_and(|h| h <= 1));
                if captured {
                    reward += cfg.rewards.capture;
                    next.terminal = true;
                    next.winner = Winner::Ours;
                }
            }
            Scenario::Confrontation => {
                let mut incoming = vec![0u32; cfg.agent_count()];
                for (agent, action) in joint.iter().enumerate() {
                    if let Action::Attack(target) = *action {
                        if s.alive[agent]
                            && self.damage.get(next.positions[agent], next.positions[target]) > 0.0
                        {
                            incoming[target] += cfg.base_damage;
                        }
                    }
                }
                for (agent, &dmg) in incoming.iter().enumerate() {
                    if dmg == 0 || !next.alive[agent] {
                        continue;
                    }
                    next.hp[agent] = next.hp[agent].saturating_sub(dmg);
                    if next.hp[agent] == 0 {
                        next.alive[agent] = false;
                        match cfg.team_of(agent) {
                            Team::Opponent => reward += cfg.rewards.kill,
                            Team::Ours => reward -= cfg.rewards.kill,
                        }
                    }
                }
                let ours_left = next.alive_members(cfg, Team::Ours).count();
                let theirs_left = next.alive_members(cfg, Team::Opponent).count();
                let winner = match (ours_left, theirs_left) {
                    (0, 0) => Some(Winner::Draw),
                    (_, 0) => Some(Winner::Ours),
                    (0, _) => Some(Winner::Opponent),
                    _ => None,
                };
                if let Some(w) = winner {
                    if theirs_left == 0 {
                        reward += cfg.rewards.all_kill;
                    }
                    if ours_left == 0 {
                        reward -= cfg.rewards.all_kill;
                    }
                    next.terminal = true;
                    next.winner = w;
                }
            }
        }
        next.step += 1;
        if !next.terminal && next.step >= cfg.max_steps {
            next.terminal = true;
            next.winner = Winner::Timeout;
        }
        Ok(StepOutcome {
            terminal: next.terminal,
            state: next,
            reward,
        })
    }

    /// Global feature matrix with every entry in `[0, 1]`.
    pub fn featurize(&self, s: &GameState) -> FeatureMatrix {
        let cfg = &self.cfg;
        let n = self.graph.node_count();
        let kinds: &[FeatureKind] = match cfg.scenario {
            Scenario::Pursuit => &[FeatureKind::Distance],
            Scenario::Confrontation => &[
                FeatureKind::Distance,
                FeatureKind::Damage,
                FeatureKind::Hp,
                FeatureKind::Alive,
            ],
        };
        let layout: Vec<(usize, FeatureKind)> = (0..cfg.agent_count())
            .flat_map(|k| kinds.iter().map(move |&kind| (k, kind)))
            .collect();
        let cols = layout.len();
        let mut values = vec![0.0; n * cols];
        let max_damage = self.damage.max_damage();
        for (col, &(agent, kind)) in layout.iter().enumerate() {
            let pos = s.positions[agent];
            let alive = s.alive[agent];
            for node in 0..n {
                let v = match kind {
                    FeatureKind::Distance if !alive => 1.0,
                    FeatureKind::Distance => self.dist.normalized(pos, node),
                    FeatureKind::Damage if !alive || max_damage <= 0.0 => 0.0,
                    FeatureKind::Damage => self.damage.get(pos, node) / max_damage,
                    FeatureKind::Hp => f64::from(s.hp[agent]) / f64::from(cfg.initial_hp),
                    FeatureKind::Alive => f64::from(u8::from(alive)),
                };
                values[node * cols + col] = v.clamp(0.0, 1.0);
            }
        }
        FeatureMatrix {
            rows: n,
            cols,
            values,
            layout,
        }
    }
}

/// One logged step of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedStep {
    pub t: u32,
    pub ours: Vec<Action>,
    pub theirs: Vec<Action>,
    pub reward: f64,
}

/// Line-oriented episode record: a header followed by one line per step,
/// `t=<k> ours=<a,b> theirs=<c> r=<reward>`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub map_digest: String,
    pub config: String,
    pub seed: u64,
    pub steps: Vec<LoggedStep>,
}

impl EpisodeLog {
    pub fn new(game: &Game, seed: u64) -> Self {
        Self {
            map_digest: game.graph().digest(),
            config: game.config().describe(),
            seed,
            steps: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let join = |a: &[Action]| a.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut out = format!("# map={} seed={} {}\n", self.map_digest, self.seed, self.config);
        for s in &self.steps {
            out.push_str(&format!(
                "t={} ours={} theirs={} r={}\n",
                s.t,
                join(&s.ours),
                join(&s.theirs),
                s.reward
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, GameError> {
        let bad = |m: String| GameError::MalformedLog(m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty log".into()))?;
        let header = header.strip_prefix("# ").ok_or_else(|| bad("missing header".into()))?;
        let mut map_digest = None;
        let mut seed = None;
        let mut config = Vec::new();
        for tok in header.split_whitespace() {
            match tok.split_once('=') {
                Some(("map", v)) => map_digest = Some(v.to_string()),
                Some(("seed", v)) => seed = Some(v.parse().map_err(|_| bad(format!("bad seed {v}")))?),
                Some(_) => config.push(tok),
                None => return Err(bad(format!("bad header token {tok}"))),
            }
        }
        let actions = |v: &str| -> Result<Vec<Action>, GameError> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|a| a.parse().map_err(bad)).collect()
        };
        let mut steps = Vec::new();
        for line in lines {
            let mut t = None;
            let mut ours = None;
            let mut theirs = None;
            let mut reward = None;
            for tok in line.split_whitespace() {
                match tok.split_once('=') {
                    Some(("t", v)) => t = v.parse().ok(),
                    Some(("ours", v)) => ours = Some(actions(v)?),
                    Some(("theirs", v)) => theirs = Some(actions(v)?),
                    Some(("r", v)) => reward = v.parse().ok(),
                    _ => return Err(bad(format!("bad step token {tok}"))),
                }
            }
            match (t, ours, theirs, reward) {
                (Some(t), Some(ours), Some(theirs), Some(reward)) => steps.push(LoggedStep {
                    t,
                    ours,
                    theirs,
                    reward,
                }),
                _ => return Err(bad(format!("incomplete step line {line:?}"))),
            }
        }
        Ok(Self {
            map_digest: map_digest.ok_or_else(|| bad("missing map digest".into()))?,
            config: config.join(" "),
            seed: seed.ok_or_else(|| bad("missing seed".into()))?,
            steps,
        })
    }

    /// Replays the log from its seed, checking every logged reward.
    pub fn replay(&self, game: &Game) -> Result<Vec<GameState>, GameError> {
        if self.map_digest != game.graph().digest() {
            return Err(GameError::MalformedLog("map digest mismatch".into()));
        }
        let mut state = game.reset(self.seed)?;
        let mut states = vec![state.clone()];
        for s in &self.steps {
            let out = game.step(&state, &s.ours, &s.theirs)?;
            if out.reward != s.reward {
                return Err(GameError::MalformedLog(format!(
                    "reward mismatch at t={}: logged {} replayed {}",
                    s.t, s.reward, out.reward
                )));
            }
            state = out.state;
            states.push(state.clone());
        }
        Ok(states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn path(n: usize) -> Graph {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        Graph::new(n, &edges).unwrap()
    }

    fn state(positions: Vec<usize>, hp: u32) -> GameState {
        let k = positions.len();
        GameState {
            positions,
            hp: vec![hp; k],
            alive: vec![true; k],
            step: 0,
            terminal: false,
            winner: Winner::None,
        }
    }

    #[test]
    fn reset_is_deterministic_and_places_everyone() {
        let game = Game::new(ScenarioConfig::pursuit(2), path(10)).unwrap();
        let a = game.reset(7).unwrap();
        assert_eq!(a, game.reset(7).unwrap());
        assert_eq!(a.positions.len(), 3);
        assert!(a.alive.iter().all(|&x| x));
        for p in 0..2 {
            assert!(game.distances().hops(a.positions[p], a.positions[2]).unwrap() > 1);
        }
        let mut sorted = a.positions.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
    }

    #[test]
    fn placement_impossible_on_tiny_graph() {
        let game = Game::new(ScenarioConfig::confrontation(3), path(2)).unwrap();
        assert_eq!(game.reset(0), Err(GameError::PlacementImpossible { agents: 6 }));
        // three nodes in a path: the evader cannot be two hops from both pursuers
        let game = Game::new(ScenarioConfig::pursuit(2), path(3)).unwrap();
        assert!(game.reset(0).is_err());
    }

    #[test]
    fn legal_actions_in_canonical_order() {
        let star = Graph::new(4, &[(0, 3), (0, 1), (0, 2)]).unwrap();
        let game = Game::new(ScenarioConfig::pursuit(1), star).unwrap();
        let s = state(vec![0, 3], 3);
        assert_eq!(
            game.legal_actions(&s, 0).unwrap(),
            vec![Action::Move(1), Action::Move(2), Action::Move(3)]
        );
        assert_eq!(game.legal_actions(&s, 9), Err(GameError::UnknownAgent(9)));
    }

    #[test]
    fn confrontation_attack_within_range() {
        let game = Game::new(ScenarioConfig::confrontation(1), path(6)).unwrap();
        let s = state(vec![1, 3], 3);
        let expected = vec![Action::Move(0), Action::Move(2), Action::Attack(1)];
        assert_eq!(game.legal_actions(&s, 0).unwrap(), expected);
        let far = state(vec![0, 3], 3);
        assert_eq!(game.legal_actions(&far, 0).unwrap(), vec![Action::Move(1)]);
        let mut dead = s.clone();
        dead.alive[0] = false;
        dead.hp[0] = 0;
        assert_eq!(game.legal_actions(&dead, 0).unwrap(), vec![Action::Move(1)]);
    }

    #[test]
    fn capture_ends_episode_with_reward() {
        let game = Game::new(ScenarioConfig::pursuit(1), path(5)).unwrap();
        let s = state(vec![0, 3], 3);
        let out = game.step(&s, &[Action::Move(1)], &[Action::Move(2)]).unwrap();
        assert!(out.terminal);
        assert_eq!(out.reward, 30.0);
        assert_eq!(out.state.winner, Winner::Ours);
    }

    #[test]
    fn swap_passes_through() {
        let game = Game::new(ScenarioConfig::pursuit(1), path(6)).unwrap();
        let s = state(vec![1, 4], 3);
        let out = game.step(&s, &[Action::Move(2)], &[Action::Move(5)]).unwrap();
        assert!(!out.terminal);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn last_kill_pays_kill_plus_all_kill() {
        let game = Game::new(ScenarioConfig::confrontation(3), path(10)).unwrap();
        let mut s = state(vec![0, 1, 2, 3, 4, 5], 3);
        for k in [4, 5] {
            s.alive[k] = false;
            s.hp[k] = 0;
        }
        s.hp[3] = 1;
        let ours = [Action::Move(1), Action::Move(0), Action::Attack(3)];
        let theirs = [Action::Attack(2), Action::Move(4), Action::Move(5)];
        let out = game.step(&s, &ours, &theirs).unwrap();
        assert_eq!(out.reward, 23.0);
        assert_eq!(out.state.winner, Winner::Ours);
        // the dying agent still hits back this step
        assert_eq!(out.state.hp[2], 2);
    }

    #[test]
    fn timeout_on_last_step() {
        let mut cfg = ScenarioConfig::confrontation(1);
        cfg.max_steps = 5;
        let g = Graph::new(4, &[(0, 1)]).unwrap();
        let game = Game::new(cfg, g).unwrap();
        let mut s = state(vec![2, 3], 3);
        s.step = 4;
        let out = game.step(&s, &[Action::Move(2)], &[Action::Move(3)]).unwrap();
        assert!(out.terminal);
        assert_eq!(out.state.winner, Winner::Timeout);
        assert_eq!(out.reward, 0.0);
        assert_eq!(
            game.step(&out.state, &[Action::Move(2)], &[Action::Move(3)]),
            Err(GameError::SteppingTerminalState)
        );
    }

    #[test]
    fn illegal_action_rejected() {
        let game = Game::new(ScenarioConfig::pursuit(1), path(5)).unwrap();
        let s = state(vec![0, 3], 3);
        assert!(matches!(
            game.step(&s, &[Action::Move(2)], &[Action::Move(2)]),
            Err(GameError::IllegalAction { agent: 0, .. })
        ));
    }

    #[test]
    fn damage_potential_follows_range() {
        let g = Graph::new(5, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let game = Game::new(ScenarioConfig::confrontation(1), g).unwrap();
        let dm = game.damage();
        assert_eq!(dm.get(0, 0), 1.0);
        assert_eq!(dm.get(0, 2), 1.0);
        assert_eq!(dm.get(0, 3), 0.0);
        assert_eq!(dm.get(0, 4), 0.0);
    }

    #[test]
    fn pursuit_features_on_path() {
        let game = Game::new(ScenarioConfig::pursuit(1), path(4)).unwrap();
        let f = game.featurize(&state(vec![0, 3], 3));
        assert_eq!(f.cols, 2);
        let col: Vec<f64> = (0..4).map(|i| f.get(i, 0)).collect();
        assert_eq!(col, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(f.get(3, 1), 0.0);
    }

    #[test]
    fn confrontation_features() {
        let game = Game::new(ScenarioConfig::confrontation(1), path(4)).unwrap();
        let mut s = state(vec![0, 3], 3);
        s.alive[1] = false;
        s.hp[1] = 0;
        let f = game.featurize(&s);
        assert_eq!(f.cols, 8);
        let hp = f.column_of(0, FeatureKind::Hp).unwrap();
        assert!((0..4).all(|i| f.get(i, hp) == 1.0));
        let dead_dist = f.column_of(1, FeatureKind::Distance).unwrap();
        assert!((0..4).all(|i| f.get(i, dead_dist) == 1.0));
        let alive = f.column_of(1, FeatureKind::Alive).unwrap();
        assert!((0..4).all(|i| f.get(i, alive) == 0.0));
    }

    fn random_episode(game: &Game, seed: u64) -> (EpisodeLog, Vec<GameState>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let mut s = game.reset(seed).unwrap();
        let mut log = EpisodeLog::new(game, seed);
        let mut states = vec![s.clone()];
        while !s.terminal {
            let pick = |team: Team, rng: &mut ChaCha8Rng| -> Vec<Action> {
                game.config()
                    .members(team)
                    .map(|k| {
                        let acts = game.legal_actions(&s, k).unwrap();
                        acts[rng.random_range(0..acts.len())]
                    })
                    .collect()
            };
            let ours = pick(Team::Ours, &mut rng);
            let theirs = pick(Team::Opponent, &mut rng);
            let out = game.step(&s, &ours, &theirs).unwrap();
            log.steps.push(LoggedStep {
                t: s.step,
                ours,
                theirs,
                reward: out.reward,
            });
            s = out.state;
            states.push(s.clone());
        }
        (log, states)
    }

    #[test]
    fn episode_logs_replay_identically() {
        let ring: Vec<_> = (0..12).map(|i| (i, (i + 1) % 12)).collect();
        let game = Game::new(ScenarioConfig::confrontation(3), Graph::new(12, &ring).unwrap()).unwrap();
        for seed in 0..20 {
            let (log, states) = random_episode(&game, seed);
            let parsed = EpisodeLog::parse(&log.to_text()).unwrap();
            assert_eq!(parsed, log);
            assert_eq!(parsed.replay(&game).unwrap(), states);
        }
    }

    #[test]
    fn invariants_over_random_episodes() {
        let ring: Vec<_> = (0..10).map(|i| (i, (i + 1) % 10)).chain([(0, 5)]).collect();
        let g = Graph::new(10, &ring).unwrap();
        for cfg in [ScenarioConfig::pursuit(2), ScenarioConfig::confrontation(3)] {
            let game = Game::new(cfg, g.clone()).unwrap();
            for seed in 0..50 {
                let (_, states) = random_episode(&game, seed);
                let mut deaths = vec![0; game.config().agent_count()];
                for w in states.windows(2) {
                    for k in 0..deaths.len() {
                        if w[0].alive[k] && !w[1].alive[k] {
                            deaths[k] += 1;
                        }
                        assert!(w[1].alive[k] || !w[0].alive[k] || w[1].hp[k] == 0);
                    }
                }
                for s in &states {
                    let f = game.featurize(s);
                    assert!(f.values.iter().all(|v| (0.0..=1.0).contains(v)));
                    if game.config().scenario == Scenario::Confrontation {
                        for k in 0..deaths.len() {
                            assert_eq!(s.alive[k], s.hp[k] > 0);
                        }
                    }
                }
                assert!(deaths.iter().all(|&d| d <= 1));
            }
        }
    }
}
