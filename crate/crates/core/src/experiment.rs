//! Training runs, evaluation, self-play leagues and cross-map matrices.
//!
//! Every run directory is a function of the configuration file and the
//! seed: episode `k` of a run with master seed `s` resets the game and
//! samples actions from streams derived from `(s, k)` only.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::game::{Action, EpisodeLog, Game, GameError, GameState, LoggedStep, Scenario, ScenarioConfig, Winner};
use crate::graph::{Graph, GraphError};
use crate::nets::{self, Checkpoint, NetConfig, NetError, NetKind, ParameterSet};
use crate::par;
use crate::reference::{scripted_opponents, scripted_ours, ReferenceError};
use crate::tensor::Tensor;
use crate::trainer::{policy_actions, Learner, ReplayBuffer, StepMetrics, TrainError, TrainerMode, Transition};

/// Episodes between opponent refreshes in self-play.
pub const SNAPSHOT_EVERY: usize = 100;

const EVAL_STREAM: u64 = 0x5eed_e7a1;
const LEAGUE_STREAM: u64 = 0x1ea9_0e00;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path, e: std::io::Error) -> ExperimentError {
    ExperimentError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// splitmix64 of the pair; distinct episodes get unrelated streams.
pub fn episode_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index)
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn action_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn winner_name(w: Winner) -> &'static str {
    match w {
        Winner::None => "none",
        Winner::Ours => "ours",
        Winner::Opponent => "opponent",
        Winner::Timeout => "timeout",
        Winner::Draw => "draw",
    }
}

// ---------------------------------------------------------------------------
// acting

/// Who controls a team. `Scripted` is the reference policy for our team
/// and the scripted opponents for the other side; a network playing the
/// opponent side sees the state with the two teams swapped.
#[derive(Debug, Clone, Copy)]
pub enum TeamPolicy<'a> {
    Scripted,
    Net { params: &'a ParameterSet, greedy: bool },
}

/// The state seen from the opponent team: the two agent blocks trade
/// places. Confrontation only.
pub fn mirror_state(cfg: &ScenarioConfig, s: &GameState) -> GameState {
    let m = cfg.team_size;
    fn swap<T: Clone>(v: &[T], m: usize) -> Vec<T> {
        v[m..].iter().chain(&v[..m]).cloned().collect()
    }
    GameState {
        positions: swap(&s.positions, m),
        hp: swap(&s.hp, m),
        alive: swap(&s.alive, m),
        step: s.step,
        terminal: s.terminal,
        winner: Winner::None,
    }
}

pub fn mirror_action(cfg: &ScenarioConfig, a: Action) -> Action {
    let m = cfg.team_size;
    match a {
        Action::Attack(j) if j < m => Action::Attack(j + m),
        Action::Attack(j) => Action::Attack(j - m),
        mv => mv,
    }
}

pub fn our_actions(
    game: &Game,
    mask: &Arc<[bool]>,
    policy: TeamPolicy<'_>,
    s: &GameState,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Action>> {
    match policy {
        TeamPolicy::Scripted => Ok(scripted_ours(game, s)?),
        TeamPolicy::Net { params, greedy } => Ok(policy_actions(game, params, mask, s, greedy, rng)?),
    }
}

pub fn opponent_actions(
    game: &Game,
    mask: &Arc<[bool]>,
    policy: TeamPolicy<'_>,
    s: &GameState,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Action>> {
    let cfg = game.config();
    match policy {
        TeamPolicy::Scripted => Ok(scripted_opponents(game, s)?),
        TeamPolicy::Net { params, greedy } => {
            if cfg.scenario != Scenario::Confrontation {
                return Err(ExperimentError::ScenarioMismatch(
                    "learned opponents need the confrontation scenario".into(),
                ));
            }
            let mirrored = mirror_state(cfg, s);
            let acts = policy_actions(game, params, mask, &mirrored, greedy, rng)?;
            Ok(acts.into_iter().map(|a| mirror_action(cfg, a)).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub winner: Winner,
    pub steps: u32,
    pub ret: f64,
}

impl EpisodeOutcome {
    /// Capture in pursuit, opponents wiped out in confrontation.
    pub fn success(&self) -> bool {
        self.winner == Winner::Ours
    }
}

pub fn play_episode(
    game: &Game,
    mask: &Arc<[bool]>,
    ours: TeamPolicy<'_>,
    theirs: TeamPolicy<'_>,
    seed: u64,
    record: bool,
) -> Result<(EpisodeOutcome, Option<EpisodeLog>)> {
    let mut rng = action_rng(seed);
    let mut s = game.reset(seed)?;
    let mut log = record.then(|| EpisodeLog::new(game, seed));
    let mut ret = 0.0;
    while !s.terminal {
        let a = our_actions(game, mask, ours, &s, &mut rng)?;
        let b = opponent_actions(game, mask, theirs, &s, &mut rng)?;
        let out = game.step(&s, &a, &b)?;
        ret += out.reward;
        if let Some(log) = log.as_mut() {
            log.steps.push(LoggedStep {
                t: s.step,
                ours: a,
                theirs: b,
                reward: out.reward,
            });
        }
        s = out.state;
    }
    let outcome = EpisodeOutcome {
        seed,
        winner: s.winner,
        steps: s.step,
        ret,
    };
    Ok((outcome, log))
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub success_rate: f64,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub outcomes: Vec<EpisodeOutcome>,
}

impl EvalReport {
    fn from_outcomes(outcomes: Vec<EpisodeOutcome>) -> Self {
        let episodes = outcomes.len();
        let successes = outcomes.iter().filter(|o| o.success()).count();
        Self {
            success_rate: if episodes == 0 { 0.0 } else { successes as f64 / episodes as f64 },
            episodes,
            seeds: outcomes.iter().map(|o| o.seed).collect(),
            outcomes,
        }
    }

    pub fn successes(&self) -> usize {
        self.outcomes.iter().filter(|o| o.success()).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "episodes={} successes={} success_rate={}\n",
            self.episodes,
            self.successes(),
            self.success_rate
        );
        for o in &self.outcomes {
            let _ = writeln!(
                out,
                "seed={} winner={} steps={} return={}",
                o.seed,
                winner_name(o.winner),
                o.steps,
                o.ret
            );
        }
        out
    }
}

/// `episodes` independent episodes, run concurrently. Episode `i` uses the
/// seed `episode_seed(seed, i)`.
pub fn evaluate(
    game: &Game,
    ours: TeamPolicy<'_>,
    theirs: TeamPolicy<'_>,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_logged(game, ours, theirs, episodes, seed, false).map(|(r, _)| r)
}

pub fn evaluate_logged(
    game: &Game,
    ours: TeamPolicy<'_>,
    theirs: TeamPolicy<'_>,
    episodes: usize,
    seed: u64,
    record: bool,
) -> Result<(EvalReport, Vec<EpisodeLog>)> {
    let mask = nets::attention_mask(game);
    let runs = par::map_range(episodes, |i| {
        play_episode(game, &mask, ours, theirs, episode_seed(seed, i as u64), record)
    });
    let mut outcomes = Vec::with_capacity(episodes);
    let mut logs = Vec::new();
    for r in runs {
        let (o, log) = r?;
        outcomes.push(o);
        logs.extend(log);
    }
    Ok((EvalReport::from_outcomes(outcomes), logs))
}

// ---------------------------------------------------------------------------
// checkpoints

pub fn checkpoint_digest(net: &NetConfig, scenario: &ScenarioConfig) -> String {
    let text = format!("{};{}", net.describe(), scenario.describe());
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

pub fn learner_checkpoint(l: &Learner) -> Checkpoint {
    let mut entries = l.actor.to_entries("actor.");
    entries.extend(l.critic.to_entries("critic."));
    entries.extend(l.target.to_entries("target."));
    let coeffs = Tensor::row_vector(vec![l.coeffs.log_alpha, l.coeffs.log_beta]);
    entries.push(("coefficients".into(), coeffs));
    Checkpoint::new(checkpoint_digest(l.actor.config(), l.game.config()), entries)
}

fn check_digest(ckpt: &Checkpoint, net: &NetConfig, scenario: &ScenarioConfig) -> Result<()> {
    let want = checkpoint_digest(net, scenario);
    if ckpt.digest != want {
        return Err(ExperimentError::IncompatibleCheckpoint(format!(
            "digest {} does not match {want} for this configuration",
            ckpt.digest
        )));
    }
    Ok(())
}

pub fn load_actor(ckpt: &Checkpoint, net: &NetConfig, scenario: &ScenarioConfig) -> Result<ParameterSet> {
    check_digest(ckpt, net, scenario)?;
    ParameterSet::from_checkpoint(net.clone(), NetKind::Actor, ckpt, "actor.").map_err(|e| match e {
        NetError::IncompatibleCheckpoint(m) => ExperimentError::IncompatibleCheckpoint(m),
        other => other.into(),
    })
}

/// Restores networks and coefficients; optimizer moments start fresh.
pub fn restore_learner(l: &mut Learner, ckpt: &Checkpoint) -> Result<()> {
    let net = l.actor.config().clone();
    check_digest(ckpt, &net, l.game.config())?;
    l.actor = ParameterSet::from_checkpoint(net.clone(), NetKind::Actor, ckpt, "actor.")?;
    l.critic = ParameterSet::from_checkpoint(net.clone(), NetKind::Critic, ckpt, "critic.")?;
    l.target = ParameterSet::from_checkpoint(net, NetKind::Critic, ckpt, "target.")?;
    if let Some(c) = ckpt.get("coefficients") {
        l.coeffs.log_alpha = c.data()[0];
        l.coeffs.log_beta = c.data()[1];
    }
    Ok(())
}

pub fn load_game(cfg: &RunConfig) -> Result<Game> {
    let path = cfg
        .map
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("no map given".into()))?;
    let graph = crate::graph::load_map_file(path)?;
    Ok(Game::new(cfg.scenario_config(), graph)?)
}

// ---------------------------------------------------------------------------
// metrics

pub const METRICS_HEADER: &str = "episode,step,critic1_loss,critic2_loss,policy_loss,alpha,beta,entropy,kl,success_rate_eval";
pub const DUALS_HEADER: &str = "update,entropy,target_entropy,kl,target_kl,alpha_before,alpha,beta_before,beta";

/// One coefficient update as logged in `duals.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualRecord {
    pub update: usize,
    pub entropy: f64,
    pub target_entropy: f64,
    pub kl: f64,
    pub target_kl: f64,
    pub alpha_before: f64,
    pub alpha: f64,
    pub beta_before: f64,
    pub beta: f64,
}

impl DualRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.update,
            self.entropy,
            self.target_entropy,
            self.kl,
            self.target_kl,
            self.alpha_before,
            self.alpha,
            self.beta_before,
            self.beta
        )
    }

    pub fn parse_csv(text: &str) -> Result<Vec<Self>> {
        let bad = |i: usize| ExperimentError::Io(format!("duals csv line {}: malformed", i + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == DUALS_HEADER => {}
            _ => return Err(bad(0)),
        }
        lines
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 9 {
                    return Err(bad(i));
                }
                let x = |k: usize| f[k].parse::<f64>().map_err(|_| bad(i));
                Ok(Self {
                    update: f[0].parse().map_err(|_| bad(i))?,
                    entropy: x(1)?,
                    target_entropy: x(2)?,
                    kl: x(3)?,
                    target_kl: x(4)?,
                    alpha_before: x(5)?,
                    alpha: x(6)?,
                    beta_before: x(7)?,
                    beta: x(8)?,
                })
            })
            .collect()
    }
}

/// Updates whose coefficient moved against the sign law: the entropy
/// coefficient must rise when entropy is below target and fall when above;
/// the KL coefficient must rise when the KL exceeds its target and fall
/// when below. A step of exactly zero is never a violation.
pub fn sign_law_violations(records: &[DualRecord], beta_adaptive: bool) -> Vec<String> {
    let mut out = Vec::new();
    let against = |delta: f64, drive: f64| (delta > 0.0 && drive <= 0.0) || (delta < 0.0 && drive >= 0.0);
    for r in records {
        if against(r.alpha - r.alpha_before, r.target_entropy - r.entropy) {
            out.push(format!("update {}: alpha {} -> {} with entropy {} target {}", r.update, r.alpha_before, r.alpha, r.entropy, r.target_entropy));
        }
        let db = r.beta - r.beta_before;
        if beta_adaptive && against(db, r.kl - r.target_kl) {
            out.push(format!("update {}: beta {} -> {} with kl {} target {}", r.update, r.beta_before, r.beta, r.kl, r.target_kl));
        }
        if !beta_adaptive && db != 0.0 {
            out.push(format!("update {}: fixed beta moved", r.update));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeRow {
    pub episode: usize,
    pub step: usize,
    pub updates: usize,
    pub critic1_loss: f64,
    pub critic2_loss: f64,
    pub policy_loss: f64,
    pub alpha: f64,
    pub beta: f64,
    pub entropy: f64,
    pub kl: f64,
    pub success_rate_eval: Option<f64>,
}

impl EpisodeRow {
    /// Loss and statistic columns are episode means over the updates made
    /// during the episode, empty when there were none.
    pub fn csv_row(&self) -> String {
        let m = |v: f64| if self.updates == 0 { String::new() } else { v.to_string() };
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.episode,
            self.step,
            m(self.critic1_loss),
            m(self.critic2_loss),
            m(self.policy_loss),
            self.alpha,
            self.beta,
            m(self.entropy),
            m(self.kl),
            self.success_rate_eval.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

#[derive(Default)]
struct EpisodeAccumulator {
    updates: usize,
    sums: [f64; 5],
}

impl EpisodeAccumulator {
    fn add(&mut self, m: &StepMetrics) {
        if m.skipped {
            return;
        }
        self.updates += 1;
        for (s, v) in self.sums.iter_mut().zip([m.critic1_loss, m.critic2_loss, m.policy_loss, m.entropy, m.kl]) {
            *s += v;
        }
    }

    fn row(&self, episode: usize, step: usize, l: &Learner) -> EpisodeRow {
        let k = self.updates.max(1) as f64;
        EpisodeRow {
            episode,
            step,
            updates: self.updates,
            critic1_loss: self.sums[0] / k,
            critic2_loss: self.sums[1] / k,
            policy_loss: self.sums[2] / k,
            alpha: l.coeffs.alpha(),
            beta: l.coeffs.beta(),
            entropy: self.sums[3] / k,
            kl: self.sums[4] / k,
            success_rate_eval: None,
        }
    }
}

/// Streams CSV lines to a file (when a run directory is given) and keeps
/// them in memory.
struct CsvSink {
    text: String,
    file: Option<BufWriter<File>>,
    path: PathBuf,
}

impl CsvSink {
    fn new(dir: Option<&Path>, name: &str, header: &str) -> Result<Self> {
        let path = dir.map(|d| d.join(name)).unwrap_or_default();
        let file = match dir {
            Some(_) => Some(BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?)),
            None => None,
        };
        let mut sink = Self {
            text: String::new(),
            file,
            path,
        };
        sink.line(header)?;
        Ok(sink)
    }

    fn line(&mut self, line: &str) -> Result<()> {
        self.text.push_str(line);
        self.text.push('\n');
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{line}").map_err(|e| io_err(&self.path, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            f.flush().map_err(|e| io_err(&self.path, e))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// training

pub struct TrainingRun {
    pub seed: u64,
    pub learner: Learner,
    pub metrics_csv: String,
    pub duals_csv: String,
    pub duals: Vec<DualRecord>,
    /// `(episode, success rate)` of each periodic evaluation.
    pub evals: Vec<(usize, f64)>,
    pub final_report: EvalReport,
    pub best: Option<(usize, f64)>,
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Option<Checkpoint>,
}

/// Acts in the environment and learns from it: one update per environment
/// step once the buffer holds a batch.
struct Session<'a> {
    cfg: &'a RunConfig,
    learner: Learner,
    buffer: ReplayBuffer,
    steps: usize,
    updates: usize,
    duals: Vec<DualRecord>,
    duals_sink: CsvSink,
    metrics_sink: CsvSink,
}

impl<'a> Session<'a> {
    fn new(cfg: &'a RunConfig, game: &Game, seed: u64, dir: Option<&Path>) -> Result<Self> {
        let mut learner = Learner::new(game.clone(), cfg.net_config(), cfg.trainer_config(), seed)?;
        if let Some(path) = &cfg.init_checkpoint {
            restore_learner(&mut learner, &Checkpoint::load(path)?)?;
        }
        Ok(Self {
            cfg,
            buffer: ReplayBuffer::new(cfg.buffer_size),
            learner,
            steps: 0,
            updates: 0,
            duals: Vec::new(),
            duals_sink: CsvSink::new(dir, "duals.csv", DUALS_HEADER)?,
            metrics_sink: CsvSink::new(dir, "metrics.csv", METRICS_HEADER)?,
        })
    }

    fn run_episode(&mut self, episode: usize, master: u64, opponent: Option<&ParameterSet>) -> Result<EpisodeRow> {
        let seed = episode_seed(master, episode as u64);
        let game = self.learner.game.clone();
        let mask = self.learner.mask.clone();
        let mut rng = action_rng(seed);
        let mut s = game.reset(seed)?;
        let mut acc = EpisodeAccumulator::default();
        let adaptive = matches!(self.cfg.mode, TrainerMode::Arac | TrainerMode::Brac);
        let theirs = match opponent {
            Some(params) => TeamPolicy::Net { params, greedy: false },
            None => TeamPolicy::Scripted,
        };
        while !s.terminal {
            let ours = match self.cfg.mode {
                TrainerMode::Ref => TeamPolicy::Scripted,
                _ => TeamPolicy::Net {
                    params: &self.learner.actor,
                    greedy: false,
                },
            };
            let a = our_actions(&game, &mask, ours, &s, &mut rng)?;
            let b = opponent_actions(&game, &mask, theirs, &s, &mut rng)?;
            let out = game.step(&s, &a, &b)?;
            let done = out.state.terminal && out.state.winner != Winner::Timeout;
            self.buffer.push(Transition {
                state: s,
                actions: a,
                reward: out.reward,
                next: out.state.clone(),
                done,
            });
            self.steps += 1;
            let m = self.learner.train_step(&self.buffer)?;
            acc.add(&m);
            if adaptive && !m.skipped {
                self.updates += 1;
                let r = DualRecord {
                    update: self.updates,
                    entropy: m.entropy,
                    target_entropy: m.target_entropy,
                    kl: m.kl,
                    target_kl: self.cfg.target_kl,
                    alpha_before: m.alpha_before,
                    alpha: m.alpha,
                    beta_before: m.beta_before,
                    beta: m.beta,
                };
                self.duals_sink.line(&r.csv_row())?;
                self.duals.push(r);
            }
            s = out.state;
        }
        Ok(acc.row(episode + 1, self.steps, &self.learner))
    }

    fn finish_row(&mut self, row: &EpisodeRow) -> Result<()> {
        self.metrics_sink.line(&row.csv_row())?;
        self.metrics_sink.flush()?;
        self.duals_sink.flush()
    }
}

fn greedy_or_reference(mode: TrainerMode, actor: &ParameterSet) -> TeamPolicy<'_> {
    match mode {
        TrainerMode::Ref => TeamPolicy::Scripted,
        _ => TeamPolicy::Net {
            params: actor,
            greedy: true,
        },
    }
}

/// One seed of a training run. With `dir` the metrics stream, the
/// coefficient log, the checkpoints and the final report are written there.
pub fn train_seed(
    cfg: &RunConfig,
    game: &Game,
    seed: u64,
    dir: Option<&Path>,
    mut progress: impl FnMut(&EpisodeRow),
) -> Result<TrainingRun> {
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    let mut sess = Session::new(cfg, game, seed, dir)?;
    let eval_seed = seed ^ EVAL_STREAM;
    let mut evals = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut best_checkpoint = None;
    let mut last_report = None;
    for episode in 0..cfg.episodes {
        let mut row = sess.run_episode(episode, seed, None)?;
        if row.episode % cfg.eval_every == 0 {
            let policy = greedy_or_reference(cfg.mode, &sess.learner.actor);
            let report = evaluate(game, policy, TeamPolicy::Scripted, cfg.eval_episodes, eval_seed)?;
            row.success_rate_eval = Some(report.success_rate);
            evals.push((row.episode, report.success_rate));
            if best.is_none_or(|(_, b)| report.success_rate > b) {
                best = Some((row.episode, report.success_rate));
                let ckpt = learner_checkpoint(&sess.learner);
                if let Some(d) = dir {
                    ckpt.save(&d.join("best.ckpt"))?;
                }
                best_checkpoint = Some(ckpt);
            }
            last_report = Some((row.episode, report));
        }
        sess.finish_row(&row)?;
        progress(&row);
    }
    let final_report = match last_report {
        Some((e, r)) if e == cfg.episodes => r,
        _ => {
            let policy = greedy_or_reference(cfg.mode, &sess.learner.actor);
            evaluate(game, policy, TeamPolicy::Scripted, cfg.eval_episodes, eval_seed)?
        }
    };
    let final_checkpoint = learner_checkpoint(&sess.learner);
    if let Some(d) = dir {
        final_checkpoint.save(&d.join("final.ckpt"))?;
        write_file(&d.join("eval_final.txt"), final_report.to_text())?;
    }
    Ok(TrainingRun {
        seed,
        metrics_csv: std::mem::take(&mut sess.metrics_sink.text),
        duals_csv: std::mem::take(&mut sess.duals_sink.text),
        duals: sess.duals,
        learner: sess.learner,
        evals,
        final_report,
        best,
        final_checkpoint,
        best_checkpoint,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `episode,mean_success,std_success,seed_<s>...` over the periodic
/// evaluations of several seeds.
pub fn summary_csv(runs: &[TrainingRun]) -> String {
    let mut out = String::from("episode,mean_success,std_success");
    for r in runs {
        let _ = write!(out, ",seed_{}", r.seed);
    }
    out.push('\n');
    let Some(first) = runs.first() else {
        return out;
    };
    for (k, &(episode, _)) in first.evals.iter().enumerate() {
        let rates: Vec<f64> = runs.iter().filter_map(|r| r.evals.get(k).map(|e| e.1)).collect();
        let (m, s) = mean_std(&rates);
        let _ = write!(out, "{episode},{m},{s}");
        for r in &rates {
            let _ = write!(out, ",{r}");
        }
        out.push('\n');
    }
    out
}

/// Trains every configured seed into `<output_dir>/seed_<s>/` and writes
/// the resolved configuration and the cross-seed summary.
pub fn run_training(cfg: &RunConfig, mut progress: impl FnMut(u64, &EpisodeRow)) -> Result<Vec<TrainingRun>> {
    let game = load_game(cfg)?;
    let root = &cfg.output_dir;
    fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    write_file(&root.join("config.txt"), cfg.to_text())?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let dir = root.join(format!("seed_{seed}"));
        runs.push(train_seed(cfg, &game, seed, Some(&dir), |row| progress(seed, row))?);
    }
    write_file(&root.join("summary.csv"), summary_csv(&runs))?;
    Ok(runs)
}

// ---------------------------------------------------------------------------
// self-play

/// Result of a block of head-to-head episodes between two policies, from
/// the first policy's side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchRecord {
    pub wins: usize,
    pub losses: usize,
    pub draws: usize,
    pub total: usize,
}

impl MatchRecord {
    /// Draws (timeouts and mutual wipe-outs) count half.
    pub fn win_rate(&self) -> f64 {
        (self.wins as f64 + 0.5 * self.draws as f64) / self.total as f64
    }
}

pub fn head_to_head(game: &Game, a: &ParameterSet, b: &ParameterSet, episodes: usize, seed: u64) -> Result<MatchRecord> {
    let ours = TeamPolicy::Net { params: a, greedy: false };
    let theirs = TeamPolicy::Net { params: b, greedy: false };
    let report = evaluate(game, ours, theirs, episodes, seed)?;
    let count = |w: Winner| report.outcomes.iter().filter(|o| o.winner == w).count();
    let (wins, losses) = (count(Winner::Ours), count(Winner::Opponent));
    Ok(MatchRecord {
        wins,
        losses,
        draws: episodes - wins - losses,
        total: episodes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapshotRecord {
    pub index: usize,
    /// Training episodes completed when the snapshot was taken.
    pub episode: usize,
}

pub struct SelfPlayReport {
    pub snapshots: Vec<SnapshotRecord>,
    pub snapshot_params: Vec<ParameterSet>,
    /// Snapshot `k` against the starting policy.
    pub curve: Vec<MatchRecord>,
    /// `matrix[i][j]`: snapshot `i` on our side against snapshot `j`.
    pub matrix: Vec<Vec<MatchRecord>>,
    pub metrics_csv: String,
}

impl SelfPlayReport {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("index,episode,wins,losses,draws,total,win_rate\n");
        for (s, m) in self.snapshots.iter().zip(&self.curve) {
            let _ = writeln!(out, "{},{},{},{},{},{},{}", s.index, s.episode, m.wins, m.losses, m.draws, m.total, m.win_rate());
        }
        out
    }

    pub fn matrix_csv(&self) -> String {
        let mut out = String::from("i,j,wins_i,wins_j,draws,total,win_rate_i\n");
        for (i, row) in self.matrix.iter().enumerate() {
            for (j, m) in row.iter().enumerate() {
                let _ = writeln!(out, "{i},{j},{},{},{},{},{}", m.wins, m.losses, m.draws, m.total, m.win_rate());
            }
        }
        out
    }

    pub fn snapshots_csv(&self) -> String {
        let mut out = String::from("index,episode\n");
        for s in &self.snapshots {
            let _ = writeln!(out, "{},{}", s.index, s.episode);
        }
        out
    }
}

/// Trains against a frozen copy of the learner that is refreshed every
/// `SNAPSHOT_EVERY` episodes, then plays every archived snapshot against
/// the start policy and against each other.
pub fn self_play(cfg: &RunConfig, game: &Game, seed: u64, dir: Option<&Path>) -> Result<SelfPlayReport> {
    if game.config().scenario != Scenario::Confrontation {
        return Err(ExperimentError::ScenarioMismatch("self-play needs the confrontation scenario".into()));
    }
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    let mut sess = Session::new(cfg, game, seed, dir)?;
    let start = sess.learner.actor.clone();
    let mut opponent = start.clone();
    let mut snapshots = vec![SnapshotRecord { index: 0, episode: 0 }];
    let mut params = vec![start.clone()];
    for episode in 0..cfg.episodes {
        let row = sess.run_episode(episode, seed, Some(&opponent))?;
        sess.finish_row(&row)?;
        if row.episode % SNAPSHOT_EVERY == 0 {
            opponent = sess.learner.actor.clone();
            snapshots.push(SnapshotRecord {
                index: snapshots.len(),
                episode: row.episode,
            });
            params.push(opponent.clone());
        }
    }
    let e = cfg.selfplay_eval_episodes;
    let league = seed ^ LEAGUE_STREAM;
    let curve = params
        .iter()
        .enumerate()
        .map(|(k, p)| head_to_head(game, p, &start, e, episode_seed(league, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let k = params.len();
    let matrix = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| head_to_head(game, &params[i], &params[j], e, episode_seed(league, (k * (i + 1) + j) as u64)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let report = SelfPlayReport {
        snapshots,
        snapshot_params: params,
        curve,
        matrix,
        metrics_csv: std::mem::take(&mut sess.metrics_sink.text),
    };
    if let Some(d) = dir {
        let digest = checkpoint_digest(&cfg.net_config(), game.config());
        for (s, p) in report.snapshots.iter().zip(&report.snapshot_params) {
            Checkpoint::new(digest.clone(), p.to_entries("actor.")).save(&d.join(format!("snapshot_{:03}.ckpt", s.index)))?;
        }
        write_file(&d.join("snapshots.csv"), report.snapshots_csv())?;
        write_file(&d.join("selfplay_curve.csv"), report.curve_csv())?;
        write_file(&d.join("selfplay_matrix.csv"), report.matrix_csv())?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// cross-map

#[derive(Debug, Clone, PartialEq)]
pub struct CrossMap {
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// `rates[test][train]`.
    pub rates: Vec<Vec<f64>>,
}

impl CrossMap {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("test\\train");
        for t in &self.train {
            let _ = write!(out, ",{t}");
        }
        out.push('\n');
        for (name, row) in self.test.iter().zip(&self.rates) {
            out.push_str(name);
            for r in row {
                let _ = write!(out, ",{r:.3}");
            }
            out.push('\n');
        }
        out
    }
}

/// Greedy success of every trained actor on every map. All maps share the
/// scenario configuration; node counts may differ.
pub fn cross_map(
    scenario: &ScenarioConfig,
    net: &NetConfig,
    checkpoints: &[(String, Checkpoint)],
    maps: &[(String, Graph)],
    episodes: usize,
    seed: u64,
) -> Result<CrossMap> {
    let actors = checkpoints
        .iter()
        .map(|(_, c)| load_actor(c, net, scenario))
        .collect::<Result<Vec<_>>>()?;
    let mut rates = Vec::new();
    for (_, graph) in maps {
        let game = Game::new(scenario.clone(), graph.clone())?;
        let row = actors
            .iter()
            .map(|a| {
                let policy = TeamPolicy::Net { params: a, greedy: true };
                evaluate(&game, policy, TeamPolicy::Scripted, episodes, seed).map(|r| r.success_rate)
            })
            .collect::<Result<Vec<_>>>()?;
        rates.push(row);
    }
    Ok(CrossMap {
        train: checkpoints.iter().map(|(n, _)| n.clone()).collect(),
        test: maps.iter().map(|(n, _)| n.clone()).collect(),
        rates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapgen::{generate_map, MapKind};

    fn small(scenario: Scenario) -> RunConfig {
        RunConfig {
            scenario,
            d_model: 4,
            encoder_layers: 1,
            attention_heads: 2,
            ff_mult: 2,
            critic_hidden: 4,
            batch_size: 8,
            buffer_size: 64,
            learning_rate: 1e-3,
            max_steps: 12,
            episodes: 6,
            eval_every: 3,
            eval_episodes: 5,
            selfplay_eval_episodes: 6,
            ..RunConfig::default()
        }
    }

    fn game(cfg: &RunConfig, kind: MapKind, size: usize) -> Game {
        Game::new(cfg.scenario_config(), generate_map(kind, size, 1).unwrap()).unwrap()
    }

    #[test]
    fn episode_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| episode_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(episode_seed(7, 0), episode_seed(8, 0));
    }

    #[test]
    fn mirroring_is_an_involution() {
        let cfg = small(Scenario::Confrontation);
        let g = game(&cfg, MapKind::Grid, 3);
        let s = g.reset(4).unwrap();
        let back = mirror_state(g.config(), &mirror_state(g.config(), &s));
        assert_eq!(back.positions, s.positions);
        for j in 0..4 {
            let a = Action::Attack(j);
            assert_eq!(mirror_action(g.config(), mirror_action(g.config(), a)), a);
        }
        assert_eq!(mirror_action(g.config(), Action::Move(5)), Action::Move(5));
    }

    #[test]
    fn reference_catches_on_trees() {
        let cfg = small(Scenario::Pursuit);
        for seed in 0..5 {
            let g = Game::new(
                ScenarioConfig::pursuit(2),
                generate_map(MapKind::Tree, 12, seed).unwrap(),
            )
            .unwrap();
            let r = evaluate(&g, TeamPolicy::Scripted, TeamPolicy::Scripted, 20, seed).unwrap();
            assert_eq!(r.success_rate, 1.0, "tree {seed}");
        }
        let g = game(&cfg, MapKind::Tree, 8);
        let r = evaluate(&g, TeamPolicy::Scripted, TeamPolicy::Scripted, 10, 3).unwrap();
        assert_eq!(r.success_rate, r.successes() as f64 / 10.0);
        assert_eq!(r, evaluate(&g, TeamPolicy::Scripted, TeamPolicy::Scripted, 10, 3).unwrap());
    }

    #[test]
    fn logged_episodes_replay() {
        let cfg = small(Scenario::Confrontation);
        let g = game(&cfg, MapKind::Random, 10);
        let (report, logs) = evaluate_logged(&g, TeamPolicy::Scripted, TeamPolicy::Scripted, 4, 9, true).unwrap();
        for (o, log) in report.outcomes.iter().zip(&logs) {
            let parsed = EpisodeLog::parse(&log.to_text()).unwrap();
            let states = parsed.replay(&g).unwrap();
            assert_eq!(states.last().unwrap().winner, o.winner);
        }
    }

    #[test]
    fn training_is_reproducible_and_logs_duals() {
        let cfg = small(Scenario::Pursuit);
        let g = game(&cfg, MapKind::Ring, 14);
        let a = train_seed(&cfg, &g, 5, None, |_| {}).unwrap();
        let b = train_seed(&cfg, &g, 5, None, |_| {}).unwrap();
        assert_eq!(a.metrics_csv, b.metrics_csv);
        assert_eq!(a.final_checkpoint.to_bytes(), b.final_checkpoint.to_bytes());
        assert_eq!(a.metrics_csv.lines().count(), 1 + cfg.episodes);
        assert_eq!(a.evals.len(), 2);
        assert!(!a.duals.is_empty());
        assert_eq!(DualRecord::parse_csv(&a.duals_csv).unwrap(), a.duals);
        assert!(sign_law_violations(&a.duals, true).is_empty());
    }

    #[test]
    fn brac_keeps_beta_fixed() {
        let cfg = RunConfig {
            mode: TrainerMode::Brac,
            ..small(Scenario::Pursuit)
        };
        let g = game(&cfg, MapKind::Ring, 14);
        let run = train_seed(&cfg, &g, 1, None, |_| {}).unwrap();
        let betas: std::collections::HashSet<&str> =
            run.metrics_csv.lines().skip(1).map(|l| l.split(',').nth(6).unwrap()).collect();
        assert_eq!(betas.len(), 1);
        assert!(!run.duals.is_empty());
        assert!(sign_law_violations(&run.duals, false).is_empty());
    }

    #[test]
    fn checkpoints_reload_for_evaluation() {
        let cfg = small(Scenario::Pursuit);
        let g = game(&cfg, MapKind::Ring, 6);
        let run = train_seed(&cfg, &g, 2, None, |_| {}).unwrap();
        let ckpt = Checkpoint::from_bytes(&run.final_checkpoint.to_bytes()).unwrap();
        let actor = load_actor(&ckpt, &cfg.net_config(), g.config()).unwrap();
        assert_eq!(actor.values(), run.learner.actor.values());
        let other = RunConfig { d_model: 8, ..cfg.clone() };
        assert!(matches!(
            load_actor(&ckpt, &other.net_config(), g.config()),
            Err(ExperimentError::IncompatibleCheckpoint(_))
        ));
        let maps = vec![("a".to_string(), generate_map(MapKind::Ring, 6, 0).unwrap())];
        let m = cross_map(g.config(), &cfg.net_config(), &[("a".into(), ckpt.clone())], &maps, 5, 0).unwrap();
        let direct = evaluate(&g, TeamPolicy::Net { params: &actor, greedy: true }, TeamPolicy::Scripted, 5, 0).unwrap();
        assert_eq!(m.rates, vec![vec![direct.success_rate]]);
        assert!(m.to_csv().starts_with("test\\train,a\n"));
    }

    #[test]
    fn self_play_accounting() {
        let cfg = small(Scenario::Confrontation);
        let g = game(&cfg, MapKind::Grid, 3);
        let rep = self_play(&cfg, &g, 0, None).unwrap();
        assert_eq!(rep.snapshots, vec![SnapshotRecord { index: 0, episode: 0 }]);
        for i in 0..rep.matrix.len() {
            for j in 0..rep.matrix.len() {
                let (a, b) = (rep.matrix[i][j], rep.matrix[j][i]);
                assert_eq!(a.wins + a.losses + a.draws, a.total);
                assert_eq!(b.total, a.total);
            }
        }
        assert!(self_play(&small(Scenario::Pursuit), &game(&small(Scenario::Pursuit), MapKind::Ring, 6), 0, None).is_err());
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(mean_std(&[1.0, 1.0, 1.0]), (1.0, 0.0));
        let (m, s) = mean_std(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        assert!((s - 0.5f64.sqrt()).abs() < 1e-15);
    }
}
