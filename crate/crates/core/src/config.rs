//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so an
//! empty file is a valid configuration; unknown and repeated keys are
//! rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::game::{Rewards, Scenario, ScenarioConfig};
use crate::nets::NetConfig;
use crate::trainer::{KlStatistic, TrainerConfig, TrainerMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value {value:?} for {key}")]
    BadValue { line: usize, key: String, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub optimizer: String,
    pub batch_size: usize,
    pub buffer_size: usize,
    pub learning_rate: f64,
    pub max_steps: u32,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub target_entropy_factor: f64,
    pub target_kl: f64,

    pub scenario: Scenario,
    pub team_size: usize,
    pub initial_hp: u32,
    pub attack_range: u32,
    pub base_damage: u32,
    pub reward_capture: f64,
    pub reward_kill: f64,
    pub reward_all_kill: f64,
    pub map: Option<PathBuf>,

    pub mode: TrainerMode,
    pub use_beta: bool,
    pub kl_statistic: KlStatistic,
    pub gamma: f64,
    pub tau: f64,
    pub alpha_init: f64,
    pub beta_init: f64,
    /// `None` follows `learning_rate`.
    pub dual_learning_rate: Option<f64>,
    pub d_model: usize,
    pub ff_mult: usize,
    pub critic_hidden: usize,

    pub episodes: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub selfplay_eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            optimizer: "adam".into(),
            batch_size: 128,
            buffer_size: 2000,
            learning_rate: 1e-5,
            max_steps: 128,
            encoder_layers: 6,
            decoder_layers: 1,
            attention_heads: 8,
            target_entropy_factor: 0.05,
            target_kl: 1.0,
            scenario: Scenario::Pursuit,
            team_size: 2,
            initial_hp: 3,
            attack_range: 2,
            base_damage: 1,
            reward_capture: 30.0,
            reward_kill: 3.0,
            reward_all_kill: 20.0,
            map: None,
            mode: TrainerMode::Arac,
            use_beta: true,
            kl_statistic: KlStatistic::Mean,
            gamma: 0.99,
            tau: 0.005,
            alpha_init: 0.2,
            beta_init: 1.0,
            dual_learning_rate: None,
            d_model: 64,
            ff_mult: 4,
            critic_hidden: 64,
            episodes: 5000,
            eval_every: 100,
            eval_episodes: 100,
            selfplay_eval_episodes: 100,
            seeds: vec![0],
            output_dir: PathBuf::from("runs/default"),
            init_checkpoint: None,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.into(),
        value: value.into(),
    })
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
            cfg.set(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        macro_rules! p {
            () => {
                parse_value(line, key, value)?
            };
        }
        match key {
            "optimizer" => self.optimizer = value.into(),
            "batch_size" => self.batch_size = p!(),
            "buffer_size" => self.buffer_size = p!(),
            "learning_rate" => self.learning_rate = p!(),
            "max_steps" => self.max_steps = p!(),
            "encoder_layers" => self.encoder_layers = p!(),
            "decoder_layers" => self.decoder_layers = p!(),
            "attention_heads" => self.attention_heads = p!(),
            "target_entropy_factor" => self.target_entropy_factor = p!(),
            "target_kl" => self.target_kl = p!(),
            "scenario" => self.scenario = p!(),
            "team_size" => self.team_size = p!(),
            "initial_hp" => self.initial_hp = p!(),
            "attack_range" => self.attack_range = p!(),
            "base_damage" => self.base_damage = p!(),
            "reward_capture" => self.reward_capture = p!(),
            "reward_kill" => self.reward_kill = p!(),
            "reward_all_kill" => self.reward_all_kill = p!(),
            "map" => self.map = optional_path(value),
            "mode" => self.mode = p!(),
            "use_beta" => self.use_beta = p!(),
            "kl_statistic" => self.kl_statistic = p!(),
            "gamma" => self.gamma = p!(),
            "tau" => self.tau = p!(),
            "alpha_init" => self.alpha_init = p!(),
            "beta_init" => self.beta_init = p!(),
            "dual_learning_rate" => {
                self.dual_learning_rate = if value.is_empty() { None } else { Some(p!()) };
            }
            "d_model" => self.d_model = p!(),
            "ff_mult" => self.ff_mult = p!(),
            "critic_hidden" => self.critic_hidden = p!(),
            "episodes" => self.episodes = p!(),
            "eval_every" => self.eval_every = p!(),
            "eval_episodes" => self.eval_episodes = p!(),
            "selfplay_eval_episodes" => self.selfplay_eval_episodes = p!(),
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| parse_value(line, key, s.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            "init_checkpoint" => self.init_checkpoint = optional_path(value),
            _ => {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.optimizer != "adam" {
            return bad("only the adam optimizer is supported");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("eval_every and eval_episodes must be positive");
        }
        self.scenario_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.trainer_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.net_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            scenario: self.scenario,
            team_size: self.team_size,
            initial_hp: self.initial_hp,
            attack_range: self.attack_range,
            base_damage: self.base_damage,
            max_steps: self.max_steps,
            rewards: Rewards {
                capture: self.reward_capture,
                kill: self.reward_kill,
                all_kill: self.reward_all_kill,
            },
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            d_model: self.d_model,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            heads: self.attention_heads,
            ff_mult: self.ff_mult,
            critic_hidden: self.critic_hidden,
            feature_width: self.scenario_config().feature_width(),
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            mode: self.mode,
            batch_size: self.batch_size,
            buffer_capacity: self.buffer_size,
            lr: self.learning_rate,
            dual_lr: self.dual_learning_rate.unwrap_or(self.learning_rate),
            gamma: self.gamma,
            tau: self.tau,
            alpha_init: self.alpha_init,
            beta_init: self.beta_init,
            entropy_factor: self.target_entropy_factor,
            target_kl: self.target_kl,
            kl_statistic: self.kl_statistic,
            use_beta: self.use_beta,
        }
    }

    /// Renders every key, so `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let dual = self.dual_learning_rate.map(|v| v.to_string()).unwrap_or_default();
        let rows: Vec<(&str, String)> = vec![
            ("optimizer", self.optimizer.clone()),
            ("batch_size", self.batch_size.to_string()),
            ("buffer_size", self.buffer_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("attention_heads", self.attention_heads.to_string()),
            ("target_entropy_factor", self.target_entropy_factor.to_string()),
            ("target_kl", self.target_kl.to_string()),
            ("scenario", self.scenario.to_string()),
            ("team_size", self.team_size.to_string()),
            ("initial_hp", self.initial_hp.to_string()),
            ("attack_range", self.attack_range.to_string()),
            ("base_damage", self.base_damage.to_string()),
            ("reward_capture", self.reward_capture.to_string()),
            ("reward_kill", self.reward_kill.to_string()),
            ("reward_all_kill", self.reward_all_kill.to_string()),
            ("map", show_path(&self.map)),
            ("mode", self.mode.to_string()),
            ("use_beta", self.use_beta.to_string()),
            ("kl_statistic", self.kl_statistic.to_string()),
            ("gamma", self.gamma.to_string()),
            ("tau", self.tau.to_string()),
            ("alpha_init", self.alpha_init.to_string()),
            ("beta_init", self.beta_init.to_string()),
            ("dual_learning_rate", dual),
            ("d_model", self.d_model.to_string()),
            ("ff_mult", self.ff_mult.to_string()),
            ("critic_hidden", self.critic_hidden.to_string()),
            ("episodes", self.episodes.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("selfplay_eval_episodes", self.selfplay_eval_episodes.to_string()),
            ("seeds", seeds.join(",")),
            ("output_dir", self.output_dir.display().to_string()),
            ("init_checkpoint", show_path(&self.init_checkpoint)),
        ];
        rows.into_iter()
            .map(|(k, v)| if v.is_empty() { format!("{k} =\n") } else { format!("{k} = {v}\n") })
            .collect()
    }
}
