use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use arac_core::config::RunConfig;
use arac_core::experiment::{self, TeamPolicy};
use arac_core::game::Game;
use arac_core::graph::{load_map_file, write_map};
use arac_core::gradcheck;
use arac_core::mapgen::{generate_map, MapKind};
use arac_core::nets::Checkpoint;
use arac_core::verifier::{certify, CertificateConfig};

#[derive(Parser)]
#[command(name = "arac", version, about = "Regularized multi-agent actor-critic on graph games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        map: Option<PathBuf>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Greedy evaluation of a checkpoint (or the reference policy) against
    /// the scripted opponents.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "reference")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        reference: bool,
        #[arg(long = "map", required = true)]
        maps: Vec<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write one episode log per episode here.
        #[arg(long)]
        logs: Option<PathBuf>,
    },
    /// Train against periodically refreshed copies of the learner, then
    /// play the archived snapshots against each other.
    Selfplay {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Success-rate matrix of trained checkpoints over test maps.
    Crossmap {
        #[arg(long)]
        config: PathBuf,
        /// `name=checkpoint`, repeated.
        #[arg(long = "train", required = true)]
        train: Vec<String>,
        /// `name=map`, repeated.
        #[arg(long = "map", required = true)]
        maps: Vec<String>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a connected map file.
    Genmap {
        #[arg(long)]
        kind: MapKind,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contraction and policy-improvement certificate on random tabular MDPs.
    VerifyTheorems {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 6)]
        max_states: usize,
        #[arg(long, default_value_t = 4)]
        max_actions: usize,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference audit of primitives and losses.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        draws: usize,
        #[arg(long, default_value_t = 16)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn named(pair: &str) -> Result<(String, PathBuf)> {
    match pair.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => bail!("expected name=path, got {pair:?}"),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            seed,
            out,
            map,
            dry_run,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if map.is_some() {
                cfg.map = map;
            }
            if dry_run {
                print!("{}", cfg.to_text());
                return Ok(());
            }
            let runs = experiment::run_training(&cfg, |seed, row| {
                if let Some(rate) = row.success_rate_eval {
                    eprintln!("seed {seed} episode {} step {} eval success {rate}", row.episode, row.step);
                }
            })?;
            for r in &runs {
                println!("seed {}: final success {}", r.seed, r.final_report.success_rate);
            }
            println!("run written to {}", cfg.output_dir.display());
        }
        Command::Eval {
            config,
            checkpoint,
            reference,
            maps,
            episodes,
            seed,
            logs,
        } => {
            let cfg = RunConfig::load(&config)?;
            let actor = match (&checkpoint, reference) {
                (Some(path), false) => Some(experiment::load_actor(
                    &Checkpoint::load(path)?,
                    &cfg.net_config(),
                    &cfg.scenario_config(),
                )?),
                _ => None,
            };
            let policy = match &actor {
                Some(params) => TeamPolicy::Net { params, greedy: true },
                None => TeamPolicy::Scripted,
            };
            for (m, path) in maps.iter().enumerate() {
                let game = Game::new(cfg.scenario_config(), load_map_file(path)?)?;
                let (report, episode_logs) =
                    experiment::evaluate_logged(&game, policy, TeamPolicy::Scripted, episodes, seed, logs.is_some())?;
                println!(
                    "{}: success {}/{} = {}",
                    path.display(),
                    report.successes(),
                    report.episodes,
                    report.success_rate
                );
                if let Some(dir) = &logs {
                    fs::create_dir_all(dir)?;
                    fs::write(dir.join(format!("map{m}_report.txt")), report.to_text())?;
                    for (i, log) in episode_logs.iter().enumerate() {
                        fs::write(dir.join(format!("map{m}_episode{i:04}.log")), log.to_text())?;
                    }
                }
            }
        }
        Command::Selfplay { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let game = experiment::load_game(&cfg)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            fs::create_dir_all(&cfg.output_dir)?;
            fs::write(cfg.output_dir.join("config.txt"), cfg.to_text())?;
            let report = experiment::self_play(&cfg, &game, seed, Some(&cfg.output_dir))?;
            print!("{}", report.curve_csv());
            println!("league written to {}", cfg.output_dir.display());
        }
        Command::Crossmap {
            config,
            train,
            maps,
            episodes,
            seed,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let checkpoints = train
                .iter()
                .map(|p| {
                    let (n, path) = named(p)?;
                    Ok((n, Checkpoint::load(&path)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let graphs = maps
                .iter()
                .map(|p| {
                    let (n, path) = named(p)?;
                    Ok((n, load_map_file(&path)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let m = experiment::cross_map(&cfg.scenario_config(), &cfg.net_config(), &checkpoints, &graphs, episodes, seed)?;
            emit(out.as_deref(), &m.to_csv())?;
        }
        Command::Genmap { kind, size, seed, out } => {
            let g = generate_map(kind, size, seed)?;
            emit(out.as_deref(), &write_map(&g))?;
        }
        Command::VerifyTheorems {
            instances,
            max_states,
            max_actions,
            gamma,
            alpha,
            beta,
            seed,
            out,
        } => {
            let cfg = CertificateConfig {
                instances,
                max_states,
                max_actions,
                gamma,
                alpha,
                beta,
                seed,
                ..CertificateConfig::default()
            };
            let cert = certify(&cfg)?;
            emit(out.as_deref(), &cert.report())?;
            if !(cert.contraction_holds() && cert.improvement_holds()) {
                bail!("certificate failed");
            }
        }
        Command::Gradcheck {
            draws,
            coords,
            seed,
            tolerance,
        } => {
            let lines: Vec<_> = gradcheck::check_primitives(draws, seed)
                .into_iter()
                .chain(gradcheck::check_losses(draws, coords, seed))
                .collect();
            let mut failed = false;
            for l in &lines {
                let ok = l.worst < tolerance;
                failed |= !ok;
                println!("{:<16} draws={:<4} worst={:.3e} {}", l.name, l.draws, l.worst, if ok { "ok" } else { "FAIL" });
            }
            if failed {
                bail!("gradient check above tolerance {tolerance}");
            }
        }
    }
    Ok(())
}
