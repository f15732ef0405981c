use std::sync::Arc;

use proptest::prelude::*;

use arac_core::config::RunConfig;
use arac_core::experiment::{mirror_action, mirror_state, play_episode, TeamPolicy};
use arac_core::game::{Action, EpisodeLog, Game, ScenarioConfig};
use arac_core::gradcheck::{random_transitions, toy_game, toy_net};
use arac_core::mapgen::{generate_map, MapKind};
use arac_core::nets::{actor_distribution, attention_mask, NetKind, ParameterSet, StateInput};
use arac_core::tensor::{Tape, Tensor};
use arac_core::trainer::{dual_update, Coefficients, TrainerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kind() -> impl Strategy<Value = MapKind> {
    prop_oneof![Just(MapKind::Grid), Just(MapKind::Ring), Just(MapKind::Tree), Just(MapKind::Random)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_maps_are_connected_and_seeded(kind in kind(), size in 2usize..24, seed in any::<u64>()) {
        let g = generate_map(kind, size, seed).unwrap();
        let n = if kind == MapKind::Grid { size * size } else { size };
        prop_assert_eq!(g.node_count(), n);
        prop_assert_eq!(g.component_count(), 1);
        prop_assert_eq!(g, generate_map(kind, size, seed).unwrap());
    }

    #[test]
    fn config_text_round_trips(
        lr in 1e-6f64..1e-1,
        batch in 1usize..512,
        heads in prop_oneof![Just(1usize), Just(2), Just(4), Just(8)],
        gamma in 0.5f64..0.999,
        use_beta in any::<bool>(),
        seeds in proptest::collection::vec(0u64..1000, 1..5),
    ) {
        let cfg = RunConfig {
            learning_rate: lr,
            batch_size: batch,
            attention_heads: heads,
            gamma,
            use_beta,
            seeds,
            ..RunConfig::default()
        };
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn mirroring_is_an_involution(seed in any::<u64>(), m in 1usize..4) {
        let cfg = ScenarioConfig::confrontation(m);
        let game = Game::new(cfg.clone(), generate_map(MapKind::Random, 12, seed).unwrap()).unwrap();
        let s = game.reset(seed).unwrap();
        let twice = mirror_state(&cfg, &mirror_state(&cfg, &s));
        prop_assert_eq!(&twice.positions, &s.positions);
        prop_assert_eq!(&twice.hp, &s.hp);
        prop_assert_eq!(&twice.alive, &s.alive);
        for j in 0..2 * m {
            let a = Action::Attack(j);
            prop_assert_eq!(mirror_action(&cfg, mirror_action(&cfg, a)), a);
        }
        prop_assert_eq!(mirror_action(&cfg, Action::Move(5)), Action::Move(5));
    }

    #[test]
    fn actor_rows_are_distributions(seed in any::<u64>()) {
        let game = toy_game();
        let ps = ParameterSet::init(toy_net(game.config().feature_width()), NetKind::Actor, seed).unwrap();
        let mask = attention_mask(&game);
        for t in random_transitions(&game, 6, &mut ChaCha8Rng::seed_from_u64(seed)) {
            let input = StateInput::new(&game, &t.state);
            let dist = actor_distribution(&ps, &input, &mask).unwrap();
            prop_assert_eq!(dist.len(), input.agents.len());
            for (row, view) in dist.iter().zip(&input.agents) {
                prop_assert_eq!(row.len(), view.candidates.len());
                prop_assert!(row.iter().all(|p| p.is_finite() && *p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_softmax_rows_are_exact(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(rows, cols, |_, _| rng.random_range(-30.0..30.0));
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.5)).collect();
        for r in 0..rows {
            mask[r * cols + rng.random_range(0..cols)] = true;
        }
        let mut tape = Tape::new(&[]);
        let v = tape.constant(x);
        let y = tape.masked_softmax(v, Some(Arc::from(mask.clone()))).unwrap();
        let y = tape.value(y);
        for r in 0..rows {
            let row = y.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..cols {
                if !mask[r * cols + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn duals_stay_positive_and_follow_the_sign_law(
        steps in proptest::collection::vec((0.0f64..3.0, 0.0f64..0.2), 1..60),
        lr in 1e-4f64..0.5,
    ) {
        let mut c = Coefficients::from_config(&TrainerConfig { dual_lr: lr, ..TrainerConfig::default() });
        let target = 1.0;
        for (entropy, kl) in steps {
            let before = c;
            dual_update(&mut c, entropy, target, kl, true);
            prop_assert!(c.alpha() > 0.0 && c.alpha().is_finite());
            prop_assert!(c.beta() > 0.0 && c.beta().is_finite());
            if entropy < target {
                prop_assert!(c.alpha() >= before.alpha());
            } else {
                prop_assert!(c.alpha() <= before.alpha());
            }
            if kl > c.target_kl {
                prop_assert!(c.beta() >= before.beta());
            } else {
                prop_assert!(c.beta() <= before.beta());
            }
        }
    }

    #[test]
    fn episode_logs_replay(seed in any::<u64>(), pursuit in any::<bool>()) {
        let cfg = if pursuit { ScenarioConfig::pursuit(2) } else { ScenarioConfig::confrontation(2) };
        let game = Game::new(cfg, generate_map(MapKind::Random, 14, seed % 8).unwrap()).unwrap();
        let mask = attention_mask(&game);
        let (outcome, log) = play_episode(&game, &mask, TeamPolicy::Scripted, TeamPolicy::Scripted, seed, true).unwrap();
        let log = EpisodeLog::parse(&log.unwrap().to_text()).unwrap();
        prop_assert_eq!(log.steps.len() as u32, outcome.steps);
        let mut s = game.reset(log.seed).unwrap();
        let mut ret = 0.0;
        for step in &log.steps {
            let o = game.step(&s, &step.ours, &step.theirs).unwrap();
            prop_assert_eq!(o.reward, step.reward);
            ret += o.reward;
            s = o.state;
        }
        prop_assert!(s.terminal);
        prop_assert_eq!(s.winner, outcome.winner);
        prop_assert!((ret - outcome.ret).abs() < 1e-9);
    }
}
