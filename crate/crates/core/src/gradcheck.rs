//! Finite-difference audit of every differentiable primitive and of the
//! three training losses on a six-node confrontation toy.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::game::{Action, Game, ScenarioConfig, Team, Winner};
use crate::graph::Graph;
use crate::nets::NetConfig;
use crate::reference::scripted_opponents;
use crate::tensor::{grad_check, Tape, Tensor, TensorError, Var};
use crate::trainer::{
    bc_loss, critic_loss, policy_loss, policy_loss_value, KlStatistic, Learner, Models, TrainerConfig, Transition,
};

pub const EPS: f64 = 1e-5;

/// Worst relative error of one check over all draws.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub draws: usize,
    pub worst: f64,
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

type Unary = Box<dyn Fn(&mut Tape<'_>, Var) -> Result<Var, TensorError>>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Unary)> {
    let w = random(rng, 4, 2);
    let other = random(rng, 3, 4);
    let row = random(rng, 1, 4);
    let k = random(rng, 5, 4);
    let v = random(rng, 5, 4);
    let mask: Arc<[bool]> = (0..12).map(|_| rng.random_bool(0.6)).collect::<Vec<_>>().into();
    let mut attn_mask: Vec<bool> = (0..15).map(|_| rng.random_bool(0.5)).collect();
    for r in 0..3 {
        attn_mask[r * 5 + r] = true;
    }
    let attn_mask: Arc<[bool]> = attn_mask.into();
    let mut soft_mask = mask.to_vec();
    for r in 0..3 {
        soft_mask[r * 4] = true;
    }
    let soft_mask: Arc<[bool]> = soft_mask.into();
    let c = |t: &mut Tape<'_>, x: &Tensor| t.constant(x.clone());
    vec![
        ("matmul", Box::new(move |t, x| { let w = c(t, &w); t.matmul(x, w) })),
        ("matmul_nt", Box::new({ let o = other.clone(); move |t, x| { let o = c(t, &o); t.matmul_nt(x, o) } })),
        ("add", Box::new({ let o = other.clone(); move |t, x| { let o = c(t, &o); t.add(x, o) } })),
        ("sub", Box::new({ let o = other.clone(); move |t, x| { let o = c(t, &o); t.sub(o, x) } })),
        ("mul", Box::new(|t, x| t.mul(x, x))),
        ("add_row", Box::new({ let r = row.clone(); move |t, x| { let r = c(t, &r); t.add_row(x, r) } })),
        ("scale", Box::new(|t, x| Ok(t.scale(x, -1.7)))),
        ("relu", Box::new(|t, x| Ok(t.relu(x)))),
        ("exp", Box::new(|t, x| Ok(t.exp(x)))),
        ("log", Box::new(|t, x| { let e = t.exp(x); Ok(t.log(e)) })),
        ("layer_norm", Box::new({ let r = row.clone(); let o = other.clone(); move |t, x| {
            let g = c(t, &r);
            let b = t.constant(Tensor::row_vector(o.row(0).to_vec()));
            t.layer_norm(x, g, b)
        } })),
        ("masked_softmax", Box::new(move |t, x| t.masked_softmax(x, Some(soft_mask.clone())))),
        ("log_softmax", Box::new(|t, x| Ok(t.log_softmax(x)))),
        ("concat_cols", Box::new(|t, x| { let y = t.scale(x, 2.0); t.concat_cols(&[x, y]) })),
        ("concat_rows", Box::new(|t, x| { let y = t.scale(x, -1.0); t.concat_rows(&[x, y]) })),
        ("slice_cols", Box::new(|t, x| t.slice_cols(x, 1, 2))),
        ("gather_rows", Box::new(|t, x| t.gather_rows(x, &[2, 0, 2]))),
        ("sum", Box::new(|t, x| { let y = t.mul(x, x)?; Ok(t.sum(y)) })),
        ("mean", Box::new(|t, x| { let y = t.mul(x, x)?; Ok(t.mean(y)) })),
        ("mean_rows", Box::new(|t, x| Ok(t.mean_rows(x)))),
        ("attention", Box::new(move |t, x| {
            let (kv, vv) = (c(t, &k), c(t, &v));
            t.multi_head_attention(x, kv, vv, 2, Some(attn_mask.clone()))
        })),
        ("self_attention", Box::new(|t, x| t.multi_head_attention(x, x, x, 2, None))),
    ]
}

/// Every primitive is composed with a random projection and summed, so the
/// checked function is scalar with a dense upstream gradient.
pub fn check_primitives(draws: usize, seed: u64) -> Vec<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines: Vec<CheckLine> = Vec::new();
    for _ in 0..draws {
        let x = random(&mut rng, 3, 4);
        let proj = random(&mut rng, 6, 8);
        for (i, (name, op)) in primitive_cases(&mut rng).into_iter().enumerate() {
            let err = grad_check::<_, TensorError>(
                |t, x| {
                    let y = op(t, x)?;
                    let (r, c) = t.value(y).shape();
                    let p = t.constant(Tensor::from_fn(r, c, |i, j| proj.get(i % 6, j % 8)));
                    let z = t.mul(y, p)?;
                    Ok(t.sum(z))
                },
                &x,
                EPS,
            )
            .unwrap_or(f64::INFINITY);
            if lines.len() <= i {
                lines.push(CheckLine { name: name.into(), draws: 0, worst: 0.0 });
            }
            lines[i].draws += 1;
            lines[i].worst = lines[i].worst.max(err);
        }
    }
    lines
}

/// The six-node toy map: a hexagon with one chord.
pub fn toy_game() -> Game {
    let g = Graph::new(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)]).expect("toy map");
    Game::new(ScenarioConfig::confrontation(2), g).expect("toy game")
}

pub fn toy_net(feature_width: usize) -> NetConfig {
    NetConfig {
        d_model: 8,
        encoder_layers: 2,
        decoder_layers: 1,
        heads: 2,
        ff_mult: 2,
        critic_hidden: 6,
        feature_width,
    }
}

/// Uniformly random legal play against the scripted opponents.
pub fn random_transitions(game: &Game, count: usize, rng: &mut ChaCha8Rng) -> Vec<Transition> {
    let mut out = Vec::new();
    let mut s = game.reset(rng.next_u64()).expect("toy reset");
    while out.len() < count {
        let ours: Vec<Action> = game
            .config()
            .members(Team::Ours)
            .map(|k| {
                let legal = game.legal_actions(&s, k).expect("valid agent");
                legal[rng.random_range(0..legal.len())]
            })
            .collect();
        let theirs = scripted_opponents(game, &s).expect("scripted opponents");
        let o = game.step(&s, &ours, &theirs).expect("legal step");
        out.push(Transition {
            state: s.clone(),
            actions: ours,
            reward: o.reward,
            next: o.state.clone(),
            done: o.terminal && o.state.winner != Winner::Timeout,
        });
        s = if o.terminal { game.reset(rng.next_u64()).expect("toy reset") } else { o.state };
    }
    out
}

fn relative(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs())
}

/// Adds `U(-0.1, 0.1)` noise to every parameter. Zero biases can put a
/// ReLU input exactly on its kink (a node whose whole neighbourhood has
/// zero features normalizes to a zero row), where central differences
/// disagree with any one-sided derivative.
fn jitter(ps: &mut crate::nets::ParameterSet, rng: &mut ChaCha8Rng) {
    for t in ps.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

/// End-to-end checks of the critic, policy and behaviour-cloning losses.
/// Each draw has fresh jittered weights, coefficients and a
/// three-transition batch; `coords` random parameter coordinates are
/// perturbed per draw.
pub fn check_losses(draws: usize, coords: usize, seed: u64) -> Vec<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let game = toy_game();
    let net = toy_net(game.config().feature_width());
    let mut worst = [0.0f64; 3];
    for _ in 0..draws {
        let mut l = Learner::new(game.clone(), net.clone(), TrainerConfig::default(), rng.next_u64()).expect("learner");
        jitter(&mut l.actor, &mut rng);
        jitter(&mut l.critic, &mut rng);
        jitter(&mut l.target, &mut rng);
        l.coeffs.log_alpha = rng.random_range(-3.0..0.5);
        l.coeffs.log_beta = rng.random_range(-2.0..1.0);
        let ts = random_transitions(&game, 3, &mut rng);
        let batch: Vec<&Transition> = ts.iter().collect();
        let c = l.coeffs;
        let target_seed = rng.next_u64();
        let models = l.models();
        let (_, cg) = critic_loss(models, &c, &batch, target_seed).expect("critic loss");
        let (_, pg) = policy_loss(models, &c, &batch, KlStatistic::Mean).expect("policy loss");
        let bg = bc_loss(models, &batch).expect("bc loss");

        let critic_coords = l.critic.coordinates();
        let actor_coords = l.actor.coordinates();
        for _ in 0..coords {
            let (id, i) = critic_coords[rng.random_range(0..critic_coords.len())];
            let eval = |delta: f64| {
                let mut p = l.critic.clone();
                p.values_mut()[id].data_mut()[i] += delta;
                let m = Models { critic: &p, ..models };
                critic_loss(m, &c, &batch, target_seed).expect("critic loss").1.loss
            };
            worst[0] = worst[0].max(relative(cg.grads[id][i], (eval(EPS) - eval(-EPS)) / (2.0 * EPS)));

            let (id, i) = actor_coords[rng.random_range(0..actor_coords.len())];
            let perturbed = |delta: f64| {
                let mut p = l.actor.clone();
                p.values_mut()[id].data_mut()[i] += delta;
                p
            };
            let (ap, am) = (perturbed(EPS), perturbed(-EPS));
            let mp = Models { actor: &ap, ..models };
            let mm = Models { actor: &am, ..models };
            let fd = (policy_loss_value(mp, &c, &batch).expect("policy loss")
                - policy_loss_value(mm, &c, &batch).expect("policy loss"))
                / (2.0 * EPS);
            worst[1] = worst[1].max(relative(pg.grads[id][i], fd));
            let fd = (bc_loss(mp, &batch).expect("bc loss").loss - bc_loss(mm, &batch).expect("bc loss").loss) / (2.0 * EPS);
            worst[2] = worst[2].max(relative(bg.grads[id][i], fd));
        }
    }
    ["critic_loss", "policy_loss", "bc_loss"]
        .iter()
        .zip(worst)
        .map(|(n, w)| CheckLine { name: n.to_string(), draws, worst: w })
        .collect()
}
