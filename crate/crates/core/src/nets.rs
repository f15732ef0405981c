//! Attention encoder, agent-centric decoder, pointer actor and the twin
//! per-agent critic whose team value is the plain sum of agent values.
//!
//! Networks are stored as a [`ParameterSet`]: an ordered list of named
//! tensors plus a layout of ids into that list. All forward functions
//! record onto a [`Tape`] borrowing the parameter values, so the same code
//! serves inference and training.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::game::{Action, Game, GameState, Team};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("node {node} out of range for {n} nodes")]
    NodeOutOfRange { node: usize, n: usize },
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ff_mult: usize,
    /// Hidden width of the per-agent critic MLP.
    pub critic_hidden: usize,
    /// Column count of the node feature matrix.
    pub feature_width: usize,
}

impl NetConfig {
    pub fn new(feature_width: usize) -> Self {
        Self {
            d_model: 64,
            encoder_layers: 6,
            decoder_layers: 1,
            heads: 8,
            ff_mult: 4,
            critic_hidden: 64,
            feature_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.decoder_layers == 0 {
            return bad("need at least one decoder layer");
        }
        if self.feature_width == 0 || self.ff_mult == 0 || self.critic_hidden == 0 {
            return bad("widths must be positive");
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        format!(
            "d_model={} encoder_layers={} decoder_layers={} heads={} ff_mult={} critic_hidden={} feature_width={}",
            self.d_model,
            self.encoder_layers,
            self.decoder_layers,
            self.heads,
            self.ff_mult,
            self.critic_hidden,
            self.feature_width
        )
    }

    pub fn digest(&self) -> String {
        hex::encode(&Sha256::digest(self.describe().as_bytes())[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Actor,
    Critic,
}

#[derive(Debug, Clone)]
struct EncoderIds {
    wq: usize,
    wk: usize,
    wv: usize,
    ln1_g: usize,
    ln1_b: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Debug, Clone)]
struct DecoderIds {
    wq: usize,
    wk: usize,
    wv: usize,
}

#[derive(Debug, Clone)]
struct MlpIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

#[derive(Debug, Clone)]
enum Head {
    Pointer { wq: usize, wk: usize, type_emb: usize },
    Twin([MlpIds; 2]),
}

#[derive(Debug, Clone)]
struct Layout {
    input_w: usize,
    input_b: usize,
    encoder: Vec<EncoderIds>,
    decoder: Vec<DecoderIds>,
    head: Head,
}

struct Builder {
    names: Vec<String>,
    values: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.values.push(t);
        self.values.len() - 1
    }

    fn uniform(&mut self, name: String, rows: usize, cols: usize, fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
        self.push(name, t)
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.uniform(name, rows, cols, rows)
    }

    fn constant(&mut self, name: String, cols: usize, v: f64) -> usize {
        self.push(name, Tensor::from_fn(1, cols, |_, _| v))
    }
}

/// Named, shaped parameter arrays of one network.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    config: NetConfig,
    kind: NetKind,
    names: Vec<String>,
    values: Vec<Tensor>,
    layout: Layout,
}

impl ParameterSet {
    /// Fresh parameters: weights and biases uniform in `+-1/sqrt(fan_in)`,
    /// layer-norm gain 1 and bias 0.
    pub fn init(config: NetConfig, kind: NetKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut b = Builder {
            names: Vec::new(),
            values: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let f = config.feature_width;
        let input_w = b.weight("input.w".into(), f, d);
        let input_b = b.uniform("input.b".into(), 1, d, f);
        let ff = d * config.ff_mult;
        let encoder = (0..config.encoder_layers)
            .map(|l| EncoderIds {
                wq: b.weight(format!("enc{l}.wq"), d, d),
                wk: b.weight(format!("enc{l}.wk"), d, d),
                wv: b.weight(format!("enc{l}.wv"), d, d),
                ln1_g: b.constant(format!("enc{l}.ln1.g"), d, 1.0),
                ln1_b: b.constant(format!("enc{l}.ln1.b"), d, 0.0),
                ff1_w: b.weight(format!("enc{l}.ff1.w"), d, ff),
                ff1_b: b.uniform(format!("enc{l}.ff1.b"), 1, ff, d),
                ff2_w: b.weight(format!("enc{l}.ff2.w"), ff, d),
                ff2_b: b.uniform(format!("enc{l}.ff2.b"), 1, d, ff),
                ln2_g: b.constant(format!("enc{l}.ln2.g"), d, 1.0),
                ln2_b: b.constant(format!("enc{l}.ln2.b"), d, 0.0),
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|l| DecoderIds {
                wq: b.weight(format!("dec{l}.wq"), d, d),
                wk: b.weight(format!("dec{l}.wk"), d, d),
                wv: b.weight(format!("dec{l}.wv"), d, d),
            })
            .collect();
        let head = match kind {
            NetKind::Actor => Head::Pointer {
                wq: b.weight("ptr.wq".into(), 2 * d, d),
                wk: b.weight("ptr.wk".into(), d, d),
                type_emb: b.uniform("ptr.type".into(), 2, d, d),
            },
            NetKind::Critic => {
                let h = config.critic_hidden;
                let input = 5 * d + 2;
                let mut mlp = |i: usize| MlpIds {
                    w1: b.weight(format!("q{i}.w1"), input, h),
                    b1: b.uniform(format!("q{i}.b1"), 1, h, input),
                    w2: b.weight(format!("q{i}.w2"), h, h),
                    b2: b.uniform(format!("q{i}.b2"), 1, h, h),
                    w3: b.weight(format!("q{i}.w3"), h, 1),
                    b3: b.uniform(format!("q{i}.b3"), 1, 1, h),
                };
                Head::Twin([mlp(1), mlp(2)])
            }
        };
        Ok(Self {
            config,
            kind,
            names: b.names,
            values: b.values,
            layout: Layout {
                input_w,
                input_b,
                encoder,
                decoder,
                head,
            },
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Every coordinate as `(param id, flat index)`.
    pub fn coordinates(&self) -> Vec<(usize, usize)> {
        self.values
            .iter()
            .enumerate()
            .flat_map(|(id, t)| (0..t.len()).map(move |i| (id, i)))
            .collect()
    }

    /// Sets every pointer-head weight to zero.
    pub fn zero_pointer(&mut self) {
        if let Head::Pointer { wq, wk, type_emb } = self.layout.head {
            for id in [wq, wk, type_emb] {
                self.values[id].data_mut().fill(0.0);
            }
        }
    }

    /// `self = (1 - tau) * self + tau * other`.
    pub fn soft_update_from(&mut self, other: &ParameterSet, tau: f64) -> Result<()> {
        if self.names != other.names {
            return Err(NetError::IncompatibleCheckpoint("parameter layouts differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "soft_update",
                    left: dst.shape(),
                    right: src.shape(),
                }
                .into());
            }
            for (a, &b) in dst.data_mut().iter_mut().zip(src.data()) {
                *a = (1.0 - tau) * *a + tau * b;
            }
        }
        Ok(())
    }

    pub fn to_entries(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    /// Rebuilds a parameter set of the given shape from checkpoint entries
    /// under `prefix`.
    pub fn from_checkpoint(config: NetConfig, kind: NetKind, ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut ps = Self::init(config, kind, 0)?;
        for (name, value) in ps.names.iter().zip(ps.values.iter_mut()) {
            let key = format!("{prefix}{name}");
            let t = ckpt
                .get(&key)
                .ok_or_else(|| NetError::IncompatibleCheckpoint(format!("missing {key}")))?;
            if t.shape() != value.shape() {
                return Err(NetError::IncompatibleCheckpoint(format!(
                    "{key}: shape {:?} vs {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            *value = t.clone();
        }
        Ok(ps)
    }
}

// ---------------------------------------------------------------------------
// inputs

/// One legal action of an agent with the node whose embedding keys it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub action: Action,
    pub node: usize,
    pub is_attack: bool,
}

/// An alive agent of the acting team together with its candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentView {
    pub agent: usize,
    pub node: usize,
    pub candidates: Vec<Candidate>,
    pub neighbors: Vec<usize>,
}

/// Everything the networks read from one state, from our team's side.
#[derive(Debug, Clone, PartialEq)]
pub struct StateInput {
    pub features: Tensor,
    pub agents: Vec<AgentView>,
    /// Nodes of alive opponents.
    pub opponents: Vec<usize>,
}

impl StateInput {
    pub fn new(game: &Game, s: &GameState) -> Self {
        let cfg = game.config();
        let fm = game.featurize(s);
        let features = Tensor::new(fm.rows, fm.cols, fm.values).expect("features are finite");
        let agents = s
            .alive_members(cfg, Team::Ours)
            .map(|k| {
                let node = s.positions[k];
                let candidates = game
                    .legal_actions(s, k)
                    .expect("agent id is valid")
                    .into_iter()
                    .map(|action| match action {
                        Action::Move(v) => Candidate {
                            action,
                            node: v,
                            is_attack: false,
                        },
                        Action::Attack(j) => Candidate {
                            action,
                            node: s.positions[j],
                            is_attack: true,
                        },
                    })
                    .collect();
                AgentView {
                    agent: k,
                    node,
                    candidates,
                    neighbors: game.graph().neighbors(node).expect("valid node").to_vec(),
                }
            })
            .collect();
        let opponents = s.alive_members(cfg, Team::Opponent).map(|j| s.positions[j]).collect();
        Self {
            features,
            agents,
            opponents,
        }
    }
}

/// Attention mask of a map: adjacency with the diagonal forced true.
pub fn attention_mask(game: &Game) -> Arc<[bool]> {
    game.graph().adjacency_mask(true).into()
}

// ---------------------------------------------------------------------------
// forward pieces

fn linear(tape: &mut Tape<'_>, x: Var, w: usize, b: usize) -> Result<Var> {
    let (w, b) = (tape.param(w), tape.param(b));
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

/// Node embeddings `n x d`: input projection, then post-norm masked
/// self-attention blocks.
pub fn encode(tape: &mut Tape<'_>, ps: &ParameterSet, features: &Tensor, mask: &Arc<[bool]>) -> Result<Var> {
    let cfg = &ps.config;
    let n = features.rows();
    if features.cols() != cfg.feature_width {
        return Err(TensorError::ShapeMismatch {
            op: "encode",
            left: features.shape(),
            right: (n, cfg.feature_width),
        }
        .into());
    }
    let lay = &ps.layout;
    let x = tape.constant(features.clone());
    let mut h = linear(tape, x, lay.input_w, lay.input_b)?;
    for e in &lay.encoder {
        let (wq, wk, wv) = (tape.param(e.wq), tape.param(e.wk), tape.param(e.wv));
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let att = tape.multi_head_attention(q, k, v, cfg.heads, Some(mask.clone()))?;
        let res = tape.add(h, att)?;
        let (g1, b1) = (tape.param(e.ln1_g), tape.param(e.ln1_b));
        let h1 = tape.layer_norm(res, g1, b1)?;
        let f1 = linear(tape, h1, e.ff1_w, e.ff1_b)?;
        let f1 = tape.relu(f1);
        let f2 = linear(tape, f1, e.ff2_w, e.ff2_b)?;
        let res = tape.add(h1, f2)?;
        let (g2, b2) = (tape.param(e.ln2_g), tape.param(e.ln2_b));
        h = tape.layer_norm(res, g2, b2)?;
    }
    Ok(h)
}

/// Context embeddings for the agents standing on `nodes`, one row each.
/// Each decoder layer attends from its query over every node.
pub fn decode(tape: &mut Tape<'_>, ps: &ParameterSet, h: Var, nodes: &[usize]) -> Result<Var> {
    let n = tape.value(h).rows();
    if let Some(&node) = nodes.iter().find(|&&c| c >= n) {
        return Err(NetError::NodeOutOfRange { node, n });
    }
    let mut query = tape.gather_rows(h, nodes)?;
    for dl in &ps.layout.decoder {
        let (wq, wk, wv) = (tape.param(dl.wq), tape.param(dl.wk), tape.param(dl.wv));
        let q = tape.matmul(query, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        query = tape.multi_head_attention(q, k, v, ps.config.heads, None)?;
    }
    Ok(query)
}

/// Log-probabilities `1 x k` over an agent's candidates. `ctx_row` is the
/// agent's row of the decoder output.
pub fn pointer_log_probs(
    tape: &mut Tape<'_>,
    ps: &ParameterSet,
    h: Var,
    ctx_row: Var,
    node: usize,
    candidates: &[Candidate],
) -> Result<Var> {
    let Head::Pointer { wq, wk, type_emb } = ps.layout.head else {
        return Err(NetError::InvalidConfig("pointer head on a critic".into()));
    };
    if candidates.is_empty() {
        return Err(NetError::EmptyCandidates);
    }
    let d = ps.config.d_model;
    let hc = tape.gather_rows(h, &[node])?;
    let qin = tape.concat_cols(&[ctx_row, hc])?;
    let wq = tape.param(wq);
    let q = tape.matmul(qin, wq)?;
    let nodes: Vec<usize> = candidates.iter().map(|c| c.node).collect();
    let keys_in = tape.gather_rows(h, &nodes)?;
    let wk = tape.param(wk);
    let keys = tape.matmul(keys_in, wk)?;
    let onehot = tape.constant(Tensor::from_fn(candidates.len(), 2, |r, c| {
        f64::from(u8::from(candidates[r].is_attack == (c == 1)))
    }));
    let te = tape.param(type_emb);
    let type_rows = tape.matmul(onehot, te)?;
    let keys = tape.add(keys, type_rows)?;
    let scores = tape.matmul_nt(q, keys)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    Ok(tape.log_softmax(scores))
}

/// Per-candidate values `k x 1` from both critic heads. The per-agent
/// input is the context, own node, mean neighbor and mean opponent
/// embeddings, followed by the target-node embedding and a move/attack
/// indicator.
pub fn critic_values(
    tape: &mut Tape<'_>,
    ps: &ParameterSet,
    h: Var,
    ctx_row: Var,
    view: &AgentView,
    opponents: &[usize],
) -> Result<[Var; 2]> {
    let Head::Twin(heads) = &ps.layout.head else {
        return Err(NetError::InvalidConfig("critic head on an actor".into()));
    };
    let d = ps.config.d_model;
    let k = view.candidates.len();
    if k == 0 {
        return Err(NetError::EmptyCandidates);
    }
    let hc = tape.gather_rows(h, &[view.node])?;
    let pool = |tape: &mut Tape<'_>, nodes: &[usize]| -> Result<Var> {
        if nodes.is_empty() {
            Ok(tape.constant(Tensor::zeros(1, d)))
        } else {
            let rows = tape.gather_rows(h, nodes)?;
            Ok(tape.mean_rows(rows))
        }
    };
    let nei = pool(tape, &view.neighbors)?;
    let opp = pool(tape, opponents)?;
    let ctx = tape.concat_cols(&[ctx_row, hc, nei, opp])?;
    let ctx = tape.gather_rows(ctx, &vec![0; k])?;
    let nodes: Vec<usize> = view.candidates.iter().map(|c| c.node).collect();
    let targets = tape.gather_rows(h, &nodes)?;
    let bits = tape.constant(Tensor::from_fn(k, 2, |r, c| {
        f64::from(u8::from(view.candidates[r].is_attack == (c == 1)))
    }));
    let x = tape.concat_cols(&[ctx, targets, bits])?;
    let mut out = [x; 2];
    for (o, m) in out.iter_mut().zip(heads.iter()) {
        let a = linear(tape, x, m.w1, m.b1)?;
        let a = tape.relu(a);
        let a = linear(tape, a, m.w2, m.b2)?;
        let a = tape.relu(a);
        *o = linear(tape, a, m.w3, m.b3)?;
    }
    Ok(out)
}

/// Actor pass over a state: one log-probability row per alive agent, in
/// the order of `input.agents`.
pub fn actor_forward(tape: &mut Tape<'_>, ps: &ParameterSet, input: &StateInput, mask: &Arc<[bool]>) -> Result<Vec<Var>> {
    let h = encode(tape, ps, &input.features, mask)?;
    let nodes: Vec<usize> = input.agents.iter().map(|a| a.node).collect();
    if nodes.is_empty() {
        return Ok(Vec::new());
    }
    let ctx = decode(tape, ps, h, &nodes)?;
    let mut out = Vec::with_capacity(nodes.len());
    for (i, view) in input.agents.iter().enumerate() {
        let row = tape.gather_rows(ctx, &[i])?;
        out.push(pointer_log_probs(tape, ps, h, row, view.node, &view.candidates)?);
    }
    Ok(out)
}

/// Critic pass over a state: both heads' candidate values per agent.
pub fn critic_forward(
    tape: &mut Tape<'_>,
    ps: &ParameterSet,
    input: &StateInput,
    mask: &Arc<[bool]>,
) -> Result<Vec<[Var; 2]>> {
    let h = encode(tape, ps, &input.features, mask)?;
    let nodes: Vec<usize> = input.agents.iter().map(|a| a.node).collect();
    if nodes.is_empty() {
        return Ok(Vec::new());
    }
    let ctx = decode(tape, ps, h, &nodes)?;
    let mut out = Vec::with_capacity(nodes.len());
    for (i, view) in input.agents.iter().enumerate() {
        let row = tape.gather_rows(ctx, &[i])?;
        out.push(critic_values(tape, ps, h, row, view, &input.opponents)?);
    }
    Ok(out)
}

/// Action probabilities for every alive agent.
pub fn actor_distribution(ps: &ParameterSet, input: &StateInput, mask: &Arc<[bool]>) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new(ps.values());
    let rows = actor_forward(&mut tape, ps, input, mask)?;
    Ok(rows
        .into_iter()
        .map(|v| tape.value(v).data().iter().map(|l| l.exp()).collect())
        .collect())
}

/// Candidate values from both heads for every alive agent.
pub fn critic_tables(ps: &ParameterSet, input: &StateInput, mask: &Arc<[bool]>) -> Result<Vec<[Vec<f64>; 2]>> {
    let mut tape = Tape::new(ps.values());
    let rows = critic_forward(&mut tape, ps, input, mask)?;
    Ok(rows
        .into_iter()
        .map(|[a, b]| [tape.value(a).data().to_vec(), tape.value(b).data().to_vec()])
        .collect())
}

/// Per-agent values and their team sum, accumulated left to right.
pub fn critic_q_vdn(per_agent: &[f64]) -> (Vec<f64>, f64) {
    let joint = per_agent.iter().fold(0.0, |acc, q| acc + q);
    (per_agent.to_vec(), joint)
}

// ---------------------------------------------------------------------------
// checkpoints

const MAGIC: &[u8; 8] = b"ARACCKPT";
const VERSION: u32 = 1;

/// Versioned container of named tensors plus a configuration digest.
/// Values are stored as little-endian IEEE-754 doubles so a reload is
/// bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: String,
    pub entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn new(digest: String, entries: Vec<(String, Tensor)>) -> Self {
        let index = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Self { digest, entries, index }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.digest);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(NetError::Malformed("bad magic".into()));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(NetError::IncompatibleCheckpoint(format!("version {version}")));
        }
        let digest = get_str(&mut r)?;
        let count = get_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let rows = get_u32(&mut r)? as usize;
            let cols = get_u32(&mut r)? as usize;
            let len = rows.checked_mul(cols).filter(|&l| l * 8 <= r.len());
            let Some(len) = len else {
                return Err(NetError::Malformed(format!("{name}: truncated")));
            };
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let t = Tensor::new(rows, cols, data).map_err(|e| NetError::Malformed(format!("{name}: {e}")))?;
            entries.push((name, t));
        }
        if !r.is_empty() {
            return Err(NetError::Malformed("trailing bytes".into()));
        }
        Ok(Self::new(digest, entries))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| NetError::Io(e.to_string()))?;
        f.write_all(&self.to_bytes()).map_err(|e| NetError::Io(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| NetError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| NetError::Malformed("truncated".into()))
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let len = get_u32(r)? as usize;
    if len > r.len() {
        return Err(NetError::Malformed("truncated string".into()));
    }
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| NetError::Malformed("name is not utf-8".into()))
}
