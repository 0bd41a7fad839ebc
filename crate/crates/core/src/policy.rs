//! Value-conditioned imitation policy: a small tanh network over history,
//! current observation, instruction and value token, trained by fixed-variance
//! Gaussian likelihood.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fault::{detect_failure, inject, FaultConfig, InjectionSchedule};
use crate::nn::{self, Adam, Dense, Params};
use crate::sim::{
    Arm, ArmAction, BimanualAction, EnvMode, Observation, Pose2D, Sim, TaskId, WorldState, ACTION_DIM, OBS_DIM,
    PROPRIO_DIM,
};
use crate::store::{
    build_history, Episode, EpisodeKind, Frame, HistoryMode, HistoryWindow, Outcome, PhaseTag, RollingHistory,
};

pub const CHECKPOINT_VERSION: u32 = 1;
const GRIP_DIMS: [usize; 2] = [3, 7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub history_w: usize,
    pub hidden: usize,
    pub layers: usize,
    pub instr_dim: usize,
    pub value_dim: usize,
    /// Translation (m) that maps to a unit network output.
    pub pos_scale: f64,
    /// Rotation (rad) that maps to a unit network output.
    pub turn_scale: f64,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            history_w: 5,
            hidden: 128,
            layers: 2,
            instr_dim: 8,
            value_dim: 16,
            pos_scale: 0.05,
            turn_scale: 0.3,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.value_dim == 0 || self.instr_dim == 0 {
            return Err(Error::Config("policy dimensions must be positive".into()));
        }
        if !(self.pos_scale > 0.0 && self.turn_scale > 0.0) {
            return Err(Error::Config("policy action scales must be positive".into()));
        }
        Ok(())
    }

    /// Width of the precomputed part of the input: history, mask, current
    /// observation.
    pub fn base_dim(&self) -> usize {
        self.history_w * (OBS_DIM + 1) + OBS_DIM
    }

    pub fn input_dim(&self) -> usize {
        self.base_dim() + self.instr_dim + self.value_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    /// Cosine annealing ends at `lr * final_lr_frac`.
    pub final_lr_frac: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr: 1e-3,
            batch: 64,
            steps: 4000,
            final_lr_frac: 0.05,
            sigma: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_frac) {
            return Err(Error::Config(format!("final_lr_frac must lie in [0, 1], got {}", self.final_lr_frac)));
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-feature affine standardization of observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; OBS_DIM],
            std: vec![1.0; OBS_DIM],
        }
    }

    pub fn fit<'a>(observations: impl IntoIterator<Item = &'a Observation>, floor: f64) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; OBS_DIM];
        let mut sq = vec![0.0; OBS_DIM];
        let mut o = vec![0.0; OBS_DIM];
        for obs in observations {
            obs.write_into(&mut o);
            for k in 0..OBS_DIM {
                sum[k] += o[k];
                sq[k] += o[k] * o[k];
            }
            n += 1;
        }
        if n == 0 {
            return Self::identity();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(floor))
            .collect();
        Self { mean, std }
    }

    fn apply(&self, obs: &Observation, out: &mut [f64]) {
        obs.write_into(out);
        for k in 0..OBS_DIM {
            out[k] = (out[k] - self.mean[k]) / self.std[k];
        }
    }
}

/// Network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Net {
    /// Value token: `tanh(W v + b)`.
    pub val: Dense,
    /// Instruction embeddings, one row per instruction id.
    pub instr: Vec<f64>,
    pub instr_dim: usize,
    pub trunk: Vec<Dense>,
    pub head: Dense,
}

impl Net {
    pub fn init(cfg: &PolicyConfig, rng: &mut impl Rng) -> Self {
        let n_instr = TaskId::ALL.len();
        let mut trunk = Vec::with_capacity(cfg.layers);
        let mut n_in = cfg.input_dim();
        for _ in 0..cfg.layers {
            trunk.push(Dense::init(n_in, cfg.hidden, rng));
            n_in = cfg.hidden;
        }
        let mut val = Dense::init(1, cfg.value_dim, rng);
        for (i, b) in val.b.iter_mut().enumerate() {
            *b = 0.1 * ((i % 3) as f64 - 1.0);
        }
        Self {
            val,
            instr: (0..n_instr * cfg.instr_dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            instr_dim: cfg.instr_dim,
            trunk,
            head: Dense::init(n_in, ACTION_DIM, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            val: Dense::zeros(self.val.n_in, self.val.n_out),
            instr: vec![0.0; self.instr.len()],
            instr_dim: self.instr_dim,
            trunk: self.trunk.iter().map(|l| Dense::zeros(l.n_in, l.n_out)).collect(),
            head: Dense::zeros(self.head.n_in, self.head.n_out),
        }
    }

    fn instr_row(&self, id: u32) -> Result<&[f64]> {
        let d = self.instr_dim;
        let i = id as usize;
        if (i + 1) * d > self.instr.len() {
            return Err(Error::Input(format!("unknown instruction id {id}")));
        }
        Ok(&self.instr[i * d..(i + 1) * d])
    }
}

impl Params for Net {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.val.visit(f);
        f(&self.instr);
        for l in &self.trunk {
            l.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.val.visit_mut(f);
        f(&mut self.instr);
        for l in &mut self.trunk {
            l.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

/// One supervised frame: precomputed base input, conditioning and the
/// normalized target action.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub instruction: u32,
    pub v: f64,
    pub target: [f64; ACTION_DIM],
}

/// Where a sample's value input comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ValueSource {
    Fixed(f64),
    Labels,
}

struct Cache {
    input: Vec<f64>,
    token: Vec<f64>,
    acts: Vec<Vec<f64>>,
    out: Vec<f64>,
}

/// Arm pose as seen in an observation.
fn observed_pose(obs: &Observation, arm: Arm) -> Pose2D {
    let o = arm.index() * (PROPRIO_DIM / 2);
    let p = &obs.proprio;
    Pose2D::new(p[o], p[o + 1], p[o + 2].atan2(p[o + 3]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub cfg: PolicyConfig,
    pub norm: Normalizer,
    pub net: Net,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub curve: Vec<(usize, f64)>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    policy: Policy,
}

impl Policy {
    pub fn new(cfg: PolicyConfig, norm: Normalizer) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            net: Net::init(&cfg, &mut rng),
            norm,
            cfg,
        })
    }

    /// Fresh policy whose normalizer is fitted to the given episodes.
    pub fn for_data(cfg: PolicyConfig, episodes: &[Episode]) -> Result<Self> {
        let norm = Normalizer::fit(episodes.iter().flat_map(|e| e.frames.iter().map(|f| &f.obs)), 0.05);
        Self::new(cfg, norm)
    }

    pub fn write_base(&self, history: &HistoryWindow, obs: &Observation, out: &mut [f64]) -> Result<()> {
        let w = self.cfg.history_w;
        if history.capacity() != w {
            return Err(Error::Dim {
                what: "history window",
                expected: w,
                got: history.capacity(),
            });
        }
        if obs.dim() != OBS_DIM {
            return Err(Error::Dim {
                what: "observation",
                expected: OBS_DIM,
                got: obs.dim(),
            });
        }
        for (i, o) in history.entries.iter().enumerate() {
            let slot = &mut out[i * OBS_DIM..(i + 1) * OBS_DIM];
            if i < history.valid_count {
                self.norm.apply(o, slot);
            } else {
                slot.fill(0.0);
            }
            out[w * OBS_DIM + i] = if i < history.valid_count { 1.0 } else { 0.0 };
        }
        let off = w * (OBS_DIM + 1);
        self.norm.apply(obs, &mut out[off..off + OBS_DIM]);
        Ok(())
    }

    /// Normalized representation of an absolute action taken at `obs`.
    pub fn encode_action(&self, obs: &Observation, action: &BimanualAction) -> [f64; ACTION_DIM] {
        let mut out = [0.0; ACTION_DIM];
        for arm in Arm::BOTH {
            let pose = observed_pose(obs, arm);
            let a = action.arm(arm);
            let o = arm.index() * 4;
            out[o] = ((a.target.x - pose.x) / self.cfg.pos_scale).clamp(-1.0, 1.0);
            out[o + 1] = ((a.target.y - pose.y) / self.cfg.pos_scale).clamp(-1.0, 1.0);
            out[o + 2] = (crate::sim::wrap_angle(a.target.theta - pose.theta) / self.cfg.turn_scale).clamp(-1.0, 1.0);
            out[o + 3] = a.grip.clamp(0.0, 1.0);
        }
        out
    }

    /// Absolute action from a normalized mean.
    pub fn decode_action(&self, obs: &Observation, mu: &[f64]) -> BimanualAction {
        let arm_action = |arm: Arm| {
            let pose = observed_pose(obs, arm);
            let o = arm.index() * 4;
            ArmAction {
                target: Pose2D::new(
                    pose.x + self.cfg.pos_scale * mu[o],
                    pose.y + self.cfg.pos_scale * mu[o + 1],
                    pose.theta + self.cfg.turn_scale * mu[o + 2],
                ),
                grip: mu[o + 3],
            }
        };
        BimanualAction {
            left: arm_action(Arm::Left),
            right: arm_action(Arm::Right),
        }
    }

    pub fn samples(&self, episode: &Episode, mode: HistoryMode, value: ValueSource) -> Result<Vec<Sample>> {
        let base = self.cfg.base_dim();
        episode
            .frames
            .iter()
            .map(|f| {
                let v = match value {
                    ValueSource::Fixed(v) => v,
                    ValueSource::Labels => f.v.ok_or_else(|| {
                        Error::validation(format!("frames[{}].v", f.t), format!("{} is unlabeled", episode.episode_id))
                    })?,
                };
                let h = build_history(episode, f.t, self.cfg.history_w, mode)?;
                let mut x = vec![0.0; base];
                self.write_base(&h, &f.obs, &mut x)?;
                Ok(Sample {
                    x,
                    instruction: episode.instruction_id,
                    v,
                    target: self.encode_action(&f.obs, &f.action),
                })
            })
            .collect()
    }

    pub fn dataset_samples(&self, episodes: &[Episode], mode: HistoryMode, value: ValueSource) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for ep in episodes {
            out.extend(self.samples(ep, mode, value)?);
        }
        Ok(out)
    }

    fn forward_batch(&self, net: &Net, batch: &[&Sample]) -> Result<Cache> {
        let n = batch.len();
        let base = self.cfg.base_dim();
        let dim = self.cfg.input_dim();
        let vd = self.cfg.value_dim;
        let vs: Vec<f64> = batch.iter().map(|s| s.v).collect();
        let mut token = net.val.forward(&vs, n);
        nn::tanh_inplace(&mut token);
        let mut input = vec![0.0; n * dim];
        for (i, s) in batch.iter().enumerate() {
            let row = &mut input[i * dim..(i + 1) * dim];
            row[..base].copy_from_slice(&s.x);
            row[base..base + net.instr_dim].copy_from_slice(net.instr_row(s.instruction)?);
            row[base + net.instr_dim..].copy_from_slice(&token[i * vd..(i + 1) * vd]);
        }
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(net.trunk.len());
        for l in &net.trunk {
            let mut h = l.forward(acts.last().unwrap_or(&input), n);
            nn::tanh_inplace(&mut h);
            acts.push(h);
        }
        let mut out = net.head.forward(acts.last().unwrap_or(&input), n);
        for row in out.chunks_exact_mut(ACTION_DIM) {
            for g in GRIP_DIMS {
                row[g] = nn::sigmoid(row[g]);
            }
        }
        Ok(Cache { input, token, acts, out })
    }

    fn backward_batch(&self, net: &Net, batch: &[&Sample], c: &Cache, mut dout: Vec<f64>, g: &mut Net) -> Result<()> {
        let n = batch.len();
        for (row, y) in dout.chunks_exact_mut(ACTION_DIM).zip(c.out.chunks_exact(ACTION_DIM)) {
            for k in GRIP_DIMS {
                row[k] *= y[k] * (1.0 - y[k]);
            }
        }
        let last = c.acts.last().unwrap_or(&c.input);
        let mut d = net.head.backward(last, &dout, n, &mut g.head);
        for (li, l) in net.trunk.iter().enumerate().rev() {
            nn::tanh_backward(&c.acts[li], &mut d);
            let x = if li == 0 { &c.input } else { &c.acts[li - 1] };
            d = l.backward(x, &d, n, &mut g.trunk[li]);
        }
        let dim = self.cfg.input_dim();
        let base = self.cfg.base_dim();
        let idim = net.instr_dim;
        let vd = self.cfg.value_dim;
        let mut dtok = vec![0.0; n * vd];
        for (i, s) in batch.iter().enumerate() {
            let row = &d[i * dim..(i + 1) * dim];
            let o = s.instruction as usize * idim;
            for k in 0..idim {
                g.instr[o + k] += row[base + k];
            }
            dtok[i * vd..(i + 1) * vd].copy_from_slice(&row[base + idim..]);
        }
        nn::tanh_backward(&c.token, &mut dtok);
        let vs: Vec<f64> = batch.iter().map(|s| s.v).collect();
        net.val.backward(&vs, &dtok, n, &mut g.val);
        Ok(())
    }

    /// Mean per-frame negative log-likelihood (up to a constant) of the
    /// batch targets under a fixed-variance Gaussian around the network mean.
    pub fn nll(&self, net: &Net, batch: &[&Sample], sigma: f64, grads: Option<&mut Net>) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let n = batch.len() as f64;
        let c = self.forward_batch(net, batch)?;
        let inv = 1.0 / (sigma * sigma);
        let mut loss = 0.0;
        let mut dout = vec![0.0; c.out.len()];
        for (i, s) in batch.iter().enumerate() {
            for k in 0..ACTION_DIM {
                let r = c.out[i * ACTION_DIM + k] - s.target[k];
                loss += 0.5 * r * r * inv;
                dout[i * ACTION_DIM + k] = r * inv / n;
            }
        }
        if let Some(g) = grads {
            self.backward_batch(net, batch, &c, dout, g)?;
        }
        Ok(loss / n)
    }

    /// `nll(expert) + lambda * nll(recovery)`.
    pub fn recovery_aware_loss(
        &self,
        net: &Net,
        expert: &[&Sample],
        recovery: &[&Sample],
        lambda: f64,
        sigma: f64,
        mut grads: Option<&mut Net>,
    ) -> Result<f64> {
        let le = self.nll(net, expert, sigma, grads.as_deref_mut())?;
        if lambda == 0.0 || recovery.is_empty() {
            return Ok(le);
        }
        let lr = match grads {
            Some(g) => {
                let mut gr = net.zeros_like();
                let l = self.nll(net, recovery, sigma, Some(&mut gr))?;
                let mut flat = g.to_flat();
                for (a, b) in flat.iter_mut().zip(gr.to_flat()) {
                    *a += lambda * b;
                }
                g.set_flat(&flat);
                l
            }
            None => self.nll(net, recovery, sigma, None)?,
        };
        Ok(le + lambda * lr)
    }

    fn mean_nll(&self, samples: &[Sample], sigma: f64) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for chunk in samples.chunks(512) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            total += self.nll(&self.net, &refs, sigma, None)? * chunk.len() as f64;
        }
        Ok(total / samples.len() as f64)
    }

    fn fit(
        &mut self,
        tc: &TrainConfig,
        full_loss: impl Fn(&Policy) -> Result<f64>,
        mut batch_loss: impl FnMut(&Policy, &mut ChaCha8Rng, &mut Net) -> Result<f64>,
    ) -> Result<TrainReport> {
        let mut report = TrainReport {
            initial_loss: full_loss(self)?,
            ..TrainReport::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        let mut opt = Adam::new(tc.lr, self.net.num_params());
        let every = (tc.steps / 100).max(1);
        for step in 0..tc.steps {
            let cos = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / tc.steps as f64).cos());
            opt.lr = tc.lr * (tc.final_lr_frac + (1.0 - tc.final_lr_frac) * cos);
            let mut g = self.net.zeros_like();
            let loss = batch_loss(self, &mut rng, &mut g)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("policy loss became {loss} at step {step}")));
            }
            let mut net = std::mem::replace(&mut self.net, g.zeros_like());
            opt.step(&mut net, &g);
            self.net = net;
            if step % every == 0 {
                report.curve.push((step, loss));
            }
        }
        if !self.net.all_finite() {
            return Err(Error::Training("policy parameters became non-finite".into()));
        }
        report.final_loss = full_loss(self)?;
        Ok(report)
    }

    /// Imitation on expert data plus `lambda`-weighted imitation on
    /// history-reset recovery slices, with the value input pinned to 1.
    pub fn train_rai(&mut self, expert: &[Episode], recovery: &[Episode], tc: &TrainConfig) -> Result<TrainReport> {
        tc.validate()?;
        let es = self.dataset_samples(expert, HistoryMode::Raw, ValueSource::Fixed(1.0))?;
        let rs = self.dataset_samples(recovery, HistoryMode::Reset, ValueSource::Fixed(1.0))?;
        self.train_rai_samples(&es, &rs, tc)
    }

    pub fn train_rai_samples(&mut self, es: &[Sample], rs: &[Sample], tc: &TrainConfig) -> Result<TrainReport> {
        tc.validate()?;
        if es.is_empty() {
            return Err(Error::InsufficientData("no expert frames".into()));
        }
        if rs.is_empty() && tc.lambda > 0.0 {
            return Err(Error::InsufficientData("no recovery frames".into()));
        }
        let half = if rs.is_empty() { tc.batch } else { tc.batch.div_ceil(2) };
        self.fit(
            tc,
            |p| Ok(p.mean_nll(es, tc.sigma)? + tc.lambda * p.mean_nll(rs, tc.sigma)?),
            |p, rng, g| {
                let eb: Vec<&Sample> = (0..half).map(|_| &es[rng.random_range(0..es.len())]).collect();
                let rb: Vec<&Sample> = if rs.is_empty() {
                    Vec::new()
                } else {
                    (0..half).map(|_| &rs[rng.random_range(0..rs.len())]).collect()
                };
                p.recovery_aware_loss(&p.net, &eb, &rb, tc.lambda, tc.sigma, Some(g))
            },
        )
    }

    /// Imitation on expert data only.
    pub fn train_sft(&mut self, expert: &[Episode], tc: &TrainConfig) -> Result<TrainReport> {
        let tc = TrainConfig {
            lambda: 0.0,
            ..tc.clone()
        };
        self.train_rai(expert, &[], &tc)
    }

    /// Value-conditioned fine-tuning on labeled raw episodes.
    pub fn train_vcr(&mut self, labeled: &[Episode], tc: &TrainConfig) -> Result<TrainReport> {
        let s = self.dataset_samples(labeled, HistoryMode::Raw, ValueSource::Labels)?;
        self.train_vcr_samples(&s, tc)
    }

    pub fn train_vcr_samples(&mut self, s: &[Sample], tc: &TrainConfig) -> Result<TrainReport> {
        tc.validate()?;
        if s.is_empty() {
            return Err(Error::InsufficientData("no labeled frames".into()));
        }
        self.fit(
            tc,
            |p| p.mean_nll(s, tc.sigma),
            |p, rng, g| {
                let b: Vec<&Sample> = (0..tc.batch).map(|_| &s[rng.random_range(0..s.len())]).collect();
                p.nll(&p.net, &b, tc.sigma, Some(g))
            },
        )
    }

    /// Mean action for one step.
    pub fn forward(&self, obs: &Observation, history: &HistoryWindow, instruction: u32, v: f64) -> Result<BimanualAction> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Input(format!("value input {v} outside [0, 1]")));
        }
        let mut x = vec![0.0; self.cfg.base_dim()];
        self.write_base(history, obs, &mut x)?;
        let s = Sample {
            x,
            instruction,
            v,
            target: [0.0; ACTION_DIM],
        };
        let c = self.forward_batch(&self.net, &[&s])?;
        Ok(self.decode_action(obs, &c.out))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ck = Checkpoint {
            schema_version: CHECKPOINT_VERSION,
            policy: self.clone(),
        };
        let bytes = serde_json::to_vec(&ck).map_err(|e| Error::Integrity(e.to_string()))?;
        crate::store::write_atomic(path, &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
        let ck: Checkpoint = crate::store::decode_versioned(path, &bytes, CHECKPOINT_VERSION)?;
        ck.policy.cfg.validate()?;
        Ok(ck.policy)
    }
}

/// Closed-loop controller state: the policy plus its rolling history.
pub struct Controller<'a> {
    pub policy: &'a Policy,
    pub v: f64,
    history: RollingHistory,
}

impl<'a> Controller<'a> {
    pub fn new(policy: &'a Policy, v: f64) -> Self {
        Self {
            policy,
            v,
            history: RollingHistory::new(policy.cfg.history_w),
        }
    }

    /// Action for the current observation; the observation then joins the
    /// history.
    pub fn act(&mut self, obs: &Observation) -> Result<BimanualAction> {
        let a = self.policy.forward(obs, &self.history.window(), obs.instruction_id, self.v)?;
        self.history.push(obs.clone());
        Ok(a)
    }

    /// Records an observation whose action came from elsewhere.
    pub fn observe(&mut self, obs: &Observation) {
        self.history.push(obs.clone());
    }
}

/// Where an injection fires on a policy rollout.
pub fn policy_trigger(schedule: &InjectionSchedule, state: &WorldState, sim: &Sim, faults: &FaultConfig) -> bool {
    let Some(obj) = state.objects.get(schedule.object) else {
        return false;
    };
    let d = obj.pose.dist(state.arm_pose(schedule.arm));
    match schedule.kind {
        crate::fault::ErrorKind::E1 => d <= faults.approach_trigger_dist && state.held_by(schedule.arm).is_none(),
        crate::fault::ErrorKind::E2 => obj.held_by == Some(schedule.arm),
        _ => d <= sim.cfg.grasp_radius && state.held_by(schedule.arm).is_none(),
    }
}

pub struct RolloutSpec {
    pub task: TaskId,
    pub mode: EnvMode,
    pub seed: u64,
    pub v: f64,
    pub max_steps: usize,
}

/// Runs the policy from reset. With an injection, the override is applied to
/// the policy's own actions from the first trigger step.
pub fn rollout(
    policy: &Policy,
    sim: &Sim,
    spec: &RolloutSpec,
    injection: Option<(InjectionSchedule, &FaultConfig)>,
) -> Result<Episode> {
    let mut st = sim.reset(spec.task, spec.mode, spec.seed);
    let mut ctl = Controller::new(policy, spec.v);
    let mut frames = Vec::new();
    let mut schedule = injection.as_ref().map(|(s, _)| s.clone());
    let mut success = false;
    let mut t = 0usize;
    loop {
        if sim.success_check(spec.task, &st) {
            success = true;
            break;
        }
        if detect_failure(t, spec.max_steps) {
            break;
        }
        let obs = sim.observe(&st);
        let mut a = ctl.act(&obs)?;
        let mut tag = PhaseTag::Nominal;
        if let (Some(s), Some((_, faults))) = (schedule.as_mut(), injection.as_ref()) {
            if !s.is_resolved() && policy_trigger(s, &st, sim, faults) {
                s.resolve(t, faults)?;
            }
            if s.is_resolved() {
                a = inject(&a, t, s, None)?;
                tag = if s.ended(t) { PhaseTag::Recovery } else { PhaseTag::Error };
            }
        }
        frames.push(Frame {
            t,
            obs,
            action: a,
            phase: tag,
            v: None,
        });
        st = sim.step(&st, &a)?;
        t += 1;
    }
    frames.push(Frame {
        t,
        obs: sim.observe(&st),
        action: BimanualAction::hold(&st),
        phase: if schedule.as_ref().is_some_and(|s| s.ended(t)) { PhaseTag::Recovery } else { PhaseTag::Nominal },
        v: None,
    });
    let t_rec = frames.iter().position(|f| f.phase == PhaseTag::Recovery);
    let kind = match (success, t_rec) {
        (true, Some(_)) => EpisodeKind::FailureRecovery,
        (true, None) if frames.iter().all(|f| f.phase == PhaseTag::Nominal) => EpisodeKind::NominalSuccess,
        _ => EpisodeKind::PureFailure,
    };
    if kind == EpisodeKind::PureFailure {
        if let Some(onset) = frames.iter().position(|f| f.phase != PhaseTag::Nominal) {
            frames[onset..].iter_mut().for_each(|f| f.phase = PhaseTag::Error);
        }
    }
    let mut ep = Episode {
        episode_id: format!("{}-{}-policy-s{}", spec.task, spec.mode, spec.seed),
        task_id: spec.task,
        instruction_id: spec.task.instruction_id(),
        env_mode: spec.mode,
        seed: spec.seed,
        error_type: schedule.as_ref().map(|s| s.kind),
        t_rec: (kind == EpisodeKind::FailureRecovery).then_some(t_rec).flatten(),
        outcome: if success { Outcome::Success } else { Outcome::Failure },
        kind,
        frames,
        provenance: Default::default(),
    };
    ep.provenance.insert("source".into(), "policy".into());
    ep.provenance.insert("v".into(), spec.v.into());
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault::Interceptor;
    use crate::planner::Planner;

    fn tiny() -> PolicyConfig {
        PolicyConfig {
            history_w: 2,
            hidden: 6,
            layers: 2,
            instr_dim: 3,
            value_dim: 4,
            ..PolicyConfig::default()
        }
    }

    fn demos(n: u64) -> Vec<Episode> {
        let ic = Interceptor::new(Sim::default(), Planner::default(), FaultConfig::default());
        (0..n)
            .filter_map(|s| ic.run_nominal(TaskId::PickPlace, EnvMode::Random, s).unwrap().episode())
            .collect()
    }

    #[test]
    fn action_codec_round_trips_small_moves() {
        let eps = demos(1);
        let p = Policy::new(tiny(), Normalizer::identity()).unwrap();
        let f = &eps[0].frames[3];
        let enc = p.encode_action(&f.obs, &f.action);
        assert!(enc.iter().all(|v| (-1.0..=1.0).contains(v)));
        let dec = p.decode_action(&f.obs, &enc);
        for arm in Arm::BOTH {
            assert_eq!(dec.arm(arm).grip, f.action.arm(arm).grip);
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let eps = demos(1);
        let p = Policy::for_data(tiny(), &eps).unwrap();
        let s = p.samples(&eps[0], HistoryMode::Raw, ValueSource::Fixed(0.7)).unwrap();
        let batch: Vec<&Sample> = vec![&s[2], &s[10], &s[20]];
        let mut g = p.net.zeros_like();
        p.nll(&p.net, &batch, 0.1, Some(&mut g)).unwrap();
        let coords: Vec<usize> = (0..p.net.num_params()).collect();
        let err = nn::gradient_check(&p.net, &g, &coords, 1e-5, |n| p.nll(n, &batch, 0.1, None).unwrap());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn nll_is_scaled_mse() {
        let eps = demos(1);
        let p = Policy::for_data(tiny(), &eps).unwrap();
        let s = p.samples(&eps[0], HistoryMode::Raw, ValueSource::Fixed(1.0)).unwrap();
        let batch: Vec<&Sample> = s.iter().take(4).collect();
        let (mut g1, mut g2) = (p.net.zeros_like(), p.net.zeros_like());
        let l1 = p.nll(&p.net, &batch, 0.1, Some(&mut g1)).unwrap();
        let l2 = p.nll(&p.net, &batch, 1.0, Some(&mut g2)).unwrap();
        assert!((l1 - 100.0 * l2).abs() < 1e-9 * l1);
        for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
            assert!((a - 100.0 * b).abs() <= 1e-9 * a.abs().max(1e-12));
        }
    }

    #[test]
    fn mixed_loss_lambda_semantics() {
        let eps = demos(2);
        let p = Policy::for_data(tiny(), &eps).unwrap();
        let a = p.samples(&eps[0], HistoryMode::Raw, ValueSource::Fixed(1.0)).unwrap();
        let b = p.samples(&eps[1], HistoryMode::Raw, ValueSource::Fixed(1.0)).unwrap();
        let ea: Vec<&Sample> = a.iter().take(5).collect();
        let eb: Vec<&Sample> = b.iter().take(7).collect();
        let ab = p.recovery_aware_loss(&p.net, &ea, &eb, 1.0, 0.1, None).unwrap();
        let ba = p.recovery_aware_loss(&p.net, &eb, &ea, 1.0, 0.1, None).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let mut g0 = p.net.zeros_like();
        let mut ge = p.net.zeros_like();
        p.recovery_aware_loss(&p.net, &ea, &eb, 0.0, 0.1, Some(&mut g0)).unwrap();
        p.nll(&p.net, &ea, 0.1, Some(&mut ge)).unwrap();
        assert_eq!(g0, ge);
    }

    #[test]
    fn value_token_reaches_the_output() {
        let eps = demos(1);
        let p = Policy::for_data(tiny(), &eps).unwrap();
        let f = &eps[0].frames[5];
        let h = build_history(&eps[0], 5, 2, HistoryMode::Raw).unwrap();
        let a1 = p.forward(&f.obs, &h, 0, 1.0).unwrap();
        assert_eq!(a1, p.forward(&f.obs, &h, 0, 1.0).unwrap());
        assert_ne!(a1, p.forward(&f.obs, &h, 0, 0.0).unwrap());
        for arm in Arm::BOTH {
            assert!((0.0..=1.0).contains(&a1.arm(arm).grip));
        }
        assert!(p.forward(&f.obs, &HistoryWindow::empty(3), 0, 1.0).is_err());
        assert!(p.forward(&f.obs, &h, 0, 1.5).is_err());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let eps = demos(3);
        let tc = TrainConfig {
            steps: 150,
            batch: 16,
            ..TrainConfig::default()
        };
        let mut a = Policy::for_data(tiny(), &eps).unwrap();
        let mut b = a.clone();
        let ra = a.train_sft(&eps, &tc).unwrap();
        b.train_sft(&eps, &tc).unwrap();
        assert_eq!(a, b);
        assert!(ra.final_loss < ra.initial_loss);
    }

    #[test]
    fn value_training_rejects_unlabeled_frames() {
        let eps = demos(1);
        let mut p = Policy::for_data(tiny(), &eps).unwrap();
        assert!(matches!(
            p.train_vcr(&eps, &TrainConfig::default()),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn stalled_rollout_truncates_after_budget() {
        let mut p = Policy::new(tiny(), Normalizer::identity()).unwrap();
        p.net.fill(0.0);
        let spec = RolloutSpec {
            task: TaskId::PickPlace,
            mode: EnvMode::Clean,
            seed: 0,
            v: 1.0,
            max_steps: 30,
        };
        let ep = rollout(&p, &Sim::default(), &spec, None).unwrap();
        assert_eq!(ep.outcome, Outcome::Failure);
        assert_eq!(ep.last_index(), 31);
        ep.validate().unwrap();
        assert_eq!(ep, rollout(&p, &Sim::default(), &spec, None).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = Policy::for_data(tiny(), &demos(1)).unwrap();
        let path = dir.path().join("p.json");
        p.save(&path).unwrap();
        assert_eq!(Policy::load(&path).unwrap(), p);
    }
}
