//! Progress-aware value function: frozen featurizers, trainable adapters into
//! a shared unit-sphere embedding space, progress alignment and
//! nearest-reference progress estimation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::spearman;
use crate::nn::{self, Adam, Dense, Params};
use crate::sim::{Observation, TaskId, OBS_DIM};
use crate::store::{decode_versioned, write_atomic, Episode, Outcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValueConfig {
    pub feat_dim: usize,
    pub instr_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub featurizer_seed: u64,
    pub instruction_seed: u64,
    pub seed: u64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            feat_dim: 64,
            instr_dim: 64,
            hidden: 64,
            embed_dim: 32,
            lr: 1e-3,
            batch: 32,
            steps: 3000,
            featurizer_seed: 17,
            instruction_seed: 29,
            seed: 0,
        }
    }
}

const POOLED: usize = 3 * OBS_DIM;

/// Frozen random projection of (mean, last, first) pooled observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub dim: usize,
    pub seed: u64,
    proj: Vec<f64>,
}

impl Featurizer {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (POOLED as f64).sqrt()).expect("valid std");
        let proj = (0..dim * POOLED).map(|_| normal.sample(&mut rng)).collect();
        Self { dim, seed, proj }
    }

    fn project(&self, pooled: &[f64]) -> Vec<f64> {
        self.proj.chunks_exact(POOLED).map(|row| nn::dot(row, pooled)).collect()
    }

    pub fn featurize(&self, prefix: &[Observation]) -> Result<Vec<f64>> {
        let (Some(first), Some(last)) = (prefix.first(), prefix.last()) else {
            return Err(Error::Input("cannot featurize an empty prefix".into()));
        };
        let mut pooled = vec![0.0; POOLED];
        let mut o = vec![0.0; OBS_DIM];
        for obs in prefix {
            obs.write_into(&mut o);
            for (p, v) in pooled[..OBS_DIM].iter_mut().zip(&o) {
                *p += v;
            }
        }
        let n = prefix.len() as f64;
        pooled[..OBS_DIM].iter_mut().for_each(|p| *p /= n);
        last.write_into(&mut pooled[OBS_DIM..2 * OBS_DIM]);
        first.write_into(&mut pooled[2 * OBS_DIM..]);
        Ok(self.project(&pooled))
    }

    /// Features of every prefix `frames[0..=t]` of an episode.
    pub fn featurize_prefixes(&self, episode: &Episode) -> Vec<Vec<f64>> {
        let Some(first) = episode.frames.first() else {
            return Vec::new();
        };
        let mut sum = vec![0.0; OBS_DIM];
        let mut o = vec![0.0; OBS_DIM];
        let mut pooled = vec![0.0; POOLED];
        first.obs.write_into(&mut pooled[2 * OBS_DIM..]);
        episode
            .frames
            .iter()
            .enumerate()
            .map(|(t, f)| {
                f.obs.write_into(&mut o);
                for (s, v) in sum.iter_mut().zip(&o) {
                    *s += v;
                }
                let n = (t + 1) as f64;
                for (p, s) in pooled[..OBS_DIM].iter_mut().zip(&sum) {
                    *p = s / n;
                }
                pooled[OBS_DIM..2 * OBS_DIM].copy_from_slice(&o);
                self.project(&pooled)
            })
            .collect()
    }
}

/// Frozen per-instruction feature table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionTable {
    pub dim: usize,
    pub seed: u64,
    rows: BTreeMap<u32, Vec<f64>>,
}

impl InstructionTable {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        let rows = TaskId::ALL
            .iter()
            .map(|t| (t.instruction_id(), (0..dim).map(|_| normal.sample(&mut rng)).collect()))
            .collect();
        Self { dim, seed, rows }
    }

    pub fn get(&self, id: u32) -> Result<&[f64]> {
        self.rows
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Input(format!("unknown instruction id {id}")))
    }
}

/// Two-layer perceptron with tanh hidden units, followed by L2 normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub l1: Dense,
    pub l2: Dense,
}

struct AdapterCache {
    h: Vec<f64>,
    z: Vec<f64>,
    norms: Vec<f64>,
}

impl Adapter {
    pub fn init<R: Rng>(n_in: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            l1: Dense::init(n_in, hidden, rng),
            l2: Dense::init(hidden, out, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            l1: Dense::zeros(self.l1.n_in, self.l1.n_out),
            l2: Dense::zeros(self.l2.n_in, self.l2.n_out),
        }
    }

    fn forward(&self, x: &[f64], batch: usize) -> AdapterCache {
        let mut h = self.l1.forward(x, batch);
        nn::tanh_inplace(&mut h);
        let mut z = self.l2.forward(&h, batch);
        let norms = nn::normalize_rows(&mut z, self.l2.n_out);
        AdapterCache { h, z, norms }
    }

    fn backward(&self, x: &[f64], c: &AdapterCache, mut dz: Vec<f64>, batch: usize, g: &mut Adapter) {
        nn::normalize_backward(&c.z, &c.norms, &mut dz, self.l2.n_out);
        let mut dh = self.l2.backward(&c.h, &dz, batch, &mut g.l2);
        nn::tanh_backward(&c.h, &mut dh);
        self.l1.backward(x, &dh, batch, &mut g.l1);
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.l1.n_in {
            return Err(Error::Dim {
                what: "adapter input",
                expected: self.l1.n_in,
                got: x.len(),
            });
        }
        Ok(self.forward(x, 1).z)
    }
}

impl Params for Adapter {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.l1.visit(f);
        self.l2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.l1.visit_mut(f);
        self.l2.visit_mut(f);
    }
}

/// The trainable part: visual and language adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub visual: Adapter,
    pub language: Adapter,
}

impl AdapterParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            visual: self.visual.zeros_like(),
            language: self.language.zeros_like(),
        }
    }
}

impl Params for AdapterParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.visual.visit(f);
        self.language.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.visual.visit_mut(f);
        self.language.visit_mut(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Language,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueModel {
    pub cfg: ValueConfig,
    pub featurizer: Featurizer,
    pub instructions: InstructionTable,
    pub params: AdapterParams,
}

/// One alignment sample: prefix features, instruction id, target progress.
#[derive(Debug, Clone)]
pub struct AlignSample {
    pub feat: Vec<f64>,
    pub instruction: u32,
    pub target: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AlignReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `(step, minibatch loss)` every few steps.
    pub curve: Vec<(usize, f64)>,
}

impl ValueModel {
    pub fn new(cfg: ValueConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = AdapterParams {
            visual: Adapter::init(cfg.feat_dim, cfg.hidden, cfg.embed_dim, &mut rng),
            language: Adapter::init(cfg.instr_dim, cfg.hidden, cfg.embed_dim, &mut rng),
        };
        Self {
            featurizer: Featurizer::new(cfg.feat_dim, cfg.featurizer_seed),
            instructions: InstructionTable::new(cfg.instr_dim, cfg.instruction_seed),
            params,
            cfg,
        }
    }

    pub fn featurize_trajectory(&self, prefix: &[Observation]) -> Result<Vec<f64>> {
        self.featurizer.featurize(prefix)
    }

    pub fn featurize_instruction(&self, id: u32) -> Result<Vec<f64>> {
        self.instructions.get(id).map(<[f64]>::to_vec)
    }

    pub fn embed(&self, raw: &[f64], which: Modality) -> Result<Vec<f64>> {
        match which {
            Modality::Visual => self.params.visual.embed(raw),
            Modality::Language => self.params.language.embed(raw),
        }
    }

    pub fn embed_episode(&self, episode: &Episode) -> Result<Vec<f64>> {
        let obs: Vec<Observation> = episode.frames.iter().map(|f| f.obs.clone()).collect();
        self.embed(&self.featurize_trajectory(&obs)?, Modality::Visual)
    }

    pub fn embed_instruction(&self, id: u32) -> Result<Vec<f64>> {
        self.embed(self.instructions.get(id)?, Modality::Language)
    }

    /// Cosine similarity between each prefix `0..=t` and the instruction.
    pub fn progress_curve(&self, episode: &Episode) -> Result<Vec<f64>> {
        let zl = self.embed_instruction(episode.instruction_id)?;
        self.featurizer
            .featurize_prefixes(episode)
            .iter()
            .map(|f| Ok(nn::dot(&self.embed(f, Modality::Visual)?, &zl)))
            .collect()
    }

    /// All alignment samples `t = 1..=T` of the given episodes.
    pub fn align_samples(&self, episodes: &[Episode]) -> Vec<Vec<AlignSample>> {
        episodes
            .iter()
            .map(|ep| {
                let big_t = ep.last_index();
                self.featurizer
                    .featurize_prefixes(ep)
                    .into_iter()
                    .enumerate()
                    .skip(1)
                    .map(|(t, feat)| AlignSample {
                        feat,
                        instruction: ep.instruction_id,
                        target: t as f64 / big_t as f64,
                    })
                    .collect()
            })
            .collect()
    }

    /// Mean squared alignment error on a batch, accumulating gradients into
    /// `grads` when given.
    pub fn align_loss(&self, params: &AdapterParams, batch: &[&AlignSample], grads: Option<&mut AdapterParams>) -> Result<f64> {
        let n = batch.len();
        let fd = self.cfg.feat_dim;
        let ld = self.cfg.instr_dim;
        let d = self.cfg.embed_dim;
        let mut xv = Vec::with_capacity(n * fd);
        let mut xl = Vec::with_capacity(n * ld);
        for s in batch {
            xv.extend_from_slice(&s.feat);
            xl.extend_from_slice(self.instructions.get(s.instruction)?);
        }
        let cv = params.visual.forward(&xv, n);
        let cl = params.language.forward(&xl, n);
        let mut loss = 0.0;
        let mut dzv = vec![0.0; n * d];
        let mut dzl = vec![0.0; n * d];
        for (i, s) in batch.iter().enumerate() {
            let zv = &cv.z[i * d..(i + 1) * d];
            let zl = &cl.z[i * d..(i + 1) * d];
            let r = nn::dot(zv, zl) - s.target;
            loss += r * r;
            let dc = 2.0 * r / n as f64;
            for k in 0..d {
                dzv[i * d + k] = dc * zl[k];
                dzl[i * d + k] = dc * zv[k];
            }
        }
        if let Some(g) = grads {
            params.visual.backward(&xv, &cv, dzv, n, &mut g.visual);
            params.language.backward(&xl, &cl, dzl, n, &mut g.language);
        }
        Ok(loss / n as f64)
    }

    fn dataset_loss(&self, samples: &[Vec<AlignSample>]) -> Result<f64> {
        // Episode-weighted, matching the per-episode 1/T normalization.
        let mut total = 0.0;
        let mut count = 0usize;
        for ep in samples.iter().filter(|s| !s.is_empty()) {
            let refs: Vec<&AlignSample> = ep.iter().collect();
            total += self.align_loss(&self.params, &refs, None)?;
            count += 1;
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    /// Trains the adapters so prefix/instruction similarity tracks progress.
    pub fn train_align(&mut self, success: &[Episode]) -> Result<AlignReport> {
        let samples = self.align_samples(success);
        let usable: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].is_empty()).collect();
        if usable.is_empty() && self.cfg.steps > 0 {
            return Err(Error::InsufficientData("no successful episode with at least two frames".into()));
        }
        let mut report = AlignReport {
            initial_loss: self.dataset_loss(&samples)?,
            ..AlignReport::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xA11C);
        let mut opt = Adam::new(self.cfg.lr, self.params.num_params());
        let every = (self.cfg.steps / 100).max(1);
        for step in 0..self.cfg.steps {
            let batch: Vec<&AlignSample> = (0..self.cfg.batch)
                .map(|_| {
                    let ep = &samples[usable[rng.random_range(0..usable.len())]];
                    &ep[rng.random_range(0..ep.len())]
                })
                .collect();
            let mut g = self.params.zeros_like();
            let loss = self.align_loss(&self.params, &batch, Some(&mut g))?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("alignment loss diverged at step {step}")));
            }
            opt.step(&mut self.params, &g);
            if step % every == 0 {
                report.curve.push((step, loss));
            }
        }
        report.final_loss = self.dataset_loss(&samples)?;
        if !self.params.all_finite() {
            return Err(Error::Training("adapter parameters became non-finite".into()));
        }
        Ok(report)
    }

    /// Pooled Spearman correlation between `t/T` and prefix similarity over
    /// `t = 1..=T` of every episode.
    pub fn alignment_spearman(&self, episodes: &[Episode]) -> Result<f64> {
        let mut progress = Vec::new();
        let mut sim = Vec::new();
        for ep in episodes.iter().filter(|e| e.len() >= 2) {
            let curve = self.progress_curve(ep)?;
            let big_t = ep.last_index() as f64;
            for (t, c) in curve.iter().enumerate().skip(1) {
                progress.push(t as f64 / big_t);
                sim.push(*c);
            }
        }
        Ok(spearman(&progress, &sim))
    }

    pub fn build_reference_cluster(&self, episodes: &[Episode]) -> Result<ReferenceCluster> {
        let mut members: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
        for ep in episodes.iter().filter(|e| e.outcome == Outcome::Success) {
            members.entry(ep.instruction_id).or_default().push(self.embed_episode(ep)?);
        }
        let missing = TaskId::ALL
            .iter()
            .map(|t| t.instruction_id())
            .filter(|id| !members.contains_key(id))
            .collect();
        Ok(ReferenceCluster { members, missing })
    }

    /// Nearest-reference similarity of a whole trajectory, in `[-1, 1]`.
    pub fn estimate_progress(&self, cluster: &ReferenceCluster, episode: &Episode) -> Result<f64> {
        let refs = cluster
            .members
            .get(&episode.instruction_id)
            .filter(|r| !r.is_empty())
            .ok_or(Error::Coverage(episode.instruction_id))?;
        let z = self.embed_episode(episode)?;
        Ok(refs.iter().map(|r| nn::dot(&z, r)).fold(f64::NEG_INFINITY, f64::max))
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    model: ValueModel,
    cluster: Option<ReferenceCluster>,
}

/// Writes the model and, optionally, its reference cluster.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &ValueModel, cluster: Option<&ReferenceCluster>) -> Result<()> {
    let ck = Checkpoint {
        schema_version: CHECKPOINT_VERSION,
        model: model.clone(),
        cluster: cluster.cloned(),
    };
    let bytes = serde_json::to_vec(&ck).map_err(|e| Error::Integrity(e.to_string()))?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ValueModel, Option<ReferenceCluster>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    let ck: Checkpoint = decode_versioned(path, &bytes, CHECKPOINT_VERSION)?;
    Ok((ck.model, ck.cluster))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCluster {
    pub members: BTreeMap<u32, Vec<Vec<f64>>>,
    /// Registered instructions with no successful episode.
    pub missing: Vec<u32>,
}

impl ReferenceCluster {
    pub fn size(&self, instruction: u32) -> usize {
        self.members.get(&instruction).map_or(0, Vec::len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault::{FaultConfig, Interceptor};
    use crate::planner::Planner;
    use crate::sim::{EnvMode, Sim};

    fn small_cfg() -> ValueConfig {
        ValueConfig {
            feat_dim: 8,
            instr_dim: 6,
            hidden: 5,
            embed_dim: 4,
            ..ValueConfig::default()
        }
    }

    fn episodes(n: u64) -> Vec<Episode> {
        let ic = Interceptor::new(Sim::default(), Planner::default(), FaultConfig::default());
        (0..n)
            .filter_map(|s| ic.run_nominal(TaskId::PickPlace, EnvMode::Random, s).unwrap().episode())
            .collect()
    }

    #[test]
    fn featurizer_is_deterministic_and_degenerates_on_single_frame() {
        let ep = &episodes(1)[0];
        let f = Featurizer::new(16, 3);
        let obs: Vec<Observation> = ep.frames.iter().map(|f| f.obs.clone()).collect();
        assert_eq!(f.featurize(&obs).unwrap(), f.featurize(&obs).unwrap());
        let one = f.featurize(&obs[..1]).unwrap();
        let mut pooled = Vec::new();
        for _ in 0..3 {
            pooled.extend(obs[0].to_vec());
        }
        let direct: Vec<f64> = f.proj.chunks(POOLED).map(|r| nn::dot(r, &pooled)).collect();
        assert_eq!(one, direct);
        assert_ne!(Featurizer::new(16, 4).featurize(&obs).unwrap(), f.featurize(&obs).unwrap());
        assert!(f.featurize(&[]).is_err());
    }

    #[test]
    fn prefix_features_match_direct_featurization() {
        let ep = &episodes(1)[0];
        let f = Featurizer::new(16, 3);
        let all = f.featurize_prefixes(ep);
        let obs: Vec<Observation> = ep.frames.iter().map(|f| f.obs.clone()).collect();
        for t in [0, 5, ep.last_index()] {
            let direct = f.featurize(&obs[..=t]).unwrap();
            for (a, b) in all[t].iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn instruction_table_rows_are_distinct() {
        let t = InstructionTable::new(8, 1);
        assert_ne!(t.get(0).unwrap(), t.get(1).unwrap());
        assert_ne!(t.get(1).unwrap(), t.get(2).unwrap());
        assert!(t.get(9).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm_and_bias_only_adapter_is_constant() {
        let m = ValueModel::new(small_cfg());
        let z = m.embed(&[0.3; 8], Modality::Visual).unwrap();
        assert!((nn::norm(&z) - 1.0).abs() < 1e-12);
        assert!(m.embed(&[0.3; 7], Modality::Visual).is_err());

        let mut a = m.params.visual.zeros_like();
        a.l2.b = vec![3.0, 0.0, -4.0, 0.0];
        for x in [[0.1; 8], [-2.0; 8]] {
            assert_eq!(a.embed(&x).unwrap(), vec![0.6, 0.0, -0.8, 0.0]);
        }
    }

    #[test]
    fn align_gradient_matches_finite_differences() {
        let m = ValueModel::new(small_cfg());
        let eps = episodes(3);
        let samples = m.align_samples(&eps);
        let batch: Vec<&AlignSample> = samples.iter().map(|s| &s[s.len() / 2]).collect();
        let mut g = m.params.zeros_like();
        m.align_loss(&m.params, &batch, Some(&mut g)).unwrap();
        let coords: Vec<usize> = (0..m.params.num_params()).collect();
        let err = nn::gradient_check(&m.params, &g, &coords, 1e-5, |p| m.align_loss(p, &batch, None).unwrap());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let mut m = ValueModel::new(ValueConfig {
            steps: 0,
            ..small_cfg()
        });
        let before = m.params.clone();
        m.train_align(&episodes(2)).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ValueModel::new(small_cfg());
        let c = m.build_reference_cluster(&episodes(2)).unwrap();
        let path = dir.path().join("v.json");
        save_checkpoint(&path, &m, Some(&c)).unwrap();
        let (m2, c2) = load_checkpoint(&path).unwrap();
        assert_eq!(m2, m);
        assert_eq!(c2.unwrap(), c);
    }

    #[test]
    fn targets_run_from_one_over_t_to_one() {
        let m = ValueModel::new(small_cfg());
        let eps = episodes(1);
        let s = &m.align_samples(&eps)[0];
        let big_t = eps[0].last_index() as f64;
        assert_eq!(s.first().unwrap().target, 1.0 / big_t);
        assert_eq!(s.last().unwrap().target, 1.0);
    }

    #[test]
    fn estimate_is_max_over_cluster_and_one_for_members() {
        let m = ValueModel::new(small_cfg());
        let eps = episodes(4);
        let cluster = m.build_reference_cluster(&eps).unwrap();
        assert_eq!(cluster.size(0), 4);
        assert!(cluster.missing.contains(&1));
        let v = m.estimate_progress(&cluster, &eps[2]).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
        let mut stack = eps[0].clone();
        stack.instruction_id = 1;
        assert!(matches!(m.estimate_progress(&cluster, &stack), Err(Error::Coverage(1))));
    }
}
