//! The three policy heads with their shared history encoder, the analytic
//! priors used before any training, and the scoring interface consumed by
//! the Viterbi labeler.
//!
//! Object pairs are indexed `tool * n + target`. Pairs whose target is the
//! end-effector, and pairs whose tool equals the target, carry probability
//! zero everywhere.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pose_delta, Pose, PoseVec7};
use crate::neural::{
    dot, gaussian_logpdf, gaussian_logpdf_grad, log_softmax, Dense, Embedding, Grads, LstmCell, LstmState,
    sigmoid, NeuralError, ParamId, ParamStore, Tensor,
};
use crate::trajectory::{Demonstration, Observation, SubTaskLabel, EFFECTOR};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("invalid input: {0}")]
    Input(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub lstm: usize,
    pub embed: usize,
    pub g_embed: usize,
    /// Positions are multiplied by this before entering a network.
    pub feature_scale: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Weight of the position block in the way-point prior's distance.
    pub prior_position_scale: f64,
    /// Summed relative motion below which no object counts as moving.
    pub stationary_threshold: f64,
    /// Multiplier on the remaining tool-to-way-point difference fed to the
    /// low level; larger than `feature_scale` so that step-sized
    /// differences are resolved.
    pub diff_scale: f64,
    /// Spread of the learned way-point score over candidate frames.
    pub sigma_w: f64,
    pub log_std_init: f64,
    pub log_std_min: f64,
    /// Quaternion step per unit of translation step for straight-line targets.
    pub rot_ratio: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: 64,
            lstm: 32,
            embed: 8,
            g_embed: 64,
            feature_scale: 10.0,
            diff_scale: 50.0,
            alpha: 100.0,
            beta: 0.95,
            gamma: 0.95,
            prior_position_scale: 1.0,
            stationary_threshold: 1e-4,
            sigma_w: 0.005,
            log_std_init: 0.01f64.ln(),
            log_std_min: 1e-3f64.ln(),
            rot_ratio: 1.5,
        }
    }
}

/// Low-level input width before the label embeddings: relative pose,
/// way-point, their difference and the difference's two block norms.
const LOW_POSE_WIDTH: usize = 23;

pub fn pair_index(n: usize, tool: usize, target: usize) -> usize {
    tool * n + target
}

pub fn admissible(tool: usize, target: usize) -> bool {
    target != EFFECTOR && tool != target
}

/// All admissible `(tool, target)` pairs in lexicographic order.
pub fn admissible_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .filter(|&(a, b)| admissible(a, b))
        .collect()
}

fn scaled(v: &PoseVec7, s: f64) -> [f64; 7] {
    let mut out = v.0;
    for x in out.iter_mut().take(3) {
        *x *= s;
    }
    out
}

/// Progress vector: current tool-in-target pose of the previous pair minus
/// the previous way-point. Zero when there is no previous sub-task.
pub fn progress(obs: &Observation, prev: Option<(usize, usize, &PoseVec7)>) -> PoseVec7 {
    match prev {
        None => PoseVec7::ZERO,
        Some((tool, target, w)) => pose_delta(&obs.rel(tool, target).to_vec7(), w),
    }
}

/// Stack of dense layers with ReLU on all but the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut R) -> Mlp {
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], i < last, rng))
            .collect();
        Mlp { layers }
    }

    pub fn from_store(store: &ParamStore, name: &str, depth: usize) -> Option<Mlp> {
        let layers = (0..depth)
            .map(|i| Dense::from_store(store, &format!("{name}.{i}"), i + 1 < depth))
            .collect::<Option<Vec<_>>>()?;
        Some(Mlp { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    /// Activations of every layer; `acts[0]` is the input.
    pub fn forward(&self, store: &ParamStore, x: Vec<f64>) -> Result<Vec<Vec<f64>>, NeuralError> {
        let mut acts = vec![x];
        for l in &self.layers {
            let y = l.forward(store, acts.last().unwrap())?;
            acts.push(y);
        }
        Ok(acts)
    }

    pub fn output(&self, store: &ParamStore, x: Vec<f64>) -> Result<Vec<f64>, NeuralError> {
        Ok(self.forward(store, x)?.pop().unwrap())
    }

    pub fn backward(&self, store: &ParamStore, acts: &[Vec<f64>], dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let mut d = dy.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            d = l.backward(store, &acts[i], &acts[i + 1], &d, grads);
        }
        d
    }

    /// First-layer weights applied to `x` placed at column `offset`, without bias.
    fn first_partial(&self, store: &ParamStore, x: &[f64], offset: usize) -> Vec<f64> {
        let l = &self.layers[0];
        let w = store.value(l.w);
        (0..l.output)
            .map(|o| dot(&w[o * l.input + offset..o * l.input + offset + x.len()], x))
            .collect()
    }

    /// Finishes a forward pass from a first-layer pre-activation (bias included).
    fn finish(&self, store: &ParamStore, mut pre: Vec<f64>) -> Vec<f64> {
        if self.layers[0].relu {
            pre.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let mut x = pre;
        for l in &self.layers[1..] {
            x = l.forward(store, &x).expect("widths fixed at construction");
        }
        x
    }
}

/// Intermediate values of one high-level forward pass.
pub struct HighCache {
    pub acts: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

pub struct MidCache {
    pub acts: Vec<Vec<f64>>,
}

pub struct LowCache {
    pub acts: Vec<Vec<f64>>,
    /// Remaining pose difference to the way-point.
    pub diff: PoseVec7,
    pub gate: [f64; 7],
    pub mean: PoseVec7,
    pub log_std: [f64; 7],
}

/// The three policies, the memory encoder and the retrieval heads.
#[derive(Clone, Debug)]
pub struct PolicyStack {
    pub n: usize,
    pub config: PolicyConfig,
    pub store: ParamStore,
    pub emb: Embedding,
    pub genc: Dense,
    pub lstm: LstmCell,
    pub high: Mlp,
    pub mid: Mlp,
    pub low: Mlp,
    pub log_std: ParamId,
    pub ret_tool: Dense,
    pub ret_target: Dense,
    pub ret_w: Dense,
}

impl PolicyStack {
    pub fn new(n: usize, config: PolicyConfig, seed: u64) -> PolicyStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let emb = Embedding::new(&mut store, "emb", n, c.embed, &mut rng);
        let genc = Dense::new(&mut store, "genc", 7, c.g_embed, true, &mut rng);
        let lstm = LstmCell::new(&mut store, "lstm", 2 * c.embed + 7, c.lstm, &mut rng);
        let obs_width = 7 + n * (n - 1) * 7;
        let high = Mlp::new(
            &mut store,
            "high",
            &[obs_width + c.lstm + c.g_embed, c.hidden, c.hidden, n * n],
            &mut rng,
        );
        let mid = Mlp::new(
            &mut store,
            "mid",
            &[c.lstm + c.g_embed + 7 + 2 * c.embed, c.hidden, c.hidden, 7],
            &mut rng,
        );
        let low = Mlp::new(&mut store, "low", &[LOW_POSE_WIDTH + 2 * c.embed, c.hidden, c.hidden, 7], &mut rng);
        let log_std = store.add("low.log_std", Tensor::from_vec(&[7], vec![c.log_std_init; 7]).unwrap());
        let ret_tool = Dense::new(&mut store, "ret.tool", c.lstm, n, false, &mut rng);
        let ret_target = Dense::new(&mut store, "ret.target", c.lstm, n, false, &mut rng);
        let ret_w = Dense::new(&mut store, "ret.w", c.lstm, 7, false, &mut rng);
        PolicyStack {
            n,
            config,
            store,
            emb,
            genc,
            lstm,
            high,
            mid,
            low,
            log_std,
            ret_tool,
            ret_target,
            ret_w,
        }
    }

    fn from_parts(n: usize, config: PolicyConfig, store: ParamStore) -> Option<PolicyStack> {
        Some(PolicyStack {
            n,
            emb: Embedding::from_store(&store, "emb")?,
            genc: Dense::from_store(&store, "genc", true)?,
            lstm: LstmCell::from_store(&store, "lstm")?,
            high: Mlp::from_store(&store, "high", 3)?,
            mid: Mlp::from_store(&store, "mid", 3)?,
            low: Mlp::from_store(&store, "low", 3)?,
            log_std: store.id("low.log_std")?,
            ret_tool: Dense::from_store(&store, "ret.tool", false)?,
            ret_target: Dense::from_store(&store, "ret.target", false)?,
            ret_w: Dense::from_store(&store, "ret.w", false)?,
            config,
            store,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), PolicyError> {
        let cfg = toml::to_string(&self.config).map_err(|e| PolicyError::Input(e.to_string()))?;
        let mut meta = vec![("n".to_string(), self.n.to_string())];
        for line in cfg.lines().filter(|l| !l.trim().is_empty()) {
            if let Some((k, v)) = line.split_once(" = ") {
                meta.push((format!("config.{k}"), v.to_string()));
            }
        }
        self.store.save_checkpoint(dir, &meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<PolicyStack, PolicyError> {
        let (store, meta) = ParamStore::load_checkpoint(dir)?;
        let mut n = None;
        let mut cfg = String::new();
        for (k, v) in &meta {
            if k == "n" {
                n = v.parse().ok();
            } else if let Some(key) = k.strip_prefix("config.") {
                cfg.push_str(&format!("{key} = {v}\n"));
            }
        }
        let n = n.ok_or_else(|| PolicyError::Input("checkpoint lacks object count".into()))?;
        let config: PolicyConfig = toml::from_str(&cfg).map_err(|e| PolicyError::Input(e.to_string()))?;
        let stack = PolicyStack::from_parts(n, config, store)
            .ok_or_else(|| PolicyError::Input("checkpoint lacks policy tensors".into()))?;
        let fresh = PolicyStack::new(n, stack.config.clone(), 0);
        for (a, b) in fresh.store.params().iter().zip(stack.store.params()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(PolicyError::Input(format!("tensor {} has unexpected shape", b.name)));
            }
        }
        Ok(stack)
    }

    fn check_n(&self, obs: &Observation) -> Result<(), PolicyError> {
        if obs.n() != self.n {
            return Err(NeuralError::ShapeMismatch {
                what: "observation objects".into(),
                expected: self.n,
                got: obs.n(),
            }
            .into());
        }
        Ok(())
    }

    fn check_objects(&self, tool: usize, target: usize) -> Result<(), PolicyError> {
        if tool >= self.n || target >= self.n {
            return Err(PolicyError::Input(format!("object index out of range for n={}", self.n)));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.config.feature_scale
    }

    /// End-effector pose and every off-diagonal relative pose, scaled.
    pub fn obs_features(&self, obs: &Observation) -> Vec<f64> {
        let s = self.scale();
        let mut f = Vec::with_capacity(7 + self.n * (self.n - 1) * 7);
        f.extend_from_slice(&scaled(&obs.end_effector.to_vec7(), s));
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    f.extend_from_slice(&scaled(&obs.rel(i, j).to_vec7(), s));
                }
            }
        }
        f
    }

    pub fn g_features(&self, g: &PoseVec7) -> Vec<f64> {
        scaled(g, self.scale()).to_vec()
    }

    pub fn encode_g(&self, g: &PoseVec7) -> Vec<f64> {
        self.genc
            .forward(&self.store, &self.g_features(g))
            .expect("fixed width")
    }

    /// LSTM input for one `(tool, target, way-point)` tuple.
    pub fn tuple_input(&self, tool: usize, target: usize, w: &PoseVec7) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.config.embed + 7);
        x.extend_from_slice(self.emb.forward(&self.store, tool).expect("checked index"));
        x.extend_from_slice(self.emb.forward(&self.store, target).expect("checked index"));
        x.extend_from_slice(&scaled(w, self.scale()));
        x
    }

    pub fn high_input(&self, obs: &Observation, mem: &[f64], genc: &[f64]) -> Vec<f64> {
        let mut x = self.obs_features(obs);
        x.extend_from_slice(mem);
        x.extend_from_slice(genc);
        x
    }

    /// Masked pair logits from a high-level network output.
    pub fn mask_logits(&self, mut logits: Vec<f64>) -> Vec<f64> {
        for tool in 0..self.n {
            for target in 0..self.n {
                if !admissible(tool, target) {
                    logits[pair_index(self.n, tool, target)] = f64::NEG_INFINITY;
                }
            }
        }
        logits
    }

    pub fn high_cached(&self, obs: &Observation, mem: &[f64], genc: &[f64]) -> Result<HighCache, PolicyError> {
        self.check_n(obs)?;
        let acts = self.high.forward(&self.store, self.high_input(obs, mem, genc))?;
        let logits = self.mask_logits(acts.last().unwrap().clone());
        Ok(HighCache { acts, logits })
    }

    /// Log-probabilities over pair indices given the observation, the
    /// history memory and the progress vector.
    pub fn high_forward(&self, obs: &Observation, hist: &HistoryEncoding, g: &PoseVec7) -> Result<Vec<f64>, PolicyError> {
        let c = self.high_cached(obs, hist.memory(), &self.encode_g(g))?;
        Ok(log_softmax(&c.logits))
    }

    pub fn mid_input(&self, mem: &[f64], genc: &[f64], rel: &PoseVec7, tool: usize, target: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.mid.input_width());
        x.extend_from_slice(mem);
        x.extend_from_slice(genc);
        x.extend_from_slice(&self.pair_part(rel, tool, target));
        x
    }

    fn pair_part(&self, rel: &PoseVec7, tool: usize, target: usize) -> Vec<f64> {
        let mut x = scaled(rel, self.scale()).to_vec();
        x.extend_from_slice(self.emb.forward(&self.store, tool).expect("checked index"));
        x.extend_from_slice(self.emb.forward(&self.store, target).expect("checked index"));
        x
    }

    pub fn mid_cached(&self, mem: &[f64], genc: &[f64], rel: &PoseVec7, tool: usize, target: usize) -> Result<MidCache, PolicyError> {
        self.check_objects(tool, target)?;
        let acts = self.mid.forward(&self.store, self.mid_input(mem, genc, rel, tool, target))?;
        Ok(MidCache { acts })
    }

    /// Turns a raw mid-level output into a way-point: the output is an
    /// offset from the identity pose with positions in feature units.
    pub fn waypoint_from_output(&self, out: &[f64]) -> PoseVec7 {
        let s = self.scale();
        let v = PoseVec7([
            out[0] / s,
            out[1] / s,
            out[2] / s,
            1.0 + out[3],
            out[4],
            out[5],
            out[6],
        ]);
        Pose::from_vec7(&v).map(|p| p.to_vec7()).unwrap_or(PoseVec7::IDENTITY)
    }

    /// Training target in the mid-level output space for way-point `w`.
    pub fn waypoint_target(&self, w: &PoseVec7) -> [f64; 7] {
        let a = pose_delta(w, &PoseVec7::IDENTITY);
        scaled(&a, self.scale())
    }

    /// Predicted way-point in the target's frame.
    pub fn mid_forward(
        &self,
        hist: &HistoryEncoding,
        g: &PoseVec7,
        rel: &PoseVec7,
        tool: usize,
        target: usize,
    ) -> Result<PoseVec7, PolicyError> {
        let c = self.mid_cached(hist.memory(), &self.encode_g(g), rel, tool, target)?;
        Ok(self.waypoint_from_output(c.acts.last().unwrap()))
    }

    pub fn low_input(&self, rel: &PoseVec7, w: &PoseVec7, tool: usize, target: usize) -> Vec<f64> {
        let s = self.scale();
        let mut x = Vec::with_capacity(self.low.input_width());
        x.extend_from_slice(&scaled(rel, s));
        x.extend_from_slice(&scaled(w, s));
        let d = pose_delta(w, rel);
        let ds = self.config.diff_scale;
        x.extend(d.0.iter().map(|v| v * ds));
        x.push(d.position_norm() * ds);
        x.push((d[3] * d[3] + d[4] * d[4] + d[5] * d[5] + d[6] * d[6]).sqrt() * ds);
        x.extend_from_slice(self.emb.forward(&self.store, tool).expect("checked index"));
        x.extend_from_slice(self.emb.forward(&self.store, target).expect("checked index"));
        x
    }

    pub fn low_cached(&self, rel: &PoseVec7, w: &PoseVec7, tool: usize, target: usize) -> Result<LowCache, PolicyError> {
        self.check_objects(tool, target)?;
        let acts = self.low.forward(&self.store, self.low_input(rel, w, tool, target))?;
        let out = acts.last().unwrap();
        let diff = pose_delta(w, rel);
        let gate: [f64; 7] = std::array::from_fn(|i| sigmoid(out[i]));
        let mean = PoseVec7(std::array::from_fn(|i| gate[i] * diff[i]));
        Ok(LowCache {
            diff,
            gate,
            mean,
            log_std: self.log_std(),
            acts,
        })
    }

    /// Current log-std of the action distribution, clamped from below.
    pub fn log_std(&self) -> [f64; 7] {
        let mut out = [0.0; 7];
        for (o, v) in out.iter_mut().zip(self.store.value(self.log_std)) {
            *o = v.max(self.config.log_std_min);
        }
        out
    }

    /// Gaussian over the tool-in-target pose change: `(mean, log_std)`. The
    /// mean is a learned per-coordinate gain in (0, 1) times the remaining
    /// difference to the way-point, so repeated steps settle on the
    /// way-point itself whatever the network's error.
    pub fn low_forward(&self, rel: &PoseVec7, w: &PoseVec7, tool: usize, target: usize) -> Result<(PoseVec7, [f64; 7]), PolicyError> {
        let c = self.low_cached(rel, w, tool, target)?;
        Ok((c.mean, c.log_std))
    }

    /// Accumulates gradients of `-log N(action | mean, std)` and returns the loss.
    pub fn low_nll_backward(&self, cache: &LowCache, action: &PoseVec7, scale: f64, tool: usize, target: usize, grads: &mut Grads) -> f64 {
        let nll = -gaussian_logpdf(&action.0, &cache.mean.0, &cache.log_std);
        let (dm, dls) = gaussian_logpdf_grad(&action.0, &cache.mean.0, &cache.log_std);
        let mut dout = [0.0; 7];
        for i in 0..7 {
            let gi = cache.gate[i];
            dout[i] = -scale * dm[i] * cache.diff[i] * gi * (1.0 - gi);
        }
        let raw = self.store.value(self.log_std);
        let g = grads.get_mut(self.log_std);
        for i in 0..7 {
            if raw[i] >= self.config.log_std_min {
                g[i] += -scale * dls[i];
            }
        }
        let dx = self.low.backward(&self.store, &cache.acts, &dout, grads);
        let e = self.config.embed;
        let o = LOW_POSE_WIDTH;
        self.emb.backward(tool, &dx[o..o + e], grads);
        self.emb.backward(target, &dx[o + e..o + 2 * e], grads);
        nll * scale
    }

    /// Memory after feeding a single tuple to a fresh encoder, as used by
    /// the labeler in place of the full history.
    pub fn one_step_memory(&self, tool: usize, target: usize, w: &PoseVec7) -> Vec<f64> {
        let mut h = HistoryEncoding::new(self);
        h.push(self, tool, target, w);
        h.state.hidden
    }
}

/// Isotropic Gaussian log-density of `candidate` around the predicted
/// way-point, in the 7-vector pose-difference space.
pub fn waypoint_log_density(candidate: &PoseVec7, predicted: &PoseVec7, sigma: f64) -> f64 {
    let d = pose_delta(candidate, predicted).norm();
    -d * d / (2.0 * sigma * sigma) - 7.0 * (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

/// LSTM summary of the tuples fed so far.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEncoding {
    pub state: LstmState,
    pub len: usize,
}

impl HistoryEncoding {
    pub fn new(stack: &PolicyStack) -> HistoryEncoding {
        HistoryEncoding {
            state: LstmState::zeros(stack.config.lstm),
            len: 0,
        }
    }

    pub fn push(&mut self, stack: &PolicyStack, tool: usize, target: usize, w: &PoseVec7) {
        let x = stack.tuple_input(tool, target, w);
        self.state = stack.lstm.step(&stack.store, &self.state, &x).expect("fixed width").0;
        self.len += 1;
    }

    pub fn memory(&self) -> &[f64] {
        &self.state.hidden
    }
}

// ---------------------------------------------------------------------------
// Priors

/// Summed relative motion of object `i` against every other non-effector
/// object between frames `t` and `t + 1`.
pub fn object_motion(demo: &Demonstration, t: usize, i: usize) -> f64 {
    let n = demo.n();
    (0..n)
        .filter(|&j| j != i && j != EFFECTOR)
        .map(|j| {
            pose_delta(&demo.rel(t + 1, i, j).to_vec7(), &demo.rel(t, i, j).to_vec7()).norm()
        })
        .sum()
}

/// The object moving most relative to the others, or the end-effector when
/// every object is at rest relative to every other. The last frame reuses
/// the motion between the two final frames.
pub fn prior_tool(demo: &Demonstration, t: usize, threshold: f64) -> usize {
    let h = demo.len();
    if h < 2 {
        return EFFECTOR;
    }
    let t = t.min(h - 2);
    let mut best = EFFECTOR;
    let mut best_motion = threshold;
    for i in 1..demo.n() {
        let m = object_motion(demo, t, i);
        if m > best_motion {
            best = i;
            best_motion = m;
        }
    }
    best
}

/// Target persistence prior: `gamma` on the previous target and
/// `(1 - gamma) / (n - 2)` on each other non-effector object; uniform over
/// non-effector objects without a previous target. Log-probabilities,
/// indexed by object.
pub fn prior_high(prev_target: Option<usize>, n: usize, gamma: f64) -> Vec<f64> {
    let mut p = vec![f64::NEG_INFINITY; n];
    for (j, v) in p.iter_mut().enumerate().skip(1) {
        *v = match prev_target {
            None => -((n - 1) as f64).ln(),
            Some(prev) if prev == j => gamma.ln(),
            Some(_) => ((1.0 - gamma) / (n - 2) as f64).ln(),
        };
    }
    p
}

/// Combined high-level prior over pair indices: the tool is fixed by
/// [`prior_tool`], the target follows [`prior_high`] restricted to targets
/// other than the tool and renormalized.
pub fn prior_pair(n: usize, tool: usize, prev_target: Option<usize>, gamma: f64) -> Vec<f64> {
    let base = prior_high(prev_target, n, gamma);
    let mut out = vec![f64::NEG_INFINITY; n * n];
    let targets: Vec<usize> = (0..n).filter(|&j| admissible(tool, j)).collect();
    let lse = log_sum_exp(targets.iter().map(|&j| base[j]));
    for j in targets {
        out[pair_index(n, tool, j)] = base[j] - lse;
    }
    out
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Way-point prior over candidate frames `k >= t`: weight
/// `beta * exp(-alpha * |w_k|)` for `k = t` and
/// `(1 - beta) / m * exp(-alpha * |w_k|)` for each of the `m` later
/// candidates, normalized over the candidates. `|w_k|` is the distance of
/// the tool-in-target pose at frame `k` from the identity. Candidates before
/// `t` get probability zero.
pub fn prior_mid(
    demo: &Demonstration,
    t: usize,
    tool: usize,
    target: usize,
    candidates: &[usize],
    config: &PolicyConfig,
) -> Vec<f64> {
    let future = candidates.iter().filter(|&&k| k > t).count().max(1) as f64;
    let raw: Vec<f64> = candidates
        .iter()
        .map(|&k| {
            if k < t {
                return f64::NEG_INFINITY;
            }
            let d = demo.rel(k, tool, target).to_vec7().identity_distance(config.prior_position_scale);
            let w = if k == t { config.beta.ln() } else { ((1.0 - config.beta) / future).ln() };
            w - config.alpha * d
        })
        .collect();
    normalize_log(raw)
}

/// Shifts log-weights so they sum to one; all-impossible input stays so.
fn normalize_log(raw: Vec<f64>) -> Vec<f64> {
    let lse = log_sum_exp(raw.iter().copied());
    if lse == f64::NEG_INFINITY {
        return raw;
    }
    raw.into_iter().map(|v| v - lse).collect()
}

/// Straight-line step of at most `step` in translation and `rot` in
/// quaternion units toward `w`.
pub fn clipped_direction(rel: &PoseVec7, w: &PoseVec7, step: f64, rot: f64) -> PoseVec7 {
    let d = pose_delta(w, rel);
    let dp = d.position_norm();
    let dq = (d[3] * d[3] + d[4] * d[4] + d[5] * d[5] + d[6] * d[6]).sqrt();
    let s = 1.0_f64.min(step / dp).min(rot / dq);
    d.scale(s)
}

/// Median per-frame end-effector translation across the demonstrations.
pub fn estimate_step(demos: &[Demonstration]) -> f64 {
    let mut steps: Vec<f64> = demos
        .iter()
        .flat_map(|d| {
            d.frames
                .windows(2)
                .map(|w| w[0].end_effector.translation_distance(&w[1].end_effector))
        })
        .filter(|v| *v > 1e-9)
        .collect();
    if steps.is_empty() {
        return 0.02;
    }
    steps.sort_by(|a, b| a.total_cmp(b));
    steps[steps.len() / 2]
}

/// Observed tool-in-target motion between `t` and `t + 1`.
pub fn observed_action(demo: &Demonstration, t: usize, tool: usize, target: usize) -> PoseVec7 {
    pose_delta(&demo.rel(t + 1, tool, target).to_vec7(), &demo.rel(t, tool, target).to_vec7())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            iterations: 3000,
            batch: 128,
            lr: 1e-3,
            seed: 0,
            clip: 5.0,
        }
    }
}

/// Trains the low-level head on straight-line moves: for random frames,
/// random admissible pairs and random way-points (mostly later frames,
/// often the next one, sometimes the current one), the target action is the clipped straight step from the
/// current tool-in-target pose toward the way-point. Returns per-iteration
/// mean negative log-likelihoods.
pub fn init_low_level(stack: &mut PolicyStack, demos: &[Demonstration], cfg: &InitConfig) -> Result<Vec<f64>, PolicyError> {
    if demos.is_empty() || demos.iter().any(|d| d.len() < 2) {
        return Err(PolicyError::Input("low-level initialization needs demonstrations with at least two frames".into()));
    }
    if demos.iter().any(|d| d.n() != stack.n) {
        return Err(PolicyError::Input("demonstration object count differs from the policy".into()));
    }
    let step = estimate_step(demos);
    let rot = step * stack.config.rot_ratio;
    let pairs = admissible_pairs(stack.n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let mut grads = stack.store.zero_grads();
        let mut total = 0.0;
        let scale = 1.0 / cfg.batch as f64;
        for _ in 0..cfg.batch {
            let demo = &demos[rng.random_range(0..demos.len())];
            let h = demo.len();
            let t = rng.random_range(0..h - 1);
            let (tool, target) = pairs[rng.random_range(0..pairs.len())];
            let u: f64 = rng.random();
            let k = if u < 0.2 {
                t
            } else if u < 0.6 {
                t + 1
            } else {
                rng.random_range(t + 1..h)
            };
            let rel = demo.rel(t, tool, target).to_vec7();
            let w = demo.rel(k, tool, target).to_vec7();
            let a = clipped_direction(&rel, &w, step, rot);
            let cache = stack.low_cached(&rel, &w, tool, target)?;
            total += stack.low_nll_backward(&cache, &a, scale, tool, target, &mut grads);
        }
        losses.push(total);
        stack.store.accumulate(&grads);
        stack.store.clip_grad_norm(cfg.clip);
        stack.store.adam_update(cfg.lr);
    }
    Ok(losses)
}

// ---------------------------------------------------------------------------
// Scoring interface

/// How much of the previous hidden state a score depends on; the labeler
/// shares cached scores across predecessors with equal keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrevDependence {
    None,
    Target,
    Full,
}

impl PrevDependence {
    /// Cache key of a predecessor under this dependence.
    pub fn key(&self, prev: Option<&SubTaskLabel>) -> Option<SubTaskLabel> {
        match (self, prev) {
            (_, None) => None,
            (PrevDependence::None, Some(_)) => Some(SubTaskLabel::new(0, 0, 0)),
            (PrevDependence::Target, Some(p)) => Some(SubTaskLabel::new(0, p.target, 0)),
            (PrevDependence::Full, Some(p)) => Some(*p),
        }
    }
}

/// Per-demonstration scorer for the three factors of the labeling objective.
pub trait DemoScorer {
    fn high_dependence(&self) -> PrevDependence;
    fn mid_dependence(&self) -> PrevDependence;
    /// Log-probabilities over pair indices at frame `t`.
    fn high(&mut self, t: usize, prev: Option<&SubTaskLabel>) -> Vec<f64>;
    /// Log-probability (priors) or log-density (learned head) of each
    /// candidate frame's tool-in-target pose as the way-point.
    fn mid(&mut self, t: usize, prev: Option<&SubTaskLabel>, tool: usize, target: usize, candidates: &[usize]) -> Vec<f64>;
    /// Log-density of the observed tool-in-target motion at `t` given way-point
    /// frame `k`. Zero at the last frame, which has no outgoing motion.
    fn low(&mut self, t: usize, tool: usize, target: usize, k: usize) -> f64;
}

pub trait Scorers {
    fn for_demo<'a>(&'a self, demo: &'a Demonstration) -> Box<dyn DemoScorer + 'a>;
}

/// Low-level model used by the prior scorers.
#[derive(Clone, Debug)]
pub enum LowModel<'a> {
    /// Gaussian around the clipped straight step toward the way-point.
    StraightLine { step: f64, rot: f64, log_std: f64 },
    /// An initialized (or trained) low-level head.
    Learned(&'a PolicyStack),
}

/// Analytic priors for the high and mid factors plus a low-level model.
#[derive(Clone, Debug)]
pub struct PriorScorers<'a> {
    pub config: PolicyConfig,
    pub low: LowModel<'a>,
}

struct PriorDemo<'a> {
    demo: &'a Demonstration,
    scorers: &'a PriorScorers<'a>,
    tools: Vec<usize>,
}

impl<'a> Scorers for PriorScorers<'a> {
    fn for_demo<'b>(&'b self, demo: &'b Demonstration) -> Box<dyn DemoScorer + 'b> {
        let tools = (0..demo.len())
            .map(|t| prior_tool(demo, t, self.config.stationary_threshold))
            .collect();
        Box::new(PriorDemo {
            demo,
            scorers: self,
            tools,
        })
    }
}

fn low_logpdf(model: &LowModel, demo: &Demonstration, t: usize, tool: usize, target: usize, k: usize) -> f64 {
    if t + 1 >= demo.len() {
        return 0.0;
    }
    let rel = demo.rel(t, tool, target).to_vec7();
    let w = demo.rel(k, tool, target).to_vec7();
    let a = observed_action(demo, t, tool, target);
    match model {
        LowModel::StraightLine { step, rot, log_std } => {
            let mean = clipped_direction(&rel, &w, *step, *rot);
            gaussian_logpdf(&a.0, &mean.0, &[*log_std; 7])
        }
        LowModel::Learned(stack) => {
            let (mean, ls) = stack.low_forward(&rel, &w, tool, target).expect("validated demo");
            gaussian_logpdf(&a.0, &mean.0, &ls)
        }
    }
}

impl DemoScorer for PriorDemo<'_> {
    fn high_dependence(&self) -> PrevDependence {
        PrevDependence::Target
    }

    fn mid_dependence(&self) -> PrevDependence {
        PrevDependence::None
    }

    fn high(&mut self, t: usize, prev: Option<&SubTaskLabel>) -> Vec<f64> {
        prior_pair(self.demo.n(), self.tools[t], prev.map(|p| p.target), self.scorers.config.gamma)
    }

    fn mid(&mut self, t: usize, _prev: Option<&SubTaskLabel>, tool: usize, target: usize, candidates: &[usize]) -> Vec<f64> {
        prior_mid(self.demo, t, tool, target, candidates, &self.scorers.config)
    }

    fn low(&mut self, t: usize, tool: usize, target: usize, k: usize) -> f64 {
        low_logpdf(&self.scorers.low, self.demo, t, tool, target, k)
    }
}

/// Scores from a trained stack. The history is summarized by feeding only
/// the previous tuple to a fresh encoder, which keeps the labeling problem
/// Markov.
///
/// The tool is the object `prior_tool` sees moving, as in the prior. Pairs
/// whose tool and target do not move relative to each other (a carried
/// block and the effector, two blocks already stacked) would otherwise
/// explain any frame perfectly at the low level with a zero step.
///
/// A sub-task keeps its tuple until its way-point frame is reached: while
/// the previous frame's way-point lies ahead the tuple continues with
/// probability one, afterwards the networks score a fresh tuple. A change
/// of moving object also ends the sub-task early. Without
/// this, nearby candidates along a curved approach trade places frame by
/// frame, and far-future way-points in a target that later moves explain
/// motion the policy can never reproduce.
#[derive(Clone, Debug)]
pub struct LearnedScorers<'a> {
    pub stack: &'a PolicyStack,
}

struct LearnedDemo<'a> {
    stack: &'a PolicyStack,
    demo: &'a Demonstration,
    moving: Vec<usize>,
    mem: HashMap<SubTaskLabel, Vec<f64>>,
    high_obs: HashMap<usize, Vec<f64>>,
    mid_pair: HashMap<(usize, usize, usize), Vec<f64>>,
    prev_parts: HashMap<(usize, Option<SubTaskLabel>), PrevParts>,
}

/// First-layer contributions that depend on the predecessor.
struct PrevParts {
    high: Vec<f64>,
    mid: Vec<f64>,
}

impl<'a> Scorers for LearnedScorers<'a> {
    fn for_demo<'b>(&'b self, demo: &'b Demonstration) -> Box<dyn DemoScorer + 'b> {
        let moving = (0..demo.len())
            .map(|t| prior_tool(demo, t, self.stack.config.stationary_threshold))
            .collect();
        Box::new(LearnedDemo {
            stack: self.stack,
            demo,
            moving,
            mem: HashMap::new(),
            high_obs: HashMap::new(),
            mid_pair: HashMap::new(),
            prev_parts: HashMap::new(),
        })
    }
}

impl LearnedDemo<'_> {
    fn prev_parts(&mut self, t: usize, prev: Option<&SubTaskLabel>) -> &PrevParts {
        let key = (t, prev.copied());
        if !self.prev_parts.contains_key(&key) {
            let stack = self.stack;
            let (mem, g) = match prev {
                None => (vec![0.0; stack.config.lstm], PoseVec7::ZERO),
                Some(p) => {
                    let w = self.demo.waypoint(p);
                    let mem = self
                        .mem
                        .entry(*p)
                        .or_insert_with(|| stack.one_step_memory(p.tool, p.target, &w))
                        .clone();
                    (mem, progress(&self.demo.frames[t], Some((p.tool, p.target, &w))))
                }
            };
            let genc = stack.encode_g(&g);
            let obs_w = 7 + stack.n * (stack.n - 1) * 7;
            let mut high = stack.high.first_partial(&stack.store, &mem, obs_w);
            let hg = stack.high.first_partial(&stack.store, &genc, obs_w + mem.len());
            high.iter_mut().zip(hg).for_each(|(a, b)| *a += b);
            let mut mid = stack.mid.first_partial(&stack.store, &mem, 0);
            let mg = stack.mid.first_partial(&stack.store, &genc, mem.len());
            mid.iter_mut().zip(mg).for_each(|(a, b)| *a += b);
            self.prev_parts.insert(key, PrevParts { high, mid });
        }
        &self.prev_parts[&key]
    }
}

impl DemoScorer for LearnedDemo<'_> {
    fn high_dependence(&self) -> PrevDependence {
        PrevDependence::Full
    }

    fn mid_dependence(&self) -> PrevDependence {
        PrevDependence::Full
    }

    fn high(&mut self, t: usize, prev: Option<&SubTaskLabel>) -> Vec<f64> {
        let stack = self.stack;
        let moving = self.moving[t];
        if let Some(p) = prev.filter(|p| p.waypoint_frame > t && p.tool == moving) {
            let mut forced = vec![f64::NEG_INFINITY; stack.n * stack.n];
            forced[pair_index(stack.n, p.tool, p.target)] = 0.0;
            return forced;
        }
        let demo = self.demo;
        let obs = self.high_obs.entry(t).or_insert_with(|| {
            let f = stack.obs_features(&demo.frames[t]);
            let mut v = stack.high.first_partial(&stack.store, &f, 0);
            let b = stack.store.value(stack.high.layers[0].b);
            v.iter_mut().zip(b).for_each(|(a, b)| *a += b);
            v
        });
        let mut pre = obs.clone();
        let parts = self.prev_parts(t, prev);
        pre.iter_mut().zip(&parts.high).for_each(|(a, b)| *a += b);
        let mut logits = stack.mask_logits(stack.high.finish(&stack.store, pre));
        for (i, l) in logits.iter_mut().enumerate() {
            if i / stack.n != moving {
                *l = f64::NEG_INFINITY;
            }
        }
        log_softmax(&logits)
    }

    fn mid(&mut self, t: usize, prev: Option<&SubTaskLabel>, tool: usize, target: usize, candidates: &[usize]) -> Vec<f64> {
        if let Some(p) = prev.filter(|p| p.waypoint_frame > t && p.pair() == (tool, target)) {
            return candidates
                .iter()
                .map(|&k| if k == p.waypoint_frame { 0.0 } else { f64::NEG_INFINITY })
                .collect();
        }
        let stack = self.stack;
        let demo = self.demo;
        let pair = self.mid_pair.entry((t, tool, target)).or_insert_with(|| {
            let rel = demo.rel(t, tool, target).to_vec7();
            let x = stack.pair_part(&rel, tool, target);
            let off = stack.config.lstm + stack.config.g_embed;
            let mut v = stack.mid.first_partial(&stack.store, &x, off);
            let b = stack.store.value(stack.mid.layers[0].b);
            v.iter_mut().zip(b).for_each(|(a, b)| *a += b);
            v
        });
        let mut pre = pair.clone();
        let parts = self.prev_parts(t, prev);
        pre.iter_mut().zip(&parts.mid).for_each(|(a, b)| *a += b);
        let w = stack.waypoint_from_output(&stack.mid.finish(&stack.store, pre));
        let raw: Vec<f64> = candidates
            .iter()
            .map(|&k| {
                if k < t {
                    return f64::NEG_INFINITY;
                }
                waypoint_log_density(&demo.rel(k, tool, target).to_vec7(), &w, stack.config.sigma_w)
            })
            .collect();
        normalize_log(raw)
    }

    fn low(&mut self, t: usize, tool: usize, target: usize, k: usize) -> f64 {
        low_logpdf(&LowModel::Learned(self.stack), self.demo, t, tool, target, k)
    }
}
