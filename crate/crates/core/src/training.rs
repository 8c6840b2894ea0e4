//! Six-term training objective, supervised training on (pseudo-)labels, and
//! the outer loop alternating Viterbi relabeling with training.
//!
//! Every loss term is averaged over the frames of a batch. The memory
//! encoder is unrolled from the start of each demonstration over the label
//! tuples, so the memory seen at frame `t` summarizes the tuples of frames
//! `0..t`.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PoseVec7;
use crate::inference::{viterbi_label, InferenceConfig, InferenceError};
use crate::neural::{mse, softmax_ce, subset_ce, Grads, LstmCache, LstmState};
use crate::policies::{
    admissible, estimate_step, init_low_level, observed_action, pair_index, progress, InitConfig, LearnedScorers,
    LowModel, PolicyConfig, PolicyError, PolicyStack, PriorScorers,
};
use crate::trajectory::{Demonstration, SubTaskLabel};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("frame {t} of demonstration {demo} lacks its episode prefix")]
    MissingHistory { demo: usize, t: usize },
    #[error("no labeled demonstrations")]
    Empty,
    #[error("demonstration {0} has no labels")]
    Unlabeled(usize),
    #[error("non-finite loss at iteration {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("log: {0}")]
    Log(#[from] std::io::Error),
}

/// One frame of training data with its label materialized.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFrame {
    pub demo: usize,
    pub t: usize,
    pub tool: usize,
    pub target: usize,
    /// Tool pose in the target frame at the way-point frame.
    pub waypoint: PoseVec7,
    pub prev: Option<(usize, usize, PoseVec7)>,
    pub g: PoseVec7,
    /// Observed tool-in-target motion to the next frame; none at the last frame.
    pub action: Option<PoseVec7>,
}

impl LabeledFrame {
    fn tuple_eq(&self, other: &LabeledFrame) -> bool {
        self.tool == other.tool
            && self.target == other.target
            && self.waypoint.0.iter().zip(&other.waypoint.0).all(|(a, b)| (a - b).abs() <= WAYPOINT_EQ_TOL)
    }
}

/// Tolerance for way-point equality in the memory-consistency indicator.
pub const WAYPOINT_EQ_TOL: f64 = 1e-6;

/// A demonstration with the labeled frames to train on.
#[derive(Clone, Debug)]
pub struct LabeledDemo<'a> {
    pub demo: &'a Demonstration,
    pub frames: Vec<LabeledFrame>,
}

pub fn labeled_frames(id: usize, demo: &Demonstration, labels: &[SubTaskLabel]) -> Vec<LabeledFrame> {
    let h = demo.len();
    let mut out: Vec<LabeledFrame> = Vec::with_capacity(h);
    for (t, l) in labels.iter().enumerate() {
        let prev = out.last().map(|p| (p.tool, p.target, p.waypoint));
        out.push(LabeledFrame {
            demo: id,
            t,
            tool: l.tool,
            target: l.target,
            waypoint: demo.waypoint(l),
            prev,
            g: progress(&demo.frames[t], prev.as_ref().map(|(a, b, w)| (*a, *b, w))),
            action: (t + 1 < h).then(|| observed_action(demo, t, l.tool, l.target)),
        });
    }
    out
}

pub fn labeled_demo<'a>(id: usize, demo: &'a Demonstration, labels: &[SubTaskLabel]) -> LabeledDemo<'a> {
    LabeledDemo {
        demo,
        frames: labeled_frames(id, demo, labels),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub o_plus: f64,
    pub o_star: f64,
    pub w: f64,
    pub action: f64,
    pub mem: f64,
    pub ret: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            o_plus: 1.0,
            o_star: 1.0,
            w: 1.0,
            action: 1.0,
            mem: 1.0,
            ret: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub o_plus: f64,
    pub o_star: f64,
    pub w: f64,
    pub action: f64,
    pub mem: f64,
    pub ret: f64,
    pub total: f64,
    pub frames: usize,
}

impl LossReport {
    pub fn terms(&self) -> [f64; 6] {
        [self.o_plus, self.o_star, self.w, self.action, self.mem, self.ret]
    }

    pub fn term_sum(&self) -> f64 {
        self.terms().iter().sum()
    }
}

fn check_batch(batch: &[LabeledDemo]) -> Result<usize, TrainingError> {
    let mut frames = 0;
    for d in batch {
        for (i, f) in d.frames.iter().enumerate() {
            if f.t != i || f.t >= d.demo.len() {
                return Err(TrainingError::MissingHistory { demo: f.demo, t: f.t });
            }
        }
        frames += d.frames.len();
    }
    if frames == 0 {
        return Err(TrainingError::Empty);
    }
    Ok(frames)
}

/// Computes the weighted loss terms (each a per-frame mean over the batch)
/// and accumulates their gradients into `grads`.
pub fn compute_losses(
    stack: &PolicyStack,
    batch: &[LabeledDemo],
    weights: &LossWeights,
    grads: &mut Grads,
) -> Result<LossReport, TrainingError> {
    let frames = check_batch(batch)?;
    let scale = 1.0 / frames as f64;
    let mut rep = LossReport {
        frames,
        ..LossReport::default()
    };
    for d in batch {
        demo_losses(stack, d, weights, scale, grads, &mut rep)?;
    }
    rep.total = rep.term_sum();
    if !rep.total.is_finite() {
        return Err(TrainingError::NonFinite(0));
    }
    Ok(rep)
}

fn demo_losses(
    stack: &PolicyStack,
    d: &LabeledDemo,
    weights: &LossWeights,
    scale: f64,
    grads: &mut Grads,
    rep: &mut LossReport,
) -> Result<(), TrainingError> {
    let n = stack.n;
    let h = d.frames.len();
    let store = &stack.store;
    let lw = stack.config.lstm;
    let e = stack.config.embed;

    // memory unroll: states[t] is the memory seen at frame t
    let mut states = vec![LstmState::zeros(lw)];
    let mut caches: Vec<LstmCache> = Vec::with_capacity(h);
    for f in &d.frames {
        let x = stack.tuple_input(f.tool, f.target, &f.waypoint);
        let (next, cache) = stack.lstm.step(store, states.last().unwrap(), &x).map_err(PolicyError::from)?;
        states.push(next);
        caches.push(cache);
    }
    let mut dmem = vec![vec![0.0; lw]; h + 1];
    let obs_w = 7 + n * (n - 1) * 7;

    for (t, f) in d.frames.iter().enumerate() {
        let obs = &d.demo.frames[f.t];
        let mem = &states[t].hidden;
        let gx = stack.g_features(&f.g);
        let genc = stack.genc.forward(store, &gx).map_err(PolicyError::from)?;
        let mut dgenc = vec![0.0; genc.len()];

        // high level: marginal cross-entropies for tool and target
        let hc = stack.high_cached(obs, mem, &genc)?;
        let tool_set: Vec<bool> = (0..n * n).map(|i| i / n == f.tool && admissible(i / n, i % n)).collect();
        let target_set: Vec<bool> = (0..n * n).map(|i| i % n == f.target && admissible(i / n, i % n)).collect();
        if !tool_set.iter().any(|b| *b) || !target_set.iter().any(|b| *b) || !admissible(f.tool, f.target) {
            return Err(PolicyError::Input(format!("inadmissible label ({}, {})", f.tool, f.target)).into());
        }
        let (lo, go) = subset_ce(&hc.logits, &tool_set);
        let (ls, gs) = subset_ce(&hc.logits, &target_set);
        rep.o_plus += weights.o_plus * lo * scale;
        rep.o_star += weights.o_star * ls * scale;
        let dlogits: Vec<f64> = go
            .iter()
            .zip(&gs)
            .map(|(a, b)| scale * (weights.o_plus * a + weights.o_star * b))
            .collect();
        let dx = stack.high.backward(store, &hc.acts, &dlogits, grads);
        add(&mut dmem[t], &dx[obs_w..obs_w + lw]);
        add(&mut dgenc, &dx[obs_w + lw..]);

        // mid level: regression on the way-point
        let rel = obs.rel(f.tool, f.target).to_vec7();
        let mc = stack.mid_cached(mem, &genc, &rel, f.tool, f.target)?;
        let (lwv, gw) = mse(mc.acts.last().unwrap(), &stack.waypoint_target(&f.waypoint));
        rep.w += weights.w * lwv * scale;
        let dout: Vec<f64> = gw.iter().map(|v| v * weights.w * scale).collect();
        let dx = stack.mid.backward(store, &mc.acts, &dout, grads);
        add(&mut dmem[t], &dx[..lw]);
        add(&mut dgenc, &dx[lw..lw + genc.len()]);
        let off = lw + genc.len() + 7;
        stack.emb.backward(f.tool, &dx[off..off + e], grads);
        stack.emb.backward(f.target, &dx[off + e..off + 2 * e], grads);

        stack.genc.backward(store, &gx, &genc, &dgenc, grads);

        // low level: Gaussian likelihood of the observed motion
        if let Some(a) = &f.action {
            let lc = stack.low_cached(&rel, &f.waypoint, f.tool, f.target)?;
            rep.action += stack.low_nll_backward(&lc, a, weights.action * scale, f.tool, f.target, grads);
        }

        // retrieval of the previous tuple from memory
        if t > 0 {
            let p = &d.frames[t - 1];
            let mut dm = vec![0.0; lw];
            let s = weights.ret * scale;
            for (head, class) in [(&stack.ret_tool, p.tool), (&stack.ret_target, p.target)] {
                let y = head.forward(store, mem).map_err(PolicyError::from)?;
                let (l, g) = softmax_ce(&y, class).map_err(PolicyError::from)?;
                rep.ret += l * s;
                let g: Vec<f64> = g.iter().map(|v| v * s).collect();
                add(&mut dm, &head.backward(store, mem, &y, &g, grads));
            }
            let y = stack.ret_w.forward(store, mem).map_err(PolicyError::from)?;
            let (l, g) = mse(&y, &stack.waypoint_target(&p.waypoint));
            rep.ret += l * s;
            let g: Vec<f64> = g.iter().map(|v| v * s).collect();
            add(&mut dm, &stack.ret_w.backward(store, mem, &y, &g, grads));
            add(&mut dmem[t], &dm);

            // memory consistency while the tuple is unchanged
            if f.tuple_eq(p) {
                let a = &states[t + 1].hidden;
                let b = &states[t].hidden;
                let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                rep.mem += weights.mem * norm * scale;
                if norm > 0.0 {
                    let k = weights.mem * scale / norm;
                    for i in 0..lw {
                        dmem[t + 1][i] += k * diff[i];
                        dmem[t][i] -= k * diff[i];
                    }
                }
            }
        }
    }

    // back-propagation through the unrolled encoder
    let mut dh = dmem[h].clone();
    let mut dc = vec![0.0; lw];
    for t in (0..h).rev() {
        let (dx, dh_prev, dc_prev) = stack.lstm.backward(store, &caches[t], &dh, &dc, grads);
        let f = &d.frames[t];
        stack.emb.backward(f.tool, &dx[..e], grads);
        stack.emb.backward(f.target, &dx[e..2 * e], grads);
        dh = dh_prev;
        add(&mut dh, &dmem[t]);
        dc = dc_prev;
    }
    Ok(())
}

fn reborrow<'a>(log: &'a mut Option<&mut dyn Write>) -> Option<&'a mut dyn Write> {
    match log {
        Some(w) => Some(&mut **w),
        None => None,
    }
}

fn add(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Frames per batch; whole demonstrations are packed until reached.
    pub batch_frames: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_frames: 2048,
            lr: 1e-4,
            clip_norm: 5.0,
            weights: LossWeights::default(),
        }
    }
}

/// Runs `iterations` Adam steps on batches of whole demonstrations sampled
/// with replacement. Returns one report per iteration. When `log` is given,
/// one line per iteration is appended to it.
pub fn train_policies(
    stack: &mut PolicyStack,
    demos: &[LabeledDemo],
    cfg: &TrainConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<LossReport>, TrainingError> {
    if demos.is_empty() {
        return Err(TrainingError::Empty);
    }
    check_batch(demos)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    for it in 0..cfg.iterations {
        let mut batch: Vec<LabeledDemo> = Vec::new();
        let mut frames = 0;
        while frames < cfg.batch_frames.max(1) {
            let d = &demos[rng.random_range(0..demos.len())];
            frames += d.frames.len();
            batch.push(d.clone());
        }
        let mut grads = stack.store.zero_grads();
        let rep = compute_losses(stack, &batch, &cfg.weights, &mut grads).map_err(|e| match e {
            TrainingError::NonFinite(_) => TrainingError::NonFinite(it),
            other => other,
        })?;
        stack.store.accumulate(&grads);
        stack.store.clip_grad_norm(cfg.clip_norm);
        stack.store.adam_update(cfg.lr);
        if let Some(w) = reborrow(&mut log) {
            writeln!(
                w,
                "iter={} o_plus={:.6} o_star={:.6} w={:.6} action={:.6} mem={:.6} ret={:.6} total={:.6} wall={:.3}",
                it,
                rep.o_plus,
                rep.o_star,
                rep.w,
                rep.action,
                rep.mem,
                rep.ret,
                rep.total,
                start.elapsed().as_secs_f64()
            )?;
        }
        reports.push(rep);
    }
    Ok(reports)
}

/// Low-level model used by the first labeling pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorLow {
    /// The initialized low-level network.
    Network,
    /// Gaussian around the clipped straight step, with the step size
    /// estimated from the demonstrations.
    StraightLine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmConfig {
    pub policy: PolicyConfig,
    pub init: InitConfig,
    pub train: TrainConfig,
    /// Search settings for the prior pass.
    pub prior_inference: InferenceConfig,
    /// Search settings for passes with learned scorers.
    pub inference: InferenceConfig,
    pub prior_low: PriorLow,
    pub prior_low_log_std: f64,
    pub epsilon: f64,
    pub max_outer: usize,
    pub seed: u64,
    /// When set, the stack is saved to `outer_XX` under this directory after
    /// each training phase.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            policy: PolicyConfig::default(),
            init: InitConfig::default(),
            train: TrainConfig::default(),
            prior_inference: InferenceConfig::default(),
            inference: InferenceConfig::default(),
            prior_low: PriorLow::Network,
            prior_low_log_std: 0.01f64.ln(),
            epsilon: 0.01,
            max_outer: 5,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmIteration {
    pub outer: usize,
    /// Fraction of frames whose label tuple changed in this relabeling.
    pub change_fraction: f64,
    /// Fraction of frames whose `(tool, target)` changed.
    pub pair_change_fraction: f64,
    pub final_loss: Option<LossReport>,
}

#[derive(Clone, Debug)]
pub struct EmResult {
    pub stack: PolicyStack,
    pub labels: Vec<Vec<SubTaskLabel>>,
    pub iterations: Vec<EmIteration>,
}

fn label_all(demos: &[Demonstration], scorers: &dyn crate::policies::Scorers, cfg: &InferenceConfig) -> Result<Vec<Vec<SubTaskLabel>>, TrainingError> {
    demos
        .iter()
        .map(|d| Ok(viterbi_label(d, scorers, cfg)?.labels))
        .collect()
}

fn change_fractions(a: &[Vec<SubTaskLabel>], b: &[Vec<SubTaskLabel>]) -> (f64, f64) {
    let mut total = 0usize;
    let mut changed = 0usize;
    let mut pair_changed = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (l, m) in x.iter().zip(y) {
            total += 1;
            changed += usize::from(l != m);
            pair_changed += usize::from(l.pair() != m.pair());
        }
    }
    let t = total.max(1) as f64;
    (changed as f64 / t, pair_changed as f64 / t)
}

/// Prior scorers for the first labeling pass, with the configured
/// low-level model.
pub fn prior_scorers<'a>(stack: &'a PolicyStack, demos: &[Demonstration], cfg: &EmConfig) -> PriorScorers<'a> {
    let low = match cfg.prior_low {
        PriorLow::Network => LowModel::Learned(stack),
        PriorLow::StraightLine => {
            let step = estimate_step(demos);
            LowModel::StraightLine {
                step,
                rot: step * stack.config.rot_ratio,
                log_std: cfg.prior_low_log_std,
            }
        }
    };
    PriorScorers {
        config: stack.config.clone(),
        low,
    }
}

/// Labels every demonstration with the prior scorers.
pub fn prior_labels(stack: &PolicyStack, demos: &[Demonstration], cfg: &EmConfig) -> Result<Vec<Vec<SubTaskLabel>>, TrainingError> {
    label_all(demos, &prior_scorers(stack, demos, cfg), &cfg.prior_inference)
}

/// Alternates training on the current labels with relabeling by the
/// trained stack, starting from `labels`. Stops once the fraction of
/// changed frame labels drops below `epsilon` or after `max_outer`
/// relabelings. The returned stack has been trained on the returned labels.
pub fn em_refine(
    mut stack: PolicyStack,
    demos: &[Demonstration],
    mut labels: Vec<Vec<SubTaskLabel>>,
    cfg: &EmConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<EmResult, TrainingError> {
    let mut iterations = Vec::new();
    let mut trained_on: Option<Vec<Vec<SubTaskLabel>>> = None;
    for outer in 1..=cfg.max_outer {
        let data: Vec<LabeledDemo> = demos.iter().zip(&labels).enumerate().map(|(i, (d, l))| labeled_demo(i, d, l)).collect();
        let reports = train_policies(&mut stack, &data, &cfg.train, cfg.seed.wrapping_add(outer as u64), reborrow(&mut log))?;
        trained_on = Some(labels.clone());
        if let Some(dir) = &cfg.checkpoint_dir {
            stack.save(&dir.join(format!("outer_{outer:02}")))?;
        }
        let new = label_all(demos, &LearnedScorers { stack: &stack }, &cfg.inference)?;
        let (change, pair_change) = change_fractions(&labels, &new);
        if let Some(w) = reborrow(&mut log) {
            writeln!(w, "em outer={outer} change={change:.6} pair_change={pair_change:.6}")?;
        }
        iterations.push(EmIteration {
            outer,
            change_fraction: change,
            pair_change_fraction: pair_change,
            final_loss: reports.last().copied(),
        });
        labels = new;
        if change < cfg.epsilon {
            break;
        }
    }
    if trained_on.as_ref() != Some(&labels) {
        let data: Vec<LabeledDemo> = demos.iter().zip(&labels).enumerate().map(|(i, (d, l))| labeled_demo(i, d, l)).collect();
        train_policies(&mut stack, &data, &cfg.train, cfg.seed.wrapping_add(1000), reborrow(&mut log))?;
        if let Some(dir) = &cfg.checkpoint_dir {
            stack.save(&dir.join("final"))?;
        }
    }
    Ok(EmResult {
        stack,
        labels,
        iterations,
    })
}

/// Full procedure: initialize the low-level head, label with the priors,
/// then refine by alternating training and relabeling.
pub fn em_loop(demos: &[Demonstration], cfg: &EmConfig, mut log: Option<&mut dyn Write>) -> Result<EmResult, TrainingError> {
    let n = demos.first().ok_or(TrainingError::Empty)?.n();
    let mut stack = PolicyStack::new(n, cfg.policy.clone(), cfg.seed);
    let init = InitConfig {
        seed: cfg.seed,
        ..cfg.init.clone()
    };
    init_low_level(&mut stack, demos, &init)?;
    let labels = prior_labels(&stack, demos, cfg)?;
    if let Some(w) = reborrow(&mut log) {
        writeln!(w, "em outer=0 prior labels")?;
    }
    em_refine(stack, demos, labels, cfg, log)
}

/// Frame-wise `(tool, target)` accuracy of a stack's argmax choice under
/// teacher-forced history.
pub fn pair_accuracy(stack: &PolicyStack, data: &[LabeledDemo]) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for d in data {
        let mut hist = crate::policies::HistoryEncoding::new(stack);
        for f in &d.frames {
            let lp = stack.high_forward(&d.demo.frames[f.t], &hist, &f.g).expect("validated");
            let best = (0..lp.len()).max_by(|a, b| lp[*a].total_cmp(&lp[*b]).then(b.cmp(a))).unwrap();
            total += 1;
            hit += usize::from(best == pair_index(stack.n, f.tool, f.target));
            hist.push(stack, f.tool, f.target, &f.waypoint);
        }
    }
    hit as f64 / total.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::{scripted_expert, Family, TaskSpec};

    fn scripted(count: u64, family: Family) -> Vec<Demonstration> {
        let spec = TaskSpec::new(family);
        (0..count).map(|s| scripted_expert(&spec, s).unwrap()).collect()
    }

    fn truth<'a>(demos: &'a [Demonstration]) -> Vec<LabeledDemo<'a>> {
        demos
            .iter()
            .enumerate()
            .map(|(i, d)| labeled_demo(i, d, d.ground_truth.as_ref().unwrap()))
            .collect()
    }

    fn small_config() -> PolicyConfig {
        PolicyConfig {
            hidden: 12,
            lstm: 6,
            embed: 3,
            g_embed: 5,
            ..PolicyConfig::default()
        }
    }

    #[test]
    fn sum_identity_and_finite_terms() {
        let demos = scripted(3, Family::StackingA);
        let data = truth(&demos);
        let stack = PolicyStack::new(4, PolicyConfig::default(), 1);
        let mut g = stack.store.zero_grads();
        let rep = compute_losses(&stack, &data, &LossWeights::default(), &mut g).unwrap();
        assert!(rep.terms().iter().all(|v| v.is_finite()));
        assert!((rep.total - rep.term_sum()).abs() < 1e-9);
        assert_eq!(rep.frames, demos.iter().map(|d| d.len()).sum::<usize>());
    }

    #[test]
    fn missing_history_is_rejected() {
        let demos = scripted(1, Family::StackingA);
        let mut data = truth(&demos);
        data[0].frames.remove(0);
        let stack = PolicyStack::new(4, PolicyConfig::default(), 1);
        let mut g = stack.store.zero_grads();
        assert!(matches!(
            compute_losses(&stack, &data, &LossWeights::default(), &mut g),
            Err(TrainingError::MissingHistory { demo: 0, t: 1 })
        ));
    }

    #[test]
    fn mem_term_vanishes_when_every_tuple_changes() {
        let demos = scripted(1, Family::StackingA);
        let d = &demos[0];
        let labels: Vec<SubTaskLabel> = (0..d.len()).map(|t| SubTaskLabel::new(0, 1 + t % 3, t)).collect();
        let data = vec![labeled_demo(0, d, &labels)];
        let stack = PolicyStack::new(4, PolicyConfig::default(), 2);
        let mut g = stack.store.zero_grads();
        let rep = compute_losses(&stack, &data, &LossWeights::default(), &mut g).unwrap();
        assert_eq!(rep.mem, 0.0);
    }

    #[test]
    fn mem_term_is_zero_for_constant_memory() {
        let demos = scripted(1, Family::StackingA);
        let data = truth(&demos);
        let mut stack = PolicyStack::new(4, PolicyConfig::default(), 3);
        for id in [stack.lstm.w, stack.lstm.b] {
            stack.store.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = stack.store.zero_grads();
        let rep = compute_losses(&stack, &data, &LossWeights::default(), &mut g).unwrap();
        assert_eq!(rep.mem, 0.0);
    }

    #[test]
    fn perfect_logits_give_zero_cross_entropy() {
        let demos = scripted(1, Family::StackingA);
        let d = &demos[0];
        let labels = vec![SubTaskLabel::new(0, 2, d.len() - 1); d.len()];
        let data = vec![labeled_demo(0, d, &labels)];
        let mut stack = PolicyStack::new(4, PolicyConfig::default(), 4);
        let last = stack.high.layers[2].clone();
        last.zero(&mut stack.store);
        stack.store.value_mut(last.b)[pair_index(4, 0, 2)] = 1e4;
        let mut g = stack.store.zero_grads();
        let rep = compute_losses(&stack, &data, &LossWeights::default(), &mut g).unwrap();
        assert_eq!(rep.o_plus, 0.0);
        assert_eq!(rep.o_star, 0.0);
    }

    #[test]
    fn full_loss_matches_finite_differences() {
        let demos = scripted(8, Family::StackingA);
        let short: Vec<Demonstration> = demos
            .iter()
            .map(|d| {
                let mut d = d.clone();
                d.frames.truncate(6);
                let gt = d.ground_truth.as_mut().unwrap();
                gt.truncate(6);
                for l in gt.iter_mut() {
                    l.waypoint_frame = l.waypoint_frame.min(5);
                }
                d
            })
            .collect();
        let data = truth(&short);
        let mut stack = PolicyStack::new(4, small_config(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // biases start at zero, which puts ReLU units with zero input on the kink
        let biases: Vec<_> = stack
            .store
            .params()
            .iter()
            .filter(|p| p.name.ends_with(".b"))
            .map(|p| stack.store.id(&p.name).unwrap())
            .collect();
        for id in biases {
            for v in stack.store.value_mut(id) {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let w = LossWeights::default();
        let mut grads = stack.store.zero_grads();
        compute_losses(&stack, &data, &w, &mut grads).unwrap();
        let ids: Vec<_> = stack.store.params().iter().map(|p| (stack.store.id(&p.name).unwrap(), p.value.len())).collect();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        while checked < 50 {
            let (id, len) = ids[rng.random_range(0..ids.len())];
            let i = rng.random_range(0..len);
            let analytic = grads.get(id)[i];
            let eps = 1e-5;
            let orig = stack.store.value(id)[i];
            stack.store.value_mut(id)[i] = orig + eps;
            let mut scratch = stack.store.zero_grads();
            let up = compute_losses(&stack, &data, &w, &mut scratch).unwrap().total;
            stack.store.value_mut(id)[i] = orig - eps;
            let down = compute_losses(&stack, &data, &w, &mut scratch).unwrap().total;
            stack.store.value_mut(id)[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if analytic.abs().max(numeric.abs()) < 1e-7 {
                continue;
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            worst = worst.max(rel);
            checked += 1;
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let demos = scripted(2, Family::StackingA);
        let data = truth(&demos);
        let mut stack = PolicyStack::new(4, PolicyConfig::default(), 7);
        let before = stack.store.clone();
        let cfg = TrainConfig {
            iterations: 3,
            batch_frames: 64,
            lr: 0.0,
            ..TrainConfig::default()
        };
        train_policies(&mut stack, &data, &cfg, 1, None).unwrap();
        for (a, b) in before.params().iter().zip(stack.store.params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let demos = scripted(3, Family::StackingA);
        let data = truth(&demos);
        let cfg = TrainConfig {
            iterations: 5,
            batch_frames: 100,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut stack = PolicyStack::new(4, PolicyConfig::default(), 8);
            let mut log = Vec::new();
            let r = train_policies(&mut stack, &data, &cfg, 9, Some(&mut log)).unwrap();
            (r.last().unwrap().total, String::from_utf8(log).unwrap())
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la.lines().count(), 5);
        let strip = |s: &str| s.lines().map(|l| l.split(" wall=").next().unwrap().to_string()).collect::<Vec<_>>();
        assert_eq!(strip(&la), strip(&lb));
    }

    #[test]
    fn loss_halves_within_200_iterations() {
        let demos = scripted(10, Family::StackingA);
        let data = truth(&demos);
        let mut stack = PolicyStack::new(4, PolicyConfig::default(), 10);
        let cfg = TrainConfig {
            iterations: 200,
            batch_frames: 256,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let r = train_policies(&mut stack, &data, &cfg, 11, None).unwrap();
        let first = r[0].total;
        let last: f64 = r[180..].iter().map(|x| x.total).sum::<f64>() / 20.0;
        assert!(last <= 0.5 * first, "{first} -> {last}");
        for rep in &r {
            assert!((rep.total - rep.term_sum()).abs() < 1e-9);
        }
    }

    #[test]
    fn converged_labels_are_a_fixed_point() {
        let demos = scripted(3, Family::StackingA);
        let cfg = EmConfig {
            init: InitConfig {
                iterations: 50,
                ..InitConfig::default()
            },
            train: TrainConfig {
                iterations: 20,
                batch_frames: 128,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            max_outer: 1,
            ..EmConfig::default()
        };
        let res = em_loop(&demos, &cfg, None).unwrap();
        let fixed = EmConfig {
            train: TrainConfig {
                iterations: 0,
                ..cfg.train.clone()
            },
            ..cfg.clone()
        };
        let again = label_all(&demos, &LearnedScorers { stack: &res.stack }, &cfg.inference).unwrap();
        let res2 = em_refine(res.stack.clone(), &demos, again.clone(), &fixed, None).unwrap();
        assert_eq!(res2.iterations.len(), 1);
        assert_eq!(res2.iterations[0].change_fraction, 0.0);
        assert_eq!(res2.labels, again);
    }
}
