//! Closed-loop rollouts of a policy stack in the simulator and the
//! success-rate reports built from them.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::PoseVec7;
use crate::policies::{progress, HistoryEncoding, PolicyError, PolicyStack};
use crate::simworld::{check_success, effector_action, step, TaskSpec};
use crate::trajectory::{Demonstration, Observation, EFFECTOR};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("stack expects {stack} objects, task has {task}")]
    ObjectCount { stack: usize, task: usize },
    #[error("no evaluation seeds or episodes requested")]
    Empty,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    pub step_cap: usize,
    /// Sample low-level actions from the Gaussian instead of using its mean.
    pub sample: bool,
    /// Success is checked every this many steps and at the end.
    pub check_every: usize,
    /// Restrict the argmax to pairs whose tool is the object actually being
    /// moved (the held object, else the end-effector) and whose target is
    /// not the held object.
    pub feasible_only: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            step_cap: 600,
            sample: false,
            check_every: 1,
            feasible_only: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EndReason {
    Success,
    StepCap,
    /// The chosen tool is neither the end-effector nor the held object.
    ToolNotHeld,
    /// The simulator rejected the action.
    InvalidAction,
}

impl EndReason {
    pub fn name(&self) -> &'static str {
        match self {
            EndReason::Success => "success",
            EndReason::StepCap => "step_cap",
            EndReason::ToolNotHeld => "tool_not_held",
            EndReason::InvalidAction => "invalid_action",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub layout_seed: u64,
    pub success: bool,
    pub steps: usize,
    pub reason: EndReason,
}

/// Layout seed of episode `index` under evaluation seed `seed`. Kept far
/// from the small seeds used for generated demonstrations.
pub fn layout_seed(seed: u64, index: usize) -> u64 {
    1_000_000_000 + seed * 1_000_000 + index as u64
}

/// Runs one episode: every step the high level picks the argmax pair
/// (over feasible pairs when `feasible_only` is set), the
/// mid level proposes a way-point and the low level moves the tool toward
/// it. The memory consumes the chosen tuple every step, as during training.
pub fn rollout(stack: &PolicyStack, spec: &TaskSpec, layout_seed: u64, cfg: &RolloutConfig) -> Result<(Episode, Demonstration), EvalError> {
    if stack.n != spec.n {
        return Err(EvalError::ObjectCount {
            stack: stack.n,
            task: spec.n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(layout_seed ^ 0x5eed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut state = spec.initial_state(layout_seed);
    let mut frames: Vec<Observation> = vec![state.observation(0)];
    let mut hist = HistoryEncoding::new(stack);
    let mut prev: Option<(usize, usize, PoseVec7)> = None;
    let demo_of = |frames: &[Observation]| Demonstration::new(spec.family.name(), spec.object_labels(), frames.to_vec());
    let mut reason = EndReason::StepCap;
    let mut steps = 0;
    while steps < cfg.step_cap {
        let obs = frames.last().unwrap();
        let g = progress(obs, prev.as_ref().map(|(a, b, w)| (*a, *b, w)));
        let lp = stack.high_forward(obs, &hist, &g)?;
        let (tool, target) = if cfg.feasible_only {
            let mut masked = lp.clone();
            for (i, v) in masked.iter_mut().enumerate() {
                let (tool, target) = (i / stack.n, i % stack.n);
                if tool != state.attached.unwrap_or(EFFECTOR) || state.attached == Some(target) {
                    *v = f64::NEG_INFINITY;
                }
            }
            argmax_pair(stack.n, &masked)
        } else {
            argmax_pair(stack.n, &lp)
        };
        let rel = obs.rel(tool, target).to_vec7();
        let w = stack.mid_forward(&hist, &g, &rel, tool, target)?;
        let (mean, log_std) = stack.low_forward(&rel, &w, tool, target)?;
        let mut delta = mean;
        if cfg.sample {
            for (d, ls) in delta.0.iter_mut().zip(log_std) {
                *d += ls.exp() * std_normal.sample(&mut rng);
            }
        }
        let Some(action) = effector_action(spec, &state, tool, target, &delta) else {
            reason = EndReason::ToolNotHeld;
            break;
        };
        state = match step(spec, &state, &action) {
            Ok(s) => s,
            Err(_) => {
                reason = EndReason::InvalidAction;
                break;
            }
        };
        steps += 1;
        frames.push(state.observation(frames.len()));
        hist.push(stack, tool, target, &w);
        prev = Some((tool, target, w));
        if steps % cfg.check_every.max(1) == 0 && check_success(spec, &demo_of(&frames)).success {
            reason = EndReason::Success;
            break;
        }
    }
    if reason != EndReason::Success && check_success(spec, &demo_of(&frames)).success {
        reason = EndReason::Success;
    }
    let episode = Episode {
        layout_seed,
        success: reason == EndReason::Success,
        steps,
        reason,
    };
    Ok((episode, demo_of(&frames)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedReport {
    pub seed: u64,
    pub success_rate: f64,
    pub mean_len: f64,
    pub episodes: Vec<Episode>,
}

impl SeedReport {
    pub fn from_episodes(seed: u64, episodes: Vec<Episode>) -> SeedReport {
        let k = episodes.len().max(1) as f64;
        SeedReport {
            seed,
            success_rate: episodes.iter().filter(|e| e.success).count() as f64 / k,
            mean_len: episodes.iter().map(|e| e.steps as f64).sum::<f64>() / k,
            episodes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub seeds: Vec<SeedReport>,
    pub mean_success: f64,
    /// Population standard deviation of the per-seed success rates.
    pub std_success: f64,
    pub mean_len: f64,
}

impl EvalReport {
    pub fn from_seeds(seeds: Vec<SeedReport>) -> EvalReport {
        let k = seeds.len().max(1) as f64;
        let mean_success = seeds.iter().map(|s| s.success_rate).sum::<f64>() / k;
        let var = seeds.iter().map(|s| (s.success_rate - mean_success).powi(2)).sum::<f64>() / k;
        let mean_len = seeds.iter().map(|s| s.mean_len).sum::<f64>() / k;
        EvalReport {
            seeds,
            mean_success,
            std_success: var.sqrt(),
            mean_len,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for sr in &self.seeds {
            writeln!(s, "seed={} success_rate={:.6} mean_len={:.3}", sr.seed, sr.success_rate, sr.mean_len).unwrap();
            for (i, e) in sr.episodes.iter().enumerate() {
                writeln!(
                    s,
                    "episode seed={} index={} layout={} success={} steps={} reason={}",
                    sr.seed,
                    i,
                    e.layout_seed,
                    e.success,
                    e.steps,
                    e.reason.name()
                )
                .unwrap();
            }
        }
        writeln!(
            s,
            "aggregate mean_success={:.6} std_success={:.6} mean_len={:.3}",
            self.mean_success, self.std_success, self.mean_len
        )
        .unwrap();
        s
    }
}

/// `episodes` rollouts for each of `seeds` evaluation seeds (0, 1, ...).
pub fn evaluate(stack: &PolicyStack, spec: &TaskSpec, episodes: usize, seeds: &[u64], cfg: &RolloutConfig) -> Result<EvalReport, EvalError> {
    if episodes == 0 || seeds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let eps = (0..episodes)
            .map(|i| rollout(stack, spec, layout_seed(seed, i), cfg).map(|r| r.0))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(SeedReport::from_episodes(seed, eps));
    }
    Ok(EvalReport::from_seeds(out))
}

/// One row of the success-versus-demonstration-count curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub demo_count: usize,
    pub mean_success: f64,
    pub std: f64,
    pub mean_len: f64,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("demo_count,mean_success,std,mean_len\n");
    for p in points {
        writeln!(s, "{},{:.6},{:.6},{:.3}", p.demo_count, p.mean_success, p.std, p.mean_len).unwrap();
    }
    s
}

/// `(tool, target)` with the highest log-probability; ties go to the
/// smaller pair index.
pub fn argmax_pair(n: usize, lp: &[f64]) -> (usize, usize) {
    let best = (0..lp.len())
        .max_by(|a, b| lp[*a].total_cmp(&lp[*b]).then(b.cmp(a)))
        .expect("non-empty");
    (best / n, best % n)
}
