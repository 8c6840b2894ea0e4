//! Viterbi labeling of demonstrations with `(tool, target, way-point frame)`
//! hidden states.
//!
//! The score of a label sequence is the sum over frames of the high-level,
//! mid-level and low-level log-probabilities. Ties between equal scores are
//! broken toward the lexicographically smallest state, both for the final
//! state and for back-pointers.

use std::collections::HashMap;

use thiserror::Error;

use crate::policies::{admissible_pairs, pair_index, DemoScorer, Scorers};
use crate::trajectory::{Demonstration, SubTaskLabel};

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("demonstration has no frames")]
    EmptyDemo,
    #[error("no label sequence has finite score")]
    NoFeasiblePath,
    #[error("back-pointer chain broken at frame {0}")]
    BrokenChain(usize),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    Exact,
    Beam(usize),
    /// Exact up to `AUTO_EXACT_MAX_FRAMES` frames, beam of `AUTO_BEAM` above.
    Auto,
}

pub const AUTO_EXACT_MAX_FRAMES: usize = 80;
pub const AUTO_BEAM: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceConfig {
    pub mode: SearchMode,
    /// Way-point candidate stride; 0 picks 1 up to `AUTO_EXACT_MAX_FRAMES`
    /// frames and 2 above.
    pub stride: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            mode: SearchMode::Auto,
            stride: 0,
        }
    }
}

impl InferenceConfig {
    pub fn stride_for(&self, h: usize) -> usize {
        match self.stride {
            0 if h <= AUTO_EXACT_MAX_FRAMES => 1,
            0 => 2,
            s => s,
        }
    }

    fn beam(&self, h: usize) -> Option<usize> {
        match self.mode {
            SearchMode::Exact => None,
            SearchMode::Beam(b) => Some(b),
            SearchMode::Auto if h <= AUTO_EXACT_MAX_FRAMES => None,
            SearchMode::Auto => Some(AUTO_BEAM),
        }
    }
}

/// Way-point frames considered at frame `t`: `t` itself, every later
/// multiple of `stride`, and the final frame.
pub fn candidates(t: usize, h: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut out = vec![t];
    let first = (t / stride + 1) * stride;
    out.extend((first..h).step_by(stride));
    if h - 1 > t && out.last() != Some(&(h - 1)) {
        out.push(h - 1);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeNode {
    pub label: SubTaskLabel,
    pub score: f64,
    /// Index of the predecessor in the previous frame's node list.
    pub back: Option<usize>,
}

/// Surviving states of every frame, sorted by label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lattice {
    pub frames: Vec<Vec<LatticeNode>>,
}

struct ScoreCache<'a> {
    scorer: Box<dyn DemoScorer + 'a>,
    high: HashMap<Option<SubTaskLabel>, Vec<f64>>,
    mid: HashMap<(Option<SubTaskLabel>, usize, usize), Vec<f64>>,
    low: HashMap<(usize, usize, usize), f64>,
}

impl<'a> ScoreCache<'a> {
    fn new(scorer: Box<dyn DemoScorer + 'a>) -> Self {
        ScoreCache {
            scorer,
            high: HashMap::new(),
            mid: HashMap::new(),
            low: HashMap::new(),
        }
    }

    fn reset(&mut self) {
        self.high.clear();
        self.mid.clear();
        self.low.clear();
    }

    fn high(&mut self, t: usize, prev: Option<&SubTaskLabel>) -> &[f64] {
        let key = self.scorer.high_dependence().key(prev);
        let scorer = &mut self.scorer;
        self.high.entry(key).or_insert_with(|| scorer.high(t, prev))
    }

    fn mid(&mut self, t: usize, prev: Option<&SubTaskLabel>, tool: usize, target: usize, cands: &[usize]) -> &[f64] {
        let key = (self.scorer.mid_dependence().key(prev), tool, target);
        let scorer = &mut self.scorer;
        self.mid
            .entry(key)
            .or_insert_with(|| scorer.mid(t, prev, tool, target, cands))
    }

    fn low(&mut self, t: usize, tool: usize, target: usize, k: usize) -> f64 {
        let scorer = &mut self.scorer;
        *self
            .low
            .entry((tool, target, k))
            .or_insert_with(|| scorer.low(t, tool, target, k))
    }
}

fn prune(nodes: &mut Vec<LatticeNode>, beam: Option<usize>) {
    if let Some(b) = beam {
        if nodes.len() > b {
            nodes.sort_by(|x, y| y.score.total_cmp(&x.score).then(x.label.cmp(&y.label)));
            nodes.truncate(b);
            nodes.sort_by(|x, y| x.label.cmp(&y.label));
        }
    }
}

/// Runs the Viterbi recursion and returns the lattice of surviving states.
pub fn forward_pass(demo: &Demonstration, scorers: &dyn Scorers, cfg: &InferenceConfig) -> Result<Lattice, InferenceError> {
    let h = demo.len();
    if h == 0 {
        return Err(InferenceError::EmptyDemo);
    }
    if let SearchMode::Beam(0) = cfg.mode {
        return Err(InferenceError::Argument("beam width must be positive".into()));
    }
    let n = demo.n();
    let beam = cfg.beam(h);
    let pairs = admissible_pairs(n);
    let mut cache = ScoreCache::new(scorers.for_demo(demo));
    let mut lattice = Lattice::default();

    for t in 0..h {
        cache.reset();
        let cands = candidates(t, h, cfg.stride_for(h));
        let width = cands.len();
        let mut best: Vec<Option<(f64, Option<usize>)>> = vec![None; n * n * width];
        let prevs: Vec<(Option<usize>, Option<SubTaskLabel>, f64)> = if t == 0 {
            vec![(None, None, 0.0)]
        } else {
            lattice.frames[t - 1]
                .iter()
                .enumerate()
                .map(|(i, nd)| (Some(i), Some(nd.label), nd.score))
                .collect()
        };
        for (back, prev, f) in prevs {
            let hp = cache.high(t, prev.as_ref()).to_vec();
            for &(tool, target) in &pairs {
                let hs = hp[pair_index(n, tool, target)];
                if hs == f64::NEG_INFINITY {
                    continue;
                }
                let mp = cache.mid(t, prev.as_ref(), tool, target, &cands).to_vec();
                for (ci, &k) in cands.iter().enumerate() {
                    if mp[ci] == f64::NEG_INFINITY {
                        continue;
                    }
                    let q = f + hs + mp[ci] + cache.low(t, tool, target, k);
                    if !q.is_finite() {
                        continue;
                    }
                    let slot = &mut best[pair_index(n, tool, target) * width + ci];
                    if slot.is_none_or(|(s, _)| q > s) {
                        *slot = Some((q, back));
                    }
                }
            }
        }
        let mut nodes: Vec<LatticeNode> = Vec::new();
        for tool in 0..n {
            for target in 0..n {
                for (ci, &k) in cands.iter().enumerate() {
                    if let Some((score, back)) = best[pair_index(n, tool, target) * width + ci] {
                        nodes.push(LatticeNode {
                            label: SubTaskLabel::new(tool, target, k),
                            score,
                            back,
                        });
                    }
                }
            }
        }
        if nodes.is_empty() {
            return Err(InferenceError::NoFeasiblePath);
        }
        prune(&mut nodes, beam);
        lattice.frames.push(nodes);
    }
    Ok(lattice)
}

/// Best final state (smallest label among equal scores) followed back to
/// the first frame.
pub fn backward_trace(lattice: &Lattice) -> Result<(Vec<SubTaskLabel>, f64), InferenceError> {
    let last = lattice.frames.last().ok_or(InferenceError::EmptyDemo)?;
    let mut idx = None;
    for (i, nd) in last.iter().enumerate() {
        if idx.is_none_or(|j: usize| nd.score > last[j].score) {
            idx = Some(i);
        }
    }
    let mut idx = idx.ok_or(InferenceError::NoFeasiblePath)?;
    let score = last[idx].score;
    let h = lattice.frames.len();
    let mut labels = vec![last[idx].label; h];
    for t in (0..h).rev() {
        let node = lattice.frames[t].get(idx).ok_or(InferenceError::BrokenChain(t))?;
        labels[t] = node.label;
        match (t, node.back) {
            (0, None) => {}
            (0, Some(_)) | (_, None) => return Err(InferenceError::BrokenChain(t)),
            (_, Some(b)) => idx = b,
        }
    }
    Ok((labels, score))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Labeling {
    pub labels: Vec<SubTaskLabel>,
    pub log_score: f64,
}

pub fn viterbi_label(demo: &Demonstration, scorers: &dyn Scorers, cfg: &InferenceConfig) -> Result<Labeling, InferenceError> {
    let lattice = forward_pass(demo, scorers, cfg)?;
    let (labels, log_score) = backward_trace(&lattice)?;
    Ok(Labeling { labels, log_score })
}

/// Objective value of a given label sequence, recomputed from the scorers.
pub fn sequence_score(demo: &Demonstration, scorers: &dyn Scorers, labels: &[SubTaskLabel], stride: usize) -> Result<f64, InferenceError> {
    let h = demo.len();
    if h == 0 {
        return Err(InferenceError::EmptyDemo);
    }
    if labels.len() != h {
        return Err(InferenceError::Argument(format!("{} labels for {h} frames", labels.len())));
    }
    let n = demo.n();
    let mut s = scorers.for_demo(demo);
    let mut total = 0.0;
    for (t, l) in labels.iter().enumerate() {
        let prev = if t == 0 { None } else { Some(&labels[t - 1]) };
        let cands = candidates(t, h, stride);
        if l.tool >= n || l.target >= n {
            return Ok(f64::NEG_INFINITY);
        }
        let Some(ci) = cands.iter().position(|&k| k == l.waypoint_frame) else {
            return Ok(f64::NEG_INFINITY);
        };
        total += s.high(t, prev)[pair_index(n, l.tool, l.target)];
        total += s.mid(t, prev, l.tool, l.target, &cands)[ci];
        total += s.low(t, l.tool, l.target, l.waypoint_frame);
    }
    Ok(total)
}
