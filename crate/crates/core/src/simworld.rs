//! Kinematic tabletop world: the end-effector moves by pose deltas, objects
//! attach to it by proximity and detach at their goal slots. Also holds the
//! four task families, their scripted experts and their success checkers.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{norm3, pose_delta, relative_pose, GeometryError, Pose, PoseVec7};
use crate::trajectory::{Demonstration, Observation, SubTaskLabel, EFFECTOR, EFFECTOR_LABEL};

/// Seconds between recorded frames.
pub const FRAME_DT: f64 = 0.1;

const BLOCK_HALF: f64 = 0.025;
const REACHED_TOL: f64 = 1e-9;
const MAX_SUBTASK_STEPS: usize = 300;
const GENERATION_RETRIES: usize = 100;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("action position step {norm:.4} m exceeds max_step {max:.4} m")]
    ActionTooLarge { norm: f64, max: f64 },
    #[error("invalid action: {0}")]
    InvalidAction(#[from] GeometryError),
    #[error("generation failed for {family} seed {seed}: {msg}")]
    Generation { family: Family, seed: u64, msg: String },
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Painting,
    StackingA,
    StackingB,
    Tire,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Painting, Family::StackingA, Family::StackingB, Family::Tire];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Painting => "painting",
            Family::StackingA => "stacking_a",
            Family::StackingB => "stacking_b",
            Family::Tire => "tire",
        }
    }

    pub fn object_labels(&self) -> Vec<String> {
        let names: &[&str] = match self {
            Family::Painting => &["brush", "bucket", "canvas"],
            Family::StackingA => &["base", "block_b", "block_c"],
            Family::StackingB => &["base", "block_b", "block_c", "block_d"],
            Family::Tire => &["wrench", "wheel", "bolt_1", "bolt_2", "bolt_3", "bolt_4"],
        };
        std::iter::once(EFFECTOR_LABEL)
            .chain(names.iter().copied())
            .map(String::from)
            .collect()
    }

    pub fn n(&self) -> usize {
        self.object_labels().len()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Family, String> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown task family '{s}' (expected painting, stacking_a, stacking_b or tire)"))
    }
}

/// Success thresholds (meters and degrees).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub bucket_radius: f64,
    pub plane_height: f64,
    pub plane_band: f64,
    pub line_length: f64,
    pub line_lateral: f64,
    pub bolt_radius: f64,
    pub bolt_rotation_deg: f64,
    pub stack_tolerance: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            bucket_radius: 0.03,
            plane_height: 0.10,
            plane_band: 0.005,
            line_length: 0.05,
            line_lateral: 0.01,
            bolt_radius: 0.005,
            bolt_rotation_deg: 30.0,
            stack_tolerance: 0.005,
        }
    }
}

/// World and scripted-expert parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub max_step: f64,
    /// Kept well under half of `reach_step` so the expert's grasp frame
    /// does not depend on where the approach steps happen to land.
    pub grasp_radius: f64,
    pub release_radius: f64,
    /// Expert translation per frame.
    pub reach_step: f64,
    /// Expert quaternion change per frame.
    pub reach_rot: f64,
    pub jitter_pos: f64,
    pub jitter_rot_deg: f64,
    /// Yaw the expert turns at each bolt in the tire task.
    pub bolt_turn_deg: f64,
    /// Height above a stacking slot the expert passes through before
    /// descending; 0 places directly.
    pub place_hover: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            max_step: 0.05,
            grasp_radius: 0.005,
            release_radius: 0.004,
            reach_step: 0.02,
            reach_rot: 0.03,
            jitter_pos: 0.002,
            jitter_rot_deg: 0.5,
            bolt_turn_deg: 40.0,
            place_hover: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Goal {
    /// Blocks and their goal poses in the base block's frame, in stacking order.
    Stack { base: usize, slots: Vec<(usize, Pose)> },
    Painting {
        brush: usize,
        bucket: usize,
        canvas: usize,
        line_start: [f64; 3],
        line_end: [f64; 3],
    },
    Tire { wrench: usize, wheel: usize, bolts: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub family: Family,
    pub n: usize,
    pub goal: Goal,
    pub tolerances: Tolerances,
    pub sim: SimParams,
}

impl TaskSpec {
    pub fn new(family: Family) -> TaskSpec {
        TaskSpec::with_params(family, Tolerances::default(), SimParams::default())
    }

    pub fn with_params(family: Family, tolerances: Tolerances, sim: SimParams) -> TaskSpec {
        let side = 2.0 * BLOCK_HALF + 0.005;
        let goal = match family {
            Family::StackingA => Goal::Stack {
                base: 1,
                slots: vec![
                    (2, Pose::from_translation(side, 0.0, 0.0)),
                    (3, Pose::from_translation(0.0, 0.0, 2.0 * BLOCK_HALF)),
                ],
            },
            Family::StackingB => Goal::Stack {
                base: 1,
                slots: vec![
                    (2, Pose::from_translation(side, 0.0, 0.0)),
                    (3, Pose::from_translation(-side, 0.0, 0.0)),
                    (4, Pose::from_translation(0.0, 0.0, 2.0 * BLOCK_HALF)),
                ],
            },
            Family::Painting => Goal::Painting {
                brush: 1,
                bucket: 2,
                canvas: 3,
                line_start: [-0.03, 0.0, 0.10],
                line_end: [0.04, 0.0, 0.10],
            },
            Family::Tire => Goal::Tire {
                wrench: 1,
                wheel: 2,
                bolts: vec![3, 4, 5, 6],
            },
        };
        TaskSpec {
            family,
            n: family.n(),
            goal,
            tolerances,
            sim,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let t = &self.tolerances;
        let s = &self.sim;
        let all = [
            ("bucket_radius", t.bucket_radius),
            ("plane_height", t.plane_height),
            ("plane_band", t.plane_band),
            ("line_length", t.line_length),
            ("line_lateral", t.line_lateral),
            ("bolt_radius", t.bolt_radius),
            ("bolt_rotation_deg", t.bolt_rotation_deg),
            ("stack_tolerance", t.stack_tolerance),
            ("max_step", s.max_step),
            ("grasp_radius", s.grasp_radius),
            ("release_radius", s.release_radius),
            ("reach_step", s.reach_step),
            ("reach_rot", s.reach_rot),
        ];
        for (name, v) in all {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SimError::InvalidSpec(format!("{name} must be positive, got {v}")));
            }
        }
        if s.jitter_pos < 0.0 || s.jitter_rot_deg < 0.0 {
            return Err(SimError::InvalidSpec("jitter must be non-negative".into()));
        }
        if !(s.place_hover >= 0.0) || !(s.bolt_turn_deg > 0.0) {
            return Err(SimError::InvalidSpec("place_hover and bolt_turn_deg out of range".into()));
        }
        if s.reach_step > s.max_step {
            return Err(SimError::InvalidSpec("reach_step exceeds max_step".into()));
        }
        if self.n != self.family.n() {
            return Err(SimError::InvalidSpec(format!(
                "{} uses {} objects, spec declares {}",
                self.family,
                self.family.n(),
                self.n
            )));
        }
        Ok(())
    }

    pub fn object_labels(&self) -> Vec<String> {
        self.family.object_labels()
    }

    /// World-frame goal pose of a stacking block, given the current base pose.
    fn slot_of(&self, block: usize) -> Option<Pose> {
        match &self.goal {
            Goal::Stack { slots, .. } => slots.iter().find(|(b, _)| *b == block).map(|(_, p)| *p),
            _ => None,
        }
    }

    /// Random initial layout. The returned state carries `seed` for bookkeeping.
    pub fn sample_layout<R: Rng>(&self, rng: &mut R, seed: u64) -> WorldState {
        let n = self.n;
        let mut poses = vec![Pose::identity(); n];
        let ee_yaw = rng.random_range(-PI / 4.0..PI / 4.0);
        let ee = Pose::from_xyz_yaw(
            [
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(0.15..0.25),
            ],
            ee_yaw,
        );
        poses[EFFECTOR] = ee;
        let mut attached = None;
        let mut offset = Pose::identity();
        match &self.goal {
            Goal::Stack { base, slots } => {
                let mut placed_xy: Vec<[f64; 2]> = Vec::new();
                let mut objs = vec![*base];
                objs.extend(slots.iter().map(|(b, _)| *b));
                for obj in objs {
                    let xy = sample_separated(rng, &placed_xy, 0.25, 0.12);
                    placed_xy.push(xy);
                    poses[obj] = Pose::from_xyz_yaw(
                        [xy[0], xy[1], BLOCK_HALF],
                        rng.random_range(-PI / 4.0..PI / 4.0),
                    );
                }
            }
            Goal::Painting {
                brush,
                bucket,
                canvas,
                ..
            } => {
                let b = sample_separated(rng, &[], 0.25, 0.0);
                let c = sample_separated(rng, &[b], 0.25, 0.2);
                poses[*bucket] = Pose::from_xyz_yaw([b[0], b[1], 0.05], rng.random_range(-PI / 4.0..PI / 4.0));
                poses[*canvas] = Pose::from_xyz_yaw([c[0], c[1], 0.0], rng.random_range(-PI / 4.0..PI / 4.0));
                offset = Pose::from_translation(0.0, 0.0, -0.08);
                poses[*brush] = ee.compose(&offset);
                attached = Some(*brush);
            }
            Goal::Tire { wrench, wheel, bolts } => {
                let w = sample_separated(rng, &[], 0.2, 0.0);
                let wheel_pose = Pose::from_xyz_yaw([w[0], w[1], 0.03], rng.random_range(-PI / 4.0..PI / 4.0));
                poses[*wheel] = wheel_pose;
                for (i, b) in bolts.iter().enumerate() {
                    let a = i as f64 * PI / 2.0;
                    poses[*b] = wheel_pose.compose(&Pose::from_translation(0.05 * a.cos(), 0.05 * a.sin(), 0.0));
                }
                offset = Pose::from_translation(0.0, 0.0, -0.1);
                poses[*wrench] = ee.compose(&offset);
                attached = Some(*wrench);
            }
        }
        WorldState {
            poses,
            attached,
            attach_offset: offset,
            placed: vec![false; n],
            rng_seed: seed,
        }
    }

    /// Deterministic initial layout for an evaluation episode.
    pub fn initial_state(&self, seed: u64) -> WorldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_layout(&mut rng, seed)
    }
}

fn sample_separated<R: Rng>(rng: &mut R, others: &[[f64; 2]], half_width: f64, min_dist: f64) -> [f64; 2] {
    loop {
        let p = [
            rng.random_range(-half_width..half_width),
            rng.random_range(-half_width..half_width),
        ];
        if others
            .iter()
            .all(|o| ((p[0] - o[0]).powi(2) + (p[1] - o[1]).powi(2)).sqrt() >= min_dist)
        {
            return p;
        }
    }
}

/// Full world state. Object 0 is the end-effector.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub poses: Vec<Pose>,
    pub attached: Option<usize>,
    /// Pose of the attached object in the end-effector frame.
    pub attach_offset: Pose,
    /// Blocks released at their goal slot; they can no longer be grasped.
    pub placed: Vec<bool>,
    pub rng_seed: u64,
}

impl WorldState {
    pub fn effector(&self) -> &Pose {
        &self.poses[EFFECTOR]
    }

    pub fn observation(&self, frame: usize) -> Observation {
        Observation::from_world(frame as f64 * FRAME_DT, &self.poses)
    }

    pub fn rel(&self, i: usize, j: usize) -> Pose {
        relative_pose(&self.poses[i], &self.poses[j])
    }
}

/// Applies an end-effector delta: position is added, the quaternion part is
/// added and renormalized. The attached object follows rigidly, then the
/// family's grasp and release rules fire.
pub fn step(spec: &TaskSpec, state: &WorldState, action: &PoseVec7) -> Result<WorldState, SimError> {
    let norm = action.position_norm();
    if !action.is_finite() {
        return Err(SimError::InvalidAction(GeometryError::NonFinite));
    }
    if norm > spec.sim.max_step * (1.0 + 1e-9) {
        return Err(SimError::ActionTooLarge {
            norm,
            max: spec.sim.max_step,
        });
    }
    let mut next = state.clone();
    let ee = crate::geometry::apply_delta(state.effector(), action)?;
    if ee != *state.effector() {
        next.poses[EFFECTOR] = ee;
        if let Some(obj) = state.attached {
            next.poses[obj] = ee.compose(&state.attach_offset);
        }
    }
    if let Goal::Stack { base, .. } = &spec.goal {
        match next.attached {
            None => {
                let ee_pos = ee.position();
                let nearest = (0..spec.n)
                    .filter(|&i| spec.slot_of(i).is_some() && !next.placed[i])
                    .map(|i| (i, dist3(ee_pos, next.poses[i].position())))
                    .filter(|(_, d)| *d <= spec.sim.grasp_radius)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((i, _)) = nearest {
                    next.attached = Some(i);
                    next.attach_offset = relative_pose(&next.poses[i], &ee);
                }
            }
            Some(b) => {
                let slot = spec.slot_of(b).expect("only blocks are grasped");
                let in_base = next.rel(b, *base);
                if in_base.translation_distance(&slot) <= spec.sim.release_radius {
                    next.attached = None;
                    next.placed[b] = true;
                }
            }
        }
    }
    Ok(next)
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm3([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

/// Converts a desired change of the tool-in-target pose into an
/// end-effector delta, clipped to `max_step`. The tool must be the
/// end-effector or the attached object.
pub fn effector_action(spec: &TaskSpec, state: &WorldState, tool: usize, target: usize, delta: &PoseVec7) -> Option<PoseVec7> {
    let rel = state.rel(tool, target).to_vec7();
    let new_rel = Pose::from_vec7(&(rel + *delta)).ok()?;
    let tool_world = state.poses[target].compose(&new_rel);
    let ee_new = if tool == EFFECTOR {
        tool_world
    } else if state.attached == Some(tool) {
        tool_world.compose(&state.attach_offset.inverse())
    } else {
        return None;
    };
    let mut a = pose_delta(&ee_new.to_vec7(), &state.effector().to_vec7());
    let n = a.position_norm();
    if n > spec.sim.max_step {
        a = a.scale(spec.sim.max_step / n);
    }
    Some(a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EndEvent {
    Reach,
    Grasp(usize),
    Release(usize),
}

#[derive(Clone, Debug)]
struct PlanStep {
    tool: usize,
    target: usize,
    waypoint: Pose,
    end: EndEvent,
}

fn plan(spec: &TaskSpec) -> Vec<PlanStep> {
    match &spec.goal {
        Goal::Stack { base, slots } => slots
            .iter()
            .flat_map(|(b, slot)| {
                let mut steps = vec![PlanStep {
                    tool: EFFECTOR,
                    target: *b,
                    waypoint: Pose::identity(),
                    end: EndEvent::Grasp(*b),
                }];
                if spec.sim.place_hover > 0.0 {
                    steps.push(PlanStep {
                        tool: *b,
                        target: *base,
                        waypoint: Pose::from_translation(0.0, 0.0, spec.sim.place_hover).compose(slot),
                        end: EndEvent::Reach,
                    });
                }
                steps.push(PlanStep {
                    tool: *b,
                    target: *base,
                    waypoint: *slot,
                    end: EndEvent::Release(*b),
                });
                steps
            })
            .collect(),
        Goal::Painting {
            brush,
            bucket,
            canvas,
            line_start,
            line_end,
        } => vec![
            PlanStep {
                tool: *brush,
                target: *bucket,
                waypoint: Pose::identity(),
                end: EndEvent::Reach,
            },
            PlanStep {
                tool: *brush,
                target: *canvas,
                waypoint: Pose::from_xyz_yaw(*line_start, 0.0),
                end: EndEvent::Reach,
            },
            PlanStep {
                tool: *brush,
                target: *canvas,
                waypoint: Pose::from_xyz_yaw(*line_end, 0.0),
                end: EndEvent::Reach,
            },
        ],
        Goal::Tire { wrench, wheel, bolts } => {
            let turn = spec.sim.bolt_turn_deg.to_radians();
            let mut steps: Vec<PlanStep> = bolts
                .iter()
                .flat_map(|b| {
                    [Pose::identity(), Pose::from_yaw(turn)].map(|w| PlanStep {
                        tool: *wrench,
                        target: *b,
                        waypoint: w,
                        end: EndEvent::Reach,
                    })
                })
                .collect();
            steps.push(PlanStep {
                tool: *wrench,
                target: *wheel,
                waypoint: Pose::identity(),
                end: EndEvent::Reach,
            });
            steps
        }
    }
}

fn truncated_normal<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let d = Normal::new(0.0, sigma).expect("positive sigma");
    loop {
        let x: f64 = d.sample(rng);
        if x.abs() <= 2.0 * sigma {
            return x;
        }
    }
}

/// One expert move of `tool` toward `waypoint` (in the target frame): the
/// straight 7-vector step clipped to `reach_step` / `reach_rot`, with
/// jitter tapered off as the remaining distance vanishes so the final
/// arrival is exact.
fn expert_delta<R: Rng>(spec: &TaskSpec, state: &WorldState, step: &PlanStep, rng: &mut R) -> PoseVec7 {
    let rel = state.rel(step.tool, step.target).to_vec7();
    let d = pose_delta(&step.waypoint.to_vec7(), &rel);
    let dp = d.position_norm();
    let dq = norm3([d[4], d[5], d[6]]).hypot(d[3]);
    let s = 1.0f64.min(spec.sim.reach_step / dp).min(spec.sim.reach_rot / dq);
    let mut delta = d.scale(s);
    if s < 1.0 {
        let taper_p = (dp * (1.0 - s) / spec.sim.reach_step).min(1.0);
        let taper_q = (dq * (1.0 - s) / spec.sim.reach_rot).min(1.0);
        for i in 0..3 {
            delta[i] += taper_p * truncated_normal(rng, spec.sim.jitter_pos);
        }
        let yaw = taper_q * truncated_normal(rng, spec.sim.jitter_rot_deg.to_radians());
        if yaw != 0.0 {
            let moved = Pose::from_vec7(&(rel + delta)).expect("unit quaternion");
            let turned = Pose::from_xyz_yaw([0.0; 3], yaw);
            let q = moved.compose(&turned).to_vec7();
            let aligned = pose_delta(&q, &rel);
            for i in 3..7 {
                delta[i] = aligned[i];
            }
        }
    }
    delta
}

/// Generates one demonstration with ground-truth labels. Layouts whose
/// expert run grasps the wrong object or fails the checker are resampled.
pub fn scripted_expert(spec: &TaskSpec, seed: u64) -> Result<Demonstration, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = String::new();
    for _ in 0..GENERATION_RETRIES {
        let state = spec.sample_layout(&mut rng, seed);
        match run_expert(spec, state, &mut rng) {
            Ok(demo) => {
                let report = check_success(spec, &demo);
                if report.success {
                    return Ok(demo);
                }
                last = report.summary();
            }
            Err(msg) => last = msg,
        }
    }
    Err(SimError::Generation {
        family: spec.family,
        seed,
        msg: last,
    })
}

fn run_expert<R: Rng>(spec: &TaskSpec, mut state: WorldState, rng: &mut R) -> Result<Demonstration, String> {
    let mut frames = vec![state.observation(0)];
    let mut active: Vec<usize> = Vec::new();
    let mut ends: Vec<usize> = Vec::new();
    let steps = plan(spec);
    for (si, ps) in steps.iter().enumerate() {
        let mut count = 0;
        loop {
            let done = match ps.end {
                EndEvent::Reach => {
                    pose_delta(&ps.waypoint.to_vec7(), &state.rel(ps.tool, ps.target).to_vec7()).norm() < REACHED_TOL
                }
                EndEvent::Grasp(b) => state.attached == Some(b),
                EndEvent::Release(b) => state.placed[b],
            };
            if done {
                break;
            }
            if let EndEvent::Grasp(b) = ps.end {
                if state.attached.is_some_and(|a| a != b) {
                    return Err(format!("grasped object {} instead of {b}", state.attached.unwrap()));
                }
            }
            if count >= MAX_SUBTASK_STEPS {
                return Err(format!("sub-task {si} did not finish"));
            }
            let delta = expert_delta(spec, &state, ps, rng);
            let action = effector_action(spec, &state, ps.tool, ps.target, &delta)
                .ok_or_else(|| format!("tool {} is not held", ps.tool))?;
            state = step(spec, &state, &action).map_err(|e| e.to_string())?;
            active.push(si);
            frames.push(state.observation(frames.len()));
            count += 1;
        }
        ends.push(frames.len() - 1);
    }
    let h = frames.len();
    let mut labels: Vec<SubTaskLabel> = active
        .iter()
        .map(|&si| SubTaskLabel::new(steps[si].tool, steps[si].target, ends[si]))
        .collect();
    let last = labels.last().copied().ok_or("empty plan")?;
    labels.push(SubTaskLabel::new(last.tool, last.target, h - 1));
    let mut demo = Demonstration::new(spec.family.name(), spec.object_labels(), frames);
    demo.ground_truth = Some(labels);
    Ok(demo)
}

/// One checked criterion.
#[derive(Clone, Debug, PartialEq)]
pub struct Criterion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuccessReport {
    pub success: bool,
    pub criteria: Vec<Criterion>,
}

impl SuccessReport {
    fn from_criteria(criteria: Vec<Criterion>) -> SuccessReport {
        SuccessReport {
            success: criteria.iter().all(|c| c.passed),
            criteria,
        }
    }

    /// The first failing criterion, if any.
    pub fn first_failure(&self) -> Option<&Criterion> {
        self.criteria.iter().find(|c| !c.passed)
    }

    pub fn summary(&self) -> String {
        match self.first_failure() {
            None => "success".into(),
            Some(c) => format!("{}: {}", c.name, c.detail),
        }
    }
}

fn criterion(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Criterion {
    Criterion {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

/// Scores a trajectory against the family's success criteria.
pub fn check_success(spec: &TaskSpec, demo: &Demonstration) -> SuccessReport {
    if demo.is_empty() || demo.n() != spec.n {
        return SuccessReport::from_criteria(vec![criterion(
            "objects",
            false,
            format!("trajectory has {} objects, task expects {}", demo.n(), spec.n),
        )]);
    }
    match &spec.goal {
        Goal::Stack { base, slots } => check_stacking(spec, demo, *base, slots),
        Goal::Painting {
            brush,
            bucket,
            canvas,
            ..
        } => check_painting(spec, demo, *brush, *bucket, *canvas),
        Goal::Tire { wrench, wheel, bolts } => check_tire(spec, demo, *wrench, *wheel, bolts),
    }
}

fn check_stacking(spec: &TaskSpec, demo: &Demonstration, base: usize, slots: &[(usize, Pose)]) -> SuccessReport {
    let last = demo.len() - 1;
    let tol = spec.tolerances.stack_tolerance;
    let criteria = slots
        .iter()
        .map(|(b, slot)| {
            let err = demo.rel(last, *b, base).translation_distance(slot);
            criterion(
                format!("stacking tolerance ({})", demo.labels[*b]),
                err <= tol,
                format!("final offset {:.4} m, tolerance {:.4} m", err, tol),
            )
        })
        .collect();
    SuccessReport::from_criteria(criteria)
}

fn check_painting(spec: &TaskSpec, demo: &Demonstration, brush: usize, bucket: usize, canvas: usize) -> SuccessReport {
    let tol = &spec.tolerances;
    let dip = (0..demo.len()).find(|&t| norm3(demo.rel(t, brush, bucket).position()) <= tol.bucket_radius);
    let Some(dip) = dip else {
        return SuccessReport::from_criteria(vec![criterion(
            "bucket",
            false,
            format!("brush never within {:.3} m of the bucket center", tol.bucket_radius),
        )]);
    };
    let mut criteria = vec![criterion("bucket", true, format!("dipped at frame {dip}"))];
    let pts: Vec<[f64; 3]> = (dip..demo.len()).map(|t| demo.rel(t, brush, canvas).position()).collect();
    let in_band: Vec<bool> = pts
        .iter()
        .map(|p| (p[2] - tol.plane_height).abs() <= tol.plane_band)
        .collect();
    if !in_band.iter().any(|b| *b) {
        criteria.push(criterion(
            "plane",
            false,
            format!("brush never {:.3} m above the canvas", tol.plane_height),
        ));
        return SuccessReport::from_criteria(criteria);
    }
    criteria.push(criterion("plane", true, ""));
    let best = longest_line(&pts, &in_band, tol.line_lateral);
    criteria.push(criterion(
        "line",
        best >= tol.line_length,
        format!("longest straight stroke {:.4} m, required {:.4} m", best, tol.line_length),
    ));
    SuccessReport::from_criteria(criteria)
}

/// Longest straight stroke in the canvas plane: for each start inside the
/// height band, the path is extended while it stays in the band, advances
/// monotonically along the chord and keeps within `lateral` of it.
pub fn longest_line(pts: &[[f64; 3]], in_band: &[bool], lateral: f64) -> f64 {
    let mut best: f64 = 0.0;
    for a in 0..pts.len() {
        if !in_band[a] {
            continue;
        }
        let pa = [pts[a][0], pts[a][1]];
        for b in a + 1..pts.len() {
            if !in_band[b] {
                break;
            }
            let d = [pts[b][0] - pa[0], pts[b][1] - pa[1]];
            let len = d[0].hypot(d[1]);
            if len == 0.0 {
                continue;
            }
            let u = [d[0] / len, d[1] / len];
            let mut ok = true;
            let mut prev = 0.0;
            for p in &pts[a + 1..=b] {
                let v = [p[0] - pa[0], p[1] - pa[1]];
                let along = v[0] * u[0] + v[1] * u[1];
                let across = (v[0] * u[1] - v[1] * u[0]).abs();
                if along < prev || across > lateral {
                    ok = false;
                    break;
                }
                prev = along;
            }
            if !ok {
                break;
            }
            best = best.max(len);
        }
    }
    best
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

fn check_tire(spec: &TaskSpec, demo: &Demonstration, wrench: usize, wheel: usize, bolts: &[usize]) -> SuccessReport {
    let tol = &spec.tolerances;
    let mut criteria = Vec::new();
    for (i, &b) in bolts.iter().enumerate() {
        let inside = |t: usize| norm3(demo.rel(t, wrench, b).position()) <= tol.bolt_radius;
        let mut turned = 0.0;
        for t in 0..demo.len() - 1 {
            if inside(t) && inside(t + 1) {
                let y0 = demo.frames[t].end_effector.yaw();
                let y1 = demo.frames[t + 1].end_effector.yaw();
                turned += wrap_angle(y1 - y0);
            }
        }
        let deg = turned.to_degrees();
        criteria.push(criterion(
            format!("bolt {}", i + 1),
            deg >= tol.bolt_rotation_deg,
            format!(
                "turned {:.1} deg counter-clockwise within {:.3} m, required {:.1}",
                deg, tol.bolt_radius, tol.bolt_rotation_deg
            ),
        ));
    }
    let last = demo.len() - 1;
    let hub = norm3(demo.rel(last, wrench, wheel).position());
    criteria.push(criterion(
        "wheel center",
        hub <= tol.bolt_radius,
        format!("final wrench offset {:.4} m from the wheel center", hub),
    ));
    SuccessReport::from_criteria(criteria)
}
