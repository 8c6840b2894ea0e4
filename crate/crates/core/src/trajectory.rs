//! Demonstration data model and its line-oriented text format.
//!
//! A demonstration file starts with one header record
//!
//! ```text
//! task=stacking_a n=4 labels=effector,base,block_b,block_c
//! ```
//!
//! followed by one line per frame
//!
//! ```text
//! t=<float> ee=<7 floats> rel=<n*n*7 floats, row-major> [gt=<tool>,<target>,<wp>] [pl=<tool>,<target>,<wp>]
//! ```
//!
//! Floats within a field are comma separated and written with 9 significant
//! digits. Blank lines and lines starting with `#` are ignored. Object 0 is
//! always the end-effector and carries the reserved label [`EFFECTOR_LABEL`].

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{relative_pose, Pose, PoseVec7};

/// Index of the end-effector in every demonstration.
pub const EFFECTOR: usize = 0;
pub const EFFECTOR_LABEL: &str = "effector";

/// File extension used when a directory of demonstrations is loaded.
pub const DEMO_EXTENSION: &str = "demo";

const REL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{context}: frame {frame}: {msg}")]
    Validation { context: String, frame: usize, msg: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl TrajectoryError {
    fn validation(context: &str, frame: usize, msg: impl Into<String>) -> Self {
        TrajectoryError::Validation {
            context: context.to_string(),
            frame,
            msg: msg.into(),
        }
    }
}

/// One observation: end-effector world pose plus the pairwise relative-pose
/// matrix of all objects. `rel(i, j)` is object `i` in the frame of object `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub timestamp: f64,
    pub end_effector: Pose,
    n: usize,
    rel: Vec<Pose>,
}

impl Observation {
    /// `rel` is row-major with `n * n` entries.
    pub fn new(timestamp: f64, end_effector: Pose, n: usize, rel: Vec<Pose>) -> Result<Self, TrajectoryError> {
        if rel.len() != n * n {
            return Err(TrajectoryError::Argument(format!(
                "relative-pose matrix has {} entries, expected {}",
                rel.len(),
                n * n
            )));
        }
        Ok(Observation {
            timestamp,
            end_effector,
            n,
            rel,
        })
    }

    /// Builds an observation from world poses of all objects (object 0 is
    /// the end-effector).
    pub fn from_world(timestamp: f64, world: &[Pose]) -> Self {
        Observation {
            timestamp,
            end_effector: world[EFFECTOR],
            n: world.len(),
            rel: build_rel_matrix(world),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rel(&self, i: usize, j: usize) -> &Pose {
        &self.rel[i * self.n + j]
    }

    pub fn rel_matrix(&self) -> &[Pose] {
        &self.rel
    }

    /// World pose of object `i`, reconstructed through the end-effector.
    pub fn world_pose(&self, i: usize) -> Pose {
        self.end_effector.compose(self.rel(i, EFFECTOR))
    }

    fn check(&self, context: &str, frame: usize) -> Result<(), TrajectoryError> {
        for i in 0..self.n {
            if !self.rel(i, i).approx_eq(&Pose::identity(), REL_TOL) {
                return Err(TrajectoryError::validation(
                    context,
                    frame,
                    format!("rel[{i}][{i}] is not the identity"),
                ));
            }
            for j in (i + 1)..self.n {
                if !self.rel(j, i).approx_eq(&self.rel(i, j).inverse(), REL_TOL) {
                    return Err(TrajectoryError::validation(
                        context,
                        frame,
                        format!("rel[{j}][{i}] is not the inverse of rel[{i}][{j}]"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Pairwise relative poses: entry `[i][j]` is `relative_pose(world[i], world[j])`.
pub fn build_rel_matrix(world: &[Pose]) -> Vec<Pose> {
    let n = world.len();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                out.push(Pose::identity());
            } else {
                out.push(relative_pose(&world[i], &world[j]));
            }
        }
    }
    out
}

/// Hidden sub-task state of one frame: tool, target and the index of the
/// frame whose tool-in-target pose is the way-point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubTaskLabel {
    pub tool: usize,
    pub target: usize,
    pub waypoint_frame: usize,
}

impl SubTaskLabel {
    pub fn new(tool: usize, target: usize, waypoint_frame: usize) -> Self {
        SubTaskLabel {
            tool,
            target,
            waypoint_frame,
        }
    }

    pub fn pair(&self) -> (usize, usize) {
        (self.tool, self.target)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub task_id: String,
    pub labels: Vec<String>,
    pub frames: Vec<Observation>,
    /// Labels emitted by a scripted expert or supplied by an annotator.
    pub ground_truth: Option<Vec<SubTaskLabel>>,
    /// Labels inferred by the pseudo-labeling pass.
    pub pseudo_labels: Option<Vec<SubTaskLabel>>,
}

impl Demonstration {
    pub fn new(task_id: impl Into<String>, labels: Vec<String>, frames: Vec<Observation>) -> Self {
        Demonstration {
            task_id: task_id.into(),
            labels,
            frames,
            ground_truth: None,
            pseudo_labels: None,
        }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn rel(&self, t: usize, i: usize, j: usize) -> &Pose {
        self.frames[t].rel(i, j)
    }

    /// The way-point a label refers to, as a 7-vector in the target's frame.
    pub fn waypoint(&self, label: &SubTaskLabel) -> PoseVec7 {
        self.rel(label.waypoint_frame, label.tool, label.target).to_vec7()
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let ctx = self.task_id.as_str();
        let n = self.n();
        if n < 2 {
            return Err(TrajectoryError::validation(ctx, 0, "need at least two objects"));
        }
        if self.labels[EFFECTOR] != EFFECTOR_LABEL {
            return Err(TrajectoryError::validation(
                ctx,
                0,
                format!("object 0 must carry the label '{EFFECTOR_LABEL}'"),
            ));
        }
        if self.labels.iter().filter(|l| *l == EFFECTOR_LABEL).count() != 1 {
            return Err(TrajectoryError::validation(
                ctx,
                0,
                "exactly one object may carry the end-effector label",
            ));
        }
        if self.frames.len() < 2 {
            return Err(TrajectoryError::validation(ctx, 0, "need at least two frames"));
        }
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.n != n {
                return Err(TrajectoryError::validation(
                    ctx,
                    t,
                    format!("frame has {} objects, header declares {n}", frame.n),
                ));
            }
            if t > 0 && frame.timestamp <= self.frames[t - 1].timestamp {
                return Err(TrajectoryError::validation(ctx, t, "timestamps must increase strictly"));
            }
            frame.check(ctx, t)?;
        }
        for labels in [&self.ground_truth, &self.pseudo_labels].into_iter().flatten() {
            validate_labels(ctx, labels, n, self.frames.len())?;
        }
        Ok(())
    }
}

pub fn validate_labels(ctx: &str, labels: &[SubTaskLabel], n: usize, h: usize) -> Result<(), TrajectoryError> {
    if labels.len() != h {
        return Err(TrajectoryError::validation(
            ctx,
            labels.len().min(h),
            format!("{} labels for {h} frames", labels.len()),
        ));
    }
    for (t, l) in labels.iter().enumerate() {
        if l.tool >= n || l.target >= n {
            return Err(TrajectoryError::validation(ctx, t, "label object index out of range"));
        }
        if l.target == EFFECTOR {
            return Err(TrajectoryError::validation(ctx, t, "the end-effector cannot be a target"));
        }
        if l.tool == l.target {
            return Err(TrajectoryError::validation(ctx, t, "tool and target must differ"));
        }
        if l.waypoint_frame < t || l.waypoint_frame >= h {
            return Err(TrajectoryError::validation(
                ctx,
                t,
                format!("way-point frame {} outside [{t}, {h})", l.waypoint_frame),
            ));
        }
    }
    Ok(())
}

/// Keeps `target_len` frames at approximately uniform stride, always keeping
/// the first and the last frame. Labels are subsampled at the same indices;
/// way-point frames move to the nearest retained index at or after them.
/// Fraction of frames whose predicted `(tool, target)` matches the reference,
/// skipping frames within `margin` of a reference pair change.
pub fn pair_agreement(pred: &[(usize, usize)], truth: &[SubTaskLabel], margin: usize) -> Option<f64> {
    if pred.len() != truth.len() {
        return None;
    }
    let h = truth.len();
    let changes: Vec<usize> = (1..h).filter(|&t| truth[t].pair() != truth[t - 1].pair()).collect();
    let mut hit = 0usize;
    let mut total = 0usize;
    for t in 0..h {
        if changes.iter().any(|&c| t + margin >= c && t < c + margin) {
            continue;
        }
        total += 1;
        if pred[t] == truth[t].pair() {
            hit += 1;
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

pub fn downsample(demo: &Demonstration, target_len: usize) -> Result<Demonstration, TrajectoryError> {
    let h = demo.len();
    if target_len < 2 || target_len > h {
        return Err(TrajectoryError::Argument(format!(
            "target length {target_len} outside [2, {h}]"
        )));
    }
    let keep: Vec<usize> = (0..target_len)
        .map(|i| ((i as f64) * (h - 1) as f64 / (target_len - 1) as f64).round() as usize)
        .collect();
    let remap = |labels: &Vec<SubTaskLabel>| -> Vec<SubTaskLabel> {
        keep.iter()
            .map(|&old| {
                let l = labels[old];
                let new_wp = keep.partition_point(|&k| k < l.waypoint_frame);
                SubTaskLabel::new(l.tool, l.target, new_wp)
            })
            .collect()
    };
    Ok(Demonstration {
        task_id: demo.task_id.clone(),
        labels: demo.labels.clone(),
        frames: keep.iter().map(|&i| demo.frames[i].clone()).collect(),
        ground_truth: demo.ground_truth.as_ref().map(remap),
        pseudo_labels: demo.pseudo_labels.as_ref().map(remap),
    })
}

/// Formats `x` with 9 significant digits, `%.9g` style.
pub fn format_float(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}", trim_zeros(mantissa.to_string()), exp)
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        let t = s.trim_end_matches('0').trim_end_matches('.');
        t.to_string()
    } else {
        s
    }
}

fn push_floats(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format_float(*v));
    }
}

pub fn write_demo<W: Write>(demo: &Demonstration, mut w: W) -> io::Result<()> {
    writeln!(
        w,
        "task={} n={} labels={}",
        demo.task_id,
        demo.n(),
        demo.labels.join(",")
    )?;
    let mut line = String::new();
    for (t, frame) in demo.frames.iter().enumerate() {
        line.clear();
        line.push_str("t=");
        line.push_str(&format_float(frame.timestamp));
        line.push_str(" ee=");
        push_floats(&mut line, &frame.end_effector.to_vec7().0);
        line.push_str(" rel=");
        let flat: Vec<f64> = frame.rel.iter().flat_map(|p| p.to_vec7().0).collect();
        push_floats(&mut line, &flat);
        for (key, labels) in [("gt", &demo.ground_truth), ("pl", &demo.pseudo_labels)] {
            if let Some(l) = labels {
                let l = l[t];
                line.push_str(&format!(" {key}={},{},{}", l.tool, l.target, l.waypoint_frame));
            }
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn demo_to_string(demo: &Demonstration) -> String {
    let mut buf = Vec::new();
    write_demo(demo, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("utf-8 output")
}

pub fn save_demo(path: &Path, demo: &Demonstration) -> Result<(), TrajectoryError> {
    let io_err = |source| TrajectoryError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = io::BufWriter::new(file);
    write_demo(demo, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Writes `demos` as `<prefix>_<index>.demo` files into `dir`.
pub fn save_demos(dir: &Path, prefix: &str, demos: &[Demonstration]) -> Result<Vec<PathBuf>, TrajectoryError> {
    fs::create_dir_all(dir).map_err(|source| TrajectoryError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut paths = Vec::with_capacity(demos.len());
    for (i, d) in demos.iter().enumerate() {
        let p = dir.join(format!("{prefix}_{i:04}.{DEMO_EXTENSION}"));
        save_demo(&p, d)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Loads one demonstration file, or every `*.demo` file of a directory in
/// lexicographic order.
pub fn load_demos(path: &Path) -> Result<Vec<Demonstration>, TrajectoryError> {
    let io_err = |source| TrajectoryError::Io {
        path: path.display().to_string(),
        source,
    };
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == DEMO_EXTENSION))
            .collect();
        files.sort();
        files.iter().map(|f| load_demo(f)).collect()
    } else {
        Ok(vec![load_demo(path)?])
    }
}

pub fn load_demo(path: &Path) -> Result<Demonstration, TrajectoryError> {
    let text = fs::read_to_string(path).map_err(|source| TrajectoryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_demo(&text, &path.display().to_string())
}

pub fn parse_demo(text: &str, source_name: &str) -> Result<Demonstration, TrajectoryError> {
    let perr = |line: usize, msg: String| TrajectoryError::Parse {
        path: source_name.to_string(),
        line,
        msg,
    };
    let mut header: Option<(String, usize, Vec<String>)> = None;
    let mut frames = Vec::new();
    let mut gt: Vec<SubTaskLabel> = Vec::new();
    let mut pl: Vec<SubTaskLabel> = Vec::new();
    let mut gt_lines = 0;
    let mut pl_lines = 0;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields = parse_fields(line).map_err(|m| perr(lineno, m))?;
        let Some((_, n, _)) = header.as_ref() else {
            let task = field(&fields, "task").map_err(|m| perr(lineno, m))?;
            let n: usize = field(&fields, "n")
                .map_err(|m| perr(lineno, m))?
                .parse()
                .map_err(|_| perr(lineno, "n is not an integer".into()))?;
            let labels: Vec<String> = field(&fields, "labels")
                .map_err(|m| perr(lineno, m))?
                .split(',')
                .map(str::to_string)
                .collect();
            if labels.len() != n {
                return Err(perr(lineno, format!("{} labels for n={n}", labels.len())));
            }
            header = Some((task.to_string(), n, labels));
            continue;
        };
        let n = *n;
        let t: f64 = field(&fields, "t")
            .map_err(|m| perr(lineno, m))?
            .parse()
            .map_err(|_| perr(lineno, "t is not a number".into()))?;
        let ee = parse_floats(field(&fields, "ee").map_err(|m| perr(lineno, m))?, 7)
            .map_err(|m| perr(lineno, format!("ee: {m}")))?;
        let rel = parse_floats(field(&fields, "rel").map_err(|m| perr(lineno, m))?, n * n * 7)
            .map_err(|m| perr(lineno, format!("rel: {m}")))?;
        let frame_idx = frames.len();
        let to_pose = |v: &[f64], what: String| {
            Pose::from_stored(&PoseVec7::from_slice(v)).map_err(|e| {
                TrajectoryError::validation(source_name, frame_idx, format!("{what}: {e}"))
            })
        };
        let ee = to_pose(&ee, "ee".into())?;
        let rel = rel
            .chunks(7)
            .enumerate()
            .map(|(k, c)| to_pose(c, format!("rel[{}][{}]", k / n, k % n)))
            .collect::<Result<Vec<_>, _>>()?;
        frames.push(Observation {
            timestamp: t,
            end_effector: ee,
            n,
            rel,
        });
        for (key, store, count) in [("gt", &mut gt, &mut gt_lines), ("pl", &mut pl, &mut pl_lines)] {
            if let Some(v) = fields.iter().find(|(k, _)| *k == key).map(|(_, v)| *v) {
                store.push(parse_label(v).map_err(|m| perr(lineno, format!("{key}: {m}")))?);
                *count += 1;
            }
        }
    }
    let (task_id, _, labels) = header.ok_or_else(|| perr(1, "missing header record".into()))?;
    let h = frames.len();
    let pick = |store: Vec<SubTaskLabel>, count: usize, key: &str| -> Result<Option<Vec<SubTaskLabel>>, TrajectoryError> {
        match count {
            0 => Ok(None),
            c if c == h => Ok(Some(store)),
            c => Err(TrajectoryError::validation(
                source_name,
                c,
                format!("{key}= present on {c} of {h} frames"),
            )),
        }
    };
    let demo = Demonstration {
        task_id,
        labels,
        frames,
        ground_truth: pick(gt, gt_lines, "gt")?,
        pseudo_labels: pick(pl, pl_lines, "pl")?,
    };
    demo.validate()?;
    Ok(demo)
}

fn parse_fields(line: &str) -> Result<Vec<(&str, &str)>, String> {
    line.split_whitespace()
        .map(|tok| tok.split_once('=').ok_or_else(|| format!("malformed field '{tok}'")))
        .collect()
}

fn field<'a>(fields: &[(&'a str, &'a str)], key: &str) -> Result<&'a str, String> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| format!("missing field '{key}'"))
}

fn parse_floats(s: &str, expected: usize) -> Result<Vec<f64>, String> {
    let values = s
        .split(',')
        .map(|v| v.parse::<f64>().map_err(|_| format!("bad number '{v}'")))
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != expected {
        return Err(format!("{} values, expected {expected}", values.len()));
    }
    Ok(values)
}

fn parse_label(s: &str) -> Result<SubTaskLabel, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|v| v.parse::<usize>().map_err(|_| format!("bad index '{v}'")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [tool, target, wp] => Ok(SubTaskLabel::new(*tool, *target, *wp)),
        _ => Err("expected tool,target,waypoint".into()),
    }
}
