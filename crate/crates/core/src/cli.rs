//! Commands behind the `hilearn` binary. Each returns a [`CliError`] whose
//! variant fixes the process exit code.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::eval::{curve_csv, evaluate, CurvePoint, EvalReport, RolloutConfig};
use crate::inference::viterbi_label;
use crate::policies::{init_low_level, InitConfig, LearnedScorers, PolicyStack};
use crate::simworld::{check_success, scripted_expert};
use crate::training::{em_loop, labeled_demo, prior_scorers, train_policies, EmResult, LossReport};
use crate::trajectory::{downsample, load_demos, save_demos, Demonstration, SubTaskLabel};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("{stage}: {msg}")]
    Runtime { stage: &'static str, msg: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Runtime { .. } => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn runtime(stage: &'static str) -> impl Fn(&dyn std::fmt::Display) -> CliError {
    move |e| CliError::Runtime {
        stage,
        msg: e.to_string(),
    }
}

fn io<'a>(stage: &'static str, path: &'a Path) -> impl Fn(std::io::Error) -> CliError + 'a {
    move |e| CliError::Runtime {
        stage,
        msg: format!("{}: {e}", path.display()),
    }
}

/// Seed of the `i`-th generated demonstration of a run.
pub fn demo_seed(run_seed: u64, i: usize) -> u64 {
    run_seed * 1_000_000 + i as u64
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.paths
        .out
        .clone()
        .ok_or_else(|| CliError::Validation("an output directory is required (--out or paths.out)".into()))
}

/// Generates `cfg.task.demos` scripted demonstrations, downsampled to
/// `cfg.task.max_len` when set.
pub fn generate_demos(cfg: &RunConfig) -> Result<Vec<Demonstration>, CliError> {
    let spec = cfg.task_spec();
    (0..cfg.task.demos)
        .map(|i| {
            let d = scripted_expert(&spec, demo_seed(cfg.seed, i)).map_err(|e| runtime("gen-demos")(&e))?;
            if cfg.task.max_len >= 2 && d.len() > cfg.task.max_len {
                downsample(&d, cfg.task.max_len).map_err(|e| runtime("gen-demos")(&e))
            } else {
                Ok(d)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub files: Vec<PathBuf>,
    pub mean_len: f64,
    pub all_success: bool,
}

pub fn cmd_gen_demos(cfg: &RunConfig) -> Result<GenSummary, CliError> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let demos = generate_demos(cfg)?;
    let spec = cfg.task_spec();
    let files = save_demos(&out, cfg.task.family.name(), &demos).map_err(|e| runtime("gen-demos")(&e))?;
    Ok(GenSummary {
        files,
        mean_len: demos.iter().map(|d| d.len() as f64).sum::<f64>() / demos.len().max(1) as f64,
        all_success: demos.iter().all(|d| check_success(&spec, d).success),
    })
}

fn load_input_demos(cfg: &RunConfig) -> Result<Vec<Demonstration>, CliError> {
    let path = cfg
        .paths
        .demos
        .as_ref()
        .ok_or_else(|| CliError::Validation("a demonstration path is required (--demos or paths.demos)".into()))?;
    let demos = load_demos(path).map_err(|e| CliError::Validation(e.to_string()))?;
    if demos.is_empty() {
        return Err(CliError::Validation(format!("no demonstrations under {}", path.display())));
    }
    let n = demos[0].n();
    if demos.iter().any(|d| d.n() != n) {
        return Err(CliError::Validation("demonstrations disagree on the object count".into()));
    }
    Ok(demos)
}

fn load_stack(cfg: &RunConfig) -> Result<PolicyStack, CliError> {
    let path = cfg
        .paths
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Validation("a checkpoint is required (--checkpoint or paths.checkpoint)".into()))?;
    PolicyStack::load(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn label_switches(labels: &[SubTaskLabel]) -> usize {
    labels.windows(2).filter(|w| w[0].pair() != w[1].pair()).count()
}

/// Labels demonstrations with the learned stack when a checkpoint is
/// given, with the priors otherwise, and writes them with `pl=` fields
/// plus `label_report.txt`.
pub fn cmd_label(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let mut demos = load_input_demos(cfg)?;
    let inference = cfg.inference.to_config();
    let mut report = String::new();
    let results: Vec<(Vec<SubTaskLabel>, f64)> = if cfg.paths.checkpoint.is_some() {
        let stack = load_stack(cfg)?;
        if stack.n != demos[0].n() {
            return Err(CliError::Validation(format!(
                "checkpoint expects {} objects, demonstrations have {}",
                stack.n,
                demos[0].n()
            )));
        }
        let sc = LearnedScorers { stack: &stack };
        demos
            .iter()
            .map(|d| viterbi_label(d, &sc, &inference).map(|l| (l.labels, l.log_score)))
            .collect::<Result<_, _>>()
            .map_err(|e| runtime("label")(&e))?
    } else {
        let em = cfg.em_config();
        let mut stack = PolicyStack::new(demos[0].n(), em.policy.clone(), cfg.seed);
        init_low_level(
            &mut stack,
            &demos,
            &InitConfig {
                seed: cfg.seed,
                ..em.init.clone()
            },
        )
        .map_err(|e| runtime("label")(&e))?;
        let sc = prior_scorers(&stack, &demos, &em);
        demos
            .iter()
            .map(|d| viterbi_label(d, &sc, &em.prior_inference).map(|l| (l.labels, l.log_score)))
            .collect::<Result<_, _>>()
            .map_err(|e| runtime("label")(&e))?
    };
    for (i, (d, (labels, score))) in demos.iter_mut().zip(results).enumerate() {
        writeln!(report, "demo={i} frames={} log_score={:.9} switches={}", d.len(), score, label_switches(&labels)).unwrap();
        d.pseudo_labels = Some(labels);
    }
    let files = save_demos(&out, "labeled", &demos).map_err(|e| runtime("label")(&e))?;
    let rp = out.join("label_report.txt");
    fs::write(&rp, report).map_err(io("label", &rp))?;
    Ok(files)
}

fn labels_for_training(demos: &[Demonstration]) -> Result<Vec<Vec<SubTaskLabel>>, CliError> {
    demos
        .iter()
        .enumerate()
        .map(|(i, d)| {
            d.pseudo_labels
                .clone()
                .or_else(|| d.ground_truth.clone())
                .ok_or_else(|| CliError::Validation(format!("demonstration {i} carries neither pl= nor gt= labels")))
        })
        .collect()
}

fn loss_csv(reports: &[LossReport]) -> String {
    let mut s = String::from("iteration,o_plus,o_star,w,action,mem,ret,total\n");
    for (i, r) in reports.iter().enumerate() {
        writeln!(
            s,
            "{i},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            r.o_plus, r.o_star, r.w, r.action, r.mem, r.ret, r.total
        )
        .unwrap();
    }
    s
}

/// Trains a fresh stack (low level initialized first) on the pseudo-labels
/// of the demonstrations, or their ground truth when unlabeled.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let demos = load_input_demos(cfg)?;
    let labels = labels_for_training(&demos)?;
    let em = cfg.em_config();
    let mut stack = PolicyStack::new(demos[0].n(), em.policy.clone(), cfg.seed);
    init_low_level(
        &mut stack,
        &demos,
        &InitConfig {
            seed: cfg.seed,
            ..em.init.clone()
        },
    )
    .map_err(|e| runtime("train")(&e))?;
    let data: Vec<_> = demos.iter().zip(&labels).enumerate().map(|(i, (d, l))| labeled_demo(i, d, l)).collect();
    fs::create_dir_all(&out).map_err(io("train", &out))?;
    let log_path = out.join("train.log");
    let mut log = fs::File::create(&log_path).map_err(io("train", &log_path))?;
    let reports = train_policies(&mut stack, &data, &cfg.train, cfg.seed, Some(&mut log)).map_err(|e| runtime("train")(&e))?;
    let csv = out.join("loss_curve.csv");
    fs::write(&csv, loss_csv(&reports)).map_err(io("train", &csv))?;
    let ckpt = out.join("checkpoint");
    stack.save(&ckpt).map_err(|e| runtime("train")(&e))?;
    Ok(ckpt)
}

fn rollout_config(cfg: &RunConfig) -> RolloutConfig {
    RolloutConfig {
        step_cap: cfg.eval.step_cap,
        sample: cfg.eval.sample,
        feasible_only: cfg.eval.feasible_only,
        ..RolloutConfig::default()
    }
}

fn eval_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.eval.seeds as u64).map(|i| cfg.seed + i).collect()
}

pub fn run_eval(cfg: &RunConfig, stack: &PolicyStack) -> Result<EvalReport, CliError> {
    let spec = cfg.task_spec();
    if stack.n != spec.n {
        return Err(CliError::Validation(format!(
            "checkpoint expects {} objects, task {} has {}",
            stack.n,
            spec.family.name(),
            spec.n
        )));
    }
    evaluate(stack, &spec, cfg.eval.episodes, &eval_seeds(cfg), &rollout_config(cfg)).map_err(|e| runtime("eval")(&e))
}

/// Rolls out the checkpoint and writes `eval_report.txt`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    if cfg.eval.episodes == 0 || cfg.eval.seeds == 0 {
        return Err(CliError::Validation("eval.episodes and eval.seeds must be positive".into()));
    }
    let out = out_dir(cfg)?;
    let stack = load_stack(cfg)?;
    let report = run_eval(cfg, &stack)?;
    fs::create_dir_all(&out).map_err(io("eval", &out))?;
    let p = out.join("eval_report.txt");
    fs::write(&p, report.to_text()).map_err(io("eval", &p))?;
    Ok(report)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Directory holding logs with wall-clock times; excluded from hashing.
pub const LOG_DIR: &str = "logs";
pub const MANIFEST: &str = "manifest.txt";

/// Writes `manifest.txt` listing the SHA-256 of every file under `out`
/// except the manifest itself and the `logs/` directory.
pub fn write_manifest(out: &Path, cfg: &RunConfig) -> Result<String, CliError> {
    let mut files = Vec::new();
    collect_files(out, out, &mut files).map_err(io("manifest", out))?;
    let mut m = String::new();
    writeln!(m, "config_sha256 {}", sha256_hex(cfg.to_toml().as_bytes())).unwrap();
    for rel in &files {
        let name = rel.to_string_lossy().replace('\\', "/");
        if name == MANIFEST {
            continue;
        }
        if name.starts_with(&format!("{LOG_DIR}/")) {
            writeln!(m, "unhashed {name}").unwrap();
            continue;
        }
        let p = out.join(rel);
        let bytes = fs::read(&p).map_err(io("manifest", &p))?;
        writeln!(m, "file {} {name}", sha256_hex(&bytes)).unwrap();
    }
    let p = out.join(MANIFEST);
    fs::write(&p, &m).map_err(io("manifest", &p))?;
    Ok(m)
}

fn write_em_outputs(out: &Path, res: &EmResult) -> Result<(), CliError> {
    let mut s = String::from("outer,change_fraction,pair_change_fraction\n");
    for it in &res.iterations {
        writeln!(s, "{},{:.9},{:.9}", it.outer, it.change_fraction, it.pair_change_fraction).unwrap();
    }
    let p = out.join("em_changes.csv");
    fs::write(&p, s).map_err(io("em", &p))
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub em: EmResult,
    pub report: EvalReport,
    pub curve: Vec<CurvePoint>,
    pub manifest: String,
}

/// Generation (or loading), prior labeling, the EM loop, evaluation and the
/// optional demonstration-count sweep, followed by the manifest.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<PipelineOutput, CliError> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    if cfg.eval.episodes == 0 || cfg.eval.seeds == 0 {
        return Err(CliError::Validation("eval.episodes and eval.seeds must be positive".into()));
    }
    let start = Instant::now();
    fs::create_dir_all(out.join(LOG_DIR)).map_err(io("pipeline", &out))?;
    let timing_path = out.join(LOG_DIR).join("timing.log");
    let mut timing = fs::File::create(&timing_path).map_err(io("pipeline", &timing_path))?;
    let mut mark = |stage: &str| {
        let _ = writeln!(timing, "{stage} {:.3}", start.elapsed().as_secs_f64());
    };
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(io("pipeline", &out))?;

    let demos = match &cfg.paths.demos {
        Some(_) => load_input_demos(cfg)?,
        None => {
            let d = generate_demos(cfg)?;
            save_demos(&out.join("demos"), cfg.task.family.name(), &d).map_err(|e| runtime("gen-demos")(&e))?;
            d
        }
    };
    mark("demos");

    let run_em = |demos: &[Demonstration], ckpt: Option<PathBuf>, log_name: &str| -> Result<EmResult, CliError> {
        let mut em = cfg.em_config();
        em.checkpoint_dir = ckpt;
        let lp = out.join(LOG_DIR).join(log_name);
        let mut log = fs::File::create(&lp).map_err(io("em", &lp))?;
        em_loop(demos, &em, Some(&mut log)).map_err(|e| runtime("em")(&e))
    };
    let res = run_em(&demos, Some(out.join("checkpoints")), "train.log")?;
    write_em_outputs(&out, &res)?;
    let mut labeled = demos.clone();
    for (d, l) in labeled.iter_mut().zip(&res.labels) {
        d.pseudo_labels = Some(l.clone());
    }
    save_demos(&out.join("labeled"), "labeled", &labeled).map_err(|e| runtime("em")(&e))?;
    res.stack.save(&out.join("checkpoint")).map_err(|e| runtime("em")(&e))?;
    mark("em");

    let report = run_eval(cfg, &res.stack)?;
    fs::write(out.join("eval_report.txt"), report.to_text()).map_err(io("eval", &out))?;
    mark("eval");

    let mut curve = Vec::new();
    for &count in &cfg.eval.sweep {
        let r = if count == demos.len() {
            report.clone()
        } else if count < demos.len() {
            let sub = run_em(&demos[..count], None, &format!("train_sweep_{count}.log"))?;
            run_eval(cfg, &sub.stack)?
        } else {
            return Err(CliError::Validation(format!(
                "sweep count {count} exceeds the {} available demonstrations",
                demos.len()
            )));
        };
        curve.push(CurvePoint {
            demo_count: count,
            mean_success: r.mean_success,
            std: r.std_success,
            mean_len: r.mean_len,
        });
        mark(&format!("sweep_{count}"));
    }
    if !curve.is_empty() {
        fs::write(out.join("curve.csv"), curve_csv(&curve)).map_err(io("sweep", &out))?;
    }
    mark("done");
    drop(mark);
    let manifest = write_manifest(&out, cfg)?;
    Ok(PipelineOutput {
        em: res,
        report,
        curve,
        manifest,
    })
}
