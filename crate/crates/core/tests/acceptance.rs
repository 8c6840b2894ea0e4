//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints one PASS/FAIL line even when an earlier one fails.
//!
//! `HILEARN_CRITERIA=1,3,8 cargo test --test acceptance` runs a subset.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use hilearn::cli::{cmd_pipeline, generate_demos};
use hilearn::config::RunConfig;
use hilearn::geometry::Pose;
use hilearn::inference::{candidates, sequence_score, viterbi_label, InferenceConfig, SearchMode};
use hilearn::neural::{
    gaussian_logpdf, gaussian_logpdf_grad, mse, softmax_ce, subset_ce, Dense, Embedding, LstmCell, LstmState, ParamStore,
};
use hilearn::policies::{
    admissible_pairs, pair_index, prior_high, prior_mid, prior_pair, DemoScorer, LowModel, PolicyConfig, PolicyStack,
    PriorScorers, Scorers,
};
use hilearn::simworld::{check_success, scripted_expert, Family, Goal, TaskSpec};
use hilearn::training::{compute_losses, em_loop, labeled_demo, train_policies, LossWeights, TrainConfig};
use hilearn::trajectory::{pair_agreement, Demonstration, Observation, SubTaskLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn desk_config() -> RunConfig {
    RunConfig::from_toml(include_str!("../../../configs/desk.toml")).expect("desk config")
}

fn toy_config() -> RunConfig {
    RunConfig::from_toml(include_str!("../../../configs/toy.toml")).expect("toy config")
}

fn random_demo(rng: &mut ChaCha8Rng, n: usize, h: usize) -> Demonstration {
    let mut world: Vec<Pose> = (0..n)
        .map(|_| Pose::from_xyz_yaw([rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.02], rng.random_range(-1.0..1.0)))
        .collect();
    let mut frames = Vec::new();
    for t in 0..h {
        frames.push(Observation::from_world(t as f64 * 0.1, &world));
        for p in world.iter_mut() {
            let step = Pose::from_xyz_yaw(
                [rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)],
                rng.random_range(-0.05..0.05),
            );
            *p = p.compose(&step);
        }
    }
    let labels = std::iter::once("effector".to_string()).chain((1..n).map(|i| format!("o{i}"))).collect();
    Demonstration::new("random", labels, frames)
}

// ---------------------------------------------------------------- 1

struct Enumerator<'a> {
    scorer: Box<dyn DemoScorer + 'a>,
    n: usize,
    h: usize,
    pairs: Vec<(usize, usize)>,
    memo: HashMap<(usize, Option<SubTaskLabel>), Vec<(SubTaskLabel, f64)>>,
    best: f64,
    leaves: usize,
}

impl Enumerator<'_> {
    fn steps(&mut self, t: usize, prev: Option<SubTaskLabel>) -> Vec<(SubTaskLabel, f64)> {
        if let Some(v) = self.memo.get(&(t, prev)) {
            return v.clone();
        }
        let cands = candidates(t, self.h, 1);
        let hp = self.scorer.high(t, prev.as_ref());
        let mut out = Vec::new();
        for &(a, b) in &self.pairs {
            let mp = self.scorer.mid(t, prev.as_ref(), a, b, &cands);
            for (ci, &k) in cands.iter().enumerate() {
                let v = hp[pair_index(self.n, a, b)] + mp[ci] + self.scorer.low(t, a, b, k);
                if v > f64::NEG_INFINITY {
                    out.push((SubTaskLabel::new(a, b, k), v));
                }
            }
        }
        self.memo.insert((t, prev), out.clone());
        out
    }

    fn walk(&mut self, t: usize, prev: Option<SubTaskLabel>, score: f64) {
        if t == self.h {
            self.leaves += 1;
            self.best = self.best.max(score);
            return;
        }
        for (l, v) in self.steps(t, prev) {
            self.walk(t + 1, Some(l), score + v);
        }
    }
}

fn viterbi_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut viterbi_time = 0.0;
    let mut leaves = 0;
    let start = Instant::now();
    for _ in 0..50 {
        let h = rng.random_range(2..=6);
        let demo = random_demo(&mut rng, 3, h);
        let sc = PriorScorers {
            config: PolicyConfig {
                alpha: rng.random_range(1.0..200.0),
                beta: rng.random_range(0.5..0.99),
                gamma: rng.random_range(0.5..0.99),
                ..PolicyConfig::default()
            },
            low: LowModel::StraightLine {
                step: 0.01,
                rot: 0.015,
                log_std: 0.01f64.ln(),
            },
        };
        let cfg = InferenceConfig {
            mode: SearchMode::Exact,
            stride: 1,
        };
        let t0 = Instant::now();
        let got = viterbi_label(&demo, &sc, &cfg).map_err(|e| e.to_string())?;
        viterbi_time += t0.elapsed().as_secs_f64();
        let mut en = Enumerator {
            scorer: sc.for_demo(&demo),
            n: 3,
            h,
            pairs: admissible_pairs(3),
            memo: HashMap::new(),
            best: f64::NEG_INFINITY,
            leaves: 0,
        };
        en.walk(0, None, 0.0);
        leaves += en.leaves;
        let rescored = sequence_score(&demo, &sc, &got.labels, 1).map_err(|e| e.to_string())?;
        worst = worst.max((got.log_score - en.best).abs()).max((rescored - got.log_score).abs());
    }
    let total = start.elapsed().as_secs_f64();
    check(
        worst < 1e-9 && total < 60.0,
        format!("max |viterbi - enumeration| = {worst:.2e} over {leaves} enumerated sequences; viterbi {viterbi_time:.3} s, total {total:.1} s"),
    )
}

// ---------------------------------------------------------------- 2

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn rvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Central difference of `f` at every coordinate of `x`.
fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let eps = 1e-5;
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(&x);
            x[i] = orig - eps;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn worst_of(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f64::max)
}

/// Every parameter of `store` against central differences of `f`.
fn store_worst(store: &mut ParamStore, grads: &hilearn::neural::Grads, f: impl Fn(&ParamStore) -> f64) -> f64 {
    let eps = 1e-5;
    let ids: Vec<_> = store.params().iter().map(|p| (store.id(&p.name).unwrap(), p.value.len())).collect();
    let mut worst: f64 = 0.0;
    for (id, len) in ids {
        for i in 0..len {
            let orig = store.value(id)[i];
            store.value_mut(id)[i] = orig + eps;
            let up = f(store);
            store.value_mut(id)[i] = orig - eps;
            let down = f(store);
            store.value_mut(id)[i] = orig;
            worst = worst.max(rel_err(grads.get(id)[i], (up - down) / (2.0 * eps)));
        }
    }
    worst
}

fn op_check(kind: usize, rng: &mut ChaCha8Rng) -> (&'static str, f64) {
    match kind {
        0 | 1 => {
            let relu = kind == 1;
            let (i, o) = (rng.random_range(1..7), rng.random_range(1..7));
            let mut store = ParamStore::new();
            let d = Dense::new(&mut store, "d", i, o, relu, rng);
            for id in [d.b] {
                store.value_mut(id).iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
            let x = rvec(rng, i);
            let r = rvec(rng, o);
            let y = d.forward(&store, &x).unwrap();
            let mut g = store.zero_grads();
            let dx = d.backward(&store, &x, &y, &r, &mut g);
            let obj = |s: &ParamStore, x: &[f64]| d.forward(s, x).unwrap().iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
            let nx = numeric_grad(&x, |x| obj(&store, x));
            let wx = worst_of(&dx, &nx);
            let wp = store_worst(&mut store, &g, |s| obj(s, &x));
            (if relu { "dense relu" } else { "dense" }, wx.max(wp))
        }
        2 => {
            let (i, h) = (rng.random_range(1..6), rng.random_range(1..6));
            let mut store = ParamStore::new();
            let cell = LstmCell::new(&mut store, "l", i, h, rng);
            let x = rvec(rng, i);
            let (h0, c0) = (rvec(rng, h), rvec(rng, h));
            let (rh, rc) = (rvec(rng, h), rvec(rng, h));
            let obj = |s: &ParamStore, x: &[f64], h0: &[f64], c0: &[f64]| {
                let st = LstmState {
                    hidden: h0.to_vec(),
                    cell: c0.to_vec(),
                };
                let (n, _) = cell.step(s, &st, x).unwrap();
                n.hidden.iter().zip(&rh).map(|(a, b)| a * b).sum::<f64>() + n.cell.iter().zip(&rc).map(|(a, b)| a * b).sum::<f64>()
            };
            let st = LstmState {
                hidden: h0.clone(),
                cell: c0.clone(),
            };
            let (_, cache) = cell.step(&store, &st, &x).unwrap();
            let mut g = store.zero_grads();
            let (dx, dh, dc) = cell.backward(&store, &cache, &rh, &rc, &mut g);
            let w = worst_of(&dx, &numeric_grad(&x, |v| obj(&store, v, &h0, &c0)))
                .max(worst_of(&dh, &numeric_grad(&h0, |v| obj(&store, &x, v, &c0))))
                .max(worst_of(&dc, &numeric_grad(&c0, |v| obj(&store, &x, &h0, v))));
            let wp = store_worst(&mut store, &g, |s| obj(s, &x, &h0, &c0));
            ("lstm", w.max(wp))
        }
        3 => {
            let (count, width) = (rng.random_range(1..6), rng.random_range(1..6));
            let mut store = ParamStore::new();
            let e = Embedding::new(&mut store, "e", count, width, rng);
            let id = rng.random_range(0..count);
            let r = rvec(rng, width);
            let mut g = store.zero_grads();
            e.backward(id, &r, &mut g);
            let w = store_worst(&mut store, &g, |s| e.forward(s, id).unwrap().iter().zip(&r).map(|(a, b)| a * b).sum());
            ("embedding", w)
        }
        4 => {
            let k = rng.random_range(2..10);
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let class = rng.random_range(0..k);
            let (_, g) = softmax_ce(&logits, class).unwrap();
            ("softmax ce", worst_of(&g, &numeric_grad(&logits, |l| softmax_ce(l, class).unwrap().0)))
        }
        5 => {
            let k = rng.random_range(2..10);
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut members: Vec<bool> = (0..k).map(|_| rng.random_bool(0.5)).collect();
            members[rng.random_range(0..k)] = true;
            let (_, g) = subset_ce(&logits, &members);
            ("subset ce", worst_of(&g, &numeric_grad(&logits, |l| subset_ce(l, &members).0)))
        }
        6 => {
            let k = rng.random_range(1..8);
            let (p, t) = (rvec(rng, k), rvec(rng, k));
            let (_, g) = mse(&p, &t);
            ("mse", worst_of(&g, &numeric_grad(&p, |p| mse(p, &t).0)))
        }
        _ => {
            let k = rng.random_range(1..8);
            let x = rvec(rng, k);
            let m = rvec(rng, k);
            let ls: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..0.5)).collect();
            let (dm, dls) = gaussian_logpdf_grad(&x, &m, &ls);
            let w = worst_of(&dm, &numeric_grad(&m, |m| gaussian_logpdf(&x, m, &ls)))
                .max(worst_of(&dls, &numeric_grad(&ls, |l| gaussian_logpdf(&x, &m, l))));
            ("gaussian log-density", w)
        }
    }
}

fn short_demos(seed: u64) -> Vec<Demonstration> {
    let spec = TaskSpec::new(Family::StackingA);
    (0..2)
        .map(|i| {
            let mut d = scripted_expert(&spec, seed * 10 + i).unwrap();
            let keep = 6;
            d.frames.truncate(keep);
            let gt = d.ground_truth.as_mut().unwrap();
            gt.truncate(keep);
            for l in gt.iter_mut() {
                l.waypoint_frame = l.waypoint_frame.min(keep - 1);
            }
            d
        })
        .collect()
}

fn end_to_end_check(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let demos = short_demos(seed);
    let data: Vec<_> = demos
        .iter()
        .enumerate()
        .map(|(i, d)| labeled_demo(i, d, d.ground_truth.as_ref().unwrap()))
        .collect();
    let cfg = PolicyConfig {
        hidden: 12,
        lstm: 6,
        embed: 3,
        g_embed: 5,
        ..PolicyConfig::default()
    };
    let mut stack = PolicyStack::new(4, cfg, seed);
    // zero biases would put ReLU units with zero input on the kink
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
    while checked < 10 {
        let (id, len) = ids[rng.random_range(0..ids.len())];
        let i = rng.random_range(0..len);
        let analytic = grads.get(id)[i];
        let eps = 1e-5;
        let orig = stack.store.value(id)[i];
        let mut scratch = stack.store.zero_grads();
        stack.store.value_mut(id)[i] = orig + eps;
        let up = compute_losses(&stack, &data, &w, &mut scratch).unwrap().total;
        stack.store.value_mut(id)[i] = orig - eps;
        let down = compute_losses(&stack, &data, &w, &mut scratch).unwrap().total;
        stack.store.value_mut(id)[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        if analytic.abs().max(numeric.abs()) < 1e-7 {
            continue;
        }
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
        checked += 1;
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut per_op: HashMap<&'static str, (usize, f64)> = HashMap::new();
    let mut e2e: (usize, f64) = (0, 0.0);
    for config in 0..200u64 {
        let kind = (config % 9) as usize;
        if kind == 8 {
            let w = end_to_end_check(&mut rng, config);
            e2e = (e2e.0 + 1, e2e.1.max(w));
        } else {
            let (name, w) = op_check(kind, &mut rng);
            let e = per_op.entry(name).or_insert((0, 0.0));
            *e = (e.0 + 1, e.1.max(w));
        }
    }
    let op_worst = per_op.values().map(|v| v.1).fold(0.0, f64::max);
    let mut names: Vec<_> = per_op.iter().map(|(k, v)| format!("{k} {:.1e}", v.1)).collect();
    names.sort();
    check(
        op_worst < 1e-4 && e2e.1 < 1e-3,
        format!("per-op worst {op_worst:.2e} [{}]; full loss worst {:.2e} over {} configurations", names.join(", "), e2e.1, e2e.0),
    )
}

// ---------------------------------------------------------------- 3

fn prior_formulas() -> Outcome {
    let mut problems = Vec::new();
    let p = prior_high(Some(2), 4, 0.95);
    let probs: Vec<f64> = p.iter().map(|v| v.exp()).collect();
    if (probs[2] - 0.95).abs() > 1e-15 || (probs[1] - 0.025).abs() > 1e-15 || (probs[3] - 0.025).abs() > 1e-15 || probs[0] != 0.0 {
        problems.push(format!("prior_high(prev=2, n=4) = {probs:?}"));
    }
    let mut worst_norm: f64 = 0.0;
    let norm = |lp: &[f64]| (lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs();
    for n in 3..7 {
        for prev in std::iter::once(None).chain((1..n).map(Some)) {
            worst_norm = worst_norm.max(norm(&prior_high(prev, n, 0.95)));
            for tool in 0..n {
                worst_norm = worst_norm.max(norm(&prior_pair(n, tool, prev, 0.95)));
            }
        }
    }
    let spec = TaskSpec::new(Family::StackingA);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut monotone_violations = 0;
    let mut checks = 0;
    for seed in 0..20 {
        let demo = scripted_expert(&spec, seed).unwrap();
        let h = demo.len();
        for _ in 0..10 {
            let cfg = PolicyConfig {
                alpha: rng.random_range(0.0..200.0),
                beta: rng.random_range(0.05..0.99),
                ..PolicyConfig::default()
            };
            let t = rng.random_range(1..h);
            let (tool, target) = admissible_pairs(4)[rng.random_range(0..admissible_pairs(4).len())];
            let cands: Vec<usize> = (0..h).collect();
            let lp = prior_mid(&demo, t, tool, target, &cands, &cfg);
            worst_norm = worst_norm.max(norm(&lp));
            if lp[..t].iter().any(|v| *v != f64::NEG_INFINITY) {
                problems.push(format!("prior_mid gives mass to k < t (seed {seed}, t {t})"));
            }
            let mut later: Vec<(f64, f64)> = (t + 1..h)
                .map(|k| (demo.rel(k, tool, target).to_vec7().identity_distance(1.0), lp[k]))
                .collect();
            later.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in later.windows(2) {
                checks += 1;
                if w[1].0 > w[0].0 && w[1].1 > w[0].1 + 1e-12 {
                    monotone_violations += 1;
                }
            }
        }
    }
    if worst_norm > 1e-9 {
        problems.push(format!("normalization error {worst_norm:.2e}"));
    }
    if monotone_violations > 0 {
        problems.push(format!("{monotone_violations} monotonicity violations"));
    }
    let detail = format!(
        "prior_high = {:.3}/{:.3}, worst normalization error {worst_norm:.1e}, {checks} monotonicity pairs checked{}",
        probs[2],
        probs[1],
        if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
    );
    check(problems.is_empty(), detail)
}

// ---------------------------------------------------------------- 4

fn mean_agreement(demos: &[Demonstration], labels: &[Vec<SubTaskLabel>]) -> f64 {
    demos
        .iter()
        .zip(labels)
        .map(|(d, l)| {
            let pred: Vec<_> = l.iter().map(|x| x.pair()).collect();
            pair_agreement(&pred, d.ground_truth.as_ref().unwrap(), 2).unwrap()
        })
        .sum::<f64>()
        / demos.len() as f64
}

fn label_recovery() -> Outcome {
    let start = Instant::now();
    let mut per_seed = Vec::new();
    for seed in 0..3 {
        let mut cfg = desk_config();
        cfg.seed = seed;
        cfg.task.max_len = 60;
        let demos = generate_demos(&cfg).map_err(|e| e.to_string())?;
        let res = em_loop(&demos, &cfg.em_config(), None).map_err(|e| e.to_string())?;
        per_seed.push(mean_agreement(&demos, &res.labels));
    }
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let shown: Vec<String> = per_seed.iter().map(|a| format!("{a:.3}")).collect();
    check(
        mean >= 0.9 && minutes < 30.0,
        format!("mean pair agreement {mean:.3} (seeds: {}), {minutes:.1} min", shown.join(", ")),
    )
}

// ---------------------------------------------------------------- 5

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = desk_config();
    cfg.paths.out = Some(dir.path().to_path_buf());
    let out = cmd_pipeline(&cfg).map_err(|e| e.to_string())?;
    let curve: Vec<String> = out
        .curve
        .iter()
        .map(|p| format!("{}:{:.2}±{:.2}", p.demo_count, p.mean_success, p.std))
        .collect();
    let monotone = out
        .curve
        .windows(2)
        .all(|w| w[1].mean_success + w[0].std.max(w[1].std) >= w[0].mean_success);
    let ok = out.report.mean_success >= 0.8 && monotone && out.curve.len() == 4;
    check(
        ok,
        format!(
            "success {:.3} ± {:.3} over {} seeds x {} episodes; sweep {}",
            out.report.mean_success,
            out.report.std_success,
            cfg.eval.seeds,
            cfg.eval.episodes,
            curve.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 6

fn demo_of(spec: &TaskSpec, worlds: Vec<Vec<Pose>>) -> Demonstration {
    let frames = worlds.iter().enumerate().map(|(t, w)| Observation::from_world(t as f64 * 0.1, w)).collect();
    Demonstration::new(spec.family.name(), spec.object_labels(), frames)
}

/// Brush dips at `dip` from the bucket center, then paints a straight
/// stroke of length `stroke` at `height` above the canvas.
fn painting_fixture(spec: &TaskSpec, dip: f64, height: f64, stroke: f64) -> Demonstration {
    let bucket = Pose::from_translation(0.3, 0.2, 0.0);
    let canvas = Pose::from_translation(0.4, -0.1, 0.0);
    let mut worlds = Vec::new();
    let brush = bucket.compose(&Pose::from_translation(dip, 0.0, 0.0));
    worlds.push(vec![brush, brush, bucket, canvas]);
    let steps = 20;
    for i in 0..=steps {
        let x = -stroke / 2.0 + stroke * i as f64 / steps as f64;
        let b = canvas.compose(&Pose::from_translation(x, 0.0, height));
        worlds.push(vec![b, b, bucket, canvas]);
    }
    demo_of(spec, worlds)
}

/// Wrench at `offset` from each bolt turning the effector by `deg`, then at
/// `hub` from the wheel center.
fn tire_fixture(spec: &TaskSpec, offset: f64, deg: f64, hub: f64) -> Demonstration {
    let wheel = Pose::from_translation(0.5, 0.0, 0.0);
    let bolts: Vec<Pose> = (0..4)
        .map(|i| {
            let a = i as f64 * std::f64::consts::FRAC_PI_2;
            wheel.compose(&Pose::from_translation(0.05 * a.cos(), 0.05 * a.sin(), 0.0))
        })
        .collect();
    let world = |eff: Pose, wrench: Pose| {
        let mut w = vec![eff, wrench, wheel];
        w.extend(bolts.iter().copied());
        w
    };
    let mut worlds = Vec::new();
    let steps = 10;
    for bolt in &bolts {
        let at = bolt.compose(&Pose::from_translation(offset, 0.0, 0.0));
        for i in 0..=steps {
            let yaw = (deg * i as f64 / steps as f64).to_radians();
            worlds.push(world(Pose::from_xyz_yaw(at.position(), yaw), at));
        }
    }
    let end = wheel.compose(&Pose::from_translation(hub, 0.0, 0.0));
    worlds.push(world(end, end));
    demo_of(spec, worlds)
}

/// Final frame with every block at its slot, the first pushed `offset`
/// sideways.
fn stacking_fixture(spec: &TaskSpec, offset: f64) -> Demonstration {
    let Goal::Stack { base, slots } = &spec.goal else { unreachable!() };
    let mut world = spec.initial_state(0).poses;
    for (i, (b, slot)) in slots.iter().enumerate() {
        let shift = if i == 0 { offset } else { 0.0 };
        world[*b] = world[*base].compose(&Pose::from_translation(0.0, shift, 0.0)).compose(slot);
    }
    demo_of(spec, vec![world])
}

fn success_checkers() -> Outcome {
    let mut failures = Vec::new();
    let mut cases = 0;
    let mut expect = |name: &str, spec: &TaskSpec, demo: Demonstration, want: bool| {
        cases += 1;
        let r = check_success(spec, &demo);
        if r.success != want {
            failures.push(format!("{name}: expected {want}, got {} ({})", r.success, r.summary()));
        }
    };
    let paint = TaskSpec::new(Family::Painting);
    let t = paint.tolerances.clone();
    expect("painting compliant", &paint, painting_fixture(&paint, 0.9 * t.bucket_radius, t.plane_height, 1.1 * t.line_length), true);
    expect("bucket +10%", &paint, painting_fixture(&paint, 1.1 * t.bucket_radius, t.plane_height, 1.1 * t.line_length), false);
    expect("plane +10%", &paint, painting_fixture(&paint, 0.9 * t.bucket_radius, 1.1 * t.plane_height, 1.1 * t.line_length), false);
    expect("plane -10%", &paint, painting_fixture(&paint, 0.9 * t.bucket_radius, 0.9 * t.plane_height, 1.1 * t.line_length), false);
    expect("line -10%", &paint, painting_fixture(&paint, 0.9 * t.bucket_radius, t.plane_height, 0.9 * t.line_length), false);

    let tire = TaskSpec::new(Family::Tire);
    let t = tire.tolerances.clone();
    let (r, deg) = (t.bolt_radius, t.bolt_rotation_deg);
    expect("tire compliant", &tire, tire_fixture(&tire, 0.9 * r, 1.1 * deg, 0.9 * r), true);
    expect("bolt offset +10%", &tire, tire_fixture(&tire, 1.1 * r, 1.1 * deg, 0.9 * r), false);
    expect("rotation -10%", &tire, tire_fixture(&tire, 0.9 * r, 0.9 * deg, 0.9 * r), false);
    expect("hub offset +10%", &tire, tire_fixture(&tire, 0.9 * r, 1.1 * deg, 1.1 * r), false);

    for family in [Family::StackingA, Family::StackingB] {
        let spec = TaskSpec::new(family);
        let tol = spec.tolerances.stack_tolerance;
        expect("stacking -10%", &spec, stacking_fixture(&spec, 0.9 * tol), true);
        expect("stacking +10%", &spec, stacking_fixture(&spec, 1.1 * tol), false);
    }
    check(
        failures.is_empty(),
        format!("{cases} fixtures{}", if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }),
    )
}

// ---------------------------------------------------------------- 7

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("run");
    let mut cfg = toy_config();
    cfg.paths.out = Some(out.clone());
    let first = cmd_pipeline(&cfg).map_err(|e| e.to_string())?.manifest;
    std::fs::remove_dir_all(&out).map_err(|e| e.to_string())?;
    let second = cmd_pipeline(&cfg).map_err(|e| e.to_string())?.manifest;
    let files = first.lines().filter(|l| l.starts_with("file ")).count();
    check(first == second, format!("{files} hashed files, manifests identical: {}", first == second))
}

// ---------------------------------------------------------------- 8

fn loss_identities() -> Outcome {
    let spec = TaskSpec::new(Family::StackingA);
    let demos: Vec<_> = (0..6).map(|s| scripted_expert(&spec, s).unwrap()).collect();
    let data: Vec<_> = demos
        .iter()
        .enumerate()
        .map(|(i, d)| labeled_demo(i, d, d.ground_truth.as_ref().unwrap()))
        .collect();
    let mut stack = PolicyStack::new(4, PolicyConfig::default(), 8);
    let cfg = TrainConfig {
        iterations: 40,
        batch_frames: 128,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let mut log = Vec::new();
    let reports = train_policies(&mut stack, &data, &cfg, 8, Some(&mut log)).map_err(|e| e.to_string())?;
    let sum_gap = reports.iter().map(|r| (r.total - r.term_sum()).abs()).fold(0.0, f64::max);
    let logged = String::from_utf8_lossy(&log).lines().count();

    // every frame starts a new tuple
    let d = &demos[0];
    let changing: Vec<SubTaskLabel> = (0..d.len()).map(|t| SubTaskLabel::new(0, 1 + t % 3, t)).collect();
    let mut g = stack.store.zero_grads();
    let mem = compute_losses(&stack, &[labeled_demo(0, d, &changing)], &LossWeights::default(), &mut g)
        .map_err(|e| e.to_string())?
        .mem;

    // a high level that puts all its mass on the labeled pair
    let constant = vec![SubTaskLabel::new(0, 2, d.len() - 1); d.len()];
    let mut sharp = PolicyStack::new(4, PolicyConfig::default(), 9);
    let last = sharp.high.layers.last().unwrap().clone();
    last.zero(&mut sharp.store);
    sharp.store.value_mut(last.b)[pair_index(4, 0, 2)] = 1e4;
    let mut g = sharp.store.zero_grads();
    let perfect = compute_losses(&sharp, &[labeled_demo(0, d, &constant)], &LossWeights::default(), &mut g).map_err(|e| e.to_string())?;

    check(
        sum_gap < 1e-9 && logged == reports.len() && mem == 0.0 && perfect.o_plus == 0.0 && perfect.o_star == 0.0,
        format!(
            "max |L - sum of terms| {sum_gap:.1e} over {} logged batches; L_mem on changing labels {mem}; CE under perfect logits {} / {}",
            logged, perfect.o_plus, perfect.o_star
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "viterbi exactness", viterbi_exactness),
        (2, "gradient correctness", gradient_correctness),
        (3, "prior formulas", prior_formulas),
        (4, "label recovery", label_recovery),
        (5, "end-to-end reproduction", end_to_end),
        (6, "success checkers", success_checkers),
        (7, "determinism", determinism),
        (8, "loss identities", loss_identities),
    ];
    let only: Option<Vec<usize>> = std::env::var("HILEARN_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id} {name}: PASS ({d}) [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {id} {name}: FAIL ({d}) [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
