//! Trains a policy stack on ground-truth labels of scripted stacking
//! demonstrations and rolls it out in the simulator.
//!
//! Short by default; pass an iteration count for a stronger policy, e.g.
//! `cargo run --release --example train_and_rollout -- 2000`.

use hilearn::eval::{evaluate, RolloutConfig};
use hilearn::policies::{init_low_level, InitConfig, PolicyConfig, PolicyStack};
use hilearn::simworld::{scripted_expert, Family, TaskSpec};
use hilearn::training::{labeled_demo, train_policies, TrainConfig};

fn main() {
    let iterations: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let spec = TaskSpec::new(Family::StackingA);
    let demos: Vec<_> = (0..20).map(|s| scripted_expert(&spec, s).unwrap()).collect();
    let mut stack = PolicyStack::new(spec.n, PolicyConfig::default(), 0);
    let nll = init_low_level(&mut stack, &demos, &InitConfig { iterations: 500, ..InitConfig::default() }).unwrap();
    println!("low-level init nll {:.3} -> {:.3}", nll[0], nll.last().unwrap());

    let data: Vec<_> = demos
        .iter()
        .enumerate()
        .map(|(i, d)| labeled_demo(i, d, d.ground_truth.as_ref().unwrap()))
        .collect();
    let cfg = TrainConfig {
        iterations,
        batch_frames: 512,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let reports = train_policies(&mut stack, &data, &cfg, 1, None).unwrap();
    for (i, r) in reports.iter().enumerate().step_by((iterations / 5).max(1)) {
        println!(
            "iter {i:>5}: total {:>9.3} (o+ {:.3} o* {:.3} w {:.3} action {:.3} mem {:.3} ret {:.3})",
            r.total, r.o_plus, r.o_star, r.w, r.action, r.mem, r.ret
        );
    }
    let report = evaluate(&stack, &spec, 10, &[0], &RolloutConfig::default()).unwrap();
    for e in &report.seeds[0].episodes {
        println!("layout {}: {} after {} steps", e.layout_seed, e.reason.name(), e.steps);
    }
    println!("success rate {:.2}", report.mean_success);
}
