//! Labels a scripted stacking demonstration with the prior scorers and
//! compares the recovered (tool, target) sequence with the ground truth.

use hilearn::inference::{viterbi_label, InferenceConfig, SearchMode};
use hilearn::policies::PolicyStack;
use hilearn::simworld::{scripted_expert, Family, TaskSpec};
use hilearn::training::{prior_scorers, EmConfig, PriorLow};
use hilearn::trajectory::{downsample, pair_agreement};

fn main() {
    let spec = TaskSpec::new(Family::StackingA);
    let demos: Vec<_> = (0..4).map(|s| downsample(&scripted_expert(&spec, s).unwrap(), 40).unwrap()).collect();
    let cfg = EmConfig {
        prior_low: PriorLow::StraightLine,
        ..EmConfig::default()
    };
    let stack = PolicyStack::new(spec.n, cfg.policy.clone(), 0);
    let scorers = prior_scorers(&stack, &demos, &cfg);
    for (mode, name) in [(SearchMode::Exact, "exact"), (SearchMode::Beam(32), "beam 32")] {
        let ic = InferenceConfig { mode, stride: 1 };
        for (i, d) in demos.iter().enumerate() {
            let l = viterbi_label(d, &scorers, &ic).unwrap();
            let pred: Vec<_> = l.labels.iter().map(|x| x.pair()).collect();
            let acc = pair_agreement(&pred, d.ground_truth.as_ref().unwrap(), 2).unwrap();
            println!("{name:>8} demo {i}: log score {:>10.3}, pair agreement {:.3}", l.log_score, acc);
        }
    }
    let first = viterbi_label(&demos[0], &scorers, &InferenceConfig::default()).unwrap();
    let seq: Vec<String> = first.labels.iter().map(|l| format!("{}{}@{}", l.tool, l.target, l.waypoint_frame)).collect();
    println!("demo 0 labels: {}", seq.join(" "));
}
