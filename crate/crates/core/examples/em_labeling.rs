//! The full unsupervised loop on unlabeled demonstrations: prior labeling,
//! training, relabeling with the learned stack until the labels settle.
//! Ground truth is used only to report agreement.

use hilearn::policies::InitConfig;
use hilearn::simworld::{scripted_expert, Family, TaskSpec};
use hilearn::training::{em_loop, EmConfig, PriorLow, TrainConfig};
use hilearn::trajectory::{downsample, pair_agreement};

fn main() {
    let iterations: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let spec = TaskSpec::new(Family::StackingA);
    let demos: Vec<_> = (0..10)
        .map(|s| {
            let d = scripted_expert(&spec, s).unwrap();
            if d.len() > 60 { downsample(&d, 60).unwrap() } else { d }
        })
        .collect();
    let cfg = EmConfig {
        init: InitConfig { iterations: 500, ..InitConfig::default() },
        train: TrainConfig {
            iterations,
            batch_frames: 512,
            lr: 1e-3,
            ..TrainConfig::default()
        },
        prior_low: PriorLow::StraightLine,
        max_outer: 2,
        ..EmConfig::default()
    };
    let mut log = Vec::new();
    let res = em_loop(&demos, &cfg, Some(&mut log)).unwrap();
    for it in &res.iterations {
        println!(
            "outer {}: {:.3} of labels changed ({:.3} of pairs)",
            it.outer, it.change_fraction, it.pair_change_fraction
        );
    }
    let mean = demos
        .iter()
        .zip(&res.labels)
        .map(|(d, l)| {
            let pred: Vec<_> = l.iter().map(|x| x.pair()).collect();
            pair_agreement(&pred, d.ground_truth.as_ref().unwrap(), 2).unwrap()
        })
        .sum::<f64>()
        / demos.len() as f64;
    println!("pair agreement with the scripted labels: {mean:.3}");
    println!("{} training log lines", String::from_utf8_lossy(&log).lines().count());
}
