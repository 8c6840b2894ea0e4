//! Scripted demonstrations for every task family, checked against the
//! success criteria and written to the text format.

use hilearn::simworld::{check_success, scripted_expert, Family, TaskSpec};
use hilearn::trajectory::{load_demos, save_demos};

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    for family in Family::ALL {
        let spec = TaskSpec::new(family);
        let demos: Vec<_> = (0..3).map(|seed| scripted_expert(&spec, seed).unwrap()).collect();
        for (seed, d) in demos.iter().enumerate() {
            let gt = d.ground_truth.as_ref().unwrap();
            let switches = gt.windows(2).filter(|w| w[0].pair() != w[1].pair()).count();
            println!(
                "{:<10} seed {seed}: {:>3} frames, {} sub-task switches, checker: {}",
                family.name(),
                d.len(),
                switches,
                check_success(&spec, d).summary()
            );
        }
        let files = save_demos(dir.path().join(family.name()).as_path(), family.name(), &demos).unwrap();
        let loaded = load_demos(&dir.path().join(family.name())).unwrap();
        println!("  wrote {} files, reloaded {} demonstrations", files.len(), loaded.len());
    }
}
