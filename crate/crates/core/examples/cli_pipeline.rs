//! The `pipeline` command driven from a TOML config at toy scale: scripted
//! demonstrations, EM labeling, evaluation and the hashed manifest.

use hilearn::cli::cmd_pipeline;
use hilearn::config::RunConfig;

const CONFIG: &str = r#"
seed = 3
[task]
family = "stacking_a"
demos = 4
max_len = 30
[init]
iterations = 100
[train]
iterations = 20
batch_frames = 64
lr = 1e-3
[em]
max_outer = 1
prior_low = "straight_line"
[eval]
episodes = 2
seeds = 1
step_cap = 50
"#;

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut cfg = RunConfig::from_toml(CONFIG).unwrap();
    cfg.paths.out = Some(dir.path().to_path_buf());
    let out = cmd_pipeline(&cfg).unwrap();
    println!("{}", out.report.to_text());
    println!("manifest:\n{}", out.manifest);
}
