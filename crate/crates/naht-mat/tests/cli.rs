//! End-to-end checks of the command-line surface: exit codes, artifact
//! layout, and the plot pipeline over real run directories.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_naht-mat"))
}

fn quick_config(out_dir: &Path) -> String {
    format!(
        r#"
[env]
task = "signal"
num_agents = 3
num_types = 5
horizon = 4
gamma = 0.99

[model]
k = 2
d_model = 8
n_heads = 2
n_layers_enc = 1
n_layers_dec = 1
baseline_hidden = 16

[ppo]
gamma = 0.99
gae_lambda = 0.95
clip = 0.2
epochs = 1
minibatch_episodes = 4
value_coef = 0.25
entropy_coef = 0.02
max_grad_norm = 0.5
rollout_episodes = 4
total_env_steps = 32
lr = 0.0005

[pools]
num_families = 5
train_per_family = 1
test_per_family = 1
seed = 3
eps_max = 0.03
permute_tiebreak = false

[eval]
eval_every = 1
eval_episodes = 4
final_episodes_per_instance = 1

[run]
seeds = [0]
variant = "mat_naht"
output_dir = "{}"
trajectory_dump = true
"#,
        out_dir.display()
    )
}

#[test]
fn train_writes_replayable_artifacts() {
    let dir = tempfile::TempDir::new().unwrap();
    let out = dir.path().join("run");
    let config_path = dir.path().join("config.toml");
    std::fs::write(&config_path, quick_config(&out)).unwrap();

    let status = bin()
        .args(["train", "--config"])
        .arg(&config_path)
        .status()
        .unwrap();
    assert!(status.success());

    // The config copy is verbatim.
    let copied = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert_eq!(copied, quick_config(&out));

    let seed_dir = out.join("mat_naht").join("seed_0");
    for artifact in ["metrics.jsonl", "best.ckpt", "final.ckpt", "eval_test.json"] {
        assert!(seed_dir.join(artifact).exists(), "{artifact} missing");
    }
    assert!(out.join("mat_naht").join("pools.json").exists());

    // Trajectory dump: per-step JSON lines with the documented fields.
    let dump = std::fs::read_to_string(seed_dir.join("trajectories.jsonl")).unwrap();
    assert!(!dump.trim().is_empty());
    for line in dump.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["t", "state", "observations", "actions", "reward"] {
            assert!(v.get(key).is_some(), "dump line lacks {key}");
        }
    }

    // Evaluating the produced checkpoint succeeds and reports all families.
    let output = bin()
        .args(["eval", "--config"])
        .arg(&config_path)
        .arg("--ckpt")
        .arg(seed_dir.join("final.ckpt"))
        .args(["--pool", "test", "--episodes", "1", "--seed", "0"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(report["per_family"].as_object().unwrap().len(), 5);

    // Plot pipeline over the finished run directory.
    let csv = dir.path().join("plot.csv");
    let status = bin()
        .args(["plot", "--runs"])
        .arg(out.join("mat_naht"))
        .arg("--out")
        .arg(&csv)
        .status()
        .unwrap();
    assert!(status.success());
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("env_steps,"));
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::TempDir::new().unwrap();
    let config_path = dir.path().join("bad.toml");
    std::fs::write(&config_path, "[env]\ntask = \"signal\"\n").unwrap();
    let output = bin()
        .args(["train", "--config"])
        .arg(&config_path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::TempDir::new().unwrap();
    let out = dir.path().join("run");
    let config_path = dir.path().join("config.toml");
    std::fs::write(&config_path, quick_config(&out)).unwrap();
    let output = bin()
        .args(["eval", "--config"])
        .arg(&config_path)
        .arg("--ckpt")
        .arg(dir.path().join("missing.ckpt"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn describe_prints_layer_table() {
    let dir = tempfile::TempDir::new().unwrap();
    let out = dir.path().join("run");
    let config_path = dir.path().join("config.toml");
    std::fs::write(&config_path, quick_config(&out)).unwrap();
    let output = bin()
        .args(["describe", "--config"])
        .arg(&config_path)
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("task: signal"));
    assert!(text.contains("enc.l0.attn.q.w"));
    assert!(text.contains("total parameters"));

    // The baseline variant describes its MLP instead.
    let output = bin()
        .args(["describe", "--config"])
        .arg(&config_path)
        .args(["--variant", "independent_baseline"])
        .output()
        .unwrap();
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("independent PPO baseline"));
}

#[test]
fn ablate_produces_three_variants_with_shared_pools() {
    let dir = tempfile::TempDir::new().unwrap();
    let out = dir.path().join("ablate");
    let config_path = dir.path().join("config.toml");
    std::fs::write(&config_path, quick_config(&out)).unwrap();
    let status = bin()
        .args(["ablate", "--config"])
        .arg(&config_path)
        .status()
        .unwrap();
    assert!(status.success());

    let pools: Vec<Vec<u8>> = ["mat_naht", "mat_naht_no_history", "independent_baseline"]
        .iter()
        .map(|v| std::fs::read(out.join(v).join("pools.json")).unwrap())
        .collect();
    assert_eq!(pools[0], pools[1]);
    assert_eq!(pools[1], pools[2]);
    assert!(out.join("plot_data.csv").exists());
    assert!(out.join("ablation_summary.json").exists());
}
