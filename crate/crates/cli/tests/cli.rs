use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use trajcons_core::checkpoint;
use trajcons_core::data::{load_tracks, window_observations, TrackFormat};
use trajcons_core::evaluation::predict;
use trajcons_core::kinematics::KinematicTriple;
use trajcons_core::records::parse_predictions;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajcons"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &str = r#"
learning_rate = 1e-3
epochs = 2
batch_size = 4
seed = 3
output_dir = "run"

[model]
d_model = 16
n_heads = 2
ff_width = 32
k = 4
dropout = 0.0

[data]
manifest = "data/manifest.toml"
split = { protocol = "leave_one_out", held_out = "stop" }
"#;

/// Synthetic data plus a tiny config in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["synth", "--kind", "turn,stop", "--count", "4", "--agents", "2", "--output-dir", "data"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    fs::write(dir.path().join("cfg.toml"), TINY).unwrap();
    dir
}

#[test]
fn train_eval_predict_plot_pipeline() {
    let ws = workspace();
    let d = ws.path();
    let out = run(d, &["train", "--config", "cfg.toml", "--epochs", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["best.safetensors", "train_log.jsonl", "config.toml"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(d.join("run/config.toml")).unwrap().contains("epochs = 1"));

    let out = run(d, &["eval", "--checkpoint", "run/best.safetensors", "--config", "cfg.toml", "--k", "4"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/eval.json")).unwrap()).unwrap();
    assert!(eval["ade"].as_f64().unwrap().is_finite());
    assert_eq!(eval["k"], 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("stop"));

    let out = run(
        d,
        &["predict", "--checkpoint", "run/best.safetensors", "--input", "data/stop.txt", "--output", "preds.txt"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let out = run(
        d,
        &["plot", "--input", "preds.txt", "--tracks", "data/stop.txt", "--color", "speed", "--output", "fan.svg"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let svg = fs::read_to_string(d.join("fan.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("observed") && svg.contains("actual"));

    let out = run(d, &["plot", "--input", "run/train_log.jsonl", "--output", "loss.svg"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(fs::read_to_string(d.join("loss.svg")).unwrap().contains("cons2"));
}

#[test]
fn predictions_round_trip_through_the_record_file() {
    let ws = workspace();
    let d = ws.path();
    assert_eq!(code(&run(d, &["train", "--config", "cfg.toml", "--max_steps", "1"])), 0);
    let out = run(
        d,
        &["predict", "--checkpoint", "run/best.safetensors", "--input", "data/turn.txt", "--output", "p.txt", "--stride", "3"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let model = checkpoint::load(&d.join("run/best.safetensors")).unwrap();
    let tracks = load_tracks(&d.join("data/turn.txt"), TrackFormat::EthucyTxt).unwrap();
    let windows = window_observations(&tracks, "turn", model.config.t_obs, 3).unwrap();
    let observed: Vec<&[KinematicTriple]> = windows.iter().map(|w| w.observed.as_slice()).collect();
    let direct = predict(&model, &observed).unwrap();

    let text = fs::read_to_string(d.join("p.txt")).unwrap();
    let records = parse_predictions(&text, "p.txt").unwrap();
    let expected: usize = direct.iter().map(|c| c.agents * c.k * c.steps).sum();
    assert_eq!(records.len(), expected);
    for r in &records {
        let w = &windows[r.window_id];
        let agent = w.agent_ids.iter().position(|&a| a == r.agent_id).unwrap();
        let p = direct[r.window_id].point(agent, r.candidate_id, r.step);
        assert!((p.x - r.x).abs() <= 1e-6 && (p.y - r.y).abs() <= 1e-6, "{r:?} vs {p:?}");
    }
}

#[test]
fn training_is_reproducible() {
    let ws = workspace();
    let d = ws.path();
    for out_dir in ["a", "b"] {
        let out = run(d, &["train", "--config", "cfg.toml", "--output_dir", out_dir]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert_eq!(
        fs::read(d.join("a/best.safetensors")).unwrap(),
        fs::read(d.join("b/best.safetensors")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("a/train_log.jsonl")).unwrap(),
        fs::read(d.join("b/train_log.jsonl")).unwrap()
    );
}

#[test]
fn usage_errors_exit_with_1() {
    let ws = workspace();
    let d = ws.path();
    assert_eq!(code(&run(d, &["frobnicate"])), 1);
    assert_eq!(code(&run(d, &["train", "--config", "cfg.toml", "--epochs"])), 1);
    let out = run(d, &["train", "--config", "cfg.toml", "--no_such_key", "1"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert_eq!(code(&run(d, &["synth", "--kind", "zigzag", "--output-dir", "x"])), 1);
    assert_eq!(code(&run(d, &["plot", "--input", "cfg.toml", "--output", "x.png"])), 1);

    assert_eq!(code(&run(d, &["train", "--config", "cfg.toml", "--max_steps", "1"])), 0);
    let out = run(d, &["eval", "--checkpoint", "run/best.safetensors", "--config", "cfg.toml", "--t-pred", "20"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("horizon"), "{}", stderr(&out));
}

#[test]
fn data_errors_exit_with_2_and_name_the_line() {
    let ws = workspace();
    let d = ws.path();
    fs::write(d.join("bad.txt"), "0 1 1.0 2.0\n10 1 oops 2.0\n").unwrap();
    assert_eq!(code(&run(d, &["train", "--config", "cfg.toml", "--max_steps", "1"])), 0);
    let out = run(d, &["predict", "--checkpoint", "run/best.safetensors", "--input", "bad.txt", "--output", "p.txt"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad.txt:2:"), "{}", stderr(&out));

    let out = run(d, &["plot", "--input", "data/turn.txt", "--output", "x.svg"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("unknown record schema"));

    let out = run(d, &["eval", "--checkpoint", "missing.safetensors", "--config", "cfg.toml"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn numerical_abort_exits_with_3() {
    let ws = workspace();
    let out = run(ws.path(), &["train", "--config", "cfg.toml", "--learning_rate", "1e300"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"), "{}", stderr(&out));
}
