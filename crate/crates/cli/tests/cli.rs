use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dpfb(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpfb"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const SYNTH: &str = "preset = \"small\"\n\n[synth]\nlength = 1000\n";

const RUN: &str = "\
[model]
n_x = 3
n_y = 2
n_h = 8
z_encoder_hidden = [8]
z_feature_width = 4
prior_hidden = [8]
decoder_hidden = [8]
x_encoder_hidden = [4]
x_feature_width = 3
potential_hidden = [8, 8]

[train]
window_length = 50
particles = 4
batch_size = 4
lr = 0.001
epochs = 3
seed = 5
checkpoint_every = 2
";

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("synth.toml"), SYNTH).unwrap();
    fs::write(d.join("run.toml"), RUN).unwrap();

    let out = dpfb(&["synth", "--config", "synth.toml", "--out", "d.csv", "--seed", "3"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let data = fs::read_to_string(d.join("d.csv")).unwrap();
    assert_eq!(data.lines().count(), 1001);
    let schema = fs::read_to_string(d.join("d.schema")).unwrap();
    assert!(schema.contains("= data") && schema.contains("= label"));

    let out = dpfb(
        &["train", "--data", "d.csv", "--schema", "d.schema", "--config", "run.toml", "--out", "m.json", "--log", "loss.csv"],
        d,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(d.join("loss.csv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "epoch,loss_theta,loss_phi,lr,seconds");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("1,"));
    assert!(d.join("m.epoch2.json").exists());
    let ckpt: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(ckpt["version"], 1);
    assert_eq!(ckpt["seed"], 5);
    assert_eq!(ckpt["config"]["train"]["epochs"], 3);
    assert!(ckpt["tensors"][0]["name"].as_str().unwrap().starts_with("theta/"));

    let out = dpfb(&["eval", "--ckpt", "m.json", "--data", "d.csv", "--schema", "d.schema", "--report", "r.csv"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(d.join("r.csv")).unwrap();
    assert!(report.contains("# seed = 5"));
    assert!(report.contains("kind,name,subset,steps,mse,nrmse,r_squared"));
    let preds = fs::read_to_string(d.join("r.predictions.csv")).unwrap();
    let header = preds.lines().next().unwrap();
    assert_eq!(header, "step,domain,y_true_1,y_true_2,y_pred_1,y_pred_2");
    assert_eq!(preds.lines().count(), 1001);
}

#[test]
fn validation_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("synth.toml"), SYNTH).unwrap();
    fs::write(d.join("bad.toml"), "[train]\nepochz = 3\n").unwrap();
    fs::write(d.join("bad_synth.toml"), "preset = \"small\"\ncolour = 1\n").unwrap();

    assert_eq!(code(&dpfb(&["synth", "--config", "synth.toml", "--out", "d.csv"], d)), 1);
    assert_eq!(code(&dpfb(&["synth", "--config", "bad_synth.toml", "--out", "d.csv", "--seed", "1"], d)), 1);
    assert_eq!(code(&dpfb(&["synth", "--config", "synth.toml", "--out", "d.csv", "--seed", "1"], d)), 0);
    let train = |cfg: &str| {
        code(&dpfb(
            &["train", "--data", "d.csv", "--schema", "d.schema", "--config", cfg, "--out", "m.json", "--log", "l.csv"],
            d,
        ))
    };
    assert_eq!(train("bad.toml"), 1);
    assert_eq!(train("missing.toml"), 1);
    assert_eq!(code(&dpfb(&["flow-demo", "--case", "gaussian3d"], d)), 1);
    assert_eq!(code(&dpfb(&["frobnicate"], d)), 1);
    assert_eq!(code(&dpfb(&["--help"], d)), 0);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpfb(&["gradcheck", "--seed", "2"], dir.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{text}");
    assert!(text.lines().count() >= 8);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}
