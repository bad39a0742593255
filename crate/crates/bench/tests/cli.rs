use std::path::Path;
use std::process::{Command, Output};

fn bench(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_bench")).args(args).envs(envs.iter().copied()).output().unwrap();
    assert!(out.status.success(), "bench {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("sweep.cfg");
    std::fs::write(
        &path,
        "grid = 4x4\nchannels = 8\nd_ff = 16\nlayers = 1\nframes = 1\nratio = 0, 0.5\n\
         repetitions = 3\nmin_time_ms = 0\nconfidence = teacher\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn sweep_writes_records_dumps_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    let dumps = dir.path().join("dumps");
    bench(
        &[
            "sweep",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--dump-activations",
            dumps.to_str().unwrap(),
            "--save-weights",
        ],
        &[],
    );
    let csv = std::fs::read_to_string(out.join("records.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("records.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
    for i in 0..2 {
        for ext in ["bin", "layout", "mask"] {
            assert!(dumps.join(format!("point_{i}.{ext}")).exists());
        }
    }
    assert!(out.join("weights").join("layer_0.bin").exists());
}

#[test]
fn seed_environment_changes_the_workload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = |seed: &str| {
        let out = bench(
            &["tradeoff", "--config", &cfg, "--ratios", "0.5", "--strategies", "confidence"],
            &[("COME_SEED", seed)],
        );
        let text = String::from_utf8(out.stdout).unwrap();
        let row: Vec<String> = text.lines().nth(1).unwrap().split(',').map(String::from).collect();
        row[15].clone()
    };
    assert_eq!(run("1"), run("1"));
    assert_ne!(run("1"), run("2"));
}

#[test]
fn breakdown_json() {
    let out = bench(&["breakdown", "--tokens", "256", "--grid", "8x8", "--repetitions", "1", "--json"], &[]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["tokens"], 256);
    assert_eq!(v["merged_tokens"], 256 - 32 * 3);
}

#[test]
fn train_writes_trace_and_params() {
    let dir = tempfile::tempdir().unwrap();
    bench(
        &[
            "train",
            "--grid",
            "4x4",
            "--channels",
            "4",
            "--latent",
            "4",
            "--steps",
            "5",
            "--out",
            dir.path().to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(std::fs::read_to_string(dir.path().join("trace.csv")).unwrap().lines().count(), 7);
    let mut f = std::fs::File::open(dir.path().join("predictor.bin")).unwrap();
    let p = come_core::predictor::PredictorParams::read(&mut f).unwrap();
    assert_eq!((p.channels(), p.latent()), (4, 4));
}

#[test]
fn chamfer_prints_a_record() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.xyz");
    let gt = dir.path().join("gt.xyz");
    std::fs::write(&pred, "# predicted\n0 0 0\n1 0 0\n").unwrap();
    std::fs::write(&gt, "0 0 0\n3 0 0\n").unwrap();
    let out = bench(&["chamfer", "--pred", pred.to_str().unwrap(), "--gt", gt.to_str().unwrap()], &[]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["metric"], "chamfer");
    assert_eq!(v["completeness"], 1.0);
    assert_eq!(v["accuracy"], 0.5);
}

#[test]
fn bad_arguments_fail() {
    let status =
        Command::new(env!("CARGO_BIN_EXE_bench")).args(["tradeoff", "--strategies", "best"]).output().unwrap().status;
    assert!(!status.success());
}
