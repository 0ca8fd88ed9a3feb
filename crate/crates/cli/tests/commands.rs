use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
families = ["ellipsoid", "winged-body"]
instances_per_family = 3
views_per_instance = 2
partial_points = 48
complete_points = 64
dense_points = 128
diffusion_steps = 10
coarse_points = 48
latent_dim = 8
time_dim = 4
encoder_point_widths = [8]
encoder_head_widths = []
denoiser_widths = [8]
dcg_iterations = 3
dcg_batch_size = 2
num_points = 64
patch_size = 8
top_k = 8
edge_k = 4
descriptor_widths = [8, 8]
angle_shared_widths = [8]
angle_head_widths = []
head_widths = [8]
cref_epochs = 1
cref_batch_size = 2
log_every = 1
"#;

fn setup(dir: &Path) -> std::path::PathBuf {
    let text = format!(
        "dataset_dir = {:?}\ncheckpoint_dir = {:?}\noutput_dir = {:?}\n{TINY}",
        dir.join("data"),
        dir.join("ckpt"),
        dir.join("run").join("nested")
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn pcc(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pccforge"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let run = dir.path().join("run").join("nested");

    let out = ok(&pcc(&cfg, &["dataset"]));
    assert!(out.contains("wrote 12 records"), "{out}");
    let manifest = fs::read_to_string(dir.path().join("data/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 12);
    assert!(run.join("config.toml").exists());

    // Refiner before generator: actionable runtime error.
    let out = pcc(&cfg, &["train-cref"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-dcg"));

    ok(&pcc(&cfg, &["train-dcg"]));
    let out = ok(&pcc(&cfg, &["train-dcg", "--resume"]));
    assert!(out.contains("steps 3..6"), "{out}");
    let trace = fs::read_to_string(run.join("dcg_loss.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 6);

    ok(&pcc(&cfg, &["train-cref"]));
    assert!(dir.path().join("ckpt/cref.ckpt").exists());

    let partial = fs::read_dir(dir.path().join("data/clouds"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with(".partial.xyz"))
        .unwrap();
    let partial_before = fs::read(&partial).unwrap();
    let a = dir.path().join("a.xyz");
    let b = dir.path().join("b.xyz");
    ok(&pcc(&cfg, &["complete", partial.to_str().unwrap(), "-o", a.to_str().unwrap(), "--emit-coarse", "--heatmap"]));
    ok(&pcc(&cfg, &["complete", partial.to_str().unwrap(), "-o", b.to_str().unwrap()]));
    let bytes = fs::read(&a).unwrap();
    assert_eq!(String::from_utf8_lossy(&bytes).lines().count(), 64);
    assert!(dir.path().join("a.coarse.xyz").exists());
    assert!(dir.path().join("a.heatmap.csv").exists());
    assert!(!dir.path().join("b.coarse.xyz").exists());
    assert_eq!(bytes, fs::read(&b).unwrap(), "same input, same seed, same bytes");
    assert_eq!(fs::read(&partial).unwrap(), partial_before);

    ok(&pcc(&cfg, &["evaluate"]));
    let report = fs::read_to_string(run.join("report.csv")).unwrap();
    let tests = manifest.lines().filter(|l| l.contains("\"test\"")).count();
    assert_eq!(report.lines().count(), 1 + tests);
    assert!(run.join("summary.csv").exists());
}

#[test]
fn evaluation_lists_missing_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    ok(&pcc(&cfg, &["dataset"]));
    let empty = dir.path().join("preds");
    fs::create_dir_all(&empty).unwrap();
    let out = pcc(&cfg, &["evaluate", "--predictions", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing files"));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = pcc(&cfg, &["--set", "families=[\"teapot\"]", "dataset"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("families"));

    let out = pcc(&cfg, &["--set", "no_such_key=3", "dataset"]);
    assert_eq!(out.status.code(), Some(1));

    let out = pcc(&dir.path().join("absent.toml"), &["dataset"]);
    assert_eq!(out.status.code(), Some(1));

    let out = pcc(&cfg, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    ok(&pcc(&cfg, &["--set", "instances_per_family=1", "--set", "views_per_instance=1", "dataset"]));
    let written = fs::read_to_string(dir.path().join("run/nested/config.toml")).unwrap();
    assert!(written.contains("instances_per_family = 1"));
    let manifest = fs::read_to_string(dir.path().join("data/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
}
