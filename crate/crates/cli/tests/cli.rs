use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nvp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvp"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("nvp runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SPRITE_CFG: &str = "\
# tiny two-scale model
data = data/train.nvpd
valid_data = data/valid.nvpd
hidden = 4
num_blocks = 1
batch_size = 8
max_steps = 6
eval_interval = 3
eval_batch = 32
n = 4
";

fn sprite_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&nvp(
        &["generate", "--out", "data", "kind=sprites", "count=64", "valid_count=32", "seed=4"],
        dir.path(),
    ));
    fs::write(dir.path().join("run.cfg"), SPRITE_CFG).unwrap();
    dir
}

#[test]
fn train_then_eval_agree() {
    let dir = sprite_workspace();
    let p = dir.path();
    ok(&nvp(&["train", "--config", "run.cfg", "--out", "run"], p));
    let metrics = fs::read_to_string(p.join("run/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("step,train_nll,val_bpd,wallclock"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let steps: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(steps, ["0", "3", "6"]);

    let stdout = ok(&nvp(&["eval", "--config", "run.cfg", "--out", "run"], p));
    let reported: f64 = stdout.trim().strip_prefix("val_bpd ").unwrap().parse().unwrap();
    let logged: f64 = rows.last().unwrap()[2].parse().unwrap();
    assert_eq!(reported, logged);
    assert_eq!(fs::read_to_string(p.join("run/eval.txt")).unwrap().trim(), stdout.trim());
}

#[test]
fn same_seed_same_outputs() {
    let dir = sprite_workspace();
    let p = dir.path();
    for out in ["a", "b"] {
        ok(&nvp(&["train", "--config", "run.cfg", "--out", out, "--seed", "9"], p));
        ok(&nvp(&["sample", "--config", "run.cfg", "--out", out], p));
    }
    for file in ["metrics.csv", "checkpoint.json", "samples.png"] {
        assert_eq!(fs::read(p.join("a").join(file)).unwrap(), fs::read(p.join("b").join(file)).unwrap(), "{file}");
    }
    ok(&nvp(&["train", "--config", "run.cfg", "--out", "c", "--seed", "10"], p));
    assert_ne!(fs::read(p.join("a/metrics.csv")).unwrap(), fs::read(p.join("c/metrics.csv")).unwrap());
}

#[test]
fn image_commands_write_decodable_grids() {
    let dir = sprite_workspace();
    let p = dir.path();
    ok(&nvp(&["train", "--config", "run.cfg", "--out", "run"], p));
    for (cmd, file) in [
        ("sample", "samples.png"),
        ("interpolate", "interpolate.png"),
        ("compress", "compress.png"),
        ("extrapolate", "extrapolate.png"),
    ] {
        ok(&nvp(&[cmd, "--config", "run.cfg", "--out", "run", "angles=0,1.5707963267948966", "fractions=1,0.5"], p));
        let img = image::open(p.join("run").join(file)).unwrap();
        assert!(img.width() >= 8 && img.height() >= 8, "{file}");
    }
    // four samples of 8x8 in one row with 1 px gaps
    let samples = image::open(p.join("run/samples.png")).unwrap();
    assert_eq!((samples.width(), samples.height()), (35, 8));
    // 2x2 angle grid
    let grid = image::open(p.join("run/interpolate.png")).unwrap();
    assert_eq!((grid.width(), grid.height()), (17, 17));
}

#[test]
fn toy_points_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&nvp(&["generate", "--out", "toy", "kind=toy:two-moons", "count=256", "valid_count=64"], p));
    fs::write(
        p.join("toy.cfg"),
        "data = toy/train.csv\nvalid_data = toy/valid.csv\nfinal_couplings = 2\nhidden = 8\nnum_blocks = 1\nmax_steps = 4\neval_interval = 2\nn = 10\n",
    )
    .unwrap();
    ok(&nvp(&["train", "--config", "toy.cfg", "--out", "run"], p));
    ok(&nvp(&["sample", "--config", "toy.cfg", "--out", "run"], p));
    let csv = fs::read_to_string(p.join("run/samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    for line in csv.lines().skip(1) {
        let xy: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert!(xy.len() == 2 && xy.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn configuration_errors_exit_2() {
    let dir = sprite_workspace();
    let p = dir.path();
    let code = |args: &[&str]| nvp(args, p).status.code();
    assert_eq!(code(&["train", "--config", "run.cfg", "--out", "x", "no_such_key=1"]), Some(2));
    assert_eq!(code(&["train", "--config", "run.cfg", "--out", "x", "batch_size=zero"]), Some(2));
    assert_eq!(code(&["train", "--out", "x"]), Some(2));
    assert_eq!(code(&["generate", "--out", "x", "kind=toy:spiral"]), Some(2));

    ok(&nvp(&["train", "--config", "run.cfg", "--out", "run"], p));
    let out = nvp(&["attr-transfer", "--config", "run.cfg", "--out", "run"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn missing_inputs_exit_1() {
    let dir = sprite_workspace();
    let p = dir.path();
    assert_eq!(nvp(&["eval", "--config", "run.cfg", "--out", "nothing"], p).status.code(), Some(1));
    fs::write(p.join("bad.cfg"), SPRITE_CFG.replace("data/train.nvpd", "data/absent.nvpd")).unwrap();
    assert_eq!(nvp(&["train", "--config", "bad.cfg", "--out", "x"], p).status.code(), Some(1));
}

#[test]
fn conditional_model_transfers_attributes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&nvp(&["generate", "--out", "data", "kind=labeled-sprites", "count=48", "valid_count=16"], p));
    let cfg = format!(
        "{SPRITE_CFG}labels = data/train_labels.csv\nvalid_labels = data/valid_labels.csv\n"
    );
    fs::write(p.join("run.cfg"), cfg).unwrap();
    ok(&nvp(&["train", "--config", "run.cfg", "--out", "run"], p));
    ok(&nvp(&["attr-transfer", "--config", "run.cfg", "--out", "run"], p));
    ok(&nvp(&["sample", "--config", "run.cfg", "--out", "run"], p));
    assert!(image::open(p.join("run/attr_transfer.png")).is_ok());
    let table = fs::read_to_string(p.join("run/attr_transfer.csv")).unwrap();
    assert!(table.lines().count() >= 2);
}
