use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sfuda-stable"));
    c.env_remove("SFUDA_STABLE_HOME");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Shared {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    snap: PathBuf,
    root: PathBuf,
}

/// Small dataset plus a one-epoch source model, built once for all tests.
fn shared() -> &'static Shared {
    static S: OnceLock<Shared> = OnceLock::new();
    S.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let data = root.join("data");
        ok(&["gen-data", "--preset", "small", "--seed", "3", "--out", s(&data)]);
        let src = root.join("source");
        ok(&["train-source", "--data", s(&data), "--epochs", "1", "--channels", "8,16", "--seed", "3", "--out", s(&src)]);
        Shared { data, snap: src.join("source.snap"), root, _tmp: tmp }
    })
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_a_readable_dataset() {
    let sh = shared();
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(sh.data.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["entries"].as_array().unwrap().len(), 50);
    assert_eq!(manifest(&sh.data)["command"], "gen-data");
    assert_eq!(manifest(&sh.data)["master_seed"], 3);
    assert!(sh.data.join("images/0000.png").is_file());
    assert!(sh.snap.is_file());
    assert_eq!(manifest(sh.snap.parent().unwrap())["command"], "train-source");
}

#[test]
fn gen_data_is_reproducible() {
    let sh = shared();
    let other = sh.root.join("data-again");
    ok(&["gen-data", "--preset", "small", "--seed", "3", "--out", s(&other)]);
    for f in ["meta.json", "images/0042.png", "masks/0049.png"] {
        assert_eq!(fs::read(sh.data.join(f)).unwrap(), fs::read(other.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn adapt_evaluate_and_inspect() {
    let sh = shared();
    let out = sh.root.join("adapt");
    let stdout = ok(&[
        "adapt", "--data", s(&sh.data), "--snapshot", s(&sh.snap), "--epochs", "2", "--wc", "--ei",
        "--probe", "1,2,5", "--snapshot-epochs", "2", "--plot", "--out", s(&out),
    ]);
    assert!(stdout.contains("Epoch 1"), "{stdout}");
    assert!(stdout.contains("[5]"), "{stdout}");
    assert_eq!(fs::read_to_string(out.join("records.jsonl")).unwrap().lines().count(), 2);
    assert!(out.join("dice_curve.png").is_file());
    let snap = out.join("snapshots/epoch002.snap");
    assert!(snap.is_file());
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["use_wc"], true);
    assert_eq!(cfg["seed"], 7);

    let eval = sh.root.join("eval");
    let stdout = ok(&["evaluate", "--data", s(&sh.data), "--snapshot", s(&snap), "--out", s(&eval)]);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(v["mean_dice"], report["final_dice"]);
    assert_eq!(manifest(&eval)["command"], "evaluate");

    let pl = sh.root.join("labels");
    ok(&["pseudo-labels", "--data", s(&sh.data), "--snapshot", s(&sh.snap), "--count", "2", "--out", s(&pl)]);
    assert!(pl.join("overlays/0001.png").is_file());
    assert!(pl.join("coverage.json").is_file());
}

#[test]
fn config_file_and_flag_precedence() {
    let sh = shared();
    let cfg = sh.root.join("exp.toml");
    fs::write(&cfg, "seed = 11\n[adapt]\nepochs = 1\nuse_wc = true\nbatch_size = 8\n").unwrap();
    let out = sh.root.join("adapt-config");
    ok(&["adapt", "--config", s(&cfg), "--data", s(&sh.data), "--snapshot", s(&sh.snap), "--batch-size", "2", "--out", s(&out)]);
    let used: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(used["seed"], 11);
    assert_eq!(used["epochs"], 1);
    assert_eq!(used["use_wc"], true);
    assert_eq!(used["batch_size"], 2);
    assert_eq!(manifest(&out)["config_path"], s(&cfg));
}

#[test]
fn ablation_in_parallel_processes_matches_in_process() {
    let sh = shared();
    let common = ["--data", s(&sh.data), "--snapshot", s(&sh.snap), "--groups", "A,D", "--epochs", "1", "--probe", "1"];
    let serial = sh.root.join("abl-serial");
    let parallel = sh.root.join("abl-parallel");
    let mut a = vec!["ablation", "--out", s(&serial)];
    a.extend(common);
    let mut b = vec!["ablation", "--jobs", "2", "--out", s(&parallel)];
    b.extend(common);
    ok(&a);
    ok(&b);
    let csv = fs::read_to_string(serial.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv, fs::read_to_string(parallel.join("ablation.csv")).unwrap());
    assert!(parallel.join("cells/D/records.jsonl").is_file());
}

#[test]
fn exit_codes() {
    let sh = shared();
    // configuration problems
    let out = run(&["adapt", "--data", s(&sh.data), "--snapshot", s(&sh.snap), "--ei", "--entropy", "min", "--out", s(&sh.root.join("x1"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("entropy_mode=min"));
    let bad = sh.root.join("bad.toml");
    fs::write(&bad, "[adapt]\nepochz = 3\n").unwrap();
    assert_eq!(run(&["gen-data", "--config", s(&bad), "--out", s(&sh.root.join("x2"))]).status.code(), Some(2));
    assert_eq!(run(&["gen-data", "--shift", "warp:1", "--out", s(&sh.root.join("x3"))]).status.code(), Some(2));
    // I/O problems
    let out = run(&["evaluate", "--data", s(&sh.root.join("missing")), "--snapshot", s(&sh.snap)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
    let junk = sh.root.join("junk.snap");
    fs::write(&junk, b"not a snapshot").unwrap();
    assert_eq!(run(&["evaluate", "--data", s(&sh.data), "--snapshot", s(&junk)]).status.code(), Some(3));
    // numerical abort
    let out = run(&["adapt", "--data", s(&sh.data), "--snapshot", s(&sh.snap), "--epochs", "1", "--lr", "1e30", "--no-augment", "--out", s(&sh.root.join("x4"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(sh.root.join("x4/manifest.json").is_file());
}

#[test]
fn output_directories_are_protected() {
    let sh = shared();
    let dir = sh.root.join("protected");
    ok(&["gen-data", "--preset", "small", "--per-domain", "5", "--out", s(&dir)]);
    let again = run(&["gen-data", "--preset", "small", "--per-domain", "5", "--out", s(&dir)]);
    assert_eq!(again.status.code(), Some(2));
    ok(&["gen-data", "--preset", "small", "--per-domain", "5", "--force", "--out", s(&dir)]);

    let foreign = sh.root.join("foreign");
    fs::create_dir(&foreign).unwrap();
    fs::write(foreign.join("keep.txt"), "mine").unwrap();
    let out = run(&["gen-data", "--preset", "small", "--force", "--out", s(&foreign)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(fs::read_to_string(foreign.join("keep.txt")).unwrap(), "mine");
}

#[test]
fn home_variable_sets_default_output() {
    let sh = shared();
    let home = sh.root.join("home");
    let out = bin()
        .env("SFUDA_STABLE_HOME", &home)
        .args(["gen-data", "--preset", "small", "--per-domain", "5", "--seed", "9"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(home.join("data-seed9/meta.json").is_file());
}
