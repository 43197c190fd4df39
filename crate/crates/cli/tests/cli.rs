use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const CONFIG: &str = "[preset]\nname = compact\n[optim]\nepochs = 1\nbatch_size = 2\n";

fn fdtr(args: &[&str]) -> Output {
    fdtr_env(args, &[])
}

fn fdtr_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fdtr"));
    cmd.args(args).env_remove("FDTR_SEED").env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("run fdtr")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// SHA-256 over every file below `dir`, in sorted path order.
fn tree_hash(dir: &Path) -> String {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, out);
            } else {
                out.push(p);
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_str().unwrap().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    encoder: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("run.ini");
    fs::write(&config, CONFIG).unwrap();
    let data = root.join("data");
    ok(fdtr(&["--config", s(&config), "--seed", "7", "gen", "--out", s(&data), "--n", "6", "--n-val", "3"]));
    let encoder = root.join("enc.fdtr");
    ok(fdtr(&[
        "--config",
        s(&config),
        "--seed",
        "7",
        "pretrain",
        "--data",
        s(&data),
        "--out",
        s(&encoder),
        "--random-frozen",
    ]));
    Fixture {
        _tmp: tmp,
        root,
        config,
        data,
        encoder,
    }
}

#[test]
fn gen_echoes_seed_refuses_overwrite_and_is_reproducible() {
    let f = fixture();
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(fs::read_dir(f.data.join("train")).unwrap().count(), 6);
    assert!(fs::read_to_string(f.data.join("run.ini")).unwrap().contains("seed = 7"));

    let before = tree_hash(&f.data);
    let again = fdtr(&["--config", s(&f.config), "--seed", "7", "gen", "--out", s(&f.data), "--n", "6", "--n-val", "3"]);
    assert_eq!(again.status.code(), Some(1));
    ok(fdtr(&[
        "--config",
        s(&f.config),
        "--seed",
        "7",
        "gen",
        "--out",
        s(&f.data),
        "--n",
        "6",
        "--n-val",
        "3",
        "--force",
    ]));
    assert_eq!(tree_hash(&f.data), before);
}

#[test]
fn seed_comes_from_env_and_is_mandatory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let o = fdtr(&["gen", "--out", s(&out), "--n", "2", "--n-val", "1", "--canvas", "64"]);
    assert_eq!(o.status.code(), Some(1));
    ok(fdtr_env(
        &["gen", "--out", s(&out), "--n", "2", "--n-val", "1", "--canvas", "64"],
        &[("FDTR_SEED", "3")],
    ));
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 3"));
}

#[test]
fn missing_inputs_exit_with_io_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fdtr(&[
        "--seed",
        "1",
        "train",
        "--data",
        s(&tmp.path().join("nope")),
        "--out",
        s(&tmp.path().join("m")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn random_frozen_pretrain_writes_frozen_checkpoint() {
    let f = fixture();
    let store = fdtr_core::checkpoint::load(&f.encoder).unwrap();
    assert!(store.len() > 0);
    assert!(store.all_frozen());
    assert!(f.encoder.with_extension("fdtr.ini").exists());
}

#[test]
fn train_eval_visualize_round_trip() {
    let f = fixture();
    let model = f.root.join("model");
    let out = ok(fdtr(&[
        "--config",
        s(&f.config),
        "--seed",
        "7",
        "train",
        "--data",
        s(&f.data),
        "--out",
        s(&model),
        "--foundation",
        s(&f.encoder),
        "--image-queries",
        "5",
        "--fuse-patches",
        "on",
    ]));
    assert!(out.contains("M=5 image queries per layer"), "{out}");
    assert!(out.contains("digest unchanged"));
    let metrics = fs::read_to_string(model.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,loss,loss_cls,loss_l1,loss_giou,ap,ap50,ap75,aps,apm,apl,loc,cls,bg,fn")
    );
    assert_eq!(lines.count(), 1);

    let e1 = ok(fdtr(&["eval", "--model", s(&model), "--data", s(&f.data)]));
    let e2 = ok(fdtr(&["eval", "--model", s(&model), "--data", s(&f.data)]));
    assert_eq!(e1, e2);
    let csv = fs::read_to_string(model.join("eval_val.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("ap,ap50,ap75,aps,apm,apl,loc,cls,bg,fn"));

    let vis = f.root.join("vis");
    let v = ok(fdtr(&[
        "visualize",
        "--model",
        s(&model),
        "--data",
        s(&f.data),
        "--out",
        s(&vis),
        "--count",
        "2",
        "--threshold",
        "1.01",
        "--level",
        "3",
    ]));
    assert_eq!(v.matches("0 boxes drawn").count(), 2, "{v}");
    // Level 3 is the foundation level: a 4x4 patch grid for a 32-pixel encoder.
    let pgm = fs::read(vis.join("00000_norm_l3.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    let ppm = fs::read(vis.join("00000_overlay.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n64 64\n255\n"));

    // A dataset that disagrees on the class count is refused.
    let manifest = f.data.join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replace("\"num_classes\": 6", "\"num_classes\": 5")).unwrap();
    let o = fdtr(&["eval", "--model", s(&model), "--data", s(&f.data)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unfrozen_checkpoint_needs_explicit_flag() {
    let f = fixture();
    let mut store = fdtr_core::checkpoint::load(&f.encoder).unwrap();
    store.set_frozen(false);
    fdtr_core::checkpoint::save(&store, &f.encoder).unwrap();
    let model = f.root.join("m");
    let args = [
        "--config",
        s(&f.config),
        "--seed",
        "7",
        "train",
        "--data",
        s(&f.data),
        "--out",
        s(&model),
        "--foundation",
        s(&f.encoder),
        "--image-queries",
        "1",
    ];
    assert_eq!(fdtr(&args).status.code(), Some(1));
    let mut with_flag = args.to_vec();
    with_flag.push("--allow-trainable-foundation");
    let out = ok(fdtr(&with_flag));
    assert!(out.contains("enhancer 0: trained"));
}

#[test]
fn disabled_plugins_match_the_plain_detector() {
    let f = fixture();
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "--config",
            s(&f.config),
            "--seed",
            "7",
            "train",
            "--data",
            s(&f.data),
            "--out",
            s(out),
            "--image-queries",
            "0",
            "--fuse-patches",
            "off",
        ];
        args.extend_from_slice(extra);
        ok(fdtr(&args));
    };
    let plain = f.root.join("plain");
    let off = f.root.join("off");
    train(&plain, &["--enhancers", "0"]);
    train(&off, &["--foundation", s(&f.encoder), "--enhancers", "1"]);
    assert_eq!(
        fs::read(plain.join("metrics.csv")).unwrap(),
        fs::read(off.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(plain.join("detector.fdtr")).unwrap(),
        fs::read(off.join("detector.fdtr")).unwrap()
    );
}

#[test]
fn ablation_grid_reports_every_cell_and_pass_counts() {
    let f = fixture();
    let out = f.root.join("ablate");
    ok(fdtr(&[
        "--config",
        s(&f.config),
        "--seed",
        "7",
        "ablate",
        "--data",
        s(&f.data),
        "--out",
        s(&out),
        "--foundation",
        s(&f.encoder),
        "--image-queries",
        "1,5",
        "--strategies",
        "crop,mean_patch,masked_class_tokens",
        "--max-steps",
        "1",
    ]));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    let passes = |iq: &str, strategy: &str| -> usize {
        let row = rows
            .iter()
            .find(|r| r.starts_with(&format!("iq{iq}_")) && r.contains(&format!(",{strategy},")))
            .unwrap();
        row.split(',').nth(7).unwrap().parse().unwrap()
    };
    assert_eq!(passes("5", "crop"), 5);
    assert_eq!(passes("5", "mean_patch"), 1);
    assert_eq!(passes("5", "masked_class_tokens"), 1);
    assert_eq!(passes("1", "crop"), 1);
    for r in &rows {
        let cell = r.split(',').next().unwrap();
        assert!(out.join(cell).join("metrics.csv").exists());
    }
}
