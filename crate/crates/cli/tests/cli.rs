use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scenelat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenelat"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = scenelat(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

/// Every file under `root`, relative path and bytes, sorted.
fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["gen-data", "--config", "tiny", "--seed", "7", "--threads", "1", "--out", "a"]);
    ok(d, &["gen-data", "--config", "tiny", "--seed", "7", "--threads", "1", "--out", "b"]);
    ok(d, &["gen-data", "--config", "tiny", "--seed", "8", "--threads", "1", "--out", "c"]);
    let (a, b, c) = (tree(&d.join("a")), tree(&d.join("b")), tree(&d.join("c")));
    assert!(a.iter().any(|(n, _)| n.ends_with("view_000.ten")));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn full_pipeline_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let base = ["--config", "tiny", "--threads", "1"];
    let run = |args: &[&str]| ok(d, &[args, &base[..]].concat());
    run(&["gen-data", "--out", "data"]);
    run(&["train-rae", "--data", "data", "--out", "rae"]);
    run(&["train-dit", "--data", "data", "--rae", "rae/rae.ckpt", "--out", "dit"]);
    run(&["encode", "--rae", "rae/rae.ckpt", "--data", "data", "--scene", "1", "--visible", "0,2", "--out", "enc"]);
    run(&["decode", "--rae", "rae/rae.ckpt", "--latents", "enc/latents.ten", "--cameras", "enc/cameras.cfg", "--out", "dec"]);
    for f in ["view_003.ten", "view_003.ppm", "pmap_003.ten", "config.toml"] {
        assert!(d.join("dec").join(f).exists(), "missing {f}");
    }
    run(&["sample", "--rae", "rae/rae.ckpt", "--dit", "dit/dit.ckpt", "--data", "data", "--set", "dit.cfg_scale=2.0", "--out", "s1"]);
    run(&["sample", "--rae", "rae/rae.ckpt", "--dit", "dit/dit.ckpt", "--data", "data", "--set", "dit.cfg_scale=2.0", "--out", "s2"]);
    let manifest = fs::read_to_string(d.join("s1/manifest.toml")).unwrap();
    assert!(manifest.contains("cfg_scale = 2.0"), "{manifest}");
    assert_eq!(
        fs::read(d.join("s1/latents.ten")).unwrap(),
        fs::read(d.join("s2/latents.ten")).unwrap()
    );
    run(&["sample", "--rae", "rae/rae.ckpt", "--dit", "dit/dit.ckpt", "--data", "data", "--cond", "none", "--out", "s0"]);
    assert!(fs::read_to_string(d.join("s0/manifest.toml")).unwrap().contains("Uncond"));
    let o = run(&["eval", "--rae", "rae/rae.ckpt", "--dit", "dit/dit.ckpt", "--data", "data", "--out", "ev"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("psnr"));
    let tsv = fs::read_to_string(d.join("ev/report.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4);
    for dir in ["data", "rae", "dit", "enc", "dec", "s1", "ev"] {
        assert!(d.join(dir).join("config.toml").exists(), "no config echo in {dir}");
    }
}

#[test]
fn training_is_reproducible_and_resumable() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let base = ["--config", "tiny", "--threads", "1", "--seed", "3"];
    let run = |args: &[&str]| ok(d, &[args, &base[..]].concat());
    run(&["gen-data", "--out", "data"]);
    run(&["train-rae", "--data", "data", "--out", "a"]);
    run(&["train-rae", "--data", "data", "--out", "b"]);
    run(&["train-rae", "--data", "data", "--steps", "4", "--out", "c"]);
    run(&["train-rae", "--data", "data", "--resume", "c/rae.ckpt", "--out", "c"]);
    let a = fs::read(d.join("a/rae.ckpt")).unwrap();
    assert_eq!(a, fs::read(d.join("b/rae.ckpt")).unwrap());
    assert_eq!(a, fs::read(d.join("c/rae.ckpt")).unwrap());
}

#[test]
fn gradcheck_passes() {
    let t = tempfile::tempdir().unwrap();
    let o = ok(t.path(), &["gradcheck", "--config", "tiny", "--out", "gc"]);
    let s = String::from_utf8_lossy(&o.stdout);
    assert!(s.contains("rae max_rel_err") && s.contains("dit max_rel_err"), "{s}");
}

#[test]
fn usage_and_config_errors_exit_1() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    for args in [
        &["frobnicate"][..],
        &["gen-data", "--bogus"],
        &["gen-data", "--set", "nope=1"],
        &["gen-data", "--set", "rae.heads=3"],
        &["gen-data", "--config", "missing.toml"],
        &["encode", "--rae", "absent.ckpt", "--data", "absent"],
    ] {
        let o = scenelat(d, args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
    assert_eq!(scenelat(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn diverging_run_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["gen-data", "--config", "tiny", "--out", "data"]);
    let o = scenelat(
        d,
        &["train-rae", "--config", "tiny", "--data", "data", "--set", "train_rae.schedule.peak_lr=1e30", "--out", "r"],
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
