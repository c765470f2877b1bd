use std::fs;
use std::path::Path;
use std::process::Command;

use lowlight_fsda::cli::run;

fn call(args: &[&str]) -> (i32, String, String) {
    let mut argv = vec!["lowlight-fsda"];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for sub in fs::read_dir(dir).unwrap() {
        let sub = sub.unwrap().path();
        for f in fs::read_dir(&sub).unwrap() {
            let f = f.unwrap().path();
            let rel = f.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            files.push((rel, fs::read(&f).unwrap()));
        }
    }
    files.sort();
    files
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let (code, out, err) = call(&["frobnicate"]);
    assert_eq!(code, 1);
    assert!(out.is_empty());
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn help_exits_zero() {
    let (code, out, _) = call(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("synth-gen"));
}

#[test]
fn binary_reports_usage_errors_with_exit_one() {
    let status = Command::new(env!("CARGO_BIN_EXE_lowlight-fsda"))
        .arg("no-such-command")
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&status.stderr).contains("Usage"));
}

#[test]
fn synth_gen_is_deterministic_and_prints_config_first() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let (code, out, err) = call(&[
            "synth-gen", "--out", p(d), "--scenes", "5", "--profile", "A", "--size", "64x64", "--seed", "7",
        ]);
        assert_eq!(code, 0, "{err}");
        assert!(out.lines().next().unwrap().starts_with("# synth-gen config {"));
        assert!(out.contains("\"noise_b\":4.0"), "defaults are expanded: {out}");
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 20);
    assert_eq!(ta, tb);
}

#[test]
fn gradcheck_passes() {
    let (code, out, err) = call(&["gradcheck"]);
    assert_eq!(code, 0, "{out}{err}");
    assert!(!out.contains("FAIL"));
    for op in ["conv2d", "conv2d_transpose", "max_pool2", "one_minus_ssim", "encoder_unet_l1"] {
        assert!(out.contains(op), "missing {op}");
    }
}

#[test]
fn k_larger_than_target_set_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path().join("t");
    assert_eq!(call(&["synth-gen", "--out", p(&t), "--scenes", "2", "--profile", "B", "--size", "64x64"]).0, 0);
    let (code, _, err) = call(&[
        "train", "--target", p(&t), "--k", "4", "--mode", "target_only", "--out", p(&tmp.path().join("m.ckpt")),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("k = 4"), "{err}");
}

#[test]
fn bad_mode_and_bad_size_are_usage_errors() {
    assert_eq!(call(&["train", "--target", "x", "--out", "y", "--mode", "fancy"]).0, 1);
    assert_eq!(call(&["synth-gen", "--out", "x", "--scenes", "1", "--profile", "A", "--size", "64"]).0, 1);
}

#[test]
fn missing_sidecar_field_is_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert_eq!(call(&["synth-gen", "--out", p(&d), "--scenes", "1", "--profile", "A", "--size", "64x64"]).0, 0);
    let scene = fs::read_dir(&d).unwrap().next().unwrap().unwrap().path();
    let meta = scene.join("meta.json");
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&meta).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("ratio");
    fs::write(&meta, serde_json::to_vec(&v).unwrap()).unwrap();
    let (code, _, err) = call(&["stats", "--in", p(&d), "--report", p(&tmp.path().join("s.csv"))]);
    assert_eq!(code, 2);
    assert!(err.contains("ratio"), "{err}");
}

#[test]
fn end_to_end_tiny_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let path = |n: &str| tmp.path().join(n);
    let (src, tgt) = (path("src"), path("tgt"));
    let gen = |d: &Path, prof: &str, seed: &str| {
        call(&["synth-gen", "--out", p(d), "--scenes", "4", "--profile", prof, "--size", "64x64", "--seed", seed])
    };
    assert_eq!(gen(&src, "A", "1").0, 0);
    assert_eq!(gen(&tgt, "B", "2").0, 0);

    let conv = path("conv.ckpt");
    let (code, out, err) = call(&["pretrain-converter", "--source", p(&src), "--out", p(&conv), "--budget", "5", "--channel-base", "4"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("held-out MAE"));

    let cfg = path("cfg.json");
    fs::write(&cfg, r#"{"epochs": 1, "steps_per_epoch": 2, "channel_base": 4}"#).unwrap();
    let model = path("model.ckpt");
    let history = path("history.csv");
    let (code, out, err) = call(&[
        "train", "--source", p(&src), "--target", p(&tgt), "--k", "2", "--mode", "proposed", "--config", p(&cfg),
        "--converter", p(&conv), "--out", p(&model), "--seed", "3", "--history", p(&history),
    ]);
    assert_eq!(code, 0, "{err}");
    let first = out.lines().next().unwrap();
    assert!(first.starts_with("# train config") && first.contains("\"lr0\""), "{first}");
    let csv = fs::read_to_string(&history).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,step,l_target,l_cs,l_ssim,l_source,l_total,lr"));

    let scene = fs::read_dir(&tgt).unwrap().next().unwrap().unwrap().path();
    let img = path("out.ppm");
    let (code, _, err) = call(&["infer", "--ckpt", p(&model), "--input", p(&scene), "--domain", "target", "--out", p(&img)]);
    assert_eq!(code, 0, "{err}");
    assert!(fs::read(&img).unwrap().starts_with(b"P6\n64 64\n65535\n"));

    let report = path("eval.csv");
    let (code, out, err) = call(&["eval", "--ckpt", p(&model), "--test", p(&tgt), "--domain", "target", "--report", p(&report)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("mean PSNR"));
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 6);

    // the SSIM modes refuse to run without a converter
    let (code, _, err) = call(&[
        "train", "--source", p(&src), "--target", p(&tgt), "--k", "2", "--config", p(&cfg), "--out", p(&model),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("converter"), "{err}");

    // a damaged checkpoint is a data error
    let mut bytes = fs::read(&model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&model, bytes).unwrap();
    let (code, _, err) = call(&["eval", "--ckpt", p(&model), "--test", p(&tgt), "--domain", "target", "--report", p(&report)]);
    assert_eq!(code, 2);
    assert!(err.contains("checksum"), "{err}");
}
