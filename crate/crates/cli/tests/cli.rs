use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use panolab::io;
use panolab::{Shape, Tensor};

fn panolab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panolab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = panolab(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], cwd: &Path) -> String {
    let out = panolab(args, cwd);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn count_suffix(dir: &Path, suffix: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix))
        .count()
}

fn manifest_value(path: &Path, key: &str) -> String {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
        .unwrap_or_else(|| panic!("{key} missing from {}", path.display()))
}

fn small_data(dir: &Path, name: &str) {
    ok(&["gen-data", "--seed", "3", "--scenes", "3", "--frames", "2", "--height", "8", "--out", name], dir);
}

/// Backbone checkpoint `bb.p360` trained briefly on `data`.
fn backbone(dir: &Path) {
    small_data(dir, "data");
    ok(&["train", "--data", "data", "--phase", "backbone", "--steps", "5", "--seed", "1", "--ckpt-out", "bb.p360"], dir);
}

#[test]
fn gen_data_writes_pairs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        ok(&["gen-data", "--seed", "7", "--scenes", "4", "--frames", "2", "--height", "8", "--out", out], d);
    }
    let a = d.join("a");
    assert_eq!(count_suffix(&a, ".video.p360"), 4);
    assert_eq!(count_suffix(&a, ".flow.p360"), 4);
    assert!(a.join("manifest.txt").exists());
    let strip = |s: Vec<(PathBuf, Vec<u8>)>| s.into_iter().filter(|(p, _)| p != Path::new("manifest.txt")).collect::<Vec<_>>();
    assert_eq!(strip(snapshot(&a)), strip(snapshot(&d.join("b"))));

    let v = io::load_tensor(&a.join("scene_0000.video.p360"), Some("video")).unwrap();
    let f = io::load_tensor(&a.join("scene_0000.flow.p360"), Some("flow")).unwrap();
    assert_eq!(v.shape(), Shape::new(1, 3, 2, 8, 16));
    assert_eq!(f.shape(), Shape::new(1, 2, 2, 64, 128));
}

#[test]
fn gen_data_rejects_odd_height() {
    let tmp = tempfile::tempdir().unwrap();
    let err = fails(&["gen-data", "--scenes", "1", "--height", "33", "--out", "x"], tmp.path());
    assert!(err.contains("even"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn zero_steps_keep_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    backbone(d);
    for phase in ["backbone", "adapter"] {
        let out = format!("{phase}0.p360");
        ok(&["train", "--data", "data", "--phase", phase, "--steps", "0", "--ckpt-in", "bb.p360", "--ckpt-out", &out], d);
        assert_eq!(fs::read(d.join(&out)).unwrap(), fs::read(d.join("bb.p360")).unwrap(), "{phase}");
        assert_eq!(fs::read_to_string(d.join(format!("{phase}0.loss.txt"))).unwrap(), "");
    }
    assert_eq!(manifest_value(&d.join("bb.manifest.txt"), "p_zero"), "0.2");
}

#[test]
fn adapter_phase_needs_a_backbone() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path(), "data");
    let err = fails(&["train", "--data", "data", "--phase", "adapter", "--steps", "1", "--ckpt-out", "x.p360"], tmp.path());
    assert!(err.contains("--ckpt-in"), "{err}");
}

#[test]
fn full_dropout_matches_zero_flow_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    backbone(d);
    small_data(d, "zeros");
    for i in 0..3 {
        let p = d.join(format!("zeros/scene_{i:04}.flow.p360"));
        let f = io::load_tensor(&p, Some("flow")).unwrap();
        io::save_tensor(&p, "flow", &Tensor::zeros(f.shape())).unwrap();
    }
    for (data, out) in [("data", "real.p360"), ("zeros", "zero.p360")] {
        ok(
            &["train", "--data", data, "--phase", "adapter", "--steps", "50", "--p-zero", "1.0", "--seed", "4", "--ckpt-in", "bb.p360", "--ckpt-out", out],
            d,
        );
    }
    let real = fs::read_to_string(d.join("real.loss.txt")).unwrap();
    assert_eq!(real.lines().count(), 50);
    assert_eq!(real, fs::read_to_string(d.join("zero.loss.txt")).unwrap());
    assert_eq!(fs::read(d.join("real.p360")).unwrap(), fs::read(d.join("zero.p360")).unwrap());
}

#[test]
fn sample_defaults_and_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    backbone(d);
    let report = ok(&["sample", "--ckpt", "bb.p360", "--height", "8", "--frames", "2", "--seed", "5", "--out", "s"], d);
    let m = d.join("s/manifest.txt");
    assert_eq!(manifest_value(&m, "steps"), "25");
    assert_eq!(manifest_value(&m, "theta"), "1.570796");
    assert_eq!(manifest_value(&m, "rotate"), "true");
    assert_eq!(report, fs::read_to_string(d.join("s/seam.txt")).unwrap());
    assert!(report.starts_with("seam_gap "));
    assert_eq!(count_suffix(&d.join("s/frames"), ".ppm"), 2);

    let plain = ["sample", "--ckpt", "bb.p360", "--height", "8", "--frames", "2", "--steps", "6", "--rotate", "off", "--circular-late", "off"];
    ok(&[&plain[..], &["--out", "p1"]].concat(), d);
    ok(&[&plain[..], &["--out", "p2"]].concat(), d);
    assert_eq!(snapshot(&d.join("p1")).into_iter().filter(|(p, _)| !p.ends_with("manifest.txt")).collect::<Vec<_>>(),
        snapshot(&d.join("p2")).into_iter().filter(|(p, _)| !p.ends_with("manifest.txt")).collect::<Vec<_>>());
}

#[test]
fn zero_adapter_weight_ignores_the_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    backbone(d);
    ok(&["train", "--data", "data", "--phase", "adapter", "--steps", "5", "--ckpt-in", "bb.p360", "--ckpt-out", "ad.p360"], d);
    let base = ["sample", "--ckpt", "ad.p360", "--steps", "6", "--adapter-weight", "0", "--seed", "2"];
    ok(&[&base[..], &["--flow", "data/scene_0001.flow.p360", "--out", "with"]].concat(), d);
    ok(&[&base[..], &["--height", "8", "--frames", "2", "--out", "without"]].concat(), d);
    assert_eq!(fs::read(d.join("with/video.p360")).unwrap(), fs::read(d.join("without/video.p360")).unwrap());
    ok(&["sample", "--ckpt", "ad.p360", "--steps", "6", "--flow", "data/scene_0001.flow.p360", "--seed", "2", "--out", "w1"], d);
    assert_ne!(fs::read(d.join("with/video.p360")).unwrap(), fs::read(d.join("w1/video.p360")).unwrap());
}

#[test]
fn sample_rejects_flow_that_does_not_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    backbone(d);
    io::save_tensor(&d.join("bad.p360"), "flow", &Tensor::zeros(Shape::new(1, 2, 2, 60, 128))).unwrap();
    let err = fails(&["sample", "--ckpt", "bb.p360", "--flow", "bad.p360", "--out", "o"], d);
    assert!(err.contains("does not fit"), "{err}");
    io::save_tensor(&d.join("three.p360"), "flow", &Tensor::zeros(Shape::new(1, 3, 2, 64, 128))).unwrap();
    fails(&["sample", "--ckpt", "bb.p360", "--flow", "three.p360", "--out", "o"], d);
    let err = fails(&["sample", "--ckpt", "bb.p360", "--flow", "data/scene_0000.flow.p360", "--height", "16", "--out", "o"], d);
    assert!(err.contains("disagree"), "{err}");
}

#[test]
fn eval_seam_project_duplicate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    io::save_tensor(&d.join("flat.p360"), "video", &Tensor::full(Shape::new(1, 3, 2, 8, 16), 0.4)).unwrap();
    let out = ok(&["eval", "--input", "flat.p360", "seam"], d);
    assert_eq!(out, "seam_gap 0 interior_gap 0 ratio 1\n");

    // the four pixels around the forward direction share one value
    let erp = Tensor::from_fn(Shape::new(1, 3, 1, 8, 16), |[_, c, _, y, x]| {
        if (3..=4).contains(&y) && (7..=8).contains(&x) {
            0.2 + 0.3 * c as f32
        } else {
            ((x * 7 + y * 3 + c) % 11) as f32 / 11.0
        }
    });
    io::save_tensor(&d.join("erp.p360"), "video", &erp).unwrap();
    ok(&["eval", "--input", "erp.p360", "project", "--yaw", "0", "--pitch", "0", "--fov", "1.570796", "--size", "9", "--out", "view"], d);
    let view = io::read_ppm(&d.join("view/frame_0000.ppm")).unwrap();
    assert_eq!((view.width, view.height), (9, 9));
    let center = (4 * 9 + 4) * 3;
    assert_eq!(&view.rgb[center..center + 3], &[51, 128, 204]);

    ok(&["eval", "--input", "erp.p360", "duplicate", "--out", "dup"], d);
    let dup = io::read_ppm(&d.join("dup/frame_0000.ppm")).unwrap();
    assert_eq!((dup.width, dup.height), (32, 8));
    assert_eq!(dup.rgb[..16 * 3], dup.rgb[16 * 3..32 * 3]);

    // frame directories are accepted as input too
    let again = ok(&["eval", "--input", "dup", "seam"], d);
    assert!(again.starts_with("seam_gap "));
}

#[test]
fn unknown_eval_subcommand_prints_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = panolab(&["eval", "--input", "x", "wobble"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn manifests_replay_to_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    backbone(d);
    ok(&["sample", "--ckpt", "bb.p360", "--height", "8", "--frames", "2", "--steps", "5", "--seed", "9", "--out", "s"], d);
    let before = snapshot(&d.join("s"));
    fs::remove_dir_all(d.join("s")).unwrap();
    fs::rename(d.join("data"), d.join("data_orig")).unwrap();
    fs::rename(d.join("bb.p360"), d.join("bb_orig.p360")).unwrap();
    fs::rename(d.join("bb.manifest.txt"), d.join("bb_orig.manifest.txt")).unwrap();

    ok(&["replay", "--manifest", "data_orig/manifest.txt"], d);
    assert_eq!(snapshot(&d.join("data")), snapshot(&d.join("data_orig")));
    ok(&["replay", "--manifest", "bb_orig.manifest.txt"], d);
    assert_eq!(fs::read(d.join("bb.p360")).unwrap(), fs::read(d.join("bb_orig.p360")).unwrap());
    fs::write(d.join("sample_manifest.txt"), &before.iter().find(|(p, _)| p.ends_with("manifest.txt")).unwrap().1).unwrap();
    ok(&["replay", "--manifest", "sample_manifest.txt"], d);
    assert_eq!(snapshot(&d.join("s")), before);
}
