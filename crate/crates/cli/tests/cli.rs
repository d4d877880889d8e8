use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pdm_cli::{ABLATION_HEADER, EXIT_CONFIG, EXIT_DATA, METRICS_HEADER};

const TINY: &str = "\
# smallest runnable setup
dataset = two_mode
synth_n = 16
image_size = 8
T = 10
K = 2
D = 4
widths = 4,4,4,4
encoder_widths = 3,4,4
heads = 2
res_blocks = 1
batch_size = 4
max_steps = 3
eval_n_gen = 4
eval_classifier_steps = 5
";

fn pdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdm")).args(args).env_remove("PDM_OUT").output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path, extra: &str, out: &str) -> PathBuf {
    let cfg = write_config(dir, extra);
    let out = dir.join(out);
    ok(&pdm(&["train", "--config", s(&cfg), "--out", s(&out)]));
    out
}

#[test]
fn train_writes_config_loss_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "checkpoint_every = 2\n", "run");
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines[0], "step,diff,contrastive,align,compact,total");
    assert_eq!(lines.len(), 4);
    assert!(out.join("ckpt_2.bin").exists());
    assert!(out.join("ckpt_3.bin").exists());
    let resolved = fs::read_to_string(out.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("max_steps = 3"));
}

#[test]
fn baseline_loss_has_zero_prototype_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "variant = ddpm\n", "run");
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    for line in loss.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(&cols[2..5], &["0", "0", "0"], "{line}");
    }
}

#[test]
fn rerun_gives_identical_loss_csv() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(dir.path(), "", "a");
    let b = train(dir.path(), "", "b");
    assert_eq!(fs::read(a.join("loss.csv")).unwrap(), fs::read(b.join("loss.csv")).unwrap());
    assert_eq!(fs::read(a.join("ckpt_3.bin")).unwrap(), fs::read(b.join("ckpt_3.bin")).unwrap());
}

#[test]
fn flags_override_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    ok(&pdm(&["train", "--config", s(&cfg), "--set", "max_steps=2", "--seed", "9", "--out", s(&out)]));
    let resolved = fs::read_to_string(out.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("max_steps = 2") && resolved.contains("seed = 9"), "{resolved}");
    assert!(out.join("ckpt_2.bin").exists());
}

#[test]
fn env_var_overrides_out_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let env_out = dir.path().join("from_env");
    let flag_out = dir.path().join("from_flag");
    let out = Command::new(env!("CARGO_BIN_EXE_pdm"))
        .args(["train", "--config", s(&cfg), "--out", s(&flag_out)])
        .env("PDM_OUT", &env_out)
        .output()
        .unwrap();
    ok(&out);
    assert!(env_out.join("loss.csv").exists());
    assert!(!flag_out.exists());
}

#[test]
fn config_errors_exit_2_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bogus = 1\n");
    let out = pdm(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 16"), "{err}");

    let out = pdm(&["train", "--config", s(&dir.path().join("absent.cfg"))]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn missing_dataset_exits_3_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_images");
    let cfg = write_config(dir.path(), &format!("dataset = {}\n", missing.display()));
    let out = pdm(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_images"));
}

#[test]
fn sample_grid_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "", "run");
    let ckpt = run.join("ckpt_3.bin");
    let out16 = dir.path().join("s16");
    ok(&pdm(&["sample", "--ckpt", s(&ckpt), "--count", "16", "--seed", "2", "--steps-override", "3", "--out", s(&out16)]));
    let g = image::open(out16.join("grid.png")).unwrap();
    assert_eq!((g.width(), g.height()), (32, 32));
    assert!(out16.join("sample_2_15.png").exists());

    let out1 = dir.path().join("s1");
    ok(&pdm(&["sample", "--ckpt", s(&ckpt), "--count", "1", "--seed", "2", "--out", s(&out1)]));
    let grid = image::open(out1.join("grid.png")).unwrap().to_luma8();
    let single = image::open(out1.join("sample_2_0.png")).unwrap().to_luma8();
    assert_eq!(grid, single);

    let again = dir.path().join("s1b");
    ok(&pdm(&["sample", "--ckpt", s(&ckpt), "--count", "1", "--seed", "2", "--out", s(&again)]));
    assert_eq!(fs::read(out1.join("grid.png")).unwrap(), fs::read(again.join("grid.png")).unwrap());
}

#[test]
fn sample_conditioning_flags() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "", "run");
    let ckpt = run.join("ckpt_3.bin");
    let o = dir.path().join("o");
    let out = pdm(&["sample", "--ckpt", s(&ckpt), "--label", "0", "--out", s(&o)]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("spdm"));

    let opts = ["--count", "2", "--steps-override", "2", "--out"];
    ok(&pdm(&[&["sample", "--ckpt", s(&ckpt), "--proto-index", "1"][..], &opts, &[s(&o)]].concat()));
    let out = pdm(&[&["sample", "--ckpt", s(&ckpt), "--proto-index", "2"][..], &opts, &[s(&o)]].concat());
    assert!(!out.status.success());
    let reference = o.join("sample_0_0.png");
    ok(&pdm(&[&["sample", "--ckpt", s(&ckpt), "--ref-image", s(&reference)][..], &opts, &[s(&o)]].concat()));

    let sup = train(dir.path(), "variant = spdm\n", "sup").join("ckpt_3.bin");
    ok(&pdm(&[&["sample", "--ckpt", s(&sup), "--label", "1"][..], &opts, &[s(&o)]].concat()));
    let out = pdm(&[&["sample", "--ckpt", s(&sup), "--label", "5"][..], &opts, &[s(&o)]].concat());
    assert_eq!(out.status.code(), Some(EXIT_DATA));
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, b"PDMC garbage").unwrap();
    assert_eq!(pdm(&["sample", "--ckpt", s(&bad)]).status.code(), Some(EXIT_DATA));
    assert_eq!(pdm(&["dump", "--ckpt", s(&bad)]).status.code(), Some(EXIT_DATA));
}

#[test]
fn dump_lists_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "", "run").join("ckpt_3.bin");
    let out = pdm(&["dump", "--ckpt", s(&ckpt)]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("prototypes"), "{text}");
    assert!(text.contains("optimizer_steps: 3"), "{text}");
}

#[test]
fn eval_writes_metrics_and_pca() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "", "run").join("ckpt_3.bin");
    let o = dir.path().join("eval");
    ok(&pdm(&["eval", "--ckpt", s(&ckpt), "--out", s(&o)]));
    let metrics = fs::read_to_string(o.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("pdm,two_mode,2,"));
    let pca = fs::read_to_string(o.join("pca.csv")).unwrap();
    assert_eq!(pca.lines().next().unwrap(), "x,y,assigned_prototype,label");
    assert_eq!(pca.lines().count(), 1 + 16);

    let self_check = dir.path().join("self");
    ok(&pdm(&["eval", "--ckpt", s(&ckpt), "--gen-real", "--out", s(&self_check)]));
    let row = fs::read_to_string(self_check.join("metrics.csv")).unwrap();
    let fid: f64 = row.lines().nth(1).unwrap().split(',').nth(4).unwrap().parse().unwrap();
    assert!(fid < 1e-6, "{fid}");

    let out = pdm(&["eval", "--ckpt", s(&ckpt), "--n-gen", "1", "--out", s(&o)]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn eval_on_an_image_directory() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "", "run").join("ckpt_3.bin");
    let imgs = dir.path().join("imgs");
    ok(&pdm(&["sample", "--ckpt", s(&ckpt), "--count", "6", "--steps-override", "2", "--out", s(&imgs)]));
    fs::remove_file(imgs.join("grid.png")).unwrap();
    let o = dir.path().join("eval");
    ok(&pdm(&["eval", "--ckpt", s(&ckpt), "--dataset", s(&imgs), "--n-gen", "3", "--out", s(&o)]));
    let pca = fs::read_to_string(o.join("pca.csv")).unwrap();
    assert_eq!(pca.lines().next().unwrap(), "x,y,assigned_prototype");
    assert_eq!(pca.lines().count(), 1 + 6);
}

#[test]
fn ablate_emits_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = dir.path().join("abl");
    ok(&pdm(&["ablate", "--config", s(&cfg), "--k-list", "1,2,4", "--out", s(&o)]));
    let csv = fs::read_to_string(o.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], ABLATION_HEADER);
    let ks: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["1", "2", "4"]);
    for k in [1, 2, 4] {
        assert!(o.join(format!("k{k}")).join("ckpt_3.bin").exists());
    }
}

#[test]
fn ablate_rejects_bad_k_lists() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    for list in ["1,2,2", "0,2"] {
        let out = pdm(&["ablate", "--config", s(&cfg), "--k-list", list, "--out", s(&dir.path().join("o"))]);
        assert_eq!(out.status.code(), Some(EXIT_CONFIG), "{list}");
    }
    assert!(!dir.path().join("o").exists());
}
