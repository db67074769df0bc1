use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dentgan::codec::{CROWN, NUM_CLASSES};
use dentgan::config::RunConfig;
use dentgan::pipeline::{png_names, read_mask};
use dentgan::train::{save_checkpoint, Checkpoint, TrainConfig, TrainState};
use dentgan::default_palette;

fn dentgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dentgan")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn phantoms(dir: &Path, n: &str) {
    let out = dentgan(&["--preset", "tiny", "--seed", "3", "gen-phantoms", "--n", n, "--out", p(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = dentgan(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(out.stdout.is_empty());
}

#[test]
fn help_exits_zero() {
    let out = dentgan(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen-phantoms"));
}

#[test]
fn bad_config_is_a_usage_error() {
    assert_eq!(dentgan(&["--set", "nonsense=1", "inspect-arch"]).status.code(), Some(1));
    assert_eq!(dentgan(&["--set", "epochs=-1", "inspect-arch"]).status.code(), Some(1));
    assert_eq!(dentgan(&["--preset", "huge", "inspect-arch"]).status.code(), Some(1));
    assert_eq!(dentgan(&["evaluate", "--pred", "x"]).status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = dentgan(&["infer", "--checkpoint", p(&missing), "--images", p(dir.path()), "--out", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = dentgan(&["--preset", "tiny", "train", "--data", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inspect_arch_paper_rows() {
    let out = dentgan(&["inspect-arch", "--preset", "paper"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let tables: Vec<&str> = text.split("\n\n").collect();
    assert_eq!(tables[0].lines().count(), 2 + 17);
    assert_eq!(tables[1].lines().count(), 2 + 6);
    assert!(text.contains("e1: conv               5x5    2x2    64"));

    let out = dentgan(&["inspect-arch", "--shapes"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("e8   1x1x512"));
    assert!(text.contains("d8   256x256x3"));
}

#[test]
fn phantoms_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    phantoms(&a, "6");
    phantoms(&b, "6");
    let ta = tree(&a);
    assert_eq!(ta.len(), 2 * 6 + 1);
    assert_eq!(ta, tree(&b));
    let echo = fs::read_to_string(a.join("config.txt")).unwrap();
    let mut cfg = RunConfig::default();
    cfg.apply_text(&echo).unwrap();
    assert_eq!(cfg.train.seed, 3);
    assert_eq!(cfg.phantom.image_size, 64);
}

#[test]
fn augment_writes_factor_times_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let (src, dst) = (dir.path().join("src"), dir.path().join("dst"));
    phantoms(&src, "2");
    let out = dentgan(&["--preset", "tiny", "augment", "--data", p(&src), "--out", p(&dst), "--factor", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(png_names(&dst.join("images")).unwrap().len(), 6);
    assert_eq!(png_names(&dst.join("masks")).unwrap().len(), 6);
}

#[test]
fn train_infer_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    phantoms(&data, "4");
    let run = root.join("run");
    let out = dentgan(&["--preset", "tiny", "--set", "epochs=2", "train", "--data", p(&data), "--out", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let losses = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().next(), Some("step,d_loss,g_adv,g_l1,g_total"));
    assert_eq!(losses.lines().count(), 5);
    let ckpt = run.join("ckpt-4.bin");
    assert!(ckpt.is_file());

    let (p1, p2) = (root.join("p1"), root.join("p2"));
    for out_dir in [&p1, &p2] {
        let out = dentgan(&["infer", "--checkpoint", p(&ckpt), "--images", p(&data.join("images")), "--out", p(out_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(tree(&p1), tree(&p2));
    assert_eq!(png_names(&p1).unwrap(), png_names(&data.join("images")).unwrap());

    let report = root.join("report.csv");
    let out = dentgan(&["evaluate", "--pred", p(&p1), "--gt", p(&data.join("masks")), "--format", "csv", "--out", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().next(), Some("class,precision,tpr,tnr,dice,images,skipped"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with("micro:")).count(), 1 + (NUM_CLASSES - 1) + 1);
}

#[test]
fn zero_checkpoint_predicts_one_uniform_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    phantoms(&data, "2");
    let cfg = TrainConfig::tiny();
    let mut state = TrainState::new(&cfg).unwrap();
    for prm in state.generator.graph.params_mut() {
        prm.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let ckpt = dir.path().join("zero.bin");
    save_checkpoint(&ckpt, &Checkpoint::from_state(&state, &cfg)).unwrap();
    let preds = dir.path().join("preds");
    let out = dentgan(&["infer", "--checkpoint", p(&ckpt), "--images", p(&data.join("images")), "--out", p(&preds)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // tanh(0) = 0 decodes to gray (128, 128, 128), whose nearest palette color is crown
    for name in png_names(&preds).unwrap() {
        let mask = read_mask(&preds.join(name), &default_palette()).unwrap();
        assert!(mask.data().iter().all(|&c| c == CROWN));
    }
}

#[test]
fn resume_appends_to_the_same_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    phantoms(&data, "4");
    let args = ["--preset", "tiny", "--set", "epochs=3", "--set", "checkpoint_every=2", "train", "--data", p(&data)];
    let full = root.join("full");
    let part = root.join("part");
    let mut a = args.to_vec();
    a.extend(["--out", p(&full)]);
    assert!(dentgan(&a).status.success());
    let mut b = args.to_vec();
    b.extend(["--out", p(&part), "--max-steps", "2"]);
    assert!(dentgan(&b).status.success());
    let resume = part.join("ckpt-2.bin");
    let mut c = args.to_vec();
    c.extend(["--out", p(&part), "--resume", p(&resume)]);
    assert!(dentgan(&c).status.success());
    assert_eq!(fs::read(full.join("losses.csv")).unwrap(), fs::read(part.join("losses.csv")).unwrap());
    assert_eq!(fs::read(full.join("ckpt-6.bin")).unwrap(), fs::read(part.join("ckpt-6.bin")).unwrap());
}
