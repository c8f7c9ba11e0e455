use std::fs;
use std::path::Path;

use damim_cli::{dispatch, load_dir, CHECKPOINT, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, LAST_GOOD, TRAIN_LOG};
use damim_core::data::Checkpoint;
use damim_core::trainer::{encoder_config_from, load_encoder};

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("damim").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "regime = damim\nsteps = 6\ndepth = 2\ndim = 8\nheads = 2\nbatch_size = 8\n";

fn dataset(dir: &Path) {
    assert_eq!(run(&["gen-data", "--out", p(dir), "--per-class", "6", "--seed", "2"]), EXIT_OK);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["bogus"]), EXIT_USAGE);
    assert_eq!(run(&[]), EXIT_USAGE);
    assert_eq!(run(&["pretrain", "--out", "x"]), EXIT_USAGE);
    assert_eq!(run(&["analyze", "nothing"]), EXIT_USAGE);
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn gradcheck_passes_and_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.csv");
    assert_eq!(run(&["gradcheck", "--seed", "1", "--out", p(&out)]), EXIT_OK);
    let csv = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(rows.len() >= 20);
    assert!(rows.iter().all(|r| r.ends_with(",true")), "{csv}");
}

#[test]
fn gen_data_writes_two_domains() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let a = load_dir(&dir.path().join("a")).unwrap();
    let b = load_dir(&dir.path().join("b")).unwrap();
    assert_eq!((a.len(), b.len()), (30, 30));
    assert_eq!(a.labels, b.labels);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("domain,images,mean_intensity\na,30,"));
}

#[test]
fn pretrain_then_evaluate_and_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(&d.join("data"));
    fs::write(d.join("c.cfg"), TINY).unwrap();
    let (a, b) = (d.join("data/a"), d.join("data/b"));
    assert_eq!(run(&["pretrain", "--config", p(&d.join("c.cfg")), "--data", p(&a), "--out", p(&d.join("run"))]), EXIT_OK);
    let log = fs::read_to_string(d.join("run").join(TRAIN_LOG)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,regime,loss,alpha_1,alpha_2,ms");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("1,damim,"));
    let ck = Checkpoint::from_bytes(&fs::read(d.join("run").join(CHECKPOINT)).unwrap()).unwrap();
    assert_eq!(encoder_config_from(&ck).unwrap().depth, 2);
    assert!(load_encoder::<f32>(&ck).is_ok());
    assert!(ck.get("afr.proj.1").is_some());

    let ckpt = d.join("run").join(CHECKPOINT);
    let ev = d.join("ev.csv");
    assert_eq!(
        run(&["eval-fewshot", "--checkpoint", p(&ckpt), "--data", p(&b), "--out", p(&ev), "--episodes", "10", "--q", "1"]),
        EXIT_OK
    );
    let ev = fs::read_to_string(ev).unwrap();
    assert!(ev.lines().nth(1).unwrap().starts_with("5,5,1,10,proto,euclidean,"), "{ev}");

    let same = d.join("cka.csv");
    assert_eq!(run(&["analyze", "cka", "--checkpoint", p(&ckpt), "--source", p(&a), "--target", p(&a), "--out", p(&same)]), EXIT_OK);
    let v: f64 = fs::read_to_string(same).unwrap().lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!((v - 1.0).abs() < 1e-9, "{v}");

    let dis = d.join("dis.csv");
    assert_eq!(
        run(&["analyze", "disrupt", "--checkpoint", p(&ckpt), "--source", p(&a), "--target", p(&b), "--out", p(&dis), "--seeds", "1,2"]),
        EXIT_OK
    );
    assert_eq!(fs::read_to_string(dis).unwrap().lines().count(), 3);
}

#[test]
fn data_and_config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(&d.join("data"));
    let a = d.join("data/a");
    let out = d.join("o");
    assert_eq!(run(&["pretrain", "--data", p(&a), "--out", p(&out), "--set", "nope=1"]), EXIT_DATA);
    assert_eq!(run(&["pretrain", "--data", p(&a), "--out", p(&out), "--regime", "layer_9"]), EXIT_DATA);
    assert_eq!(run(&["pretrain", "--data", p(&d.join("missing")), "--out", p(&out)]), EXIT_DATA);
    fs::write(d.join("bad.cfg"), "steps = 1\nsteps = 2\n").unwrap();
    assert_eq!(run(&["pretrain", "--config", p(&d.join("bad.cfg")), "--data", p(&a), "--out", p(&out)]), EXIT_DATA);
    fs::write(d.join("junk.bin"), b"DAMIM01 not really").unwrap();
    let ev = d.join("ev.csv");
    assert_eq!(run(&["eval-fewshot", "--checkpoint", p(&d.join("junk.bin")), "--data", p(&a), "--out", p(&ev)]), EXIT_DATA);
    assert!(!ev.exists());
}

#[test]
fn numeric_abort_exits_three_with_last_good_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(&d.join("data"));
    fs::write(d.join("c.cfg"), TINY).unwrap();
    let out = d.join("run");
    let code = run(&[
        "pretrain", "--config", p(&d.join("c.cfg")), "--data", p(&d.join("data/a")), "--out", p(&out), "--lr", "1e38",
        "--regime", "pixel",
    ]);
    assert_eq!(code, EXIT_NUMERIC);
    let ck = Checkpoint::from_bytes(&fs::read(out.join(LAST_GOOD)).unwrap()).unwrap();
    assert!(load_encoder::<f32>(&ck).is_ok());
    assert!(!out.join(CHECKPOINT).exists());
}

#[test]
fn seeded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.cfg"), TINY).unwrap();
    for r in ["x", "y"] {
        let root = d.join(r);
        dataset(&root.join("data"));
        assert_eq!(
            run(&["pretrain", "--config", p(&d.join("c.cfg")), "--data", p(&root.join("data/a")), "--out", p(&root.join("run")), "--seed", "4"]),
            EXIT_OK
        );
    }
    for f in ["data/a/labels.csv", "data/b/img_00007.ppm", "data/summary.csv", "run/checkpoint.bin", "run/train_log.csv"] {
        assert_eq!(fs::read(d.join("x").join(f)).unwrap(), fs::read(d.join("y").join(f)).unwrap(), "{f}");
    }
    let z = d.join("z");
    assert_eq!(run(&["pretrain", "--config", p(&d.join("c.cfg")), "--data", p(&d.join("x/data/a")), "--out", p(&z), "--seed", "5"]), EXIT_OK);
    assert_ne!(fs::read(z.join(TRAIN_LOG)).unwrap(), fs::read(d.join("x/run").join(TRAIN_LOG)).unwrap());
}
