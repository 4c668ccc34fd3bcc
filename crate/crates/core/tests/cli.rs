use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn matr(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_matr"));
    cmd.args(args).env_remove("MATR_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 10] = [
    "--set",
    "data.train_sequences=2",
    "--set",
    "data.eval_sequences=1",
    "--set",
    "data.collision_clips=1",
    "--set",
    "data.sequence_length=6",
    "--set",
    "train.steps=3",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(SMALL);
    v
}

fn metric(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing from:\n{text}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn synth_train_track_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let data = p("data");

    let o = matr(&with_small(&["synth", "--out", &data]), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for split in ["train", "eval", "collision"] {
        assert!(Path::new(&data).join(split).join("seq-0000/gt.txt").exists(), "{split}");
    }
    assert!(Path::new(&data).join("eval/seq-0000/img/000001.png").exists());

    // Ground truth scored against itself.
    let gt = p("data/eval/seq-0000/gt.txt");
    let o = matr(&["eval", "--gt", &gt, "--result", &gt, "--out", &p("self")], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = fs::read_to_string(p("self/metrics.txt")).unwrap();
    for key in ["hota", "deta", "assa", "mota", "idf1"] {
        assert_eq!(metric(&m, key), 1.0, "{key}");
    }
    assert_eq!(fs::read_to_string(p("self/hota_curve.csv")).unwrap().lines().count(), 20);

    let o = matr(&with_small(&["train", "--dataset", &data, "--out", &p("run")]), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = p("run/checkpoint_seed0.json");
    let loss = fs::read_to_string(p("run/loss_seed0.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,total,traj,cls,box_l1,box_giou"));
    assert_eq!(loss.lines().count(), 4);
    let sum = fs::read_to_string(p("run/checkpoint_seed0.sha256")).unwrap();
    assert_eq!(sum.trim().len(), 64);

    let result = p("out/result.txt");
    let o = matr(
        &["track", "--checkpoint", &ckpt, "--sequence", &p("data/eval/seq-0000"), "--out", &result],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(Path::new(&result).exists());
    let o = matr(&["eval", "--gt", &gt, "--result", &result, "--out", &p("scored")], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let hota = metric(&fs::read_to_string(p("scored/metrics.txt")).unwrap(), "hota");
    assert!((0.0..=1.0).contains(&hota));

    let o = matr(&["collide", "--checkpoint", &ckpt, "--dataset", &data, "--out", &p("col")], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(p("col/collision_seed0.csv")).unwrap().starts_with("# mean="));
}

#[test]
fn tracks_a_single_frame_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let o = matr(&with_small(&["synth", "--out", &p("data")]), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = matr(&with_small(&["train", "--dataset", &p("data"), "--out", &p("run")]), &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    // A sequence holding only the first frame of an eval sequence.
    let one = p("one");
    fs::create_dir_all(format!("{one}/img")).unwrap();
    fs::copy(p("data/eval/seq-0000/img/000001.png"), format!("{one}/img/000001.png")).unwrap();
    let gt: String = fs::read_to_string(p("data/eval/seq-0000/gt.txt"))
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("1,"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(format!("{one}/gt.txt"), gt).unwrap();
    fs::write(format!("{one}/seqinfo"), "name=one\nlength=1\nwidth=64\nheight=64\n").unwrap();
    let result = p("r.txt");
    let o = matr(
        &["track", "--checkpoint", &p("run/checkpoint_seed0.json"), "--sequence", &one, "--out", &result],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&result).unwrap();
    assert!(text.lines().all(|l| l.starts_with("1,")), "{text}");
}

#[test]
fn prints_resolved_config_and_respects_seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# comment\nseed = 4\nmodel.dim = 32\n").unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    let gt = dir.path().join("gt.txt");
    fs::write(&gt, "1,1,10,10,8,8,1,-1,-1,-1\n").unwrap();
    let gt = gt.to_string_lossy().into_owned();
    let out = dir.path().join("m").to_string_lossy().into_owned();
    let base = ["--config", &cfg, "eval", "--gt", &gt, "--result", &gt, "--out", &out];

    let seed_of = |o: &Output| {
        assert!(o.status.success(), "{}", stderr(o));
        let s = stdout(o);
        assert!(s.contains("model.dim = 32"));
        metric(&s, "seed") as u64
    };
    assert_eq!(seed_of(&matr(&base, &[])), 4);
    assert_eq!(seed_of(&matr(&base, &[("MATR_SEED", "7")])), 7);
    let mut flagged = base.to_vec();
    flagged.extend(["--seed", "9"]);
    assert_eq!(seed_of(&matr(&flagged, &[("MATR_SEED", "7")])), 9);

    // The printed configuration parses back to the same settings.
    let printed = stdout(&matr(&base, &[]));
    let reparsed = matr::config::RunConfig::parse(&printed, Path::new("printed")).unwrap();
    assert_eq!(reparsed.to_text(), matr::config::RunConfig::parse(&reparsed.to_text(), Path::new("again")).unwrap().to_text());
    assert_eq!(reparsed.model.dim, 32);
}

#[test]
fn error_lines_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope").to_string_lossy().into_owned();
    let out = dir.path().join("o").to_string_lossy().into_owned();

    let o = matr(&["--set", "model.bogus=1", "synth", "--out", &out], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error kind=config code=1 message="), "{}", stderr(&o));

    let o = matr(&["synth"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error kind=usage code=1"));

    let o = matr(&["synth", "--out", &out], &[("MATR_SEED", "minus one")]);
    assert_eq!(o.status.code(), Some(1));

    let o = matr(&["train", "--dataset", &missing, "--out", &out], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error kind=input code=2"), "{}", stderr(&o));

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "1,1,ten,10,8,8,1\n").unwrap();
    let bad = bad.to_string_lossy().into_owned();
    let o = matr(&["eval", "--gt", &bad, "--result", &bad, "--out", &out], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error kind=parse code=2"), "{}", stderr(&o));

    let o = matr(&["--help"], &[]);
    assert!(o.status.success());
}
