use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_dima");

fn dima(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("DIMA_SEED").output().expect("binary runs")
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into(), String::from_utf8_lossy(&o.stderr).into())
}

fn tmp(name: &str) -> PathBuf {
    let p = std::env::temp_dir().join(format!("dima-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&p);
    std::fs::create_dir_all(&p).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "seed = 7
train_data = {data}
val_data = {data}
out_dir = {out}
grid_resolution = 2.0
d = 16
heads = 2
ff_hidden = 16
encoder_layers = 1
planner_blocks = 1
n_q = 4
d_l = 16
lm_layers = 1
lm_heads = 2
lm_ff = 32
stage1_steps = 6
stage1_batch = 2
stage2_steps = 4
stage2_batch = 1
stage2_warmup = 2
checkpoint_every = 3
{extra}
",
            data = s(data),
            out = s(&dir.join("out")),
        ),
    )
    .unwrap();
    cfg
}

fn datagen(dir: &Path, count: &str) -> PathBuf {
    let data = dir.join("scenes.jsonl");
    let o = dima(&["datagen", "--out", s(&data), "--count", count, "--seed", "5"]);
    assert!(o.status.success(), "{:?}", text(&o));
    data
}

/// One tiny trained run shared by the eval and ask tests.
fn trained() -> &'static (PathBuf, PathBuf) {
    static RUN: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tmp("shared");
        let data = datagen(&dir, "12");
        let cfg = tiny_config(&dir, &data, "");
        let o = dima(&["train", "--config", s(&cfg)]);
        assert!(o.status.success(), "{:?}", text(&o));
        (dir.join("out"), data)
    })
}

#[test]
fn help_lists_flags_and_defaults() {
    let cases: &[(&str, &[&str])] = &[
        ("datagen", &["--out", "--count", "[default: 200]", "--seed", "DIMA_SEED", "--mix", "--exclude-kind"]),
        ("train", &["--config", "--stage", "[default: all]", "--resume", "--seed"]),
        (
            "eval",
            &["--checkpoint", "--dataset", "--split", "[default: full]", "--protocol", "[default: standardized]", "--dual", "--mllm-checkpoint", "--oracle", "--out", "--samples"],
        ),
        ("ask", &["--checkpoint", "--dataset", "--scene-id", "--question", "--max-len", "[default: 16]"]),
        ("report", &["--loss-csv", "--metrics-csv", "--out-svg"]),
        ("edit", &["--dataset", "--scene-id", "--seed", "--extent", "[default: 16]", "--out-svg"]),
    ];
    for (cmd, flags) in cases {
        let o = dima(&[cmd, "--help"]);
        assert!(o.status.success());
        let (out, _) = text(&o);
        for f in *flags {
            assert!(out.contains(f), "{cmd} --help lacks {f}:\n{out}");
        }
    }
    let (top, _) = text(&dima(&["--help"]));
    for cmd in ["datagen", "train", "eval", "ask", "report", "edit"] {
        assert!(top.contains(cmd));
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(dima(&["datagen", "--bogus"]).status.code(), Some(2));
    assert_eq!(dima(&[]).status.code(), Some(2));
}

#[test]
fn datagen_is_deterministic() {
    let dir = tmp("datagen-det");
    let a = dir.join("a.jsonl");
    let b = dir.join("b.jsonl");
    for p in [&a, &b] {
        assert!(dima(&["datagen", "--out", s(p), "--count", "30", "--seed", "3"]).status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = dir.join("c.jsonl");
    assert!(dima(&["datagen", "--out", s(&c), "--count", "30", "--seed", "4"]).status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn datagen_single_kind_mix() {
    let dir = tmp("datagen-mix");
    let out = dir.join("straight.jsonl");
    let o = dima(&["datagen", "--out", s(&out), "--count", "100", "--mix", "straight=1"]);
    assert!(o.status.success());
    let scenes = dima::world::load_dataset(&out).unwrap();
    assert_eq!(scenes.len(), 100);
    assert!(scenes.iter().all(|s| s.kind == dima::world::ScenarioKind::Straight));
}

#[test]
fn datagen_exclude_kind() {
    let dir = tmp("datagen-exclude");
    let out = dir.join("x.jsonl");
    let o = dima(&["datagen", "--out", s(&out), "--count", "120", "--exclude-kind", "three-point-turn", "--exclude-kind", "overtake"]);
    assert!(o.status.success());
    let scenes = dima::world::load_dataset(&out).unwrap();
    assert!(scenes.iter().all(|s| !matches!(
        s.kind,
        dima::world::ScenarioKind::ThreePointTurn | dima::world::ScenarioKind::Overtake
    )));
}

#[test]
fn datagen_bad_inputs_exit_2() {
    let dir = tmp("datagen-bad");
    let out = dir.join("x.jsonl");
    for mix in ["straight=0", "flying=1", "straight"] {
        let o = dima(&["datagen", "--out", s(&out), "--mix", mix]);
        assert_eq!(o.status.code(), Some(2), "{mix}");
    }
    let o = dima(&["datagen", "--out", s(&out), "--exclude-kind", "flying"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("flying"));

    let o = dima(&["datagen", "--out", "/nonexistent-dir/deeper/x.jsonl", "--count", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn datagen_seed_from_env_and_flag_wins() {
    let dir = tmp("datagen-env");
    let run = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let p = dir.join(name);
        let mut c = Command::new(BIN);
        c.args(["datagen", "--out", s(&p), "--count", "10"]).env_remove("DIMA_SEED");
        if let Some(e) = env {
            c.env("DIMA_SEED", e);
        }
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        assert!(c.output().unwrap().status.success());
        std::fs::read(p).unwrap()
    };
    let env9 = run("env9", Some("9"), None);
    let flag9 = run("flag9", None, Some("9"));
    let both = run("both", Some("1"), Some("9"));
    let default = run("default", None, None);
    assert_eq!(env9, flag9);
    assert_eq!(both, flag9);
    assert_ne!(default, flag9);
}

#[test]
fn train_rejects_unknown_config_key() {
    let dir = tmp("train-key");
    let data = datagen(&dir, "4");
    let cfg = tiny_config(&dir, &data, "learning_speed = 3");
    let o = dima(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("learning_speed"), "{:?}", text(&o));
}

#[test]
fn stage_two_needs_stage_one() {
    let dir = tmp("train-order");
    let data = datagen(&dir, "4");
    let cfg = tiny_config(&dir, &data, "");
    let o = dima(&["train", "--config", s(&cfg), "--stage", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_resume_is_idempotent() {
    let dir = tmp("train-resume");
    let data = datagen(&dir, "6");
    let cfg = tiny_config(&dir, &data, "");
    assert!(dima(&["train", "--config", s(&cfg)]).status.success());
    let out = dir.join("out");
    let files = ["stage1.ckpt", "stage2.ckpt", "loss_stage1.csv", "loss_stage2.csv"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(out.join(f)).unwrap()).collect();
    let o = dima(&["train", "--config", s(&cfg), "--resume"]);
    assert!(o.status.success(), "{:?}", text(&o));
    let after: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(out.join(f)).unwrap()).collect();
    assert_eq!(before, after);
    let log = String::from_utf8(before[2].clone()).unwrap();
    assert_eq!(log.lines().count(), 1 + 6);
}

#[test]
fn divergence_exits_3() {
    let dir = tmp("train-diverge");
    let data = datagen(&dir, "4");
    let cfg = tiny_config(&dir, &data, "stage1_lr = 1e300");
    let o = dima(&["train", "--config", s(&cfg), "--stage", "1"]);
    assert_eq!(o.status.code(), Some(3), "{:?}", text(&o));
    assert!(text(&o).1.contains("diverg"), "{:?}", text(&o));
}

#[test]
fn oracle_eval_prints_zero_errors() {
    let dir = tmp("eval-oracle");
    let data = datagen(&dir, "20");
    let rows = dir.join("metrics.csv");
    let o = dima(&["eval", "--oracle", "--dataset", s(&data), "--out", s(&rows)]);
    assert!(o.status.success(), "{:?}", text(&o));
    let csv = std::fs::read_to_string(&rows).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), dima::eval::METRICS_HEADER);
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    for v in &row[3..] {
        assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{csv}");
    }
    // A second run appends without repeating the header.
    assert!(dima(&["eval", "--oracle", "--dataset", s(&data), "--out", s(&rows)]).status.success());
    let csv = std::fs::read_to_string(&rows).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv.matches("split,").count(), 1);
}

#[test]
fn dual_without_language_checkpoint_exits_2() {
    let dir = tmp("eval-dual");
    let data = datagen(&dir, "3");
    let o = dima(&["eval", "--checkpoint", "x.ckpt", "--dataset", s(&data), "--dual"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("--mllm-checkpoint"));
}

#[test]
fn eval_without_checkpoint_or_oracle_is_usage_error() {
    let dir = tmp("eval-noarg");
    let data = datagen(&dir, "3");
    assert_eq!(dima(&["eval", "--dataset", s(&data)]).status.code(), Some(2));
}

#[test]
fn empty_split_warns_and_succeeds() {
    let dir = tmp("eval-empty");
    let data = dir.join("straight.jsonl");
    assert!(dima(&["datagen", "--out", s(&data), "--count", "5", "--mix", "straight=1"]).status.success());
    let rows = dir.join("m.csv");
    let o = dima(&["eval", "--oracle", "--dataset", s(&data), "--split", "longtail:overtake", "--out", s(&rows)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o).1.contains("warning"), "{:?}", text(&o));
    let csv = std::fs::read_to_string(rows).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains(",0,NA"), "{csv}");
}

#[test]
fn protocols_report_different_long_horizon_errors() {
    let (out, data) = trained();
    let ckpt = out.join("stage2.ckpt");
    let rows = out.join("protocols.csv");
    let _ = std::fs::remove_file(&rows);
    for p in ["standardized", "vad"] {
        let o = dima(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(data), "--protocol", p, "--out", s(&rows)]);
        assert!(o.status.success(), "{:?}", text(&o));
    }
    let csv = std::fs::read_to_string(&rows).unwrap();
    let t = dima::report::Table::parse(&csv).unwrap();
    let c = t.column("l2_3s").unwrap();
    let a: f64 = t.rows[0][c].parse().unwrap();
    let b: f64 = t.rows[1][c].parse().unwrap();
    assert!(a > 0.0 && b > 0.0);
    assert_ne!(a, b, "{csv}");
}

#[test]
fn dual_eval_runs_with_both_checkpoints() {
    let (out, data) = trained();
    let ckpt = out.join("stage2.ckpt");
    let samples = out.join("dual_samples.csv");
    let o = dima(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--mllm-checkpoint",
        s(&ckpt),
        "--dual",
        "--dataset",
        s(data),
        "--samples",
        s(&samples),
    ]);
    assert!(o.status.success(), "{:?}", text(&o));
    assert_eq!(std::fs::read_to_string(samples).unwrap().lines().count(), 1 + 12);
}

#[test]
fn ask_rejects_unknown_words() {
    let (out, data) = trained();
    let scenes = dima::world::load_dataset(data).unwrap();
    let id = scenes[0].id.to_string();
    let o = dima(&[
        "ask",
        "--checkpoint",
        s(&out.join("stage2.ckpt")),
        "--dataset",
        s(data),
        "--scene-id",
        &id,
        "--question",
        "what does the zeppelin wibble",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let (_, err) = text(&o);
    assert!(err.contains("zeppelin") && err.contains("wibble"), "{err}");
}

#[test]
fn ask_answers_repeatably() {
    let (out, data) = trained();
    let scenes = dima::world::load_dataset(data).unwrap();
    let id = scenes[1].id.to_string();
    let ckpt = out.join("stage2.ckpt");
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let q = dima::language::scene_qa(&scenes[1], dima::language::QaCategory::Planning, &mut rng)
        .unwrap()
        .question_text();
    let args = ["ask", "--checkpoint", s(&ckpt), "--dataset", s(data), "--scene-id", &id, "--question", &q, "--max-len", "6"];
    let a = dima(&args);
    assert!(a.status.success(), "{:?}", text(&a));
    let b = dima(&args);
    assert_eq!(a.stdout, b.stdout);
    assert!(text(&a).0.split_whitespace().count() <= 6);

    let o = dima(&["ask", "--checkpoint", s(&ckpt), "--dataset", s(data), "--scene-id", "424242", "--question", &q]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_writes_golden_svgs() {
    let dir = tmp("report");
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    for (flag, csv, golden) in [("--loss-csv", "loss.csv", "loss.svg"), ("--metrics-csv", "metrics.csv", "metrics.svg")] {
        let out = dir.join(golden);
        let o = dima(&["report", flag, s(&fixtures.join(csv)), "--out-svg", s(&out)]);
        assert!(o.status.success(), "{:?}", text(&o));
        assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(fixtures.join(golden)).unwrap());
    }
}

#[test]
fn report_errors_exit_2() {
    let dir = tmp("report-bad");
    let svg = dir.join("x.svg");
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let o = dima(&["report", "--loss-csv", s(&dir.join("missing.csv")), "--out-svg", s(&svg)]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.join("bad.csv");
    std::fs::write(&bad, "step,planning\n0,1\n").unwrap();
    let o = dima(&["report", "--loss-csv", s(&bad), "--out-svg", s(&svg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("missing column"));

    let o = dima(&["report", "--loss-csv", s(&fixtures.join("loss.csv")), "--metrics-csv", s(&fixtures.join("metrics.csv")), "--out-svg", s(&svg)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(dima(&["report", "--out-svg", s(&svg)]).status.code(), Some(2));
}

#[test]
fn edit_prints_question_and_answer() {
    let dir = tmp("edit");
    let data = datagen(&dir, "5");
    let scenes = dima::world::load_dataset(&data).unwrap();
    let id = scenes[2].id.to_string();
    let svg = dir.join("edit.svg");
    let args = ["edit", "--dataset", s(&data), "--scene-id", &id, "--seed", "1", "--out-svg", s(&svg)];
    let a = dima(&args);
    assert!(a.status.success(), "{:?}", text(&a));
    let (out, _) = text(&a);
    assert!(out.contains("\nQ: ") && out.contains("\nA: "), "{out}");
    assert_eq!(a.stdout, dima(&args).stdout);
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));
}
