use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nts"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = nts(args);
    assert!(
        out.status.success(),
        "nts {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_of_failure(args: &[&str]) -> String {
    let out = nts(args);
    assert!(!out.status.success(), "nts {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const ORD: &str = "orda ordb ordc\nordb ordc ordd\nordc ordd orde\nordd orde orda\n";
const SIMP: &str = "simpa simpb simpc\nsimpb simpc simpd\nsimpc simpd simpe\nsimpd simpe simpa\n";

fn write_parallel(dir: &Path) {
    fs::write(dir.join("train.ord"), ORD).unwrap();
    fs::write(dir.join("train.simp"), SIMP).unwrap();
}

fn train_small(dir: &Path, out: &Path, extra: &[&str]) {
    let (ord, simp) = (dir.join("train.ord"), dir.join("train.simp"));
    let mut args = vec![
        "train",
        "--train-ord", p(&ord),
        "--train-simp", p(&simp),
        "--out", p(out),
        "--embed-dim", "6", "--hidden-dim", "8", "--attention-dim", "6",
        "--epochs", "20", "--learning-rate", "0.5", "--dropout", "0",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn unknown_subcommand_and_missing_flags_fail() {
    assert!(!nts(&["frobnicate"]).status.success());
    let err = stderr_of_failure(&["train"]);
    assert!(err.contains("--train-ord"), "{err}");
    assert!(nts(&["--help"]).status.success());
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    write_parallel(dir.path());
    let cfg = dir.path().join("bad.toml");

    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let err = stderr_of_failure(&[
        "train", "--config", p(&cfg),
        "--train-ord", p(&dir.path().join("train.ord")),
        "--train-simp", p(&dir.path().join("train.simp")),
        "--out", p(&dir.path().join("o1")),
    ]);
    assert!(err.contains("epochz"), "{err}");

    fs::write(&cfg, "[train]\ndropout = 2.0\n").unwrap();
    let err = stderr_of_failure(&[
        "train", "--config", p(&cfg),
        "--train-ord", p(&dir.path().join("train.ord")),
        "--train-simp", p(&dir.path().join("train.simp")),
        "--out", p(&dir.path().join("o2")),
    ]);
    assert!(err.contains("train.dropout"), "{err}");
}

#[test]
fn missing_input_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let err = stderr_of_failure(&["preprocess", "--input", p(&missing), "--out", p(dir.path())]);
    assert!(err.contains("nope.txt"), "{err}");
}

#[test]
fn pipeline_requires_sample_n() {
    let dir = tempfile::tempdir().unwrap();
    write_parallel(dir.path());
    let f = |n: &str| dir.path().join(n);
    let err = stderr_of_failure(&[
        "pipeline",
        "--train-ord", p(&f("train.ord")),
        "--train-simp", p(&f("train.simp")),
        "--simplified", p(&f("train.simp")),
        "--test-ord", p(&f("train.ord")),
        "--test-refs", p(&f("train.simp")),
        "--out", p(&f("out")),
    ]);
    assert!(err.contains("sample"), "{err}");
}

#[test]
fn beam_one_matches_greedy() {
    let dir = tempfile::tempdir().unwrap();
    write_parallel(dir.path());
    let out = dir.path().join("model");
    train_small(dir.path(), &out, &[]);
    let common = |output: &str| {
        vec![
            "translate".to_string(),
            "--checkpoint".into(), p(&out.join("model.ckpt")).into(),
            "--src-vocab".into(), p(&out.join("src.vocab")).into(),
            "--tgt-vocab".into(), p(&out.join("tgt.vocab")).into(),
            "--input".into(), p(&dir.path().join("train.ord")).into(),
            "--output".into(), p(&dir.path().join(output)).into(),
            "--out".into(), p(&dir.path().join("t")).into(),
        ]
    };
    let mut a = common("beam.txt");
    a.extend(["--beam".into(), "1".into()]);
    let mut g = common("greedy.txt");
    g.push("--greedy".into());
    ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    ok(&g.iter().map(String::as_str).collect::<Vec<_>>());
    let beam = fs::read_to_string(dir.path().join("beam.txt")).unwrap();
    let greedy = fs::read_to_string(dir.path().join("greedy.txt")).unwrap();
    assert_eq!(beam, greedy);
    assert_eq!(beam.lines().count(), 4);
}

#[test]
fn evaluate_perfect_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let f = |n: &str| dir.path().join(n);
    let refs = "the cat sat on the mat .\nit was a very good day .\n";
    fs::write(f("out.txt"), refs).unwrap();
    fs::write(f("ref.txt"), refs).unwrap();
    fs::write(f("src.txt"), "the feline sat upon the mat .\nit was an excellent day .\n").unwrap();
    let stdout = ok(&[
        "evaluate",
        "--outputs", p(&f("out.txt")),
        "--sources", p(&f("src.txt")),
        "--refs", p(&f("ref.txt")),
        "--name", "oracle",
        "--out", p(&f("eval")),
    ]);
    assert!(stdout.contains("oracle"), "{stdout}");
    let kv = fs::read_to_string(f("eval").join("report.kv")).unwrap();
    assert!(kv.contains("bleu=100.00"), "{kv}");
    assert!(kv.contains("sari=100.00"), "{kv}");
    assert!(kv.contains("sentences=2"), "{kv}");

    fs::write(f("short.txt"), "the cat sat on the mat .\n").unwrap();
    let err = stderr_of_failure(&[
        "evaluate",
        "--outputs", p(&f("short.txt")),
        "--sources", p(&f("src.txt")),
        "--refs", p(&f("ref.txt")),
        "--out", p(&f("eval2")),
    ]);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn preprocess_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("raw.txt");
    let text = "The quick brown fox jumps over the lazy dog near the river bank. \
                Dr. Smith lives in a small house that stands at the end of the road! \
                Too short.\n";
    fs::write(&input, text).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out_a = ok(&["preprocess", "--input", p(&input), "--out", p(&a)]);
    let out_b = ok(&["preprocess", "--input", p(&input), "--out", p(&b)]);
    assert_eq!(out_a, out_b);
    assert!(out_a.contains("sentences_in = 3"), "{out_a}");
    assert!(out_a.contains("sentences_out = 2"), "{out_a}");
    for name in ["corpus.txt", "vocab.txt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn run_log_reproduces_training() {
    let dir = tempfile::tempdir().unwrap();
    write_parallel(dir.path());
    let first = dir.path().join("first");
    train_small(dir.path(), &first, &["--seed", "17"]);
    let log = fs::read_to_string(first.join("run.log")).unwrap();
    assert!(log.starts_with("# command:"), "{log}");
    assert!(log.contains("seed = 17"), "{log}");

    let second = dir.path().join("second");
    ok(&[
        "train",
        "--config", p(&first.join("run.log")),
        "--train-ord", p(&dir.path().join("train.ord")),
        "--train-simp", p(&dir.path().join("train.simp")),
        "--out", p(&second),
    ]);
    assert_eq!(
        fs::read(first.join("model.ckpt")).unwrap(),
        fs::read(second.join("model.ckpt")).unwrap()
    );

    let third = dir.path().join("third");
    train_small(dir.path(), &third, &["--seed", "18"]);
    assert_ne!(
        fs::read(first.join("model.ckpt")).unwrap(),
        fs::read(third.join("model.ckpt")).unwrap()
    );
}
