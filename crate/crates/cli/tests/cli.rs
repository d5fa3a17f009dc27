use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protoedit::synthetic::{substitution_corpus, templated_corpus, SubstitutionSpec, TemplateSpec};

const SMALL: &[&str] = &[
    "hidden=8",
    "word_dim=8",
    "edit_word_dim=4",
    "epochs=2",
    "batch_size=8",
    "lr=0.01",
    "max_len=14",
    "mine_seeds=40",
    "mine_budget=150",
    "n_seq=6",
    "steps=3",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_protoedit"))
}

fn run(args: &[&str]) -> Output {
    let mut cmd = bin();
    cmd.args(args).env("PROTOEDIT_LOG", "error");
    for kv in SMALL {
        cmd.args(["--set", kv]);
    }
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).expect("utf-8")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn new() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        let split = templated_corpus(&TemplateSpec {
            bases: 12,
            train: 120,
            valid: 12,
            test: 12,
            seed: 4,
            ..TemplateSpec::default()
        })
        .unwrap();
        fs::write(root.join("train.txt"), split.train.join("\n") + "\n").unwrap();
        fs::write(root.join("valid.txt"), split.valid.join("\n") + "\n").unwrap();
        fs::write(root.join("test.txt"), split.test.join("\n") + "\n").unwrap();
        let f = Self { _dir: dir, root };
        run(&["preprocess", "--input", p(&f.path("train.txt")), "--out-dir", p(&f.path("data"))]);
        run(&["mine", "--data", p(&f.path("data")), "--out", p(&f.path("pairs.tsv"))]);
        f
    }

    fn train(&self, name: &str, extra: &[&str]) -> (Vec<u8>, Vec<u8>) {
        let ck = self.path(&format!("{name}.ckpt"));
        let metrics = self.path(&format!("{name}.csv"));
        let (data, pairs) = (self.path("data"), self.path("pairs.tsv"));
        let mut args = vec!["train", "--data", p(&data), "--pairs", p(&pairs)];
        args.extend(["--out", p(&ck), "--metrics", p(&metrics)]);
        args.extend(extra);
        run(&args);
        (fs::read(&ck).unwrap(), fs::read(&metrics).unwrap())
    }
}

fn jaccard_distance(a: &str, b: &str) -> f64 {
    let a: BTreeSet<&str> = a.split_whitespace().collect();
    let b: BTreeSet<&str> = b.split_whitespace().collect();
    1.0 - a.intersection(&b).count() as f64 / a.union(&b).count() as f64
}

#[test]
fn mined_pairs_pass_reverification() {
    let f = Fixture::new();
    let corpus: Vec<String> = fs::read_to_string(f.path("data/corpus.txt"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    let tsv = fs::read_to_string(f.path("pairs.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let cols: Vec<&str> = row.split('\t').collect();
        let (a, b): (usize, usize) = (cols[0].parse().unwrap(), cols[1].parse().unwrap());
        let d = jaccard_distance(&corpus[a], &corpus[b]);
        assert!(d < 0.5, "row {row}: recomputed distance {d}");
        assert!((d - cols[2].parse::<f64>().unwrap()).abs() < 1e-12);
    }
}

#[test]
fn train_with_same_seed_is_byte_identical() {
    let f = Fixture::new();
    let (ck_a, m_a) = f.train("a", &["--seed", "7"]);
    let (ck_b, m_b) = f.train("b", &["--seed", "7"]);
    assert_eq!(m_a, m_b);
    assert_eq!(ck_a, ck_b);
    let (_, m_c) = f.train("c", &["--seed", "8"]);
    assert_ne!(m_a, m_c);
    let text = String::from_utf8(m_a).unwrap();
    assert!(text.starts_with("epoch,mean_loss,tokens_per_sec\n"));
    assert_eq!(text.lines().count(), 3);
}

fn eval_args(f: &Fixture, out: &Path) -> Vec<String> {
    [
        "eval-ppl",
        "--data",
        p(&f.path("data")),
        "--editor",
        p(&f.path("e.ckpt")),
        "--nlm",
        p(&f.path("nlm.ckpt")),
        "--valid",
        p(&f.path("valid.txt")),
        "--test",
        p(&f.path("test.txt")),
        "--out",
        p(out),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn train_both(f: &Fixture) {
    f.train("e", &[]);
    run(&["train-nlm", "--data", p(&f.path("data")), "--out", p(&f.path("nlm.ckpt"))]);
}

fn summary_value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .trim()
        .to_string()
}

#[test]
fn lambda_zero_gives_language_model_perplexity() {
    let f = Fixture::new();
    train_both(&f);
    let csv = f.path("ppl.csv");
    let mut args = eval_args(&f, &csv);
    args.extend(["--lambda-grid".to_string(), "0".to_string()]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let text = stdout(&run(&args));
    assert_eq!(
        summary_value(&text, "smoothed perplexity:"),
        summary_value(&text, "nlm perplexity:")
    );
    let rows = fs::read_to_string(&csv).unwrap();
    for row in rows.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[5], cols[6], "row {row}");
    }
}

#[test]
fn every_subcommand_reproduces_its_outputs() {
    let f = Fixture::new();
    train_both(&f);
    let data = f.path("data");
    let model = f.path("e.ckpt");
    let proto = fs::read_to_string(f.path("test.txt")).unwrap().lines().next().unwrap().to_string();

    let sub = substitution_corpus(&SubstitutionSpec {
        slot_words: 8,
        bases: 20,
        ..SubstitutionSpec::default()
    })
    .unwrap();
    fs::write(f.path("sub.txt"), sub.sentences.join("\n")).unwrap();
    let rel: String = sub.pairs.iter().map(|(a, b)| format!("{a} {b}\n")).collect();
    fs::write(f.path("relations.txt"), rel).unwrap();
    run(&["preprocess", "--input", p(&f.path("sub.txt")), "--out-dir", p(&f.path("subdata"))]);
    run(&["mine", "--data", p(&f.path("subdata")), "--out", p(&f.path("subpairs.tsv"))]);
    let sub_model = f.path("sub.ckpt");
    run(&[
        "train",
        "--data",
        p(&f.path("subdata")),
        "--pairs",
        p(&f.path("subpairs.tsv")),
        "--out",
        p(&sub_model),
    ]);

    let out = f.path("out.txt");
    let invocations: Vec<Vec<String>> = vec![
        eval_args(&f, &out),
        vec!["generate", "--data", p(&data), "--model", p(&model), "--prototype", &proto, "--count", "4", "--out", p(&out)]
            .into_iter()
            .map(String::from)
            .collect(),
        vec!["walk", "--data", p(&data), "--model", p(&model), "--start", &proto, "--out", p(&out)]
            .into_iter()
            .map(String::from)
            .collect(),
        vec!["control", "--data", p(&data), "--model", p(&model), "--prototype", &proto, "--shorter-than", "9", "--out", p(&out)]
            .into_iter()
            .map(String::from)
            .collect(),
        vec![
            "analogy",
            "--data",
            p(&f.path("subdata")),
            "--model",
            p(&sub_model),
            "--relations",
            p(&f.path("relations.txt")),
            "--max-quads",
            "6",
            "--out",
            p(&out),
        ]
        .into_iter()
        .map(String::from)
        .collect(),
    ];
    for args in invocations {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let first = run(&args);
        let first_file = fs::read(&out).unwrap();
        let second = run(&args);
        assert_eq!(first.stdout, second.stdout, "{}", args[0]);
        assert_eq!(first_file, fs::read(&out).unwrap(), "{}", args[0]);
        assert!(!first_file.is_empty(), "{}", args[0]);
    }
}

#[test]
fn echoed_config_reproduces_the_run() {
    let f = Fixture::new();
    let (_, metrics) = f.train("a", &["--seed", "3", "--kappa", "10"]);
    // Feed the echo back as a config file, without the flag overrides.
    let out = run(&["mine", "--data", p(&f.path("data")), "--out", p(&f.path("p2.tsv")), "--seed", "3", "--kappa", "10"]);
    let echo: String = stdout(&out).lines().skip(1).take_while(|l| l.contains('=') && !l.contains(' ')).map(|l| format!("{l}\n")).collect();
    fs::write(f.path("echo.cfg"), echo).unwrap();
    let ck = f.path("b.ckpt");
    let m = f.path("b.csv");
    let o = bin()
        .args(["train", "--config", p(&f.path("echo.cfg")), "--data", p(&f.path("data"))])
        .args(["--pairs", p(&f.path("pairs.tsv")), "--out", p(&ck), "--metrics", p(&m)])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&m).unwrap(), metrics);
}

fn failure(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("binary runs");
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "multi-line error: {err}");
    err
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let f = Fixture::new();
    let data = f.path("data");
    let err = failure(&["mine", "--data", p(&data), "--out", p(&f.path("x.tsv")), "--set", "bogus=1"]);
    assert!(err.contains("bogus"));
    let err = failure(&["mine", "--data", p(&f.path("missing")), "--out", p(&f.path("x.tsv"))]);
    assert!(err.contains("missing"));
    fs::write(f.path("bad.ckpt"), b"not a checkpoint").unwrap();
    failure(&["walk", "--data", p(&data), "--model", p(&f.path("bad.ckpt")), "--start", "a b"]);
    let cfg = f.path("bad.cfg");
    fs::write(&cfg, "seed=1\nseed=2\n").unwrap();
    failure(&["mine", "--config", p(&cfg), "--data", p(&data), "--out", p(&f.path("x.tsv"))]);
    let pairs = f.path("pairs.tsv");
    let err = failure(&["train", "--data", p(&data), "--pairs", p(&pairs), "--out", p(&f.path("x.ckpt")), "--set", "hidden=x"]);
    assert!(err.contains("hidden"));
    failure(&["train", "--data", p(&data)]);
}
