use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use promptcl::encoder::load_checkpoint;
use promptcl::eval::{alignment, density, embed_sentences, spearman, uniformity};
use promptcl::tensor::cosine_values;
use promptcl::text::{load_pairs, write_corpus};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptcl"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic world plus one short unsupervised run.
struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        ok(&[
            "synth",
            "--out",
            s(&dir),
            "--clusters",
            "8",
            "--per-cluster",
            "12",
            "--triplets-per-cluster",
            "8",
            "--pairs",
            "40",
            "--queries",
            "20",
        ]);
        Self { _tmp: tmp, dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn train_unsup(&self, out: &str) -> PathBuf {
        let run = self.path(out);
        ok(&[
            "train-unsup",
            "--corpus",
            s(&self.path("corpus.txt")),
            "--dev",
            s(&self.path("sts-dev.tsv")),
            "--out",
            s(&run),
            "--eval-every",
            "2",
            "--seed",
            "42",
        ]);
        run
    }
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn training_twice_gives_identical_run_directories() {
    let f = Fixture::new();
    let a = read_tree(&f.train_unsup("run-a"));
    let b = read_tree(&f.train_unsup("run-b"));
    assert!(a.contains_key(Path::new("checkpoints/best.ckpt")));
    assert!(a.contains_key(Path::new("runlog.jsonl")));
    assert!(a.contains_key(Path::new("config.json")));
    assert_eq!(a, b);
}

#[test]
fn embeddings_are_reproducible_and_rescore_to_eval_sts() {
    let f = Fixture::new();
    let run = f.train_unsup("run");
    let pairs = load_pairs(&f.path("sts-test.tsv")).unwrap();
    let sents: Vec<String> = pairs
        .iter()
        .flat_map(|p| [p.a.clone(), p.b.clone()])
        .collect();
    write_corpus(&f.path("pair-sents.txt"), &sents).unwrap();

    let emb = f.path("emb/e.tsv");
    let corpus = f.path("pair-sents.txt");
    let args = [
        "embed",
        "--ckpt",
        s(&run),
        "--corpus",
        s(&corpus),
        "--out",
        s(&emb),
    ];
    ok(&args);
    let first = std::fs::read(&emb).unwrap();
    ok(&args);
    assert_eq!(first, std::fs::read(&emb).unwrap());

    let text = String::from_utf8(first).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let mut cols = l.split('\t');
            assert_eq!(cols.next().unwrap(), i.to_string());
            cols.map(|c| c.parse().unwrap()).collect()
        })
        .collect();
    assert_eq!(rows.len(), sents.len());
    assert!(rows.iter().all(|r| r.len() == 32));

    let pred: Vec<f64> = rows
        .chunks(2)
        .map(|c| cosine_values(&c[0], &c[1]).unwrap())
        .collect();
    let gold: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    let rescored = format!("{:.2}", 100.0 * spearman(&gold, &pred).unwrap());

    let table = ok(&[
        "eval-sts",
        "--ckpt",
        s(&run),
        "--pairs",
        s(&f.path("sts-test.tsv")),
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "pairs\tspearman");
    let value = lines[1].split('\t').nth(1).unwrap();
    let (_, decimals) = value.split_once('.').unwrap();
    assert_eq!(decimals.len(), 2);
    assert_eq!(value, rescored);
}

#[test]
fn analyze_matches_individual_metrics() {
    let f = Fixture::new();
    let run = f.train_unsup("run");
    let csv = f.path("out/density.csv");
    let table = ok(&[
        "analyze",
        "--ckpt",
        s(&run),
        "--pairs",
        s(&f.path("sts-dev.tsv")),
        "--density-out",
        s(&csv),
        "--bins",
        "10",
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "alignment\tuniformity\tpositives\tsentences");
    let vals: Vec<&str> = lines[1].split('\t').collect();

    let ck = load_checkpoint(&run.join("checkpoints/best.ckpt")).unwrap();
    let vocab = ck.vocab.unwrap();
    let pairs = load_pairs(&f.path("sts-dev.tsv")).unwrap();
    let emb = |v: Vec<String>| embed_sentences(&ck.state, &vocab, &v, false, 32).unwrap();
    let pos: Vec<_> = pairs.iter().filter(|p| p.score >= 4.0).collect();
    let ea = emb(pos.iter().map(|p| p.a.clone()).collect());
    let eb = emb(pos.iter().map(|p| p.b.clone()).collect());
    let align = alignment(&ea.into_iter().zip(eb).collect::<Vec<_>>()).unwrap();
    let mut distinct: Vec<String> = pairs
        .iter()
        .flat_map(|p| [p.a.clone(), p.b.clone()])
        .collect();
    distinct.sort();
    distinct.dedup();
    let unif = uniformity(&emb(distinct.clone())).unwrap();

    assert_eq!(vals[0].parse::<f64>().unwrap(), align);
    assert_eq!(vals[1].parse::<f64>().unwrap(), unif);
    assert_eq!(vals[2], pos.len().to_string());
    assert_eq!(vals[3], distinct.len().to_string());

    let a = emb(pairs.iter().map(|p| p.a.clone()).collect());
    let b = emb(pairs.iter().map(|p| p.b.clone()).collect());
    let pred: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| cosine_values(x, y).unwrap())
        .collect();
    let gold: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    let expected = density(&gold, &pred, 10).unwrap().to_csv();
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), expected);
    assert_eq!(expected.lines().count(), 1 + 5 * 10);
}

#[test]
fn config_file_sets_flags_and_command_line_wins() {
    let f = Fixture::new();
    let conf = f.path("train.conf");
    std::fs::write(
        &conf,
        "# toy\nbatch_size = 8\nepochs=2\nprompt-len=3\nprompt_type=shared\n",
    )
    .unwrap();
    let run = f.path("run");
    ok(&[
        "train-sup",
        "--config",
        s(&conf),
        "--triplets",
        s(&f.path("triplets.tsv")),
        "--out",
        s(&run),
        "--epochs",
        "1",
        "--lambda",
        "0",
    ]);
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["batch_size"], 8);
    assert_eq!(cfg["epochs"], 1);
    assert_eq!(cfg["mode"], "supervised");
    assert_eq!(cfg["encoder"]["prompt_len"], 3);
    assert_eq!(cfg["encoder"]["prompt_type"], "shared");
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    assert_eq!(cli(&["train-unsup", "--bogus"]).status.code(), Some(1));
    let missing = cli(&[
        "train-unsup",
        "--corpus",
        s(&f.path("nope.txt")),
        "--out",
        s(&f.path("r")),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    let bad_param = cli(&[
        "sweep",
        "--param",
        "colour",
        "--values",
        "1,2",
        "--corpus",
        s(&f.path("corpus.txt")),
        "--test",
        s(&f.path("sts-test.tsv")),
    ]);
    assert_eq!(bad_param.status.code(), Some(1));

    let run = f.train_unsup("run");
    std::fs::write(f.path("blocker"), "file").unwrap();
    let unwritable = cli(&[
        "embed",
        "--ckpt",
        s(&run),
        "--corpus",
        s(&f.path("corpus.txt")),
        "--out",
        s(&f.path("blocker/sub/e.tsv")),
    ]);
    assert_eq!(unwritable.status.code(), Some(2));

    std::fs::write(
        f.path("wrong-vocab.txt"),
        "[PAD]\n[UNK]\n[CLS]\n[SEP]\nzz\n",
    )
    .unwrap();
    let mismatch = cli(&[
        "embed",
        "--ckpt",
        s(&run),
        "--vocab",
        s(&f.path("wrong-vocab.txt")),
        "--corpus",
        s(&f.path("corpus.txt")),
        "--out",
        s(&f.path("e.tsv")),
    ]);
    assert_eq!(mismatch.status.code(), Some(1));
}

#[test]
fn bootstrap_command_is_deterministic() {
    let f = Fixture::new();
    let run = f.train_unsup("run");
    let dense = f.path("dense.tsv");
    let args = [
        "eval-bootstrap",
        "--ckpt",
        s(&run),
        "--dense",
        s(&dense),
        "--resamples",
        "50",
    ];
    let a = ok(&args);
    assert_eq!(a, ok(&args));
    assert_eq!(a.lines().next().unwrap(), "mean\tstd\tfull\tresamples");
}
