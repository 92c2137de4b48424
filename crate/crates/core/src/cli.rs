//! Command-line surface. Every command is a pure function of its inputs,
//! flags and `--seed`; stdout tables are tab-separated with a header row.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime error.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::encoder::{import_backbone_blob, load_checkpoint, Checkpoint, EncoderState, PromptType};
use crate::error::{Error, Result};
use crate::eval::{
    alignment, bootstrap_from_scores, dense_scores, density, embed_sentences, group_by_query,
    load_dense, score_pairs, spearman, uniformity, write_dense, BootstrapConfig,
};
use crate::synth::{stream, ToySpec, ToyWorld};
use crate::text::{
    load_corpus, load_pairs, load_triplets, write_corpus, write_pairs, write_triplets, ScoredPair,
    TripletRecord, Vocab, DEFAULT_MAX_LEN,
};
use crate::trainer::{fit, FitResult, TrainConfig, TrainData, TrainMode};

#[derive(Parser, Debug)]
#[command(
    name = "promptcl",
    version,
    about = "Prompt-tuned contrastive sentence embeddings over a frozen encoder",
    args_override_self = true
)]
struct Cli {
    /// key=value file; any flag of the subcommand may be set, the command line wins.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on raw sentences with dropout views as positives.
    TrainUnsup {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train on (anchor, positive, hard negative) triplets; --lambda 0 disables the margin term.
    TrainSup {
        #[arg(long)]
        triplets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write one embedding per corpus line: id then the vector, tab-separated.
    Embed {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spearman x100 between gold scores and cosine similarity.
    EvalSts {
        #[command(flatten)]
        model: ModelArgs,
        /// Scored pair file; repeat for several sets.
        #[arg(long, required = true)]
        pairs: Vec<PathBuf>,
    },
    /// Query-subsampled bootstrap Spearman on a dense annotation file.
    EvalBootstrap {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        dense: PathBuf,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Alignment, uniformity and the gold-band density histogram of a pair set.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        density_out: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Pairs with gold at or above this count as positives for alignment.
        #[arg(long, default_value_t = 4.0)]
        positive_gold: f64,
    },
    /// Retrain once per value of one hyperparameter and tabulate test scores.
    Sweep {
        /// margin, lambda, tau, lr, prompt-len, prompt-type, batch-size, epochs or dropout.
        #[arg(long)]
        param: String,
        /// Comma list; `a,b,...,c` expands the arithmetic step b - a up to c.
        #[arg(long)]
        values: String,
        #[arg(
            long,
            conflicts_with = "triplets",
            required_unless_present = "triplets"
        )]
        corpus: Option<PathBuf>,
        #[arg(long)]
        triplets: Option<PathBuf>,
        /// Scored pair test set; repeat to average several.
        #[arg(long, required = true)]
        test: Vec<PathBuf>,
        /// Dense annotation file for the bootstrap column.
        #[arg(long)]
        dense: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        /// Run directories are written under here when given.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Generate a synthetic paraphrase world: corpus, triplets, STS and dense sets.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        clusters: usize,
        #[arg(long, default_value_t = 40)]
        per_cluster: usize,
        #[arg(long, default_value_t = 8)]
        triplets_per_cluster: usize,
        #[arg(long, default_value_t = 400)]
        pairs: usize,
        #[arg(long, default_value_t = 200)]
        queries: usize,
        /// Interchangeable words per content slot.
        #[arg(long, default_value_t = 3)]
        synonyms: usize,
    },
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    prompt_type: Option<PromptType>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    /// Standard deviation of the seeded normal backbone, prompt and head init.
    #[arg(long)]
    init_std: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
    #[arg(long, default_value_t = 8192)]
    vocab_cap: usize,
    /// Scored pair file for model selection.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Raw little-endian f64 backbone replacing the seeded one.
    #[arg(long)]
    backbone_blob: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Checkpoint file, or a run directory (uses its best checkpoint).
    #[arg(long)]
    ckpt: PathBuf,
    /// Vocabulary file (one token per line) that must match the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Override whether the projection head is applied.
    #[arg(long)]
    head: Option<bool>,
}

/// Parses and runs one command, returning the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let argv = match inject_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

/// Splices `--key value` pairs from the config file directly after the
/// subcommand, so flags given on the command line come later and win.
fn inject_config(argv: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate().skip(1) {
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let (Some(path), true) = (path, argv.len() > 1) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Ingest {
        path: path.clone().into(),
        msg: e.to_string(),
    })?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.clone().into(),
            line: n + 1,
            msg: "expected key=value".into(),
        })?;
        let key = key.trim().replace('_', "-");
        if key == "config" {
            return Err(Error::Parse {
                path: path.clone().into(),
                line: n + 1,
                msg: "config files cannot nest".into(),
            });
        }
        injected.push(format!("--{key}"));
        injected.push(value.trim().to_string());
    }
    let mut out = argv[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "{} does not exist",
            path.display()
        )))
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    let mut out = String::new();
    match cmd {
        Command::TrainUnsup {
            corpus,
            out: dir,
            train,
        } => {
            require(&corpus)?;
            let sents = load_corpus(&corpus)?;
            let vocab = Vocab::from_sentences(&sents, train.vocab_cap)?;
            let cfg = train_config(TrainMode::Unsupervised, vocab.len(), &train)?;
            let data = TrainData::from_sentences(&sents, &vocab, cfg.max_len)?;
            let result = train_run(&cfg, &train, &vocab, &data, Some(&dir))?;
            summary(&mut out, &result);
        }
        Command::TrainSup {
            triplets,
            out: dir,
            train,
        } => {
            require(&triplets)?;
            let trips = load_triplets(&triplets)?;
            let vocab = Vocab::from_sentences(&triplet_sentences(&trips), train.vocab_cap)?;
            let mode = if train.lambda.unwrap_or(10.0) > 0.0 {
                TrainMode::SupervisedEh
            } else {
                TrainMode::Supervised
            };
            let cfg = train_config(mode, vocab.len(), &train)?;
            let data = TrainData::from_triplets(&trips, &vocab, cfg.max_len)?;
            let result = train_run(&cfg, &train, &vocab, &data, Some(&dir))?;
            summary(&mut out, &result);
        }
        Command::Embed {
            model,
            corpus,
            out: path,
        } => {
            require(&corpus)?;
            let m = Loaded::open(&model)?;
            let sents = load_corpus(&corpus)?;
            let embs = embed_sentences(&m.ck.state, &m.vocab, &sents, m.use_head, m.max_len)?;
            let mut text = String::new();
            for (i, e) in embs.iter().enumerate() {
                let _ = write!(text, "{i}");
                for v in e {
                    let _ = write!(text, "\t{v}");
                }
                text.push('\n');
            }
            create_parent(&path)?;
            std::fs::write(&path, text)?;
        }
        Command::EvalSts { model, pairs } => {
            pairs.iter().try_for_each(|p| require(p))?;
            let m = Loaded::open(&model)?;
            out.push_str("pairs\tspearman\n");
            let mut scores = Vec::new();
            for p in &pairs {
                let set = load_pairs(p)?;
                let (gold, pred) = score_pairs(&m.ck.state, &m.vocab, &set, m.use_head, m.max_len)?;
                let s = spearman(&gold, &pred)?;
                let _ = writeln!(out, "{}\t{:.2}", p.display(), 100.0 * s);
                scores.push(s);
            }
            if scores.len() > 1 {
                let _ = writeln!(out, "avg\t{:.2}", 100.0 * mean(&scores));
            }
        }
        Command::EvalBootstrap {
            model,
            dense,
            resamples,
            fraction,
            seed,
        } => {
            require(&dense)?;
            let m = Loaded::open(&model)?;
            let records = load_dense(&dense)?;
            let (gold, pred) =
                dense_scores(&m.ck.state, &m.vocab, &records, m.use_head, m.max_len)?;
            let cfg = BootstrapConfig {
                resamples,
                fraction,
                seed,
            };
            let r = bootstrap_from_scores(&gold, &pred, &group_by_query(&records), &cfg)?;
            let full = spearman(&gold, &pred)?;
            out.push_str("mean\tstd\tfull\tresamples\n");
            let _ = writeln!(
                out,
                "{:.2}\t{:.2}\t{:.2}\t{resamples}",
                100.0 * r.mean,
                100.0 * r.std,
                100.0 * full
            );
        }
        Command::Analyze {
            model,
            pairs,
            density_out,
            bins,
            positive_gold,
        } => {
            require(&pairs)?;
            let m = Loaded::open(&model)?;
            let set = load_pairs(&pairs)?;
            let report = analyze(&m, &set, bins, positive_gold)?;
            create_parent(&density_out)?;
            std::fs::write(&density_out, &report.csv)?;
            out.push_str("alignment\tuniformity\tpositives\tsentences\n");
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                report.alignment, report.uniformity, report.positives, report.sentences
            );
        }
        Command::Sweep {
            param,
            values,
            corpus,
            triplets,
            test,
            dense,
            resamples,
            out: dir,
            train,
        } => {
            sweep(
                &mut out,
                SweepSpec {
                    param: &param,
                    values: &values,
                    corpus: corpus.as_deref(),
                    triplets: triplets.as_deref(),
                    test: &test,
                    dense: dense.as_deref(),
                    resamples,
                    out: dir.as_deref(),
                },
                &train,
            )?;
        }
        Command::Synth {
            out: dir,
            seed,
            clusters,
            per_cluster,
            triplets_per_cluster,
            pairs,
            queries,
            synonyms,
        } => {
            if clusters < 2 || synonyms == 0 {
                return Err(Error::Config(
                    "synth needs at least 2 clusters and 1 synonym".into(),
                ));
            }
            let world = ToyWorld::new(ToySpec {
                clusters,
                synonyms,
                seed,
                ..ToySpec::default()
            });
            std::fs::create_dir_all(&dir)?;
            let corpus: Vec<String> = world
                .corpus(per_cluster, &mut stream(seed, "corpus"))
                .into_iter()
                .map(|(_, s)| s)
                .collect();
            let trips = world.triplets(triplets_per_cluster, &mut stream(seed, "triplets"));
            let dev = world.sts_pairs(pairs, &mut stream(seed, "dev"));
            let test = world.sts_pairs(pairs, &mut stream(seed, "test"));
            let dense = world.dense(queries, &mut stream(seed, "dense"));
            write_corpus(&dir.join("corpus.txt"), &corpus)?;
            write_triplets(&dir.join("triplets.tsv"), &trips)?;
            write_pairs(&dir.join("sts-dev.tsv"), &dev)?;
            write_pairs(&dir.join("sts-test.tsv"), &test)?;
            write_dense(&dir.join("dense.tsv"), &dense)?;
            out.push_str("file\trecords\n");
            for (name, n) in [
                ("corpus.txt", corpus.len()),
                ("triplets.tsv", trips.len()),
                ("sts-dev.tsv", dev.len()),
                ("sts-test.tsv", test.len()),
                ("dense.tsv", dense.len()),
            ] {
                let _ = writeln!(out, "{name}\t{n}");
            }
        }
    }
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(out.as_bytes())?;
    stdout.flush()?;
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => Ok(std::fs::create_dir_all(p)?),
        _ => Ok(()),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn triplet_sentences(trips: &[TripletRecord]) -> Vec<&str> {
    trips
        .iter()
        .flat_map(|t| {
            [
                t.anchor.as_str(),
                t.positive.as_str(),
                t.hard_negative.as_str(),
            ]
        })
        .collect()
}

fn train_config(mode: TrainMode, vocab_size: usize, a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::desk(mode, vocab_size);
    cfg.seed = a.seed;
    cfg.encoder.seed = a.seed;
    cfg.max_len = a.max_len;
    cfg.dev_path = a.dev.clone();
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { cfg.$($field).+ = v; })*
        };
    }
    set!(
        tau => tau,
        margin => margin,
        lambda => lambda,
        batch_size => batch_size,
        lr => lr,
        epochs => epochs,
        eval_every => eval_every,
        prompt_len => encoder.prompt_len,
        prompt_type => encoder.prompt_type,
        dropout => encoder.dropout,
        dim => encoder.dim,
        layers => encoder.layers,
        heads => encoder.heads,
        ff_dim => encoder.ff_dim,
        init_std => encoder.init_std,
    );
    if a.dim.is_some() && a.ff_dim.is_none() {
        cfg.encoder.ff_dim = 4 * cfg.encoder.dim;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_run(
    cfg: &TrainConfig,
    a: &TrainArgs,
    vocab: &Vocab,
    data: &TrainData,
    dir: Option<&Path>,
) -> Result<FitResult> {
    let dev = match &a.dev {
        Some(p) => {
            require(p)?;
            Some(load_pairs(p)?)
        }
        None => None,
    };
    let mut state = EncoderState::init(cfg.encoder.clone())?;
    if let Some(blob) = &a.backbone_blob {
        require(blob)?;
        import_backbone_blob(&mut state, blob)?;
    }
    fit(cfg, state, vocab, data, dev.as_deref(), dir)
}

fn summary(out: &mut String, r: &FitResult) {
    let steps = r.log.records.last().map_or(0, |x| x.step);
    let best = r
        .log
        .best_dev
        .map_or("NA".to_string(), |d| format!("{:.2}", 100.0 * d));
    out.push_str("best_step\tbest_dev\tsteps\n");
    let _ = writeln!(out, "{}\t{best}\t{steps}", r.log.best_step.unwrap_or(0));
}

struct Loaded {
    ck: Checkpoint,
    vocab: Vocab,
    use_head: bool,
    max_len: usize,
}

impl Loaded {
    fn open(a: &ModelArgs) -> Result<Self> {
        let path = if a.ckpt.is_dir() {
            a.ckpt.join("checkpoints/best.ckpt")
        } else {
            a.ckpt.clone()
        };
        require(&path)?;
        let ck = load_checkpoint(&path)?;
        let vocab = match (&a.vocab, &ck.vocab) {
            (Some(p), stored) => {
                require(p)?;
                let v = Vocab::from_text(&std::fs::read_to_string(p)?)?;
                if stored.as_ref().is_some_and(|s| *s != v) {
                    return Err(Error::Validation(format!(
                        "{} differs from the checkpoint vocabulary",
                        p.display()
                    )));
                }
                v
            }
            (None, Some(v)) => v.clone(),
            (None, None) => {
                return Err(Error::Validation(
                    "checkpoint has no vocabulary; pass --vocab".into(),
                ))
            }
        };
        if vocab.len() != ck.state.config.vocab_size {
            return Err(Error::Validation(format!(
                "vocabulary has {} tokens, checkpoint config expects {}",
                vocab.len(),
                ck.state.config.vocab_size
            )));
        }
        let meta_bool = ck.meta.get("eval_use_head").map(|v| v == "true");
        let use_head = a.head.or(meta_bool).ok_or_else(|| {
            Error::Validation(
                "checkpoint does not record whether to use the head; pass --head".into(),
            )
        })?;
        let max_len = match ck.meta.get("max_len") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad max_len {v:?} in metadata")))?,
            None => DEFAULT_MAX_LEN,
        };
        Ok(Self {
            ck,
            vocab,
            use_head,
            max_len,
        })
    }
}

struct Analysis {
    alignment: f64,
    uniformity: f64,
    positives: usize,
    sentences: usize,
    csv: String,
}

fn analyze(m: &Loaded, pairs: &[ScoredPair], bins: usize, positive_gold: f64) -> Result<Analysis> {
    let mut distinct: Vec<String> = pairs
        .iter()
        .flat_map(|p| [p.a.clone(), p.b.clone()])
        .collect();
    distinct.sort();
    distinct.dedup();
    let embs = embed_sentences(&m.ck.state, &m.vocab, &distinct, m.use_head, m.max_len)?;
    let at = |s: &str| {
        &embs[distinct
            .binary_search_by(|d| d.as_str().cmp(s))
            .expect("collected above")]
    };
    let positives: Vec<(Vec<f64>, Vec<f64>)> = pairs
        .iter()
        .filter(|p| p.score >= positive_gold)
        .map(|p| (at(&p.a).clone(), at(&p.b).clone()))
        .collect();
    let gold: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    let pred = pairs
        .iter()
        .map(|p| crate::tensor::cosine_values(at(&p.a), at(&p.b)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Analysis {
        alignment: alignment(&positives)?,
        uniformity: uniformity(&embs)?,
        positives: positives.len(),
        sentences: distinct.len(),
        csv: density(&gold, &pred, bins)?.to_csv(),
    })
}

/// Expands `a,b,...,c` into the progression a, b, b + (b - a), ... up to c.
pub fn expand_values(spec: &str) -> Result<Vec<String>> {
    let tokens: Vec<&str> = spec.split(',').map(str::trim).collect();
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::Usage(format!("cannot expand around non-numeric value {s:?}")))
    };
    let mut out: Vec<String> = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        if tok.is_empty() {
            return Err(Error::Usage(format!("empty value in {spec:?}")));
        }
        if *tok != "..." {
            out.push(tok.to_string());
            continue;
        }
        if out.len() < 2 || i + 1 >= tokens.len() || tokens[i + 1] == "..." {
            return Err(Error::Usage(
                "`...` needs two values before it and one after".into(),
            ));
        }
        let a = num(&out[out.len() - 2])?;
        let b = num(&out[out.len() - 1])?;
        let end = num(tokens[i + 1])?;
        let step = b - a;
        if step <= 0.0 || end < b {
            return Err(Error::Usage(format!(
                "cannot step from {b} to {end} by {step}"
            )));
        }
        let mut k = 1.0;
        loop {
            let x = ((b + k * step) * 1e10).round() / 1e10;
            if x >= end - step * 1e-6 {
                break;
            }
            out.push(format!("{x}"));
            k += 1.0;
        }
    }
    Ok(out)
}

fn apply_param(cfg: &mut TrainConfig, param: &str, value: &str) -> Result<()> {
    fn parse<T: std::str::FromStr>(param: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::Usage(format!("bad value {v:?} for {param}")))
    }
    match param {
        "margin" => cfg.margin = parse(param, value)?,
        "lambda" => cfg.lambda = parse(param, value)?,
        "tau" => cfg.tau = parse(param, value)?,
        "lr" => cfg.lr = parse(param, value)?,
        "prompt-len" => cfg.encoder.prompt_len = parse(param, value)?,
        "prompt-type" => cfg.encoder.prompt_type = value.parse()?,
        "batch-size" => cfg.batch_size = parse(param, value)?,
        "epochs" => cfg.epochs = parse(param, value)?,
        "dropout" => cfg.encoder.dropout = parse(param, value)?,
        other => return Err(Error::Usage(format!("unknown sweep parameter {other:?}"))),
    }
    if param == "lambda" && cfg.mode.is_supervised() {
        cfg.mode = if cfg.lambda > 0.0 {
            TrainMode::SupervisedEh
        } else {
            TrainMode::Supervised
        };
    }
    cfg.validate()
}

struct SweepSpec<'a> {
    param: &'a str,
    values: &'a str,
    corpus: Option<&'a Path>,
    triplets: Option<&'a Path>,
    test: &'a [PathBuf],
    dense: Option<&'a Path>,
    resamples: usize,
    out: Option<&'a Path>,
}

/// One row per value: mean test Spearman over the test sets and, with a
/// dense file, the bootstrap mean, both x100. A margin sweep starts with a
/// `w/o` row trained without the margin term.
fn sweep(out: &mut String, s: SweepSpec, a: &TrainArgs) -> Result<()> {
    let values = expand_values(s.values)?;
    for p in s
        .test
        .iter()
        .map(PathBuf::as_path)
        .chain(s.corpus)
        .chain(s.triplets)
        .chain(s.dense)
    {
        require(p)?;
    }
    let tests = s
        .test
        .iter()
        .map(|p| load_pairs(p))
        .collect::<Result<Vec<_>>>()?;
    let dense = s.dense.map(load_dense).transpose()?;
    let (base, vocab, data) = if let Some(t) = s.triplets {
        let trips = load_triplets(t)?;
        let vocab = Vocab::from_sentences(&triplet_sentences(&trips), a.vocab_cap)?;
        let mode = if a.lambda.unwrap_or(10.0) > 0.0 {
            TrainMode::SupervisedEh
        } else {
            TrainMode::Supervised
        };
        let cfg = train_config(mode, vocab.len(), a)?;
        let data = TrainData::from_triplets(&trips, &vocab, cfg.max_len)?;
        (cfg, vocab, data)
    } else {
        let sents = load_corpus(s.corpus.expect("clap requires corpus or triplets"))?;
        let vocab = Vocab::from_sentences(&sents, a.vocab_cap)?;
        let cfg = train_config(TrainMode::Unsupervised, vocab.len(), a)?;
        let data = TrainData::from_sentences(&sents, &vocab, cfg.max_len)?;
        (cfg, vocab, data)
    };
    if matches!(s.param, "margin" | "lambda") && !base.mode.is_supervised() {
        return Err(Error::Usage(format!(
            "sweeping {} needs --triplets",
            s.param
        )));
    }

    let mut runs: Vec<(String, TrainConfig)> = Vec::new();
    if s.param == "margin" {
        let mut cfg = base.clone();
        cfg.mode = TrainMode::Supervised;
        runs.push(("w/o".into(), cfg));
    }
    for v in &values {
        let mut cfg = base.clone();
        apply_param(&mut cfg, s.param, v)?;
        runs.push((v.clone(), cfg));
    }

    let _ = writeln!(out, "{}\tavg_sts\tcxc_sts", s.param);
    for (label, cfg) in runs {
        let dir = s
            .out
            .map(|d| d.join(format!("{}={}", s.param, label.replace('/', ""))));
        let result = train_run(&cfg, a, &vocab, &data, dir.as_deref())?;
        let use_head = cfg.mode.eval_use_head();
        let scores = tests
            .iter()
            .map(|t| {
                let (gold, pred) = score_pairs(&result.best, &vocab, t, use_head, cfg.max_len)?;
                spearman(&gold, &pred)
            })
            .collect::<Result<Vec<_>>>()?;
        let cxc = match &dense {
            Some(d) => {
                let (gold, pred) = dense_scores(&result.best, &vocab, d, use_head, cfg.max_len)?;
                let bc = BootstrapConfig {
                    resamples: s.resamples,
                    seed: a.seed,
                    ..BootstrapConfig::default()
                };
                let r = bootstrap_from_scores(&gold, &pred, &group_by_query(d), &bc)?;
                format!("{:.2}", 100.0 * r.mean)
            }
            None => "NA".into(),
        };
        let _ = writeln!(out, "{label}\t{:.2}\t{cxc}", 100.0 * mean(&scores));
        log::info!("{} = {label} done", s.param);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_expansion() {
        assert_eq!(
            expand_values("0,0.05,...,0.4").unwrap(),
            ["0", "0.05", "0.1", "0.15", "0.2", "0.25", "0.3", "0.35", "0.4"]
        );
        assert_eq!(expand_values("1,4,8,16").unwrap(), ["1", "4", "8", "16"]);
        assert_eq!(expand_values("1,2,...,4").unwrap(), ["1", "2", "3", "4"]);
        assert!(expand_values("1,...,4").is_err());
        assert!(expand_values("2,1,...,4").is_err());
    }

    #[test]
    fn config_lines_precede_command_line_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.conf");
        std::fs::write(&cfg, "# comment\ntau = 0.1\nbatch_size=8\n").unwrap();
        let argv = [
            "promptcl",
            "train-unsup",
            "--config",
            cfg.to_str().unwrap(),
            "--tau",
            "0.2",
            "--corpus",
            "c.txt",
            "--out",
            "run",
        ]
        .map(String::from);
        let out = inject_config(argv.to_vec()).unwrap();
        assert_eq!(
            out[..6],
            [
                "promptcl",
                "train-unsup",
                "--tau",
                "0.1",
                "--batch-size",
                "8"
            ]
            .map(String::from)
        );
        let Cli { command, .. } = Cli::try_parse_from(&out).unwrap();
        let Command::TrainUnsup { train, .. } = command else {
            panic!()
        };
        assert_eq!(train.tau, Some(0.2));
        assert_eq!(train.batch_size, Some(8));
    }

    #[test]
    fn unknown_flag_is_exit_one() {
        assert_eq!(run(["promptcl", "eval-sts", "--bogus"]), 1);
        assert_eq!(run(["promptcl", "--help"]), 0);
    }
}
