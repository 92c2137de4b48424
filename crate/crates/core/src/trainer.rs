//! Training loop: seeded batching, Adam with linear decay over the prompt
//! and head tensors only, periodic dev evaluation and best-checkpoint
//! retention.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{save_checkpoint, Bound, Checkpoint, EncoderConfig, EncoderState, Mode};
use crate::error::{Error, Result};
use crate::eval::sts_spearman;
use crate::objectives::{self, LossConfig};
use crate::seed;
use crate::tensor::{Graph, NodeId};
use crate::text::{tokenize, ScoredPair, TokenizedSentence, TripletRecord, Vocab, DEFAULT_MAX_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Dropout views of the same sentence as positives.
    Unsupervised,
    /// Entailment positives and contradiction hard negatives.
    Supervised,
    /// Supervised plus the weighted margin term.
    SupervisedEh,
}

impl TrainMode {
    pub fn is_supervised(self) -> bool {
        self != TrainMode::Unsupervised
    }

    /// Unsupervised models are evaluated without the head.
    pub fn eval_use_head(self) -> bool {
        self.is_supervised()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
    pub margin: f64,
    pub lambda: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub max_len: usize,
    pub dev_path: Option<PathBuf>,
    pub encoder: EncoderConfig,
}

impl TrainConfig {
    /// Desk-scale defaults; one epoch unsupervised, ten supervised.
    pub fn desk(mode: TrainMode, vocab_size: usize) -> Self {
        Self {
            mode,
            batch_size: 32,
            epochs: if mode.is_supervised() { 10 } else { 1 },
            lr: 3e-2,
            tau: 0.05,
            margin: 0.2,
            lambda: 10.0,
            eval_every: 125,
            seed: 42,
            max_len: DEFAULT_MAX_LEN,
            dev_path: None,
            encoder: EncoderConfig::desk(vocab_size),
        }
    }

    /// The margin weight actually applied to the gradient.
    pub fn loss_config(&self) -> LossConfig {
        let lambda = if self.mode == TrainMode::SupervisedEh {
            self.lambda
        } else {
            0.0
        };
        LossConfig::with_tau(self.tau, self.margin, lambda)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size {} < 2", self.batch_size)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be non-negative",
                self.lr
            )));
        }
        LossConfig::with_tau(self.tau, self.margin, self.lambda).validate()?;
        self.encoder.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainData {
    Sentences(Vec<TokenizedSentence>),
    /// Anchor, positive, hard negative.
    Triplets(Vec<[TokenizedSentence; 3]>),
}

impl TrainData {
    pub fn from_sentences(sentences: &[String], vocab: &Vocab, max_len: usize) -> Result<Self> {
        Ok(TrainData::Sentences(
            sentences
                .iter()
                .map(|s| tokenize(s, vocab, max_len))
                .collect::<Result<_>>()?,
        ))
    }

    pub fn from_triplets(
        triplets: &[TripletRecord],
        vocab: &Vocab,
        max_len: usize,
    ) -> Result<Self> {
        let t = |s: &str| tokenize(s, vocab, max_len);
        Ok(TrainData::Triplets(
            triplets
                .iter()
                .map(|r| Ok([t(&r.anchor)?, t(&r.positive)?, t(&r.hard_negative)?]))
                .collect::<Result<_>>()?,
        ))
    }

    pub fn len(&self) -> usize {
        match self {
            TrainData::Sentences(s) => s.len(),
            TrainData::Triplets(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shuffled index batches for one epoch, keyed by `(seed, epoch)`. A short
/// final batch survives only with at least 2 items.
pub fn make_batches(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Validation("no training items".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[epoch as u64]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.last().is_some_and(|b| b.len() < 2) {
        log::info!("dropping a final batch of 1 item in epoch {epoch}");
        batches.pop();
    }
    Ok(batches)
}

/// `base * (1 - step / total)`, floored at zero.
pub fn lr_at(step: usize, total: usize, base: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config(
            "learning-rate schedule over zero steps".into(),
        ));
    }
    Ok((base * (1.0 - step as f64 / total as f64)).max(0.0))
}

/// Adam moments for the trainable tensors, in [`EncoderState::trainable`]
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(state: &EncoderState) -> Self {
        let zeros: Vec<Vec<f64>> = state
            .trainable()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Number of moment slots; equals the number of trainable tensors.
    pub fn slots(&self) -> usize {
        self.m.len()
    }

    pub fn step(&mut self, state: &mut EncoderState, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in state
            .trainable_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_cl: f64,
    pub l_eh: f64,
    pub l_total: f64,
}

fn dump_matrix(g: &Graph, sims: NodeId) -> String {
    let mut s = String::from("similarity matrix:\n");
    for row in g.value(sims).to_rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "{}", cells.join("\t"));
    }
    s
}

/// One optimizer update on a batch. Dropout masks are keyed by
/// `mix(seed, step)`.
pub fn train_step(
    state: &mut EncoderState,
    batch: &TrainData,
    cfg: &TrainConfig,
    opt: &mut Adam,
    lr: f64,
    step: usize,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let b = Bound::new(&mut g, state);
    let dseed = seed::mix(cfg.seed, step as u64);
    let (total, cl, eh, sims) = match batch {
        TrainData::Sentences(sents) => {
            let (h1, h2) = state.dual_encode(&mut g, &b, sents, dseed)?;
            let sims = g.cosine_matrix(h1, h2)?;
            let cl = objectives::nt_xent_from_sims(&mut g, sims, cfg.tau)?;
            (cl, cl, None, sims)
        }
        TrainData::Triplets(trips) => {
            let col = |i: usize| trips.iter().map(|t| t[i].clone()).collect::<Vec<_>>();
            let views = (0..3)
                .map(|i| {
                    state.embed(
                        &mut g,
                        &b,
                        &col(i),
                        Mode::Train {
                            seed: dseed,
                            tag: i as u64,
                        },
                        true,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let lc = cfg.loss_config();
            let parts = objectives::total_loss(&mut g, views[0], views[1], views[2], &lc)?;
            let eh = match parts.hinge {
                Some(h) => h,
                None => objectives::eh_from_sims(&mut g, parts.sims, cfg.margin)?,
            };
            (parts.total, parts.contrastive, Some(eh), parts.sims)
        }
    };
    let losses = StepLosses {
        l_cl: g.value(cl).item(),
        l_eh: eh.map_or(0.0, |e| g.value(e).item()),
        l_total: g.value(total).item(),
    };
    if !losses.l_total.is_finite() {
        return Err(Error::NonFinite {
            step,
            dump: dump_matrix(&g, sims),
        });
    }
    g.backward(total)?;
    let nodes: Vec<NodeId> = b
        .prompts
        .iter()
        .copied()
        .chain([b.head_w, b.head_b])
        .collect();
    let grads: Vec<Vec<f64>> = nodes
        .iter()
        .map(|&n| {
            g.grad(n)
                .map_or_else(|| vec![0.0; g.value(n).numel()], <[f64]>::to_vec)
        })
        .collect();
    opt.step(state, &grads, lr);
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_cl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_eh: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lr: Option<f64>,
    /// Present on evaluation rows; `null` when the correlation is undefined.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dev_spearman: Option<Option<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    pub best_step: Option<usize>,
    pub best_dev: Option<f64>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    pub fn evals(&self) -> impl Iterator<Item = (usize, Option<f64>)> + '_ {
        self.records
            .iter()
            .filter_map(|r| r.dev_spearman.map(|d| (r.step, d)))
    }
}

pub struct FitResult {
    pub best: EncoderState,
    pub last: EncoderState,
    pub log: RunLog,
}

struct RunDir {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl RunDir {
    fn create(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        let snapshot =
            serde_json::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join("config.json"), snapshot + "\n")?;
        let log = BufWriter::new(File::create(dir.join("runlog.jsonl"))?);
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
        })
    }

    fn record(&mut self, r: &LogRecord) -> Result<()> {
        writeln!(
            self.log,
            "{}",
            serde_json::to_string(r).expect("plain record")
        )?;
        Ok(())
    }
}

pub fn checkpoint_for(state: &EncoderState, vocab: &Vocab, cfg: &TrainConfig) -> Checkpoint {
    Checkpoint {
        state: state.clone(),
        vocab: Some(vocab.clone()),
        meta: BTreeMap::from([
            (
                "eval_use_head".to_string(),
                cfg.mode.eval_use_head().to_string(),
            ),
            ("max_len".to_string(), cfg.max_len.to_string()),
        ]),
    }
}

/// Saves without the backbone when it can be regenerated from the seed.
pub fn save_state(
    path: &Path,
    state: &EncoderState,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<()> {
    let seeded = EncoderState::init(state.config.clone())?;
    let include = seeded.backbone_hash() != state.backbone_hash();
    save_checkpoint(path, &checkpoint_for(state, vocab, cfg), include)
}

fn dev_score(
    state: &EncoderState,
    vocab: &Vocab,
    dev: &[ScoredPair],
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    match sts_spearman(state, vocab, dev, cfg.mode.eval_use_head(), cfg.max_len) {
        Ok(v) => Ok(Some(v)),
        Err(Error::Degenerate(msg)) => {
            log::warn!("dev correlation undefined: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Trains `state` for `cfg.epochs` epochs. With a dev set, evaluates at step
/// 0, every `eval_every` steps and after the last step, and returns the
/// state with the highest dev correlation (earliest on ties).
pub fn fit(
    cfg: &TrainConfig,
    state: EncoderState,
    vocab: &Vocab,
    data: &TrainData,
    dev: Option<&[ScoredPair]>,
    run_dir: Option<&Path>,
) -> Result<FitResult> {
    cfg.validate()?;
    let matches = matches!(
        (cfg.mode, data),
        (TrainMode::Unsupervised, TrainData::Sentences(_))
            | (
                TrainMode::Supervised | TrainMode::SupervisedEh,
                TrainData::Triplets(_)
            )
    );
    if !matches {
        return Err(Error::Config(format!(
            "{:?} training needs matching data",
            cfg.mode
        )));
    }
    if state.config != cfg.encoder {
        return Err(Error::Config(
            "encoder state does not match the training configuration".into(),
        ));
    }
    let mut run = run_dir.map(|d| RunDir::create(d, cfg)).transpose()?;
    let hash = state.backbone_hash().to_string();
    let epochs: Vec<Vec<Vec<usize>>> = (0..cfg.epochs)
        .map(|e| make_batches(data.len(), cfg.batch_size, cfg.seed, e))
        .collect::<Result<_>>()?;
    let total: usize = epochs.iter().map(Vec::len).sum();

    let mut log = RunLog::default();
    let mut state = state;
    let mut best = state.clone();
    let mut opt = Adam::new(&state);

    let evaluate = |step: usize,
                    st: &EncoderState,
                    rec: &mut LogRecord,
                    log: &mut RunLog,
                    best: &mut EncoderState|
     -> Result<()> {
        if let Some(dev) = dev {
            let score = dev_score(st, vocab, dev, cfg)?;
            rec.dev_spearman = Some(score);
            if let Some(s) = score {
                if log.best_dev.is_none_or(|b| s > b) {
                    log.best_dev = Some(s);
                    log.best_step = Some(step);
                    *best = st.clone();
                }
            }
        }
        Ok(())
    };

    let mut rec0 = LogRecord {
        step: 0,
        l_cl: None,
        l_eh: None,
        l_total: None,
        lr: None,
        dev_spearman: None,
    };
    evaluate(0, &state, &mut rec0, &mut log, &mut best)?;
    if let Some(r) = run.as_mut() {
        r.record(&rec0)?;
    }
    log.records.push(rec0);

    let mut step = 0;
    for batches in &epochs {
        for idx in batches {
            let batch = match data {
                TrainData::Sentences(s) => {
                    TrainData::Sentences(idx.iter().map(|&i| s[i].clone()).collect())
                }
                TrainData::Triplets(t) => {
                    TrainData::Triplets(idx.iter().map(|&i| t[i].clone()).collect())
                }
            };
            let lr = lr_at(step, total, cfg.lr)?;
            let losses = train_step(&mut state, &batch, cfg, &mut opt, lr, step)?;
            step += 1;
            let mut rec = LogRecord {
                step,
                l_cl: Some(losses.l_cl),
                l_eh: Some(losses.l_eh),
                l_total: Some(losses.l_total),
                lr: Some(lr),
                dev_spearman: None,
            };
            if step % cfg.eval_every == 0 || step == total {
                evaluate(step, &state, &mut rec, &mut log, &mut best)?;
            }
            if let Some(r) = run.as_mut() {
                r.record(&rec)?;
            }
            log.records.push(rec);
        }
    }
    if state.backbone.hash() != hash {
        return Err(Error::Numeric("backbone changed during training".into()));
    }
    if dev.is_none() {
        best = state.clone();
        log.best_step = Some(step);
    }
    if let Some(mut r) = run {
        r.log.flush()?;
        save_state(&r.dir.join("checkpoints/best.ckpt"), &best, vocab, cfg)?;
        save_state(&r.dir.join("checkpoints/last.ckpt"), &state, vocab, cfg)?;
    }
    Ok(FitResult {
        best,
        last: state,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_follow_min_batch_rule() {
        let sizes = |n| {
            make_batches(n, 4, 7, 0)
                .unwrap()
                .iter()
                .map(Vec::len)
                .collect::<Vec<_>>()
        };
        assert_eq!(sizes(10), vec![4, 4, 2]);
        assert_eq!(sizes(5), vec![4]);
        assert_eq!(
            make_batches(10, 4, 7, 3).unwrap(),
            make_batches(10, 4, 7, 3).unwrap()
        );
        assert_ne!(
            make_batches(50, 4, 7, 0).unwrap(),
            make_batches(50, 4, 7, 1).unwrap()
        );
        let mut all: Vec<usize> = make_batches(10, 4, 1, 0).unwrap().concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(make_batches(0, 4, 0, 0).is_err());
    }

    #[test]
    fn linear_decay() {
        assert_eq!(lr_at(0, 10, 0.03).unwrap(), 0.03);
        assert_eq!(lr_at(10, 10, 0.03).unwrap(), 0.0);
        assert_eq!(lr_at(5, 10, 0.03).unwrap(), 0.015);
        assert!(matches!(lr_at(0, 0, 0.03), Err(Error::Config(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = EncoderState::init(EncoderConfig::desk(10)).unwrap();
        let before = s.head_b.data()[0];
        let mut opt = Adam::new(&s);
        assert_eq!(opt.slots(), s.trainable().len());
        let grads: Vec<Vec<f64>> = s
            .trainable()
            .iter()
            .map(|(_, t)| vec![2.0; t.numel()])
            .collect();
        opt.step(&mut s, &grads, 0.01);
        assert!((s.head_b.data()[0] - (before - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn log_record_serialization() {
        let r = LogRecord {
            step: 3,
            l_cl: Some(1.5),
            l_eh: Some(0.0),
            l_total: Some(1.5),
            lr: Some(0.01),
            dev_spearman: Some(None),
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(
            s,
            r#"{"step":3,"l_cl":1.5,"l_eh":0.0,"l_total":1.5,"lr":0.01,"dev_spearman":null}"#
        );
        let r0 = LogRecord {
            step: 0,
            l_cl: None,
            l_eh: None,
            l_total: None,
            lr: None,
            dev_spearman: Some(Some(0.25)),
        };
        assert_eq!(
            serde_json::to_string(&r0).unwrap(),
            r#"{"step":0,"dev_spearman":0.25}"#
        );
    }
}
