//! Rank correlation, bootstrap correlation over densely annotated queries,
//! embedding geometry metrics and similarity-density histograms.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{cosine_values, normalize};
use crate::text::{tokenize, ScoredPair, Vocab};

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("cannot rank NaN".into()));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    Ok(ranks)
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(
            "correlation of a constant sequence is undefined".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!(
            "spearman needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Validation(
            "spearman needs at least 2 observations".into(),
        ));
    }
    pearson(&average_ranks(x)?, &average_ranks(y)?)
}

/// Eval-mode embeddings of raw sentences.
pub fn embed_sentences(
    state: &EncoderState,
    vocab: &Vocab,
    sentences: &[String],
    use_head: bool,
    max_len: usize,
) -> Result<Vec<Vec<f64>>> {
    let toks = sentences
        .iter()
        .map(|s| tokenize(s, vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    state.embed_values(&toks, use_head)
}

/// Embeds each distinct sentence once.
fn embed_unique(
    state: &EncoderState,
    vocab: &Vocab,
    sentences: &[&str],
    use_head: bool,
    max_len: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut unique: Vec<String> = Vec::new();
    let idx: Vec<usize> = sentences
        .iter()
        .map(|&s| {
            *slot.entry(s).or_insert_with(|| {
                unique.push(s.to_string());
                unique.len() - 1
            })
        })
        .collect();
    let embs = embed_sentences(state, vocab, &unique, use_head, max_len)?;
    Ok(idx.into_iter().map(|i| embs[i].clone()).collect())
}

/// Gold scores and predicted cosines, in file order.
pub fn score_pairs(
    state: &EncoderState,
    vocab: &Vocab,
    pairs: &[ScoredPair],
    use_head: bool,
    max_len: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let sents: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.a.as_str(), p.b.as_str()])
        .collect();
    let embs = embed_unique(state, vocab, &sents, use_head, max_len)?;
    let preds = embs
        .chunks(2)
        .map(|c| cosine_values(&c[0], &c[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok((pairs.iter().map(|p| p.score).collect(), preds))
}

pub fn sts_spearman(
    state: &EncoderState,
    vocab: &Vocab,
    pairs: &[ScoredPair],
    use_head: bool,
    max_len: usize,
) -> Result<f64> {
    let (gold, pred) = score_pairs(state, vocab, pairs, use_head, max_len)?;
    spearman(&gold, &pred)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseRecord {
    pub query: String,
    pub item: String,
    pub gold: f64,
    pub a: String,
    pub b: String,
}

/// Five-column TSV: query id, item id, gold score, sentence A, sentence B.
pub fn load_dense(path: &Path) -> Result<Vec<DenseRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(parse(format!(
                "expected 5 tab-separated columns, found {}",
                cols.len()
            )));
        }
        let gold: f64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| parse(format!("gold {:?} is not a number", cols[2])))?;
        if !(0.0..=5.0).contains(&gold) {
            return Err(Error::Validation(format!(
                "{}:{}: gold {gold} outside [0, 5]",
                path.display(),
                i + 1
            )));
        }
        out.push(DenseRecord {
            query: cols[0].to_string(),
            item: cols[1].to_string(),
            gold,
            a: cols[3].to_string(),
            b: cols[4].to_string(),
        });
    }
    Ok(out)
}

pub fn write_dense(path: &Path, records: &[DenseRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.query, r.item, r.gold, r.a, r.b);
    }
    Ok(std::fs::write(path, s)?)
}

/// Record indices grouped by query id, queries in sorted id order.
pub fn group_by_query(records: &[DenseRecord]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.query.as_str()).or_default().push(i);
    }
    groups.into_values().collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub fraction: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            fraction: 0.5,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapResult {
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single resample.
    pub std: f64,
    pub values: Vec<f64>,
}

const MAX_REDRAWS: u64 = 100;

/// Each resample draws `floor(fraction * Q)` queries without replacement and
/// one item per drawn query uniformly, then correlates gold with predicted.
/// Degenerate draws are redrawn up to 100 times.
pub fn bootstrap_from_scores(
    gold: &[f64],
    pred: &[f64],
    groups: &[Vec<usize>],
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if cfg.resamples == 0 || !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(Error::Config(format!(
            "need resamples >= 1 and fraction in (0, 1], got {} and {}",
            cfg.resamples, cfg.fraction
        )));
    }
    if gold.len() != pred.len() {
        return Err(Error::Validation(
            "gold and predicted lengths differ".into(),
        ));
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::Validation(
            "every query needs at least one rated item".into(),
        ));
    }
    let take = (cfg.fraction * groups.len() as f64).floor() as usize;
    if take < 2 {
        return Err(Error::Validation(format!(
            "{} queries at fraction {} select fewer than 2 pairs",
            groups.len(),
            cfg.fraction
        )));
    }
    let mut values = Vec::with_capacity(cfg.resamples);
    for r in 0..cfg.resamples as u64 {
        let mut value = None;
        for attempt in 0..MAX_REDRAWS {
            let mut rng = seed::rng(cfg.seed, &[r, attempt]);
            let chosen = index::sample(&mut rng, groups.len(), take);
            let picks: Vec<usize> = chosen
                .iter()
                .map(|q| groups[q][rng.random_range(0..groups[q].len())])
                .collect();
            let g: Vec<f64> = picks.iter().map(|&i| gold[i]).collect();
            let p: Vec<f64> = picks.iter().map(|&i| pred[i]).collect();
            match spearman(&g, &p) {
                Ok(v) => {
                    value = Some(v);
                    break;
                }
                Err(Error::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        values.push(value.ok_or_else(|| {
            Error::Degenerate(format!(
                "resample {r} stayed degenerate after {MAX_REDRAWS} draws"
            ))
        })?);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(BootstrapResult { mean, std, values })
}

/// Gold scores and predicted cosines of dense records, in file order.
pub fn dense_scores(
    state: &EncoderState,
    vocab: &Vocab,
    records: &[DenseRecord],
    use_head: bool,
    max_len: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let sents: Vec<&str> = records
        .iter()
        .flat_map(|r| [r.a.as_str(), r.b.as_str()])
        .collect();
    let embs = embed_unique(state, vocab, &sents, use_head, max_len)?;
    let pred = embs
        .chunks(2)
        .map(|c| cosine_values(&c[0], &c[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok((records.iter().map(|r| r.gold).collect(), pred))
}

pub fn bootstrap_spearman(
    state: &EncoderState,
    vocab: &Vocab,
    records: &[DenseRecord],
    cfg: &BootstrapConfig,
    use_head: bool,
    max_len: usize,
) -> Result<BootstrapResult> {
    let (gold, pred) = dense_scores(state, vocab, records, use_head, max_len)?;
    bootstrap_from_scores(&gold, &pred, &group_by_query(records), cfg)
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Mean squared distance between normalized positive-pair embeddings, in [0, 4].
pub fn alignment(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Validation(
            "alignment needs at least one pair".into(),
        ));
    }
    let mut total = 0.0;
    for (x, y) in pairs {
        total += sq_dist(&normalize(x)?, &normalize(y)?);
    }
    Ok(total / pairs.len() as f64)
}

/// `log mean exp(-2 ||u - v||²)` over distinct unordered pairs of
/// normalized embeddings; never positive.
pub fn uniformity(embs: &[Vec<f64>]) -> Result<f64> {
    if embs.len() < 2 {
        return Err(Error::Validation(
            "uniformity needs at least 2 embeddings".into(),
        ));
    }
    let unit = embs
        .iter()
        .map(|e| normalize(e))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            total += (-2.0 * sq_dist(&unit[i], &unit[j])).exp();
            count += 1;
        }
    }
    Ok((total / count as f64).ln().min(0.0))
}

pub const BANDS: [&str; 5] = ["0-1", "1-2", "2-3", "3-4", "4-5"];

#[derive(Clone, Debug, PartialEq)]
pub struct DensityHistogram {
    pub bins: usize,
    /// `counts[band][bin]`.
    pub counts: Vec<Vec<usize>>,
}

impl DensityHistogram {
    pub fn bin_edges(&self, bin: usize) -> (f64, f64) {
        let w = 2.0 / self.bins as f64;
        (-1.0 + bin as f64 * w, -1.0 + (bin + 1) as f64 * w)
    }

    /// `band,bin_lo,bin_hi,count`, one row per band and bin.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("band,bin_lo,bin_hi,count\n");
        for (band, row) in BANDS.iter().zip(&self.counts) {
            for (bin, c) in row.iter().enumerate() {
                let (lo, hi) = self.bin_edges(bin);
                let _ = writeln!(s, "{band},{lo:.4},{hi:.4},{c}");
            }
        }
        s
    }
}

/// Band of a gold score: `[0,1), [1,2), [2,3), [3,4), [4,5]`.
pub fn band_of(gold: f64) -> usize {
    (gold.floor().max(0.0) as usize).min(4)
}

/// Fixed-width bin over [-1, 1]; values outside are clamped to the ends.
pub fn bin_of(pred: f64, bins: usize) -> usize {
    let x = ((pred.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f64).floor() as usize;
    x.min(bins - 1)
}

pub fn density(gold: &[f64], pred: &[f64], bins: usize) -> Result<DensityHistogram> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if gold.len() != pred.len() {
        return Err(Error::Validation(
            "gold and predicted lengths differ".into(),
        ));
    }
    if let Some(g) = gold.iter().find(|g| !(0.0..=5.0).contains(*g)) {
        return Err(Error::Validation(format!("gold score {g} outside [0, 5]")));
    }
    let mut counts = vec![vec![0; bins]; BANDS.len()];
    for (&g, &p) in gold.iter().zip(pred) {
        if p.is_nan() {
            return Err(Error::Numeric("NaN predicted similarity".into()));
        }
        counts[band_of(g)][bin_of(p, bins)] += 1;
    }
    Ok(DensityHistogram { bins, counts })
}
