//! Synthetic paraphrase worlds for toy-scale training and evaluation.
//!
//! Each cluster owns a fixed template mixing content slots and filler
//! slots. A content slot draws one of the cluster's synonyms; a filler slot
//! draws from a pool shared by all clusters and may be left empty. Every
//! cluster has a twin: same template, disjoint content words. A twin
//! realization that reuses the anchor's fillers is the hard negative.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::eval::DenseRecord;
use crate::seed;
use crate::text::{ScoredPair, TripletRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub clusters: usize,
    pub content_slots: usize,
    pub synonyms: usize,
    pub filler_slots: usize,
    pub filler_pool: usize,
    /// Probability that a filler slot is left empty.
    pub filler_drop: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            clusters: 50,
            content_slots: 3,
            synonyms: 3,
            filler_slots: 5,
            filler_pool: 12,
            filler_drop: 0.3,
            seed: 42,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Content(usize),
    Filler,
}

#[derive(Clone, Debug)]
struct Realization {
    synonyms: Vec<usize>,
    fillers: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct ToyWorld {
    spec: ToySpec,
    templates: Vec<Vec<Slot>>,
    /// `[cluster][slot][synonym]`; clusters `0..n` then their twins `n..2n`.
    content: Vec<Vec<Vec<String>>>,
    fillers: Vec<String>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables)
        .flat_map(|_| {
            [
                *CONSONANTS.choose(rng).expect("non-empty") as char,
                *VOWELS.choose(rng).expect("non-empty") as char,
            ]
        })
        .collect()
}

impl ToyWorld {
    pub fn new(spec: ToySpec) -> Self {
        let mut rng = seed::rng(spec.seed, &[0x5eed]);
        let mut seen = HashSet::new();
        let mut fresh = |rng: &mut ChaCha8Rng, syl: usize| loop {
            let w = word(rng, syl);
            if seen.insert(w.clone()) {
                return w;
            }
        };
        let fillers: Vec<String> = (0..spec.filler_pool).map(|_| fresh(&mut rng, 1)).collect();
        let content = (0..2 * spec.clusters)
            .map(|_| {
                (0..spec.content_slots)
                    .map(|_| (0..spec.synonyms).map(|_| fresh(&mut rng, 3)).collect())
                    .collect()
            })
            .collect();
        let templates = (0..spec.clusters)
            .map(|_| {
                let mut t: Vec<Slot> = (0..spec.content_slots)
                    .map(Slot::Content)
                    .chain(std::iter::repeat_n(Slot::Filler, spec.filler_slots))
                    .collect();
                t.shuffle(&mut rng);
                t
            })
            .collect();
        Self {
            spec,
            templates,
            content,
            fillers,
        }
    }

    pub fn spec(&self) -> &ToySpec {
        &self.spec
    }

    pub fn clusters(&self) -> usize {
        self.spec.clusters
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Realization {
        Realization {
            synonyms: (0..self.spec.content_slots)
                .map(|_| rng.random_range(0..self.spec.synonyms))
                .collect(),
            fillers: (0..self.spec.filler_slots)
                .map(|_| {
                    (!rng.random_bool(self.spec.filler_drop))
                        .then(|| rng.random_range(0..self.spec.filler_pool))
                })
                .collect(),
        }
    }

    /// `twin` selects the twin cluster's content words.
    fn render(&self, cluster: usize, r: &Realization, twin: bool) -> String {
        let words = &self.content[if twin {
            cluster + self.spec.clusters
        } else {
            cluster
        }];
        let mut fillers = r.fillers.iter();
        let mut out = Vec::new();
        for slot in &self.templates[cluster] {
            match *slot {
                Slot::Content(i) => out.push(words[i][r.synonyms[i]].as_str()),
                Slot::Filler => {
                    if let Some(Some(f)) = fillers.next() {
                        out.push(self.fillers[*f].as_str());
                    }
                }
            }
        }
        out.join(" ")
    }

    pub fn sentence(&self, cluster: usize, rng: &mut ChaCha8Rng) -> String {
        let r = self.draw(rng);
        self.render(cluster, &r, false)
    }

    /// `per_cluster` sentences from every cluster, shuffled, with labels.
    pub fn corpus(&self, per_cluster: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, String)> {
        let mut out: Vec<(usize, String)> = (0..self.clusters())
            .flat_map(|c| (0..per_cluster).map(move |_| c))
            .map(|c| (c, self.sentence(c, rng)))
            .collect();
        out.shuffle(rng);
        out
    }

    /// Alternating within-cluster (gold 5) and cross-cluster (gold 0) pairs.
    pub fn sts_pairs(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<ScoredPair> {
        (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    let c = rng.random_range(0..self.clusters());
                    ScoredPair {
                        a: self.sentence(c, rng),
                        b: self.sentence(c, rng),
                        score: 5.0,
                    }
                } else {
                    let pick = rand::seq::index::sample(rng, self.clusters(), 2);
                    ScoredPair {
                        a: self.sentence(pick.index(0), rng),
                        b: self.sentence(pick.index(1), rng),
                        score: 0.0,
                    }
                }
            })
            .collect()
    }

    /// Anchor, a fresh paraphrase, and the twin-cluster rendering of the
    /// anchor's own realization (same template and fillers).
    pub fn triplets(&self, per_cluster: usize, rng: &mut ChaCha8Rng) -> Vec<TripletRecord> {
        let mut out = Vec::with_capacity(self.clusters() * per_cluster);
        for c in 0..self.clusters() {
            for _ in 0..per_cluster {
                let r = self.draw(rng);
                out.push(TripletRecord {
                    anchor: self.render(c, &r, false),
                    positive: self.sentence(c, rng),
                    hard_negative: self.render(c, &r, true),
                });
            }
        }
        out.shuffle(rng);
        out
    }

    /// Each query gets a paraphrase (gold in [4, 5]), a twin-cluster
    /// sentence (gold in [2, 3]) and an unrelated one (gold in [0, 1]),
    /// golds rounded to one decimal.
    pub fn dense(&self, queries: usize, rng: &mut ChaCha8Rng) -> Vec<DenseRecord> {
        let mut out = Vec::with_capacity(queries * 3);
        let round = |x: f64| (x * 10.0).round() / 10.0;
        for q in 0..queries {
            let c = rng.random_range(0..self.clusters());
            let query = self.sentence(c, rng);
            let other = (c + 1 + rng.random_range(0..self.clusters() - 1)) % self.clusters();
            let twin = self.draw(rng);
            let items = [
                (self.sentence(c, rng), round(rng.random_range(4.0..=5.0))),
                (
                    self.render(c, &twin, true),
                    round(rng.random_range(2.0..=3.0)),
                ),
                (
                    self.sentence(other, rng),
                    round(rng.random_range(0.0..=1.0)),
                ),
            ];
            for (i, (b, gold)) in items.into_iter().enumerate() {
                out.push(DenseRecord {
                    query: format!("q{q:04}"),
                    item: format!("i{i}"),
                    gold,
                    a: query.clone(),
                    b,
                });
            }
        }
        out
    }
}

/// Independent random stream for one artifact of a toy world.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let key = name.bytes().fold(0u64, |h, b| seed::mix(h, b as u64));
    seed::rng(seed, &[key])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_is_deterministic_and_words_unique() {
        let a = ToyWorld::new(ToySpec::default());
        let b = ToyWorld::new(ToySpec::default());
        assert_eq!(
            a.corpus(2, &mut stream(1, "corpus")),
            b.corpus(2, &mut stream(1, "corpus"))
        );
        let mut all: Vec<&String> = a
            .content
            .iter()
            .flatten()
            .flatten()
            .chain(&a.fillers)
            .collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn hard_negative_shares_fillers_but_not_content() {
        let w = ToyWorld::new(ToySpec {
            filler_drop: 0.0,
            ..ToySpec::default()
        });
        let t = &w.triplets(1, &mut stream(3, "t"))[0];
        let a: HashSet<&str> = t.anchor.split(' ').collect();
        let h: HashSet<&str> = t.hard_negative.split(' ').collect();
        let shared = a.intersection(&h).count();
        assert!(shared >= 1 && shared < a.len(), "{t:?}");
        assert_eq!(
            t.anchor.split(' ').count(),
            t.hard_negative.split(' ').count()
        );
    }

    #[test]
    fn sts_and_dense_shapes() {
        let w = ToyWorld::new(ToySpec::default());
        let p = w.sts_pairs(10, &mut stream(0, "dev"));
        assert_eq!(p.iter().filter(|x| x.score == 5.0).count(), 5);
        let d = w.dense(4, &mut stream(0, "dense"));
        assert_eq!(d.len(), 12);
        assert!(d.iter().all(|r| (0.0..=5.0).contains(&r.gold)));
        assert_eq!(crate::eval::group_by_query(&d).len(), 4);
    }
}
