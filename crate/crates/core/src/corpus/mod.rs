//! Synthetic <ad keyword, user query> corpus with oracle judges.
//!
//! Every pair is drawn from one topic cluster. The source keyword carries
//! markers of its domain `d_x`; the target domain `d_y` is drawn from row
//! `d_x` of the transition matrix, and the target keyword reuses some
//! source topics, adds new topics from the same cluster and carries markers
//! of `d_y`.

pub mod io;
pub mod vocab;

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Binomial, Distribution};

pub use vocab::{TokenTag, VocabLayout, Vocabulary, BOS, EOS, NUM_RESERVED, PAD, UNK};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{stream, Stream};

pub const MIN_SOURCE_LEN: usize = 2;
pub const MAX_SOURCE_LEN: usize = 8;
pub const MIN_TARGET_LEN: usize = 2;
pub const MAX_TARGET_LEN: usize = 10;

/// One training record.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KeywordPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub source_domain: usize,
    pub target_domain: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub num_domains: usize,
    pub vocab_size: usize,
    pub markers_per_domain: usize,
    pub fillers: usize,
    pub cluster_size: usize,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
    /// Row-stochastic `k × k` domain transition matrix.
    pub transition: Vec<Vec<f64>>,
    pub mean_source_len: f64,
    pub mean_target_len: f64,
    /// Probability that a source keyword takes its cluster's home domain.
    pub home_domain_prob: f64,
    pub second_marker_prob: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let k = 6;
        Self {
            num_domains: k,
            vocab_size: 256,
            markers_per_domain: 4,
            fillers: 8,
            cluster_size: 8,
            train_pairs: 10_000,
            valid_pairs: 500,
            test_pairs: 500,
            transition: default_transition(k, 0.5),
            mean_source_len: 4.0,
            mean_target_len: 5.4,
            home_domain_prob: 0.7,
            second_marker_prob: 0.3,
            seed: 7,
        }
    }
}

/// `self_prob` on the diagonal, the rest spread evenly.
pub fn default_transition(k: usize, self_prob: f64) -> Vec<Vec<f64>> {
    let off = (1.0 - self_prob) / (k - 1) as f64;
    (0..k)
        .map(|i| (0..k).map(|j| if i == j { self_prob } else { off }).collect())
        .collect()
}

impl CorpusConfig {
    pub fn layout(&self) -> VocabLayout {
        VocabLayout {
            size: self.vocab_size,
            num_domains: self.num_domains,
            markers_per_domain: self.markers_per_domain,
            fillers: self.fillers,
            cluster_size: self.cluster_size,
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::build(self.layout())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_domains;
        if k < 2 {
            return Err(Error::Invalid(format!("corpus needs k >= 2 domains, got {k}")));
        }
        if self.transition.len() != k || self.transition.iter().any(|r| r.len() != k) {
            return Err(Error::Invalid(format!("transition matrix must be {k}x{k}")));
        }
        for (i, row) in self.transition.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Invalid(format!(
                    "transition row {i} is not a distribution (sum {s})"
                )));
            }
        }
        if !(MIN_SOURCE_LEN as f64..=MAX_SOURCE_LEN as f64).contains(&self.mean_source_len) {
            return Err(Error::Invalid("mean_source_len outside [2, 8]".into()));
        }
        if !(3.0..=MAX_TARGET_LEN as f64).contains(&self.mean_target_len) {
            return Err(Error::Invalid("mean_target_len outside [3, 10]".into()));
        }
        self.vocabulary().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<KeywordPair>,
    pub valid: Vec<KeywordPair>,
    pub test: Vec<KeywordPair>,
}

impl Corpus {
    pub fn all_pairs(&self) -> impl Iterator<Item = &KeywordPair> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

/// Generate the three disjoint splits. A pure function of `cfg`.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = cfg.vocabulary()?;
    let wanted = [cfg.train_pairs, cfg.valid_pairs, cfg.test_pairs];
    let total: usize = wanted.iter().sum();
    let mut splits: [Vec<KeywordPair>; 3] = Default::default();
    let mut seen = HashSet::with_capacity(total);
    let mut split = 0;
    let mut next = 0u64;
    let chunk = 4096;
    while split < 3 {
        if next > (total as u64 + 1) * 50 {
            return Err(Error::Invalid(
                "corpus configuration cannot produce enough distinct pairs".into(),
            ));
        }
        let batch = par::par_map_range(chunk, |j| generate_pair(cfg, &vocab, next + j as u64));
        next += chunk as u64;
        for pair in batch {
            while split < 3 && splits[split].len() >= wanted[split] {
                split += 1;
            }
            if split == 3 {
                break;
            }
            if seen.insert((pair.source.clone(), pair.target.clone())) {
                splits[split].push(pair);
            }
        }
        while split < 3 && splits[split].len() >= wanted[split] {
            split += 1;
        }
    }
    let [train, valid, test] = splits;
    Ok(Corpus {
        vocab,
        train,
        valid,
        test,
    })
}

fn binomial_len<R: Rng>(rng: &mut R, min: usize, max: usize, mean: f64) -> usize {
    let trials = (max - min) as u64;
    let p = ((mean - min as f64) / trials as f64).clamp(0.0, 1.0);
    min + Binomial::new(trials, p).expect("valid binomial").sample(rng) as usize
}

fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// The pair at record `index`.
pub fn generate_pair(cfg: &CorpusConfig, vocab: &Vocabulary, index: u64) -> KeywordPair {
    let mut rng = stream(cfg.seed, Stream::Corpus, index);
    let k = cfg.num_domains;
    let clusters = vocab.clusters();
    let c = rng.random_range(0..clusters.len());
    let cluster = &clusters[c];
    let home = c % k;
    let source_domain = if rng.random::<f64>() < cfg.home_domain_prob {
        home
    } else {
        rng.random_range(0..k)
    };
    let target_domain = sample_categorical(&mut rng, &cfg.transition[source_domain]);

    let mut topics = cluster.clone();
    topics.shuffle(&mut rng);

    // source: topics + 1-2 markers of d_x
    let n_x = binomial_len(&mut rng, MIN_SOURCE_LEN, MAX_SOURCE_LEN, cfg.mean_source_len);
    let m_x = if n_x >= 3 && rng.random::<f64>() < cfg.second_marker_prob {
        2
    } else {
        1
    };
    let t_x = (n_x - m_x).min(cluster.len() - 1);
    let src_topics = &topics[..t_x];
    let mut source = src_topics.to_vec();
    for _ in 0..m_x {
        let m = *vocab.markers(source_domain).choose(&mut rng).expect("markers");
        let pos = rng.random_range(0..=source.len());
        source.insert(pos, m);
    }

    // target: overlapping topics + new topics + 1-2 markers of d_y (+ fillers)
    let n_y = binomial_len(&mut rng, 3, MAX_TARGET_LEN, cfg.mean_target_len);
    let m_y = if n_y >= 4 && rng.random::<f64>() < cfg.second_marker_prob {
        2
    } else {
        1
    };
    let rest = n_y - m_y;
    let overlap = 1 + rng.random_range(0..t_x.min(rest - 1));
    let available_new = cluster.len() - t_x;
    let new = (rest - overlap).min(available_new);
    let fillers = rest - overlap - new;

    let mut chosen: Vec<usize> = src_topics.to_vec();
    chosen.shuffle(&mut rng);
    let mut target: Vec<usize> = chosen[..overlap].to_vec();
    target.extend_from_slice(&topics[t_x..t_x + new]);
    target.shuffle(&mut rng);
    for _ in 0..fillers {
        let f = match vocab.fillers().choose(&mut rng) {
            Some(&f) => f,
            None => break,
        };
        let pos = rng.random_range(0..=target.len());
        target.insert(pos, f);
    }
    for _ in 0..m_y {
        let m = *vocab.markers(target_domain).choose(&mut rng).expect("markers");
        let pos = rng.random_range(0..=target.len());
        target.insert(pos, m);
    }

    KeywordPair {
        source,
        target,
        source_domain,
        target_domain,
    }
}

/// Majority domain among marker tokens; ties go to the smaller id and a
/// keyword without markers belongs to domain 0.
pub fn oracle_domain(vocab: &Vocabulary, tokens: &[usize]) -> Result<usize> {
    if tokens.is_empty() {
        return Err(Error::domain("oracle_domain", "empty keyword"));
    }
    let mut counts = vec![0usize; vocab.num_domains()];
    for &t in tokens {
        if let TokenTag::Marker(d) = vocab.tag(t) {
            counts[d] += 1;
        }
    }
    let mut best = 0;
    for (d, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = d;
        }
    }
    Ok(best)
}

/// True iff the keywords share at least one topic token.
pub fn oracle_relevance(vocab: &Vocabulary, source: &[usize], target: &[usize]) -> bool {
    source
        .iter()
        .any(|&s| matches!(vocab.tag(s), TokenTag::Topic(_)) && target.contains(&s))
}

/// A fixed domain classifier over token ids.
pub trait DomainClassifier: Sync {
    fn classify(&self, tokens: &[usize]) -> Option<usize>;
}

/// The rule oracle. Empty keywords have no label.
#[derive(Debug, Clone, Copy)]
pub struct OracleClassifier<'v> {
    pub vocab: &'v Vocabulary,
}

impl DomainClassifier for OracleClassifier<'_> {
    fn classify(&self, tokens: &[usize]) -> Option<usize> {
        oracle_domain(self.vocab, tokens).ok()
    }
}
