//! Offline metrics over generated keywords.

use std::collections::HashSet;
use std::hash::Hash;

use crate::corpus::DomainClassifier;
use crate::error::{Error, Result};
use crate::model::GenerationResult;
use crate::rl::NGramLM;

/// `exp(-mean log-probability)` over all positions.
pub fn perplexity_from_logprobs<'a, I>(logprobs: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let (mut sum, mut n) = (0.0, 0usize);
    for lps in logprobs {
        sum += lps.iter().sum::<f64>();
        n += lps.len();
    }
    if n == 0 {
        return Err(Error::Invalid("perplexity over zero tokens".into()));
    }
    Ok((-sum / n as f64).exp())
}

/// Perplexity of `keywords` (each closed by EOS) under the external LM.
pub fn perplexity_lm<'a, I>(lm: &NGramLM, keywords: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let lps: Vec<Vec<f64>> = keywords.into_iter().map(|k| lm.token_logprobs(k)).collect();
    perplexity_from_logprobs(lps.iter().map(Vec::as_slice))
}

/// Fraction of results whose predicted domain matches the classifier's
/// reading of the output; unclassifiable (empty) outputs count as misses.
pub fn domain_accuracy(results: &[&GenerationResult], classifier: &dyn DomainClassifier) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Invalid("domain accuracy over zero results".into()));
    }
    let hits = results
        .iter()
        .filter(|r| classifier.classify(&r.tokens) == Some(r.domain))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

pub fn ngrams<T: Clone>(keyword: &[T], n: usize) -> impl Iterator<Item = Vec<T>> + '_ {
    keyword.windows(n.max(1)).filter(move |_| n > 0).map(<[T]>::to_vec)
}

/// Distinct n-grams over all n-gram occurrences.
pub fn distinct_n<T: Clone + Eq + Hash>(keywords: &[&[T]], n: usize) -> Result<f64> {
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for k in keywords {
        for g in ngrams(k, n) {
            total += 1;
            seen.insert(g);
        }
    }
    if total == 0 {
        return Err(Error::Invalid(format!("no {n}-grams in the generated set")));
    }
    Ok(seen.len() as f64 / total as f64)
}

pub fn ngram_set<T: Clone + Eq + Hash>(keywords: &[&[T]], n: usize) -> HashSet<Vec<T>> {
    keywords.iter().flat_map(|k| ngrams(k, n)).collect()
}

/// Fraction of distinct generated n-grams absent from `reference`.
pub fn novelty_n<T: Clone + Eq + Hash>(keywords: &[&[T]], reference: &HashSet<Vec<T>>, n: usize) -> Result<f64> {
    let generated = ngram_set(keywords, n);
    if generated.is_empty() {
        return Err(Error::Invalid(format!("no {n}-grams in the generated set")));
    }
    let novel = generated.iter().filter(|g| !reference.contains(*g)).count();
    Ok(novel as f64 / generated.len() as f64)
}

/// Harmonic mean; zero when any factor is zero.
pub fn harmonic_mean(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pra {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f_pr: f64,
    pub f_pa: f64,
    pub f_ra: f64,
    pub f_pra: f64,
}

impl Pra {
    pub fn from_rates(precision: f64, recall: f64, accuracy: f64) -> Self {
        Self {
            precision,
            recall,
            accuracy,
            f_pr: harmonic_mean(&[precision, recall]),
            f_pa: harmonic_mean(&[precision, accuracy]),
            f_ra: harmonic_mean(&[recall, accuracy]),
            f_pra: harmonic_mean(&[precision, recall, accuracy]),
        }
    }
}

/// One generated keyword with its relevance and domain judgements.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Judged {
    pub source: usize,
    pub tokens: Vec<usize>,
    pub relevant: bool,
    pub domain_ok: bool,
}

/// Distinct relevant `(source, keyword)` pairs across every model's output.
pub fn relevant_pool<'a, I>(models: I) -> HashSet<(usize, Vec<usize>)>
where
    I: IntoIterator<Item = &'a [Judged]>,
{
    models
        .into_iter()
        .flatten()
        .filter(|j| j.relevant)
        .map(|j| (j.source, j.tokens.clone()))
        .collect()
}

/// Precision over this model's outputs, recall against the pooled relevant
/// set, accuracy as domain agreement, and their harmonic means.
pub fn pra_f(judged: &[Judged], pool: &HashSet<(usize, Vec<usize>)>) -> Result<Pra> {
    if judged.is_empty() {
        return Err(Error::Invalid("no generated keywords to judge".into()));
    }
    if pool.is_empty() {
        return Err(Error::Invalid("recall is undefined for an empty relevant pool".into()));
    }
    let n = judged.len() as f64;
    let precision = judged.iter().filter(|j| j.relevant).count() as f64 / n;
    let found: HashSet<(usize, &[usize])> = judged
        .iter()
        .filter(|j| j.relevant)
        .map(|j| (j.source, j.tokens.as_slice()))
        .collect();
    let hits = found.iter().filter(|(s, t)| pool.contains(&(*s, t.to_vec()))).count();
    let recall = hits as f64 / pool.len() as f64;
    let accuracy = judged.iter().filter(|j| j.domain_ok).count() as f64 / n;
    Ok(Pra::from_rates(precision, recall, accuracy))
}
