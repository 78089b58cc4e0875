//! Evaluation: batch generation over held-out sources, the metrics report
//! and the fixed-β sweep.

pub mod metrics;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

pub use metrics::{
    distinct_n, domain_accuracy, harmonic_mean, ngram_set, novelty_n, perplexity_from_logprobs, perplexity_lm, pra_f,
    relevant_pool, Judged, Pra,
};

use crate::corpus::{oracle_relevance, DomainClassifier, KeywordPair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::decode::{
    eval_noise, generate, greedy_multi_beta, resolve_beta, BetaSource, DecodeContext, GenOptions, GenerationResult,
    LatentChoice, Mode,
};
use crate::model::Model;
use crate::par::par_map_range;
use crate::rl::{score_result, NGramLM};

pub const NGRAM_ORDERS: [usize; 3] = [2, 3, 4];

/// Named metric values with their sample counts, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub title: String,
    entries: Vec<(String, f64, usize)>,
}

impl MetricsReport {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: impl Into<String>, value: f64, n: usize) {
        self.entries.push((key.into(), value, n));
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == key).map(|e| e.1)
    }

    pub fn entries(&self) -> &[(String, f64, usize)] {
        &self.entries
    }

    /// `key<TAB>value` and `key.n<TAB>count` lines after a comment header.
    pub fn to_tsv(&self, build: &str) -> String {
        let mut s = format!("# {}\t{build}\n", self.title);
        for (k, v, n) in &self.entries {
            let _ = writeln!(s, "{k}\t{v}");
            let _ = writeln!(s, "{k}.n\t{n}");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let w = self.entries.iter().map(|e| e.0.len()).max().unwrap_or(0).max(6);
        let mut s = format!("{}\n{:<w$}  {:>12}  {:>7}\n", self.title, "metric", "value", "n");
        for (k, v, n) in &self.entries {
            let _ = writeln!(s, "{k:<w$}  {v:>12.6}  {n:>7}");
        }
        s
    }

    pub fn save(&self, path: &Path, build: &str) -> Result<()> {
        std::fs::write(path, self.to_tsv(build)).map_err(|e| Error::io(path, e))
    }
}

/// Reference n-gram sets for novelty: every keyword of the corpus (ALL) or
/// only purchased-keyword sources (AD).
#[derive(Debug, Clone)]
pub struct References {
    pub all: Vec<HashSet<Vec<usize>>>,
    pub ad: Vec<HashSet<Vec<usize>>>,
}

impl References {
    pub fn build<'a, I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = &'a KeywordPair>,
    {
        let pairs: Vec<&KeywordPair> = pairs.into_iter().collect();
        let sources: Vec<&[usize]> = pairs.iter().map(|p| p.source.as_slice()).collect();
        let both: Vec<&[usize]> = pairs
            .iter()
            .flat_map(|p| [p.source.as_slice(), p.target.as_slice()])
            .collect();
        Self {
            all: NGRAM_ORDERS.iter().map(|&n| ngram_set(&both, n)).collect(),
            ad: NGRAM_ORDERS.iter().map(|&n| ngram_set(&sources, n)).collect(),
        }
    }
}

/// Results for each source, tagged with the source's index.
pub type Outputs = Vec<(usize, GenerationResult)>;

pub fn generate_all(
    model: &Model,
    pairs: &[KeywordPair],
    mode: Mode,
    beta: BetaSource,
    opts: &GenOptions<'_>,
) -> Result<Outputs> {
    let per_source = par_map_range(pairs.len(), |i| {
        generate(model, &pairs[i].source, pairs[i].source_domain, i, mode, beta, opts)
    });
    let mut out = Vec::new();
    for (i, r) in per_source.into_iter().enumerate() {
        out.extend(r?.into_iter().map(|g| (i, g)));
    }
    Ok(out)
}

/// Teacher-forced perplexity of the ground-truth targets along the
/// inference path (prior mean for `z`, hard domain prediction).
pub fn model_perplexity(
    model: &Model,
    pairs: &[KeywordPair],
    mode: Mode,
    beta: BetaSource,
    opts: &GenOptions<'_>,
) -> Result<f64> {
    let lps = par_map_range(pairs.len(), |i| -> Result<Vec<f64>> {
        let p = &pairs[i];
        let ctx = DecodeContext::new(model, &p.source, p.source_domain, LatentChoice::PriorMean)?;
        let b = match mode {
            Mode::Seq2Seq => 0.0,
            _ => resolve_beta(&ctx, mode, beta, opts)?,
        };
        ctx.score(&p.target, b)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    perplexity_from_logprobs(lps.iter().map(Vec::as_slice))
}

pub fn judge(
    outputs: &Outputs,
    pairs: &[KeywordPair],
    vocab: &Vocabulary,
    classifier: &dyn DomainClassifier,
) -> Vec<Judged> {
    outputs
        .iter()
        .map(|(i, r)| Judged {
            source: *i,
            tokens: r.tokens.clone(),
            relevant: !r.tokens.is_empty() && oracle_relevance(vocab, &pairs[*i].source, &r.tokens),
            domain_ok: classifier.classify(&r.tokens) == Some(r.domain),
        })
        .collect()
}

/// Mean raw reward of the outputs under the reward estimator.
pub fn mean_reward(outputs: &Outputs, lm: &NGramLM, classifier: &dyn DomainClassifier, lambda: f64) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    outputs
        .iter()
        .map(|(_, r)| score_result(r, lm, classifier, lambda).4)
        .sum::<f64>()
        / outputs.len() as f64
}

/// Everything `eval` reports for one model's outputs.
pub struct ReportInputs<'a> {
    pub title: String,
    pub outputs: &'a Outputs,
    pub perplexity: f64,
    pub sources: usize,
    pub judged: &'a [Judged],
    pub pool: &'a HashSet<(usize, Vec<usize>)>,
    pub lm: &'a NGramLM,
    pub classifier: &'a dyn DomainClassifier,
    pub refs: &'a References,
    pub lambda: f64,
}

/// Metrics that are undefined for these outputs (no n-grams, no non-empty
/// keyword, nothing relevant in the pool) are left out of the report.
pub fn build_report(inp: ReportInputs<'_>) -> Result<MetricsReport> {
    let results: Vec<&GenerationResult> = inp.outputs.iter().map(|(_, r)| r).collect();
    let keywords: Vec<&[usize]> = results.iter().map(|r| r.tokens.as_slice()).collect();
    let non_empty: Vec<&[usize]> = keywords.iter().copied().filter(|k| !k.is_empty()).collect();
    let n = results.len();
    let mut rep = MetricsReport::new(inp.title);
    rep.push("perplexity", inp.perplexity, inp.sources);
    if let Ok(v) = perplexity_lm(inp.lm, non_empty.iter().copied()) {
        rep.push("perplexity_lm", v, non_empty.len());
    }
    rep.push("domain_accuracy", domain_accuracy(&results, inp.classifier)?, n);
    for (j, &order) in NGRAM_ORDERS.iter().enumerate() {
        if let Ok(v) = distinct_n(&keywords, order) {
            rep.push(format!("distinct_{order}"), v, n);
        }
        if let Ok(v) = novelty_n(&keywords, &inp.refs.all[j], order) {
            rep.push(format!("novelty_all_{order}"), v, n);
        }
        if let Ok(v) = novelty_n(&keywords, &inp.refs.ad[j], order) {
            rep.push(format!("novelty_ad_{order}"), v, n);
        }
    }
    // with nothing relevant in the pool recall is undefined and the PRA block is left out
    if !inp.pool.is_empty() {
        let pra = pra_f(inp.judged, inp.pool)?;
        rep.push("precision", pra.precision, n);
        rep.push("recall", pra.recall, inp.pool.len());
        rep.push("accuracy", pra.accuracy, n);
        rep.push("f_pr", pra.f_pr, n);
        rep.push("f_pa", pra.f_pa, n);
        rep.push("f_ra", pra.f_ra, n);
        rep.push("f_pra", pra.f_pra, n);
    }
    rep.push(
        "mean_reward",
        mean_reward(inp.outputs, inp.lm, inp.classifier, inp.lambda),
        n,
    );
    let mean_beta = results.iter().map(|r| r.beta).sum::<f64>() / n.max(1) as f64;
    rep.push("mean_beta", mean_beta, n);
    Ok(rep)
}

/// Per-β sampled outputs and per-β teacher-forced log-probs of one source.
type SourceSweep = (Vec<Vec<GenerationResult>>, Vec<Vec<f64>>);

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub perplexity: f64,
    pub perplexity_lm: f64,
    pub accuracy: f64,
    pub distinct_4: f64,
    pub novelty_4: f64,
    pub mean_reward: f64,
    pub outputs: usize,
}

/// Fixed-β metrics over a grid, with `samples` latent draws per source.
/// All βs of a draw share one decoding context.
#[allow(clippy::too_many_arguments)]
pub fn sweep_beta(
    model: &Model,
    pairs: &[KeywordPair],
    betas: &[f64],
    samples: usize,
    seed: u64,
    lm: &NGramLM,
    classifier: &dyn DomainClassifier,
    refs: &References,
    lambda: f64,
) -> Result<Vec<SweepRow>> {
    if betas.is_empty() || samples == 0 {
        return Err(Error::Invalid("sweep needs at least one beta and one sample".into()));
    }
    let z_dim = model.net.z_dim();
    let per_source = par_map_range(pairs.len(), |i| -> Result<SourceSweep> {
        let p = &pairs[i];
        let mut by_beta = vec![Vec::with_capacity(samples); betas.len()];
        for s in 0..samples {
            let eps = eval_noise(seed, i, s, z_dim);
            let ctx = DecodeContext::new(model, &p.source, p.source_domain, LatentChoice::Noise(&eps))?;
            for (b, r) in greedy_multi_beta(&ctx, betas)?.into_iter().enumerate() {
                by_beta[b].push(r);
            }
        }
        let ctx = DecodeContext::new(model, &p.source, p.source_domain, LatentChoice::PriorMean)?;
        let tf = betas
            .iter()
            .map(|&b| ctx.score(&p.target, b))
            .collect::<Result<Vec<_>>>()?;
        Ok((by_beta, tf))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(betas.len());
    for (b, &beta) in betas.iter().enumerate() {
        let outputs: Outputs = per_source
            .iter()
            .enumerate()
            .flat_map(|(i, (by_beta, _))| by_beta[b].iter().map(move |r| (i, r.clone())))
            .collect();
        let results: Vec<&GenerationResult> = outputs.iter().map(|(_, r)| r).collect();
        let keywords: Vec<&[usize]> = results.iter().map(|r| r.tokens.as_slice()).collect();
        let non_empty: Vec<&[usize]> = keywords.iter().copied().filter(|k| !k.is_empty()).collect();
        let j4 = NGRAM_ORDERS
            .iter()
            .position(|&n| n == 4)
            .expect("4 is a reported order");
        rows.push(SweepRow {
            beta,
            perplexity: perplexity_from_logprobs(per_source.iter().map(|(_, tf)| tf[b].as_slice()))?,
            perplexity_lm: perplexity_lm(lm, non_empty.iter().copied()).unwrap_or(f64::NAN),
            accuracy: domain_accuracy(&results, classifier)?,
            distinct_4: distinct_n(&keywords, 4).unwrap_or(f64::NAN),
            novelty_4: novelty_n(&keywords, &refs.all[j4], 4).unwrap_or(f64::NAN),
            mean_reward: mean_reward(&outputs, lm, classifier, lambda),
            outputs: outputs.len(),
        });
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:>6}  {:>10}  {:>13}  {:>8}  {:>10}  {:>9}  {:>11}\n",
        "beta", "perplexity", "perplexity_lm", "accuracy", "distinct_4", "novelty_4", "mean_reward"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>6.2}  {:>10.4}  {:>13.4}  {:>8.4}  {:>10.4}  {:>9.4}  {:>11.6}",
            r.beta, r.perplexity, r.perplexity_lm, r.accuracy, r.distinct_4, r.novelty_4, r.mean_reward
        );
    }
    s
}

pub fn sweep_tsv(rows: &[SweepRow], build: &str) -> String {
    let mut s = format!("# sweep-beta\t{build}\nbeta\tperplexity\tperplexity_lm\taccuracy\tdistinct_4\tnovelty_4\tmean_reward\toutputs\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.beta, r.perplexity, r.perplexity_lm, r.accuracy, r.distinct_4, r.novelty_4, r.mean_reward, r.outputs
        );
    }
    s
}
