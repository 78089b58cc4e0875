//! Add-k smoothed n-gram language model over keyword tokens.
//!
//! Outcomes are the non-reserved tokens plus EOS. Contexts are the previous
//! `order - 1` tokens, padded with BOS at the start of a keyword.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{Vocabulary, BOS, EOS, NUM_RESERVED};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NGramLM {
    order: usize,
    add_k: f64,
    vocab_size: usize,
    counts: BTreeMap<Vec<usize>, BTreeMap<usize, u64>>,
    totals: BTreeMap<Vec<usize>, u64>,
}

impl NGramLM {
    pub fn new(order: usize, add_k: f64, vocab_size: usize) -> Result<Self> {
        if order < 1 {
            return Err(Error::Invalid(format!("n-gram order must be at least 1, got {order}")));
        }
        if add_k < 0.0 || !add_k.is_finite() {
            return Err(Error::Invalid(format!(
                "add-k constant must be non-negative, got {add_k}"
            )));
        }
        if vocab_size <= NUM_RESERVED {
            return Err(Error::Invalid("vocabulary has no ordinary tokens".into()));
        }
        Ok(Self {
            order,
            add_k,
            vocab_size,
            counts: BTreeMap::new(),
            totals: BTreeMap::new(),
        })
    }

    /// Count every n-gram of `keywords` (each closed by EOS).
    pub fn train<'a, I>(order: usize, add_k: f64, vocab_size: usize, keywords: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        let mut lm = Self::new(order, add_k, vocab_size)?;
        let mut any = false;
        for kw in keywords {
            if kw.is_empty() {
                continue;
            }
            any = true;
            lm.observe(kw);
        }
        if !any {
            return Err(Error::Invalid(
                "cannot train a language model on an empty corpus".into(),
            ));
        }
        Ok(lm)
    }

    fn observe(&mut self, kw: &[usize]) {
        for (ctx, tok) in self.events(kw) {
            *self.counts.entry(ctx.clone()).or_default().entry(tok).or_default() += 1;
            *self.totals.entry(ctx).or_default() += 1;
        }
    }

    /// `(context, token)` for every position of `kw` plus the EOS position.
    fn events(&self, kw: &[usize]) -> Vec<(Vec<usize>, usize)> {
        let n = self.order - 1;
        let mut padded = vec![BOS; n];
        padded.extend_from_slice(kw);
        padded.push(EOS);
        (n..padded.len())
            .map(|i| (padded[i - n..i].to_vec(), padded[i]))
            .collect()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn add_k(&self) -> f64 {
        self.add_k
    }

    /// Size of the outcome space: ordinary tokens plus EOS.
    pub fn outcomes(&self) -> usize {
        self.vocab_size - NUM_RESERVED + 1
    }

    /// Outcome ids in ascending order.
    pub fn outcome_ids(&self) -> impl Iterator<Item = usize> {
        std::iter::once(EOS).chain(NUM_RESERVED..self.vocab_size)
    }

    /// `P(token | context)`; unseen contexts without smoothing are uniform.
    pub fn prob(&self, context: &[usize], token: usize) -> f64 {
        let v = self.outcomes() as f64;
        let total = self.totals.get(context).copied().unwrap_or(0) as f64;
        let denom = total + self.add_k * v;
        if denom == 0.0 {
            return 1.0 / v;
        }
        let c = self
            .counts
            .get(context)
            .and_then(|m| m.get(&token))
            .copied()
            .unwrap_or(0) as f64;
        (c + self.add_k) / denom
    }

    /// Per-position log-probabilities of `kw` plus EOS.
    pub fn token_logprobs(&self, kw: &[usize]) -> Vec<f64> {
        self.events(kw).iter().map(|(ctx, t)| self.prob(ctx, *t).ln()).collect()
    }

    /// Mean log-probability per position, EOS included.
    pub fn mean_logprob(&self, kw: &[usize]) -> f64 {
        let lps = self.token_logprobs(kw);
        lps.iter().sum::<f64>() / lps.len() as f64
    }

    /// Geometric-mean per-token probability.
    pub fn prob_per_token(&self, kw: &[usize]) -> f64 {
        self.mean_logprob(kw).exp()
    }

    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut s = format!(
            "# ngram\torder={}\tadd_k={}\tvocab={}\n",
            self.order, self.add_k, self.vocab_size
        );
        for (ctx, toks) in &self.counts {
            let c = vocab.decode(ctx).join(" ");
            for (t, n) in toks {
                let _ = writeln!(s, "{c}\t{}\t{n}", vocab.token(*t));
            }
        }
        s
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        fs::write(path, self.to_text(vocab)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), vocab)
    }

    pub fn parse(text: &str, name: &str, vocab: &Vocabulary) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Format {
            path: name.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty counts file".into()))?;
        let mut fields = header.split('\t');
        if fields.next() != Some("# ngram") {
            return Err(err(1, "missing '# ngram' header".into()));
        }
        let (mut order, mut add_k, mut vocab_size) = (None, None, None);
        for f in fields {
            match f.split_once('=') {
                Some(("order", v)) => order = v.parse().ok(),
                Some(("add_k", v)) => add_k = v.parse().ok(),
                Some(("vocab", v)) => vocab_size = v.parse().ok(),
                _ => return Err(err(1, format!("unexpected header field {f:?}"))),
            }
        }
        let (Some(order), Some(add_k), Some(vocab_size)) = (order, add_k, vocab_size) else {
            return Err(err(1, "header needs order, add_k and vocab".into()));
        };
        if vocab_size != vocab.len() {
            return Err(err(
                1,
                format!("counts built for {vocab_size} tokens, vocabulary has {}", vocab.len()),
            ));
        }
        let mut lm = Self::new(order, add_k, vocab_size)?;
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(err(i + 1, format!("expected 3 fields, found {}", f.len())));
            }
            let id = |t: &str| vocab.id(t).ok_or_else(|| err(i + 1, format!("unknown token {t:?}")));
            let ctx = f[0]
                .split(' ')
                .filter(|t| !t.is_empty())
                .map(id)
                .collect::<Result<Vec<_>>>()?;
            if ctx.len() != order - 1 {
                return Err(err(i + 1, format!("context of length {} for order {order}", ctx.len())));
            }
            let tok = id(f[1])?;
            let n: u64 = f[2].parse().map_err(|_| err(i + 1, format!("bad count {:?}", f[2])))?;
            *lm.counts.entry(ctx.clone()).or_default().entry(tok).or_default() += n;
            *lm.totals.entry(ctx).or_default() += n;
        }
        Ok(lm)
    }
}
