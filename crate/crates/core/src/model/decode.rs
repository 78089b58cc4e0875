//! Inference: per-source decoding context, greedy and beam decoding, and
//! the three generation modes.

use std::str::FromStr;

use super::{Model, Network, Variant};
use crate::corpus::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::numerics::tensor::{argmax, log_softmax, softmax};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::rng::{stream2, Stream};

/// Tokens never emitted by a decoder.
pub const MASKED: [usize; 3] = [PAD, BOS, UNK];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Latent samples from the prior, β chosen by the policy, greedy decoding.
    Dckg,
    /// Latent samples from the prior, fixed β, greedy decoding.
    Cvae,
    /// Beam search on the seq2seq variant.
    Seq2Seq,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dckg => "dckg",
            Mode::Cvae => "cvae",
            Mode::Seq2Seq => "seq2seq",
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            Mode::Dckg | Mode::Cvae => Variant::Latent,
            Mode::Seq2Seq => Variant::Seq2Seq,
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dckg" => Ok(Mode::Dckg),
            "cvae" => Ok(Mode::Cvae),
            "seq2seq" => Ok(Mode::Seq2Seq),
            other => Err(Error::Invalid(format!(
                "unknown mode {other:?} (dckg | cvae | seq2seq)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaSource {
    Policy,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeKind {
    Greedy,
    Beam,
    SampledZ,
}

impl DecodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodeKind::Greedy => "greedy",
            DecodeKind::Beam => "beam",
            DecodeKind::SampledZ => "sampled-z",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    /// Generated tokens without the closing EOS.
    pub tokens: Vec<usize>,
    /// Predicted target domain `argmax P_real`.
    pub domain: usize,
    pub beta: f64,
    pub token_logprobs: Vec<f64>,
    pub eos_logprob: f64,
    /// Sum of token and EOS log-probabilities.
    pub total_logprob: f64,
    pub kind: DecodeKind,
}

impl GenerationResult {
    /// Mean log-probability per decoded position, EOS included.
    pub fn mean_logprob(&self) -> f64 {
        self.total_logprob / (self.tokens.len() + 1) as f64
    }
}

/// Decoder state between steps.
#[derive(Debug, Clone)]
pub struct DecState {
    pub layers: Vec<Tensor>,
    pub context: Tensor,
}

/// Everything the decoder needs for one source and one latent draw.
#[derive(Debug, Clone)]
pub struct DecodeContext<'m> {
    net: &'m Network,
    store: &'m ParamStore,
    enc_states: Tensor,
    keys: Tensor,
    slot: Tensor,
    /// Domain word scores `D`; absent for the seq2seq variant.
    pub scores: Option<Tensor>,
    pub init: DecState,
    pub domain: usize,
    pub p_real: Vec<f64>,
    pub h_x: Tensor,
    pub e_dx: Tensor,
    pub z: Tensor,
    pub e_dy: Tensor,
    pub max_len: usize,
}

/// Which latent vector a context is built with.
#[derive(Debug, Clone, Copy)]
pub enum LatentChoice<'a> {
    PriorMean,
    /// Standard-normal noise for `z = μ' + σ' ⊙ ε`.
    Noise(&'a [f64]),
}

impl<'m> DecodeContext<'m> {
    pub fn new(model: &'m Model, source: &[usize], source_domain: usize, latent: LatentChoice<'_>) -> Result<Self> {
        let net = &model.net;
        let store = &model.store;
        let cfg = &model.cfg;
        let mut g = Graph::inference(store);
        let enc = net.encode(&mut g, source)?;
        let e_dx = net.embed_domain(&mut g, source_domain)?;
        let z = match cfg.variant {
            Variant::Latent => {
                let p = net.prior(&mut g, enc.last, e_dx, cfg.logvar_clamp)?;
                match latent {
                    LatentChoice::PriorMean => p.mu,
                    LatentChoice::Noise(eps) => super::sample_latent(&mut g, p, eps)?,
                }
            }
            Variant::Seq2Seq => g.input(Tensor::zeros(&[net.z_dim()])),
        };
        let o_d = net.domain_logits(&mut g, enc.last, e_dx, z)?;
        let p_real = softmax(g.value(o_d).data());
        let domain = argmax(&p_real);
        let e_dy = if cfg.soft_inference {
            let p = g.input(Tensor::vector(p_real.clone()));
            net.domain_embedding_from_dist(&mut g, p)?
        } else {
            net.embed_domain(&mut g, domain)?
        };
        let (slot, scores) = match cfg.variant {
            Variant::Latent => {
                let d = net.domain_word_scores(&mut g, e_dy)?;
                (z, Some(g.value(d).clone()))
            }
            Variant::Seq2Seq => (e_dy, None),
        };
        let keys = net.attn.keys(&mut g, enc.states)?;
        let s0 = net.decoder_init(&mut g, enc.last)?;
        let top = *s0.last().expect("at least one layer");
        let (c0, _) = net.attn.context(&mut g, top, enc.states, keys)?;
        Ok(Self {
            net,
            store,
            enc_states: g.value(enc.states).clone(),
            keys: g.value(keys).clone(),
            slot: g.value(slot).clone(),
            scores,
            init: DecState {
                layers: s0.iter().map(|&v| g.value(v).clone()).collect(),
                context: g.value(c0).clone(),
            },
            domain,
            p_real,
            h_x: g.value(enc.last).clone(),
            e_dx: g.value(e_dx).clone(),
            z: g.value(z).clone(),
            e_dy: g.value(e_dy).clone(),
            max_len: cfg.max_decode_len,
        })
    }

    /// Consume `prev`; return the new state and the semantic scores `S`.
    pub fn advance(&self, state: &DecState, prev: usize) -> Result<(DecState, Vec<f64>)> {
        let mut g = Graph::inference(self.store);
        let layers: Vec<_> = state.layers.iter().map(|t| g.input(t.clone())).collect();
        let c = g.input(state.context.clone());
        let slot = g.input(self.slot.clone());
        let (next, s) = self.net.decode_step(&mut g, &layers, c, slot, prev)?;
        let hs = g.input(self.enc_states.clone());
        let keys = g.input(self.keys.clone());
        let top = *next.last().expect("at least one layer");
        let (c_new, _) = self.net.attn.context(&mut g, top, hs, keys)?;
        let st = DecState {
            layers: next.iter().map(|&v| g.value(v).clone()).collect(),
            context: g.value(c_new).clone(),
        };
        Ok((st, g.value(s).data().to_vec()))
    }

    /// Log `P_word` over the vocabulary for scores `s` at fusion factor β.
    pub fn log_probs(&self, s: &[f64], beta: f64) -> Vec<f64> {
        fused_log_probs(s, self.scores.as_ref().map(Tensor::data), beta)
    }

    /// Policy distribution over actions for this context.
    pub fn policy_probs(&self) -> Result<Vec<f64>> {
        let mut g = Graph::inference(self.store);
        let parts = [
            g.input(self.h_x.clone()),
            g.input(self.e_dx.clone()),
            g.input(self.z.clone()),
            g.input(self.e_dy.clone()),
        ];
        let logits = self.net.policy_logits(&mut g, &parts)?;
        Ok(softmax(g.value(logits).data()))
    }

    /// Teacher-forced log-probabilities of `target` plus EOS under β.
    pub fn score(&self, target: &[usize], beta: f64) -> Result<Vec<f64>> {
        let mut state = self.init.clone();
        let mut prev = BOS;
        let mut out = Vec::with_capacity(target.len() + 1);
        for &y in target.iter().chain(std::iter::once(&EOS)) {
            let (next, s) = self.advance(&state, prev)?;
            out.push(self.log_probs(&s, beta)[y]);
            state = next;
            prev = y;
        }
        Ok(out)
    }
}

/// `log softmax(S + β D)`; at β = 0 (or without `D`) exactly `log softmax(S)`.
pub fn fused_log_probs(s: &[f64], d: Option<&[f64]>, beta: f64) -> Vec<f64> {
    match d {
        Some(d) if beta != 0.0 => {
            let fused: Vec<f64> = s.iter().zip(d).map(|(a, b)| a + beta * b).collect();
            log_softmax(&fused)
        }
        _ => log_softmax(s),
    }
}

/// Best allowed token; at the length cap only EOS is allowed.
fn pick_token(lp: &[f64], at_cap: bool) -> usize {
    if at_cap {
        return EOS;
    }
    let mut best = usize::MAX;
    for (i, &v) in lp.iter().enumerate() {
        if MASKED.contains(&i) {
            continue;
        }
        if best == usize::MAX || v > lp[best] {
            best = i;
        }
    }
    best
}

struct Group {
    tokens: Vec<usize>,
    state: DecState,
    prev: usize,
    members: Vec<(usize, Vec<f64>)>,
}

/// Greedy decoding for several β at once.
///
/// The decoder state depends only on the emitted prefix, so βs that agree
/// on a prefix share its steps; the result equals running [`greedy_decode`]
/// once per β.
pub fn greedy_multi_beta(ctx: &DecodeContext<'_>, betas: &[f64]) -> Result<Vec<GenerationResult>> {
    let mut done: Vec<Option<GenerationResult>> = vec![None; betas.len()];
    let mut groups = vec![Group {
        tokens: Vec::new(),
        state: ctx.init.clone(),
        prev: BOS,
        members: (0..betas.len()).map(|i| (i, Vec::new())).collect(),
    }];
    while let Some(group) = groups.pop() {
        let (state, s) = ctx.advance(&group.state, group.prev)?;
        let at_cap = group.tokens.len() >= ctx.max_len;
        let mut children: Vec<Group> = Vec::new();
        for (bi, mut lps) in group.members {
            let lp = ctx.log_probs(&s, betas[bi]);
            let t = pick_token(&lp, at_cap);
            if t == EOS {
                let total = lps.iter().sum::<f64>() + lp[EOS];
                done[bi] = Some(GenerationResult {
                    tokens: group.tokens.clone(),
                    domain: ctx.domain,
                    beta: betas[bi],
                    token_logprobs: lps,
                    eos_logprob: lp[EOS],
                    total_logprob: total,
                    kind: DecodeKind::Greedy,
                });
                continue;
            }
            lps.push(lp[t]);
            match children.iter_mut().find(|c| c.prev == t) {
                Some(c) => c.members.push((bi, lps)),
                None => {
                    let mut tokens = group.tokens.clone();
                    tokens.push(t);
                    children.push(Group {
                        tokens,
                        state: state.clone(),
                        prev: t,
                        members: vec![(bi, lps)],
                    });
                }
            }
        }
        groups.extend(children);
    }
    Ok(done.into_iter().map(|r| r.expect("every beta finishes")).collect())
}

pub fn greedy_decode(ctx: &DecodeContext<'_>, beta: f64) -> Result<GenerationResult> {
    Ok(greedy_multi_beta(ctx, &[beta])?.remove(0))
}

/// A left-to-right model that beam search can drive.
pub trait StepDecoder {
    type State: Clone;
    fn initial(&self) -> Self::State;
    /// Consume `prev`; return the new state and next-token log-probabilities.
    fn step(&self, state: &Self::State, prev: usize) -> Result<(Self::State, Vec<f64>)>;
    fn max_len(&self) -> usize;
}

/// A context paired with a fusion factor.
pub struct Fused<'a, 'm> {
    pub ctx: &'a DecodeContext<'m>,
    pub beta: f64,
}

impl StepDecoder for Fused<'_, '_> {
    type State = DecState;

    fn initial(&self) -> DecState {
        self.ctx.init.clone()
    }

    fn step(&self, state: &DecState, prev: usize) -> Result<(DecState, Vec<f64>)> {
        let (st, s) = self.ctx.advance(state, prev)?;
        Ok((st, self.ctx.log_probs(&s, self.beta)))
    }

    fn max_len(&self) -> usize {
        self.ctx.max_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub token_logprobs: Vec<f64>,
    pub eos_logprob: f64,
    pub total_logprob: f64,
}

impl Hypothesis {
    /// Length-normalised score, EOS counted as a position.
    pub fn score(&self) -> f64 {
        self.total_logprob / (self.tokens.len() + 1) as f64
    }
}

/// Beam search over equal-length hypotheses ranked by cumulative
/// log-probability; finished hypotheses are ranked by [`Hypothesis::score`].
pub fn beam_search<D: StepDecoder>(dec: &D, width: usize) -> Result<Vec<Hypothesis>> {
    if width == 0 {
        return Err(Error::Invalid("beam width must be at least 1".into()));
    }
    struct Live<S> {
        tokens: Vec<usize>,
        lps: Vec<f64>,
        cum: f64,
        state: S,
        prev: usize,
    }
    let mut live = vec![Live {
        tokens: Vec::new(),
        lps: Vec::new(),
        cum: 0.0,
        state: dec.initial(),
        prev: BOS,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() && finished.len() < width {
        let mut stepped = Vec::with_capacity(live.len());
        let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let (st, lp) = dec.step(&h.state, h.prev)?;
            if h.tokens.len() >= dec.max_len() {
                cands.push((h.cum + lp[EOS], hi, EOS, lp[EOS]));
            } else {
                for (t, &l) in lp.iter().enumerate() {
                    if !MASKED.contains(&t) && l.is_finite() {
                        cands.push((h.cum + l, hi, t, l));
                    }
                }
            }
            stepped.push(st);
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(width);
        let mut next = Vec::with_capacity(cands.len());
        for (cum, hi, t, l) in cands {
            let h = &live[hi];
            if t == EOS {
                finished.push(Hypothesis {
                    tokens: h.tokens.clone(),
                    token_logprobs: h.lps.clone(),
                    eos_logprob: l,
                    total_logprob: cum,
                });
            } else {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                let mut lps = h.lps.clone();
                lps.push(l);
                next.push(Live {
                    tokens,
                    lps,
                    cum,
                    state: stepped[hi].clone(),
                    prev: t,
                });
            }
        }
        live = next;
    }
    // stable: equal scores keep finishing order
    finished.sort_by(|a, b| b.score().total_cmp(&a.score()));
    finished.truncate(width);
    Ok(finished)
}

/// Settings shared by all generation calls.
#[derive(Debug, Clone, Copy)]
pub struct GenOptions<'a> {
    pub count: usize,
    pub beam_width: usize,
    pub fixed_beta: f64,
    /// Action values the policy indexes into.
    pub betas: &'a [f64],
    pub seed: u64,
}

/// Standard-normal noise for latent draw `sample` of source `source_index`.
pub fn eval_noise(seed: u64, source_index: usize, sample: usize, z_dim: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = stream2(seed, Stream::EvalNoise, source_index as u64, sample as u64);
    (0..z_dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `count` results for one source in the given mode.
pub fn generate(
    model: &Model,
    source: &[usize],
    source_domain: usize,
    source_index: usize,
    mode: Mode,
    beta: BetaSource,
    opts: &GenOptions<'_>,
) -> Result<Vec<GenerationResult>> {
    if model.variant() != mode.variant() {
        return Err(Error::Invalid(format!(
            "mode {} needs a {} checkpoint, got {}",
            mode.as_str(),
            mode.variant().as_str(),
            model.variant().as_str()
        )));
    }
    match mode {
        Mode::Seq2Seq => {
            let ctx = DecodeContext::new(model, source, source_domain, LatentChoice::PriorMean)?;
            let hyps = beam_search(&Fused { ctx: &ctx, beta: 0.0 }, opts.beam_width.max(opts.count))?;
            Ok(hyps
                .into_iter()
                .take(opts.count)
                .map(|h| GenerationResult {
                    tokens: h.tokens,
                    domain: ctx.domain,
                    beta: 0.0,
                    token_logprobs: h.token_logprobs,
                    eos_logprob: h.eos_logprob,
                    total_logprob: h.total_logprob,
                    kind: DecodeKind::Beam,
                })
                .collect())
        }
        Mode::Dckg | Mode::Cvae => (0..opts.count)
            .map(|i| {
                let eps = eval_noise(opts.seed, source_index, i, model.net.z_dim());
                let ctx = DecodeContext::new(model, source, source_domain, LatentChoice::Noise(&eps))?;
                let b = resolve_beta(&ctx, mode, beta, opts)?;
                let mut r = greedy_decode(&ctx, b)?;
                r.kind = DecodeKind::SampledZ;
                Ok(r)
            })
            .collect(),
    }
}

/// The β a latent-mode decode uses.
pub fn resolve_beta(ctx: &DecodeContext<'_>, mode: Mode, beta: BetaSource, opts: &GenOptions<'_>) -> Result<f64> {
    match (mode, beta) {
        (_, BetaSource::Fixed(b)) => Ok(b),
        (Mode::Cvae, BetaSource::Policy) => Ok(opts.fixed_beta),
        (_, BetaSource::Policy) => {
            let pi = ctx.policy_probs()?;
            opts.betas
                .get(argmax(&pi))
                .copied()
                .ok_or_else(|| Error::Invalid("policy action outside the beta space".into()))
        }
    }
}
