//! Policy over the fusion factor β, trained with REINFORCE against a
//! γ-gated reward mixing an external n-gram LM and the model itself.

pub mod lm;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use lm::NGramLM;

use crate::config::RlConfig;
use crate::corpus::{DomainClassifier, KeywordPair};
use crate::error::{Error, Result};
use crate::model::decode::{greedy_multi_beta, DecodeContext, GenerationResult, LatentChoice};
use crate::model::{Model, Variant};
use crate::numerics::tensor::argmax;
use crate::numerics::{Gradients, Graph, Tensor};
use crate::optim::{clip_global_norm, Adam};
use crate::par::{par_map, par_map_owned};
use crate::rng::{stream, stream2, Stream};

/// Ordered, strictly increasing action values.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaSpace {
    values: Vec<f64>,
}

impl BetaSpace {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Invalid("beta space needs at least two values".into()));
        }
        if values.windows(2).any(|w| !(w[0] < w[1])) || values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Invalid(
                "beta values must be non-negative and strictly increasing".into(),
            ));
        }
        Ok(Self { values })
    }

    /// `min, min + step, …, max`.
    pub fn grid(min: f64, max: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(max > min) {
            return Err(Error::Invalid(format!("bad beta grid {min}..{max} step {step}")));
        }
        let n = ((max - min) / step).round() as usize;
        Self::new((0..=n).map(|i| min + i as f64 * step).collect())
    }

    pub fn from_config(cfg: &RlConfig) -> Result<Self> {
        Self::grid(cfg.beta_min, cfg.beta_max, cfg.beta_step)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, action: usize) -> f64 {
        self.values[action]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug)]
pub enum Selection<'r, R: Rng> {
    Sample(&'r mut R),
    Argmax,
}

/// Action index drawn from or maximising `pi`.
pub fn select_action<R: Rng>(pi: &[f64], mode: Selection<'_, R>) -> usize {
    match mode {
        Selection::Argmax => argmax(pi),
        Selection::Sample(rng) => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, &p) in pi.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            pi.len() - 1
        }
    }
}

pub fn select_beta<R: Rng>(space: &BetaSpace, pi: &[f64], mode: Selection<'_, R>) -> f64 {
    space.value(select_action(pi, mode))
}

/// γ: 1 when the predicted and classified domains agree.
pub fn agreement(predicted: usize, classified: usize) -> f64 {
    if predicted == classified {
        1.0
    } else {
        0.0
    }
}

/// Min-max normalisation; an all-equal batch maps to zeros.
pub fn normalize_rewards(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|r| (r - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardEntry {
    pub result: GenerationResult,
    /// Classifier domain of the output; `None` for an empty output.
    pub classified: Option<usize>,
    pub gamma: f64,
    pub p_lm: f64,
    pub p_model: f64,
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardBatch {
    pub entries: Vec<RewardEntry>,
}

impl RewardBatch {
    pub fn raw(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.raw).collect()
    }
}

/// `γ (λ P_LM + (1 − λ) P_model)` for one output, both probabilities taken
/// per token (geometric mean, EOS included). Empty outputs score zero.
pub fn score_result(
    result: &GenerationResult,
    lm: &NGramLM,
    classifier: &dyn DomainClassifier,
    lambda: f64,
) -> (Option<usize>, f64, f64, f64, f64) {
    if result.tokens.is_empty() {
        return (None, 0.0, 0.0, 0.0, 0.0);
    }
    let classified = classifier.classify(&result.tokens);
    let gamma = classified.map_or(0.0, |d| agreement(result.domain, d));
    let p_lm = lm.prob_per_token(&result.tokens);
    // teacher forcing the greedy output revisits the distributions it was
    // decoded from, so its recorded log-probabilities are that score
    let p_model = result.mean_logprob().exp();
    let raw = gamma * (lambda * p_lm + (1.0 - lambda) * p_model);
    (classified, gamma, p_lm, p_model, raw)
}

/// Decode every β of `betas` from one context and score the outputs.
pub fn compute_rewards(
    ctx: &DecodeContext<'_>,
    betas: &[f64],
    lm: &NGramLM,
    classifier: &dyn DomainClassifier,
    lambda: f64,
) -> Result<RewardBatch> {
    if betas.len() < 2 {
        return Err(Error::Invalid("rewards need at least two beta samples".into()));
    }
    let results = greedy_multi_beta(ctx, betas)?;
    let mut entries: Vec<RewardEntry> = results
        .into_iter()
        .map(|result| {
            let (classified, gamma, p_lm, p_model, raw) = score_result(&result, lm, classifier, lambda);
            RewardEntry {
                result,
                classified,
                gamma,
                p_lm,
                p_model,
                raw,
                normalized: 0.0,
            }
        })
        .collect();
    let norm = normalize_rewards(&entries.iter().map(|e| e.raw).collect::<Vec<_>>());
    for (e, n) in entries.iter_mut().zip(norm) {
        e.normalized = n;
    }
    Ok(RewardBatch { entries })
}

/// The policy's input vector `[h_x; e_dx; z; e_dy']` for one context.
#[derive(Debug, Clone)]
pub struct PolicyInput {
    pub parts: [Tensor; 4],
}

impl PolicyInput {
    pub fn from_context(ctx: &DecodeContext<'_>) -> Self {
        Self {
            parts: [ctx.h_x.clone(), ctx.e_dx.clone(), ctx.z.clone(), ctx.e_dy.clone()],
        }
    }
}

pub fn policy_dist(model: &Model, input: &PolicyInput) -> Result<Vec<f64>> {
    let mut g = Graph::inference(&model.store);
    let parts: Vec<_> = input.parts.iter().map(|t| g.input(t.clone())).collect();
    let logits = model.net.policy_logits(&mut g, &parts)?;
    let p = g.softmax(logits)?;
    Ok(g.value(p).data().to_vec())
}

/// Gradient of `-scale · Σ_a R_a log π(a)`.
pub fn policy_gradient(model: &Model, input: &PolicyInput, rewards: &[(usize, f64)], scale: f64) -> Result<Gradients> {
    let mut g = Graph::new(&model.store);
    let parts: Vec<_> = input.parts.iter().map(|t| g.input(t.clone())).collect();
    let logits = model.net.policy_logits(&mut g, &parts)?;
    let logp = g.log_softmax(logits)?;
    let mut seeds = Vec::with_capacity(rewards.len());
    for &(a, r) in rewards {
        if r != 0.0 {
            seeds.push((g.pick(logp, a)?, -scale * r));
        }
    }
    g.backward_seeded(&seeds)
}

/// One ascent step on `R · log π(action)`.
pub fn reinforce_step(
    model: &mut Model,
    opt: &mut Adam,
    input: &PolicyInput,
    action: usize,
    reward: f64,
) -> Result<()> {
    let grads = policy_gradient(model, input, &[(action, reward)], 1.0)?;
    opt.step(&mut model.store, &grads);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlStepLog {
    pub step: usize,
    pub epoch: usize,
    /// Mean over instances of `Σ_a π(a) r_a` before the update.
    pub expected_reward: f64,
    /// Mean raw reward of the policy's argmax action before the update.
    pub argmax_reward: f64,
    pub grad_norm: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlReport {
    pub steps: Vec<RlStepLog>,
    pub skipped: usize,
}

struct Rollout {
    input: PolicyInput,
    batch: RewardBatch,
}

fn rollout(
    model: &Model,
    pair: &KeywordPair,
    eps: &[f64],
    space: &BetaSpace,
    lm: &NGramLM,
    classifier: &dyn DomainClassifier,
    lambda: f64,
) -> Result<Rollout> {
    let ctx = DecodeContext::new(model, &pair.source, pair.source_domain, LatentChoice::Noise(eps))?;
    let batch = compute_rewards(&ctx, space.values(), lm, classifier, lambda)?;
    Ok(Rollout {
        input: PolicyInput::from_context(&ctx),
        batch,
    })
}

/// REINFORCE over the β space with every other parameter frozen.
///
/// Each instance shares one prior draw of `z` across all actions; every
/// action is decoded and scored, and the per-instance gradients of a
/// minibatch are averaged into one optimiser step.
pub fn train_rl(
    model: &mut Model,
    pairs: &[KeywordPair],
    lm: &NGramLM,
    classifier: &dyn DomainClassifier,
    cfg: &RlConfig,
    on_step: &mut dyn FnMut(&RlStepLog),
) -> Result<RlReport> {
    if model.variant() != Variant::Latent {
        return Err(Error::Invalid("policy training needs the latent variant".into()));
    }
    if pairs.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Invalid(
            "policy training needs instances and a positive batch size".into(),
        ));
    }
    let space = BetaSpace::from_config(cfg)?;
    if space.len() != model.dims.actions {
        return Err(Error::Invalid(format!(
            "beta space has {} values, policy has {} actions",
            space.len(),
            model.dims.actions
        )));
    }
    model.store.freeze_except(|name| name.starts_with("policy."));
    let result = run_rl(model, pairs, lm, classifier, cfg, &space, on_step);
    model.store.unfreeze_all();
    result
}

fn run_rl(
    model: &mut Model,
    pairs: &[KeywordPair],
    lm: &NGramLM,
    classifier: &dyn DomainClassifier,
    cfg: &RlConfig,
    space: &BetaSpace,
    on_step: &mut dyn FnMut(&RlStepLog),
) -> Result<RlReport> {
    let mut opt = Adam::new(cfg.lr);
    let z_dim = model.net.z_dim();
    let mut report = RlReport {
        steps: Vec::new(),
        skipped: 0,
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut stream(cfg.seed, Stream::Shuffle, epoch as u64));
        if cfg.max_instances > 0 {
            order.truncate(cfg.max_instances);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let frozen: &Model = model;
            let rollouts = par_map(chunk, |&i| {
                let mut rng = stream2(cfg.seed, Stream::RlNoise, epoch as u64, i as u64);
                let eps: Vec<f64> = (0..z_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                rollout(frozen, &pairs[i], &eps, space, lm, classifier, cfg.lambda)
            });
            let mut kept = Vec::with_capacity(rollouts.len());
            let mut skipped = 0;
            for r in rollouts {
                let r = r?;
                if r.batch.entries.iter().all(|e| e.raw.is_finite()) {
                    kept.push(r);
                } else {
                    skipped += 1;
                }
            }
            if skipped > 0 {
                eprintln!("rl step {step}: skipped {skipped} instance(s) with non-finite reward");
            }
            report.skipped += skipped;
            if kept.is_empty() {
                continue;
            }
            let stats = par_map(&kept, |r| -> Result<(f64, f64)> {
                let pi = policy_dist(frozen, &r.input)?;
                let raw = r.batch.raw();
                let expected = pi.iter().zip(&raw).map(|(p, r)| p * r).sum::<f64>();
                Ok((expected, raw[argmax(&pi)]))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / kept.len() as f64;
            let grads = par_map_owned(kept, |r| {
                let weights: Vec<(usize, f64)> = r
                    .batch
                    .entries
                    .iter()
                    .enumerate()
                    .map(|(a, e)| (a, e.normalized))
                    .collect();
                policy_gradient(frozen, &r.input, &weights, scale)
            });
            let mut total = Gradients::empty(model.store.len());
            for g in grads {
                total.accumulate(&g?);
            }
            let grad_norm = clip_global_norm(&mut total, cfg.clip_norm);
            opt.step(&mut model.store, &total);
            step += 1;
            let n = stats.len() as f64;
            let log = RlStepLog {
                step,
                epoch,
                expected_reward: stats.iter().map(|s| s.0).sum::<f64>() / n,
                argmax_reward: stats.iter().map(|s| s.1).sum::<f64>() / n,
                grad_norm,
                skipped,
            };
            on_step(&log);
            report.steps.push(log);
        }
    }
    Ok(report)
}
