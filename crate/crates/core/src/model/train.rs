//! Supervised training with batch-level free bits.
//!
//! Each example of a minibatch gets its own tape. Tapes are built and
//! differentiated in parallel and their gradients summed in batch order, so
//! a run is bit-reproducible whatever the thread count.

use rand::seq::SliceRandom;

use super::{ExampleNoise, Model, Variant};
use crate::config::TrainConfig;
use crate::corpus::KeywordPair;
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, ParamStore};
use crate::optim::{clip_global_norm, Adam};
use crate::par::{par_map, par_map_owned};
use crate::rng::{stream, stream2, Stream};

/// Batch means of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLoss {
    /// Mean KL before flooring.
    pub kl: f64,
    /// `max(δ, kl)`; zero for the seq2seq variant, which has no KL term.
    pub kl_floored: f64,
    pub domain: f64,
    pub nll: f64,
    pub total: f64,
    /// Decoded positions, EOS included.
    pub tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub tau: f64,
    pub loss: BatchLoss,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidLog {
    pub step: usize,
    pub loss: BatchLoss,
}

#[derive(Debug, Clone, Copy)]
pub enum TrainEvent<'a> {
    Step(&'a StepLog),
    Valid(&'a ValidLog),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub valid: Vec<ValidLog>,
    pub best_step: usize,
    pub best_valid: f64,
    pub final_tau: f64,
}

impl TrainReport {
    pub fn initial_valid(&self) -> f64 {
        self.valid.first().map_or(f64::NAN, |v| v.loss.total)
    }
}

fn combine(kls: &[f64], domains: &[f64], nlls: &[f64], tokens: usize, delta: f64, latent: bool) -> BatchLoss {
    let b = domains.len().max(1) as f64;
    let kl = kls.iter().sum::<f64>() / b;
    let kl_floored = if latent { kl.max(delta) } else { 0.0 };
    let domain = domains.iter().sum::<f64>() / b;
    let nll = nlls.iter().sum::<f64>() / b;
    BatchLoss {
        kl,
        kl_floored,
        domain,
        nll,
        total: kl_floored + domain + nll,
        tokens,
    }
}

fn check_finite(loss: &BatchLoss, step: usize) -> Result<()> {
    if loss.total.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite(format!(
        "loss diverged at step {step}: kl {} domain {} nll {}",
        loss.kl, loss.domain, loss.nll
    )))
}

/// Loss and summed gradient of one minibatch.
///
/// The KL term enters as `max(δ, mean KL)`, so it receives gradient only
/// when the batch mean is above the floor.
pub fn batch_gradients(
    model: &Model,
    batch: &[&KeywordPair],
    noises: &[ExampleNoise],
    tau: f64,
    beta: f64,
    delta: f64,
) -> Result<(BatchLoss, Gradients)> {
    let store: &ParamStore = &model.store;
    let tapes = par_map(&(0..batch.len()).collect::<Vec<_>>(), |&i| -> Result<_> {
        let mut g = Graph::new(store);
        let t = model
            .net
            .loss_terms(&mut g, &model.cfg, batch[i], Some(&noises[i]), tau, beta)?;
        Ok((g, t))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let latent = model.variant() == Variant::Latent;
    let kls: Vec<f64> = tapes.iter().map(|(g, t)| t.kl.map_or(0.0, |v| g.scalar(v))).collect();
    let domains: Vec<f64> = tapes.iter().map(|(g, t)| g.scalar(t.domain)).collect();
    let nlls: Vec<f64> = tapes.iter().map(|(g, t)| g.scalar(t.nll)).collect();
    let tokens = tapes.iter().map(|(_, t)| t.tokens).sum();
    let loss = combine(&kls, &domains, &nlls, tokens, delta, latent);

    let w = 1.0 / batch.len() as f64;
    let w_kl = if latent && loss.kl > delta { w } else { 0.0 };
    let grads = par_map_owned(tapes, |(g, t)| {
        let mut seeds = vec![(t.domain, w), (t.nll, w)];
        if let Some(kl) = t.kl {
            seeds.push((kl, w_kl));
        }
        g.backward_seeded(&seeds)
    });
    let mut total = Gradients::empty(store.len());
    for g in grads {
        total.accumulate(&g?);
    }
    Ok((loss, total))
}

/// Deterministic validation loss: posterior mean for `z` and the soft
/// `P_real` mixture for the domain embedding.
pub fn validation_loss(model: &Model, pairs: &[KeywordPair], delta: f64, beta: f64) -> Result<BatchLoss> {
    if pairs.is_empty() {
        return Err(Error::Invalid("empty validation set".into()));
    }
    let store: &ParamStore = &model.store;
    let terms = par_map(pairs, |p| -> Result<(f64, f64, f64, usize)> {
        let mut g = Graph::inference(store);
        let t = model.net.loss_terms(&mut g, &model.cfg, p, None, 1.0, beta)?;
        Ok((
            t.kl.map_or(0.0, |v| g.scalar(v)),
            g.scalar(t.domain),
            g.scalar(t.nll),
            t.tokens,
        ))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let kls: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let domains: Vec<f64> = terms.iter().map(|t| t.1).collect();
    let nlls: Vec<f64> = terms.iter().map(|t| t.2).collect();
    let tokens = terms.iter().map(|t| t.3).sum();
    Ok(combine(
        &kls,
        &domains,
        &nlls,
        tokens,
        delta,
        model.variant() == Variant::Latent,
    ))
}

/// Number of optimiser steps a run will take.
pub fn planned_steps(cfg: &TrainConfig, train_len: usize) -> usize {
    let per_epoch = train_len.div_ceil(cfg.batch_size.max(1));
    let total = per_epoch * cfg.epochs;
    if cfg.max_steps > 0 {
        total.min(cfg.max_steps)
    } else {
        total
    }
}

fn validate(
    model: &Model,
    valid: &[KeywordPair],
    cfg: &TrainConfig,
    step: usize,
    report: &mut TrainReport,
    best: &mut Option<ParamStore>,
    on_event: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<()> {
    if valid.is_empty() {
        return Ok(());
    }
    let loss = validation_loss(model, valid, cfg.free_bits, cfg.beta)?;
    check_finite(&loss, step)?;
    let log = ValidLog { step, loss };
    on_event(TrainEvent::Valid(&log));
    report.valid.push(log);
    if loss.total < report.best_valid {
        report.best_valid = loss.total;
        report.best_step = step;
        *best = Some(model.store.clone());
    }
    Ok(())
}

/// Train in place; the parameters with the best validation loss are kept.
pub fn train_supervised(
    model: &mut Model,
    train: &[KeywordPair],
    valid: &[KeywordPair],
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config {
            key: "train.batch_size".into(),
            msg: "must be positive".into(),
        });
    }
    let total_steps = planned_steps(cfg, train.len());
    let schedule = super::TauSchedule::new(cfg.tau_start, cfg.tau_end, cfg.tau_anneal_frac, total_steps);
    let mut opt = Adam::new(cfg.lr);
    let (z_dim, k) = (model.net.z_dim(), model.net.domains());

    let mut report = TrainReport {
        steps: Vec::with_capacity(total_steps),
        valid: Vec::new(),
        best_step: 0,
        best_valid: f64::INFINITY,
        final_tau: schedule.at(0),
    };
    let mut best: Option<ParamStore> = None;
    validate(model, valid, cfg, 0, &mut report, &mut best, on_event)?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if step >= total_steps {
            break;
        }
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, Stream::Shuffle, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break;
            }
            let tau = schedule.at(step);
            let batch: Vec<&KeywordPair> = chunk.iter().map(|&i| &train[i]).collect();
            let noises: Vec<ExampleNoise> = (0..batch.len())
                .map(|j| {
                    ExampleNoise::draw(
                        &mut stream2(cfg.seed, Stream::TrainNoise, step as u64, j as u64),
                        z_dim,
                        k,
                    )
                })
                .collect();
            let (loss, mut grads) = batch_gradients(model, &batch, &noises, tau, cfg.beta, cfg.free_bits)?;
            check_finite(&loss, step)?;
            let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !grad_norm.is_finite() {
                return Err(Error::NonFinite(format!("gradient diverged at step {step}")));
            }
            opt.step(&mut model.store, &grads);
            step += 1;
            report.final_tau = tau;
            let log = StepLog {
                step,
                epoch,
                tau,
                loss,
                grad_norm,
            };
            on_event(TrainEvent::Step(&log));
            report.steps.push(log);
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < total_steps {
                validate(model, valid, cfg, step, &mut report, &mut best, on_event)?;
            }
        }
        if cfg.eval_every == 0 || step >= total_steps {
            validate(model, valid, cfg, step, &mut report, &mut best, on_event)?;
        }
    }
    if let Some(best) = best {
        model.store.load_values(&best)?;
    }
    Ok(report)
}
