//! Run configuration and its text format.
//!
//! The file is flat `key = value` lines grouped under `[section]` headers;
//! `#` starts a comment. Keys are addressed as `section.key` when given as
//! overrides. Unknown keys are errors. Precedence is
//! overrides > file > defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::{default_transition, CorpusConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Latent-variable model with domain-word fusion (DCKG and the CVAE baseline).
    Latent,
    /// Encoder-attention-decoder without a latent variable; the predicted
    /// domain embedding is a decoder input at every position.
    Seq2Seq,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Latent => "latent",
            Variant::Seq2Seq => "seq2seq",
        }
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "latent" | "dckg" | "cvae" => Ok(Variant::Latent),
            "seq2seq" => Ok(Variant::Seq2Seq),
            other => Err(format!("unknown variant {other:?} (latent | seq2seq)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub emb_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub z_dim: usize,
    /// `log σ²` heads are clamped to `[-c, c]`.
    pub logvar_clamp: f64,
    /// Feed `V_dᵀ P_real` instead of the argmax row at inference.
    pub soft_inference: bool,
    pub max_decode_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Latent,
            emb_dim: 64,
            hidden: 64,
            layers: 2,
            z_dim: 64,
            logvar_clamp: 10.0,
            soft_inference: false,
            max_decode_len: 16,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Free-bits floor δ on the KL term.
    pub free_bits: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Fraction of the supervised steps after which τ reaches `tau_end`.
    pub tau_anneal_frac: f64,
    /// Fusion factor used during supervised training.
    pub beta: f64,
    /// Validate every this many steps; 0 = once per epoch.
    pub eval_every: usize,
    /// Stop after this many steps; 0 = no limit.
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            clip_norm: 5.0,
            free_bits: 5.0,
            tau_start: 3.0,
            tau_end: 0.1,
            tau_anneal_frac: 0.8,
            beta: 1.0,
            eval_every: 0,
            max_steps: 0,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Weight λ of the external LM probability in the reward.
    pub lambda: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta_step: f64,
    pub lm_order: usize,
    pub lm_add_k: f64,
    /// Training instances per epoch; 0 = the whole training split.
    pub max_instances: usize,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 32,
            lr: 2e-4,
            clip_norm: 5.0,
            lambda: 0.9,
            beta_min: 0.0,
            beta_max: 5.0,
            beta_step: 0.25,
            lm_order: 3,
            lm_add_k: 0.1,
            max_instances: 0,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Keywords generated per source.
    pub samples: usize,
    pub beam_width: usize,
    /// Held-out sources used; 0 = all.
    pub max_sources: usize,
    /// β of the CVAE baseline.
    pub fixed_beta: f64,
    pub sweep_betas: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 10,
            beam_width: 10,
            max_sources: 200,
            fixed_beta: 1.0,
            sweep_betas: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            seed: 19,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsConfig {
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| Error::Config {
        key: key.to_string(),
        msg: format!("cannot parse {value:?}: {e}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config {
            key: key.into(),
            msg: format!("expected a boolean, got {value:?}"),
        }),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_matrix(key: &str, value: &str) -> Result<Vec<Vec<f64>>> {
    value.split(';').map(|row| parse_list(key, row)).collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Set `section.key` from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let c = &mut self.corpus;
        let m = &mut self.model;
        let t = &mut self.train;
        let r = &mut self.rl;
        let e = &mut self.eval;
        match key {
            "corpus.num_domains" => {
                c.num_domains = parse(key, v)?;
                c.transition = default_transition(c.num_domains, 0.5);
            }
            "corpus.vocab_size" => c.vocab_size = parse(key, v)?,
            "corpus.markers_per_domain" => c.markers_per_domain = parse(key, v)?,
            "corpus.fillers" => c.fillers = parse(key, v)?,
            "corpus.cluster_size" => c.cluster_size = parse(key, v)?,
            "corpus.train_pairs" => c.train_pairs = parse(key, v)?,
            "corpus.valid_pairs" => c.valid_pairs = parse(key, v)?,
            "corpus.test_pairs" => c.test_pairs = parse(key, v)?,
            "corpus.transition" => c.transition = parse_matrix(key, v)?,
            "corpus.transition_self" => {
                let p: f64 = parse(key, v)?;
                c.transition = default_transition(c.num_domains, p);
            }
            "corpus.mean_source_len" => c.mean_source_len = parse(key, v)?,
            "corpus.mean_target_len" => c.mean_target_len = parse(key, v)?,
            "corpus.home_domain_prob" => c.home_domain_prob = parse(key, v)?,
            "corpus.second_marker_prob" => c.second_marker_prob = parse(key, v)?,
            "corpus.seed" => c.seed = parse(key, v)?,

            "model.variant" => m.variant = v.parse().map_err(|msg| Error::Config { key: key.into(), msg })?,
            "model.emb_dim" => m.emb_dim = parse(key, v)?,
            "model.hidden" => m.hidden = parse(key, v)?,
            "model.layers" => m.layers = parse(key, v)?,
            "model.z_dim" => m.z_dim = parse(key, v)?,
            "model.logvar_clamp" => m.logvar_clamp = parse(key, v)?,
            "model.soft_inference" => m.soft_inference = parse_bool(key, v)?,
            "model.max_decode_len" => m.max_decode_len = parse(key, v)?,
            "model.seed" => m.seed = parse(key, v)?,

            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.free_bits" => t.free_bits = parse(key, v)?,
            "train.tau_start" => t.tau_start = parse(key, v)?,
            "train.tau_end" => t.tau_end = parse(key, v)?,
            "train.tau_anneal_frac" => t.tau_anneal_frac = parse(key, v)?,
            "train.beta" => t.beta = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "train.max_steps" => t.max_steps = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,

            "rl.epochs" => r.epochs = parse(key, v)?,
            "rl.batch_size" => r.batch_size = parse(key, v)?,
            "rl.lr" => r.lr = parse(key, v)?,
            "rl.clip_norm" => r.clip_norm = parse(key, v)?,
            "rl.lambda" => r.lambda = parse(key, v)?,
            "rl.beta_min" => r.beta_min = parse(key, v)?,
            "rl.beta_max" => r.beta_max = parse(key, v)?,
            "rl.beta_step" => r.beta_step = parse(key, v)?,
            "rl.lm_order" => r.lm_order = parse(key, v)?,
            "rl.lm_add_k" => r.lm_add_k = parse(key, v)?,
            "rl.max_instances" => r.max_instances = parse(key, v)?,
            "rl.seed" => r.seed = parse(key, v)?,

            "eval.samples" => e.samples = parse(key, v)?,
            "eval.beam_width" => e.beam_width = parse(key, v)?,
            "eval.max_sources" => e.max_sources = parse(key, v)?,
            "eval.fixed_beta" => e.fixed_beta = parse(key, v)?,
            "eval.sweep_betas" => e.sweep_betas = parse_list(key, v)?,
            "eval.seed" => e.seed = parse(key, v)?,

            "paths.data_dir" => self.paths.data_dir = v.to_string(),
            "paths.out_dir" => self.paths.out_dir = v.to_string(),
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Apply `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
                key: o.to_string(),
                msg: "override must look like section.key=value".into(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply every `key = value` of a config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", i + 1),
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            self.set(&key, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_text(&self) -> String {
        let c = &self.corpus;
        let m = &self.model;
        let t = &self.train;
        let r = &self.rl;
        let e = &self.eval;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("[corpus]\nnum_domains", c.num_domains.to_string());
        kv("vocab_size", c.vocab_size.to_string());
        kv("markers_per_domain", c.markers_per_domain.to_string());
        kv("fillers", c.fillers.to_string());
        kv("cluster_size", c.cluster_size.to_string());
        kv("train_pairs", c.train_pairs.to_string());
        kv("valid_pairs", c.valid_pairs.to_string());
        kv("test_pairs", c.test_pairs.to_string());
        kv(
            "transition",
            c.transition.iter().map(|r| fmt_list(r)).collect::<Vec<_>>().join(";"),
        );
        kv("mean_source_len", c.mean_source_len.to_string());
        kv("mean_target_len", c.mean_target_len.to_string());
        kv("home_domain_prob", c.home_domain_prob.to_string());
        kv("second_marker_prob", c.second_marker_prob.to_string());
        kv("seed", c.seed.to_string());

        kv("\n[model]\nvariant", m.variant.as_str().to_string());
        kv("emb_dim", m.emb_dim.to_string());
        kv("hidden", m.hidden.to_string());
        kv("layers", m.layers.to_string());
        kv("z_dim", m.z_dim.to_string());
        kv("logvar_clamp", m.logvar_clamp.to_string());
        kv("soft_inference", m.soft_inference.to_string());
        kv("max_decode_len", m.max_decode_len.to_string());
        kv("seed", m.seed.to_string());

        kv("\n[train]\nepochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("free_bits", t.free_bits.to_string());
        kv("tau_start", t.tau_start.to_string());
        kv("tau_end", t.tau_end.to_string());
        kv("tau_anneal_frac", t.tau_anneal_frac.to_string());
        kv("beta", t.beta.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("max_steps", t.max_steps.to_string());
        kv("seed", t.seed.to_string());

        kv("\n[rl]\nepochs", r.epochs.to_string());
        kv("batch_size", r.batch_size.to_string());
        kv("lr", r.lr.to_string());
        kv("clip_norm", r.clip_norm.to_string());
        kv("lambda", r.lambda.to_string());
        kv("beta_min", r.beta_min.to_string());
        kv("beta_max", r.beta_max.to_string());
        kv("beta_step", r.beta_step.to_string());
        kv("lm_order", r.lm_order.to_string());
        kv("lm_add_k", r.lm_add_k.to_string());
        kv("max_instances", r.max_instances.to_string());
        kv("seed", r.seed.to_string());

        kv("\n[eval]\nsamples", e.samples.to_string());
        kv("beam_width", e.beam_width.to_string());
        kv("max_sources", e.max_sources.to_string());
        kv("fixed_beta", e.fixed_beta.to_string());
        kv("sweep_betas", fmt_list(&e.sweep_betas));
        kv("seed", e.seed.to_string());

        kv("\n[paths]\ndata_dir", self.paths.data_dir.clone());
        kv("out_dir", self.paths.out_dir.clone());
        s
    }

    /// Parameter summary as a shell-friendly build tag for provenance.
    pub fn build_tag() -> String {
        let version = env!("CARGO_PKG_VERSION");
        match option_env!("DCKG_BUILD_TAG") {
            Some(tag) => format!("dckg-{version}-{tag}"),
            None => format!("dckg-{version}"),
        }
    }
}
