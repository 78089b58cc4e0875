//! The keyword generator: encoder, latent network, domain network,
//! fusion decoder and policy head, plus the supervised losses.
//!
//! Parameter names are prefixed by sub-network (`enc.`, `dec.`, `latent.`,
//! `domain.`, `policy.`) so a training stage can freeze by prefix.

pub mod check;
pub mod checkpoint;
pub mod decode;
pub mod train;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use crate::config::{ModelConfig, Variant};
use crate::corpus::KeywordPair;
use crate::error::{Error, Result};
use crate::layers::{cross_entropy, Attention, Embedding, GruStack, Linear, Mlp};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::rng::{stream, Stream};

pub use decode::{
    beam_search, generate, greedy_decode, greedy_multi_beta, BetaSource, DecodeContext, DecodeKind, GenOptions,
    GenerationResult, LatentChoice, Mode, StepDecoder,
};

/// Clamp applied to uniform noise before the Gumbel transform.
pub const GUMBEL_EPS: f64 = 1e-12;

/// Sizes that come from the data rather than the model config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub vocab: usize,
    pub domains: usize,
    /// Size of the β action space.
    pub actions: usize,
}

#[derive(Debug, Clone)]
pub struct LatentNet {
    pub recog: Mlp,
    pub recog_mu: Linear,
    pub recog_logvar: Linear,
    pub prior: Mlp,
    pub prior_mu: Linear,
    pub prior_logvar: Linear,
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub mlp: Mlp,
    /// `W_b: [actions, n]`, no bias.
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub enc_emb: Embedding,
    pub enc: GruStack,
    pub dec_emb: Embedding,
    pub dec: GruStack,
    pub dec_init: Linear,
    pub attn: Attention,
    /// `W_s`, with bias.
    pub w_s: Linear,
    /// `V_d: [k, n]`.
    pub domain_emb: Embedding,
    pub domain_mlp: Mlp,
    /// `U_d: [k, n]`, no bias.
    pub domain_out: Linear,
    pub latent: Option<LatentNet>,
    pub word_mlp: Option<Mlp>,
    /// `W_d: [|V|, n]`, no bias.
    pub w_d: Option<Linear>,
    pub policy: Option<PolicyNet>,
}

/// Gaussian parameters produced by the recognition or prior network.
#[derive(Debug, Clone, Copy)]
pub struct Gaussian {
    pub mu: Var,
    pub logvar: Var,
}

/// Encoder output.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Top-layer states stacked as `[T, n]`.
    pub states: Var,
    pub last: Var,
}

/// Per-example supervised loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    /// KL term; `None` for the seq2seq variant.
    pub kl: Option<Var>,
    pub domain: Var,
    pub nll: Var,
    /// Decoded positions, EOS included.
    pub tokens: usize,
}

/// Noise for one training example.
#[derive(Debug, Clone)]
pub struct ExampleNoise {
    pub latent: Vec<f64>,
    pub gumbel: Vec<f64>,
}

impl ExampleNoise {
    pub fn draw<R: Rng>(rng: &mut R, z_dim: usize, domains: usize) -> Self {
        Self {
            latent: (0..z_dim).map(|_| StandardNormal.sample(rng)).collect(),
            gumbel: (0..domains).map(|_| rng.random::<f64>()).collect(),
        }
    }
}

/// How the domain embedding fed to fusion is formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainInput<'a> {
    /// Gumbel-softmax relaxation with uniform noise and temperature τ.
    Gumbel { noise: &'a [f64], tau: f64 },
    /// The soft `P_real`.
    Soft,
    /// One-hot at `argmax P_real`.
    Hard,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub dims: Dims,
    pub store: ParamStore,
    pub net: Network,
}

impl Model {
    pub fn new(cfg: &ModelConfig, dims: Dims) -> Result<Self> {
        if cfg.hidden == 0 || cfg.emb_dim == 0 || cfg.layers == 0 || cfg.z_dim == 0 {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        if dims.vocab < 5 || dims.domains < 2 || dims.actions < 2 {
            return Err(Error::Invalid(format!("unusable model dims {dims:?}")));
        }
        let mut rng = stream(cfg.seed, Stream::Init, 0);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (n, e, zd, v, k) = (cfg.hidden, cfg.emb_dim, cfg.z_dim, dims.vocab, dims.domains);

        let enc_emb = Embedding::new(s, "enc.emb", v, e, rng);
        let enc = GruStack::new(s, "enc.gru", e, n, cfg.layers, rng);
        let domain_emb = Embedding::new(s, "domain.emb", k, n, rng);
        let latent = (cfg.variant == Variant::Latent).then(|| LatentNet {
            recog: Mlp::new(s, "latent.recog", 4 * n, n, rng),
            recog_mu: Linear::new(s, "latent.recog_mu", n, zd, true, rng),
            recog_logvar: Linear::new(s, "latent.recog_logvar", n, zd, true, rng),
            prior: Mlp::new(s, "latent.prior", 2 * n, n, rng),
            prior_mu: Linear::new(s, "latent.prior_mu", n, zd, true, rng),
            prior_logvar: Linear::new(s, "latent.prior_logvar", n, zd, true, rng),
        });
        let domain_mlp = Mlp::new(s, "domain.mlp", 2 * n + zd, n, rng);
        let domain_out = Linear::new(s, "domain.out", n, k, false, rng);
        let (word_mlp, w_d) = if cfg.variant == Variant::Latent {
            (
                Some(Mlp::new(s, "domain.word_mlp", n, n, rng)),
                Some(Linear::new(s, "domain.w_d", n, v, false, rng)),
            )
        } else {
            (None, None)
        };
        // seq2seq feeds the domain embedding through the z slot
        let slot = match cfg.variant {
            Variant::Latent => zd,
            Variant::Seq2Seq => n,
        };
        let dec_emb = Embedding::new(s, "dec.emb", v, e, rng);
        let dec = GruStack::new(s, "dec.gru", n + slot + e, n, cfg.layers, rng);
        let dec_init = Linear::new(s, "dec.init", n, n, true, rng);
        let attn = Attention::new(s, "dec.attn", n, rng);
        let w_s = Linear::new(s, "dec.w_s", n, v, true, rng);
        let policy = (cfg.variant == Variant::Latent).then(|| PolicyNet {
            mlp: Mlp::new(s, "policy.mlp", 3 * n + zd, n, rng),
            out: Linear::new(s, "policy.out", n, dims.actions, false, rng),
        });
        let net = Network {
            enc_emb,
            enc,
            dec_emb,
            dec,
            dec_init,
            attn,
            w_s,
            domain_emb,
            domain_mlp,
            domain_out,
            latent,
            word_mlp,
            w_d,
            policy,
        };
        Ok(Self {
            cfg: cfg.clone(),
            dims,
            store,
            net,
        })
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    /// Zero a parameter by name; used by tests that need degenerate networks.
    pub fn zero_param(&mut self, name: &str) -> Result<()> {
        let id = self
            .store
            .find(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))?;
        self.store.value_mut(id).data_mut().fill(0.0);
        Ok(())
    }
}

fn check_token(vocab: usize, id: usize) -> Result<()> {
    if id >= vocab {
        return Err(Error::OutOfRange {
            what: "token",
            index: id,
            size: vocab,
        });
    }
    Ok(())
}

impl Network {
    pub fn hidden(&self) -> usize {
        self.enc.hidden()
    }

    pub fn vocab(&self) -> usize {
        self.enc_emb.rows
    }

    pub fn domains(&self) -> usize {
        self.domain_emb.rows
    }

    pub fn z_dim(&self) -> usize {
        self.domain_mlp.linear.input - 2 * self.hidden()
    }

    /// Run the encoder over `tokens` from a zero state.
    pub fn encode(&self, g: &mut Graph<'_>, tokens: &[usize]) -> Result<Encoded> {
        if tokens.is_empty() {
            return Err(Error::domain("encode", "empty input"));
        }
        let n = self.hidden();
        let zero = g.input(Tensor::zeros(&[n]));
        let mut states = vec![zero; self.enc.layers.len()];
        let mut tops = Vec::with_capacity(tokens.len());
        for &t in tokens {
            check_token(self.vocab(), t)?;
            let x = self.enc_emb.lookup(g, t)?;
            states = self.enc.step(g, &states, x)?;
            tops.push(*states.last().expect("at least one layer"));
        }
        let last = *tops.last().expect("non-empty");
        let states = g.stack(&tops)?;
        Ok(Encoded { states, last })
    }

    pub fn embed_domain(&self, g: &mut Graph<'_>, d: usize) -> Result<Var> {
        if d >= self.domains() {
            return Err(Error::OutOfRange {
                what: "domain",
                index: d,
                size: self.domains(),
            });
        }
        self.domain_emb.lookup(g, d)
    }

    fn gaussian(
        g: &mut Graph<'_>,
        mlp: &Mlp,
        mu: &Linear,
        logvar: &Linear,
        parts: &[Var],
        clamp: f64,
    ) -> Result<Gaussian> {
        let h = mlp.forward_concat(g, parts)?;
        let m = mu.forward(g, h)?;
        let lv = logvar.forward(g, h)?;
        let lv = g.clamp(lv, -clamp, clamp);
        Ok(Gaussian { mu: m, logvar: lv })
    }

    fn latent(&self) -> Result<&LatentNet> {
        self.latent
            .as_ref()
            .ok_or_else(|| Error::Invalid("the seq2seq variant has no latent network".into()))
    }

    /// Posterior `q(z | X, d_x, Y, d_y)`.
    pub fn recognition(
        &self,
        g: &mut Graph<'_>,
        h_x: Var,
        e_dx: Var,
        h_y: Var,
        e_dy: Var,
        clamp: f64,
    ) -> Result<Gaussian> {
        let l = self.latent()?;
        Self::gaussian(
            g,
            &l.recog,
            &l.recog_mu,
            &l.recog_logvar,
            &[h_x, e_dx, h_y, e_dy],
            clamp,
        )
    }

    /// Prior `p(z | X, d_x)`.
    pub fn prior(&self, g: &mut Graph<'_>, h_x: Var, e_dx: Var, clamp: f64) -> Result<Gaussian> {
        let l = self.latent()?;
        Self::gaussian(g, &l.prior, &l.prior_mu, &l.prior_logvar, &[h_x, e_dx], clamp)
    }

    /// Domain logits `o_d = U_d · MLP([h_x; e_dx; z])`.
    pub fn domain_logits(&self, g: &mut Graph<'_>, h_x: Var, e_dx: Var, z: Var) -> Result<Var> {
        let h = self.domain_mlp.forward_concat(g, &[h_x, e_dx, z])?;
        self.domain_out.forward(g, h)
    }

    /// `V_dᵀ P` for a distribution `P` over domains.
    pub fn domain_embedding_from_dist(&self, g: &mut Graph<'_>, p: Var) -> Result<Var> {
        let k = self.domains();
        if g.shape(p) != [k] {
            return Err(Error::shape("domain_embedding_from_dist", &[k], g.shape(p)));
        }
        let total: f64 = g.value(p).data().iter().sum();
        if (total - 1.0).abs() > 1e-6 || g.value(p).data().iter().any(|&x| x < 0.0) {
            return Err(Error::domain(
                "domain_embedding_from_dist",
                format!("input is not a distribution (sums to {total})"),
            ));
        }
        let table = g.param(self.domain_emb.table);
        g.matmul(p, table)
    }

    /// The domain embedding used downstream of `o_d`, per `input`.
    pub fn domain_input(&self, g: &mut Graph<'_>, o_d: Var, input: DomainInput<'_>) -> Result<Var> {
        match input {
            DomainInput::Gumbel { noise, tau } => {
                let p = gumbel_sample(g, o_d, tau, noise)?;
                self.domain_embedding_from_dist(g, p)
            }
            DomainInput::Soft => {
                let p = g.softmax(o_d)?;
                self.domain_embedding_from_dist(g, p)
            }
            DomainInput::Hard => {
                let d = g.value(o_d).argmax();
                self.embed_domain(g, d)
            }
        }
    }

    /// Domain word scores `D = W_d · MLP(e)`.
    pub fn domain_word_scores(&self, g: &mut Graph<'_>, e: Var) -> Result<Var> {
        let (mlp, w_d) = match (&self.word_mlp, &self.w_d) {
            (Some(m), Some(w)) => (m, w),
            _ => return Err(Error::Invalid("the seq2seq variant has no domain word scores".into())),
        };
        let h = mlp.forward(g, e)?;
        w_d.forward(g, h)
    }

    /// Initial decoder states: `tanh(W h_x + b)` for every layer.
    pub fn decoder_init(&self, g: &mut Graph<'_>, h_x: Var) -> Result<Vec<Var>> {
        let s = self.dec_init.forward(g, h_x)?;
        let s = g.tanh(s);
        Ok(vec![s; self.dec.layers.len()])
    }

    /// One decoder step: consume `y_prev`, return new states and `S = W_s s_t`.
    pub fn decode_step(
        &self,
        g: &mut Graph<'_>,
        states: &[Var],
        c_prev: Var,
        slot: Var,
        y_prev: usize,
    ) -> Result<(Vec<Var>, Var)> {
        check_token(self.vocab(), y_prev)?;
        let e = self.dec_emb.lookup(g, y_prev)?;
        let x = g.concat(&[c_prev, slot, e], 0)?;
        let states = self.dec.step(g, states, x)?;
        let top = *states.last().expect("at least one layer");
        let s = self.w_s.forward(g, top)?;
        Ok((states, s))
    }

    /// Teacher-forced `Σ -log P_word(y_t)` over `target` plus EOS.
    pub fn sequence_nll(
        &self,
        g: &mut Graph<'_>,
        enc: &Encoded,
        slot: Var,
        scores: Option<Var>,
        beta: f64,
        target: &[usize],
    ) -> Result<Var> {
        let keys = self.attn.keys(g, enc.states)?;
        let mut states = self.decoder_init(g, enc.last)?;
        let top = *states.last().expect("at least one layer");
        let (mut c, _) = self.attn.context(g, top, enc.states, keys)?;
        let bias = match scores {
            Some(d) if beta != 0.0 => Some(g.mul_scalar(d, beta)),
            _ => None,
        };
        let mut terms = Vec::with_capacity(target.len() + 1);
        let mut prev = crate::corpus::BOS;
        for (t, &y) in target.iter().chain(std::iter::once(&crate::corpus::EOS)).enumerate() {
            let (next, s) = self.decode_step(g, &states, c, slot, prev)?;
            states = next;
            let logits = match bias {
                Some(b) => g.add(s, b)?,
                None => s,
            };
            terms.push(cross_entropy(g, logits, y)?);
            if t < target.len() {
                let top = *states.last().expect("at least one layer");
                c = self.attn.context(g, top, enc.states, keys)?.0;
            }
            prev = y;
        }
        g.add_all(&terms)
    }

    /// Policy distribution `π = softmax(W_b · MLP([h_x; e_dx; z; e_dy']))`.
    pub fn policy_logits(&self, g: &mut Graph<'_>, parts: &[Var]) -> Result<Var> {
        let p = self
            .policy
            .as_ref()
            .ok_or_else(|| Error::Invalid("the seq2seq variant has no policy".into()))?;
        let h = p.mlp.forward_concat(g, parts)?;
        p.out.forward(g, h)
    }

    /// All supervised loss terms for one pair under fixed noise.
    pub fn loss_terms(
        &self,
        g: &mut Graph<'_>,
        cfg: &ModelConfig,
        pair: &KeywordPair,
        noise: Option<&ExampleNoise>,
        tau: f64,
        beta: f64,
    ) -> Result<LossTerms> {
        let enc = self.encode(g, &pair.source)?;
        let e_dx = self.embed_domain(g, pair.source_domain)?;
        let domain_input = match noise {
            Some(n) => DomainInput::Gumbel { noise: &n.gumbel, tau },
            None => DomainInput::Soft,
        };
        let tokens = pair.target.len() + 1;
        match cfg.variant {
            Variant::Latent => {
                let enc_y = self.encode(g, &pair.target)?;
                let e_dy = self.embed_domain(g, pair.target_domain)?;
                let q = self.recognition(g, enc.last, e_dx, enc_y.last, e_dy, cfg.logvar_clamp)?;
                let p = self.prior(g, enc.last, e_dx, cfg.logvar_clamp)?;
                let kl = kl_term(g, q, p)?;
                let z = match noise {
                    Some(n) => sample_latent(g, q, &n.latent)?,
                    None => q.mu,
                };
                let o_d = self.domain_logits(g, enc.last, e_dx, z)?;
                let domain = cross_entropy(g, o_d, pair.target_domain)?;
                let e = self.domain_input(g, o_d, domain_input)?;
                let d = self.domain_word_scores(g, e)?;
                let nll = self.sequence_nll(g, &enc, z, Some(d), beta, &pair.target)?;
                Ok(LossTerms {
                    kl: Some(kl),
                    domain,
                    nll,
                    tokens,
                })
            }
            Variant::Seq2Seq => {
                let z = g.input(Tensor::zeros(&[self.z_dim()]));
                let o_d = self.domain_logits(g, enc.last, e_dx, z)?;
                let domain = cross_entropy(g, o_d, pair.target_domain)?;
                let e = self.domain_input(g, o_d, domain_input)?;
                let nll = self.sequence_nll(g, &enc, e, None, 0.0, &pair.target)?;
                Ok(LossTerms {
                    kl: None,
                    domain,
                    nll,
                    tokens,
                })
            }
        }
    }
}

/// `z = μ + σ ⊙ ε`.
pub fn sample_latent(g: &mut Graph<'_>, q: Gaussian, eps: &[f64]) -> Result<Var> {
    if g.shape(q.mu) != [eps.len()] {
        return Err(Error::shape("sample_latent", g.shape(q.mu), &[eps.len()]));
    }
    let half = g.mul_scalar(q.logvar, 0.5);
    let sigma = g.exp(half);
    let eps = g.input(Tensor::vector(eps.to_vec()));
    let scaled = g.mul(sigma, eps)?;
    g.add(q.mu, scaled)
}

/// Closed-form `KL(q || p)` between diagonal Gaussians given log-variances.
pub fn kl_term(g: &mut Graph<'_>, q: Gaussian, p: Gaussian) -> Result<Var> {
    // ½ Σ [ lv_p − lv_q + (exp(lv_q) + (μ_q − μ_p)²) / exp(lv_p) − 1 ]
    let dlv = g.sub(p.logvar, q.logvar)?;
    let var_q = g.exp(q.logvar);
    let dm = g.sub(q.mu, p.mu)?;
    let dm2 = g.mul(dm, dm)?;
    let num = g.add(var_q, dm2)?;
    let neg_lv_p = g.neg(p.logvar);
    let inv_var_p = g.exp(neg_lv_p);
    let ratio = g.mul(num, inv_var_p)?;
    let inner = g.add(dlv, ratio)?;
    let inner = g.add_scalar(inner, -1.0);
    let s = g.sum(inner);
    Ok(g.mul_scalar(s, 0.5))
}

/// The same KL on plain values given variances.
pub fn kl_diag(mu_q: &[f64], var_q: &[f64], mu_p: &[f64], var_p: &[f64]) -> Result<f64> {
    let n = mu_q.len();
    if var_q.len() != n || mu_p.len() != n || var_p.len() != n {
        return Err(Error::shape("kl_diag", &[n], &[var_q.len(), mu_p.len(), var_p.len()]));
    }
    let mut kl = 0.0;
    for i in 0..n {
        if var_q[i] <= 0.0 || var_p[i] <= 0.0 {
            return Err(Error::domain("kl_diag", "variances must be positive"));
        }
        let dm = mu_q[i] - mu_p[i];
        kl += 0.5 * (var_p[i] / var_q[i]).ln() + (var_q[i] + dm * dm) / (2.0 * var_p[i]) - 0.5;
    }
    Ok(kl)
}

/// Gumbel transform `-ln(-ln ε)` with ε clamped away from 0 and 1.
pub fn gumbel_noise(uniform: f64) -> f64 {
    let e = uniform.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-e.ln()).ln()
}

/// `P_sample = softmax((o_d + g) / τ)`.
pub fn gumbel_sample(g: &mut Graph<'_>, o_d: Var, tau: f64, uniform: &[f64]) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::domain(
            "gumbel_sample",
            format!("temperature must be positive, got {tau}"),
        ));
    }
    if g.shape(o_d) != [uniform.len()] {
        return Err(Error::shape("gumbel_sample", g.shape(o_d), &[uniform.len()]));
    }
    let noise = g.input(Tensor::vector(uniform.iter().map(|&u| gumbel_noise(u)).collect()));
    let y = g.add(o_d, noise)?;
    let y = g.mul_scalar(y, 1.0 / tau);
    g.softmax(y)
}

/// `-log P_real[d_y]`.
pub fn domain_loss(g: &mut Graph<'_>, p_real: Var, d_y: usize) -> Result<Var> {
    let p = g.pick(p_real, d_y)?;
    let lp = g.log(p)?;
    Ok(g.neg(lp))
}

/// `max(δ, L1) + L2 + L3`.
pub fn total_loss(l1: f64, l2: f64, l3: f64, delta: f64) -> f64 {
    l1.max(delta) + l2 + l3
}

/// Temperature schedule `max(τ_end, τ_start · exp(-r · step))` with `r`
/// chosen so the floor is reached at `anneal_frac` of `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
    pub rate: f64,
}

impl TauSchedule {
    pub fn new(start: f64, end: f64, anneal_frac: f64, total_steps: usize) -> Self {
        let span = (anneal_frac * total_steps as f64).max(1.0);
        let rate = if start > end { (start / end).ln() / span } else { 0.0 };
        Self { start, end, rate }
    }

    pub fn at(&self, step: usize) -> f64 {
        (self.start * (-self.rate * step as f64).exp()).max(self.end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::softmax;

    fn tiny(variant: Variant) -> Model {
        let cfg = ModelConfig {
            variant,
            emb_dim: 6,
            hidden: 5,
            layers: 2,
            z_dim: 4,
            ..ModelConfig::default()
        };
        Model::new(
            &cfg,
            Dims {
                vocab: 12,
                domains: 3,
                actions: 5,
            },
        )
        .unwrap()
    }

    fn pair() -> KeywordPair {
        KeywordPair {
            source: vec![5, 6, 7],
            target: vec![8, 9],
            source_domain: 1,
            target_domain: 2,
        }
    }

    #[test]
    fn parameter_prefixes() {
        let m = tiny(Variant::Latent);
        for (_, p) in m.store.iter() {
            let prefix = p.name.split('.').next().unwrap();
            assert!(
                ["enc", "dec", "latent", "domain", "policy"].contains(&prefix),
                "{}",
                p.name
            );
        }
        let s = tiny(Variant::Seq2Seq);
        assert!(s
            .store
            .iter()
            .all(|(_, p)| !p.name.starts_with("latent") && !p.name.starts_with("policy")));
    }

    #[test]
    fn encode_single_token_and_zero_params() {
        let mut m = tiny(Variant::Latent);
        {
            let mut g = Graph::inference(&m.store);
            let enc = m.net.encode(&mut g, &[5]).unwrap();
            assert_eq!(g.shape(enc.states), &[1, 5]);
            assert_eq!(g.value(enc.states).data(), g.value(enc.last).data());
            assert!(m.net.encode(&mut g, &[]).is_err());
        }
        let names: Vec<String> = m
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("enc.gru"))
            .map(|(_, p)| p.name.clone())
            .collect();
        for n in names {
            m.zero_param(&n).unwrap();
        }
        let mut g = Graph::inference(&m.store);
        let enc = m.net.encode(&mut g, &[5, 6, 7]).unwrap();
        assert!(g.value(enc.last).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encode_prefix_property() {
        let m = tiny(Variant::Latent);
        let mut g = Graph::inference(&m.store);
        let short = m.net.encode(&mut g, &[5, 6]).unwrap();
        let long = m.net.encode(&mut g, &[5, 6, 7]).unwrap();
        let lv = g.value(long.states);
        assert_eq!(lv.row(1), g.value(short.last).data());
    }

    #[test]
    fn embed_domain_rows() {
        let m = tiny(Variant::Latent);
        let mut g = Graph::inference(&m.store);
        let e0 = m.net.embed_domain(&mut g, 0).unwrap();
        let table = m.store.value(m.net.domain_emb.table);
        assert_eq!(g.value(e0).data(), table.row(0));
        let onehot = g.input(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let mixed = m.net.domain_embedding_from_dist(&mut g, onehot).unwrap();
        assert!(g
            .value(mixed)
            .data()
            .iter()
            .zip(table.row(1))
            .all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(m.net.embed_domain(&mut g, 3).is_err());
        let bad = g.input(Tensor::vector(vec![0.5, 0.4, 0.0]));
        assert!(m.net.domain_embedding_from_dist(&mut g, bad).is_err());
    }

    #[test]
    fn uniform_mixture_is_row_mean() {
        let m = tiny(Variant::Latent);
        let mut g = Graph::inference(&m.store);
        let p = g.input(Tensor::vector(vec![1.0 / 3.0; 3]));
        let e = m.net.domain_embedding_from_dist(&mut g, p).unwrap();
        let table = m.store.value(m.net.domain_emb.table);
        for j in 0..5 {
            let mean = (0..3).map(|i| table.row(i)[j]).sum::<f64>() / 3.0;
            assert!((g.value(e).data()[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_heads_give_standard_normal() {
        let mut m = tiny(Variant::Latent);
        for n in [
            "latent.recog_mu.w",
            "latent.recog_mu.b",
            "latent.recog_logvar.w",
            "latent.recog_logvar.b",
        ] {
            m.zero_param(n).unwrap();
        }
        let mut g = Graph::inference(&m.store);
        let enc = m.net.encode(&mut g, &[5, 6]).unwrap();
        let e = m.net.embed_domain(&mut g, 1).unwrap();
        let q = m.net.recognition(&mut g, enc.last, e, enc.last, e, 10.0).unwrap();
        assert!(g.value(q.mu).data().iter().all(|&x| x == 0.0));
        assert!(g.value(q.logvar).data().iter().all(|&x| x.exp() == 1.0));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let m = tiny(Variant::Latent);
        let mut g = Graph::inference(&m.store);
        let a = g.input(Tensor::zeros(&[5]));
        let wrong = g.input(Tensor::zeros(&[3]));
        assert!(m.net.prior(&mut g, a, wrong, 10.0).is_err());
        assert!(m.net.domain_logits(&mut g, a, a, wrong).is_err());
        assert!(m.net.domain_word_scores(&mut g, wrong).is_err());
    }

    #[test]
    fn zero_projections_give_zero_outputs() {
        let mut m = tiny(Variant::Latent);
        m.zero_param("domain.out.w").unwrap();
        m.zero_param("domain.w_d.w").unwrap();
        let mut g = Graph::inference(&m.store);
        let a = g.input(Tensor::vector(vec![0.3; 5]));
        let z = g.input(Tensor::vector(vec![0.2; 4]));
        let o = m.net.domain_logits(&mut g, a, a, z).unwrap();
        assert_eq!(g.value(o).data(), &[0.0; 3]);
        let p = g.softmax(o).unwrap();
        assert!(g.value(p).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let d = m.net.domain_word_scores(&mut g, a).unwrap();
        assert_eq!(g.shape(d), &[12]);
        assert!(g.value(d).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn latent_sampling() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let q = Gaussian {
            mu: g.input(Tensor::vector(vec![1.0, -2.0])),
            logvar: g.input(Tensor::vector(vec![0.5, -10.0])),
        };
        let z = sample_latent(&mut g, q, &[0.0, 0.0]).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, -2.0]);
        assert!(sample_latent(&mut g, q, &[0.0]).is_err());
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_diag(&[0.3], &[2.0], &[0.3], &[2.0]).unwrap(), 0.0);
        assert!((kl_diag(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_diag(&[1.0], &[0.0], &[0.0], &[1.0]).is_err());

        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let v = |g: &mut Graph<'_>, x: Vec<f64>| g.input(Tensor::vector(x));
        let q = Gaussian {
            mu: v(&mut g, vec![1.0, 0.2]),
            logvar: v(&mut g, vec![0.0, 0.7]),
        };
        let p = Gaussian {
            mu: v(&mut g, vec![0.0, -0.4]),
            logvar: v(&mut g, vec![0.0, -0.3]),
        };
        let kl = kl_term(&mut g, q, p).unwrap();
        let exact = kl_diag(&[1.0, 0.2], &[1.0, 0.7f64.exp()], &[0.0, -0.4], &[1.0, (-0.3f64).exp()]).unwrap();
        assert!((g.scalar(kl) - exact).abs() < 1e-12);
    }

    #[test]
    fn gumbel_cases() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let o = g.input(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let e_inv = (-1.0f64).exp();
        let p = gumbel_sample(&mut g, o, 1.0, &[e_inv; 3]).unwrap();
        let expected = softmax(&[0.5, -1.0, 2.0]);
        assert!(g
            .value(p)
            .data()
            .iter()
            .zip(&expected)
            .all(|(a, b)| (a - b).abs() < 1e-12));

        let noise = [0.9, 0.2, 0.3];
        let sharp = gumbel_sample(&mut g, o, 1e-3, &noise).unwrap();
        let shifted: Vec<f64> = [0.5, -1.0, 2.0]
            .iter()
            .zip(&noise)
            .map(|(a, &u)| a + gumbel_noise(u))
            .collect();
        let best = crate::numerics::tensor::argmax(&shifted);
        assert!(g.value(sharp).data()[best] > 0.999);

        assert!(gumbel_sample(&mut g, o, 0.0, &noise).is_err());
        let edge = gumbel_sample(&mut g, o, 1.0, &[0.0, 1.0, 0.5]).unwrap();
        assert!(g.value(edge).is_finite());
    }

    #[test]
    fn domain_loss_matches_cross_entropy() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let u = g.input(Tensor::vector(vec![0.0; 6]));
        let pu = g.softmax(u).unwrap();
        let l = domain_loss(&mut g, pu, 2).unwrap();
        assert!((g.scalar(l) - 6f64.ln()).abs() < 1e-12);
        let o = g.input(Tensor::vector(vec![0.4, -1.2, 2.2, 0.1]));
        let p = g.softmax(o).unwrap();
        let a = domain_loss(&mut g, p, 1).unwrap();
        let b = cross_entropy(&mut g, o, 1).unwrap();
        assert!((g.scalar(a) - g.scalar(b)).abs() < 1e-9);
    }

    #[test]
    fn total_loss_floor() {
        assert_eq!(total_loss(2.0, 1.0, 1.0, 5.0), 7.0);
        assert_eq!(total_loss(7.0, 1.0, 1.0, 5.0), 9.0);
    }

    #[test]
    fn tau_schedule_reaches_floor() {
        let s = TauSchedule::new(3.0, 0.1, 0.8, 1000);
        assert_eq!(s.at(0), 3.0);
        assert!((s.at(800) - 0.1).abs() < 1e-9);
        assert_eq!(s.at(1000), 0.1);
        assert!(s.at(400) > s.at(401));
    }

    #[test]
    fn sequence_nll_is_sum_of_steps() {
        let m = tiny(Variant::Latent);
        let mut g = Graph::inference(&m.store);
        let enc = m.net.encode(&mut g, &[5, 6]).unwrap();
        let z = g.input(Tensor::vector(vec![0.1, -0.2, 0.3, 0.0]));
        let d = g.input(Tensor::vector((0..12).map(|i| i as f64 * 0.1).collect()));
        let total = m.net.sequence_nll(&mut g, &enc, z, Some(d), 1.5, &[8]).unwrap();

        // independent recomputation step by step
        let keys = m.net.attn.keys(&mut g, enc.states).unwrap();
        let s0 = m.net.decoder_init(&mut g, enc.last).unwrap();
        let (c0, _) = m.net.attn.context(&mut g, s0[1], enc.states, keys).unwrap();
        let (s1, o1) = m.net.decode_step(&mut g, &s0, c0, z, crate::corpus::BOS).unwrap();
        let (c1, _) = m.net.attn.context(&mut g, s1[1], enc.states, keys).unwrap();
        let (_, o2) = m.net.decode_step(&mut g, &s1, c1, z, 8).unwrap();
        let mut sum = 0.0;
        for (o, y) in [(o1, 8), (o2, crate::corpus::EOS)] {
            let logits: Vec<f64> = g
                .value(o)
                .data()
                .iter()
                .zip(g.value(d).data())
                .map(|(s, d)| s + 1.5 * d)
                .collect();
            sum -= softmax(&logits)[y].ln();
        }
        assert!((g.scalar(total) - sum).abs() < 1e-10);
        assert!(g.scalar(total) >= 0.0);
    }

    #[test]
    fn loss_terms_for_both_variants() {
        for variant in [Variant::Latent, Variant::Seq2Seq] {
            let m = tiny(variant);
            let mut rng = stream(1, Stream::Test, 0);
            let noise = ExampleNoise::draw(&mut rng, 4, 3);
            let mut g = Graph::new(&m.store);
            let t = m
                .net
                .loss_terms(&mut g, &m.cfg, &pair(), Some(&noise), 1.0, 1.0)
                .unwrap();
            assert_eq!(t.kl.is_some(), variant == Variant::Latent);
            assert!(g.scalar(t.nll) > 0.0 && g.scalar(t.domain) > 0.0);
            assert_eq!(t.tokens, 3);
        }
    }
}
