//! Neural building blocks on top of the tape: linear maps, the one-layer
//! tanh MLP, embeddings, GRU cells and stacks, additive attention and
//! cross-entropy.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, ParamId, ParamStore, Var};

/// `y = W·x (+ b)` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.init(format!("{name}.w"), &[output, input], Init::Xavier, rng);
        let bias = bias.then(|| store.init(format!("{name}.b"), &[output], Init::Zeros, rng));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(w, x)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// One linear layer followed by `tanh`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub linear: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, name, input, output, true, rng),
        }
    }

    pub fn output(&self) -> usize {
        self.linear.output
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.shape(x).first().copied().unwrap_or(0);
        if g.shape(x).len() != 1 || w != self.linear.input {
            return Err(Error::shape("mlp", &[self.linear.input], g.shape(x)));
        }
        let y = self.linear.forward(g, x)?;
        Ok(g.tanh(y))
    }

    /// Forward over the concatenation of several vectors.
    pub fn forward_concat(&self, g: &mut Graph<'_>, parts: &[Var]) -> Result<Var> {
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(parts, 0)?
        };
        self.forward(g, x)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.init(format!("{name}.table"), &[rows, dim], Init::Normal(0.1), rng);
        Self { table, rows, dim }
    }

    pub fn lookup(&self, g: &mut Graph<'_>, id: usize) -> Result<Var> {
        let t = g.param(self.table);
        g.row(t, id)
    }
}

/// One GRU layer. Gate convention:
///
/// ```text
/// r  = σ(W_r x + b_r + U_r h)
/// u  = σ(W_u x + b_u + U_u h)
/// h̃  = tanh(W_c x + b_c + r ⊙ (U_c h))
/// h' = (1 - u) ⊙ h + u ⊙ h̃
/// ```
///
/// The three input maps are fused into `w_x: [3n, d]` (rows ordered r, u, c)
/// and the hidden maps into `w_h: [3n, n]`.
#[derive(Debug, Clone)]
pub struct GruLayer {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_x = store.init(format!("{name}.w_x"), &[3 * hidden, input], Init::Uniform(bound), rng);
        let w_h = store.init(format!("{name}.w_h"), &[3 * hidden, hidden], Init::Uniform(bound), rng);
        let b = store.init(format!("{name}.b"), &[3 * hidden], Init::Zeros, rng);
        Self {
            w_x,
            w_h,
            b,
            input,
            hidden,
        }
    }

    pub fn step(&self, g: &mut Graph<'_>, h_prev: Var, x: Var) -> Result<Var> {
        if g.shape(x) != [self.input] {
            return Err(Error::shape("gru_step input", &[self.input], g.shape(x)));
        }
        if g.shape(h_prev) != [self.hidden] {
            return Err(Error::shape("gru_step state", &[self.hidden], g.shape(h_prev)));
        }
        let n = self.hidden;
        let (w_x, w_h, b) = (g.param(self.w_x), g.param(self.w_h), g.param(self.b));
        let gx = g.matmul(w_x, x)?;
        let gx = g.add(gx, b)?;
        let gh = g.matmul(w_h, h_prev)?;

        let rx = g.slice(gx, 0, n)?;
        let ux = g.slice(gx, n, n)?;
        let cx = g.slice(gx, 2 * n, n)?;
        let rh = g.slice(gh, 0, n)?;
        let uh = g.slice(gh, n, n)?;
        let ch = g.slice(gh, 2 * n, n)?;

        let r = g.add(rx, rh)?;
        let r = g.sigmoid(r);
        let u = g.add(ux, uh)?;
        let u = g.sigmoid(u);
        let rch = g.mul(r, ch)?;
        let cand = g.add(cx, rch)?;
        let cand = g.tanh(cand);

        // h' = h + u ⊙ (h̃ - h)
        let diff = g.sub(cand, h_prev)?;
        let upd = g.mul(u, diff)?;
        g.add(h_prev, upd)
    }
}

/// Stacked GRU layers; layer `l + 1` consumes the new state of layer `l`.
#[derive(Debug, Clone)]
pub struct GruStack {
    pub layers: Vec<GruLayer>,
}

impl GruStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let d = if l == 0 { input } else { hidden };
                GruLayer::new(store, &format!("{name}.{l}"), d, hidden, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    pub fn step(&self, g: &mut Graph<'_>, states: &[Var], x: Var) -> Result<Vec<Var>> {
        if states.len() != self.layers.len() {
            return Err(Error::shape("gru_stack", &[self.layers.len()], &[states.len()]));
        }
        let mut out = Vec::with_capacity(states.len());
        let mut input = x;
        for (layer, &h) in self.layers.iter().zip(states) {
            let h_new = layer.step(g, h, input)?;
            out.push(h_new);
            input = h_new;
        }
        Ok(out)
    }
}

/// Additive attention `e_k = vᵀ tanh(W s + U h_k)`.
#[derive(Debug, Clone)]
pub struct Attention {
    /// `[n, n]`, applied as `W·s`.
    pub query: ParamId,
    /// `[n, n]`, applied as `H·U` so all keys come from one product.
    pub key: ParamId,
    pub v: ParamId,
    pub hidden: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut R) -> Self {
        let query = store.init(format!("{name}.w_query"), &[hidden, hidden], Init::Xavier, rng);
        let key = store.init(format!("{name}.w_key"), &[hidden, hidden], Init::Xavier, rng);
        let v = store.init(format!("{name}.v"), &[hidden], Init::Uniform(0.1), rng);
        Self { query, key, v, hidden }
    }

    /// Projected keys `H·U`; depends only on the encoder states.
    pub fn keys(&self, g: &mut Graph<'_>, states: Var) -> Result<Var> {
        let u = g.param(self.key);
        g.matmul(states, u)
    }

    /// Context vector and attention weights for decoder state `s`.
    pub fn context(&self, g: &mut Graph<'_>, s: Var, states: Var, keys: Var) -> Result<(Var, Var)> {
        let t = g.shape(states)[0];
        if t == 0 {
            return Err(Error::domain("attention", "no encoder states"));
        }
        let w = g.param(self.query);
        let q = g.matmul(w, s)?;
        let q = g.broadcast_rows(q, t)?;
        let e = g.add(keys, q)?;
        let e = g.tanh(e);
        let v = g.param(self.v);
        let scores = g.matmul(e, v)?;
        let alpha = g.softmax(scores)?;
        let c = g.matmul(alpha, states)?;
        Ok((c, alpha))
    }

    pub fn attend(&self, g: &mut Graph<'_>, s: Var, states: Var) -> Result<(Var, Var)> {
        if g.shape(states).len() != 2 || g.shape(states)[0] == 0 {
            return Err(Error::domain("attention", "no encoder states"));
        }
        let keys = self.keys(g, states)?;
        self.context(g, s, states, keys)
    }
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(g: &mut Graph<'_>, logits: Var, target: usize) -> Result<Var> {
    let v = g.shape(logits).first().copied().unwrap_or(0);
    if target >= v {
        return Err(Error::OutOfRange {
            what: "cross_entropy target",
            index: target,
            size: v,
        });
    }
    let lp = g.log_softmax(logits)?;
    let t = g.pick(lp, target)?;
    Ok(g.neg(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{tensor, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn gru_zero_params_halves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let gru = GruLayer::new(&mut store, "g", 3, 4, &mut rng);
        zero_all(&mut store);
        let mut g = Graph::inference(&store);
        let h = g.input(Tensor::vector(vec![1.0, -2.0, 0.5, 4.0]));
        let x = g.input(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let out = gru.step(&mut g, h, x).unwrap();
        assert_eq!(g.value(out).data(), &[0.5, -1.0, 0.25, 2.0]);

        let h0 = g.input(Tensor::zeros(&[4]));
        let out = gru.step(&mut g, h0, x).unwrap();
        assert_eq!(g.value(out).data(), &[0.0; 4]);
    }

    #[test]
    fn gru_rejects_bad_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let gru = GruLayer::new(&mut store, "g", 3, 4, &mut rng);
        let mut g = Graph::inference(&store);
        let h = g.input(Tensor::zeros(&[4]));
        let x = g.input(Tensor::zeros(&[2]));
        assert!(gru.step(&mut g, h, x).is_err());
    }

    #[test]
    fn attention_singleton_and_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, "a", 3, &mut rng);
        let mut g = Graph::inference(&store);
        let s = g.input(Tensor::vector(vec![0.3, -0.2, 0.9]));
        let h1 = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let hv = g.input(h1.clone());
        let (c, a) = att.attend(&mut g, s, hv).unwrap();
        assert_eq!(g.value(a).data(), &[1.0]);
        assert!(g
            .value(c)
            .data()
            .iter()
            .zip(h1.data())
            .all(|(x, y)| (x - y).abs() < 1e-15));

        let rows = Tensor::from_rows(&vec![vec![0.5, 0.1, -0.4]; 4]).unwrap();
        let hv = g.input(rows);
        let (c, a) = att.attend(&mut g, s, hv).unwrap();
        for &w in g.value(a).data() {
            assert!((w - 0.25).abs() < 1e-12);
        }
        for (x, y) in g.value(c).data().iter().zip(&[0.5, 0.1, -0.4]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_empty_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, "a", 3, &mut rng);
        let mut g = Graph::inference(&store);
        let s = g.input(Tensor::vector(vec![0.0; 3]));
        let hv = g.input(Tensor::zeros(&[0, 3]));
        assert!(att.attend(&mut g, s, hv).is_err());
    }

    #[test]
    fn mlp_zero_weights_and_width_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", 4, 3, &mut rng);
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::vector(vec![1.0; 5]));
        assert!(mlp.forward(&mut g, x).is_err());
        drop(g);
        zero_all(&mut store);
        let mut g = Graph::inference(&store);
        let a = g.input(Tensor::vector(vec![1.0, 2.0]));
        let b = g.input(Tensor::vector(vec![3.0, 4.0]));
        let y = mlp.forward_concat(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 3]);
    }

    #[test]
    fn cross_entropy_cases() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let l = g.input(Tensor::vector(vec![0.0; 4]));
        let ce = cross_entropy(&mut g, l, 2).unwrap();
        assert!((g.scalar(ce) - 4f64.ln()).abs() < 1e-12);

        let l = g.input(Tensor::vector(vec![20.0, 0.0, 0.0]));
        let ce = cross_entropy(&mut g, l, 0).unwrap();
        assert!(g.scalar(ce) < 1e-8);

        assert!(cross_entropy(&mut g, l, 3).is_err());

        let logits = vec![0.3, -1.1, 2.2, 0.05, -0.6];
        let lv = g.input(Tensor::vector(logits.clone()));
        let ce = cross_entropy(&mut g, lv, 3).unwrap();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        let oracle = -(logits[3].exp() / z).ln();
        assert!((g.scalar(ce) - oracle).abs() < 1e-12);
        let _ = tensor::softmax(&logits);
    }
}
