use dckg::layers::{cross_entropy, Attention, GruLayer, Linear, Mlp};
use dckg::model::check::{miniature_gradcheck, DEFAULT_EPS};
use dckg::model::Variant;
use dckg::numerics::{gradcheck, Graph, ParamStore, Tensor, Var};
use dckg::rng::{stream, Stream};
use dckg::Result;
use proptest::prelude::*;
use rand::Rng;

type BinOp = fn(&mut Graph<'_>, Var, Var) -> Result<Var>;
type UnOp = fn(&mut Graph<'_>, Var) -> Result<Var>;

fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Contract the op's output with a fixed random weight so every output
/// entry contributes a distinct amount to the loss.
fn weighted(g: &mut Graph<'_>, out: Var, weight: &Tensor) -> Result<Var> {
    let w = g.input(weight.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn check_binary(
    seed: u64,
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    op: impl Fn(&mut Graph<'_>, Var, Var) -> Result<Var>,
) -> f64 {
    let mut rng = stream(seed, Stream::Test, 0);
    let mut store = ParamStore::new();
    let a = store.add("a", random_tensor(&mut rng, a_shape, -1.5, 1.5));
    let b = store.add("b", random_tensor(&mut rng, b_shape, -1.5, 1.5));
    let w = random_tensor(&mut rng, out_shape, -1.0, 1.0);
    let r = gradcheck(&mut store, 1e-6, |g| {
        let (va, vb) = (g.param(a), g.param(b));
        let out = op(g, va, vb)?;
        weighted(g, out, &w)
    })
    .unwrap();
    r.max_rel_error
}

fn check_unary(
    seed: u64,
    shape: &[usize],
    out_shape: &[usize],
    lo: f64,
    hi: f64,
    op: impl Fn(&mut Graph<'_>, Var) -> Result<Var>,
) -> f64 {
    let mut rng = stream(seed, Stream::Test, 1);
    let mut store = ParamStore::new();
    let a = store.add("a", random_tensor(&mut rng, shape, lo, hi));
    let w = random_tensor(&mut rng, out_shape, -1.0, 1.0);
    let r = gradcheck(&mut store, 1e-6, |g| {
        let va = g.param(a);
        let out = op(g, va)?;
        weighted(g, out, &w)
    })
    .unwrap();
    r.max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_binary_ops(seed in any::<u64>(), rows in 1usize..4, cols in 1usize..5) {
        let s = [rows, cols];
        let ops: [(&str, BinOp); 3] = [
            ("add", |g, a, b| g.add(a, b)),
            ("sub", |g, a, b| g.sub(a, b)),
            ("mul", |g, a, b| g.mul(a, b)),
        ];
        for (name, op) in ops {
            let e = check_binary(seed, &s, &s, &s, op);
            prop_assert!(e < 1e-3, "{name}: {e}");
        }
    }

    #[test]
    fn matmul_shapes(seed in any::<u64>(), m in 1usize..4, k in 1usize..5, n in 1usize..4) {
        let e = check_binary(seed, &[m, k], &[k, n], &[m, n], |g, a, b| g.matmul(a, b));
        prop_assert!(e < 1e-3, "matrix-matrix: {e}");
        let e = check_binary(seed, &[m, k], &[k], &[m], |g, a, b| g.matmul(a, b));
        prop_assert!(e < 1e-3, "matrix-vector: {e}");
    }

    #[test]
    fn structural_ops(seed in any::<u64>(), rows in 1usize..4, cols in 2usize..5) {
        let e = check_binary(seed, &[cols], &[cols + 1], &[2 * cols + 1], |g, a, b| g.concat(&[a, b], 0));
        prop_assert!(e < 1e-3, "concat vectors: {e}");
        let e = check_binary(seed, &[rows, cols], &[rows + 1, cols], &[2 * rows + 1, cols], |g, a, b| g.concat(&[a, b], 0));
        prop_assert!(e < 1e-3, "concat rows: {e}");
        let e = check_binary(seed, &[cols], &[cols], &[2, cols], |g, a, b| g.stack(&[a, b, a]).and_then(|s| g.slice(s, 1, 2)));
        prop_assert!(e < 1e-3, "stack and slice: {e}");
        let e = check_unary(seed, &[rows, cols], &[cols], -1.0, 1.0, |g, a| g.row(a, 0));
        prop_assert!(e < 1e-3, "row: {e}");
        let e = check_unary(seed, &[cols], &[rows, cols], -1.0, 1.0, |g, a| g.broadcast_rows(a, rows));
        prop_assert!(e < 1e-3, "broadcast_rows: {e}");
        let e = check_unary(seed, &[cols], &[], -1.0, 1.0, |g, a| g.pick(a, 1));
        prop_assert!(e < 1e-3, "pick: {e}");
    }

    #[test]
    fn pointwise_ops(seed in any::<u64>(), n in 1usize..7) {
        let s = [n];
        let ops: [(&str, f64, f64, UnOp); 9] = [
            ("sigmoid", -3.0, 3.0, |g, a| Ok(g.sigmoid(a))),
            ("tanh", -2.0, 2.0, |g, a| Ok(g.tanh(a))),
            ("exp", -2.0, 2.0, |g, a| Ok(g.exp(a))),
            ("log", 0.2, 3.0, |g, a| g.log(a)),
            ("neg", -2.0, 2.0, |g, a| Ok(g.neg(a))),
            ("one_minus", -2.0, 2.0, |g, a| Ok(g.one_minus(a))),
            ("add_scalar", -2.0, 2.0, |g, a| Ok(g.add_scalar(a, 0.7))),
            ("mul_scalar", -2.0, 2.0, |g, a| Ok(g.mul_scalar(a, -1.3))),
            ("softmax", -3.0, 3.0, |g, a| g.softmax(a)),
        ];
        for (name, lo, hi, op) in ops {
            let e = check_unary(seed, &s, &s, lo, hi, op);
            prop_assert!(e < 1e-3, "{name}: {e}");
        }
        let e = check_unary(seed, &s, &s, -3.0, 3.0, |g, a| g.log_softmax(a));
        prop_assert!(e < 1e-3, "log_softmax: {e}");
    }

    #[test]
    fn reductions(seed in any::<u64>(), n in 2usize..7) {
        let s = [n];
        let e = check_unary(seed, &s, &[], -2.0, 2.0, |g, a| Ok(g.sum(a)));
        prop_assert!(e < 1e-3, "sum: {e}");
        let e = check_unary(seed, &s, &[], -2.0, 2.0, |g, a| Ok(g.mean(a)));
        prop_assert!(e < 1e-3, "mean: {e}");
        let e = check_unary(seed, &s, &[], -2.0, 2.0, |g, a| Ok(g.max(a)));
        prop_assert!(e < 1e-3, "max: {e}");
        // kinks sit at ±0.5 and 0.1; random points land on them with probability zero
        let e = check_unary(seed, &s, &s, -1.0, 1.0, |g, a| Ok(g.clamp(a, -0.5, 0.5)));
        prop_assert!(e < 1e-3, "clamp: {e}");
        let e = check_unary(seed, &s, &s, -1.0, 1.0, |g, a| Ok(g.max_scalar(a, 0.1)));
        prop_assert!(e < 1e-3, "max_scalar: {e}");
    }

    #[test]
    fn cross_entropy_and_attention(seed in any::<u64>(), t in 1usize..5, n in 2usize..5) {
        let mut rng = stream(seed, Stream::Test, 2);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "attn", n, &mut rng);
        let states = store.add("states", random_tensor(&mut rng, &[t, n], -1.0, 1.0));
        let s = store.add("s", random_tensor(&mut rng, &[n], -1.0, 1.0));
        let target = rng.random_range(0..n);
        let r = gradcheck(&mut store, 1e-6, |g| {
            let (h, q) = (g.param(states), g.param(s));
            let (ctx, _) = attn.attend(g, q, h)?;
            cross_entropy(g, ctx, target)
        })
        .unwrap();
        prop_assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}

#[test]
fn linear_regression_fragment() {
    let mut rng = stream(5, Stream::Test, 0);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 3, 1, true, &mut rng);
    let xs: Vec<Tensor> = (0..6).map(|_| random_tensor(&mut rng, &[3], -1.0, 1.0)).collect();
    let ys: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = gradcheck(&mut store, 1e-5, |g| {
        let mut terms = Vec::new();
        for (x, &y) in xs.iter().zip(&ys) {
            let xv = g.input(x.clone());
            let pred = lin.forward(g, xv)?;
            let diff = g.add_scalar(pred, -y);
            terms.push(g.mul(diff, diff)?);
        }
        let total = g.add_all(&terms)?;
        let total = g.sum(total);
        Ok(g.mul_scalar(total, 0.5))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn three_layer_mlp() {
    for seed in 0..5 {
        let mut rng = stream(seed, Stream::Test, 0);
        let mut store = ParamStore::new();
        let l1 = Mlp::new(&mut store, "l1", 5, 7, &mut rng);
        let l2 = Mlp::new(&mut store, "l2", 7, 6, &mut rng);
        let l3 = Linear::new(&mut store, "l3", 6, 4, true, &mut rng);
        let x = random_tensor(&mut rng, &[5], -1.0, 1.0);
        let r = gradcheck(&mut store, 1e-4, |g| {
            let xv = g.input(x.clone());
            let h1 = l1.forward(g, xv)?;
            let h2 = l2.forward(g, h1)?;
            let out = l3.forward(g, h2)?;
            cross_entropy(g, out, 2)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
    }
}

#[test]
fn gru_step_fragment() {
    let mut rng = stream(9, Stream::Test, 0);
    let mut store = ParamStore::new();
    let cell = GruLayer::new(&mut store, "gru", 4, 5, &mut rng);
    let h0 = store.add("h0", random_tensor(&mut rng, &[5], -0.8, 0.8));
    let x = store.add("x", random_tensor(&mut rng, &[4], -1.0, 1.0));
    let w = random_tensor(&mut rng, &[5], -1.0, 1.0);
    let r = gradcheck(&mut store, 1e-5, |g| {
        let (hv, xv) = (g.param(h0), g.param(x));
        let h1 = cell.step(g, hv, xv)?;
        let h2 = cell.step(g, h1, xv)?;
        weighted(g, h2, &w)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn miniature_model_both_variants() {
    for variant in [Variant::Latent, Variant::Seq2Seq] {
        let r = miniature_gradcheck(variant, 21, DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error < 1e-3, "{variant:?}: {r:?}");
    }
}
