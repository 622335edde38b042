use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;
use reframe::nn::{
    gradcheck, rng_from_seed, AttentionLayout, Block, CausalSelfAttention, DropoutRates, Embedding,
    Graph, LayerNorm, Linear, NnRng, ParamStore, Tensor, Var,
};
use reframe::Result;

fn random_tensor(shape: &[usize], rng: &mut NnRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize(store: &mut ParamStore, rng: &mut NnRng) {
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().value.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
}

/// Builds the loss graph with `f`, backpropagates, and checks every parameter
/// against central differences.
fn assert_grads<F>(store: &mut ParamStore, f: F)
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store).unwrap();
    let grads = g.backward(loss).unwrap();
    let names: Vec<String> = store.names().map(String::from).collect();
    let report = gradcheck::check(store, &names, &grads, 1e-5, |s| {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    })
    .unwrap();
    for p in &report.params {
        assert!(p.rel_error < 1e-6, "{}: rel error {:e}", p.name, p.rel_error);
        assert!(p.analytic_norm > 0.0 || p.numeric_norm == 0.0, "{} got no gradient", p.name);
    }
}

fn sq_loss(g: &mut Graph, y: Var, target: &Tensor) -> Result<Var> {
    let rows = g.value(y).rows();
    let n = g.value(y).len() as f64;
    g.weighted_sq_err(y, target.data().to_vec(), vec![1.0; rows], n)
}

#[test]
fn scalar_closed_form_gradient() {
    // loss = (w*x - y)^2, d/dw = 2 x (w x - y)
    let (w, x, y) = (0.7, 1.5, -0.3);
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![1, 1], vec![w]).unwrap(), true).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(vec![1, 1], vec![x]).unwrap());
    let wv = g.param(&store, "w").unwrap();
    let p = g.matmul(xv, wv).unwrap();
    let loss = g.weighted_sq_err(p, vec![y], vec![1.0], 1.0).unwrap();
    let grads = g.backward(loss).unwrap();
    let want = 2.0 * x * (w * x - y);
    assert!((grads["w"].data()[0] - want).abs() < 1e-15);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = rng_from_seed(1);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 3, 2, &mut rng).unwrap();
    let mut g = Graph::new();
    let x = g.constant(random_tensor(&[4, 3], &mut rng));
    let y = lin.forward(&mut g, &store, x).unwrap();
    let scaled = g.scale(y, 0.0);
    let loss = g.weighted_sq_err(scaled, vec![0.0; 8], vec![1.0; 4], 8.0).unwrap();
    let grads = g.backward(loss).unwrap();
    for t in grads.values() {
        assert!(t.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn backward_without_forward_is_state_error() {
    let g = Graph::new();
    let mut other = Graph::new();
    let v = other.constant(Tensor::scalar(1.0));
    assert!(matches!(g.backward(v), Err(reframe::Error::State(_))));
    assert!(matches!(other.backward(v), Err(reframe::Error::State(_))));
}

#[test]
fn affine_and_activations_gradcheck() {
    let mut rng = rng_from_seed(2);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 4, 5, &mut rng).unwrap();
    let l2 = Linear::new(&mut store, "l2", 5, 5, &mut rng).unwrap();
    let l3 = Linear::new(&mut store, "l3", 5, 3, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let x = random_tensor(&[6, 4], &mut rng);
    let target = random_tensor(&[6, 3], &mut rng);
    assert_grads(&mut store, |g, s| {
        let xv = g.constant(x.clone());
        let h = l1.forward(g, s, xv)?;
        let h = g.gelu(h);
        let h = l2.forward(g, s, h)?;
        let h = g.tanh(h);
        let h = l3.forward(g, s, h)?;
        let h = g.relu(h);
        let h = g.scale(h, 1.7);
        sq_loss(g, h, &target)
    });
}

#[test]
fn layer_norm_gradcheck_and_statistics() {
    let mut rng = rng_from_seed(3);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 3, 6, &mut rng).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 6).unwrap();
    randomize(&mut store, &mut rng);
    let x = random_tensor(&[5, 3], &mut rng);
    let target = random_tensor(&[5, 6], &mut rng);
    assert_grads(&mut store, |g, s| {
        let xv = g.constant(x.clone());
        let h = lin.forward(g, s, xv)?;
        let h = ln.forward(g, s, h)?;
        sq_loss(g, h, &target)
    });

    // pre-affine statistics with gamma = 1, beta = 0
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 16).unwrap();
    let mut g = Graph::inference();
    let xv = g.constant(random_tensor(&[8, 16], &mut rng).reshape(vec![8, 16]).unwrap());
    let y = ln.forward(&mut g, &store, xv).unwrap();
    for r in 0..8 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-4, "variance {var} (eps-shifted)");
    }
}

#[test]
fn embedding_gather_concat_gradcheck() {
    let mut rng = rng_from_seed(4);
    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, "emb", 7, 3, &mut rng).unwrap();
    let lin = Linear::new(&mut store, "lin", 2, 3, &mut rng).unwrap();
    let head = Linear::new(&mut store, "head", 6, 2, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let x = random_tensor(&[4, 2], &mut rng);
    let target = random_tensor(&[4, 2], &mut rng);
    assert_grads(&mut store, |g, s| {
        let e = emb.forward(g, s, vec![0, 3, 3, 6])?;
        let xv = g.constant(x.clone());
        let h = lin.forward(g, s, xv)?;
        let stacked = g.concat_rows(&[e, h])?;
        let back = g.gather_rows(stacked, vec![4, 0, 5, 1, 6, 2, 7, 3])?;
        let a = g.gather_rows(back, vec![0, 2, 4, 6])?;
        let b = g.gather_rows(back, vec![1, 3, 5, 7])?;
        let sum = g.add(a, b)?;
        let cat = g.concat_cols(sum, a)?;
        let out = head.forward(g, s, cat)?;
        sq_loss(g, out, &target)
    });
}

#[test]
fn attention_gradcheck_with_padding_heads_and_dropout() {
    let mut rng = rng_from_seed(5);
    let mut store = ParamStore::new();
    let attn = CausalSelfAttention::new(&mut store, "attn", 6, 2, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let (b, t) = (2, 4);
    let x = random_tensor(&[b * t, 6], &mut rng);
    let target = random_tensor(&[b * t, 6], &mut rng);
    let key_valid = vec![false, true, true, true, true, true, true, true];
    assert_grads(&mut store, |g, s| {
        let xv = g.constant(x.clone());
        // dropout with a fixed seed replays the same mask in every evaluation
        let mut drop_rng = rng_from_seed(99);
        let y = attn.forward(g, s, xv, b, t, key_valid.clone(), 0.3, Some(&mut drop_rng))?;
        sq_loss(g, y, &target)
    });
}

#[test]
fn transformer_block_gradcheck() {
    let mut rng = rng_from_seed(6);
    let mut store = ParamStore::new();
    let block = Block::new(&mut store, "blk", 4, 1, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let x = random_tensor(&[6, 4], &mut rng);
    let target = random_tensor(&[6, 4], &mut rng);
    let rates = DropoutRates { hidden: 0.2, attention: 0.05 };
    assert_grads(&mut store, |g, s| {
        let xv = g.constant(x.clone());
        let mut drop_rng = rng_from_seed(7);
        let y = block.forward(g, s, xv, 2, 3, &[true; 6], rates, Some(&mut drop_rng))?;
        sq_loss(g, y, &target)
    });
}

/// Materializes the full masked attention matrix for one sequence.
fn dense_attention(store: &ParamStore, attn: &CausalSelfAttention, x: &Tensor) -> Tensor {
    let proj = |l: &Linear| reframe::nn::linear_forward(x, store.value(&l.weight).unwrap(), store.value(&l.bias).unwrap()).unwrap();
    let (q, k, v) = (proj(&attn.query), proj(&attn.key), proj(&attn.value));
    let (t, d) = (x.rows(), x.cols());
    let dh = d / attn.heads;
    let mut out = vec![0.0; t * d];
    for h in 0..attn.heads {
        let mut full = vec![vec![f64::NEG_INFINITY; t]; t];
        for i in 0..t {
            for j in 0..t {
                if j <= i {
                    let s: f64 = (0..dh).map(|c| q.row(i)[h * dh + c] * k.row(j)[h * dh + c]).sum();
                    full[i][j] = s / (dh as f64).sqrt();
                }
            }
        }
        for i in 0..t {
            let z: f64 = full[i].iter().map(|s| s.exp()).sum();
            let w: Vec<f64> = full[i].iter().map(|s| s.exp() / z).collect();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..dh {
                out[i * d + h * dh + c] = (0..t).map(|j| w[j] * v.row(j)[h * dh + c]).sum();
            }
        }
    }
    let y = Tensor::new(vec![t, d], out).unwrap();
    reframe::nn::linear_forward(&y, store.value(&attn.out.weight).unwrap(), store.value(&attn.out.bias).unwrap()).unwrap()
}

#[test]
fn attention_matches_dense_reference() {
    let mut rng = rng_from_seed(8);
    for heads in [1, 2] {
        let mut store = ParamStore::new();
        let attn = CausalSelfAttention::new(&mut store, "a", 4, heads, &mut rng).unwrap();
        randomize(&mut store, &mut rng);
        let x = random_tensor(&[3, 4], &mut rng);
        let got = attn.apply(&store, &x).unwrap();
        let want = dense_attention(&store, &attn, &x);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn single_token_attention_is_value_then_output_projection() {
    let mut rng = rng_from_seed(9);
    let mut store = ParamStore::new();
    let attn = CausalSelfAttention::new(&mut store, "a", 4, 2, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let x = random_tensor(&[1, 4], &mut rng);
    let got = attn.apply(&store, &x).unwrap();
    let v = reframe::nn::linear_forward(&x, store.value("a.value.weight").unwrap(), store.value("a.value.bias").unwrap()).unwrap();
    let want = reframe::nn::linear_forward(&v, store.value("a.out.weight").unwrap(), store.value("a.out.bias").unwrap()).unwrap();
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn attention_width_must_divide_heads() {
    let mut rng = rng_from_seed(0);
    let mut store = ParamStore::new();
    assert!(matches!(
        CausalSelfAttention::new(&mut store, "a", 6, 4, &mut rng),
        Err(reframe::Error::Config(_))
    ));
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 6]));
    let layout = AttentionLayout { batch: 1, seq: 2, heads: 4, key_valid: vec![true; 2] };
    assert!(matches!(
        g.causal_attention(x, x, x, layout, 0.0, None),
        Err(reframe::Error::Config(_))
    ));
}

fn block_outputs(block: &Block, store: &ParamStore, x: &Tensor, seq: usize) -> Tensor {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let rates = DropoutRates { hidden: 0.0, attention: 0.0 };
    let y = block.forward(&mut g, store, xv, 1, seq, &vec![true; seq], rates, None).unwrap();
    g.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causality_holds_for_any_prefix(seq in 1usize..8, pos in 0usize..8, seed in 0u64..1000) {
        let pos = pos % seq;
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", 4, 2, &mut rng).unwrap();
        let x = random_tensor(&[seq, 4], &mut rng);
        let mut perturbed = x.clone();
        for r in pos + 1..seq {
            for c in 0..4 {
                perturbed.data_mut()[r * 4 + c] += rng.random_range(-3.0..3.0);
            }
        }
        let a = block_outputs(&block, &store, &x, seq);
        let b = block_outputs(&block, &store, &perturbed, seq);
        for r in 0..=pos {
            for c in 0..4 {
                prop_assert_eq!(a.data()[r * 4 + c].to_bits(), b.data()[r * 4 + c].to_bits());
            }
        }
    }
}

#[test]
fn identical_seed_gives_bit_identical_training() {
    fn run() -> String {
        let mut rng = rng_from_seed(42);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", 4, 1, &mut rng).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        let mut opt = reframe::nn::AdamW::new(Default::default(), &store, names).unwrap();
        let x = random_tensor(&[6, 4], &mut rng);
        let target = random_tensor(&[6, 4], &mut rng);
        for _ in 0..20 {
            store.zero_grad();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let rates = DropoutRates { hidden: 0.2, attention: 0.05 };
            let y = block.forward(&mut g, &store, xv, 2, 3, &[true; 6], rates, Some(&mut rng)).unwrap();
            let loss = g.weighted_sq_err(y, target.data().to_vec(), vec![1.0; 6], 24.0).unwrap();
            let grads: BTreeMap<String, Tensor> = g.backward(loss).unwrap();
            store.accumulate(&grads).unwrap();
            opt.step(&mut store).unwrap();
        }
        store.fingerprint()
    }
    assert_eq!(run(), run());
}
