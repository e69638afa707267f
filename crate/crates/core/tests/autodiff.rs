use metadiag::autodiff::{finite_diff_check, Graph, Mode, NodeId, ValueMap};
use metadiag::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

/// x -> relu(x W1ᵀ + b1) W2ᵀ + b2, returning the pre-loss output node.
fn mlp(g: &mut Graph) -> NodeId {
    let x = g.input("x");
    let (w1, b1, w2, b2) = (g.param("w1"), g.param("b1"), g.param("w2"), g.param("b2"));
    let h = g.linear(x, w1, b1);
    let h = g.relu(h);
    g.linear(h, w2, b2)
}

fn setup(seed: u64) -> (ValueMap, ValueMap, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ValueMap::new();
    params.insert("w1".into(), random(&mut rng, 6, 4));
    params.insert("b1".into(), random(&mut rng, 1, 6));
    params.insert("w2".into(), random(&mut rng, 1, 6));
    params.insert("b2".into(), random(&mut rng, 1, 1));
    let mut inputs = ValueMap::new();
    inputs.insert("x".into(), random(&mut rng, 8, 4));
    let targets = (0..8).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
    (params, inputs, targets)
}

#[test]
fn two_layer_mlp_matches_central_differences() {
    for seed in 0..5 {
        let (params, inputs, targets) = setup(seed);
        let mut g = Graph::new(Mode::Eval);
        let logits = mlp(&mut g);
        g.bce_with_logits(logits, targets);
        let report = finite_diff_check(&mut g, &params, &[&inputs], 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
        assert!(report.blocks.iter().all(|b| b.checked > 0));
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let (params, inputs, targets) = setup(7);
    let run = || {
        let mut g = Graph::new(Mode::Train);
        let logits = mlp(&mut g);
        let d = g.dropout(logits, 0.3, 11);
        let loss = g.bce_with_logits(d, targets.clone());
        g.forward(&[&params, &inputs]).unwrap();
        g.backward_scalar(loss).unwrap()
    };
    let (a, b) = (run(), run());
    for (name, t) in &a {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t), bits(&b[name]), "{name}");
    }
}

#[test]
fn inputs_receive_no_gradient() {
    let (params, inputs, _) = setup(1);
    let mut g = Graph::new(Mode::Eval);
    let out = mlp(&mut g);
    let s = g.sum(out);
    g.forward(&[&params, &inputs]).unwrap();
    let grads = g.backward_scalar(s).unwrap();
    assert!(!grads.contains_key("x"));
    assert_eq!(grads.len(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear_in_the_seed(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (params, inputs, _) = setup(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let (s1, s2) = (random(&mut rng, 8, 1), random(&mut rng, 8, 1));
        let mut g = Graph::new(Mode::Eval);
        let out = mlp(&mut g);
        g.forward(&[&params, &inputs]).unwrap();
        let g1 = g.backward(out, &s1).unwrap();
        let g2 = g.backward(out, &s2).unwrap();
        let combined = s1.zip_map(&s2, |x, y| a * x + b * y);
        let g12 = g.backward(out, &combined).unwrap();
        for (name, t) in &g12 {
            let expect = g1[name].zip_map(&g2[name], |x, y| a * x + b * y);
            prop_assert!(t.max_abs_diff(&expect) < 1e-10, "{} off by {}", name, t.max_abs_diff(&expect));
        }
    }

    #[test]
    fn sum_squares_gradient_is_twice_the_value(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ValueMap::new();
        params.insert("w".into(), random(&mut rng, 3, 5));
        let mut g = Graph::new(Mode::Eval);
        let w = g.param("w");
        let loss = g.sum_squares(w);
        g.forward(&[&params]).unwrap();
        let grads = g.backward_scalar(loss).unwrap();
        let expect = params["w"].map(|v| 2.0 * v);
        prop_assert!(grads["w"].max_abs_diff(&expect) == 0.0);
    }
}
