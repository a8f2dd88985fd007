use levi_core::harness::count_params;
use levi_core::model::{weighted_mean, Backbone, BackboneConfig, LeviComposition, LeviConfig, TaskModelConfig};
use levi_core::regime::{levi_loss, levi_loss_value, LossSpec};
use levi_core::rng::SeedPath;
use levi_core::{Graph, HeadWeights, Model, Tensor};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = SeedPath::root(seed).rng();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| levi_core::rng::normal(&mut rng)).collect()).unwrap()
}

fn classes(rows: usize, k: usize, seed: u64) -> Tensor {
    let mut rng = SeedPath::root(seed).child("y").rng();
    Tensor::vector((0..rows).map(|_| levi_core::rng::below(&mut rng, k) as f64).collect())
}

fn raw_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = SeedPath::root(seed).child("w").rng();
    let w: Vec<f64> = (0..n).map(|_| levi_core::rng::uniform(&mut rng, 0.05, 1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn concat_then_split_round_trips(rows in 1usize..6, a in 1usize..5, b in 1usize..5, seed in any::<u64>()) {
        let (x, y) = (tensor(rows, a, seed), tensor(rows, b, seed ^ 1));
        let joined = Tensor::concat(&[&x, &y], 1).unwrap();
        prop_assert_eq!(joined.shape(), &[rows, a + b][..]);
        let (l, r) = joined.split_at(1, a).unwrap();
        prop_assert_eq!(l, x);
        prop_assert_eq!(r, y);
    }

    #[test]
    fn weighted_mean_ignores_head_order(n in 1usize..6, rows in 1usize..5, seed in any::<u64>(), rot in 0usize..6) {
        let preds: Vec<Tensor> = (0..n).map(|j| tensor(rows, 2, seed.wrapping_add(j as u64))).collect();
        let w = raw_weights(n, seed);
        let base = weighted_mean(&preds, &w).unwrap();
        let k = rot % n;
        let (mut p2, mut w2) = (preds.clone(), w.clone());
        p2.rotate_left(k);
        w2.rotate_left(k);
        p2.reverse();
        w2.reverse();
        let other = weighted_mean(&p2, &w2).unwrap();
        prop_assert!(base.data().iter().zip(other.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn uniform_levi_loss_is_the_double_average(n in 1usize..6, rows in 1usize..8, seed in any::<u64>(), xent in any::<bool>()) {
        let (loss, k) = if xent { (LossSpec::SoftmaxXent, 3) } else { (LossSpec::Mse, 1) };
        let preds: Vec<Tensor> = (0..n).map(|j| tensor(rows, k, seed.wrapping_add(j as u64))).collect();
        let labels = if xent { classes(rows, k, seed) } else { tensor(rows, 1, seed ^ 7).reshape(&[rows]).unwrap() };
        let got = levi_loss_value(&preds, &labels, &HeadWeights::uniform(n), loss).unwrap();
        let mut total = 0.0;
        for p in &preds {
            let mut g = Graph::new();
            let (pn, yn) = (g.input(p.clone()), g.input(labels.clone()));
            let l = loss.build(&mut g, pn, yn).unwrap();
            total += g.value(l).item();
        }
        let expected = total / n as f64;
        prop_assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0), "{} vs {}", got, expected);
    }

    #[test]
    fn backbone_param_count_matches_closed_form(d in 1usize..6, h in 1usize..9, b in 0usize..4, out in 1usize..4) {
        let bb = Backbone::new(BackboneConfig { input_dim: d, hidden: h, blocks: b, output_dim: out }, &mut SeedPath::root(1).rng());
        let expected = d * h + h + b * 2 * (h * h + h) + h * out + out;
        prop_assert_eq!(count_params(&bb, false), expected);
        prop_assert_eq!(count_params(&bb, true), expected);
    }
}

fn small_levi(taps: Vec<usize>) -> LeviComposition {
    let bb = Backbone::new(BackboneConfig { input_dim: 3, hidden: 6, blocks: 3, output_dim: 2 }, &mut SeedPath::root(4).rng());
    let n = taps.len();
    let task = TaskModelConfig { widths: vec![5], output_dim: 4, ..TaskModelConfig::new(3) };
    let cfg = LeviConfig { taps, task: Some(task), head_width: 7, head_weights: HeadWeights::uniform(n) };
    LeviComposition::new(&bb, cfg, &mut SeedPath::root(5).rng()).unwrap()
}

#[test]
fn levi_prediction_is_invariant_to_head_order() {
    let c = small_levi(vec![1, 2, 3]);
    let x = tensor(4, 3, 9);
    let base = c.predict(&x).unwrap();
    let mut permuted = c.clone();
    permuted.taps = vec![3, 1, 2];
    permuted.heads = vec![c.heads[2].clone(), c.heads[0].clone(), c.heads[1].clone()];
    let other = permuted.predict(&x).unwrap();
    assert!(base.data().iter().zip(other.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn zero_weight_head_receives_no_gradient() {
    let mut c = small_levi(vec![1, 3]);
    c.set_head_weights(HeadWeights::new(vec![1.0, 0.0]).unwrap()).unwrap();
    let x = tensor(5, 3, 2);
    let y = classes(5, 2, 2);
    let mut g = Graph::new();
    let bind = c.store.bind(&mut g);
    let (xi, yi) = (g.input(x), g.input(y));
    let heads = c.head_outputs(&mut g, &bind, xi).unwrap();
    let l = levi_loss(&mut g, &heads, yi, c.head_weights(), LossSpec::SoftmaxXent).unwrap();
    let grads = g.backward(l).unwrap();
    for (id, p) in c.store.iter() {
        let gnorm: f64 = grads.get(bind.node(id)).map_or(0.0, |t| t.data().iter().map(|v| v.abs()).sum());
        if p.name.starts_with("heads.1.") {
            assert_eq!(gnorm, 0.0, "{}", p.name);
        } else if p.name.starts_with("heads.0.") {
            assert!(gnorm > 0.0, "{}", p.name);
        }
    }
}

#[test]
fn single_head_levi_loss_is_the_head_loss() {
    for seed in 0..20 {
        let p = tensor(6, 2, seed);
        let y = classes(6, 2, seed);
        let got = levi_loss_value(std::slice::from_ref(&p), &y, &HeadWeights::uniform(1), LossSpec::SoftmaxXent).unwrap();
        let mut g = Graph::new();
        let (pn, yn) = (g.input(p), g.input(y));
        let l = LossSpec::SoftmaxXent.build(&mut g, pn, yn).unwrap();
        assert_eq!(got.to_bits(), g.value(l).item().to_bits());
    }
}
