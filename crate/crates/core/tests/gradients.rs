//! Analytic gradients against central finite differences.

use proptest::prelude::*;

use vafl::model::{
    client_backprop, embed_forward, grad_embedding, grad_server, loss_forward, regularizer_grad, Activation,
    EmbeddingParams, LossKind, PerturbationSpec, RegularizerSpec, ServerHead,
};
use vafl::numerics::Rng;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * (1.0 + a.abs().max(b.abs()))
}

fn loss_kind(logistic: bool) -> LossKind {
    if logistic {
        LossKind::BinaryLogistic
    } else {
        LossKind::Squared
    }
}

fn head_and_embeddings(seed: u64, widths: &[usize], logistic: bool) -> (ServerHead, Vec<Vec<f64>>, f64) {
    let mut rng = Rng::new(seed, 0);
    let total: usize = widths.iter().sum();
    let w: Vec<f64> = (0..=total).map(|_| rng.standard_normal()).collect();
    let head = ServerHead::with_weights(widths, w, loss_kind(logistic), true).unwrap();
    let hs = widths
        .iter()
        .map(|&d| (0..d).map(|_| rng.standard_normal()).collect())
        .collect();
    let y = if logistic {
        if rng.uniform01() < 0.5 {
            1.0
        } else {
            -1.0
        }
    } else {
        rng.standard_normal()
    };
    (head, hs, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn server_gradient(seed in 0u64..10_000, widths in prop::collection::vec(1usize..4, 1..4), logistic: bool) {
        let (head, hs, y) = head_and_embeddings(seed, &widths, logistic);
        let cells: Vec<&[f64]> = hs.iter().map(Vec::as_slice).collect();
        let g = grad_server(&head, &cells, y).unwrap();
        let h = 1e-6;
        for j in 0..head.weights.len() {
            let mut hp = head.clone();
            hp.weights[j] += h;
            let mut hm = head.clone();
            hm.weights[j] -= h;
            let fd = (loss_forward(&hp, &cells, y).unwrap() - loss_forward(&hm, &cells, y).unwrap()) / (2.0 * h);
            prop_assert!(close(fd, g[j], 1e-5), "coordinate {j}: fd {fd} analytic {}", g[j]);
        }
    }

    #[test]
    fn embedding_gradient(seed in 0u64..10_000, widths in prop::collection::vec(1usize..4, 1..4), logistic: bool) {
        let (head, hs, y) = head_and_embeddings(seed, &widths, logistic);
        let h = 1e-6;
        for m in 0..widths.len() {
            let cells: Vec<&[f64]> = hs.iter().map(Vec::as_slice).collect();
            let g = grad_embedding(&head, &cells, y, m).unwrap();
            for j in 0..widths[m] {
                let eval = |d: f64| {
                    let mut moved = hs.clone();
                    moved[m][j] += d;
                    let c: Vec<&[f64]> = moved.iter().map(Vec::as_slice).collect();
                    loss_forward(&head, &c, y).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                prop_assert!(close(fd, g[j], 1e-5));
            }
        }
    }

    #[test]
    fn backprop_through_noisy_relu_net(seed in 0u64..10_000, hidden in 1usize..6, out in 1usize..3, noise in 0.0f64..0.5) {
        let mut rng = Rng::new(seed, 1);
        let mut params = EmbeddingParams::mlp(3, &[hidden], out, Activation::Relu, Activation::Identity, true);
        params.init_random(&mut rng);
        for l in &mut params.layers {
            l.b.iter_mut().for_each(|b| *b = 0.3 * rng.standard_normal());
        }
        let pert = PerturbationSpec { hidden_stds: vec![noise], output_std: noise };
        let x: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
        let g_h: Vec<f64> = (0..out).map(|_| rng.standard_normal()).collect();
        let noise_rng = Rng::new(seed, 2);
        let (_, tape) = embed_forward(&params, &x, &pert, &mut noise_rng.clone()).unwrap();
        // Finite differences are meaningless across a ReLU kink.
        prop_assume!(tape.pre[0].iter().all(|p| p.abs() > 1e-3));
        let analytic = client_backprop(&params, &tape, &g_h).unwrap().to_flat(&params);
        let theta = params.flatten();
        let h = 1e-7;
        for j in 0..theta.len() {
            let eval = |d: f64| {
                let mut p = params.clone();
                let mut t = theta.clone();
                t[j] += d;
                p.set_flat(&t).unwrap();
                let (out, _) = embed_forward(&p, &x, &pert, &mut noise_rng.clone()).unwrap();
                out.iter().zip(&g_h).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            prop_assert!(close(fd, analytic[j], 1e-4), "parameter {j}: fd {fd} analytic {}", analytic[j]);
        }
    }

    #[test]
    fn regularizer_gradient(coef in 0.0f64..1.0, theta in prop::collection::vec(-3.0f64..3.0, 1..8)) {
        let spec = RegularizerSpec::l2(coef);
        let g = regularizer_grad(&spec, &theta);
        let h = 1e-6;
        for j in 0..theta.len() {
            let mut p = theta.clone();
            p[j] += h;
            let mut m = theta.clone();
            m[j] -= h;
            let fd = (spec.value(&p) - spec.value(&m)) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() <= 1e-6);
        }
    }
}

#[test]
fn frozen_head_has_no_server_gradient() {
    let (mut head, hs, y) = head_and_embeddings(3, &[2, 1], true);
    head.trainable = false;
    let cells: Vec<&[f64]> = hs.iter().map(Vec::as_slice).collect();
    assert!(grad_server(&head, &cells, y).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn logistic_server_gradient_at_zero_head() {
    let head = ServerHead::zeros(&[2], LossKind::BinaryLogistic, true);
    let h = [0.7, -1.2];
    let g = grad_server(&head, &[&h], 1.0).unwrap();
    assert_eq!(g, vec![-0.35, 0.6, -0.5]);
}
