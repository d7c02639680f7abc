//! Full-batch evaluation of the training objective
//! `F = (1/N) sum_n loss(theta_0, h_n1..h_nM; y_n) + sum_m r(theta_m)`.

use crate::data::{Task, VerticalDataset};
use crate::error::{model_err, Result};
use crate::model::{
    backprop_accumulate, embed_forward, regularizer_grad, EmbeddingParams, ForwardTape, LossKind, PerturbationSpec,
    RegularizerSpec, ServerHead,
};
use crate::numerics::{norm_sq, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct FullGradient {
    pub loss: f64,
    /// Zero when the head is frozen.
    pub head: Vec<f64>,
    pub clients: Vec<Vec<f64>>,
}

impl FullGradient {
    /// `|grad F|^2` over the trainable blocks.
    pub fn norm_sq(&self, head_trainable: bool) -> f64 {
        let h = if head_trainable { norm_sq(&self.head) } else { 0.0 };
        h + self.clients.iter().map(|g| norm_sq(g)).sum::<f64>()
    }
}

fn check(head: &ServerHead, params: &[&EmbeddingParams], data: &VerticalDataset) -> Result<()> {
    if params.len() != data.n_clients() || params.len() != head.num_clients() {
        return Err(model_err!(
            "{} embeddings, {} data blocks and a head for {} clients",
            params.len(),
            data.n_clients(),
            head.num_clients()
        ));
    }
    for (m, p) in params.iter().enumerate() {
        if p.input_dim() != data.block(m).cols() || p.output_dim() != head.client_widths()[m] {
            return Err(model_err!("client {m} embedding does not fit its data block or head block"));
        }
    }
    Ok(())
}

fn regularization(params: &[&EmbeddingParams], reg: &RegularizerSpec) -> f64 {
    params.iter().map(|p| reg.value(&p.flatten())).sum()
}

/// Clean objective value.
pub fn full_loss(head: &ServerHead, params: &[&EmbeddingParams], data: &VerticalDataset, reg: &RegularizerSpec) -> Result<f64> {
    check(head, params, data)?;
    let n = data.n_samples();
    let mut total = 0.0;
    let mut hs: Vec<Vec<f64>> = Vec::with_capacity(params.len());
    for i in 0..n {
        hs.clear();
        hs.extend(params.iter().enumerate().map(|(m, p)| p.forward_clean(data.block(m).row(i))));
        let cells: Vec<&[f64]> = hs.iter().map(Vec::as_slice).collect();
        total += head.loss.value(head.logit(&cells), data.labels()[i]);
    }
    Ok(total / n as f64 + regularization(params, reg))
}

/// Clean objective value and gradient in every block.
pub fn full_gradient(
    head: &ServerHead,
    params: &[&EmbeddingParams],
    data: &VerticalDataset,
    reg: &RegularizerSpec,
) -> Result<FullGradient> {
    check(head, params, data)?;
    let n = data.n_samples();
    let scale = 1.0 / n as f64;
    let silent: Vec<PerturbationSpec> = params.iter().map(|p| PerturbationSpec::none(p.depth())).collect();
    let mut unused = Rng::new(0, 0);
    let mut g_head = vec![0.0; head.weights.len()];
    let mut g_clients: Vec<Vec<f64>> = params.iter().map(|p| regularizer_grad(reg, &p.flatten())).collect();
    let mut total = 0.0;
    let mut tapes: Vec<ForwardTape> = Vec::with_capacity(params.len());
    for i in 0..n {
        tapes.clear();
        for (m, p) in params.iter().enumerate() {
            tapes.push(embed_forward(p, data.block(m).row(i), &silent[m], &mut unused)?.1);
        }
        let cells: Vec<&[f64]> = tapes.iter().map(|t| t.output()).collect();
        let y = data.labels()[i];
        let z = head.logit(&cells);
        total += head.loss.value(z, y);
        let dz = head.loss.dz(z, y);
        if head.trainable {
            let mut at = 0;
            for h in &cells {
                for (g, v) in g_head[at..at + h.len()].iter_mut().zip(h.iter()) {
                    *g += scale * dz * v;
                }
                at += h.len();
            }
            g_head[at] += scale * dz;
        }
        for (m, p) in params.iter().enumerate() {
            let gh: Vec<f64> = head.block(m).iter().map(|w| dz * w).collect();
            backprop_accumulate(p, &tapes[m], &gh, scale, &mut g_clients[m]);
        }
    }
    Ok(FullGradient {
        loss: total * scale + regularization(params, reg),
        head: g_head,
        clients: g_clients,
    })
}

/// Accuracy for logistic tasks, mean squared error for regression.
pub fn test_metric(head: &ServerHead, params: &[&EmbeddingParams], data: &VerticalDataset, task: Task) -> Result<f64> {
    check(head, params, data)?;
    let n = data.n_samples();
    if n == 0 {
        return Ok(f64::NAN);
    }
    let mut acc = 0.0;
    for i in 0..n {
        let hs: Vec<Vec<f64>> = params
            .iter()
            .enumerate()
            .map(|(m, p)| p.forward_clean(data.block(m).row(i)))
            .collect();
        let cells: Vec<&[f64]> = hs.iter().map(Vec::as_slice).collect();
        let z = head.logit(&cells);
        let y = data.labels()[i];
        acc += match task {
            Task::Logistic => f64::from(u8::from(z * y > 0.0)),
            Task::Regression => (z - y) * (z - y),
        };
    }
    Ok(acc / n as f64)
}

/// Monte Carlo estimate of the smoothed objective over `draws` noise draws.
pub fn smoothed_loss(
    head: &ServerHead,
    params: &[&EmbeddingParams],
    perts: &[PerturbationSpec],
    data: &VerticalDataset,
    reg: &RegularizerSpec,
    draws: usize,
    rng: &mut Rng,
) -> Result<f64> {
    check(head, params, data)?;
    if perts.len() != params.len() {
        return Err(model_err!("need one perturbation spec per client"));
    }
    let n = data.n_samples();
    let draws = draws.max(1);
    let mut total = 0.0;
    for _ in 0..draws {
        for i in 0..n {
            let mut hs = Vec::with_capacity(params.len());
            for (m, p) in params.iter().enumerate() {
                hs.push(embed_forward(p, data.block(m).row(i), &perts[m], rng)?.0);
            }
            let cells: Vec<&[f64]> = hs.iter().map(Vec::as_slice).collect();
            total += head.loss.value(head.logit(&cells), data.labels()[i]);
        }
    }
    Ok(total / (draws * n) as f64 + regularization(params, reg))
}

/// Loss kind matching a task.
pub fn loss_for(task: Task) -> LossKind {
    match task {
        Task::Logistic => LossKind::BinaryLogistic,
        Task::Regression => LossKind::Squared,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};

    fn fixture() -> (ServerHead, Vec<EmbeddingParams>, VerticalDataset) {
        let data = gen_synthetic(&SyntheticSpec {
            n: 30,
            p: 4,
            clients: 2,
            task: Task::Logistic,
            noise_std: 0.0,
            seed: 3,
        })
        .unwrap();
        let mut rng = Rng::new(5, 5);
        let params: Vec<EmbeddingParams> = (0..2)
            .map(|_| {
                let mut p = EmbeddingParams::mlp(2, &[3], 2, crate::model::Activation::Tanh, crate::model::Activation::Identity, true);
                p.init_random(&mut rng);
                p
            })
            .collect();
        let w: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
        let head = ServerHead::with_weights(&[2, 2], w, LossKind::BinaryLogistic, true).unwrap();
        (head, params, data)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (head, params, data) = fixture();
        let reg = RegularizerSpec::l2(0.01);
        let refs: Vec<&EmbeddingParams> = params.iter().collect();
        let g = full_gradient(&head, &refs, &data, &reg).unwrap();
        assert!((g.loss - full_loss(&head, &refs, &data, &reg).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        for j in 0..head.weights.len() {
            let mut hp = head.clone();
            hp.weights[j] += h;
            let mut hm = head.clone();
            hm.weights[j] -= h;
            let fd = (full_loss(&hp, &refs, &data, &reg).unwrap() - full_loss(&hm, &refs, &data, &reg).unwrap()) / (2.0 * h);
            assert!((fd - g.head[j]).abs() < 1e-7);
        }
        for m in 0..2 {
            let theta = params[m].flatten();
            for j in 0..theta.len() {
                let eval = |d: f64| {
                    let mut p = params.clone();
                    let mut t = theta.clone();
                    t[j] += d;
                    p[m].set_flat(&t).unwrap();
                    let r: Vec<&EmbeddingParams> = p.iter().collect();
                    full_loss(&head, &r, &data, &reg).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - g.clients[m][j]).abs() < 1e-7, "client {m} coord {j}");
            }
        }
    }

    #[test]
    fn frozen_head_excluded_from_norm() {
        let (mut head, params, data) = fixture();
        head.trainable = false;
        let refs: Vec<&EmbeddingParams> = params.iter().collect();
        let g = full_gradient(&head, &refs, &data, &RegularizerSpec::l2(0.0)).unwrap();
        assert!(g.head.iter().all(|&v| v == 0.0));
        let c: f64 = g.clients.iter().map(|v| norm_sq(v)).sum();
        assert_eq!(g.norm_sq(false), c);
    }

    #[test]
    fn smoothed_loss_without_noise_equals_clean() {
        let (head, params, data) = fixture();
        let refs: Vec<&EmbeddingParams> = params.iter().collect();
        let reg = RegularizerSpec::l2(0.0);
        let perts = vec![PerturbationSpec::none(2); 2];
        let a = smoothed_loss(&head, &refs, &perts, &data, &reg, 3, &mut Rng::new(1, 1)).unwrap();
        let b = full_loss(&head, &refs, &data, &reg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
