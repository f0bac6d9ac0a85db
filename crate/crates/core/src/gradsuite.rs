//! Finite-difference checks for every differentiable op on the tape and for
//! the complete training loss of a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::InteractionSequence;
use crate::error::Result;
use crate::model::{Ablation, Model, PADDING};
use crate::numerics::gradcheck::compare_gradient;
use crate::numerics::{grad_check, GradCheckReport, Tensor};
use crate::trainer::{loss_and_grad, Hyperparameters, TrainingExample};

/// Default relative-error tolerance.
pub const TOLERANCE: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Values bounded away from zero, for ops with a kink there.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|x| if x >= 0.0 { 0.1 + x } else { x - 0.1 })
}

/// Per-op checks on random inputs.
pub fn op_checks(seed: u64, tol: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mask = [true, true, false, true, false];
    let mut out = Vec::new();

    let (a, b) = (random(r, &[3, 4]), random(r, &[4, 2]));
    out.push(grad_check("matmul", &[a.clone(), b.clone()], tol, |t, v| t.matmul(v[0], v[1]))?);
    out.push(grad_check("matmul_canonical", &[a, b], tol, |t, v| t.matmul_canonical(v[0], v[1]))?);
    let (a, b) = (random(r, &[3, 4]), random(r, &[3, 4]));
    out.push(grad_check("add", &[a.clone(), b.clone()], tol, |t, v| t.add(v[0], v[1]))?);
    out.push(grad_check("mul", &[a.clone(), b], tol, |t, v| t.mul(v[0], v[1]))?);
    out.push(grad_check("scale", std::slice::from_ref(&a), tol, |t, v| Ok(t.scale(v[0], -1.7)))?);
    out.push(grad_check("sigmoid", std::slice::from_ref(&a), tol, |t, v| Ok(t.sigmoid(v[0])))?);
    out.push(grad_check("tanh", std::slice::from_ref(&a), tol, |t, v| Ok(t.tanh(v[0])))?);
    out.push(grad_check("transpose", std::slice::from_ref(&a), tol, |t, v| Ok(t.transpose(v[0])))?);
    out.push(grad_check("row", std::slice::from_ref(&a), tol, |t, v| Ok(t.row(v[0], 1)))?);
    let k = off_kink(r, &[3, 4]);
    out.push(grad_check("relu", std::slice::from_ref(&k), tol, |t, v| Ok(t.relu(v[0])))?);
    out.push(grad_check("leaky_relu", &[k], tol, |t, v| Ok(t.leaky_relu(v[0], 0.01)))?);

    let s = random(r, &[2, 5]);
    out.push(grad_check("softmax", std::slice::from_ref(&s), tol, |t, v| t.softmax(v[0], None))?);
    out.push(grad_check("softmax_masked", &[s], tol, |t, v| t.softmax(v[0], Some(&mask)))?);
    out.push(grad_check("squash", &[random(r, &[4])], tol, |t, v| Ok(t.squash(v[0])))?);
    out.push(grad_check("squash_rows", &[random(r, &[3, 4])], tol, |t, v| Ok(t.squash(v[0])))?);
    out.push(grad_check("row_dots", &[random(r, &[5, 3]), random(r, &[3])], tol, |t, v| {
        t.row_dots(v[0], v[1])
    })?);

    let (items, user) = (random(r, &[5, 3]), random(r, &[3]));
    out.push(grad_check("user_adjacency", &[items.clone(), user.clone()], tol, |t, v| {
        t.user_adjacency(v[0], v[1], &mask)
    })?);
    let adj = random(r, &[5, 5]).map(|x| 0.2 + x.abs());
    let sym = Tensor::new(
        vec![5, 5],
        (0..25).map(|i| 0.5 * (adj.at(i / 5, i % 5) + adj.at(i % 5, i / 5))).collect(),
    )?;
    out.push(grad_check("propagation", std::slice::from_ref(&sym), tol, |t, v| t.propagation(v[0], &mask))?);
    out.push(grad_check("l1_mean", &[sym], tol, |t, v| t.l1_mean(v[0], &mask))?);
    out.push(grad_check("adjacency_to_propagation", &[items, user], tol, |t, v| {
        let a = t.user_adjacency(v[0], v[1], &mask)?;
        t.propagation(a, &mask)
    })?);

    let lstm_in = [random(r, &[5, 3]), random(r, &[3, 8]), random(r, &[2, 8]), random(r, &[8])];
    for (name, reverse) in [("lstm_forward", false), ("lstm_reverse", true)] {
        out.push(grad_check(name, &lstm_in, tol, |t, v| t.lstm(v[0], v[1], v[2], v[3], &mask, reverse))?);
    }

    out.push(grad_check("concat_cols", &[random(r, &[3, 2]), random(r, &[3, 4])], tol, |t, v| {
        t.concat_cols(v[0], v[1])
    })?);
    out.push(grad_check("concat", &[random(r, &[2]), random(r, &[3])], tol, |t, v| t.concat(&[v[0], v[1]]))?);
    out.push(grad_check("mask_rows", &[random(r, &[5, 2])], tol, |t, v| t.mask_rows(v[0], &mask))?);
    out.push(grad_check("stack_rows", &[random(r, &[3]), random(r, &[3])], tol, |t, v| {
        t.stack_rows(&[v[0], v[1], v[0]])
    })?);
    out.push(grad_check("sum", &[random(r, &[1]), random(r, &[1])], tol, |t, v| t.sum(&[v[0], v[1], v[1]]))?);
    let logit = random(r, &[1]).map(|x| 3.0 * x);
    out.push(grad_check("bce_positive", std::slice::from_ref(&logit), tol, |t, v| Ok(t.bce_with_logits(v[0], 1.0)))?);
    out.push(grad_check("bce_negative", &[logit], tol, |t, v| Ok(t.bce_with_logits(v[0], 0.0)))?);
    Ok(out)
}

/// Hyperparameters of the small model used by [`full_loss_check`]:
/// d=4, m=5, K=2, L=2, τ=2.
pub fn small_hyperparameters() -> Hyperparameters {
    Hyperparameters {
        embedding_dim: 4,
        capacity: 5,
        interests: 2,
        layers: 2,
        tau: 2,
        theta1: 1e-2,
        theta2: 1e-3,
        train_negatives: 2,
        ..Hyperparameters::default()
    }
}

/// Checks the gradient of the full batch loss with respect to every
/// trainable coordinate (the frozen padding row excluded) for a random
/// model with the given wiring.
pub fn full_loss_check(ablation: Ablation, seed: u64, tol: f64) -> Result<GradCheckReport> {
    let hp = small_hyperparameters();
    let (users, items) = (3, 9);
    let model = Model::new(hp.model_config(users, items, ablation), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let sequences: Vec<InteractionSequence> = (0..2)
        .map(|u| {
            let valid = rng.gen_range(2..=hp.capacity);
            let mut hist: Vec<u32> = (0..valid).map(|_| rng.gen_range(1..=items as u32)).collect();
            hist.resize(hp.capacity, PADDING);
            InteractionSequence {
                user_index: u,
                item_indices: hist,
                valid_length: valid as u32,
                target_item: rng.gen_range(1..=items as u32),
                target_timestamp: None,
            }
        })
        .collect();
    let batch: Vec<TrainingExample> = sequences
        .iter()
        .enumerate()
        .map(|(i, s)| TrainingExample {
            sequence: s,
            negatives: vec![1 + (i as u32 * 3) % items as u32, 1 + (i as u32 * 5 + 2) % items as u32],
            agreement_seed: seed + i as u64,
        })
        .collect();
    let (_, grads) = loss_and_grad(&model, &batch, &hp, true)?;
    let grads = grads.expect("gradients requested");
    let item = model.item_param();
    let d = model.config.dim;
    let coords: Vec<(usize, usize)> = model
        .params
        .tensors
        .iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.len()).map(move |i| (t, i)))
        .filter(|&(t, i)| !(t == item && i < d))
        .collect();
    let point: Vec<f64> = coords.iter().map(|&(t, i)| model.params.tensors[t].data()[i]).collect();
    let analytic: Vec<f64> = coords.iter().map(|&(t, i)| grads[t].data()[i]).collect();
    let mut probe = model.clone();
    compare_gradient(&format!("loss[{}]", ablation.name()), &point, &analytic, tol, |flat| {
        for (&(t, i), &v) in coords.iter().zip(flat) {
            probe.params.tensors[t].data_mut()[i] = v;
        }
        Ok(loss_and_grad(&probe, &batch, &hp, false)?.0.total)
    })
}

/// Every op check followed by the full loss under each wiring.
pub fn run_suite(seed: u64, tol: f64) -> Result<Vec<GradCheckReport>> {
    let mut reports = op_checks(seed, tol)?;
    for ablation in Ablation::ALL {
        reports.push(full_loss_check(ablation, seed, tol)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_two_seeds() {
        for seed in [1, 2] {
            for r in run_suite(seed, TOLERANCE).unwrap() {
                assert!(r.passed, "{r:?}");
                assert!(r.coordinates > 0);
            }
        }
    }
}
