//! Shared test utilities: random tensors and the central finite-difference
//! gradient oracle. The oracle only ever evaluates forward losses, so it is
//! independent of the backward implementation it checks.

// each integration test binary links this module; not all use every item
#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

use lexgrad::graph::Var;
use lexgrad::{Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-4;
/// Central differences with step 1e-3 carry O(step^2) truncation error, so
/// sub-1e-6 gradient entries cannot be compared relatively.
pub const FD_ABS_TOL: f64 = 1e-6;

/// Builds a scalar loss from the given parameter tensors; returns the loss
/// var and the bound parameter vars in order.
pub type BuildFn<'a> = &'a dyn Fn(&mut Graph, &[Tensor]) -> (Var, Vec<Var>);

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Uniform in +-[margin, 1]; keeps ReLU/max inputs away from their kinks.
pub fn rand_tensor_off_kink(shape: &[usize], rng: &mut ChaCha8Rng, margin: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let mag = rng.random_range(margin..1.0);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn eval_loss(build: BuildFn, params: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let (loss, _) = build(&mut g, params);
    g.value(loss).data()[0]
}

/// Central finite differences against the recorded backward pass. Panics on
/// the first element whose analytic/numeric mismatch exceeds both the
/// absolute floor and the relative tolerance.
pub fn grad_check(name: &str, build: BuildFn, params: &[Tensor]) {
    let marked: Vec<Tensor> = params
        .iter()
        .map(|t| {
            let mut c = t.clone();
            c.requires_grad = true;
            c
        })
        .collect();

    let mut g = Graph::new();
    let (loss, pvars) = build(&mut g, &marked);
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = pvars
        .iter()
        .map(|&v| g.grad(v).expect("parameter gradient").to_vec())
        .collect();

    for p in 0..marked.len() {
        for j in 0..marked[p].numel() {
            let mut plus = marked.clone();
            plus[p].data_mut()[j] += FD_STEP;
            let mut minus = marked.clone();
            minus[p].data_mut()[j] -= FD_STEP;
            let numeric = (eval_loss(build, &plus) - eval_loss(build, &minus)) / (2.0 * FD_STEP);
            let a = analytic[p][j];
            let diff = (a - numeric).abs();
            let rel = diff / a.abs().max(numeric.abs()).max(1e-12);
            assert!(
                diff <= FD_ABS_TOL || rel <= FD_REL_TOL,
                "{name}: grad mismatch at param {p} elem {j}: analytic {a}, numeric {numeric} (rel {rel:.3e})"
            );
        }
    }
}

/// Copy a flat snapshot back into a model's named tensors.
pub fn write_named(targets: &mut [(String, &mut Tensor)], values: &[Tensor]) {
    assert_eq!(targets.len(), values.len());
    for ((_, t), v) in targets.iter_mut().zip(values) {
        t.data_mut().copy_from_slice(v.data());
    }
}

/// Finite-difference check for a whole model: `loss_of` rebuilds the model
/// from a flat tensor list and returns the scalar loss; `analytic` is the
/// recorded gradient in the same order.
pub fn model_grad_check(
    name: &str,
    flat: &[Tensor],
    analytic: &[Vec<f64>],
    loss_of: &dyn Fn(&[Tensor]) -> f64,
) {
    assert_eq!(flat.len(), analytic.len());
    for p in 0..flat.len() {
        assert_eq!(flat[p].numel(), analytic[p].len());
        for j in 0..flat[p].numel() {
            let mut plus: Vec<Tensor> = flat.to_vec();
            plus[p].data_mut()[j] += FD_STEP;
            let mut minus: Vec<Tensor> = flat.to_vec();
            minus[p].data_mut()[j] -= FD_STEP;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * FD_STEP);
            let a = analytic[p][j];
            let diff = (a - numeric).abs();
            let rel = diff / a.abs().max(numeric.abs()).max(1e-12);
            assert!(
                diff <= FD_ABS_TOL || rel <= FD_REL_TOL,
                "{name}: grad mismatch at tensor {p} elem {j}: analytic {a}, numeric {numeric} (rel {rel:.3e})"
            );
        }
    }
}
