//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod ops;

use ens_transformer::autodiff::{Tape, Var};
use ens_transformer::models::{Model, ModelConfig};
use ens_transformer::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(rand_distr::StandardNormal))
}

/// Contracts a non-scalar output with fixed pseudo-random weights.
fn scalarize(tape: &mut Tape<f64>, out: Var) -> Var {
    if tape.value(out).numel() == 1 {
        return out;
    }
    let shape = tape.shape(out).to_vec();
    let mut r = rng(0xfeed);
    let w = tape.constant(uniform(&shape, -1.0, 1.0, &mut r));
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

fn loss_value(values: &[Tensor<f64>], f: &impl Fn(&mut Tape<f64>, &[Tensor<f64>]) -> (Vec<Var>, Var)) -> f64 {
    let mut tape = Tape::new();
    let (_, out) = f(&mut tape, values);
    let l = scalarize(&mut tape, out);
    tape.value(l).data()[0]
}

/// Largest relative error, over the given leaves, between the tape gradient
/// and central finite differences. `f` must create one leaf per entry of
/// `values` and return them with its output.
pub fn gradcheck(
    values: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Tensor<f64>]) -> (Vec<Var>, Var),
) -> f64 {
    let mut tape = Tape::new();
    let (leaves, out) = f(&mut tape, values);
    assert_eq!(leaves.len(), values.len());
    let l = scalarize(&mut tape, out);
    tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (t, leaf) in leaves.iter().enumerate() {
        let analytic = tape.grad(*leaf).expect("leaf reached by backward").clone();
        let mut numeric = vec![0.0; values[t].numel()];
        let mut probe = values.to_vec();
        for (e, n) in numeric.iter_mut().enumerate() {
            let x0 = values[t].data()[e];
            probe[t].data_mut()[e] = x0 + FD_STEP;
            let up = loss_value(&probe, &f);
            probe[t].data_mut()[e] = x0 - FD_STEP;
            let down = loss_value(&probe, &f);
            probe[t].data_mut()[e] = x0;
            *n = (up - down) / (2.0 * FD_STEP);
        }
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-8);
        let err = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(err / scale);
    }
    worst
}

/// Model with every parameter redrawn, so that zero-initialized projections
/// do not hide gradient paths.
pub fn randomized_model(config: ModelConfig, seed: u64) -> Model<f64> {
    let mut model = Model::<f64>::init(config, seed).unwrap();
    let mut r = rng(seed ^ 0xabcd);
    for p in model.store.iter_mut() {
        let shape = p.value.shape().to_vec();
        let fresh = if p.name.contains("gain") || p.name.ends_with("scale") {
            uniform(&shape, 0.5, 1.5, &mut r)
        } else {
            uniform(&shape, -0.5, 0.5, &mut r)
        };
        p.value = fresh;
    }
    model
}

/// Relative error of the full model loss gradient with respect to every
/// parameter and every input value.
pub fn model_gradcheck(model: &Model<f64>, inputs: &Tensor<f64>, target: &Tensor<f64>) -> f64 {
    let grid = ens_transformer::grid::Grid::new(target.shape()[0], target.shape()[1]).unwrap();
    let mut values: Vec<Tensor<f64>> = model.store.iter().map(|p| p.value.clone()).collect();
    values.push(inputs.clone());
    gradcheck(&values, |tape, vals| {
        let mut store = model.store.clone();
        for (p, v) in store.iter_mut().zip(vals) {
            p.value = v.clone();
        }
        let m = Model::from_store(model.config.clone(), store).unwrap();
        let bound = m.store.bind(tape, true);
        let x = tape.leaf(vals[vals.len() - 1].clone(), true);
        let (out, _) = m.forward(tape, &bound, x, false).unwrap();
        let loss = m.loss(tape, out, target, &grid).unwrap();
        let mut leaves: Vec<Var> = m.store.iter().map(|p| bound[m.store.id(&p.name).unwrap()]).collect();
        leaves.push(x);
        (leaves, loss)
    })
}

/// `int (F(t) - 1{t >= y})^2 dt` by composite Simpson on each side of `y`,
/// truncated 12 standard deviations away from both `mu` and `y`.
pub fn crps_by_quadrature(mu: f64, sigma: f64, y: f64) -> f64 {
    let dist = Normal::new(mu, sigma).unwrap();
    let lo = (mu - 12.0 * sigma).min(y - 12.0 * sigma);
    let hi = (mu + 12.0 * sigma).max(y + 12.0 * sigma);
    let left = |t: f64| dist.cdf(t).powi(2);
    let right = |t: f64| (1.0 - dist.cdf(t)).powi(2);
    simpson(left, lo, y, 20_000) + simpson(right, y, hi, 20_000)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}
