//! Gradient-check cases for every tape op and the full model pipelines.

use ens_transformer::autodiff::{Tape, Var};
use ens_transformer::models::{ModelConfig, Variant};
use ens_transformer::tensor::Tensor;

use super::{gradcheck, model_gradcheck, normal, randomized_model, rng, uniform};

pub type Build = fn(&mut Tape<f64>, &[Var]) -> Var;

pub struct OpCase {
    pub name: &'static str,
    shapes: Vec<Vec<usize>>,
    positive: Vec<bool>,
    build: Build,
}

const X: &[usize] = &[3, 2, 4, 8];

fn case(v: &mut Vec<OpCase>, name: &'static str, shapes: &[&[usize]], positive: &[bool], build: Build) {
    v.push(OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        positive: positive.to_vec(),
        build,
    });
}

pub fn op_cases() -> Vec<OpCase> {
    let mut v = Vec::new();
    case(&mut v, "add", &[X, X], &[false, false], |t, x| t.add(x[0], x[1]).unwrap());
    case(&mut v, "sub", &[X, X], &[false, false], |t, x| t.sub(x[0], x[1]).unwrap());
    case(&mut v, "mul", &[X, X], &[false, false], |t, x| t.mul(x[0], x[1]).unwrap());
    case(&mut v, "scale", &[X], &[false], |t, x| t.scale(x[0], -1.7));
    case(&mut v, "add_scalar", &[X], &[false], |t, x| t.add_scalar(x[0], 0.3));
    case(&mut v, "exp", &[X], &[false], |t, x| t.exp(x[0]));
    case(&mut v, "relu", &[X], &[false], |t, x| t.relu(x[0]));
    case(&mut v, "softplus", &[X], &[false], |t, x| t.softplus(x[0]));
    case(&mut v, "clamp_min", &[X], &[false], |t, x| t.clamp_min(x[0], 0.1));

    case(&mut v, "sum_axes", &[X], &[false], |t, x| t.sum_axes(x[0], &[0, 2]).unwrap());
    case(&mut v, "mean_axes", &[X], &[false], |t, x| t.mean_axes(x[0], &[1, 3]).unwrap());
    case(&mut v, "sum", &[X], &[false], |t, x| t.sum(x[0]).unwrap());
    case(&mut v, "mean", &[X], &[false], |t, x| t.mean(x[0]).unwrap());
    case(&mut v, "mean_members", &[X], &[false], |t, x| t.mean_members(x[0]).unwrap());
    case(&mut v, "std_members", &[X], &[false], |t, x| t.std_members(x[0], 1).unwrap());
    case(&mut v, "std_members_ddof0", &[X], &[false], |t, x| t.std_members(x[0], 0).unwrap());
    case(&mut v, "lat_weighted_mean", &[X], &[false], |t, x| {
        let w = ens_transformer::grid::Grid::new(4, 8).unwrap().lat_weights_as::<f64>();
        t.lat_weighted_mean(x[0], &w).unwrap()
    });

    case(&mut v, "concat_channels", &[X, &[3, 1, 4, 8]], &[false, false], |t, x| {
        t.concat_channels(&[x[0], x[1]]).unwrap()
    });
    case(&mut v, "select_channel", &[X], &[false], |t, x| t.select_channel(x[0], 1).unwrap());
    case(&mut v, "channel_project", &[X, &[2, 3]], &[false, false], |t, x| {
        t.channel_project(x[0], x[1]).unwrap()
    });
    case(&mut v, "add_channel_bias", &[X, &[2]], &[false, false], |t, x| {
        t.add_channel_bias(x[0], x[1]).unwrap()
    });
    case(&mut v, "scale_by", &[X, &[1]], &[false, false], |t, x| t.scale_by(x[0], x[1]).unwrap());

    case(&mut v, "conv2d_5x5", &[X, &[3, 2, 5, 5], &[3]], &[false, false, false], |t, x| {
        t.conv2d_5x5(x[0], x[1], x[2]).unwrap()
    });
    case(&mut v, "layer_norm", &[X, &[2], &[2]], &[false, true, false], |t, x| {
        t.layer_norm(x[0], x[1], x[2], 1e-5).unwrap()
    });

    case(&mut v, "attention_weights", &[X, X], &[false, false], |t, x| {
        t.attention_weights(x[0], x[1]).unwrap()
    });
    case(&mut v, "transform_members", &[X, &[3, 3, 2]], &[false, true], |t, x| {
        t.transform_members(x[0], x[1]).unwrap()
    });
    case(&mut v, "attention_chain", &[X, X, X], &[false, false, false], |t, x| {
        let w = t.attention_weights(x[0], x[1]).unwrap();
        t.transform_members(x[2], w).unwrap()
    });

    case(&mut v, "gaussian_crps", &[&[4, 8], &[4, 8]], &[false, true], |t, x| {
        let y = Tensor::from_fn(&[4, 8], |i| (i as f64 * 0.37).sin());
        t.gaussian_crps(x[0], x[1], &y).unwrap()
    });
    v
}

/// Worst relative error of one op over `draws` random inputs.
pub fn op_error(op: &OpCase, draws: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for draw in 0..draws {
        let mut r = rng(draw * 7919 + op.name.len() as u64);
        let vals: Vec<Tensor<f64>> = op
            .shapes
            .iter()
            .zip(&op.positive)
            .map(|(s, &pos)| if pos { uniform(s, 0.3, 2.0, &mut r) } else { normal(s, &mut r) })
            .collect();
        let err = gradcheck(&vals, |tape, v| {
            let l: Vec<Var> = v.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let out = (op.build)(tape, &l);
            (l, out)
        });
        worst = worst.max(err);
    }
    worst
}

/// Worst relative error of a one-layer model at k=4, c=3, two heads, 4x8,
/// over parameters, inputs and `draws` random draws.
pub fn pipeline_error(variant: Variant, draws: u64) -> f64 {
    let (k, h, w) = (4, 4, 8);
    let mut worst: f64 = 0.0;
    for draw in 0..draws {
        let cfg = ModelConfig::new(variant, 1, h, w).with_width(3, 2);
        let model = randomized_model(cfg, draw);
        let mut r = rng(1000 + draw);
        let inputs = normal(&[k, 3, h, w], &mut r);
        let target = normal(&[h, w], &mut r);
        worst = worst.max(model_gradcheck(&model, &inputs, &target));
    }
    worst
}
