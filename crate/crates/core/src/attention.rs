//! Self-attention across ensemble members.
//!
//! Every member is updated with a convex combination of value perturbations
//! (member value minus ensemble-mean value). The combination weights come
//! from a softmax over scaled dot products between keys and queries, taken
//! over the whole grid separately for every head:
//!
//! ```text
//! logits[i,j,m] = sum_{y,x} K[j,m,y,x] Q[i,m,y,x] / sqrt(h w)
//! w[i,.,m]      = softmax_j(logits[i,.,m])
//! t_i           = v_i + sum_j w[i,j,m] (v_j - mean(v))
//! Z_next        = relu(Z + T W_o)
//! ```
//!
//! Because the weights live in member space the cost grows with the square of
//! the ensemble size, and the same parameters accept any ensemble size.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Dims4;
use crate::param::{Bound, ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Layer-norm epsilon used inside every attention module.
pub const LAYER_NORM_EPS: f64 = 1e-5;

// ---- kernels ----------------------------------------------------------------

/// Weights laid out as `[target i, source j, head m]`.
pub(crate) fn weights_forward<T: Scalar>(keys: &[T], queries: &[T], d: Dims4) -> Vec<T> {
    let (k, heads, p) = (d.k, d.c, d.plane());
    let scale = T::one() / T::from_usize(p).unwrap().sqrt();
    let mut w = vec![T::zero(); k * k * heads];
    let mut row = vec![T::zero(); k];
    for i in 0..k {
        for m in 0..heads {
            let q = &queries[(i * heads + m) * p..(i * heads + m + 1) * p];
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &keys[(j * heads + m) * p..(j * heads + m + 1) * p];
                *r = kj.iter().zip(q).map(|(&a, &b)| a * b).sum::<T>() * scale;
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                total += *r;
            }
            for (j, &r) in row.iter().enumerate() {
                w[(i * k + j) * heads + m] = r / total;
            }
        }
    }
    w
}

pub(crate) fn weights_backward<T: Scalar>(
    keys: &[T],
    queries: &[T],
    weights: &[T],
    d: Dims4,
    gw: &[T],
) -> (Vec<T>, Vec<T>) {
    let (k, heads, p) = (d.k, d.c, d.plane());
    let scale = T::one() / T::from_usize(p).unwrap().sqrt();
    let mut dk = vec![T::zero(); keys.len()];
    let mut dq = vec![T::zero(); queries.len()];
    let mut dlogit = vec![T::zero(); k];
    for i in 0..k {
        for m in 0..heads {
            let at = |j: usize| (i * k + j) * heads + m;
            let dot: T = (0..k).map(|j| weights[at(j)] * gw[at(j)]).sum();
            for (j, dl) in dlogit.iter_mut().enumerate() {
                *dl = weights[at(j)] * (gw[at(j)] - dot) * scale;
            }
            let qi = (i * heads + m) * p;
            for (j, &dl) in dlogit.iter().enumerate() {
                if dl == T::zero() {
                    continue;
                }
                let kj = (j * heads + m) * p;
                for t in 0..p {
                    dk[kj + t] += dl * queries[qi + t];
                    dq[qi + t] += dl * keys[kj + t];
                }
            }
        }
    }
    (dk, dq)
}

fn member_mean_planes<T: Scalar>(values: &[T], d: Dims4) -> Vec<T> {
    let n = d.c * d.plane();
    let mut mean = vec![T::zero(); n];
    for i in 0..d.k {
        mean.iter_mut()
            .zip(&values[i * n..(i + 1) * n])
            .for_each(|(a, &v)| *a += v);
    }
    let kt = T::from_usize(d.k).unwrap();
    mean.iter_mut().for_each(|v| *v /= kt);
    mean
}

/// `out_i = v_i + sum_j w_ij (v_j - vbar)`, evaluated with row-centred weights
/// (identical in exact arithmetic since the perturbations sum to zero) so that
/// a uniform weight row contributes exactly nothing.
pub(crate) fn transform_forward<T: Scalar>(values: &[T], weights: &[T], d: Dims4) -> Vec<T> {
    let (k, heads, p) = (d.k, d.c, d.plane());
    let mean = member_mean_planes(values, d);
    let centred = centre_rows(weights, k, heads);
    let mut out = values.to_vec();
    let mut pert = vec![T::zero(); p];
    for m in 0..heads {
        let vbar = &mean[m * p..(m + 1) * p];
        for j in 0..k {
            let vj = &values[(j * heads + m) * p..(j * heads + m + 1) * p];
            pert.iter_mut()
                .zip(vj.iter().zip(vbar))
                .for_each(|(o, (&a, &b))| *o = a - b);
            for i in 0..k {
                let wt = centred[(i * k + j) * heads + m];
                if wt == T::zero() {
                    continue;
                }
                let dst = &mut out[(i * heads + m) * p..(i * heads + m + 1) * p];
                dst.iter_mut().zip(&pert).for_each(|(o, &v)| *o += wt * v);
            }
        }
    }
    out
}

/// Subtracts each row's mean over `j`, computed relative to the row minimum
/// so equal entries centre to exactly zero.
fn centre_rows<T: Scalar>(weights: &[T], k: usize, heads: usize) -> Vec<T> {
    let kt = T::from_usize(k).unwrap();
    let mut out = weights.to_vec();
    for i in 0..k {
        for m in 0..heads {
            let at = |j: usize| (i * k + j) * heads + m;
            let lo = (0..k).map(|j| weights[at(j)]).fold(T::infinity(), T::min);
            let mean = lo + (0..k).map(|j| weights[at(j)] - lo).sum::<T>() / kt;
            for j in 0..k {
                out[at(j)] = weights[at(j)] - mean;
            }
        }
    }
    out
}

pub(crate) fn transform_backward<T: Scalar>(
    values: &[T],
    weights: &[T],
    d: Dims4,
    gout: &[T],
) -> (Vec<T>, Vec<T>) {
    let (k, heads, p) = (d.k, d.c, d.plane());
    let mean = member_mean_planes(values, d);
    let inv_k = T::one() / T::from_usize(k).unwrap();
    let mut dv = gout.to_vec();
    let mut dw = vec![T::zero(); weights.len()];
    let mut centre = vec![T::zero(); p];
    for m in 0..heads {
        let plane = |i: usize| (i * heads + m) * p..(i * heads + m + 1) * p;
        // gradient reaching the ensemble mean through every row's weight sum
        centre.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..k {
            let rowsum: T = (0..k).map(|j| weights[(i * k + j) * heads + m]).sum();
            let g = &gout[plane(i)];
            centre.iter_mut().zip(g).for_each(|(c, &gv)| *c += rowsum * gv);
        }
        let vbar = &mean[m * p..(m + 1) * p];
        for j in 0..k {
            let vj = &values[plane(j)];
            let mut acc_dv = vec![T::zero(); p];
            for i in 0..k {
                let widx = (i * k + j) * heads + m;
                let g = &gout[plane(i)];
                let wt = weights[widx];
                let mut dot = T::zero();
                for t in 0..p {
                    acc_dv[t] += wt * g[t];
                    dot += g[t] * (vj[t] - vbar[t]);
                }
                dw[widx] = dot;
            }
            let dvj = &mut dv[plane(j)];
            for t in 0..p {
                dvj[t] += acc_dv[t] - inv_k * centre[t];
            }
        }
    }
    (dv, dw)
}

// ---- tensor-level API -------------------------------------------------------

fn check_pair<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Dims4> {
    if a.shape() != b.shape() || a.rank() != 4 {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(Dims4::from_shape(a.shape()))
}

/// Attention weights `[k, k, heads]` for keys and queries of shape `[k, heads, h, w]`.
pub fn attention_weights<T: Scalar>(keys: &Tensor<T>, queries: &Tensor<T>) -> Result<Tensor<T>> {
    let d = check_pair("attention_weights", keys, queries)?;
    Tensor::new(
        vec![d.k, d.k, d.c],
        weights_forward(keys.data(), queries.data(), d),
    )
}

/// Applies the weighted perturbation update to values of shape `[k, heads, h, w]`.
pub fn transform_members<T: Scalar>(values: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    if values.rank() != 4 {
        return Err(Error::dim("transform_members", values.shape(), weights.shape()));
    }
    let d = Dims4::from_shape(values.shape());
    if weights.shape() != [d.k, d.k, d.c] {
        return Err(Error::dim("transform_members", values.shape(), weights.shape()));
    }
    Tensor::new(
        values.shape().to_vec(),
        transform_forward(values.data(), weights.data(), d),
    )
}

/// Elementwise product of ensemble-mean key and ensemble-mean query, `[heads, h, w]`.
pub fn attention_map<T: Scalar>(keys: &Tensor<T>, queries: &Tensor<T>) -> Result<Tensor<T>> {
    let d = check_pair("attention_map", keys, queries)?;
    let kbar = member_mean_planes(keys.data(), d);
    let qbar = member_mean_planes(queries.data(), d);
    Tensor::new(
        vec![d.c, d.h, d.w],
        kbar.iter().zip(&qbar).map(|(&a, &b)| a * b).collect(),
    )
}

// ---- module -----------------------------------------------------------------

/// Parameters of one attention module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionModuleParams {
    pub w_v: ParamId,
    pub w_k: ParamId,
    pub w_q: ParamId,
    pub w_o: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub channels: usize,
    pub heads: usize,
}

/// Weights and attention map captured from one module evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDiagnostics<T> {
    /// `[target member, source member, head]`.
    pub weights: Tensor<T>,
    /// `[head, lat, lon]`.
    pub attn_map: Tensor<T>,
}

impl AttentionModuleParams {
    /// Registers a module under `prefix`. `W_o` starts at exactly zero, so a
    /// fresh module reduces to `relu(Z)`.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (1.0 / channels as f64).sqrt();
        Ok(Self {
            w_v: store.add_uniform(format!("{prefix}.w_v"), &[channels, heads], bound, rng)?,
            w_k: store.add_uniform(format!("{prefix}.w_k"), &[channels, heads], bound, rng)?,
            w_q: store.add_uniform(format!("{prefix}.w_q"), &[channels, heads], bound, rng)?,
            w_o: store.add_zeros(format!("{prefix}.w_o"), &[heads, channels])?,
            ln_gain: store.add(
                format!("{prefix}.ln_gain"),
                Tensor::full(&[channels], T::one()),
            )?,
            ln_bias: store.add_zeros(format!("{prefix}.ln_bias"), &[channels])?,
            channels,
            heads,
        })
    }

    /// Looks up a module registered by [`AttentionModuleParams::init`].
    pub fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::Checkpoint(format!("{prefix}.{n} missing")))
        };
        let w_v = get("w_v")?;
        let shape = store.get(w_v).value.shape().to_vec();
        Ok(Self {
            w_v,
            w_k: get("w_k")?,
            w_q: get("w_q")?,
            w_o: get("w_o")?,
            ln_gain: get("ln_gain")?,
            ln_bias: get("ln_bias")?,
            channels: shape[0],
            heads: shape[1],
        })
    }

    pub fn param_count(channels: usize, heads: usize) -> usize {
        4 * channels * heads + 2 * channels
    }

    /// One module step `Z -> relu(Z + T(LN(Z)) W_o)`.
    ///
    /// Diagnostics are only assembled when `capture` is set.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        z: Var,
        capture: bool,
    ) -> Result<(Var, Option<AttentionDiagnostics<T>>)> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dim("attention module", &shape, &[0, self.channels, 0, 0]));
        }
        if shape[0] < 2 {
            return Err(Error::EnsembleSize {
                op: "attention module",
                min: 2,
                got: shape[0],
            });
        }
        let normed = tape.layer_norm(
            z,
            bound[self.ln_gain],
            bound[self.ln_bias],
            lit(LAYER_NORM_EPS),
        )?;
        let values = tape.channel_project(normed, bound[self.w_v])?;
        let keys = tape.channel_project(normed, bound[self.w_k])?;
        let queries = tape.channel_project(normed, bound[self.w_q])?;
        let weights = tape.attention_weights(keys, queries)?;
        let transformed = tape.transform_members(values, weights)?;
        let branch = tape.channel_project(transformed, bound[self.w_o])?;
        let sum = tape.add(z, branch)?;
        let out = tape.relu(sum);
        let diag = if capture {
            Some(AttentionDiagnostics {
                weights: tape.value(weights).clone(),
                attn_map: attention_map(tape.value(keys), tape.value(queries))?,
            })
        } else {
            None
        };
        Ok((out, diag))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_keys_give_uniform_weights() {
        let k = Tensor::<f64>::zeros(&[4, 2, 2, 3]);
        let q = Tensor::from_fn(&[4, 2, 2, 3], |i| (i as f64).cos());
        let w = attention_weights(&k, &q).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn two_member_softmax_by_hand() {
        // h*w = 4, so logits are dot/2. Member 0's query against key 0 gives
        // ln 3 more than against key 1.
        let ln3 = 3f64.ln();
        let mut keys = Tensor::<f64>::zeros(&[2, 1, 2, 2]);
        let mut queries = Tensor::<f64>::zeros(&[2, 1, 2, 2]);
        keys.set(&[0, 0, 0, 0], 2.0 * ln3);
        queries.set(&[0, 0, 0, 0], 1.0);
        queries.set(&[1, 0, 0, 0], 1.0);
        let w = attention_weights(&keys, &queries).unwrap();
        assert!((w.get(&[0, 0, 0]) - 0.75).abs() < 1e-15);
        assert!((w.get(&[0, 1, 0]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn uniform_weights_pass_values_through() {
        let v = Tensor::from_fn(&[3, 2, 2, 2], |i| (i as f64 * 0.37).sin());
        let w = Tensor::full(&[3, 3, 2], 1.0 / 3.0);
        let out = transform_members(&v, &w).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn self_weight_doubles_perturbation() {
        let v = Tensor::new(vec![2, 1, 1, 1], vec![3.0f64, 1.0]).unwrap();
        let w = Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        let out = transform_members(&v, &w).unwrap();
        assert_eq!(out.data()[0], 1.5 * 3.0 - 0.5 * 1.0);
        assert_eq!(out.data()[1], 1.0);
    }

    #[test]
    fn identical_members_are_a_fixed_point() {
        let v = Tensor::full(&[4, 2, 2, 2], 1.7f64);
        let w = Tensor::from_fn(&[4, 4, 2], |i| ((i % 3) as f64 + 1.0) / 10.0);
        assert_eq!(transform_members(&v, &w).unwrap(), v);
    }

    #[test]
    fn map_examples() {
        let zero = Tensor::<f64>::zeros(&[3, 2, 2, 2]);
        let q = Tensor::from_fn(&[3, 2, 2, 2], |i| i as f64);
        assert!(attention_map(&zero, &q).unwrap().data().iter().all(|&v| v == 0.0));

        let k = Tensor::new(vec![2, 1, 1, 1], vec![1.0f64, 3.0]).unwrap();
        let q = Tensor::new(vec![2, 1, 1, 1], vec![2.0f64, 4.0]).unwrap();
        assert_eq!(attention_map(&k, &q).unwrap().data(), &[6.0]);

        let m = attention_map(&q, &q).unwrap();
        assert!(m.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn fresh_module_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let module = AttentionModuleParams::init(&mut store, "blk", 3, 2, &mut rng).unwrap();
        let z = Tensor::from_fn(&[4, 3, 2, 4], |i| (i as f64 * 0.91).sin());
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let zv = tape.leaf(z.clone(), false);
        let (out, diag) = module.forward(&mut tape, &bound, zv, true).unwrap();
        assert_eq!(tape.value(out), &z.map(|v| v.max(0.0)));
        let diag = diag.unwrap();
        assert_eq!(diag.weights.shape(), &[4, 4, 2]);
        assert_eq!(diag.attn_map.shape(), &[2, 2, 4]);
    }

    #[test]
    fn single_member_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let module = AttentionModuleParams::init(&mut store, "blk", 2, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let zv = tape.leaf(Tensor::zeros(&[1, 2, 2, 4]), false);
        assert!(matches!(
            module.forward(&mut tape, &bound, zv, false),
            Err(Error::EnsembleSize { .. })
        ));
    }
}
