//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the records in reverse and
//! accumulates gradients into every node that requires them. A fresh tape is
//! built for each forward pass.

use crate::attention;
use crate::error::{Error, Result};
use crate::kernels::{self, Dims4, KERNEL};
use crate::metrics;
use crate::scalar::Scalar;
use crate::tensor::{strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Relu(Var),
    Softplus(Var),
    ClampMin(Var, T),
    Reduce { x: Var, mean: bool },
    StdMembers { x: Var, ddof: usize },
    MeanMembers(Var),
    ConcatChannels(Vec<Var>),
    SelectChannel { x: Var, c: usize },
    ChannelProject { x: Var, w: Var },
    AddChannelBias { x: Var, b: Var },
    ScaleBy { x: Var, s: Var },
    Conv { x: Var, kernel: Var, bias: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, means: Vec<T>, rstds: Vec<T> },
    AttentionWeights { keys: Var, queries: Var },
    TransformMembers { values: Var, weights: Var },
    GaussianCrps { mu: Var, sigma: Var, target: Vec<T> },
    LatWeightedMean { x: Var, lat_weights: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn rank4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<Dims4> {
    if t.rank() != 4 {
        return Err(Error::dim(op, t.shape(), &[0, 0, 0, 0]));
    }
    Ok(Dims4::from_shape(t.shape()))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Gradients are only tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last `backward` calls, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise --------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let data = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        self.push(t, Op::Exp(a), &[a])
    }

    /// `max(x, 0)`; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        self.push(t, Op::Softplus(a), &[a])
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let t = self.value(a).map(|x| x.max(floor));
        self.push(t, Op::ClampMin(a, floor), &[a])
    }

    // ---- reductions ---------------------------------------------------------

    /// Sum over `axes`, keeping reduced axes with length one.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, false)
    }

    /// Mean over `axes`, keeping reduced axes with length one.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, true)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(a, &axes, false)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(a, &axes, true)
    }

    fn reduce(&mut self, a: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= x.rank()) {
            return Err(Error::Usage(format!(
                "axis {bad} out of range for shape {:?}",
                x.shape()
            )));
        }
        let mut out_shape = x.shape().to_vec();
        for &ax in axes {
            out_shape[ax] = 1;
        }
        let map = reduce_map(x.shape(), &out_shape);
        let mut out = Tensor::zeros(&out_shape);
        {
            let od = out.data_mut();
            for (&v, &o) in x.data().iter().zip(&map) {
                od[o] += v;
            }
        }
        if mean {
            let n = T::from_usize(x.numel() / out.numel().max(1)).unwrap();
            out.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        Ok(self.push(out, Op::Reduce { x: a, mean }, &[a]))
    }

    /// Ensemble mean along axis 0, kept as a length-one axis.
    pub fn mean_members(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() == 0 || x.members() == 0 {
            return Err(Error::EnsembleSize {
                op: "mean_members",
                min: 1,
                got: 0,
            });
        }
        let out = member_mean(x);
        Ok(self.push(out, Op::MeanMembers(a), &[a]))
    }

    /// Ensemble standard deviation along axis 0 with `ddof` degrees of freedom.
    pub fn std_members(&mut self, a: Var, ddof: usize) -> Result<Var> {
        let x = self.value(a);
        let k = x.members();
        if k <= ddof {
            return Err(Error::EnsembleSize {
                op: "std_members",
                min: ddof + 1,
                got: k,
            });
        }
        let out = member_std(x, ddof);
        Ok(self.push(out, Op::StdMembers { x: a, ddof }, &[a]))
    }

    // ---- channel / layout ops -----------------------------------------------

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let d0 = rank4("concat_channels", self.value(first))?;
        let mut c_total = 0;
        for &p in parts {
            let d = rank4("concat_channels", self.value(p))?;
            if d.k != d0.k || d.h != d0.h || d.w != d0.w {
                return Err(Error::dim(
                    "concat_channels",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            c_total += d.c;
        }
        let plane = d0.plane();
        let mut data = Vec::with_capacity(d0.k * c_total * plane);
        for i in 0..d0.k {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[i * c * plane..(i + 1) * c * plane]);
            }
        }
        let t = Tensor::new(vec![d0.k, c_total, d0.h, d0.w], data)?;
        Ok(self.push(t, Op::ConcatChannels(parts.to_vec()), parts))
    }

    pub fn select_channel(&mut self, a: Var, c: usize) -> Result<Var> {
        let t = self.value(a).channel(c)?;
        Ok(self.push(t, Op::SelectChannel { x: a, c }, &[a]))
    }

    /// 1x1 convolution: `out[i,m,y,x] = sum_c x[i,c,y,x] * w[c,m]`.
    pub fn channel_project(&mut self, x: Var, w: Var) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        let d = rank4("channel_project", xt)?;
        if wt.rank() != 2 || wt.shape()[0] != d.c {
            return Err(Error::dim("channel_project", xt.shape(), wt.shape()));
        }
        let c_out = wt.shape()[1];
        let data = kernels::project_forward(xt.data(), d, wt.data(), c_out);
        let t = Tensor::new(vec![d.k, c_out, d.h, d.w], data)?;
        Ok(self.push(t, Op::ChannelProject { x, w }, &[x, w]))
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xt = self.value(x);
        let bt = self.value(b);
        let d = rank4("add_channel_bias", xt)?;
        if bt.numel() != d.c {
            return Err(Error::dim("add_channel_bias", xt.shape(), bt.shape()));
        }
        let p = d.plane();
        let bd = bt.data();
        let mut out = xt.clone();
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            *v += bd[(j / p) % d.c];
        }
        Ok(self.push(out, Op::AddChannelBias { x, b }, &[x, b]))
    }

    /// Multiplies every entry of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let st = self.value(s);
        if st.numel() != 1 {
            return Err(Error::dim("scale_by", self.shape(x), st.shape()));
        }
        let sv = st.data()[0];
        let t = self.value(x).map(|v| v * sv);
        Ok(self.push(t, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// 5x5 convolution over `(lat, lon)`, longitude periodic, latitude zero-padded.
    pub fn conv2d_5x5(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xt = self.value(x);
        let kt = self.value(kernel);
        let bt = self.value(bias);
        let d = rank4("conv2d_5x5", xt)?;
        if kt.rank() != 4 || kt.shape()[2] != KERNEL || kt.shape()[3] != KERNEL {
            return Err(Error::Config(format!(
                "conv2d_5x5 needs a [c_out, c_in, 5, 5] kernel, got {:?}",
                kt.shape()
            )));
        }
        if kt.shape()[1] != d.c {
            return Err(Error::dim("conv2d_5x5", xt.shape(), kt.shape()));
        }
        let c_out = kt.shape()[0];
        if bt.numel() != c_out {
            return Err(Error::dim("conv2d_5x5", kt.shape(), bt.shape()));
        }
        let data = kernels::conv_forward(xt.data(), d, kt.data(), bt.data(), c_out);
        let t = Tensor::new(vec![d.k, c_out, d.h, d.w], data)?;
        Ok(self.push(t, Op::Conv { x, kernel, bias }, &[x, kernel, bias]))
    }

    /// Per-member normalization over `(c, h, w)` with per-channel gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let xt = self.value(x);
        let d = rank4("layer_norm", xt)?;
        let (gt, bt) = (self.value(gain), self.value(bias));
        if gt.numel() != d.c || bt.numel() != d.c {
            return Err(Error::dim("layer_norm", xt.shape(), gt.shape()));
        }
        let (out, means, rstds) =
            kernels::layer_norm_forward(xt.data(), d, gt.data(), bt.data(), eps);
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            means,
            rstds,
        };
        Ok(self.push(t, op, &[x, gain, bias]))
    }

    // ---- ensemble attention -------------------------------------------------

    /// Softmax-normalized member similarity, shape `[k, k, heads]`.
    pub fn attention_weights(&mut self, keys: Var, queries: Var) -> Result<Var> {
        let (kt, qt) = (self.value(keys), self.value(queries));
        same_shape("attention_weights", kt, qt)?;
        let d = rank4("attention_weights", kt)?;
        let data = attention::weights_forward(kt.data(), qt.data(), d);
        let t = Tensor::new(vec![d.k, d.k, d.c], data)?;
        Ok(self.push(t, Op::AttentionWeights { keys, queries }, &[keys, queries]))
    }

    /// Adds the weighted value perturbations to every member.
    pub fn transform_members(&mut self, values: Var, weights: Var) -> Result<Var> {
        let (vt, wt) = (self.value(values), self.value(weights));
        let d = rank4("transform_members", vt)?;
        if wt.shape() != [d.k, d.k, d.c] {
            return Err(Error::dim("transform_members", vt.shape(), wt.shape()));
        }
        let data = attention::transform_forward(vt.data(), wt.data(), d);
        let t = Tensor::new(vt.shape().to_vec(), data)?;
        Ok(self.push(t, Op::TransformMembers { values, weights }, &[values, weights]))
    }

    // ---- scoring ------------------------------------------------------------

    /// Elementwise closed-form Gaussian CRPS against a fixed target.
    pub fn gaussian_crps(&mut self, mu: Var, sigma: Var, target: &Tensor<T>) -> Result<Var> {
        let (mt, st) = (self.value(mu), self.value(sigma));
        same_shape("gaussian_crps", mt, st)?;
        if target.numel() != mt.numel() {
            return Err(Error::dim("gaussian_crps", mt.shape(), target.shape()));
        }
        let mut out = Vec::with_capacity(mt.numel());
        for ((&m, &s), &y) in mt.data().iter().zip(st.data()).zip(target.data()) {
            out.push(metrics::gaussian_crps(m, s, y)?);
        }
        let t = Tensor::new(mt.shape().to_vec(), out)?;
        let op = Op::GaussianCrps {
            mu,
            sigma,
            target: target.data().to_vec(),
        };
        Ok(self.push(t, op, &[mu, sigma]))
    }

    /// Latitude-weighted mean over all entries of a `[..., h, w]` tensor.
    pub fn lat_weighted_mean(&mut self, x: Var, lat_weights: &[T]) -> Result<Var> {
        let xt = self.value(x);
        let r = xt.rank();
        if r < 2 || xt.shape()[r - 2] != lat_weights.len() {
            return Err(Error::dim("lat_weighted_mean", xt.shape(), &[lat_weights.len()]));
        }
        let (h, w) = (xt.shape()[r - 2], xt.shape()[r - 1]);
        let n = T::from_usize(xt.numel()).unwrap();
        let mut acc = T::zero();
        for (j, &v) in xt.data().iter().enumerate() {
            acc += v * lat_weights[(j / w) % h];
        }
        let t = Tensor::scalar(acc / n);
        let op = Op::LatWeightedMean {
            x,
            lat_weights: lat_weights.to_vec(),
        };
        Ok(self.push(t, op, &[x]))
    }

    // ---- reverse pass -------------------------------------------------------

    /// Accumulates `d loss / d node` into every node that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut local: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = local[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut local);
            match &mut self.grads[idx] {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, &b)| *a += b),
                slot @ None => {
                    *slot = Some(Tensor::new(self.nodes[idx].value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], local: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let tracked = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, contrib: Vec<T>| {
            if !tracked(v) {
                return;
            }
            match &mut local[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if tracked(*a) {
                    send(*a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect());
                }
                if tracked(*b) {
                    send(*b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect());
                }
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::Exp(a) => send(*a, g.iter().zip(out).map(|(&gi, &o)| gi * o).collect()),
            Op::Relu(a) => {
                let x = self.val(*a);
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect(),
                );
            }
            Op::Softplus(a) => {
                let x = self.val(*a);
                send(
                    *a,
                    g.iter().zip(x).map(|(&gi, &xi)| gi * sigmoid(xi)).collect(),
                );
            }
            Op::ClampMin(a, floor) => {
                let x = self.val(*a);
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > *floor { gi } else { T::zero() })
                        .collect(),
                );
            }
            Op::Reduce { x, mean, .. } => {
                let xt = self.value(*x);
                let map = reduce_map(xt.shape(), node.value.shape());
                let scale = if *mean {
                    T::one() / T::from_usize(xt.numel() / out.len().max(1)).unwrap()
                } else {
                    T::one()
                };
                send(*x, map.iter().map(|&o| g[o] * scale).collect());
            }
            Op::MeanMembers(x) => {
                let xt = self.value(*x);
                let k = xt.members();
                let inv = T::one() / T::from_usize(k).unwrap();
                let n = out.len();
                let mut dx = Vec::with_capacity(xt.numel());
                for _ in 0..k {
                    dx.extend(g.iter().map(|&v| v * inv));
                }
                debug_assert_eq!(dx.len(), k * n);
                send(*x, dx);
            }
            Op::StdMembers { x, ddof } => {
                let xt = self.value(*x);
                let k = xt.members();
                let n = out.len();
                let mean = member_mean(xt);
                let denom = T::from_usize(k - ddof).unwrap();
                let mut dx = vec![T::zero(); xt.numel()];
                for i in 0..k {
                    let xs = xt.member(i);
                    for j in 0..n {
                        if out[j] > T::zero() {
                            dx[i * n + j] = g[j] * (xs[j] - mean.data()[j]) / (denom * out[j]);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::ConcatChannels(parts) => {
                let d = Dims4::from_shape(node.value.shape());
                let plane = d.plane();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if tracked(p) {
                        let mut dp = Vec::with_capacity(d.k * c * plane);
                        for i in 0..d.k {
                            let start = (i * d.c + offset) * plane;
                            dp.extend_from_slice(&g[start..start + c * plane]);
                        }
                        send(p, dp);
                    }
                    offset += c;
                }
            }
            Op::SelectChannel { x, c } => {
                let d = Dims4::from_shape(self.shape(*x));
                let plane = d.plane();
                let mut dx = vec![T::zero(); d.k * d.c * plane];
                for i in 0..d.k {
                    let dst = (i * d.c + c) * plane;
                    dx[dst..dst + plane].copy_from_slice(&g[i * plane..(i + 1) * plane]);
                }
                send(*x, dx);
            }
            Op::ChannelProject { x, w } => {
                let d = Dims4::from_shape(self.shape(*x));
                let c_out = self.shape(*w)[1];
                let (dx, dw) =
                    kernels::project_backward(self.val(*x), d, self.val(*w), c_out, g);
                send(*x, dx);
                send(*w, dw);
            }
            Op::AddChannelBias { x, b } => {
                let d = Dims4::from_shape(self.shape(*x));
                let p = d.plane();
                let mut db = vec![T::zero(); d.c];
                for (j, &gv) in g.iter().enumerate() {
                    db[(j / p) % d.c] += gv;
                }
                send(*x, g.to_vec());
                send(*b, db);
            }
            Op::ScaleBy { x, s } => {
                let sv = self.val(*s)[0];
                let ds: T = g.iter().zip(self.val(*x)).map(|(&gi, &xi)| gi * xi).sum();
                send(*x, g.iter().map(|&v| v * sv).collect());
                send(*s, vec![ds]);
            }
            Op::Conv { x, kernel, bias } => {
                let d = Dims4::from_shape(self.shape(*x));
                let c_out = self.shape(*kernel)[0];
                let (dx, dk, db) =
                    kernels::conv_backward(self.val(*x), d, self.val(*kernel), c_out, g);
                send(*x, dx);
                send(*kernel, dk);
                send(*bias, db);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            } => {
                let d = Dims4::from_shape(self.shape(*x));
                let (dx, dg, db) = kernels::layer_norm_backward(
                    self.val(*x),
                    d,
                    self.val(*gain),
                    means,
                    rstds,
                    g,
                );
                send(*x, dx);
                send(*gain, dg);
                send(*bias, db);
            }
            Op::AttentionWeights { keys, queries } => {
                let d = Dims4::from_shape(self.shape(*keys));
                let (dk, dq) =
                    attention::weights_backward(self.val(*keys), self.val(*queries), out, d, g);
                send(*keys, dk);
                send(*queries, dq);
            }
            Op::TransformMembers { values, weights } => {
                let d = Dims4::from_shape(self.shape(*values));
                let (dv, dw) =
                    attention::transform_backward(self.val(*values), self.val(*weights), d, g);
                send(*values, dv);
                send(*weights, dw);
            }
            Op::GaussianCrps { mu, sigma, target } => {
                let (mv, sv) = (self.val(*mu), self.val(*sigma));
                let mut dmu = Vec::with_capacity(g.len());
                let mut dsigma = Vec::with_capacity(g.len());
                for j in 0..g.len() {
                    let (d_mu, d_sigma) = metrics::gaussian_crps_grad(mv[j], sv[j], target[j]);
                    dmu.push(g[j] * d_mu);
                    dsigma.push(g[j] * d_sigma);
                }
                send(*mu, dmu);
                send(*sigma, dsigma);
            }
            Op::LatWeightedMean { x, lat_weights } => {
                let xt = self.value(*x);
                let r = xt.rank();
                let (h, w) = (xt.shape()[r - 2], xt.shape()[r - 1]);
                let scale = g[0] / T::from_usize(xt.numel()).unwrap();
                send(
                    *x,
                    (0..xt.numel())
                        .map(|j| scale * lat_weights[(j / w) % h])
                        .collect(),
                );
            }
        }
    }
}

/// For each input flat index, the flat index of the reduced output entry.
fn reduce_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n: usize = in_shape.iter().product();
    let out_strides = strides(out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; in_shape.len()];
    for _ in 0..n {
        let o: usize = idx
            .iter()
            .zip(out_shape)
            .zip(&out_strides)
            .map(|((&i, &os), &st)| if os == 1 { 0 } else { i * st })
            .sum();
        map.push(o);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < in_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn member_mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = x.members();
    let mut shape = x.shape().to_vec();
    shape[0] = 1;
    let mut out = Tensor::zeros(&shape);
    for i in 0..k {
        out.data_mut()
            .iter_mut()
            .zip(x.member(i))
            .for_each(|(o, &v)| *o += v);
    }
    let kt = T::from_usize(k).unwrap();
    out.data_mut().iter_mut().for_each(|v| *v /= kt);
    out
}

fn member_std<T: Scalar>(x: &Tensor<T>, ddof: usize) -> Tensor<T> {
    let k = x.members();
    let mean = member_mean(x);
    let mut out = Tensor::zeros(mean.shape());
    for i in 0..k {
        out.data_mut()
            .iter_mut()
            .zip(x.member(i).iter().zip(mean.data()))
            .for_each(|(o, (&v, &m))| *o += (v - m) * (v - m));
    }
    let denom = T::from_usize(k - ddof).unwrap();
    out.data_mut()
        .iter_mut()
        .for_each(|v: &mut T| *v = (*v / denom).sqrt());
    out
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
