use std::collections::HashMap;

use super::kernels::{self, ConvGeom, UpGeom};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2 {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: UpGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    DepthToSpace {
        input: Var,
        r: usize,
    },
    SpaceToDepth {
        input: Var,
        r: usize,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid(Var),
    Clamp01(Var),
    Abs(Var),
    Sqrt(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale {
        input: Var,
        factor: T,
    },
    AddScalar(Var),
    ConcatChannels(Var, Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Forward record of one computation, differentiated by [`Graph::backward`].
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Vec<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("shapes differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a stored parameter; repeated calls return the same node,
    /// so every use of the parameter shares one gradient accumulator.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.params.insert(id, v);
        v
    }

    /// Makes later [`Graph::param`] calls for `id` resolve to `var`.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.params.insert(id, var);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    /// Adds the collected parameter gradients into the store's buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, self.leaf_grads.get(&i)) {
                let p = store.get_mut(*id);
                if p.trainable {
                    add_into(&mut p.grad, g);
                }
            }
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias must be [{}], got {:?}", geom.c_out, self.shape(b)),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new([geom.c_out, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Stride-2, 2×2 transposed convolution (weight `[C_in, C_out, 2, 2]`).
    pub fn conv2d_transpose(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let geom = UpGeom::new(self.shape(input), self.shape(weight))?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::dim(
                    "conv2d_transpose",
                    format!("bias must be [{}], got {:?}", geom.c_out, self.shape(b)),
                ));
            }
        }
        let out = kernels::conv_transpose2_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new([geom.c_out, 2 * geom.h, 2 * geom.w], out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2 {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("max_pool2", format!("extents must be even, got {h}x{w}")));
        }
        let (out, argmax) = kernels::max_pool2_forward(self.value(input).data(), c, h, w);
        let value = Tensor::new([c, h / 2, w / 2], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn depth_to_space(&mut self, input: Var, r: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::dim(
                "depth_to_space",
                format!("{c} channels not divisible by r^2 = {}", r * r),
            ));
        }
        let out = kernels::depth_to_space(self.value(input).data(), c, h, w, r);
        let value = Tensor::new([c / (r * r), h * r, w * r], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::DepthToSpace { input, r }, rg))
    }

    pub fn space_to_depth(&mut self, input: Var, r: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::dim(
                "space_to_depth",
                format!("extents {h}x{w} not divisible by {r}"),
            ));
        }
        let out = kernels::space_to_depth(self.value(input).data(), c, h, w, r);
        let value = Tensor::new([c * r * r, h / r, w / r], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::SpaceToDepth { input, r }, rg))
    }

    fn unary(&mut self, input: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, op, rg)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        self.unary(input, Op::LeakyRelu { input, slope: s }, |v| if v > T::zero() { v } else { v * s })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, Op::Sigmoid(input), |v| T::one() / (T::one() + (-v).exp()))
    }

    /// Clamp to `[0, 1]`; gradient passes only strictly inside the interval.
    pub fn clamp01(&mut self, input: Var) -> Var {
        self.unary(input, Op::Clamp01(input), |v| v.max(T::zero()).min(T::one()))
    }

    pub fn abs(&mut self, input: Var) -> Var {
        self.unary(input, Op::Abs(input), |v| v.abs())
    }

    pub fn sqrt(&mut self, input: Var) -> Var {
        self.unary(input, Op::Sqrt(input), |v| v.sqrt())
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = T::from_f64_lossy(factor);
        self.unary(input, Op::Scale { input, factor: f }, |v| v * f)
    }

    pub fn add_scalar(&mut self, input: Var, value: f64) -> Var {
        let c = T::from_f64_lossy(value);
        self.unary(input, Op::AddScalar(input), |v| v + c)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Stacks `[Ca,H,W]` and `[Cb,H,W]` into `[Ca+Cb,H,W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.value(a).chw()?;
        let (cb, hb, wb) = self.value(b).chw()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::dim(
                "concat_channels",
                format!("spatial extents differ: {ha}x{wa} vs {hb}x{wb}"),
            ));
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new([ca + cb, ha, wa], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatChannels(a, b), rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: T = self.value(input).data().iter().copied().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let n = T::from_usize(src.numel()).expect("count fits");
        let s: T = src.data().iter().copied().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s / n), Op::Mean(input), rg)
    }

    /// Reverse sweep from a scalar `loss`. Leaf and parameter gradients
    /// accumulate across calls; intermediate gradients are not retained.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf | Op::Param(_) => {
                    match self.leaf_grads.get_mut(&i) {
                        Some(acc) => add_into(acc, &gout),
                        None => {
                            self.leaf_grads.insert(i, gout);
                        }
                    }
                    continue;
                }
                _ => {}
            }
            for (var, g) in self.node_backward(i, &gout) {
                if !self.rg(var) {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // leaves that requested gradients but were unreachable still get zeros
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf | Op::Param(_)) {
                self.leaf_grads
                    .entry(i)
                    .or_insert_with(|| vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, gout: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let map1 = |v: Var, f: &dyn Fn(usize, T) -> T| -> Vec<(Var, Vec<T>)> {
            vec![(v, gout.iter().enumerate().map(|(j, &g)| f(j, g)).collect())]
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let want = [self.rg(*input), self.rg(*weight), bias.is_some_and(|b| self.rg(b))];
                let (gx, gw, gb) = kernels::conv2d_backward(val(*input), val(*weight), gout, geom, want);
                let mut out = Vec::new();
                out.extend(gx.map(|g| (*input, g)));
                out.extend(gw.map(|g| (*weight, g)));
                if let (Some(b), Some(g)) = (bias, gb) {
                    out.push((*b, g));
                }
                out
            }
            Op::ConvTranspose2 {
                input,
                weight,
                bias,
                geom,
            } => {
                let want = [self.rg(*input), self.rg(*weight), bias.is_some_and(|b| self.rg(b))];
                let (gx, gw, gb) =
                    kernels::conv_transpose2_backward(val(*input), val(*weight), gout, geom, want);
                let mut out = Vec::new();
                out.extend(gx.map(|g| (*input, g)));
                out.extend(gw.map(|g| (*weight, g)));
                if let (Some(b), Some(g)) = (bias, gb) {
                    out.push((*b, g));
                }
                out
            }
            Op::MaxPool2 { input, argmax } => {
                let mut g = vec![T::zero(); self.nodes[input.0].value.numel()];
                for (&src, &go) in argmax.iter().zip(gout) {
                    g[src] = g[src] + go;
                }
                vec![(*input, g)]
            }
            Op::DepthToSpace { input, r } => {
                let (c, h, w) = node.value.chw().expect("rank 3");
                vec![(*input, kernels::space_to_depth(gout, c, h, w, *r))]
            }
            Op::SpaceToDepth { input, r } => {
                let (c, h, w) = node.value.chw().expect("rank 3");
                vec![(*input, kernels::depth_to_space(gout, c, h, w, *r))]
            }
            Op::LeakyRelu { input, slope } => {
                let x = val(*input);
                map1(*input, &|j, g| if x[j] > T::zero() { g } else { g * *slope })
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                map1(*input, &|j, g| g * y[j] * (T::one() - y[j]))
            }
            Op::Clamp01(input) => {
                let x = val(*input);
                map1(*input, &|j, g| {
                    if x[j] > T::zero() && x[j] < T::one() {
                        g
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Abs(input) => {
                let x = val(*input);
                map1(*input, &|j, g| {
                    if x[j] > T::zero() {
                        g
                    } else if x[j] < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Sqrt(input) => {
                let y = node.value.data();
                let two = T::one() + T::one();
                map1(*input, &|j, g| if y[j] > T::zero() { g / (two * y[j]) } else { T::zero() })
            }
            Op::Scale { input, factor } => map1(*input, &|_, g| g * *factor),
            Op::AddScalar(input) => vec![(*input, gout.to_vec())],
            Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
            Op::Sub(a, b) => vec![(*a, gout.to_vec()), (*b, gout.iter().map(|&g| -g).collect())],
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                vec![
                    (*a, gout.iter().zip(xb).map(|(&g, &y)| g * y).collect()),
                    (*b, gout.iter().zip(xa).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                vec![
                    (*a, gout.iter().zip(xb).map(|(&g, &y)| g / y).collect()),
                    (
                        *b,
                        gout.iter()
                            .zip(xa.iter().zip(xb))
                            .map(|(&g, (&x, &y))| -g * x / (y * y))
                            .collect(),
                    ),
                ]
            }
            Op::ConcatChannels(a, b) => {
                let na = self.nodes[a.0].value.numel();
                vec![(*a, gout[..na].to_vec()), (*b, gout[na..].to_vec())]
            }
            Op::Sum(input) => {
                let n = self.nodes[input.0].value.numel();
                vec![(*input, vec![gout[0]; n])]
            }
            Op::Mean(input) => {
                let n = self.nodes[input.0].value.numel();
                let g = gout[0] / T::from_usize(n).expect("count fits");
                vec![(*input, vec![g; n])]
            }
        }
    }
}
