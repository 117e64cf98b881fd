//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append nodes in execution order, so node indices are already a
//! topological order and the reverse pass is a single backwards sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::conv::{self, ConvSpec};
use crate::nn::{norm, resample, UpsampleMode};
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Sigmoid(usize),
    LeakyRelu(usize, T),
    Concat(usize, usize),
    SliceChannels {
        src: usize,
        start: usize,
    },
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    ConvTranspose {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    AvgPool {
        x: usize,
        r: usize,
    },
    Upsample {
        x: usize,
        r: usize,
        mode: UpsampleMode,
    },
    InstanceNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: Vec<(T, T)>,
    },
    Bce {
        p: usize,
        target: Tensor<T>,
        eps: T,
    },
    SoftDice {
        p: usize,
        target: Tensor<T>,
        smooth: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Value of a recorded variable.
    ///
    /// Panics if `v` was recorded on a different tape.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        self.leaf_grads[v.id].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::BrokenTape(format!(
                "variable {} of tape {} used on tape {}",
                v.id, v.tape, self.id
            )));
        }
        Ok(v.id)
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.inputs_require_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    fn inputs_require_grad(&self, op: &Op<T>) -> bool {
        let rg = |i: &usize| self.nodes[*i].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => rg(a) || rg(b),
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::SliceChannels { src: a, .. }
            | Op::AvgPool { x: a, .. }
            | Op::Upsample { x: a, .. }
            | Op::Bce { p: a, .. }
            | Op::SoftDice { p: a, .. } => rg(a),
            Op::Conv { x, w, b, .. } | Op::ConvTranspose { x, w, b, .. } => {
                rg(x) || rg(w) || b.as_ref().is_some_and(rg)
            }
            Op::InstanceNorm { x, gamma, beta, .. } => rg(x) || rg(gamma) || rg(beta),
        }
    }

    pub(crate) fn node_value(&self, id: usize) -> &Tensor<T> {
        &self.nodes[id].value
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("add", ia, ib)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        self.push("add", out, Op::Add(ia, ib))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("mul", ia, ib)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        self.push("mul", out, Op::Mul(ia, ib))
    }

    pub fn scale(&mut self, a: Var, alpha: T) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v * alpha);
        self.push("scale", out, Op::Scale(ia, alpha))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let total: f64 = self.nodes[ia].value.data().iter().map(|v| v.f64()).sum();
        self.push("sum", Tensor::scalar(T::of(total)), Op::Sum(ia))
    }

    /// Logistic function in a branch form that never overflows.
    ///
    /// Results are clamped to the open interval `(0, 1)` of the scalar type,
    /// so saturated inputs still produce a value strictly inside it.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(sigmoid_scalar);
        self.push("sigmoid", out, Op::Sigmoid(ia))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        if !(slope >= T::zero()) {
            return Err(Error::invalid(
                "leaky_relu",
                format!("slope must be >= 0, got {slope}"),
            ));
        }
        let ia = self.check(a)?;
        let out = self.nodes[ia]
            .value
            .map(|v| if v >= T::zero() { v } else { v * slope });
        self.push("leaky_relu", out, Op::LeakyRelu(ia, slope))
    }

    /// Concatenate along the channel axis; `a` occupies the leading channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let [ba, ca, da, ha, wa] = self.nodes[ia].value.dims5("concat_channels")?;
        let [bb, cb, db, hb, wb] = self.nodes[ib].value.dims5("concat_channels")?;
        if (ba, da, ha, wa) != (bb, db, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                expected: vec![ba, cb, da, ha, wa],
                got: vec![bb, cb, db, hb, wb],
            });
        }
        let vol = da * ha * wa;
        let (va, vb) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut data = Vec::with_capacity(ba * (ca + cb) * vol);
        for n in 0..ba {
            data.extend_from_slice(&va[n * ca * vol..(n + 1) * ca * vol]);
            data.extend_from_slice(&vb[n * cb * vol..(n + 1) * cb * vol]);
        }
        let out = Tensor::from_vec([ba, ca + cb, da, ha, wa], data)?;
        self.push("concat_channels", out, Op::Concat(ia, ib))
    }

    /// Channels `[start, start + len)` of a volume.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let [b, c, d, h, w] = self.nodes[ix].value.dims5("slice_channels")?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "slice_channels",
                format!("range {start}..{} outside {c} channels", start + len),
            ));
        }
        let vol = d * h * w;
        let src = self.nodes[ix].value.data();
        let mut data = Vec::with_capacity(b * len * vol);
        for n in 0..b {
            let base = (n * c + start) * vol;
            data.extend_from_slice(&src[base..base + len * vol]);
        }
        let out = Tensor::from_vec([b, len, d, h, w], data)?;
        self.push("slice_channels", out, Op::SliceChannels { src: ix, start })
    }

    /// Split into channels `[0, k)` and `[k, C)`.
    pub fn split_channels(&mut self, x: Var, k: usize) -> Result<(Var, Var)> {
        let ix = self.check(x)?;
        let c = self.nodes[ix].value.dims5("split_channels")?[1];
        if k == 0 || k >= c {
            return Err(Error::invalid(
                "split_channels",
                format!("split point {k} must lie strictly inside 0..{c}"),
            ));
        }
        Ok((
            self.slice_channels(x, 0, k)?,
            self.slice_channels(x, k, c - k)?,
        ))
    }

    /// Sign pattern of every leaky-ReLU input on the tape. Two evaluations
    /// with equal signatures lie on the same linear piece of every kink.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu(x, _) = node.op {
                sig.extend(self.nodes[x].value.data().iter().map(|&v| v >= T::zero()));
            }
        }
        sig
    }

    /// Reverse accumulation from a scalar loss into every leaf that
    /// requires a gradient. Leaf gradients add up across calls until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        let shape = self.nodes[il].value.shape();
        if !self.nodes[il].value.is_scalar() {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[il].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(il + 1, || None);
        grads[il] = Some(vec![T::one()]);

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |j: usize, delta: Vec<T>| {
                if !nodes[j].requires_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += *d),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |j: usize| nodes[j].value.data();
            match &node.op {
                Op::Leaf => {
                    let shape = node.value.shape().to_vec();
                    match &mut self.leaf_grads[i] {
                        Some(existing) => existing
                            .data_mut()
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(e, d)| *e += *d),
                        slot @ None => *slot = Some(Tensor::from_vec(shape, g)?),
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                    let db = g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Scale(a, alpha) => acc(*a, g.iter().map(|&v| v * *alpha).collect()),
                Op::Sum(a) => acc(*a, vec![g[0]; nodes[*a].value.numel()]),
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let d = g
                        .iter()
                        .zip(y)
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect();
                    acc(*a, d);
                }
                Op::LeakyRelu(a, slope) => {
                    let d = g
                        .iter()
                        .zip(val(*a))
                        .map(|(&g, &x)| if x >= T::zero() { g } else { g * *slope })
                        .collect();
                    acc(*a, d);
                }
                Op::Concat(a, b) => {
                    let [bn, ca, d, h, w] = nodes[*a].value.dims5("concat_channels")?;
                    let cb = nodes[*b].value.shape()[1];
                    let vol = d * h * w;
                    let mut ga = Vec::with_capacity(bn * ca * vol);
                    let mut gb = Vec::with_capacity(bn * cb * vol);
                    for n in 0..bn {
                        let base = n * (ca + cb) * vol;
                        ga.extend_from_slice(&g[base..base + ca * vol]);
                        gb.extend_from_slice(&g[base + ca * vol..base + (ca + cb) * vol]);
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::SliceChannels { src, start } => {
                    let [bn, c, d, h, w] = nodes[*src].value.dims5("slice_channels")?;
                    let len = node.value.shape()[1];
                    let vol = d * h * w;
                    let mut gs = vec![T::zero(); bn * c * vol];
                    for n in 0..bn {
                        let dst = (n * c + start) * vol;
                        gs[dst..dst + len * vol]
                            .copy_from_slice(&g[n * len * vol..(n + 1) * len * vol]);
                    }
                    acc(*src, gs);
                }
                Op::Conv { x, w, b, spec } => {
                    let grads = conv::conv3d_backward(
                        &nodes[*x].value,
                        &nodes[*w].value,
                        &g,
                        *spec,
                        nodes[*x].requires_grad,
                    )?;
                    if let Some(dx) = grads.input {
                        acc(*x, dx);
                    }
                    acc(*w, grads.weight);
                    if let Some(b) = b {
                        acc(*b, grads.bias);
                    }
                }
                Op::ConvTranspose { x, w, b, spec } => {
                    let grads = conv::conv_transpose3d_backward(
                        &nodes[*x].value,
                        &nodes[*w].value,
                        &g,
                        node.value.shape(),
                        *spec,
                        nodes[*x].requires_grad,
                    )?;
                    if let Some(dx) = grads.input {
                        acc(*x, dx);
                    }
                    acc(*w, grads.weight);
                    if let Some(b) = b {
                        acc(*b, grads.bias);
                    }
                }
                Op::AvgPool { x, r } => {
                    acc(
                        *x,
                        resample::avg_pool_backward(nodes[*x].value.shape(), &g, *r),
                    );
                }
                Op::Upsample { x, r, mode } => {
                    acc(
                        *x,
                        resample::upsample_backward(nodes[*x].value.shape(), &g, *r, *mode),
                    );
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let grads = norm::instance_norm_backward(
                        &nodes[*x].value,
                        &nodes[*gamma].value,
                        stats,
                        &g,
                    );
                    acc(*x, grads.input);
                    acc(*gamma, grads.gamma);
                    acc(*beta, grads.beta);
                }
                Op::Bce { p, target, eps } => {
                    acc(
                        *p,
                        crate::losses::bce_backward(val(*p), target.data(), *eps, g[0]),
                    );
                }
                Op::SoftDice { p, target, smooth } => {
                    acc(
                        *p,
                        crate::losses::soft_dice_backward(&nodes[*p].value, target, *smooth, g[0])?,
                    );
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let one = T::one();
    let y = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let hi = one - T::epsilon() / (one + one);
    y.max(T::min_positive_value()).min(hi)
}

/// Central finite-difference gradient of a scalar function of one tensor.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_and_mul_by_definition() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), false);
        let b = tape.leaf(t(&[2], &[3.0, 4.0]), false);
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        let c = tape.leaf(t(&[2], &[2.0, 3.0]), false);
        let d = tape.leaf(t(&[2], &[4.0, 5.0]), false);
        let p = tape.mul(c, d).unwrap();
        assert_eq!(tape.value(p).data(), &[8.0, 15.0]);
    }

    #[test]
    fn additive_and_multiplicative_identities() {
        let mut tape = Tape::<f32>::new();
        let z = tape.leaf(Tensor::zeros([1, 2, 2, 2, 2]), false);
        let s = tape.add(z, z).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
        let a = tape.leaf(Tensor::from_fn([1, 1, 2, 2, 2], |i| i as f32 - 3.5), false);
        let one = tape.leaf(Tensor::ones([1, 1, 2, 2, 2]), false);
        let p = tape.mul(a, one).unwrap();
        assert_eq!(tape.value(p), tape.value(a));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros([2]), false);
        let b = tape.leaf(Tensor::zeros([3]), false);
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(tape.mul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[0.0, 50.0, -50.0]), false);
        let y = tape.sigmoid(x).unwrap();
        let y = tape.value(y).data();
        assert_eq!(y[0], 0.5);
        // Largest double below one.
        assert_eq!(y[1], 1.0 - f64::EPSILON / 2.0);
        assert!(y[2] > 0.0 && y[2] <= 1e-20);

        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec([2], vec![1e4f32, -1e4]).unwrap(), false);
        let y = tape.sigmoid(x).unwrap();
        let y = tape.value(y).data();
        assert!(y[0] < 1.0 && y[1] > 0.0);
    }

    #[test]
    fn leaky_relu_definition_and_slope_validation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[-2.0, 0.0, 3.0]), false);
        let y = tape.leaky_relu(x, 0.01).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.02, 0.0, 3.0]);
        let id = tape.leaky_relu(x, 1.0).unwrap();
        assert_eq!(tape.value(id), tape.value(x));
        assert!(tape.leaky_relu(x, -0.1).is_err());
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_fn([1, 2, 4, 4, 4], |i| i as f32), false);
        let b = tape.leaf(Tensor::from_fn([1, 3, 4, 4, 4], |i| -(i as f32)), false);
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 5, 4, 4, 4]);

        let x = tape.leaf(
            Tensor::from_fn([2, 8, 2, 2, 2], |i| (i as f32).sin()),
            false,
        );
        let (x1, x2) = tape.split_channels(x, 4).unwrap();
        assert_eq!(tape.value(x1).shape(), &[2, 4, 2, 2, 2]);
        assert_eq!(tape.value(x2).shape(), &[2, 4, 2, 2, 2]);
        let back = tape.concat_channels(x1, x2).unwrap();
        assert_eq!(tape.value(back), tape.value(x));

        let two = tape.leaf(Tensor::ones([1, 2, 1, 1, 1]), false);
        let (p, q) = tape.split_channels(two, 1).unwrap();
        assert_eq!(tape.value(p).shape()[1], 1);
        assert_eq!(tape.value(q).shape()[1], 1);
        assert!(tape.split_channels(two, 0).is_err());
        assert!(tape.split_channels(two, 2).is_err());

        let bad = tape.leaf(Tensor::ones([1, 1, 2, 1, 1]), false);
        assert!(tape.concat_channels(two, bad).is_err());
    }

    #[test]
    fn linear_case_and_accumulation() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]), true);
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.sum(wx).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert!(tape.grad(x).is_none());

        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1.0, -1.0]), true);
        let s1 = tape.sum(a).unwrap();
        let s2 = tape.sum(a).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
        let mut other = Tape::<f64>::new();
        let b = other.leaf(t(&[1], &[1.0]), true);
        assert!(matches!(tape.backward(b), Err(Error::BrokenTape(_))));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::full([2], f32::MAX), false);
        assert!(matches!(
            tape.add(a, a),
            Err(Error::NonFinite { op: "add" })
        ));
    }

    #[test]
    fn finite_differences_of_simple_functions() {
        let x = t(&[2], &[1.0, 2.0]);
        let g = finite_diff_grad(|x| x.data().iter().map(|v| v * v).sum(), &x, 1e-4);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 3.0, &x, 1e-4);
        assert_eq!(g.data(), &[0.0, 0.0]);
    }
}
