//! Differentiable volumetric primitives and the parameterized layers built
//! on them.

pub mod conv;
pub(crate) mod norm;
pub(crate) mod resample;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Op, Tape, Var};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub use conv::ConvSpec;

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    #[default]
    Trilinear,
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation with optional bias; weight `[cout, cin / groups, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let out = conv::conv3d_forward(
            self.node_value(ix),
            self.node_value(iw),
            ib.map(|i| self.node_value(i)),
            spec,
        )?;
        self.push(
            "conv3d",
            out,
            Op::Conv {
                x: ix,
                w: iw,
                b: ib,
                spec,
            },
        )
    }

    /// Adjoint of [`Tape::conv3d`]; weight `[cin, cout / groups, kd, kh, kw]`
    /// and output extent `(in - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let out = conv::conv_transpose3d_forward(
            self.node_value(ix),
            self.node_value(iw),
            ib.map(|i| self.node_value(i)),
            spec,
        )?;
        self.push(
            "conv_transpose3d",
            out,
            Op::ConvTranspose {
                x: ix,
                w: iw,
                b: ib,
                spec,
            },
        )
    }

    /// Mean over non-overlapping `r`-cubes; every extent must divide by `r`.
    pub fn avg_pool3d(&mut self, x: Var, r: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let out = resample::avg_pool_forward(self.node_value(ix), r)?;
        self.push("avg_pool3d", out, Op::AvgPool { x: ix, r })
    }

    pub fn upsample3d(&mut self, x: Var, r: usize, mode: UpsampleMode) -> Result<Var> {
        let ix = self.check(x)?;
        let out = resample::upsample_forward(self.node_value(ix), r, mode)?;
        self.push("upsample3d", out, Op::Upsample { x: ix, r, mode })
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (out, stats) = norm::instance_norm_forward(
            self.node_value(ix),
            self.node_value(ig),
            self.node_value(ib),
            eps,
        )?;
        self.push(
            "instance_norm",
            out,
            Op::InstanceNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                stats,
            },
        )
    }
}

/// Kaiming-normal draw for a leaky-ReLU network.
fn kaiming<T: Scalar>(shape: [usize; 5], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| T::of(normal.sample(rng)))
}

/// A convolution layer's parameters: weight, bias and geometry.
#[derive(Clone, Debug)]
pub struct Conv3dParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
    pub transposed: bool,
}

impl Conv3dParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        (cin, cout): (usize, usize),
        kernel: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let cin_g = cin / spec.groups;
        let shape = [cout, cin_g, kernel, kernel, kernel];
        let w = kaiming(shape, cin_g * kernel.pow(3), rng);
        Ok(Conv3dParams {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout]))?,
            spec,
            transposed: false,
        })
    }

    pub fn new_transposed<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        (cin, cout): (usize, usize),
        kernel: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let cout_g = cout / spec.groups;
        let shape = [cin, cout_g, kernel, kernel, kernel];
        let w = kaiming(shape, cout_g * kernel.pow(3), rng);
        Ok(Conv3dParams {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout]))?,
            spec,
            transposed: true,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let (w, b) = (p.var(self.weight), Some(p.var(self.bias)));
        if self.transposed {
            tape.conv_transpose3d(x, w, b, self.spec)
        } else {
            tape.conv3d(x, w, b, self.spec)
        }
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl InstanceNormParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(InstanceNormParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]))?,
            eps: NORM_EPS,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.instance_norm(x, p.var(self.gamma), p.var(self.beta), self.eps)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

/// Convolution, instance normalization and an optional leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv3dParams,
    pub norm: InstanceNormParams,
    pub act_slope: Option<f64>,
}

impl ConvBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: (usize, usize),
        kernel: usize,
        spec: ConvSpec,
        act_slope: Option<f64>,
    ) -> Result<Self> {
        Ok(ConvBlock {
            conv: Conv3dParams::new(store, rng, &format!("{name}.conv"), channels, kernel, spec)?,
            norm: InstanceNormParams::new(store, &format!("{name}.norm"), channels.1)?,
            act_slope,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let y = self.norm.forward(tape, p, y)?;
        match self.act_slope {
            Some(slope) => tape.leaky_relu(y, T::of(slope)),
            None => Ok(y),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv.param_ids().to_vec();
        ids.extend(self.norm.param_ids());
        ids
    }
}
