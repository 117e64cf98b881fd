//! Volumetric self-calibrated convolution.
//!
//! The input is mixed by a grouped pointwise convolution and split into two
//! channel halves. The first half is recalibrated by a gate computed from a
//! pooled, convolved and re-upsampled copy of itself; the second half goes
//! through a plain convolution block. The halves are concatenated and fused.
//!
//! ```text
//!   x ── split conv (groups 2) ──┬── x1 ─┬─ pool r ─ CO2 ─ up r ─┐
//!                                │       ├───────────────────(+)─ sigmoid ─ gate
//!                                │       └─ CO3 ──────────────────────────(*)─ CO4+act ─ y1
//!                                └── x2 ─── CO1+act ─────────────────────────────────── y2
//!   concat(y1, y2) ─ CO5+act ─ y
//! ```
//!
//! Every CO block is convolution followed by instance normalization; only
//! CO1, CO4 and CO5 end in a leaky ReLU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv3dParams, ConvBlock, ConvSpec, UpsampleMode, LEAKY_SLOPE};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Scalar;

/// Cubic kernel extents of each convolution in the module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScKernels {
    pub split: usize,
    /// CO1 to CO4.
    pub blocks: [usize; 4],
    /// CO5.
    pub fusion: usize,
}

impl Default for ScKernels {
    fn default() -> Self {
        ScKernels {
            split: 1,
            blocks: [3; 4],
            fusion: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub r: usize,
    pub kernels: ScKernels,
    pub act_slope: f64,
    pub upsample: UpsampleMode,
}

impl ScConvConfig {
    pub fn new(in_channels: usize, out_channels: usize, r: usize) -> Self {
        ScConvConfig {
            in_channels,
            out_channels,
            r,
            kernels: ScKernels::default(),
            act_slope: LEAKY_SLOPE,
            upsample: UpsampleMode::Trilinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "sc_conv";
        if self.in_channels < 2 || !self.in_channels.is_multiple_of(2) {
            return Err(Error::invalid(
                OP,
                format!(
                    "input channels must be even and positive, got {}",
                    self.in_channels
                ),
            ));
        }
        if self.out_channels == 0 {
            return Err(Error::invalid(OP, "output channels must be positive"));
        }
        if self.r == 0 {
            return Err(Error::invalid(OP, "pooling rate must be >= 1"));
        }
        let k = &self.kernels;
        if std::iter::once(k.split)
            .chain(k.blocks)
            .chain([k.fusion])
            .any(|k| k % 2 == 0)
        {
            return Err(Error::invalid(
                OP,
                format!("kernel sizes must be odd, got {k:?}"),
            ));
        }
        if !(self.act_slope >= 0.0) {
            return Err(Error::invalid(OP, "activation slope must be >= 0"));
        }
        Ok(())
    }
}

/// Exact number of scalar parameters of one module.
pub fn sc_conv_param_count(cfg: &ScConvConfig) -> usize {
    let (c, half, out) = (cfg.in_channels, cfg.in_channels / 2, cfg.out_channels);
    let k3 = |k: usize| k * k * k;
    let split = c * half * k3(cfg.kernels.split) + c;
    let blocks: usize = cfg
        .kernels
        .blocks
        .iter()
        .map(|&k| half * half * k3(k) + half + 2 * half)
        .sum();
    let fusion = out * c * k3(cfg.kernels.fusion) + out + 2 * out;
    split + blocks + fusion
}

#[derive(Clone, Debug)]
pub struct ScConv {
    pub cfg: ScConvConfig,
    pub split: Conv3dParams,
    pub co1: ConvBlock,
    pub co2: ConvBlock,
    pub co3: ConvBlock,
    pub co4: ConvBlock,
    pub co5: ConvBlock,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ScConvTrace {
    pub x1: Var,
    pub x2: Var,
    pub gate: Var,
    pub y1: Var,
    pub y2: Var,
    pub output: Var,
}

impl ScConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: ScConvConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c, half) = (cfg.in_channels, cfg.in_channels / 2);
        let k = cfg.kernels;
        let act = Some(cfg.act_slope);
        let block = |store: &mut ParamStore<T>, rng: &mut _, tag: &str, kk: usize, act| {
            ConvBlock::new(
                store,
                rng,
                &format!("{name}.{tag}"),
                (half, half),
                kk,
                ConvSpec::same(kk),
                act,
            )
        };
        let split = Conv3dParams::new(
            store,
            rng,
            &format!("{name}.split"),
            (c, c),
            k.split,
            ConvSpec::same(k.split).with_groups(2),
        )?;
        let co1 = block(store, rng, "co1", k.blocks[0], act)?;
        let co2 = block(store, rng, "co2", k.blocks[1], None)?;
        let co3 = block(store, rng, "co3", k.blocks[2], None)?;
        let co4 = block(store, rng, "co4", k.blocks[3], act)?;
        let co5 = ConvBlock::new(
            store,
            rng,
            &format!("{name}.co5"),
            (c, cfg.out_channels),
            k.fusion,
            ConvSpec::same(k.fusion),
            act,
        )?;
        Ok(ScConv {
            cfg,
            split,
            co1,
            co2,
            co3,
            co4,
            co5,
        })
    }

    pub fn forward_traced<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<ScConvTrace> {
        let [_, c, d, h, w] = tape.value(x).dims5("sc_conv")?;
        if c != self.cfg.in_channels {
            return Err(Error::invalid(
                "sc_conv",
                format!("expected {} input channels, got {c}", self.cfg.in_channels),
            ));
        }
        let r = self.cfg.r;
        if [d, h, w].iter().any(|&e| e < r || e % r != 0) {
            return Err(Error::Geometry(format!(
                "sc_conv: spatial extents {:?} not divisible by pooling rate {r}",
                [d, h, w]
            )));
        }
        let mixed = self.split.forward(tape, p, x)?;
        let (x1, x2) = tape.split_channels(mixed, c / 2)?;

        let pooled = tape.avg_pool3d(x1, r)?;
        let context = self.co2.forward(tape, p, pooled)?;
        let context = tape.upsample3d(context, r, self.cfg.upsample)?;
        let logits = tape.add(x1, context)?;
        let gate = tape.sigmoid(logits)?;
        let features = self.co3.forward(tape, p, x1)?;
        let calibrated = tape.mul(gate, features)?;
        let y1 = self.co4.forward(tape, p, calibrated)?;

        let y2 = self.co1.forward(tape, p, x2)?;
        let joined = tape.concat_channels(y1, y2)?;
        let output = self.co5.forward(tape, p, joined)?;
        Ok(ScConvTrace {
            x1,
            x2,
            gate,
            y1,
            y2,
            output,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, x)?.output)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.split.param_ids().to_vec();
        for b in [&self.co1, &self.co2, &self.co3, &self.co4, &self.co5] {
            ids.extend(b.param_ids());
        }
        ids
    }
}
