//! U-shaped encoder-decoder with deep supervision and the four placements
//! of self-calibrated convolutions.
//!
//! Level `i` works at `patch / 2^i` with `min(base * 2^i, max)` channels.
//! Each encoder level after the first starts with a stride-2 convolution;
//! each decoder level starts from a stride-2 transposed convolution of the
//! level below, concatenated with the encoder features of its own level.
//! Output heads are attached to the finest levels, the coarsest one being
//! the bottleneck.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv3dParams, ConvBlock, ConvSpec, UpsampleMode, LEAKY_SLOPE};
use crate::params::{Bound, ParamId, ParamStore};
use crate::sc_conv::{sc_conv_param_count, ScConv, ScConvConfig, ScKernels};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantId {
    #[default]
    Baseline,
    /// Self-calibrated convolutions replace the encoder and decoder blocks.
    M1,
    /// Self-calibrated convolutions on the skip connections only.
    M2,
    /// Both of the above.
    M3,
}

impl VariantId {
    pub const ALL: [VariantId; 4] = [
        VariantId::Baseline,
        VariantId::M1,
        VariantId::M2,
        VariantId::M3,
    ];

    pub fn sc_in_stages(self) -> bool {
        matches!(self, VariantId::M1 | VariantId::M3)
    }

    pub fn sc_on_skips(self) -> bool {
        matches!(self, VariantId::M2 | VariantId::M3)
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VariantId::Baseline => "baseline",
            VariantId::M1 => "m1",
            VariantId::M2 => "m2",
            VariantId::M3 => "m3",
        })
    }
}

impl FromStr for VariantId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(VariantId::Baseline),
            "m1" => Ok(VariantId::M1),
            "m2" => Ok(VariantId::M2),
            "m3" => Ok(VariantId::M3),
            other => Err(format!("unknown variant {other:?} (baseline, m1, m2, m3)")),
        }
    }
}

/// Settings shared by every self-calibrated module in a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScTemplate {
    pub r: usize,
    pub kernels: ScKernels,
    pub upsample: UpsampleMode,
}

impl Default for ScTemplate {
    fn default() -> Self {
        ScTemplate {
            r: 2,
            kernels: ScKernels::default(),
            upsample: UpsampleMode::Trilinear,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_regions: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub convs_per_stage: usize,
    pub deep_supervision_heads: usize,
    pub variant: VariantId,
    pub sc: ScTemplate,
    pub patch_size: usize,
    pub act_slope: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 4,
            num_regions: 3,
            depth: 3,
            base_channels: 8,
            max_channels: 320,
            convs_per_stage: 2,
            deep_supervision_heads: 3,
            variant: VariantId::Baseline,
            sc: ScTemplate::default(),
            patch_size: 32,
            act_slope: LEAKY_SLOPE,
        }
    }
}

impl UNetConfig {
    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels)
    }

    pub fn extent(&self, level: usize) -> usize {
        self.patch_size >> level
    }

    pub fn num_heads(&self) -> usize {
        self.deep_supervision_heads.clamp(1, self.depth)
    }

    fn sc_config(&self, cin: usize, cout: usize) -> ScConvConfig {
        ScConvConfig {
            in_channels: cin,
            out_channels: cout,
            r: self.sc.r,
            kernels: self.sc.kernels,
            act_slope: self.act_slope,
            upsample: self.sc.upsample,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Geometry(msg));
        if self.depth == 0 || self.base_channels == 0 || self.max_channels == 0 {
            return bad("depth and channel counts must be positive".into());
        }
        if self.in_channels == 0 || self.num_regions == 0 || self.convs_per_stage == 0 {
            return bad("input channels, regions and convs per stage must be positive".into());
        }
        let div = 1usize << (self.depth - 1);
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(div) {
            return bad(format!(
                "patch size {} is not divisible by 2^(depth-1) = {div}",
                self.patch_size
            ));
        }
        if self.variant == VariantId::Baseline {
            return Ok(());
        }
        let r = self.sc.r;
        for level in 0..self.depth {
            let on_skip = self.variant.sc_on_skips() && level + 1 < self.depth;
            if !(self.variant.sc_in_stages() || on_skip) {
                continue;
            }
            let e = self.extent(level);
            if r == 0 || e < r || !e.is_multiple_of(r) {
                return bad(format!(
                    "level {level}: extent {e} is not divisible by the pooling rate {r}"
                ));
            }
            let c = self.channels(level);
            if !c.is_multiple_of(2) {
                return bad(format!("level {level}: {c} channels cannot be halved"));
            }
            if level == 0 && self.variant.sc_in_stages() && !self.in_channels.is_multiple_of(2) {
                return bad(format!(
                    "level 0: {} input channels cannot be halved",
                    self.in_channels
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Plain(ConvBlock),
    SelfCalibrated(ScConv),
}

impl Block {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Block::Plain(b) => b.forward(tape, p, x),
            Block::SelfCalibrated(b) => b.forward(tape, p, x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Block::Plain(b) => b.param_ids(),
            Block::SelfCalibrated(b) => b.param_ids(),
        }
    }

    pub fn is_self_calibrated(&self) -> bool {
        matches!(self, Block::SelfCalibrated(_))
    }
}

pub struct Network<T> {
    cfg: UNetConfig,
    params: ParamStore<T>,
    encoder: Vec<Vec<Block>>,
    skips: Vec<Option<ScConv>>,
    ups: Vec<Conv3dParams>,
    decoder: Vec<Vec<Block>>,
    heads: Vec<Conv3dParams>,
}

/// Build a network with weights drawn from a seeded generator.
pub fn build_network<T: Scalar>(cfg: &UNetConfig, seed: u64) -> Result<Network<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slope = Some(cfg.act_slope);
    let sc_stages = cfg.variant.sc_in_stages();

    let stage_block = |store: &mut ParamStore<T>,
                       rng: &mut ChaCha8Rng,
                       name: String,
                       cin: usize,
                       cout: usize,
                       stride: usize|
     -> Result<Block> {
        if sc_stages && stride == 1 {
            Ok(Block::SelfCalibrated(ScConv::new(
                store,
                rng,
                &name,
                cfg.sc_config(cin, cout),
            )?))
        } else {
            Ok(Block::Plain(ConvBlock::new(
                store,
                rng,
                &name,
                (cin, cout),
                3,
                ConvSpec::strided(3, stride),
                slope,
            )?))
        }
    };

    let mut encoder = Vec::with_capacity(cfg.depth);
    for level in 0..cfg.depth {
        let c = cfg.channels(level);
        let mut blocks = Vec::with_capacity(cfg.convs_per_stage);
        for j in 0..cfg.convs_per_stage {
            let (cin, stride) = match (level, j) {
                (0, 0) => (cfg.in_channels, 1),
                (_, 0) => (cfg.channels(level - 1), 2),
                _ => (c, 1),
            };
            blocks.push(stage_block(
                &mut store,
                &mut rng,
                format!("enc{level}.b{j}"),
                cin,
                c,
                stride,
            )?);
        }
        encoder.push(blocks);
    }

    let mut skips = Vec::with_capacity(cfg.depth - 1);
    for level in 0..cfg.depth - 1 {
        let c = cfg.channels(level);
        skips.push(if cfg.variant.sc_on_skips() {
            Some(ScConv::new(
                &mut store,
                &mut rng,
                &format!("skip{level}"),
                cfg.sc_config(c, c),
            )?)
        } else {
            None
        });
    }

    let mut ups = Vec::with_capacity(cfg.depth - 1);
    let mut decoder = Vec::with_capacity(cfg.depth - 1);
    for level in 0..cfg.depth - 1 {
        let (c, below) = (cfg.channels(level), cfg.channels(level + 1));
        ups.push(Conv3dParams::new_transposed(
            &mut store,
            &mut rng,
            &format!("up{level}"),
            (below, c),
            2,
            ConvSpec::tiled(2),
        )?);
        let mut blocks = Vec::with_capacity(cfg.convs_per_stage);
        for j in 0..cfg.convs_per_stage {
            let cin = if j == 0 { 2 * c } else { c };
            blocks.push(stage_block(
                &mut store,
                &mut rng,
                format!("dec{level}.b{j}"),
                cin,
                c,
                1,
            )?);
        }
        decoder.push(blocks);
    }

    let heads = (0..cfg.num_heads())
        .map(|level| {
            Conv3dParams::new(
                &mut store,
                &mut rng,
                &format!("head{level}"),
                (cfg.channels(level), cfg.num_regions),
                1,
                ConvSpec::same(1),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Network {
        cfg: cfg.clone(),
        params: store,
        encoder,
        skips,
        ups,
        decoder,
        heads,
    })
}

impl<T: Scalar> Network<T> {
    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn skip_count(&self) -> usize {
        self.skips.len()
    }

    pub fn skip_modules(&self) -> impl Iterator<Item = &ScConv> {
        self.skips.iter().flatten()
    }

    pub fn encoder_blocks(&self) -> impl Iterator<Item = &Block> {
        self.encoder.iter().flatten()
    }

    pub fn decoder_blocks(&self) -> impl Iterator<Item = &Block> {
        self.decoder.iter().flatten()
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Every parameter id referenced by a layer, in layer order.
    pub fn referenced_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in self.encoder_blocks() {
            ids.extend(b.param_ids());
        }
        for s in self.skip_modules() {
            ids.extend(s.param_ids());
        }
        for u in &self.ups {
            ids.extend(u.param_ids());
        }
        for b in self.decoder_blocks() {
            ids.extend(b.param_ids());
        }
        for h in &self.heads {
            ids.extend(h.param_ids());
        }
        ids
    }

    /// Scalar parameters held by the skip-connection modules.
    pub fn skip_parameter_count(&self) -> usize {
        self.skip_modules()
            .map(|s| sc_conv_param_count(&s.cfg))
            .sum()
    }

    /// Logits of every head, finest first.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let cfg = &self.cfg;
        let [_, c, d, h, w] = tape.value(x).dims5("unet")?;
        let s = cfg.patch_size;
        if c != cfg.in_channels || [d, h, w] != [s, s, s] {
            return Err(Error::Geometry(format!(
                "network expects [B, {}, {s}, {s}, {s}] input, got {:?}",
                cfg.in_channels,
                tape.value(x).shape()
            )));
        }
        let mut features = Vec::with_capacity(cfg.depth);
        let mut cur = x;
        for stage in &self.encoder {
            for block in stage {
                cur = block.forward(tape, p, cur)?;
            }
            features.push(cur);
        }
        let mut level_out = vec![cur; cfg.depth];
        for level in (0..cfg.depth - 1).rev() {
            let up = self.ups[level].forward(tape, p, cur)?;
            let skip = match &self.skips[level] {
                Some(sc) => sc.forward(tape, p, features[level])?,
                None => features[level],
            };
            cur = tape.concat_channels(up, skip)?;
            for block in &self.decoder[level] {
                cur = block.forward(tape, p, cur)?;
            }
            level_out[level] = cur;
        }
        self.heads
            .iter()
            .enumerate()
            .map(|(level, head)| head.forward(tape, p, level_out[level]))
            .collect()
    }

    /// Finest-head logits for an input batch, without gradient bookkeeping.
    pub fn predict(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self
            .params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let bound = Bound::from_vars(vars);
        let xv = tape.constant(x);
        let heads = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(heads[0]).clone())
    }
}
