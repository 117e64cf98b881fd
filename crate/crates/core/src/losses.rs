//! Region-wise training objective: binary cross entropy plus soft Dice on
//! sigmoid probabilities, summed over deep-supervision heads.

use crate::autograd::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probability clamp applied inside the cross entropy.
pub const BCE_EPS: f64 = 1e-7;
/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

fn check_same(op: &'static str, p: &[usize], t: &[usize]) -> Result<()> {
    if p != t {
        return Err(Error::ShapeMismatch {
            op,
            expected: p.to_vec(),
            got: t.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn bce_backward<T: Scalar>(p: &[T], t: &[T], eps: T, g: T) -> Vec<T> {
    let n = p.len() as f64;
    let (lo, hi) = (eps, T::one() - eps);
    p.iter()
        .zip(t)
        .map(|(&p, &t)| {
            if p <= lo || p >= hi {
                return T::zero();
            }
            let (p, t) = (p.f64(), t.f64());
            T::of(g.f64() * -(t / p - (1.0 - t) / (1.0 - p)) / n)
        })
        .collect()
}

struct DiceSums {
    channels: usize,
    vol: usize,
    inter: Vec<f64>,
    denom: Vec<f64>,
}

fn dice_sums<T: Scalar>(p: &Tensor<T>, t: &Tensor<T>, smooth: f64) -> Result<DiceSums> {
    let [b, c, d, h, w] = p.dims5("soft_dice_loss")?;
    let vol = d * h * w;
    let mut inter = vec![0.0; c];
    let mut denom = vec![smooth; c];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * vol;
            for (&pv, &tv) in p.data()[off..off + vol]
                .iter()
                .zip(&t.data()[off..off + vol])
            {
                let (pv, tv) = (pv.f64(), tv.f64());
                inter[ch] += pv * tv;
                denom[ch] += pv + tv;
            }
        }
    }
    Ok(DiceSums {
        channels: c,
        vol,
        inter,
        denom,
    })
}

pub(crate) fn soft_dice_backward<T: Scalar>(
    p: &Tensor<T>,
    t: &Tensor<T>,
    smooth: T,
    g: T,
) -> Result<Vec<T>> {
    let smooth = smooth.f64();
    let s = dice_sums(p, t, smooth)?;
    let scale = -g.f64() / s.channels as f64;
    let mut dp = Vec::with_capacity(p.numel());
    for (i, &tv) in t.data().iter().enumerate() {
        let ch = (i / s.vol) % s.channels;
        let num = 2.0 * s.inter[ch] + smooth;
        let den = s.denom[ch];
        dp.push(T::of(scale * (2.0 * tv.f64() * den - num) / (den * den)));
    }
    Ok(dp)
}

impl<T: Scalar> Tape<T> {
    /// Mean binary cross entropy of probabilities against binary targets,
    /// probabilities clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_loss(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        let ip = self.check(probs)?;
        let p = self.node_value(ip);
        check_same("bce_loss", p.shape(), target.shape())?;
        let eps = T::of(BCE_EPS);
        let (lo, hi) = (eps.f64(), (T::one() - eps).f64());
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let (p, t) = (p.f64().clamp(lo, hi), t.f64());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let loss = Tensor::scalar(T::of(total / p.numel() as f64));
        self.push(
            "bce_loss",
            loss,
            Op::Bce {
                p: ip,
                target: target.clone(),
                eps,
            },
        )
    }

    /// `1 - mean_c (2 sum(p t) + s) / (sum(p) + sum(t) + s)`, sums taken per
    /// channel over the batch and all voxels.
    pub fn soft_dice_loss(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        let ip = self.check(probs)?;
        let p = self.node_value(ip);
        check_same("soft_dice_loss", p.shape(), target.shape())?;
        let s = dice_sums(p, target, DICE_SMOOTH)?;
        let mean_dice = s
            .inter
            .iter()
            .zip(&s.denom)
            .map(|(i, d)| (2.0 * i + DICE_SMOOTH) / d)
            .sum::<f64>()
            / s.channels as f64;
        self.push(
            "soft_dice_loss",
            Tensor::scalar(T::of(1.0 - mean_dice)),
            Op::SoftDice {
                p: ip,
                target: target.clone(),
                smooth: T::of(DICE_SMOOTH),
            },
        )
    }
}

/// BCE + soft Dice with unit weights on `sigmoid(logits)`.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    target: &Tensor<T>,
) -> Result<Var> {
    let probs = tape.sigmoid(logits)?;
    let bce = tape.bce_loss(probs, target)?;
    let dice = tape.soft_dice_loss(probs, target)?;
    tape.add(bce, dice)
}

/// Halving weights for `n` heads (finest first), normalized to sum to one.
pub fn deep_supervision_weights(n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|i| 0.5f64.powi(i as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

pub fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, losses: &[Var], weights: &[f64]) -> Result<Var> {
    if losses.is_empty() || losses.len() != weights.len() {
        return Err(Error::invalid(
            "weighted_sum",
            format!("{} losses but {} weights", losses.len(), weights.len()),
        ));
    }
    let mut total = tape.scale(losses[0], T::of(weights[0]))?;
    for (&l, &w) in losses.iter().zip(weights).skip(1) {
        let term = tape.scale(l, T::of(w))?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Max-pool binary targets `[B, C, D, H, W]` by `factor`: a coarse voxel is
/// set when any of its constituents is.
pub fn downsample_targets<T: Scalar>(targets: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [b, c, d, h, w] = targets.dims5("downsample_targets")?;
    if factor == 1 {
        return Ok(targets.clone());
    }
    if factor == 0 || d % factor != 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Geometry(format!(
            "targets {:?} not divisible by {factor}",
            [d, h, w]
        )));
    }
    let (od, oh, ow) = (d / factor, h / factor, w / factor);
    let src = targets.data();
    let mut out = vec![T::zero(); b * c * od * oh * ow];
    for s in 0..b * c {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = src[((s * d + z) * h + y) * w + x];
                    let o = &mut out[((s * od + z / factor) * oh + y / factor) * ow + x / factor];
                    *o = o.max(v);
                }
            }
        }
    }
    Tensor::from_vec([b, c, od, oh, ow], out)
}

/// Weighted combined loss over heads (finest first) against full-resolution
/// targets; head `i` is scored against targets max-pooled by `2^i`.
pub fn deep_supervision_loss_weighted<T: Scalar>(
    tape: &mut Tape<T>,
    heads: &[Var],
    targets: &Tensor<T>,
    weights: &[f64],
) -> Result<Var> {
    if heads.len() != weights.len() || heads.is_empty() {
        return Err(Error::invalid(
            "deep_supervision_loss",
            format!("{} heads but {} weights", heads.len(), weights.len()),
        ));
    }
    let mut losses = Vec::with_capacity(heads.len());
    let mut level_targets = targets.clone();
    for (i, &head) in heads.iter().enumerate() {
        if i > 0 {
            level_targets = downsample_targets(&level_targets, 2)?;
        }
        losses.push(combined_loss(tape, head, &level_targets)?);
    }
    weighted_sum(tape, &losses, weights)
}

pub fn deep_supervision_loss<T: Scalar>(
    tape: &mut Tape<T>,
    heads: &[Var],
    targets: &Tensor<T>,
) -> Result<Var> {
    deep_supervision_loss_weighted(tape, heads, targets, &deep_supervision_weights(heads.len()))
}
