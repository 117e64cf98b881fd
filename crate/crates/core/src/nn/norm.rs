//! Instance normalization: per (batch, channel) standardization with a
//! per-channel affine map. Statistics accumulate in `f64`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) fn instance_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<(T, T)>)> {
    let [b, c, d, h, w] = x.dims5("instance_norm")?;
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "instance_norm",
                expected: vec![c],
                got: p.shape().to_vec(),
            });
        }
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("instance_norm", "eps must be positive"));
    }
    let vol = d * h * w;
    let mut out = Vec::with_capacity(x.numel());
    let mut stats = Vec::with_capacity(b * c);
    for (s, slice) in x.data().chunks(vol).enumerate() {
        let ch = s % c;
        let mean = slice.iter().map(|v| v.f64()).sum::<f64>() / vol as f64;
        let var = slice
            .iter()
            .map(|v| {
                let e = v.f64() - mean;
                e * e
            })
            .sum::<f64>()
            / vol as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let (gm, bt) = (gamma.data()[ch].f64(), beta.data()[ch].f64());
        out.extend(
            slice
                .iter()
                .map(|v| T::of(gm * (v.f64() - mean) * inv + bt)),
        );
        stats.push((T::of(mean), T::of(inv)));
    }
    Ok((Tensor::from_vec(x.shape(), out)?, stats))
}

pub(crate) struct NormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn instance_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &[(T, T)],
    g: &[T],
) -> NormGrads<T> {
    let c = gamma.numel();
    let vol = x.numel() / stats.len();
    let n = vol as f64;
    let mut dx = Vec::with_capacity(x.numel());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (s, (slice, gs)) in x.data().chunks(vol).zip(g.chunks(vol)).enumerate() {
        let ch = s % c;
        let (mean, inv) = (stats[s].0.f64(), stats[s].1.f64());
        let mut gsum = 0.0;
        let mut gxhat = 0.0;
        for (&v, &gv) in slice.iter().zip(gs) {
            let xhat = (v.f64() - mean) * inv;
            gsum += gv.f64();
            gxhat += gv.f64() * xhat;
        }
        dgamma[ch] += gxhat;
        dbeta[ch] += gsum;
        let scale = gamma.data()[ch].f64() * inv;
        dx.extend(slice.iter().zip(gs).map(|(&v, &gv)| {
            let xhat = (v.f64() - mean) * inv;
            T::of(scale * (gv.f64() - gsum / n - xhat * gxhat / n))
        }));
    }
    NormGrads {
        input: dx,
        gamma: dgamma.into_iter().map(T::of).collect(),
        beta: dbeta.into_iter().map(T::of).collect(),
    }
}
