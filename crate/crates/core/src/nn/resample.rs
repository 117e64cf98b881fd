//! Average pooling and interpolation upsampling over the spatial axes.

use crate::error::{Error, Result};
use crate::nn::UpsampleMode;
use crate::tensor::{Scalar, Tensor};

pub(crate) fn avg_pool_forward<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [b, c, d, h, w] = x.dims5("avg_pool3d")?;
    if r == 0 {
        return Err(Error::invalid(
            "avg_pool3d",
            "pooling rate must be positive",
        ));
    }
    if d % r != 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Geometry(format!(
            "avg_pool3d: extents {:?} not divisible by rate {r}",
            [d, h, w]
        )));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    let (od, oh, ow) = (d / r, h / r, w / r);
    let inv = 1.0 / (r * r * r) as f64;
    let src = x.data();
    let mut out = Vec::with_capacity(b * c * od * oh * ow);
    for s in 0..b * c {
        let slice = &src[s * d * h * w..][..d * h * w];
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0f64;
                    for dz in 0..r {
                        for dy in 0..r {
                            let row = &slice[((z * r + dz) * h + y * r + dy) * w + xo * r..][..r];
                            acc += row.iter().map(|v| v.f64()).sum::<f64>();
                        }
                    }
                    out.push(T::of(acc * inv));
                }
            }
        }
    }
    Tensor::from_vec([b, c, od, oh, ow], out)
}

pub(crate) fn avg_pool_backward<T: Scalar>(in_shape: &[usize], g: &[T], r: usize) -> Vec<T> {
    if r == 1 {
        return g.to_vec();
    }
    let (d, h, w) = (in_shape[2], in_shape[3], in_shape[4]);
    let slices = in_shape[0] * in_shape[1];
    let (od, oh, ow) = (d / r, h / r, w / r);
    let inv = T::of(1.0 / (r * r * r) as f64);
    let mut dx = vec![T::zero(); slices * d * h * w];
    for s in 0..slices {
        let gs = &g[s * od * oh * ow..][..od * oh * ow];
        let ds = &mut dx[s * d * h * w..][..d * h * w];
        for z in 0..d {
            for y in 0..h {
                let grow = &gs[((z / r) * oh + y / r) * ow..][..ow];
                let drow = &mut ds[(z * h + y) * w..][..w];
                for (x, v) in drow.iter_mut().enumerate() {
                    *v = grow[x / r] * inv;
                }
            }
        }
    }
    dx
}

/// Per-axis source taps `(i0, i1, weight of i1)` for half-pixel-centred
/// linear interpolation (corners not aligned).
fn linear_taps(n: usize, r: usize) -> Vec<(usize, usize, f64)> {
    (0..n * r)
        .map(|o| {
            let src = ((o as f64 + 0.5) / r as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l1 = if i0 == n - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, l1)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Scalar>(
    x: &Tensor<T>,
    r: usize,
    mode: UpsampleMode,
) -> Result<Tensor<T>> {
    let [b, c, d, h, w] = x.dims5("upsample3d")?;
    if r == 0 {
        return Err(Error::invalid(
            "upsample3d",
            "scale factor must be positive",
        ));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    let (od, oh, ow) = (d * r, h * r, w * r);
    let src = x.data();
    let mut out = Vec::with_capacity(b * c * od * oh * ow);
    match mode {
        UpsampleMode::Nearest => {
            for s in 0..b * c {
                let slice = &src[s * d * h * w..][..d * h * w];
                for z in 0..od {
                    for y in 0..oh {
                        let row = &slice[((z / r) * h + y / r) * w..][..w];
                        out.extend((0..ow).map(|xo| row[xo / r]));
                    }
                }
            }
        }
        UpsampleMode::Trilinear => {
            let (tz, ty, tx) = (linear_taps(d, r), linear_taps(h, r), linear_taps(w, r));
            for s in 0..b * c {
                let slice = &src[s * d * h * w..][..d * h * w];
                let at = |z: usize, y: usize, x: usize| slice[(z * h + y) * w + x].f64();
                for &(z0, z1, lz) in &tz {
                    for &(y0, y1, ly) in &ty {
                        for &(x0, x1, lx) in &tx {
                            let c00 = at(z0, y0, x0) * (1.0 - lx) + at(z0, y0, x1) * lx;
                            let c01 = at(z0, y1, x0) * (1.0 - lx) + at(z0, y1, x1) * lx;
                            let c10 = at(z1, y0, x0) * (1.0 - lx) + at(z1, y0, x1) * lx;
                            let c11 = at(z1, y1, x0) * (1.0 - lx) + at(z1, y1, x1) * lx;
                            let c0 = c00 * (1.0 - ly) + c01 * ly;
                            let c1 = c10 * (1.0 - ly) + c11 * ly;
                            out.push(T::of(c0 * (1.0 - lz) + c1 * lz));
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec([b, c, od, oh, ow], out)
}

pub(crate) fn upsample_backward<T: Scalar>(
    in_shape: &[usize],
    g: &[T],
    r: usize,
    mode: UpsampleMode,
) -> Vec<T> {
    if r == 1 {
        return g.to_vec();
    }
    let (d, h, w) = (in_shape[2], in_shape[3], in_shape[4]);
    let slices = in_shape[0] * in_shape[1];
    let (od, oh, ow) = (d * r, h * r, w * r);
    let mut dx = vec![0.0f64; slices * d * h * w];
    match mode {
        UpsampleMode::Nearest => {
            for s in 0..slices {
                let gs = &g[s * od * oh * ow..][..od * oh * ow];
                let ds = &mut dx[s * d * h * w..][..d * h * w];
                for z in 0..od {
                    for y in 0..oh {
                        let grow = &gs[(z * oh + y) * ow..][..ow];
                        let drow = &mut ds[((z / r) * h + y / r) * w..][..w];
                        for (xo, v) in grow.iter().enumerate() {
                            drow[xo / r] += v.f64();
                        }
                    }
                }
            }
        }
        UpsampleMode::Trilinear => {
            let (tz, ty, tx) = (linear_taps(d, r), linear_taps(h, r), linear_taps(w, r));
            for s in 0..slices {
                let gs = &g[s * od * oh * ow..][..od * oh * ow];
                let ds = &mut dx[s * d * h * w..][..d * h * w];
                let mut i = 0;
                for &(z0, z1, lz) in &tz {
                    for &(y0, y1, ly) in &ty {
                        for &(x0, x1, lx) in &tx {
                            let gv = gs[i].f64();
                            i += 1;
                            for (z, wz) in [(z0, 1.0 - lz), (z1, lz)] {
                                for (y, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                                    let row = (z * h + y) * w;
                                    ds[row + x0] += gv * wz * wy * (1.0 - lx);
                                    ds[row + x1] += gv * wz * wy * lx;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx.into_iter().map(T::of).collect()
}
