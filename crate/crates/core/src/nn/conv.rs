//! 3D cross-correlation and its transpose, lowered to GEMM through im2col.
//!
//! Both operators share one geometry description: a forward convolution
//! from an "image" side `[cin, D, H, W]` to a "column" side
//! `[cout, OD, OH, OW]` with weight `[cout, cin / groups, kd, kh, kw]`.
//! The transposed convolution is the adjoint of that map, so it reuses the
//! same three kernels with the roles of data and gradient exchanged.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_ld, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1 with the padding that preserves extents for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        ConvSpec {
            stride: [1; 3],
            padding: [kernel / 2; 3],
            groups: 1,
        }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        ConvSpec {
            stride: [stride; 3],
            padding: [kernel / 2; 3],
            groups: 1,
        }
    }

    /// Non-overlapping `k`-window with stride `k`, the usual transposed
    /// upsampling geometry.
    pub fn tiled(k: usize) -> Self {
        ConvSpec {
            stride: [k; 3],
            padding: [0; 3],
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub dims: [usize; 3],
    pub k: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out: [usize; 3],
}

impl Geom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn in_vol(&self) -> usize {
        self.dims.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }
    fn k_vol(&self) -> usize {
        self.k.iter().product()
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.k_vol()
    }
    fn pointwise(&self) -> bool {
        self.k == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }
}

fn weight_dims(op: &'static str, w: &Tensor<impl Scalar>) -> Result<[usize; 5]> {
    match *w.shape() {
        [a, b, kd, kh, kw] => Ok([a, b, kd, kh, kw]),
        ref s => Err(Error::invalid(
            op,
            format!("weight must have 5 axes, got {s:?}"),
        )),
    }
}

fn check_groups(op: &'static str, cin: usize, cout: usize, groups: usize) -> Result<()> {
    if groups == 0 || !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
        return Err(Error::invalid(
            op,
            format!("channels {cin} -> {cout} are not divisible into {groups} groups"),
        ));
    }
    Ok(())
}

pub(crate) fn conv3d_geom<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: ConvSpec) -> Result<Geom> {
    const OP: &str = "conv3d";
    let [b, c, d, h, wd] = x.dims5(OP)?;
    let [cout, cin_g, kd, kh, kw] = weight_dims(OP, w)?;
    check_groups(OP, c, cout, spec.groups)?;
    if cin_g * spec.groups != c {
        return Err(Error::invalid(
            OP,
            format!(
                "input has {c} channels but weight expects {} ({cin_g} per group x {} groups)",
                cin_g * spec.groups,
                spec.groups
            ),
        ));
    }
    let dims = [d, h, wd];
    let k = [kd, kh, kw];
    let mut out = [0; 3];
    for a in 0..3 {
        if spec.stride[a] == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        let padded = dims[a] + 2 * spec.padding[a];
        if k[a] > padded {
            return Err(Error::invalid(
                OP,
                format!("kernel {k:?} larger than padded input {dims:?}"),
            ));
        }
        out[a] = (padded - k[a]) / spec.stride[a] + 1;
    }
    Ok(Geom {
        batch: b,
        cin: c,
        cout,
        groups: spec.groups,
        dims,
        k,
        stride: spec.stride,
        pad: spec.padding,
        out,
    })
}

/// Geometry of the forward convolution whose adjoint is the requested
/// transposed convolution: the transposed output is the image side.
pub(crate) fn conv_transpose3d_geom<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Geom> {
    const OP: &str = "conv_transpose3d";
    let [b, c, d, h, wd] = x.dims5(OP)?;
    let [cin, cout_g, kd, kh, kw] = weight_dims(OP, w)?;
    if cin != c {
        return Err(Error::invalid(
            OP,
            format!("input has {c} channels but weight expects {cin}"),
        ));
    }
    let cout = cout_g * spec.groups;
    check_groups(OP, cin, cout, spec.groups)?;
    let ins = [d, h, wd];
    let k = [kd, kh, kw];
    let mut out = [0; 3];
    for a in 0..3 {
        if spec.stride[a] == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        let full = (ins[a] - 1) * spec.stride[a] + k[a];
        if full <= 2 * spec.padding[a] {
            return Err(Error::invalid(
                OP,
                format!("non-positive output extent on axis {a}"),
            ));
        }
        out[a] = full - 2 * spec.padding[a];
    }
    Ok(Geom {
        batch: b,
        cin: cout,
        cout: cin,
        groups: spec.groups,
        dims: out,
        k,
        stride: spec.stride,
        pad: spec.padding,
        out: ins,
    })
}

/// Output z-planes per im2col slab, sized so the column buffer stays in
/// cache. The full buffer for a 32^3 volume is tens of megabytes.
fn slab_planes(g: &Geom) -> usize {
    const TARGET: usize = 1 << 17;
    let plane = g.out[1] * g.out[2];
    (TARGET / (g.col_rows() * plane).max(1)).clamp(1, g.out[0].max(1))
}

/// Output x-range whose input tap `x*sw + e - pw` lies inside `0..w`.
fn x_range(w: usize, ow: usize, e: usize, sw: usize, pw: usize) -> (usize, usize) {
    let lo = if e >= pw { 0 } else { (pw - e).div_ceil(sw) };
    let hi = if w + pw > e {
        ((w + pw - e - 1) / sw + 1).min(ow)
    } else {
        0
    };
    (lo, hi)
}

/// Lay out every receptive field of one channel group as a column, for
/// output planes `zs` only. `col` is `rows x (zs.len() * plane)`.
fn im2col<T: Scalar>(img: &[T], g: &Geom, zs: Range<usize>, col: &mut [T]) {
    let [d, h, w] = g.dims;
    let [_, oh, ow] = g.out;
    let [kd, kh, kw] = g.k;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let (vol, plane) = (d * h * w, oh * ow);
    let n = zs.len() * plane;
    let mut row = 0;
    for c in 0..g.cin_g() {
        let src = &img[c * vol..(c + 1) * vol];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut col[row * n..(row + 1) * n];
                    row += 1;
                    let (x_lo, x_hi) = x_range(w, ow, e, sw, pw);
                    for (zi, z) in zs.clone().enumerate() {
                        let zz = (z * sd + a) as isize - pd as isize;
                        let slab = &mut dst[zi * plane..(zi + 1) * plane];
                        if zz < 0 || zz >= d as isize {
                            slab.fill(T::zero());
                            continue;
                        }
                        for y in 0..oh {
                            let yy = (y * sh + b) as isize - ph as isize;
                            let line = &mut slab[y * ow..(y + 1) * ow];
                            if yy < 0 || yy >= h as isize || x_lo >= x_hi {
                                line.fill(T::zero());
                                continue;
                            }
                            let src_line = &src[(zz as usize * h + yy as usize) * w..][..w];
                            line[..x_lo].fill(T::zero());
                            line[x_hi..].fill(T::zero());
                            if sw == 1 {
                                let off = x_lo + e - pw;
                                line[x_lo..x_hi].copy_from_slice(&src_line[off..off + x_hi - x_lo]);
                            } else {
                                for (x, v) in line.iter_mut().enumerate().take(x_hi).skip(x_lo) {
                                    *v = src_line[x * sw + e - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the image.
fn col2im<T: Scalar>(col: &[T], g: &Geom, zs: Range<usize>, img: &mut [T]) {
    let [d, h, w] = g.dims;
    let [_, oh, ow] = g.out;
    let [kd, kh, kw] = g.k;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let (vol, plane) = (d * h * w, oh * ow);
    let n = zs.len() * plane;
    let mut row = 0;
    for c in 0..g.cin_g() {
        let dst = &mut img[c * vol..(c + 1) * vol];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &col[row * n..(row + 1) * n];
                    row += 1;
                    let (x_lo, x_hi) = x_range(w, ow, e, sw, pw);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for (zi, z) in zs.clone().enumerate() {
                        let zz = (z * sd + a) as isize - pd as isize;
                        if zz < 0 || zz >= d as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let yy = (y * sh + b) as isize - ph as isize;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            let line = &src[zi * plane + y * ow..][..ow];
                            let dst_line = &mut dst[(zz as usize * h + yy as usize) * w..][..w];
                            if sw == 1 {
                                let off = x_lo + e - pw;
                                for (d, s) in dst_line[off..off + x_hi - x_lo]
                                    .iter_mut()
                                    .zip(&line[x_lo..x_hi])
                                {
                                    *d += *s;
                                }
                            } else {
                                for (x, &v) in line.iter().enumerate().take(x_hi).skip(x_lo) {
                                    dst_line[x * sw + e - pw] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output plane ranges covered by successive slabs.
fn slabs(g: &Geom) -> impl Iterator<Item = Range<usize>> {
    let (od, step) = (g.out[0], slab_planes(g));
    (0..od).step_by(step).map(move |z| z..(z + step).min(od))
}

/// `out = W * im2col(img)` for one batch item (`out` overwritten).
fn forward_item<T: Scalar>(g: &Geom, img: &[T], w: &[T], out: &mut [T]) {
    let (cin_g, cout_g, kvol) = (g.cin_g(), g.cout_g(), g.k_vol());
    let (in_vol, out_vol, rows) = (g.in_vol(), g.out_vol(), g.col_rows());
    let plane = g.out[1] * g.out[2];
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * slab_planes(g) * plane]
    };
    for grp in 0..g.groups {
        let img_g = &img[grp * cin_g * in_vol..(grp + 1) * cin_g * in_vol];
        let w_g = MatRef::rows(
            &w[grp * cout_g * cin_g * kvol..(grp + 1) * cout_g * cin_g * kvol],
            cout_g,
            rows,
        );
        let out_g = &mut out[grp * cout_g * out_vol..(grp + 1) * cout_g * out_vol];
        if g.pointwise() {
            gemm(w_g, MatRef::rows(img_g, rows, out_vol), T::zero(), out_g);
            continue;
        }
        for zs in slabs(g) {
            let n = zs.len() * plane;
            im2col(img_g, g, zs.clone(), &mut col[..rows * n]);
            gemm_ld(
                w_g,
                MatRef::rows(&col, rows, n),
                T::zero(),
                &mut out_g[zs.start * plane..],
                out_vol,
            );
        }
    }
}

/// `dimg += col2im(W^T * dy)` for one batch item.
fn data_grad_item<T: Scalar>(g: &Geom, dy: &[T], w: &[T], dimg: &mut [T]) {
    let (cin_g, cout_g, kvol) = (g.cin_g(), g.cout_g(), g.k_vol());
    let (in_vol, out_vol, rows) = (g.in_vol(), g.out_vol(), g.col_rows());
    let plane = g.out[1] * g.out[2];
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * slab_planes(g) * plane]
    };
    for grp in 0..g.groups {
        let dy_g = &dy[grp * cout_g * out_vol..(grp + 1) * cout_g * out_vol];
        let w_t = MatRef::rows(
            &w[grp * cout_g * cin_g * kvol..(grp + 1) * cout_g * cin_g * kvol],
            cout_g,
            rows,
        )
        .t();
        let dimg_g = &mut dimg[grp * cin_g * in_vol..(grp + 1) * cin_g * in_vol];
        if g.pointwise() {
            gemm(w_t, MatRef::rows(dy_g, cout_g, out_vol), T::one(), dimg_g);
            continue;
        }
        for zs in slabs(g) {
            let n = zs.len() * plane;
            let dy_s = MatRef {
                data: &dy_g[zs.start * plane..],
                rows: cout_g,
                cols: n,
                rs: out_vol,
                cs: 1,
            };
            gemm(w_t, dy_s, T::zero(), &mut col[..rows * n]);
            col2im(&col, g, zs, dimg_g);
        }
    }
}

/// Weight gradient `dy * im2col(img)^T` of one batch item into `dw`.
fn weight_grad_item<T: Scalar>(g: &Geom, img: &[T], dy: &[T], dw: &mut [T]) {
    let (cin_g, cout_g, kvol) = (g.cin_g(), g.cout_g(), g.k_vol());
    let (in_vol, out_vol, rows) = (g.in_vol(), g.out_vol(), g.col_rows());
    let plane = g.out[1] * g.out[2];
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * slab_planes(g) * plane]
    };
    for grp in 0..g.groups {
        let img_g = &img[grp * cin_g * in_vol..(grp + 1) * cin_g * in_vol];
        let dy_g = &dy[grp * cout_g * out_vol..(grp + 1) * cout_g * out_vol];
        let dw_g = &mut dw[grp * cout_g * cin_g * kvol..(grp + 1) * cout_g * cin_g * kvol];
        if g.pointwise() {
            gemm(
                MatRef::rows(dy_g, cout_g, out_vol),
                MatRef::rows(img_g, rows, out_vol).t(),
                T::one(),
                dw_g,
            );
            continue;
        }
        for zs in slabs(g) {
            let n = zs.len() * plane;
            im2col(img_g, g, zs.clone(), &mut col[..rows * n]);
            let dy_s = MatRef {
                data: &dy_g[zs.start * plane..],
                rows: cout_g,
                cols: n,
                rs: out_vol,
                cs: 1,
            };
            gemm(dy_s, MatRef::rows(&col, rows, n).t(), T::one(), dw_g);
        }
    }
}

/// Run `f` on every batch item, in parallel unless deterministic mode
/// asks for a single thread. Each item writes only its own chunk.
fn for_each_item<T: Scalar>(out: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    if crate::deterministic() || out.len() <= chunk {
        out.chunks_mut(chunk).enumerate().for_each(|(n, o)| f(n, o));
    } else {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(n, o)| f(n, o));
    }
}

/// Sum per-item weight gradients in batch order.
fn weight_grad<T: Scalar>(g: &Geom, img: &[T], dy: &[T], dw_len: usize) -> Vec<T> {
    let (img_n, dy_n) = (g.cin * g.in_vol(), g.cout * g.out_vol());
    let mut parts = vec![T::zero(); g.batch * dw_len];
    for_each_item(&mut parts, dw_len, |n, part| {
        weight_grad_item(g, &img[n * img_n..][..img_n], &dy[n * dy_n..][..dy_n], part);
    });
    let mut dw = vec![T::zero(); dw_len];
    for part in parts.chunks(dw_len) {
        dw.iter_mut().zip(part).for_each(|(a, &b)| *a += b);
    }
    dw
}

fn bias_grad<T: Scalar>(dy: &[T], batch: usize, channels: usize, vol: usize) -> Vec<T> {
    let mut db = vec![0.0f64; channels];
    for n in 0..batch {
        for (c, acc) in db.iter_mut().enumerate() {
            let s = &dy[(n * channels + c) * vol..][..vol];
            *acc += s.iter().map(|v| v.f64()).sum::<f64>();
        }
    }
    db.into_iter().map(T::of).collect()
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], vol: usize) {
    for (i, chunk) in out.chunks_mut(vol).enumerate() {
        let b = bias[i % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op,
                expected: vec![cout],
                got: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

pub(crate) fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = conv3d_geom(x, w, spec)?;
    check_bias("conv3d", bias, g.cout)?;
    let (img_n, out_n) = (g.cin * g.in_vol(), g.cout * g.out_vol());
    let mut out = vec![T::zero(); g.batch * out_n];
    let (xd, wd) = (x.data(), w.data());
    for_each_item(&mut out, out_n, |n, o| {
        forward_item(&g, &xd[n * img_n..][..img_n], wd, o)
    });
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), g.out_vol());
    }
    let [od, oh, ow] = g.out;
    Tensor::from_vec([g.batch, g.cout, od, oh, ow], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
    spec: ConvSpec,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = conv3d_geom(x, w, spec)?;
    let (img_n, dy_n) = (g.cin * g.in_vol(), g.cout * g.out_vol());
    let input = need_input.then(|| {
        let mut dx = vec![T::zero(); g.batch * img_n];
        for_each_item(&mut dx, img_n, |n, o| {
            data_grad_item(&g, &dy[n * dy_n..][..dy_n], w.data(), o)
        });
        dx
    });
    Ok(ConvGrads {
        input,
        weight: weight_grad(&g, x.data(), dy, w.numel()),
        bias: bias_grad(dy, g.batch, g.cout, g.out_vol()),
    })
}

pub(crate) fn conv_transpose3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = conv_transpose3d_geom(x, w, spec)?;
    check_bias("conv_transpose3d", bias, g.cin)?;
    let (img_n, x_n) = (g.cin * g.in_vol(), g.cout * g.out_vol());
    let mut out = vec![T::zero(); g.batch * img_n];
    let (xd, wd) = (x.data(), w.data());
    for_each_item(&mut out, img_n, |n, o| {
        data_grad_item(&g, &xd[n * x_n..][..x_n], wd, o)
    });
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), g.in_vol());
    }
    let [d, h, wdim] = g.dims;
    Tensor::from_vec([g.batch, g.cin, d, h, wdim], out)
}

pub(crate) fn conv_transpose3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
    out_shape: &[usize],
    spec: ConvSpec,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_transpose3d_geom(x, w, spec)?;
    debug_assert_eq!(out_shape[2..], g.dims);
    let (img_n, x_n) = (g.cin * g.in_vol(), g.cout * g.out_vol());
    let input = need_input.then(|| {
        let mut dx = vec![T::zero(); g.batch * x_n];
        for_each_item(&mut dx, x_n, |n, o| {
            forward_item(&g, &dy[n * img_n..][..img_n], w.data(), o)
        });
        dx
    });
    Ok(ConvGrads {
        input,
        weight: weight_grad(&g, dy, x.data(), w.numel()),
        bias: bias_grad(dy, g.batch, g.cin, g.in_vol()),
    })
}
