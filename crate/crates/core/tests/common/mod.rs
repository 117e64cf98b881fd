//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use proptest::prelude::*;
use scseg::nn::{ConvBlock, ConvSpec};
use scseg::regions::LabelVolume;
use scseg::{Bound, Tape, Tensor, Var};

/// Label volumes up to 6³ with codes drawn from {0, 1, 2, 3}.
pub fn label_volume() -> impl Strategy<Value = LabelVolume> {
    prop::array::uniform3(1usize..=6).prop_flat_map(|dims| {
        let n = dims.iter().product::<usize>();
        prop::collection::vec(0u8..=3, n).prop_map(move |v| LabelVolume::new(dims, v).unwrap())
    })
}

/// Tiny phantom geometry that keeps the nested-shell ordering valid.
pub fn small_phantom(seed: u64) -> scseg::data::PhantomSpec {
    scseg::data::PhantomSpec {
        extent: [24, 24, 24],
        brain_radii: [10.0, 11.0, 9.5],
        center_jitter: 1.5,
        wt_radius: [4.5, 6.0],
        tc_radius: [3.0, 4.0],
        ncr_radius: [1.0, 2.0],
        seed,
        ..Default::default()
    }
}

/// Direct cross-correlation with zero padding, summed in f64.
pub fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], spec: ConvSpec) -> Tensor<f64> {
    let [n, cin, d, h, wd] = x.dims5("ref").unwrap();
    let [cout, cin_g, kd, kh, kw] = w.dims5("ref").unwrap();
    let g = spec.groups;
    let cout_g = cout / g;
    let ext = |i: usize, k: usize, a: usize| (i + 2 * spec.padding[a] - k) / spec.stride[a] + 1;
    let (od, oh, ow) = (ext(d, kd, 0), ext(h, kh, 1), ext(wd, kw, 2));
    let (xs, ws) = (x.data(), w.data());
    let mut out = vec![0.0; n * cout * od * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            let grp = co / cout_g;
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin_g {
                            let c = grp * cin_g + ci;
                            for dz in 0..kd {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let z = (oz * spec.stride[0] + dz) as isize
                                            - spec.padding[0] as isize;
                                        let y = (oy * spec.stride[1] + dy) as isize
                                            - spec.padding[1] as isize;
                                        let xx = (ox * spec.stride[2] + dx) as isize
                                            - spec.padding[2] as isize;
                                        if z < 0
                                            || y < 0
                                            || xx < 0
                                            || z >= d as isize
                                            || y >= h as isize
                                            || xx >= wd as isize
                                        {
                                            continue;
                                        }
                                        let (z, y, xx) = (z as usize, y as usize, xx as usize);
                                        let xv = xs[(((bi * cin + c) * d + z) * h + y) * wd + xx];
                                        let wv =
                                            ws[(((co * cin_g + ci) * kd + dz) * kh + dy) * kw + dx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[(((bi * cout + co) * od + oz) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec([n, cout, od, oh, ow], out).unwrap()
}

/// Convolution, norm and optional activation spelled out with primitives.
pub fn conv_block(tape: &mut Tape<f64>, p: &Bound, b: &ConvBlock, x: Var) -> Var {
    let w = p.var(b.conv.weight);
    let bias = p.var(b.conv.bias);
    let y = tape.conv3d(x, w, Some(bias), b.conv.spec).unwrap();
    let y = tape
        .instance_norm(y, p.var(b.norm.gamma), p.var(b.norm.beta), b.norm.eps)
        .unwrap();
    match b.act_slope {
        Some(s) => tape.leaky_relu(y, s).unwrap(),
        None => y,
    }
}
