//! Finite-difference verification of reverse-mode gradients in `f64`.
//!
//! Every scope builds a scalar loss from some inputs; each input element is
//! perturbed by `±h` and the central difference is compared with the
//! analytic gradient. The error of a group (one input or parameter tensor)
//! is its largest absolute discrepancy divided by its largest gradient
//! magnitude, floored at 1e-8. Tensor outputs are
//! reduced with fixed random weights scaled by `0.01 / numel`, which keeps the
//! loss small so rounding in the difference stays below the error floor.
//!
//! A probe whose `±h` points fall on different sides of a leaky-ReLU kink
//! than the base point is retried with `h / 10` and `h / 100` and skipped if
//! the crossing persists.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvSpec, UpsampleMode, NORM_EPS};
use crate::params::{Bound, ParamStore};
use crate::sc_conv::{ScConv, ScConvConfig};
use crate::tensor::Tensor;
use crate::unet::{build_network, UNetConfig, VariantId};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;
const ERROR_FLOOR: f64 = 1e-8;
/// Rounding noise of a difference grows with the loss magnitude. Gradients
/// that are exactly zero (a bias feeding instance normalization) are judged
/// against the floor, so the loss is kept well below one.
const PROJECTION_SCALE: f64 = 1e-2;

/// Primitive scopes, in report order.
pub const OP_SCOPES: [&str; 16] = [
    "add",
    "mul",
    "scale",
    "sum",
    "sigmoid",
    "leaky_relu",
    "concat",
    "slice",
    "conv3d",
    "conv_transpose3d",
    "avg_pool3d",
    "upsample_nearest",
    "upsample_trilinear",
    "instance_norm",
    "bce",
    "soft_dice",
];
pub const MODULE_SCOPES: [&str; 2] = ["scconv", "unet-tiny"];

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub name: String,
    /// `max |a - n| / max(max |a|, max |n|, 1e-8)` over the group.
    pub max_rel_err: f64,
    /// `max |a - n| / max(|a|, |n|, 1e-8)` element by element. Reported
    /// only: elements whose gradient nearly cancels carry the group's
    /// O(h^2) truncation error against a tiny denominator.
    pub max_elementwise_err: f64,
    pub checked: usize,
    /// Probes abandoned because they straddled a kink at every step size.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub scope: String,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.groups
            .iter()
            .all(|g| g.max_rel_err < tol && g.checked > 0)
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(ERROR_FLOOR)
}

type LossFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn eval(inputs: &[Tensor<f64>], f: &LossFn) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape.value(loss).item(), tape.kink_signature()))
}

/// Compare analytic and numeric gradients of `f` for every element of
/// every named input.
pub fn check_graph(
    scope: &str,
    inputs: Vec<(String, Tensor<f64>)>,
    h: f64,
    f: &LossFn,
) -> Result<GradcheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), true))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let base_sig = tape.kink_signature();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, (name, _))| {
            tape.grad(v)
                .cloned()
                .ok_or_else(|| Error::MissingGradient(name.clone()))
        })
        .collect::<Result<_>>()?;

    let mut probe: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut groups = Vec::with_capacity(inputs.len());
    for (g, (name, _)) in inputs.iter().enumerate() {
        let mut result = GroupResult {
            name: name.clone(),
            max_rel_err: 0.0,
            max_elementwise_err: 0.0,
            checked: 0,
            skipped: 0,
        };
        let (mut max_diff, mut max_mag) = (0.0f64, 0.0f64);
        for i in 0..probe[g].numel() {
            let orig = probe[g].data()[i];
            let mut numeric = None;
            for step in [h, h / 10.0, h / 100.0] {
                probe[g].data_mut()[i] = orig + step;
                let (up, sig_up) = eval(&probe, f)?;
                probe[g].data_mut()[i] = orig - step;
                let (down, sig_down) = eval(&probe, f)?;
                probe[g].data_mut()[i] = orig;
                if sig_up == base_sig && sig_down == base_sig {
                    numeric = Some((up - down) / (2.0 * step));
                    break;
                }
            }
            match numeric {
                Some(n) => {
                    let a = analytic[g].data()[i];
                    result.max_elementwise_err =
                        result.max_elementwise_err.max(relative_error(a, n));
                    max_diff = max_diff.max((a - n).abs());
                    max_mag = max_mag.max(a.abs()).max(n.abs());
                    result.checked += 1;
                }
                None => result.skipped += 1,
            }
        }
        result.max_rel_err = max_diff / max_mag.max(ERROR_FLOOR);
        groups.push(result);
    }
    Ok(GradcheckReport {
        scope: scope.to_string(),
        groups,
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(y * R) * PROJECTION_SCALE / numel(y)` with `R` drawn from `seed`.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n = tape.value(y).numel() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(Tensor::from_fn(shape, |_| {
        rng.random_range(-1.0..1.0) * PROJECTION_SCALE / n
    }));
    let prod = tape.mul(y, r)?;
    tape.sum(prod)
}

fn named(pairs: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn op_check(scope: &str, h: f64, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = |rng: &mut ChaCha8Rng, shape: &[usize]| uniform(shape, -1.0, 1.0, rng);
    let s5 = [2, 3, 4, 4, 4];
    match scope {
        "add" | "mul" => {
            let inputs = named(vec![("a", x(&mut rng, &s5)), ("b", x(&mut rng, &s5))]);
            let mul = scope == "mul";
            check_graph(scope, inputs, h, &move |t, v| {
                let y = if mul {
                    t.mul(v[0], v[1])?
                } else {
                    t.add(v[0], v[1])?
                };
                project(t, y, 1)
            })
        }
        "scale" => check_graph(scope, named(vec![("x", x(&mut rng, &s5))]), h, &|t, v| {
            let y = t.scale(v[0], -1.7)?;
            project(t, y, 1)
        }),
        "sum" => check_graph(scope, named(vec![("x", x(&mut rng, &s5))]), h, &|t, v| {
            let y = t.sum(v[0])?;
            t.scale(y, 0.3)
        }),
        "sigmoid" => {
            let inputs = named(vec![("x", uniform(&s5, -6.0, 6.0, &mut rng))]);
            check_graph(scope, inputs, h, &|t, v| {
                let y = t.sigmoid(v[0])?;
                project(t, y, 1)
            })
        }
        "leaky_relu" => check_graph(scope, named(vec![("x", x(&mut rng, &s5))]), h, &|t, v| {
            let y = t.leaky_relu(v[0], 0.01)?;
            project(t, y, 1)
        }),
        "concat" => {
            let inputs = named(vec![
                ("a", x(&mut rng, &[2, 3, 3, 3, 3])),
                ("b", x(&mut rng, &[2, 2, 3, 3, 3])),
            ]);
            check_graph(scope, inputs, h, &|t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                project(t, y, 1)
            })
        }
        "slice" => check_graph(
            scope,
            named(vec![("x", x(&mut rng, &[2, 5, 3, 3, 3]))]),
            h,
            &|t, v| {
                let y = t.slice_channels(v[0], 1, 3)?;
                project(t, y, 1)
            },
        ),
        "conv3d" => {
            let mut inputs = Vec::new();
            // (stride, groups, kernel)
            let configs = [(1, 1, 3), (2, 1, 3), (1, 2, 1), (2, 2, 3)];
            for (i, &(_, groups, k)) in configs.iter().enumerate() {
                let (cin, cout) = (4, 4);
                inputs.push((format!("c{i}.x"), x(&mut rng, &[2, cin, 5, 4, 6])));
                inputs.push((
                    format!("c{i}.w"),
                    x(&mut rng, &[cout, cin / groups, k, k, k]),
                ));
                inputs.push((format!("c{i}.b"), x(&mut rng, &[cout])));
            }
            check_graph(scope, inputs, h, &move |t, v| {
                let mut total: Option<Var> = None;
                for (i, &(stride, groups, k)) in configs.iter().enumerate() {
                    let spec = ConvSpec {
                        stride: [stride; 3],
                        padding: [k / 2; 3],
                        groups,
                    };
                    let y = t.conv3d(v[3 * i], v[3 * i + 1], Some(v[3 * i + 2]), spec)?;
                    let l = project(t, y, i as u64)?;
                    total = Some(match total {
                        Some(s) => t.add(s, l)?,
                        None => l,
                    });
                }
                Ok(total.expect("at least one config"))
            })
        }
        "conv_transpose3d" => {
            let inputs = named(vec![
                ("x", x(&mut rng, &[2, 4, 3, 2, 3])),
                ("w", x(&mut rng, &[4, 3, 2, 2, 2])),
                ("b", x(&mut rng, &[3])),
                ("x_k3", x(&mut rng, &[1, 2, 3, 3, 2])),
                ("w_k3", x(&mut rng, &[2, 2, 3, 3, 3])),
            ]);
            check_graph(scope, inputs, h, &|t, v| {
                let y = t.conv_transpose3d(v[0], v[1], Some(v[2]), ConvSpec::tiled(2))?;
                let a = project(t, y, 1)?;
                let spec = ConvSpec {
                    stride: [2; 3],
                    padding: [1; 3],
                    groups: 1,
                };
                let z = t.conv_transpose3d(v[3], v[4], None, spec)?;
                let b = project(t, z, 2)?;
                t.add(a, b)
            })
        }
        "avg_pool3d" => check_graph(
            scope,
            named(vec![("x", x(&mut rng, &[2, 3, 4, 6, 4]))]),
            h,
            &|t, v| {
                let y = t.avg_pool3d(v[0], 2)?;
                project(t, y, 1)
            },
        ),
        "upsample_nearest" | "upsample_trilinear" => {
            let mode = if scope == "upsample_nearest" {
                UpsampleMode::Nearest
            } else {
                UpsampleMode::Trilinear
            };
            check_graph(
                scope,
                named(vec![("x", x(&mut rng, &[2, 2, 3, 2, 4]))]),
                h,
                &move |t, v| {
                    let y = t.upsample3d(v[0], 2, mode)?;
                    let a = project(t, y, 1)?;
                    let z = t.upsample3d(v[0], 3, mode)?;
                    let b = project(t, z, 2)?;
                    t.add(a, b)
                },
            )
        }
        "instance_norm" => {
            let inputs = named(vec![
                ("x", uniform(&[2, 3, 3, 4, 3], -2.0, 2.0, &mut rng)),
                ("gamma", uniform(&[3], 0.5, 1.5, &mut rng)),
                ("beta", x(&mut rng, &[3])),
            ]);
            check_graph(scope, inputs, h, &|t, v| {
                let y = t.instance_norm(v[0], v[1], v[2], NORM_EPS)?;
                project(t, y, 1)
            })
        }
        "bce" | "soft_dice" => {
            let shape = [2, 3, 3, 3, 3];
            let target = Tensor::from_fn(shape, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
            let inputs = named(vec![("p", uniform(&shape, 0.05, 0.95, &mut rng))]);
            let bce = scope == "bce";
            check_graph(scope, inputs, h, &move |t, v| {
                if bce {
                    t.bce_loss(v[0], &target)
                } else {
                    t.soft_dice_loss(v[0], &target)
                }
            })
        }
        other => Err(Error::invalid(
            "gradcheck",
            format!("unknown scope {other:?}"),
        )),
    }
}

/// Inputs for a parameterized model: the data tensor plus every parameter.
fn store_inputs(x: Tensor<f64>, store: &ParamStore<f64>) -> Vec<(String, Tensor<f64>)> {
    std::iter::once(("input".to_string(), x))
        .chain(store.iter().map(|p| (p.name.clone(), p.value.clone())))
        .collect()
}

/// Give normalization affine terms and biases non-trivial values so that
/// the check does not run at the identity initialization only.
fn perturb_store(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    for p in store.iter_mut() {
        if p.value.shape().len() == 1 {
            let gamma = p.name.ends_with("gamma");
            for v in p.value.data_mut() {
                *v = if gamma {
                    rng.random_range(0.5..1.5)
                } else {
                    rng.random_range(-0.5..0.5)
                };
            }
        }
    }
}

/// The self-calibrated module with 4 channels on a 6³ grid and rate 2.
pub fn check_scconv(h: f64, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let sc = ScConv::new(&mut store, &mut rng, "sc", ScConvConfig::new(4, 4, 2))?;
    perturb_store(&mut store, &mut rng);
    let inputs = store_inputs(uniform(&[1, 4, 6, 6, 6], -1.0, 1.0, &mut rng), &store);
    check_graph("scconv", inputs, h, &|t, v| {
        let bound = Bound::from_vars(v[1..].to_vec());
        let y = sc.forward(t, &bound, v[0])?;
        project(t, y, 3)
    })
}

/// Depth-2 network with 2 base channels on 8³ patches, for `variant`.
pub fn check_unet_tiny(variant: VariantId, h: f64, seed: u64) -> Result<GradcheckReport> {
    let cfg = UNetConfig {
        depth: 2,
        base_channels: 2,
        patch_size: 8,
        variant,
        ..UNetConfig::default()
    };
    let mut net = build_network::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    perturb_store(net.params_mut(), &mut rng);
    let inputs = store_inputs(uniform(&[1, 4, 8, 8, 8], -1.0, 1.0, &mut rng), net.params());
    check_graph(&format!("unet-tiny/{variant}"), inputs, h, &|t, v| {
        let bound = Bound::from_vars(v[1..].to_vec());
        let heads = net.forward(t, &bound, v[0])?;
        let mut total = project(t, heads[0], 10)?;
        for (i, &hd) in heads.iter().enumerate().skip(1) {
            let l = project(t, hd, 10 + i as u64)?;
            total = t.add(total, l)?;
        }
        Ok(total)
    })
}

/// Run a named scope: a primitive from [`OP_SCOPES`], `scconv`,
/// `unet-tiny` (all four variants), `ops` or `all`.
pub fn run_scope(scope: &str, h: f64, seed: u64) -> Result<Vec<GradcheckReport>> {
    match scope {
        "scconv" => Ok(vec![check_scconv(h, seed)?]),
        "unet-tiny" => VariantId::ALL
            .iter()
            .map(|&v| check_unet_tiny(v, h, seed))
            .collect(),
        "ops" => OP_SCOPES.iter().map(|s| op_check(s, h, seed)).collect(),
        "all" => {
            let mut out = run_scope("ops", h, seed)?;
            out.extend(run_scope("scconv", h, seed)?);
            out.extend(run_scope("unet-tiny", h, seed)?);
            Ok(out)
        }
        op => Ok(vec![op_check(op, h, seed)?]),
    }
}

pub fn is_known_scope(scope: &str) -> bool {
    OP_SCOPES.contains(&scope) || MODULE_SCOPES.contains(&scope) || matches!(scope, "ops" | "all")
}
