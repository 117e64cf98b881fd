mod common;

use common::conv_block as block;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scseg::nn::UpsampleMode;
use scseg::sc_conv::{ScConv, ScConvConfig, ScKernels};
use scseg::{ParamStore, Tape, Tensor};

fn build(cfg: ScConvConfig, seed: u64) -> (ParamStore<f64>, ScConv) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sc = ScConv::new(&mut store, &mut rng, "sc", cfg).unwrap();
    (store, sc)
}

/// Move every affine norm parameter and bias off its initial value so that
/// no path is trivially dead.
fn perturb(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    for p in store.iter_mut() {
        if p.name.ends_with("gamma") || p.name.ends_with("beta") || p.name.ends_with("bias") {
            let base = if p.name.ends_with("gamma") { 1.0 } else { 0.0 };
            for v in p.value.data_mut() {
                *v = base + rng.random_range(-0.3..0.3);
            }
        }
    }
}

fn input(shape: [usize; 5], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_keeps_spatial_shape(
        half in 1usize..=3,
        out in 1usize..=5,
        r in 1usize..=3,
        m in prop::array::uniform3(1usize..=3),
        k in prop::sample::select(vec![1usize, 3]),
        nearest in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut cfg = ScConvConfig::new(2 * half, out, r);
        cfg.kernels = ScKernels { split: 1, blocks: [k; 4], fusion: 1 };
        if nearest {
            cfg.upsample = UpsampleMode::Nearest;
        }
        let (store, sc) = build(cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = m.map(|e| e * r);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(input([1, 2 * half, dims[0], dims[1], dims[2]], &mut rng));
        let trace = sc.forward_traced(&mut tape, &p, x).unwrap();
        prop_assert_eq!(tape.value(trace.output).shape(), &[1, out, dims[0], dims[1], dims[2]]);
        for &g in tape.value(trace.gate).data() {
            prop_assert!(g > 0.0 && g < 1.0);
        }
    }
}

#[test]
fn shape_example() {
    let (store, sc) = build(ScConvConfig::new(8, 8, 2), 0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(Tensor::<f64>::ones([1, 8, 8, 8, 8]));
    let y = sc.forward(&mut tape, &p, x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 8, 8, 8, 8]);
}

#[test]
fn gate_stays_open_for_extreme_inputs() {
    let (store, sc) = build(ScConvConfig::new(4, 4, 2), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(Tensor::from_fn([1, 4, 4, 4, 4], |_| {
        rng.random_range(-1e3..1e3)
    }));
    let trace = sc.forward_traced(&mut tape, &p, x).unwrap();
    assert!(tape
        .value(trace.gate)
        .data()
        .iter()
        .all(|&g| g > 0.0 && g < 1.0));
}

#[test]
fn zero_parameters_emit_zeros() {
    let (mut store, sc) = build(ScConvConfig::new(4, 6, 2), 2);
    for p in store.iter_mut() {
        let fill = if p.name.ends_with("gamma") { 1.0 } else { 0.0 };
        p.value.data_mut().fill(fill);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(input([2, 4, 4, 6, 4], &mut rng));
    let y = sc.forward(&mut tape, &p, x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn module_equals_composition_of_primitives() {
    scseg::set_deterministic(true);
    let cfg = ScConvConfig::new(6, 4, 2);
    let (mut store, sc) = build(cfg.clone(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    perturb(&mut store, &mut rng);
    let x = input([2, 6, 4, 6, 4], &mut rng);

    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let y = sc.forward(&mut tape, &p, xv).unwrap();
    let module = tape.value(y).clone();

    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let xv = t.constant(x);
    let mixed = t
        .conv3d(
            xv,
            p.var(sc.split.weight),
            Some(p.var(sc.split.bias)),
            sc.split.spec,
        )
        .unwrap();
    let x1 = t.slice_channels(mixed, 0, 3).unwrap();
    let x2 = t.slice_channels(mixed, 3, 3).unwrap();
    let pooled = t.avg_pool3d(x1, cfg.r).unwrap();
    let ctx = block(&mut t, &p, &sc.co2, pooled);
    let ctx = t.upsample3d(ctx, cfg.r, cfg.upsample).unwrap();
    let s = t.add(x1, ctx).unwrap();
    let gate = t.sigmoid(s).unwrap();
    let f = block(&mut t, &p, &sc.co3, x1);
    let cal = t.mul(gate, f).unwrap();
    let y1 = block(&mut t, &p, &sc.co4, cal);
    let y2 = block(&mut t, &p, &sc.co1, x2);
    let cat = t.concat_channels(y1, y2).unwrap();
    let out = block(&mut t, &p, &sc.co5, cat);

    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&module), bits(t.value(out)));
}

#[test]
fn unit_rate_gate_is_sigmoid_of_x1_plus_context() {
    scseg::set_deterministic(true);
    for upsample in [UpsampleMode::Trilinear, UpsampleMode::Nearest] {
        let mut cfg = ScConvConfig::new(4, 4, 1);
        cfg.upsample = upsample;
        let (mut store, sc) = build(cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        perturb(&mut store, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(input([1, 4, 3, 5, 4], &mut rng));
        let trace = sc.forward_traced(&mut tape, &p, x).unwrap();
        let ctx = block(&mut tape, &p, &sc.co2, trace.x1);
        let s = tape.add(trace.x1, ctx).unwrap();
        let explicit = tape.sigmoid(s).unwrap();
        let (a, b) = (tape.value(trace.gate), tape.value(explicit));
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

/// Every weight, gamma and beta (and the split bias) moves the loss. Biases
/// of convolutions followed by instance norm cancel in the mean subtraction,
/// so their gradient is zero for every input and is checked as such.
#[test]
fn every_parameter_receives_gradient() {
    let cfg = ScConvConfig::new(4, 4, 2);
    let (mut store, sc) = build(cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    perturb(&mut store, &mut rng);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(input([1, 4, 4, 4, 4], &mut rng));
    let y = sc.forward(&mut tape, &p, x).unwrap();
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    store.accumulate_grads(&tape, &p);

    let ids = sc.param_ids();
    assert_eq!(ids.len(), store.len());
    for prm in store.iter() {
        let norm_fed_bias = prm.name.ends_with(".conv.bias");
        let peak = prm.grad.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if norm_fed_bias {
            assert!(peak < 1e-10, "{}: {peak:e}", prm.name);
        } else {
            assert!(
                prm.grad.data().iter().all(|g| *g != 0.0),
                "{} has a zero gradient entry",
                prm.name
            );
        }
    }
}

#[test]
fn bad_configs_are_rejected() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(ScConv::new(&mut store, &mut rng, "odd", ScConvConfig::new(3, 4, 2)).is_err());
    assert!(ScConv::new(&mut store, &mut rng, "r0", ScConvConfig::new(4, 4, 0)).is_err());
    let (store, sc) = build(ScConvConfig::new(4, 4, 2), 0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(Tensor::<f64>::zeros([1, 4, 4, 5, 4]));
    assert!(sc.forward(&mut tape, &p, x).is_err());
}
