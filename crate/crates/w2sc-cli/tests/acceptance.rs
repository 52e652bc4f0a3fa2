//! Release gate: one test per shipping criterion, each printing a single
//! pass/fail line. The heavy end-to-end criteria drive the actual binary;
//! the numeric ones call into the library with independent oracles.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use w2sc::evaluation::{dtw_align, estimate_f0, rmse_f0, F0Options, F0Track, RmseVariant};
use w2sc::losses::{
    loss_d_hinge, loss_g_adv, loss_identity, loss_siamese_margin, loss_siamese_transform,
};
use w2sc::networks::{
    attention_forward, discriminator_forward, generator_forward, generator_forward_traced,
    siamese_forward, DiscriminatorParams, GeneratorParams, SiameseParams,
};
use w2sc::signal::{griffin_lim, hann_window, stft, Waveform};
use w2sc::tensorcore::gradcheck::{finite_difference, relative_error};
use w2sc::tensorcore::{Padding, Tape, TensorData, Var};

fn report(n: u32, label: &str, pass: bool, detail: String) {
    println!("criterion {n} ({label}): {}", if pass { "pass" } else { "fail" });
    assert!(pass, "criterion {n} ({label}): {detail}");
}

// ---------------------------------------------------------------------------
// 1. Shape conformance
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_shape_conformance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let params: GeneratorParams<f32> = GeneratorParams::init(&mut rng);
    let x: Vec<f32> = (0..128 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let h: Vec<f32> = (0..64 * 128 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();

    // The clock covers the traced runs themselves, not weight generation.
    let started = Instant::now();
    let tape: Tape<f32> = Tape::new();
    let bound = params.bind(&tape);
    let xv = tape.constant(TensorData::new(vec![1, 1, 128, 12], x));
    let (_, trace) = generator_forward_traced(&tape, &bound, xv).unwrap();

    // The layer table as printed, with the third downsample output row
    // asserted at its corrected value (1x3)x256: the printed (128x12)x64 is
    // not consumable by the first upsample. Decoder rows carry the doubled
    // channel widths of the skip concatenation.
    let expected: &[(&str, &[usize])] = &[
        ("input", &[1, 1, 128, 12]),
        ("enc_conv1", &[1, 64, 128, 12]),
        ("enc_self_attention", &[1, 64, 128, 12]),
        ("enc_padding", &[1, 64, 128, 14]),
        ("enc_down1", &[1, 256, 1, 12]),
        ("enc_down2", &[1, 256, 1, 6]),
        ("enc_down3", &[1, 256, 1, 3]),
        ("dec_up1", &[1, 512, 1, 6]),
        ("dec_up2", &[1, 512, 1, 12]),
        ("dec_up3", &[1, 1, 128, 12]),
    ];
    let mut failures = Vec::new();
    if trace.rows.len() != expected.len() {
        failures.push(format!("trace has {} rows, expected {}", trace.rows.len(), expected.len()));
    }
    for ((name, shape), (want_name, want_shape)) in trace.rows.iter().zip(expected) {
        if name != want_name || shape != want_shape {
            failures.push(format!("row {name} {shape:?}, expected {want_name} {want_shape:?}"));
        }
    }

    // Attention module table: map 1536x1536 with stochastic rows, output
    // shaped like its input.
    let hv = tape.constant(TensorData::new(vec![1, 64, 128, 12], h));
    let (out, map) = attention_forward(&tape, &bound.attention, hv, true).unwrap();
    let map = tape.value_clone(map.unwrap());
    if map.shape != vec![1, 1536, 1536] {
        failures.push(format!("attention map shape {:?}", map.shape));
    }
    for (i, row) in map.data.chunks(1536).enumerate() {
        let sum: f32 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-5 || row.iter().any(|&p| p < 0.0) {
            failures.push(format!("attention row {i} sums to {sum}"));
            break;
        }
    }
    if tape.shape(out) != vec![1, 64, 128, 12] {
        failures.push(format!("attention output shape {:?}", tape.shape(out)));
    }

    let elapsed = started.elapsed();
    if elapsed.as_secs_f64() >= 1.0 {
        failures.push(format!("took {elapsed:?}, budget is 1 s"));
    }
    report(1, "shape conformance", failures.is_empty(), failures.join("; "));
}

// ---------------------------------------------------------------------------
// 2. Gradient suite
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
/// Step for whole-network probes. A bias shift moves every activation in a
/// channel, so at 1e-5 some pre-activation usually straddles the leaky-relu
/// kink and poisons the central difference; 1e-6 stays on one side.
const NET_FD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;

/// Dot with a fixed pseudo-random constant so every output coordinate
/// influences the scalar.
fn scalarize(tape: &Tape<f64>, v: Var) -> Var {
    let shape = tape.shape(v);
    let n: usize = shape.iter().product();
    let weights: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).cos() + 0.1).collect();
    let c = tape.constant(TensorData::new(shape, weights));
    tape.sum_all(tape.mul(v, c))
}

fn op_grad_ok(shape: &[usize], x0: &[f64], build: &dyn Fn(&Tape<f64>, Var) -> Var) -> Option<String> {
    let f = |x: &[f64]| -> f64 {
        let tape: Tape<f64> = Tape::new();
        let v = tape.leaf(TensorData::new(shape.to_vec(), x.to_vec()));
        let out = build(&tape, v);
        tape.scalar_value(scalarize(&tape, out))
    };
    let tape: Tape<f64> = Tape::new();
    let v = tape.leaf(TensorData::new(shape.to_vec(), x0.to_vec()));
    let out = build(&tape, v);
    tape.backward(scalarize(&tape, out)).unwrap();
    let analytic = tape.grad_clone(v)?;
    let fd = finite_difference(f, x0, FD_STEP);
    let err = relative_error(&analytic, &fd);
    (err >= GRAD_TOL).then(|| format!("rel err {err:.3e}"))
}

fn op_grad2_ok(
    sa: &[usize],
    a0: &[f64],
    sb: &[usize],
    b0: &[f64],
    build: &dyn Fn(&Tape<f64>, Var, Var) -> Var,
) -> Option<String> {
    for which in 0..2 {
        let f = |x: &[f64]| -> f64 {
            let tape: Tape<f64> = Tape::new();
            let (av, bv) = if which == 0 {
                (x.to_vec(), b0.to_vec())
            } else {
                (a0.to_vec(), x.to_vec())
            };
            let a = tape.leaf(TensorData::new(sa.to_vec(), av));
            let b = tape.leaf(TensorData::new(sb.to_vec(), bv));
            let out = build(&tape, a, b);
            tape.scalar_value(scalarize(&tape, out))
        };
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(TensorData::new(sa.to_vec(), a0.to_vec()));
        let b = tape.leaf(TensorData::new(sb.to_vec(), b0.to_vec()));
        let out = build(&tape, a, b);
        tape.backward(scalarize(&tape, out)).unwrap();
        let (target, x0) = if which == 0 { (a, a0) } else { (b, b0) };
        let analytic = tape.grad_clone(target).unwrap();
        let fd = finite_difference(f, x0, FD_STEP);
        let err = relative_error(&analytic, &fd);
        if err >= GRAD_TOL {
            return Some(format!("arg {which} rel err {err:.3e}"));
        }
    }
    None
}

/// Every differentiable op under one seed.
fn op_suite(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_vec =
        |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };
    let mut failures = Vec::new();
    let mut check = |name: &str, r: Option<String>| {
        if let Some(msg) = r {
            failures.push(format!("{name} (seed {seed}): {msg}"));
        }
    };

    let pos = rand_vec(12, 0.4, 2.0);
    let mixed: Vec<f64> = pos.iter().map(|&v| if v > 1.2 { v } else { -v }).collect();
    let s34 = [3usize, 4];
    check("relu", op_grad_ok(&s34, &mixed, &|t, v| t.relu(v)));
    check("leaky_relu", op_grad_ok(&s34, &mixed, &|t, v| t.leaky_relu(v, 0.2)));
    check("tanh", op_grad_ok(&s34, &mixed, &|t, v| t.tanh(v)));
    check("abs", op_grad_ok(&s34, &mixed, &|t, v| t.abs(v)));
    check("sqrt", op_grad_ok(&s34, &pos, &|t, v| t.sqrt(v)));
    check("recip", op_grad_ok(&s34, &pos, &|t, v| t.recip(v)));
    check("scale", op_grad_ok(&s34, &mixed, &|t, v| t.scale(v, -1.7)));
    check("add_const", op_grad_ok(&s34, &mixed, &|t, v| t.add_const(v, 0.3)));
    check("sum_all", op_grad_ok(&s34, &mixed, &|t, v| t.sum_all(v)));
    check("mean_all", op_grad_ok(&s34, &mixed, &|t, v| t.mean_all(v)));
    check("softmax", op_grad_ok(&s34, &mixed, &|t, v| t.softmax(v)));
    check("reshape", op_grad_ok(&s34, &mixed, &|t, v| t.reshape(v, vec![2, 6]).unwrap()));
    check("gather_rows", op_grad_ok(&s34, &mixed, &|t, v| {
        t.gather_rows(v, &[2, 0, 2]).unwrap()
    }));

    let a = rand_vec(12, -1.0, 1.0);
    let b = rand_vec(12, 0.2, 1.5);
    let s26 = [2usize, 6];
    check("add", op_grad2_ok(&s26, &a, &s26, &b, &|t, x, y| t.add(x, y)));
    check("sub", op_grad2_ok(&s26, &a, &s26, &b, &|t, x, y| t.sub(x, y)));
    check("mul", op_grad2_ok(&s26, &a, &s26, &b, &|t, x, y| t.mul(x, y)));
    let gamma = rand_vec(1, -1.0, 1.0);
    check("scale_by", op_grad2_ok(&s26, &a, &[1], &gamma, &|t, x, y| t.scale_by(x, y)));

    let ma = rand_vec(6, -1.0, 1.0);
    let mb = rand_vec(8, -1.0, 1.0);
    check("matmul", op_grad2_ok(&[3, 2], &ma, &[2, 4], &mb, &|t, x, y| {
        t.matmul(x, y).unwrap()
    }));
    for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let av = rand_vec(24, -1.0, 1.0);
        let bv = rand_vec(40, -1.0, 1.0);
        check("bmm", op_grad2_ok(&sa, &av, &sb, &bv, &|t, x, y| {
            t.bmm(x, y, ta, tb).unwrap()
        }));
    }
    let av = rand_vec(2 * 3 * 4, -1.0, 1.0);
    let bv = rand_vec(2 * 4 * 5, -1.0, 1.0);
    check("bmm_softmax", op_grad2_ok(&[2, 3, 4], &av, &[2, 4, 5], &bv, &|t, x, y| {
        t.bmm_softmax(x, y, false, false).unwrap()
    }));

    let img = rand_vec(2 * 2 * 5 * 4, -1.0, 1.0);
    check("pad2d", op_grad_ok(&[2, 2, 5, 4], &img, &|t, v| {
        t.pad2d(v, (1, 0, 2, 1)).unwrap()
    }));
    let w = rand_vec(3 * 2 * 3 * 3, -1.0, 1.0);
    for &(stride, pad) in &[
        ((1, 1), Padding::Valid),
        ((1, 1), Padding::Same),
        ((2, 2), Padding::Same),
        ((1, 2), Padding::Same),
    ] {
        check("conv2d", op_grad2_ok(&[2, 2, 5, 4], &img, &[3, 2, 3, 3], &w, &|t, x, y| {
            t.conv2d(x, y, stride, pad).unwrap()
        }));
    }
    let timg = rand_vec(2 * 3 * 2 * 3, -1.0, 1.0);
    for &stride in &[(1, 1), (2, 2), (1, 2)] {
        check(
            "conv2d_transpose",
            op_grad2_ok(&[2, 3, 2, 3], &timg, &[3, 2, 3, 3], &w, &|t, x, y| {
                t.conv2d_transpose(x, y, stride).unwrap()
            }),
        );
    }
    let img2 = rand_vec(2 * 3 * 2 * 2, -1.0, 1.0);
    let bias = rand_vec(3, -1.0, 1.0);
    check(
        "add_bias_channel",
        op_grad2_ok(&[2, 3, 2, 2], &img2, &[3], &bias, &|t, x, y| {
            t.add_bias_channel(x, y).unwrap()
        }),
    );
    let flat = rand_vec(4 * 5, -1.0, 1.0);
    let bias2 = rand_vec(5, -1.0, 1.0);
    check(
        "add_bias_last",
        op_grad2_ok(&[4, 5], &flat, &[5], &bias2, &|t, x, y| {
            t.add_bias_last(x, y).unwrap()
        }),
    );
    let cat = rand_vec(1 * 3 * 3 * 4, -1.0, 1.0);
    let img3 = rand_vec(1 * 2 * 3 * 4, -1.0, 1.0);
    check(
        "concat_channels",
        op_grad2_ok(&[1, 2, 3, 4], &img3, &[1, 3, 3, 4], &cat, &|t, x, y| {
            t.concat_channels(x, y).unwrap()
        }),
    );
    let wmat = rand_vec(6 * 4, -1.0, 1.0);
    check("spectral_normalize", op_grad_ok(&[6, 4], &wmat, &|t, v| {
        let mut u = Vec::new();
        t.spectral_normalize(v, &mut u, 80, false)
    }));

    failures
}

/// Sampled-coordinate FD check of a whole network. `eval` re-runs the
/// forward from scratch; `n_tensors` parameter tensors are each probed at
/// one seed-dependent coordinate and compared against one backward pass.
fn network_fd<P: Clone>(
    name: &str,
    seed: u64,
    params: &P,
    n_tensors: usize,
    tensor_len: &dyn Fn(&P, usize) -> usize,
    perturb: &dyn Fn(&mut P, usize, usize, f64),
    eval: &dyn Fn(&P) -> f64,
    analytic: &dyn Fn(&P) -> Vec<Vec<f64>>,
) -> Option<String> {
    let grads = analytic(params);
    let mut an = Vec::new();
    let mut fd = Vec::new();
    for ti in 0..n_tensors {
        let len = tensor_len(params, ti);
        let j = (seed as usize).wrapping_mul(0x9e37_79b9).wrapping_add(ti * 131) % len;
        let mut hi_p = params.clone();
        perturb(&mut hi_p, ti, j, NET_FD_STEP);
        let mut lo_p = params.clone();
        perturb(&mut lo_p, ti, j, -NET_FD_STEP);
        fd.push((eval(&hi_p) - eval(&lo_p)) / (2.0 * NET_FD_STEP));
        an.push(grads[ti][j]);
    }
    let err = relative_error(&an, &fd);
    (err >= GRAD_TOL).then(|| format!("{name} (seed {seed}): rel err {err:.3e}"))
}

fn segment_input(rng: &mut ChaCha8Rng, n: usize) -> TensorData<f64> {
    let data: Vec<f64> = (0..n * 128 * 12).map(|_| rng.gen_range(-0.9..0.9)).collect();
    TensorData::new(vec![n, 1, 128, 12], data)
}

#[test]
fn criterion_2_gradient_suite() {
    let started = Instant::now();
    let mut failures = Vec::new();
    for seed in [201u64, 202, 203] {
        failures.extend(op_suite(seed));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = segment_input(&mut rng, 1);

        // Generator.
        let gp: GeneratorParams<f64> = GeneratorParams::init(&mut rng);
        let xg = x.clone();
        let g_eval = move |p: &GeneratorParams<f64>| -> f64 {
            let tape: Tape<f64> = Tape::new();
            let bound = p.bind(&tape);
            let out = generator_forward(&tape, &bound, tape.constant(xg.clone())).unwrap();
            tape.scalar_value(scalarize(&tape, out))
        };
        let xg2 = x.clone();
        let g_analytic = move |p: &GeneratorParams<f64>| -> Vec<Vec<f64>> {
            let tape: Tape<f64> = Tape::new();
            let bound = p.bind(&tape);
            let out = generator_forward(&tape, &bound, tape.constant(xg2.clone())).unwrap();
            tape.backward(scalarize(&tape, out)).unwrap();
            GeneratorParams::<f64>::leaf_vars(&bound)
                .iter()
                .map(|&v| tape.grad_clone(v).unwrap_or_else(|| vec![0.0; tape.shape(v).iter().product()]))
                .collect()
        };
        let n_g = gp.params().len();
        if let Some(msg) = network_fd(
            "generator",
            seed,
            &gp,
            n_g,
            &|p, ti| p.params()[ti].value.len(),
            &|p, ti, j, h| p.params_mut()[ti].value.data[j] += h,
            &g_eval,
            &g_analytic,
        ) {
            failures.push(msg);
        }

        // Discriminator (spectral normalization active, persisted vectors
        // frozen so every evaluation sees the same deterministic function).
        let dp: DiscriminatorParams<f64> = DiscriminatorParams::init(&mut rng);
        let xd = x.clone();
        let d_eval = move |p: &DiscriminatorParams<f64>| -> f64 {
            let tape: Tape<f64> = Tape::new();
            let mut p = p.clone();
            let bound = p.bind(&tape, 80, false);
            let out = discriminator_forward(&tape, &bound, tape.constant(xd.clone())).unwrap();
            tape.scalar_value(scalarize(&tape, out))
        };
        let xd2 = x.clone();
        let d_analytic = move |p: &DiscriminatorParams<f64>| -> Vec<Vec<f64>> {
            let tape: Tape<f64> = Tape::new();
            let mut p = p.clone();
            let bound = p.bind(&tape, 80, false);
            let out = discriminator_forward(&tape, &bound, tape.constant(xd2.clone())).unwrap();
            tape.backward(scalarize(&tape, out)).unwrap();
            DiscriminatorParams::<f64>::leaf_vars(&bound)
                .iter()
                .map(|&v| tape.grad_clone(v).unwrap_or_else(|| vec![0.0; tape.shape(v).iter().product()]))
                .collect()
        };
        let n_d = dp.params().len();
        if let Some(msg) = network_fd(
            "discriminator",
            seed,
            &dp,
            n_d,
            &|p, ti| p.params()[ti].value.len(),
            &|p, ti, j, h| p.params_mut()[ti].value.data[j] += h,
            &d_eval,
            &d_analytic,
        ) {
            failures.push(msg);
        }

        // Siamese.
        let sp: SiameseParams<f64> = SiameseParams::init(&mut rng);
        let xs = x.clone();
        let s_eval = move |p: &SiameseParams<f64>| -> f64 {
            let tape: Tape<f64> = Tape::new();
            let bound = p.bind(&tape);
            let out = siamese_forward(&tape, &bound, tape.constant(xs.clone())).unwrap();
            tape.scalar_value(scalarize(&tape, out))
        };
        let xs2 = x.clone();
        let s_analytic = move |p: &SiameseParams<f64>| -> Vec<Vec<f64>> {
            let tape: Tape<f64> = Tape::new();
            let bound = p.bind(&tape);
            let out = siamese_forward(&tape, &bound, tape.constant(xs2.clone())).unwrap();
            tape.backward(scalarize(&tape, out)).unwrap();
            SiameseParams::<f64>::leaf_vars(&bound)
                .iter()
                .map(|&v| tape.grad_clone(v).unwrap_or_else(|| vec![0.0; tape.shape(v).iter().product()]))
                .collect()
        };
        let n_s = sp.params().len();
        if let Some(msg) = network_fd(
            "siamese",
            seed,
            &sp,
            n_s,
            &|p, ti| p.params()[ti].value.len(),
            &|p, ti, j, h| p.params_mut()[ti].value.data[j] += h,
            &s_eval,
            &s_analytic,
        ) {
            failures.push(msg);
        }
    }
    let elapsed = started.elapsed();
    if elapsed.as_secs_f64() >= 300.0 {
        failures.push(format!("took {elapsed:?}, budget is 5 min"));
    }
    report(2, "gradient suite", failures.is_empty(), failures.join("; "));
}

// ---------------------------------------------------------------------------
// 3. Loss identities
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_loss_identities() {
    let mut failures: Vec<String> = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if (got - want).abs() >= 1e-6 {
            failures.push(format!("{name}: got {got}, want {want}"));
        }
    };

    // Identity loss: zero when the generator echoes the input; hand value
    // otherwise (mean over segments of the L1 distance).
    {
        let tape: Tape<f64> = Tape::new();
        let b = tape.constant(TensorData::new(vec![2, 1, 1, 3], vec![0.5, -1.0, 2.0, 0.0, 1.0, -0.5]));
        let same = loss_identity(&tape, b, b).unwrap();
        check("identity zero case", tape.scalar_value(same), 0.0);

        let g = tape.constant(TensorData::new(vec![2, 1, 1, 3], vec![1.0, -1.0, 1.5, 1.0, 0.0, -0.5]));
        // Per-element |g-b|: [0.5,0,0.5, 1,1,0] -> sum 3, over 2 segments.
        let l = loss_identity(&tape, g, b).unwrap();
        check("identity hand value", tape.scalar_value(l), 1.5);
    }

    // Margin hinge: zero exactly at the margin, closed form below it.
    {
        let tape: Tape<f64> = Tape::new();
        let e1 = tape.constant(TensorData::new(vec![2, 2], vec![0.5, 0.0, 2.0, 0.0]));
        let e2 = tape.constant(TensorData::new(vec![2, 2], vec![0.0, 0.0, 0.0, 0.0]));
        // Norms 0.5 and 2.0 against delta 1: mean(0.5, 0) = 0.25.
        let l = loss_siamese_margin(&tape, e1, e2, 1.0).unwrap();
        check("margin hinge", tape.scalar_value(l), 0.25);

        let at = tape.constant(TensorData::new(vec![1, 2], vec![1.0, 0.0]));
        let zero = tape.constant(TensorData::new(vec![1, 2], vec![0.0, 0.0]));
        let l = loss_siamese_margin(&tape, at, zero, 1.0).unwrap();
        check("margin boundary", tape.scalar_value(l), 0.0);
    }

    // Adversarial hinges at their boundary and closed-form points.
    {
        let tape: Tape<f64> = Tape::new();
        let real = tape.constant(TensorData::new(vec![2], vec![1.0, 1.0]));
        let fake = tape.constant(TensorData::new(vec![2], vec![-1.0, -1.0]));
        check("d hinge boundary", tape.scalar_value(loss_d_hinge(&tape, real, fake)), 0.0);

        let zero = tape.constant(TensorData::new(vec![2], vec![0.0, 0.0]));
        check("d hinge center", tape.scalar_value(loss_d_hinge(&tape, zero, zero)), 2.0);

        let scores = tape.constant(TensorData::new(vec![2], vec![2.0, 4.0]));
        check("g adversarial", tape.scalar_value(loss_g_adv(&tape, scores)), -3.0);
    }

    // Transformation-vector constraint: zero when t' == t, and an
    // independently computed plain-arithmetic value on a fixed case, in
    // both printed-form and corrected-form variants.
    {
        let tape: Tape<f64> = Tape::new();
        let a1 = vec![1.0, 0.4, -0.2, 0.8, -0.5, 0.3];
        let a2 = vec![0.1, -0.3, 0.7, -0.6, 0.2, 0.9];
        let g1 = vec![0.6, 0.2, 0.5, -0.1, 0.4, -0.7];
        let g2 = vec![-0.2, 0.8, 0.1, 0.3, -0.9, 0.2];
        let mk = |v: &Vec<f64>| tape.constant(TensorData::new(vec![2, 3], v.clone()));
        let (va1, va2, vg1, vg2) = (mk(&a1), mk(&a2), mk(&g1), mk(&g2));

        let zero = loss_siamese_transform(&tape, va1, va2, va1, va2, false).unwrap();
        check("transform zero case", tape.scalar_value(zero.loss), 0.0);

        // Scalar oracle with no tape involvement.
        let oracle = |literal: bool| -> f64 {
            let mut total = 0.0;
            for p in 0..2 {
                let t: Vec<f64> = (0..3).map(|i| a1[p * 3 + i] - a2[p * 3 + i]).collect();
                let tp: Vec<f64> = (0..3).map(|i| g1[p * 3 + i] - g2[p * 3 + i]).collect();
                let dot: f64 = t.iter().zip(&tp).map(|(x, y)| x * y).sum();
                let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
                let ntp = tp.iter().map(|x| x * x).sum::<f64>().sqrt();
                let cos = dot / (nt * ntp);
                let sq: f64 = t.iter().zip(&tp).map(|(x, y)| (x - y) * (x - y)).sum();
                total += if literal { cos + sq } else { (1.0 - cos) + sq };
            }
            total / 2.0
        };
        for literal in [false, true] {
            let l = loss_siamese_transform(&tape, va1, va2, vg1, vg2, literal).unwrap();
            check(
                if literal { "transform literal form" } else { "transform corrected form" },
                tape.scalar_value(l.loss),
                oracle(literal),
            );
        }
    }

    report(3, "loss identities", failures.is_empty(), failures.join("; "));
}

// ---------------------------------------------------------------------------
// 4. Spectral normalization
// ---------------------------------------------------------------------------

/// Top singular value via cyclic Jacobi diagonalization of WᵀW; shares no
/// code with the power-iteration path.
fn svd_top_singular_value(w: &[f64], rows: usize, cols: usize) -> f64 {
    let n = cols;
    let mut a = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for r in 0..rows {
                acc += w[r * n + i] * w[r * n + j];
            }
            a[i * n + j] = acc;
        }
    }
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q].abs();
                let apq = a[p * n + q];
                if apq.abs() < 1e-14 {
                    continue;
                }
                let theta = 0.5 * (a[q * n + q] - a[p * n + p]) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
        if off < 1e-12 {
            break;
        }
    }
    (0..n).map(|i| a[i * n + i]).fold(0.0f64, f64::max).sqrt()
}

#[test]
fn criterion_4_spectral_normalization() {
    let mut failures = Vec::new();
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + trial);
        let w: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape: Tape<f64> = Tape::new();
        let wv = tape.leaf(TensorData::new(vec![64, 64], w));
        let mut u = Vec::new();
        let normed = tape.value_clone(tape.spectral_normalize(wv, &mut u, 5, true));
        let sigma = svd_top_singular_value(&normed.data, 64, 64);
        if !(0.98..=1.02).contains(&sigma) {
            failures.push(format!("trial {trial}: true sigma after normalization = {sigma:.5}"));
        }
    }
    report(4, "spectral normalization", failures.is_empty(), failures.join("; "));
}

// ---------------------------------------------------------------------------
// 5 & 6. Training schedule, determinism & resume (shared 300-step fixture)
// ---------------------------------------------------------------------------

fn w2sc_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_w2sc"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = w2sc_bin().args(args).output().expect("spawn w2sc");
    assert!(
        out.status.success(),
        "w2sc {args:?} failed\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct TrainFixture {
    _dir: TempDir,
    feats: PathBuf,
    cfg_full: PathBuf,
    cfg_half: PathBuf,
    /// loss_log.csv of the uninterrupted 300-step run.
    full_log: String,
}

fn train_cfg(total: u32) -> String {
    format!(
        "train.batch_size = 2\ntrain.total_generator_steps = {total}\ntrain.checkpoint_interval = 150\ntrain.seed = 17\n"
    )
}

fn fixture() -> &'static TrainFixture {
    static FIXTURE: OnceLock<TrainFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let wav = dir.path().join("wav");
        run_ok(&["--seed", "29", "synth-corpus", p(&wav), "-n", "6"]);
        let feats = dir.path().join("feats");
        run_ok(&["extract", p(&wav.join("whisper")), p(&feats.join("whisper"))]);
        run_ok(&["extract", p(&wav.join("normal")), p(&feats.join("normal"))]);
        let cfg_full = dir.path().join("full.cfg");
        std::fs::write(&cfg_full, train_cfg(300)).unwrap();
        let cfg_half = dir.path().join("half.cfg");
        std::fs::write(&cfg_half, train_cfg(150)).unwrap();

        let ckpt = dir.path().join("run_a");
        run_ok(&["--config", p(&cfg_full), "train", p(&feats), p(&ckpt)]);
        let full_log = std::fs::read_to_string(ckpt.join("loss_log.csv")).unwrap();
        TrainFixture {
            _dir: dir,
            feats,
            cfg_full,
            cfg_half,
            full_log,
        }
    })
}

#[test]
fn criterion_5_update_schedule() {
    let fx = fixture();
    let rows: Vec<&str> = fx.full_log.lines().skip(1).collect();
    let d_updates = rows
        .iter()
        .filter(|r| !r.split(',').nth(1).unwrap_or("").is_empty())
        .count();
    let pass = rows.len() == 300 && d_updates == 100;
    report(
        5,
        "update schedule",
        pass,
        format!("{} rows, {} discriminator updates (want 300/100)", rows.len(), d_updates),
    );
}

#[test]
fn criterion_6_determinism_and_resume() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let mut failures = Vec::new();

    // Same seed, fresh run: byte-identical loss log.
    let run_b = dir.path().join("run_b");
    run_ok(&["--config", p(&fx.cfg_full), "train", p(&fx.feats), p(&run_b)]);
    let log_b = std::fs::read_to_string(run_b.join("loss_log.csv")).unwrap();
    if log_b != fx.full_log {
        failures.push("identical seeds produced different loss logs".to_string());
    }

    // Stop at 150, resume to 300: the stitched log must equal the
    // uninterrupted one bitwise.
    let run_c = dir.path().join("run_c");
    run_ok(&["--config", p(&fx.cfg_half), "train", p(&fx.feats), p(&run_c)]);
    run_ok(&["--config", p(&fx.cfg_full), "train", p(&fx.feats), p(&run_c), "--resume"]);
    let log_c = std::fs::read_to_string(run_c.join("loss_log.csv")).unwrap();
    if log_c != fx.full_log {
        let first_diff = fx
            .full_log
            .lines()
            .zip(log_c.lines())
            .position(|(a, b)| a != b);
        failures.push(format!(
            "resumed log diverges from the uninterrupted run (first differing row: {first_diff:?})"
        ));
    }

    report(6, "determinism and resume", failures.is_empty(), failures.join("; "));
}

// ---------------------------------------------------------------------------
// 7. Griffin-Lim
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_griffin_lim() {
    let started = Instant::now();
    let sr = 16_000u32;
    let samples: Vec<f32> = (0..sr as usize)
        .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin() as f32 * 0.5)
        .collect();
    let wav = Waveform { samples, sample_rate: sr };
    let n_fft = 1024;
    let hop = 256;
    let window = hann_window(n_fft);
    let spec = stft(&wav, n_fft, hop, &window).unwrap();
    let mag = spec.magnitude();
    let result = griffin_lim(&mag, spec.n_frames, 60, n_fft, hop, &window, sr);

    let mut failures = Vec::new();
    let conv = *result.convergence.last().unwrap();
    if conv >= 0.15 {
        failures.push(format!("spectral convergence error {conv:.4} after 60 iterations"));
    }

    // Dominant frequency by direct projection onto a 1 Hz grid.
    let x = &result.waveform.samples;
    let n = x.len() as f64;
    let mut best = (0.0f64, 0.0f64);
    for f in 50..1000 {
        let w = 2.0 * std::f64::consts::PI * f as f64 / sr as f64;
        let (mut re, mut im) = (0.0f64, 0.0f64);
        for (i, &s) in x.iter().enumerate() {
            let ph = w * i as f64;
            re += s as f64 * ph.cos();
            im += s as f64 * ph.sin();
        }
        let power = (re * re + im * im) / n;
        if power > best.1 {
            best = (f as f64, power);
        }
    }
    if (best.0 - 440.0).abs() > 5.0 {
        failures.push(format!("dominant frequency {} Hz", best.0));
    }
    let elapsed = started.elapsed();
    if elapsed.as_secs_f64() >= 10.0 {
        failures.push(format!("took {elapsed:?}, budget is 10 s"));
    }
    report(7, "griffin-lim", failures.is_empty(), failures.join("; "));
}

// ---------------------------------------------------------------------------
// 8. End-to-end desk-scale run
// ---------------------------------------------------------------------------

/// Parse the named columns out of a report's trailing mean row.
fn mean_row(report_path: &Path) -> Vec<f64> {
    let text = std::fs::read_to_string(report_path).unwrap();
    let mean = text
        .lines()
        .find(|l| l.starts_with("mean,"))
        .expect("report must contain a mean row");
    mean.split(',').skip(1).map(|v| v.parse().unwrap()).collect()
}

#[test]
fn criterion_8_end_to_end() {
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("wav");
    run_ok(&["--seed", "11", "synth-corpus", p(&wav), "-n", "40"]);

    // Hold out the last 8 pairs.
    let held = dir.path().join("heldout");
    std::fs::create_dir_all(held.join("whisper")).unwrap();
    std::fs::create_dir_all(held.join("normal")).unwrap();
    for i in 32..40 {
        let name = format!("utt_{i:04}.wav");
        for domain in ["whisper", "normal"] {
            std::fs::rename(wav.join(domain).join(&name), held.join(domain).join(&name)).unwrap();
        }
    }

    let feats = dir.path().join("feats");
    run_ok(&["extract", p(&wav.join("whisper")), p(&feats.join("whisper"))]);
    run_ok(&["extract", p(&wav.join("normal")), p(&feats.join("normal"))]);

    let cfg = dir.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "train.batch_size = 2\ntrain.total_generator_steps = 5000\ntrain.checkpoint_interval = 5000\ntrain.seed = 5\n",
    )
    .unwrap();
    let ckpt_dir = dir.path().join("ckpt");
    run_ok(&["--config", p(&cfg), "train", p(&feats), p(&ckpt_dir)]);
    let ckpt = ckpt_dir.join("ckpt_005000.w2sc");
    assert!(ckpt.exists(), "final checkpoint missing");

    let converted = dir.path().join("converted");
    std::fs::create_dir_all(&converted).unwrap();
    for i in 32..40 {
        let name = format!("utt_{i:04}.wav");
        run_ok(&[
            "convert",
            p(&ckpt),
            p(&held.join("whisper").join(&name)),
            p(&converted.join(&name)),
        ]);
    }

    let conv_report = dir.path().join("report_conv.csv");
    let whisper_report = dir.path().join("report_whisper.csv");
    run_ok(&["evaluate", p(&converted), p(&held.join("normal")), p(&conv_report)]);
    run_ok(&["evaluate", p(&held.join("whisper")), p(&held.join("normal")), p(&whisper_report)]);

    // Columns: rmse_orig, rmse_proc, rmse_norm, mcd, voiced_fraction.
    let conv = mean_row(&conv_report);
    let whisper = mean_row(&whisper_report);
    let voiced_gain = conv[4] - whisper[4];
    let mut failures = Vec::new();
    if voiced_gain < 0.3 {
        failures.push(format!(
            "voiced-fraction gain {:.3} (converted {:.3} vs whisper {:.3}), want >= 0.3",
            voiced_gain, conv[4], whisper[4]
        ));
    }
    if conv[1] >= whisper[1] {
        failures.push(format!(
            "rmse_f0_processed {:.3} not below the whisper baseline {:.3}",
            conv[1], whisper[1]
        ));
    }
    report(8, "end-to-end conversion", failures.is_empty(), failures.join("; "));
}

// ---------------------------------------------------------------------------
// 9. Evaluation oracle
// ---------------------------------------------------------------------------

/// Exhaustive minimum-cost monotone path, sharing nothing with the DP.
fn dtw_brute(x: &[Vec<f32>], y: &[Vec<f32>]) -> f64 {
    fn dist(a: &[f32], b: &[f32]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&p, &q)| (p as f64 - q as f64) * (p as f64 - q as f64))
            .sum::<f64>()
            .sqrt()
    }
    fn go(x: &[Vec<f32>], y: &[Vec<f32>], i: usize, j: usize) -> f64 {
        let here = dist(&x[i], &y[j]);
        if i + 1 == x.len() && j + 1 == y.len() {
            return here;
        }
        let mut best = f64::INFINITY;
        if i + 1 < x.len() {
            best = best.min(go(x, y, i + 1, j));
        }
        if j + 1 < y.len() {
            best = best.min(go(x, y, i, j + 1));
        }
        if i + 1 < x.len() && j + 1 < y.len() {
            best = best.min(go(x, y, i + 1, j + 1));
        }
        here + best
    }
    go(x, y, 0, 0)
}

#[test]
fn criterion_9_evaluation_oracle() {
    let mut failures = Vec::new();
    let width = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(9001);
    for t1 in 1..=6usize {
        for t2 in 1..=6usize {
            let xf: Vec<Vec<f32>> = (0..t1)
                .map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let yf: Vec<Vec<f32>> = (0..t2)
                .map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let x: Vec<f32> = xf.iter().flatten().copied().collect();
            let y: Vec<f32> = yf.iter().flatten().copied().collect();
            let path = dtw_align(&x, &y, width).unwrap();
            let brute = dtw_brute(&xf, &yf);
            if (path.cost - brute).abs() > 1e-9 {
                failures.push(format!("({t1},{t2}): dp cost {} vs brute {}", path.cost, brute));
            }
            if path.pairs.first() != Some(&(0, 0)) || path.pairs.last() != Some(&(t1 - 1, t2 - 1)) {
                failures.push(format!("({t1},{t2}): path endpoints wrong"));
            }
            for w in path.pairs.windows(2) {
                let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                if di > 1 || dj > 1 || (di == 0 && dj == 0) {
                    failures.push(format!("({t1},{t2}): non-monotone step"));
                }
            }
        }
    }

    // F0 RMSE hand arithmetic. Differences 1,2,3,4 over four aligned pairs:
    // literal form sqrt(1+4+9+16) = sqrt(30), normalized sqrt(30/4).
    let conv = F0Track { f0: vec![101.0, 102.0, 103.0, 104.0], hop_seconds: 0.01 };
    let reference = F0Track { f0: vec![100.0; 4], hop_seconds: 0.01 };
    let r = rmse_f0(&conv, &reference, RmseVariant::Original, None).unwrap();
    if (r.literal - 30f64.sqrt()).abs() > 1e-9 || (r.normalized - 7.5f64.sqrt()).abs() > 1e-9 {
        failures.push(format!("original-form rmse {} / {}", r.literal, r.normalized));
    }

    // Processed form drops the silent pair and the unvoiced (zero) pair,
    // leaving differences 1 and 2: literal sqrt(5), normalized sqrt(2.5).
    let conv = F0Track { f0: vec![101.0, 102.0, 150.0, 104.0], hop_seconds: 0.01 };
    let reference = F0Track { f0: vec![100.0, 100.0, 0.0, 100.0], hop_seconds: 0.01 };
    let silence = vec![false, false, false, true];
    let r = rmse_f0(&conv, &reference, RmseVariant::Processed, Some(&silence)).unwrap();
    if (r.literal - 5f64.sqrt()).abs() > 1e-9 || (r.normalized - 2.5f64.sqrt()).abs() > 1e-9 || r.pairs != 2 {
        failures.push(format!(
            "processed-form rmse {} / {} over {} pairs",
            r.literal, r.normalized, r.pairs
        ));
    }

    // Sanity on the tracker the metrics consume: a clean 200 Hz tone is
    // voiced at 200 Hz.
    let sr = 16_000u32;
    let samples: Vec<f32> = (0..sr as usize / 2)
        .map(|i| (2.0 * std::f64::consts::PI * 200.0 * i as f64 / sr as f64).sin() as f32 * 0.4)
        .collect();
    let track = estimate_f0(&Waveform { samples, sample_rate: sr }, &F0Options::default());
    let voiced: Vec<f64> = track.f0.iter().copied().filter(|&f| f > 0.0).collect();
    if voiced.is_empty() || voiced.iter().any(|&f| (f - 200.0).abs() > 4.0) {
        failures.push("pitch tracker missed a clean 200 Hz tone".to_string());
    }

    report(9, "evaluation oracle", failures.is_empty(), failures.join("; "));
}
