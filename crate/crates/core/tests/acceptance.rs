//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line with its
//! measurements and runtime, then asserts. Criteria run one at a time so the
//! runtime budgets are measured on an otherwise idle core.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use icarec_core::autodiff::Graph;
use icarec_core::baselines::{cancel_multichannel, lms_cancel, rls_cancel, AdaptiveFilterConfig, Method};
use icarec_core::datagen::{gen_2d, gen_synthetic_fecg, Condition, FecgConfig, MixingSpec, DEFAULT_A};
use icarec_core::eval::{best_spearman, presence_ratio, symmetric_eigen};
use icarec_core::infometrics::{hsic_permutation_test, mi_histogram, DiscreteSystem, Points};
use icarec_core::io;
use icarec_core::nn::{Activation, AdamState, Layer, Mode, NamedTensor, Net, NetSpec, Role};
use icarec_core::trainer::{
    self, encode_dataset, probe_independence, ProbeConfig, TrainCheckpoint, TrainConfig, CHECKPOINT_FILE,
    METRICS_FILE,
};
use icarec_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict line past the test harness capture, then asserts it.
fn verdict(id: u32, name: &str, ok: bool, detail: String, elapsed: Duration, budget: Duration) {
    let in_time = elapsed < budget;
    let pass = ok && in_time;
    let line = format!(
        "acceptance {id} {name}: {} | {detail} | {:.2}s (budget {}s){}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { " over budget" },
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{}", line.trim_end());
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

const ACTIVATIONS: [Activation; 6] = [
    Activation::Identity,
    Activation::Tanh,
    Activation::Relu,
    Activation::LeakyRelu(0.1),
    Activation::Softplus,
    Activation::Sigmoid,
];

/// Smooth activations used before batch norm. A piecewise-linear unit whose
/// batch stays on one side of its kink is locally affine, and batch norm then
/// cancels its bias exactly, leaving a zero gradient that finite differences
/// only see as rounding noise.
const CURVED: [Activation; 3] = [Activation::Tanh, Activation::Softplus, Activation::Sigmoid];

/// Random network with at most three weight layers of at most 16 units, its
/// input batch and, for conditioned nets, the condition batch.
fn random_case(case: usize) -> (NetSpec, Tensor, Option<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + case as u64);
    let width = |rng: &mut ChaCha8Rng| rng.random_range(1..=16usize);
    let act = |i: usize| ACTIVATIONS[(case + i) % ACTIVATIONS.len()];
    let curved = |i: usize| CURVED[(case + i) % CURVED.len()];
    let batch = 16;
    match case % 4 {
        0 => {
            let depth = rng.random_range(1..=3usize);
            let input = rng.random_range(1..=6usize);
            let hidden: Vec<usize> = (0..depth - 1).map(|_| width(&mut rng)).collect();
            let spec = NetSpec::mlp(Role::Encoder, input, &hidden, width(&mut rng), act(0), act(1));
            let x = normal(&mut rng, &[batch, input]);
            (spec, x, None)
        }
        1 => {
            let (c, h, o, t) = (rng.random_range(1..=3usize), width(&mut rng), rng.random_range(1..=4usize), 12);
            let k1 = [1, 3, 5][rng.random_range(0..3)];
            let k2 = [1, 3, 5][rng.random_range(0..3)];
            let spec = NetSpec {
                role: Role::Encoder,
                input: icarec_core::nn::InputKind::Channels(c),
                layers: vec![
                    Layer::Conv1d { in_ch: c, out_ch: h, kernel: k1, activation: curved(0) },
                    Layer::Batchnorm1d { ch: h },
                    Layer::Conv1d { in_ch: h, out_ch: o, kernel: k2, activation: act(2) },
                ],
            };
            spec.validate().unwrap();
            let x = normal(&mut rng, &[batch, c, t]);
            (spec, x, None)
        }
        2 => {
            let (input, h) = (rng.random_range(1..=6usize), width(&mut rng));
            let out = width(&mut rng);
            let spec = NetSpec {
                role: Role::Discriminator,
                input: icarec_core::nn::InputKind::Features(input),
                layers: vec![
                    Layer::Batchnorm1d { ch: input },
                    Layer::Dense { inputs: input, out: h, activation: curved(1) },
                    Layer::Batchnorm1d { ch: h },
                    Layer::Dense { inputs: h, out, activation: act(3) },
                ],
            };
            spec.validate().unwrap();
            let x = normal(&mut rng, &[batch, input]);
            (spec, x, None)
        }
        _ => {
            let (code, hidden, out) = (rng.random_range(1..=4usize), width(&mut rng), rng.random_range(1..=6usize));
            let classes = (case % 8 == 3).then_some(3usize);
            let cond_width = rng.random_range(1..=3usize);
            let spec = NetSpec::conditioned_mlp(Role::Decoder, code, cond_width, classes, &[hidden], out, act(4), act(5));
            let x = normal(&mut rng, &[batch, code]);
            let cond = match classes {
                Some(k) => {
                    let mut data = vec![0.0; batch * k];
                    for i in 0..batch {
                        data[i * k + rng.random_range(0..k)] = 1.0;
                    }
                    Tensor::new(vec![batch, k], data).unwrap()
                }
                None => normal(&mut rng, &[batch, cond_width]),
            };
            (spec, x, Some(cond))
        }
    }
}

/// `sum(net(x) * r)` for a fixed random projection `r`.
fn projected_loss(net: &Net, x: &Tensor, cond: Option<&Tensor>, r: &Tensor) -> (Graph, icarec_core::Var, Vec<icarec_core::Var>) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let cv = cond.map(|c| g.constant(c.clone()));
    let fwd = net.forward(&mut g, xv, cv).unwrap();
    let rv = g.constant(r.clone());
    let y = g.mul(fwd.output, rv).unwrap();
    let loss = g.sum(y).unwrap();
    (g, loss, fwd.params)
}

#[test]
fn criterion_1_gradient_soundness() {
    let _guard = serial();
    let start = Instant::now();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut worst_case = 0;
    let mut coords = 0usize;
    for case in 0..50 {
        let (spec, x, cond) = random_case(case);
        let mut net = Net::build(&spec, case as u64).unwrap();
        net.set_mode(Mode::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(case as u64);
        // Zero biases put dead units exactly on activation kinks; jitter every
        // parameter so the check runs at a generic point.
        for p in net.params_mut() {
            let jitter = normal(&mut rng, p.tensor.shape());
            let d = p.tensor.data().iter().zip(jitter.data()).map(|(a, b)| a + 0.1 * b).collect();
            p.tensor = Tensor::new(p.tensor.shape().to_vec(), d).unwrap();
        }
        let out_shape = {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let cv = cond.as_ref().map(|c| g.constant(c.clone()));
            let fwd = net.forward(&mut g, xv, cv).unwrap();
            g.value(fwd.output).shape().to_vec()
        };
        let r = normal(&mut rng, &out_shape);
        let (g, loss, params) = projected_loss(&net, &x, cond.as_ref(), &r);
        let grads = g.backward(loss).unwrap();
        for (pi, var) in params.iter().enumerate() {
            let base = net.params()[pi].tensor.clone();
            let analytic = grads.get_or_zeros(*var, &base);
            for i in 0..base.numel() {
                let eval_at = |v: f64, net: &mut Net| -> f64 {
                    let mut d = base.data().to_vec();
                    d[i] = v;
                    net.params_mut()[pi].tensor = Tensor::new(base.shape().to_vec(), d).unwrap();
                    let (g, l, _) = projected_loss(net, &x, cond.as_ref(), &r);
                    g.value(l).data()[0]
                };
                let plus = eval_at(base.data()[i] + h, &mut net);
                let minus = eval_at(base.data()[i] - h, &mut net);
                net.params_mut()[pi].tensor = base.clone();
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
                if rel > worst {
                    worst = rel;
                    worst_case = case;
                }
                coords += 1;
            }
        }
    }
    verdict(
        1,
        "gradient soundness",
        worst < 1e-5,
        format!("50 nets, {coords} parameters, worst relative error {worst:.2e} (net {worst_case}), limit 1e-5"),
        start.elapsed(),
        Duration::from_secs(30),
    );
}

/// Desk-scale 2D run: train on 5000, score on 1000 held-out samples.
fn two_d_run(spec: MixingSpec, act: Activation) -> (f64, f64) {
    let data = gen_2d(&spec, 6000, 0).unwrap();
    let (train, test) = data.split(5000).unwrap();
    let cfg = TrainConfig::two_d(act, 0.05, 0);
    assert_eq!((cfg.epochs, cfg.beta, cfg.objective.lambda), (30, 5, 0.05));
    let (nets, _) = trainer::train(&cfg, &train, None).unwrap();
    let codes = encode_dataset(&nets.encoder, &test.x).unwrap();
    let rho = best_spearman(codes.data(), codes.shape()[1], test.s.as_ref().unwrap().data()).unwrap();
    let probe = probe_independence(&codes, &test.t, &cfg.discriminator, &ProbeConfig::default()).unwrap();
    (rho, probe.score)
}

#[test]
fn criterion_2_linear_recovery() {
    let _guard = serial();
    let start = Instant::now();
    let (rho, r2) = two_d_run(MixingSpec::Linear { a: DEFAULT_A }, Activation::Identity);
    verdict(
        2,
        "2D linear recovery",
        rho.abs() >= 0.9 && r2 <= 0.15,
        format!("|spearman| {:.4} (>= 0.9), probe r2 {r2:.4} (<= 0.15)", rho.abs()),
        start.elapsed(),
        Duration::from_secs(300),
    );
}

#[test]
fn criterion_3_nonlinear_recovery() {
    let _guard = serial();
    let start = Instant::now();
    let (rho, r2) = two_d_run(MixingSpec::SoftplusNonlinear { a: DEFAULT_A }, Activation::Softplus);
    verdict(
        3,
        "2D nonlinear recovery",
        rho.abs() >= 0.85 && r2 <= 0.2,
        format!("|spearman| {:.4} (>= 0.85), probe r2 {r2:.4} (<= 0.2)", rho.abs()),
        start.elapsed(),
        Duration::from_secs(300),
    );
}

#[test]
fn criterion_4_lemma_suite() {
    let _guard = serial();
    let start = Instant::now();
    let p = DiscreteSystem::projection().lemma_check().unwrap();
    let x = DiscreteSystem::xor().lemma_check().unwrap();
    let c = DiscreteSystem::constant_encoder().lemma_check().unwrap();
    let projection_ok = p.conclusion_holds == Some(true)
        && (p.i_s_code - p.h_s).abs() <= 1e-9
        && (p.h_s - p.h_code).abs() <= 1e-9;
    let xor_ok = x.premise_reconstruction
        && x.premise_independence
        && x.conclusion_holds == Some(false)
        && x.i_s_code.abs() <= 1e-12;
    let constant_ok = !c.premise_reconstruction;
    verdict(
        4,
        "lemma suite",
        projection_ok && xor_ok && constant_ok,
        format!(
            "projection I={:.12} H(S)={:.12} H(S')={:.12}; xor I={:.1e} conclusion {:?}; constant reconstruction {}",
            p.i_s_code, p.h_s, p.h_code, x.i_s_code, x.conclusion_holds, c.premise_reconstruction
        ),
        start.elapsed(),
        Duration::from_secs(1),
    );
}

/// The bundled `fecg-synthetic` training recipe.
fn fecg_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::sequence(24, 3, 5, seed);
    cfg.epochs = 600;
    cfg.batch_size = 8;
    cfg.crop_len = Some(500);
    cfg.crops_per_sample = 4;
    cfg
}

#[test]
fn criterion_5_synthetic_fecg() {
    let _guard = serial();
    let start = Instant::now();
    let mut rows = Vec::new();
    let (mut sum_code, mut sum_x, mut sum_lms) = (0.0, 0.0, 0.0);
    for seed in 0..3 {
        let data = gen_synthetic_fecg(&FecgConfig::default(), seed).unwrap();
        let lags = data.meta.lags.clone().unwrap();
        let Condition::Numeric(t) = &data.t else { unreachable!() };
        let (nets, _) = trainer::train(&fecg_config(seed), &data, None).unwrap();
        let codes = encode_dataset(&nets.encoder, &data.x).unwrap();
        let code = presence_ratio(&codes, &lags).unwrap();
        let rx = presence_ratio(&data.x, &lags).unwrap().ratio_or_inf();
        let lms = cancel_multichannel(&data.x, t, Method::Lms, &AdaptiveFilterConfig::default()).unwrap();
        let rl = presence_ratio(&lms, &lags).unwrap().ratio_or_inf();
        let rc = code.ratio_or_inf();
        rows.push(format!(
            "seed {seed}: R_code {rc:.3} (A_f {:.3}, A_m {:.3}), R_x {rx:.3}, R_lms {rl:.3}",
            code.a_f, code.a_m
        ));
        sum_code += rc;
        sum_x += rx;
        sum_lms += rl;
    }
    let (mc, mx, ml) = (sum_code / 3.0, sum_x / 3.0, sum_lms / 3.0);
    verdict(
        5,
        "synthetic fECG presence",
        mc >= 2.0 * mx && mc >= ml,
        format!("mean R_code {mc:.3} vs 2*R_x {:.3} and R_lms {ml:.3}; {}", 2.0 * mx, rows.join("; ")),
        start.elapsed(),
        Duration::from_secs(20 * 60),
    );
}

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Batch least squares over the whole record, taps per channel, newest first.
fn least_squares(p: &[f64], reference: &[Vec<f64>], taps: usize) -> Vec<f64> {
    let dim = taps * reference.len();
    let mut a = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    let mut b = nalgebra::DVector::<f64>::zeros(dim);
    let mut u = vec![0.0; dim];
    for (k, &d) in p.iter().enumerate() {
        for (c, r) in reference.iter().enumerate() {
            for j in 0..taps {
                u[c * taps + j] = if k >= j { r[k - j] } else { 0.0 };
            }
        }
        let uv = nalgebra::DVector::from_column_slice(&u);
        a += &uv * uv.transpose();
        b += &uv * d;
    }
    a.lu().solve(&b).unwrap().iter().copied().collect()
}

#[test]
fn criterion_6_baseline_sanity() {
    let _guard = serial();
    let start = Instant::now();
    let n = 20_000;
    let (r1, r2, e) = (noise(n, 6), noise(n, 7), noise(n, 8));
    let p: Vec<f64> = (0..n)
        .map(|k| 0.7 * r1[k] - 0.3 * if k > 0 { r1[k - 1] } else { 0.0 } + 0.5 * r2[k] + 0.1 * e[k])
        .collect();
    let reference = vec![r1, r2];
    let cfg = AdaptiveFilterConfig {
        taps: 3,
        lambda_forget: 1.0,
        ..AdaptiveFilterConfig::default()
    };
    let rls = rls_cancel(&p, &reference, &cfg).unwrap();
    let oracle = least_squares(&p, &reference, 3);
    let rls_err = rls.weights.iter().zip(&oracle).map(|(w, o)| (w - o).abs()).fold(0.0, f64::max);

    let r = noise(10_000, 0);
    let p: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
    let one_tap = AdaptiveFilterConfig {
        taps: 1,
        mu: 0.01,
        ..AdaptiveFilterConfig::default()
    };
    let lms = lms_cancel(&p, &[r], &one_tap).unwrap();
    let energy = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let ratio = energy(&lms.residual[9000..]) / energy(&p[9000..]);
    verdict(
        6,
        "baseline sanity",
        rls_err < 1e-6 && ratio < 1e-4,
        format!("RLS vs least squares max weight error {rls_err:.2e} (< 1e-6), LMS residual energy ratio {ratio:.2e} (< 1e-4)"),
        start.elapsed(),
        Duration::from_secs(10),
    );
}

fn uniforms(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

#[test]
fn criterion_7_estimator_calibration() {
    let _guard = serial();
    let start = Instant::now();
    let n = 512;
    let mut below = 0;
    for trial in 0..100u64 {
        let (a, b) = (uniforms(n, 2 * trial), uniforms(n, 2 * trial + 1));
        let (stat, thr) =
            hsic_permutation_test(Points::new(&a, 1).unwrap(), Points::new(&b, 1).unwrap(), 200, 0.95, trial).unwrap();
        below += (stat < thr) as usize;
    }
    let mut above = 0;
    for trial in 0..100u64 {
        let a = uniforms(n, 10_000 + trial);
        let pa = Points::new(&a, 1).unwrap();
        let (stat, thr) = hsic_permutation_test(pa, pa, 1000, 0.999, trial).unwrap();
        above += (stat > thr) as usize;
    }
    let mut worst_mi: f64 = 0.0;
    for trial in 0..10u64 {
        let (a, b) = (uniforms(10_000, 50_000 + 2 * trial), uniforms(10_000, 50_001 + 2 * trial));
        worst_mi = worst_mi.max(mi_histogram(&a, &b, 16).unwrap());
    }
    verdict(
        7,
        "estimator calibration",
        below >= 90 && above == 100 && worst_mi < 0.08,
        format!("HSIC independent below 0.95 threshold {below}/100 (>= 90), dependent above 0.999 threshold {above}/100, histogram MI worst of 10 {worst_mi:.4} bits (< 0.08)"),
        start.elapsed(),
        Duration::from_secs(120),
    );
}

/// Classical Jacobi eigensolver pivoting on the largest off-diagonal entry.
/// Returns the unit eigenvector of the largest eigenvalue.
fn jacobi_top(a: &[f64], d: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _ in 0..10_000 {
        let (mut p, mut q, mut big) = (0, 1, 0.0);
        for i in 0..d {
            for j in i + 1..d {
                if m[i * d + j].abs() > big {
                    (p, q, big) = (i, j, m[i * d + j].abs());
                }
            }
        }
        if big < 1e-300 {
            break;
        }
        let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * m[p * d + q]);
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let t = if theta == 0.0 { 1.0 } else { t };
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        for k in 0..d {
            let (mkp, mkq) = (m[k * d + p], m[k * d + q]);
            m[k * d + p] = c * mkp - s * mkq;
            m[k * d + q] = s * mkp + c * mkq;
        }
        for k in 0..d {
            let (mpk, mqk) = (m[p * d + k], m[q * d + k]);
            m[p * d + k] = c * mpk - s * mqk;
            m[q * d + k] = s * mpk + c * mqk;
        }
        for k in 0..d {
            let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
            v[k * d + p] = c * vkp - s * vkq;
            v[k * d + q] = s * vkp + c * vkq;
        }
    }
    let top = (0..d).max_by(|&i, &j| m[i * d + i].total_cmp(&m[j * d + j])).unwrap();
    (0..d).map(|k| v[k * d + top]).collect()
}

/// `y[b, o, i] = bias[o] + sum_c sum_j w[o, c, j] * x[b, c, i + j - k/2]` for odd `k`, zero outside.
fn conv1d_oracle(x: &Tensor, w: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (bsz, cin, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let mut out = Vec::with_capacity(bsz * cout * t);
    for b in 0..bsz {
        for o in 0..cout {
            for i in 0..t {
                let mut acc = 0.0;
                for c in 0..cin {
                    for j in 0..k {
                        let src = i as isize + j as isize - (k / 2) as isize;
                        if (0..t as isize).contains(&src) {
                            acc += w.data()[(o * cin + c) * k + j] * x.data()[(b * cin + c) * t + src as usize];
                        }
                    }
                }
                out.push(acc + bias.data()[o]);
            }
        }
    }
    out
}

#[test]
fn criterion_8_numerics_oracles() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let mut worst_align: f64 = 1.0;
    for _ in 0..20 {
        let d = rng.random_range(2..=8usize);
        let b: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
            }
        }
        let (_, vecs) = symmetric_eigen(&a, d).unwrap();
        let oracle = jacobi_top(&a, d);
        let dot: f64 = vecs[0].iter().zip(&oracle).map(|(x, y)| x * y).sum();
        worst_align = worst_align.min(dot.abs());
    }

    let mut conv_mismatch = 0;
    for _ in 0..100 {
        let (bsz, cin, cout, t) = (
            rng.random_range(1..=3usize),
            rng.random_range(1..=4usize),
            rng.random_range(1..=4usize),
            rng.random_range(1..=20usize),
        );
        let k = 2 * rng.random_range(0..=3usize) + 1;
        let x = normal(&mut rng, &[bsz, cin, t]);
        let w = normal(&mut rng, &[cout, cin, k]);
        let bias = normal(&mut rng, &[cout]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(bias.clone()));
        let y = g.conv1d(xv, wv, Some(bv)).unwrap();
        let want = conv1d_oracle(&x, &w, &bias);
        let same = g.value(y).data().iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
        conv_mismatch += (!same || g.value(y).numel() != want.len()) as usize;
    }

    // Hand recurrence for two steps on several coordinates.
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
    let theta0 = [1.0, -0.5, 0.0, 2.5];
    let grads = [[0.5, -2.0, 1e-3, 0.0], [0.25, 1.0, -1e-3, 0.0]];
    let mut params = vec![NamedTensor {
        name: "w".into(),
        tensor: Tensor::vector(theta0.to_vec()).unwrap(),
    }];
    let mut adam = AdamState::new(&params, lr);
    let mut worst_adam: f64 = 0.0;
    let (mut m, mut v, mut th) = ([0.0; 4], [0.0; 4], theta0);
    for (step, g) in grads.iter().enumerate() {
        let tt = step as i32 + 1;
        for i in 0..4 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / (1.0 - b1.powi(tt));
            let vhat = v[i] / (1.0 - b2.powi(tt));
            th[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        adam.step(&mut params, &[Tensor::vector(g.to_vec()).unwrap()]).unwrap();
        for i in 0..4 {
            worst_adam = worst_adam.max((params[0].tensor.data()[i] - th[i]).abs());
        }
    }

    verdict(
        8,
        "numerics oracles",
        worst_align >= 1.0 - 1e-8 && conv_mismatch == 0 && worst_adam <= 1e-12,
        format!(
            "PCA worst alignment 1-{:.1e} over 20 SPD matrices, conv1d mismatches {conv_mismatch}/100, Adam worst deviation {worst_adam:.1e} over 2 steps",
            1.0 - worst_align
        ),
        start.elapsed(),
        Duration::from_secs(10),
    );
}

fn train_into(cfg: &TrainConfig, data: &icarec_core::datagen::PairedDataset, dir: &Path) -> trainer::Nets {
    std::fs::create_dir_all(dir).unwrap();
    trainer::train(cfg, data, Some(dir)).unwrap().0
}

#[test]
fn criterion_9_reproducibility() {
    let _guard = serial();
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let mut identical = true;
    let mut round_trip = true;
    let mut notes = Vec::new();

    let flat = gen_2d(&MixingSpec::SoftplusNonlinear { a: DEFAULT_A }, 1000, 3).unwrap();
    let mut flat_cfg = TrainConfig::two_d(Activation::Softplus, 0.05, 3);
    flat_cfg.epochs = 4;
    let seq = gen_synthetic_fecg(
        &FecgConfig {
            n_segments: 4,
            ..FecgConfig::default()
        },
        1,
    )
    .unwrap();
    let mut seq_cfg = fecg_config(1);
    seq_cfg.epochs = 2;
    seq_cfg.batch_size = 2;
    seq_cfg.crops_per_sample = 1;

    for (name, cfg, data) in [("2d", &flat_cfg, &flat), ("fecg", &seq_cfg, &seq)] {
        let (a, b) = (root.path().join(format!("{name}-a")), root.path().join(format!("{name}-b")));
        let nets = train_into(cfg, data, &a);
        train_into(cfg, data, &b);
        for f in [METRICS_FILE, CHECKPOINT_FILE] {
            let same = std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
            identical &= same;
            notes.push(format!("{name} {f} {}", if same { "identical" } else { "DIFFERS" }));
        }
        let text = std::fs::read_to_string(a.join(CHECKPOINT_FILE)).unwrap();
        let ckpt: TrainCheckpoint = io::parse_json(&text).unwrap();
        let mut restored = ckpt.nets().unwrap();
        restored.set_mode(Mode::Eval);
        let again = io::to_json(&ckpt);
        let nets_same = restored.encoder.bit_eq(&nets.encoder)
            && restored.decoder.bit_eq(&nets.decoder)
            && restored.discriminator.bit_eq(&nets.discriminator);
        let codes_same = encode_dataset(&restored.encoder, &data.x)
            .unwrap()
            .bit_eq(&encode_dataset(&nets.encoder, &data.x).unwrap());
        let ok = nets_same && codes_same && again == text;
        round_trip &= ok;
        notes.push(format!("{name} checkpoint round trip {}", if ok { "bit-exact" } else { "NOT bit-exact" }));
    }
    verdict(
        9,
        "reproducibility",
        identical && round_trip,
        notes.join(", "),
        start.elapsed(),
        Duration::from_secs(120),
    );
}
