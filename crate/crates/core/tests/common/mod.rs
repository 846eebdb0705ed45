//! Oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use argmaxgrad::tensor::{forward_mlp, Activation, LayerSpec, MlpParams, NodeId, Tape, Tensor};
use argmaxgrad::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the test oracle free of the crate's own samplers.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| scale * normal(rng)).collect()).unwrap()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (l2(a) * l2(b))
}

pub fn l2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_l2(estimate: &[f64], truth: &[f64]) -> f64 {
    let diff: Vec<f64> = estimate.iter().zip(truth).map(|(x, y)| x - y).collect();
    l2(&diff) / l2(truth)
}

/// `|a - n| / max(|a|, |n|, 1)`: relative for large gradients, absolute
/// below one.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

type Build<'a> = dyn Fn(&mut Tape, NodeId) -> Result<NodeId> + 'a;

/// Largest relative error between the tape gradient of
/// `sum(weights * build(x))` and central differences of the same scalar.
pub fn fd_check(x: &Tensor, build: &Build, weight_seed: u64) -> f64 {
    let eval = |x: &Tensor| -> (f64, Tape, NodeId, NodeId) {
        let mut tape = Tape::new();
        let p = tape.param(x.clone());
        let y = build(&mut tape, p).unwrap();
        let shape = tape.value(y).shape().to_vec();
        let mut wr = rng(weight_seed);
        let n: usize = shape.iter().product();
        let w = Tensor::new(shape, (0..n).map(|_| normal(&mut wr)).collect()).unwrap();
        let s = tape.weighted_sum(y, w).unwrap();
        (tape.value(s).item(), tape, p, s)
    };
    let (_, tape, p, s) = eval(x);
    let analytic = tape.backward(s).unwrap().wrt(p);
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

/// Move entries away from the ReLU kink so central differences are valid.
fn off_kink(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 1e-2 {
            *v = if *v < 0.0 { -0.5 } else { 0.5 };
        }
    }
    t
}

/// FD check of each tape primitive on `instances` random inputs. Returns
/// `(primitive, worst relative error)`.
pub fn primitive_fd_errors(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match out.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(e),
        None => out.push((name, e)),
    };
    for case in 0..instances {
        let rows = r.gen_range(1..=4);
        let cols = r.gen_range(1..=5);
        let inner = r.gen_range(1..=4);
        let ws = seed.wrapping_mul(1000).wrapping_add(case as u64);
        let x = random_tensor(&mut r, rows, cols, 2.0);
        let other = random_tensor(&mut r, rows, cols, 2.0);
        let rhs = random_tensor(&mut r, cols, inner, 1.0);
        let lhs = random_tensor(&mut r, inner, rows, 1.0);
        let bias = random_tensor(&mut r, 1, cols, 1.0).reshape(vec![cols]).unwrap();
        let targets = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen::<f64>()).collect()).unwrap();
        let cross_targets = random_tensor(&mut r, inner, cols, 1.0).map(|v| (v > 0.0) as u8 as f64);
        let (o, rh, lh, b, t, ct) = (&other, &rhs, &lhs, &bias, &targets, &cross_targets);

        record("matmul_lhs", fd_check(&x, &|tp, p| { let c = tp.constant(rh.clone()); tp.matmul(p, c) }, ws));
        record("matmul_rhs", fd_check(&x, &|tp, p| { let c = tp.constant(lh.clone()); tp.matmul(c, p) }, ws));
        record("add_row_x", fd_check(&x, &|tp, p| { let c = tp.constant(b.clone()); tp.add_row(p, c) }, ws));
        record("add_row_bias", fd_check(&bias, &|tp, p| { let c = tp.constant(o.clone()); tp.add_row(c, p) }, ws));
        record("add", fd_check(&x, &|tp, p| { let c = tp.constant(o.clone()); tp.add(p, c) }, ws));
        record("sub", fd_check(&x, &|tp, p| { let c = tp.constant(o.clone()); tp.sub(c, p) }, ws));
        record("mul", fd_check(&x, &|tp, p| { let c = tp.constant(o.clone()); tp.mul(p, c) }, ws));
        record("mul_self", fd_check(&x, &|tp, p| tp.mul(p, p), ws));
        record("scale", fd_check(&x, &|tp, p| Ok(tp.scale(p, -1.7)), ws));
        record("relu", fd_check(&off_kink(x.clone()), &|tp, p| Ok(tp.relu(p)), ws));
        record("sigmoid", fd_check(&x, &|tp, p| Ok(tp.sigmoid(p)), ws));
        record("softplus", fd_check(&x, &|tp, p| Ok(tp.softplus(p)), ws));
        record("exp", fd_check(&x.map(|v| v * 0.5), &|tp, p| Ok(tp.exp(p)), ws));
        record("log_softmax", fd_check(&x, &|tp, p| tp.log_softmax(p), ws));
        record("softmax", fd_check(&x, &|tp, p| tp.softmax(p), ws));
        record("sum", fd_check(&x, &|tp, p| Ok(tp.sum(p)), ws));
        record("weighted_sum", fd_check(&x, &|tp, p| tp.weighted_sum(p, o.clone()), ws));
        if cols > 1 {
            record("slice_cols", fd_check(&x, &|tp, p| tp.slice_cols(p, 1, cols), ws));
        }
        record("bce_loss", fd_check(&x, &|tp, p| { let c = tp.constant(t.clone()); tp.bce_loss(p, c) }, ws));
        record("bce_rows", fd_check(&x, &|tp, p| { let c = tp.constant(t.clone()); tp.bce_rows(p, c) }, ws));
        record("bce_cross", fd_check(&x, &|tp, p| { let c = tp.constant(ct.clone()); tp.bce_cross(p, c) }, ws));
    }
    out
}

/// FD check of a random two-layer ReLU network's BCE loss with respect to
/// all of its parameters.
pub fn mlp_fd_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (d, h, o, b) = (r.gen_range(2..=6), r.gen_range(2..=6), r.gen_range(1..=4), r.gen_range(1..=3));
    let params = MlpParams::init(
        &[LayerSpec::new(d, h, Activation::Relu), LayerSpec::new(h, o, Activation::Identity)],
        &mut r,
    )
    .unwrap();
    let x = random_tensor(&mut r, b, d, 1.0);
    let t = Tensor::matrix(b, o, (0..b * o).map(|_| r.gen::<f64>()).collect()).unwrap();
    let loss = |p: &MlpParams| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let nodes = forward_mlp(p, xi, &mut tape).unwrap();
        let ti = tape.constant(t.clone());
        let l = tape.bce_loss(nodes.output, ti).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).item(), nodes.grads(&g).flatten())
    };
    let (_, analytic) = loss(&params);
    let flat = params.flatten();
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let mut p = params.clone();
        let mut v = flat.clone();
        v[i] += FD_STEP;
        p.assign_flat(&v).unwrap();
        let up = loss(&p).0;
        v[i] -= 2.0 * FD_STEP;
        p.assign_flat(&v).unwrap();
        let down = loss(&p).0;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

/// Encoder/decoder pair without hidden layers: `d*k + k` parameters each
/// way plus `k*d + d` for the decoder.
pub fn linear_pair(seed: u64, d: usize, k: usize) -> (MlpParams, MlpParams) {
    let mut r = rng(seed);
    let enc = MlpParams::init(&[LayerSpec::new(d, k, Activation::Identity)], &mut r).unwrap();
    let dec = MlpParams::init(&[LayerSpec::new(k, d, Activation::Identity)], &mut r).unwrap();
    (perturb_biases(enc, &mut r), perturb_biases(dec, &mut r))
}

/// Encoder/decoder pair with one ReLU hidden layer each.
pub fn hidden_pair(seed: u64, d: usize, h: usize, k: usize) -> (MlpParams, MlpParams) {
    let mut r = rng(seed);
    let enc = MlpParams::init(
        &[LayerSpec::new(d, h, Activation::Relu), LayerSpec::new(h, k, Activation::Identity)],
        &mut r,
    )
    .unwrap();
    let dec = MlpParams::init(
        &[LayerSpec::new(k, h, Activation::Relu), LayerSpec::new(h, d, Activation::Identity)],
        &mut r,
    )
    .unwrap();
    (perturb_biases(enc, &mut r), perturb_biases(dec, &mut r))
}

/// Glorot init leaves biases at zero; random biases make the tests exercise
/// their gradients.
fn perturb_biases(mut p: MlpParams, r: &mut ChaCha8Rng) -> MlpParams {
    for l in p.layers_mut() {
        for b in l.bias.data_mut() {
            *b = 0.3 * normal(r);
        }
    }
    p
}

pub fn binary_images(seed: u64, rows: usize, d: usize) -> Tensor {
    let mut r = rng(seed);
    Tensor::matrix(rows, d, (0..rows * d).map(|_| (r.gen::<f64>() < 0.4) as u8 as f64).collect()).unwrap()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lz = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lz).collect()
}

fn bce(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// `f(x, z) = -sum_p BCE(decoder(input)_p, x_p)`, evaluated without the tape.
pub fn log_lik(dec: &MlpParams, input: &[f64], x: &[f64]) -> f64 {
    let out = dec.forward(&Tensor::matrix(1, input.len(), input.to_vec()).unwrap()).unwrap();
    -out.data().iter().zip(x).map(|(&l, &t)| bce(l, t)).sum::<f64>()
}

/// Posterior `q(.|x_b)` per row.
pub fn posterior(enc: &MlpParams, x: &Tensor) -> Vec<Vec<f64>> {
    let logits = enc.forward(x).unwrap();
    (0..x.rows()).map(|b| log_softmax(logits.row(b)).iter().map(|l| l.exp()).collect()).collect()
}

pub fn one_hot(k: usize, z: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[z] = 1.0;
    v
}

/// `(1/B) sum_b sum_z q(z|x_b) f(x_b, z)` by direct enumeration.
pub fn exact_objective(enc: &MlpParams, dec: &MlpParams, x: &Tensor) -> f64 {
    let q = posterior(enc, x);
    let k = q[0].len();
    let mut total = 0.0;
    for (b, qb) in q.iter().enumerate() {
        for z in 0..k {
            total += qb[z] * log_lik(dec, &one_hot(k, z), x.row(b));
        }
    }
    total / x.rows() as f64
}

/// Batch mean of `f(x_b, softmax((log q + gamma) / tau))`.
pub fn relaxed_objective(enc: &MlpParams, dec: &MlpParams, x: &Tensor, gamma: &[f64], tau: f64) -> f64 {
    let logits = enc.forward(x).unwrap();
    let k = logits.cols();
    let mut total = 0.0;
    for b in 0..x.rows() {
        let lq = log_softmax(logits.row(b));
        let s: Vec<f64> = (0..k).map(|z| (lq[z] + gamma[b * k + z]) / tau).collect();
        let y: Vec<f64> = log_softmax(&s).iter().map(|l| l.exp()).collect();
        total += log_lik(dec, &y, x.row(b));
    }
    total / x.rows() as f64
}

/// Central-difference gradient of `obj` in the flattened parameters of
/// both networks.
pub fn fd_gradient(
    enc: &MlpParams,
    dec: &MlpParams,
    obj: &dyn Fn(&MlpParams, &MlpParams) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = (Vec::new(), Vec::new());
    for which in 0..2 {
        let base = if which == 0 { enc.flatten() } else { dec.flatten() };
        for i in 0..base.len() {
            let at = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let (mut e, mut d) = (enc.clone(), dec.clone());
                if which == 0 { e.assign_flat(&v).unwrap() } else { d.assign_flat(&v).unwrap() }
                obj(&e, &d)
            };
            let g = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            if which == 0 { out.0.push(g) } else { out.1.push(g) }
        }
    }
    out
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

/// Random pairwise potentials; `supermodular` makes every weight >= 0.
pub fn random_potentials(r: &mut ChaCha8Rng, n: usize, supermodular: bool, scale: f64) -> argmaxgrad::structured::PairwisePotentials {
    use argmaxgrad::structured::{Edge, PairwisePotentials};
    let unary = (0..n).map(|_| [scale * normal(r), scale * normal(r)]).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if r.gen::<f64>() < 0.5 {
                let a = scale * normal(r);
                edges.push(Edge { i, j, alpha: if supermodular { a.abs() } else { a } });
            }
        }
    }
    PairwisePotentials::new(n, unary, edges).unwrap()
}

/// Term-by-term score, independent of the crate's scorer.
pub fn naive_score(p: &argmaxgrad::structured::PairwisePotentials, bits: &[u8], gamma: Option<&[f64]>) -> f64 {
    let mut s = 0.0;
    for (i, &b) in bits.iter().enumerate() {
        s += p.unary()[i][b as usize];
        if let Some(g) = gamma {
            s += g[2 * i + b as usize];
        }
    }
    for e in p.edges() {
        s += e.alpha * (bits[e.i] * bits[e.j]) as f64;
    }
    s
}

pub fn mask_bits(mask: u64, n: usize) -> Vec<u8> {
    (0..n).map(|i| ((mask >> i) & 1) as u8).collect()
}

/// Best naive score over all `2^n` assignments.
pub fn naive_max(p: &argmaxgrad::structured::PairwisePotentials, gamma: Option<&[f64]>) -> f64 {
    (0..1u64 << p.n()).map(|m| naive_score(p, &mask_bits(m, p.n()), gamma)).fold(f64::NEG_INFINITY, f64::max)
}
