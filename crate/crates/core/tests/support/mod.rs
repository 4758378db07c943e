//! Random program generators and reference checks shared by the integration
//! tests and the acceptance suite.
#![allow(dead_code)]

use bittrace_core::autograd::{Feed, Graph, NodeId, Op};
use bittrace_core::linalg::matmul;
use bittrace_core::oracle::matched_bits;
use bittrace_core::precision::{self, Tracked};
use bittrace_core::{MatmulStrategy, PTensor, Precision, ReduceOp, UnaryFn};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;

pub const S: Precision = Precision::Single;

/// A single-precision input carrying its genuine representation error:
/// the stored value is `x` rounded, the bits are the matched bits of that
/// rounding, and the exact value `x` becomes the shadow.
pub fn inexact_input<R: Rng>(rng: &mut R, x: f64) -> (Tracked, f64) {
    let stored = S.round(x);
    let bits = if rng.gen_bool(0.5) {
        matched_bits(stored, x, S).saturating_sub(rng.gen_range(0..3))
    } else {
        matched_bits(stored, x, S)
    };
    let bits = if stored == x {
        S.max_bits()
    } else {
        bits.min(S.max_bits() - 1)
    };
    (Tracked::new(stored, bits), x)
}

pub fn random_scalar<R: Rng>(rng: &mut R, near: Option<f64>) -> f64 {
    match rng.gen_range(0..10) {
        0 => 0.0,
        1 => 2f64.powi(rng.gen_range(-6..6)) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        2 | 3 => match near {
            Some(v) if v.is_finite() => {
                v * (1.0 + f64::from(rng.gen_range(-8i32..8)) * 2f64.powi(-rng.gen_range(10..24)))
            }
            _ => rng.gen_range(-2.0..2.0),
        },
        4 => rng.gen_range(-100.0..100.0),
        _ => rng.gen_range(-2.0..2.0),
    }
}

/// Runs one random scalar chain of `len` operations in single precision
/// next to its double shadow and returns the largest excess of estimated
/// over matched bits seen at any step.
pub fn chain_excess<R: Rng>(rng: &mut R, len: usize) -> i32 {
    let mut pool: Vec<(Tracked, f64)> = (0..2)
        .map(|_| {
            let x = random_scalar(rng, None);
            inexact_input(rng, x)
        })
        .collect();
    let mut worst = i32::MIN;
    for _ in 0..len {
        let (a, sa) = *pool.last().expect("pool is never empty");
        let (b, sb) = if rng.gen_bool(0.5) {
            pool[rng.gen_range(0..pool.len())]
        } else {
            let x = random_scalar(rng, Some(sa));
            inexact_input(rng, x)
        };
        let next = match rng.gen_range(0..6) {
            0 => (precision::add(S, a, b), sa + sb),
            1 => (precision::sub(S, a, b), sa - sb),
            2 => (precision::mul(S, a, b), sa * sb),
            3 => (precision::div(S, a, b), sa / sb),
            _ => {
                let f = UnaryFn::ALL[rng.gen_range(0..UnaryFn::ALL.len())];
                (precision::unary(S, f, a), f.eval(sa))
            }
        };
        let excess = i32::from(next.0.bits) - i32::from(matched_bits(next.0.value, next.1, S));
        worst = worst.max(excess);
        // keep the chain alive once it overflows or hits NaN
        if next.0.value.is_finite() && next.1.is_finite() {
            pool.push(next);
        } else {
            let x = random_scalar(rng, None);
            pool.push(inexact_input(rng, x));
        }
    }
    worst
}

pub struct MatmulCase {
    pub a: PTensor,
    pub b: PTensor,
    pub a_shadow: Vec<f64>,
    pub b_shadow: Vec<f64>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub fn random_matmul<R: Rng>(rng: &mut R, max_dim: usize) -> MatmulCase {
    let (m, k, n) = (
        rng.gen_range(1..=max_dim),
        rng.gen_range(1..=max_dim),
        rng.gen_range(1..=max_dim),
    );
    let mut make = |len: usize| {
        let dist = Uniform::new_inclusive(-1.0, 1.0);
        let inexact = rng.gen_bool(0.3);
        let mut vals = Vec::with_capacity(len);
        let mut bits = Vec::with_capacity(len);
        let mut shadow = Vec::with_capacity(len);
        for _ in 0..len {
            let x = dist.sample(rng);
            if inexact {
                let (t, s) = inexact_input(rng, x);
                vals.push(t.value);
                bits.push(t.bits);
                shadow.push(s);
            } else {
                let v = S.round(x);
                vals.push(v);
                bits.push(S.max_bits());
                shadow.push(v);
            }
        }
        (vals, bits, shadow)
    };
    let (av, ab, ash) = make(m * k);
    let (bv, bb, bsh) = make(k * n);
    MatmulCase {
        a: PTensor::from_parts(&[m, k], av, ab, S).expect("valid operand"),
        b: PTensor::from_parts(&[k, n], bv, bb, S).expect("valid operand"),
        a_shadow: ash,
        b_shadow: bsh,
        m,
        k,
        n,
    }
}

/// Sequential double-precision product in the same k order.
pub fn shadow_product(c: &MatmulCase) -> Vec<f64> {
    let mut out = vec![0.0; c.m * c.n];
    for i in 0..c.m {
        for j in 0..c.n {
            let mut acc = 0.0;
            for l in 0..c.k {
                acc += c.a_shadow[i * c.k + l] * c.b_shadow[l * c.n + j];
            }
            out[i * c.n + j] = acc;
        }
    }
    out
}

/// Largest estimated-minus-matched excess over the elements of one product.
pub fn matmul_excess(c: &MatmulCase, s: MatmulStrategy) -> i32 {
    let r = matmul(&c.a, &c.b, s).expect("conforming operands");
    let shadow = shadow_product(c);
    r.values()
        .iter()
        .zip(r.bits())
        .zip(&shadow)
        .map(|((&w, &e), &sh)| i32::from(e) - i32::from(matched_bits(w, sh, S)))
        .max()
        .unwrap_or(i32::MIN)
}

/// A random double-precision graph with trainable leaves and a scalar loss.
pub struct GradCase {
    pub graph: Graph,
    pub feed: Feed,
    pub loss: NodeId,
    pub params: Vec<NodeId>,
    pub kind: &'static str,
}

const D: Precision = Precision::Double;

fn rand_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> PTensor {
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    PTensor::exact_literal(v, shape, D).expect("finite values")
}

pub const GRAD_KINDS: usize = 7;

pub fn random_grad_case<R: Rng>(rng: &mut R, kind: usize) -> GradCase {
    let mut g = Graph::new(D);
    let mut feed = Feed::new();
    let mut params = Vec::new();
    let mut param = |g: &mut Graph, feed: &mut Feed, rng: &mut R, shape: &[usize], lo: f64, hi: f64| {
        let id = g.parameter("p");
        feed.insert(id, rand_tensor(rng, shape, lo, hi));
        params.push(id);
        id
    };
    let (loss, name) = match kind % GRAD_KINDS {
        0 => {
            let (b, i, o) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            let x = param(&mut g, &mut feed, rng, &[b, i], -1.0, 1.0);
            let w = param(&mut g, &mut feed, rng, &[o, i], -1.0, 1.0);
            let bias = param(&mut g, &mut feed, rng, &[o], -1.0, 1.0);
            let t = g.input("t");
            feed.insert(t, rand_tensor(rng, &[b, o], -1.0, 1.0));
            let wt = g.transpose(w);
            let y = g.matmul(x, wt, MatmulStrategy::Rigorous);
            let y = g.add(y, bias);
            (g.mse_loss(y, t), "linear+mse")
        }
        1 => {
            let (b, i, h, c) = (
                rng.gen_range(1..5),
                rng.gen_range(1..4),
                rng.gen_range(2..6),
                rng.gen_range(2..5),
            );
            let x = param(&mut g, &mut feed, rng, &[b, i], -1.0, 1.0);
            let w1 = param(&mut g, &mut feed, rng, &[i, h], -1.0, 1.0);
            let b1 = param(&mut g, &mut feed, rng, &[h], -0.5, 0.5);
            let w2 = param(&mut g, &mut feed, rng, &[h, c], -1.0, 1.0);
            let b2 = param(&mut g, &mut feed, rng, &[c], -0.5, 0.5);
            let labels = g.input("labels");
            let l: Vec<f64> = (0..b).map(|_| rng.gen_range(0..c) as f64).collect();
            feed.insert(labels, PTensor::exact_literal(l, &[b], D).expect("labels"));
            let z = g.matmul(x, w1, MatmulStrategy::Rigorous);
            let z = g.add(z, b1);
            let a = g.relu(z);
            let y = g.matmul(a, w2, MatmulStrategy::TropicalBound);
            let y = g.add(y, b2);
            (g.cross_entropy(y, labels), "mlp+xent")
        }
        2 => {
            let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
            let (h, w) = (rng.gen_range(3..6), rng.gen_range(3..6));
            let stride = rng.gen_range(1..3);
            let x = param(&mut g, &mut feed, rng, &[n, c, h, w], -1.0, 1.0);
            let k = param(&mut g, &mut feed, rng, &[o, c, 3, 3], -1.0, 1.0);
            let b = param(&mut g, &mut feed, rng, &[o], -0.5, 0.5);
            let y = g.conv2d(x, k, b, stride);
            let y = g.unary(UnaryFn::Tanh, y);
            let y = g.flatten(y);
            let y = g.mul(y, y);
            (g.mean(y, None), "conv+tanh+mean")
        }
        3 => {
            let len = rng.gen_range(1..8);
            let a = param(&mut g, &mut feed, rng, &[len], -2.0, 2.0);
            let b = param(&mut g, &mut feed, rng, &[len], 0.5, 2.0);
            let s = g.unary(UnaryFn::Sigmoid, a);
            let l = g.unary(UnaryFn::Log, s);
            let e = g.unary(UnaryFn::Exp, a);
            let r = g.unary(UnaryFn::Sqrt, b);
            let q = g.div(e, r);
            let d = g.sub(l, q);
            let m = g.mul(d, b);
            (g.sum(m, None), "unary chain")
        }
        4 => {
            let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let a = param(&mut g, &mut feed, rng, &[r, c], -1.0, 1.0);
            let b = param(&mut g, &mut feed, rng, &[c], -1.0, 1.0);
            let t = g.transpose(a);
            let t = g.reshape(t, &[c, r]);
            let u = g.transpose(t);
            let v = g.mul(u, b);
            let m = g.mean(v, Some(1));
            let s = g.unary(UnaryFn::Tanh, m);
            let n = g.unary(UnaryFn::Neg, s);
            (g.sum(n, Some(0)), "reshape+broadcast+mean")
        }
        5 => {
            // separated values keep the max away from ties
            let (r, c) = (rng.gen_range(1..4), rng.gen_range(2..5));
            let id = g.parameter("p");
            let mut v: Vec<f64> = (0..r * c).map(|i| i as f64 * 0.37 + rng.gen_range(0.0..0.1)).collect();
            for i in (1..v.len()).rev() {
                v.swap(i, rng.gen_range(0..=i));
            }
            feed.insert(id, PTensor::exact_literal(v, &[r, c], D).expect("finite"));
            params.push(id);
            let sq = g.mul(id, id);
            let mx = g.reduce(ReduceOp::Max, sq, Some(1));
            let ab = g.unary(UnaryFn::Abs, mx);
            (g.sum(ab, None), "max+abs")
        }
        _ => {
            let (b, c) = (rng.gen_range(1..5), rng.gen_range(2..6));
            let y = param(&mut g, &mut feed, rng, &[b, c], -3.0, 3.0);
            let t = param(&mut g, &mut feed, rng, &[b, c], -3.0, 3.0);
            let d = g.div(y, t);
            let w = g.unary(UnaryFn::Tanh, d);
            let labels = g.input("labels");
            let l: Vec<f64> = (0..b).map(|_| rng.gen_range(0..c) as f64).collect();
            feed.insert(labels, PTensor::exact_literal(l, &[b], D).expect("labels"));
            (g.cross_entropy(w, labels), "div+xent")
        }
    };
    GradCase {
        graph: g,
        feed,
        loss,
        params,
        kind: name,
    }
}

/// Whether any ReLU/Abs input or divisor sits close enough to a kink or
/// pole that finite differences are meaningless.
pub fn near_kink(g: &Graph) -> bool {
    g.ids().any(|id| {
        let input = |i: usize| g.value(g.preds(id)[i]).expect("forward ran");
        match g.op(id) {
            Op::Unary(UnaryFn::Relu) | Op::Unary(UnaryFn::Abs) => input(0).values().iter().any(|v| v.abs() < 1e-2),
            Op::Binary(bittrace_core::BinaryOp::Div) => input(1).values().iter().any(|v| v.abs() < 0.2),
            _ => false,
        }
    })
}

fn loss_at(g: &mut Graph, feed: &Feed, loss: NodeId) -> f64 {
    g.forward(feed).expect("forward");
    let v = g.value(loss).expect("loss computed").values()[0];
    g.release_temporaries();
    v
}

pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

pub const FD_REL_TOL: f64 = 1e-6;
pub const FD_ABS_FLOOR: f64 = 1e-9;
pub const FD_MIN_GRAD: f64 = 1e-8;

/// Compares backward gradients with five-point central differences.
/// Returns `None` when the instance sits near a kink.
pub fn check_gradients(case: &mut GradCase) -> Option<GradCheck> {
    let g = &mut case.graph;
    g.forward(&case.feed).expect("forward");
    if near_kink(g) {
        g.release_temporaries();
        return None;
    }
    let base = g.value(case.loss).expect("loss").values()[0];
    let grads = g.backward(case.loss).expect("backward");
    let scale = base.abs().max(1.0);
    let mut out = GradCheck {
        checked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    for &p in &case.params {
        let analytic = grads.get(p).expect("parameter reached the loss").clone();
        let x0 = case.feed[&p].clone();
        for i in 0..x0.numel() {
            let h = 1e-4 * x0.values()[i].abs().max(1.0);
            let mut eval = |delta: f64| {
                let mut v = x0.values().to_vec();
                v[i] += delta;
                let t = PTensor::exact_literal(v, x0.shape(), D).expect("finite");
                let mut feed = case.feed.clone();
                feed.insert(p, t);
                loss_at(g, &feed, case.loss)
            };
            let fd = (-eval(2.0 * h) + 8.0 * eval(h) - 8.0 * eval(-h) + eval(-2.0 * h)) / (12.0 * h);
            let an = analytic.values()[i];
            if an.abs() <= FD_MIN_GRAD {
                continue;
            }
            out.checked += 1;
            let err = (fd - an).abs();
            out.worst_rel = out.worst_rel.max(err / an.abs());
            if err > FD_REL_TOL * an.abs() + FD_ABS_FLOOR * scale {
                out.failures
                    .push(format!("{}: node {p} element {i}: analytic {an} vs fd {fd}", case.kind));
            }
        }
    }
    Some(out)
}
