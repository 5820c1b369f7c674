//! Finite-difference gradient checks for every differentiable graph op.
//!
//! Each check draws random inputs, contracts the op output with a random
//! projection `r` so the loss is `Σ r·y`, and compares the graph's analytic
//! gradients against central differences of the `f64` reference op.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stagewise::tensor::{Graph, Tensor, Var};

use super::reference as r;
use super::{away_from_zero, distinct, numeric_grad, relative_error, rng, to64, uniform};

pub const INSTANCES: usize = 20;

pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Input {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        Self { shape: shape.to_vec(), data }
    }
}

/// Worst relative error over all inputs of one instance.
pub fn check(
    rng: &mut ChaCha8Rng,
    inputs: &[Input],
    build: impl Fn(&mut Graph, &[Var]) -> Var,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> f64 {
    let mut g = Graph::with_seed(11);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| g.leaf(Tensor::new(&i.shape, i.data.clone()).unwrap().with_requires_grad(true)))
        .collect();
    let y = build(&mut g, &vars);
    let n_out = g.value(y).numel();
    let proj = uniform(rng, n_out, -1.0, 1.0);
    let pv = g.leaf(Tensor::new(g.shape(y), proj.clone()).unwrap());
    let prod = g.mul(y, pv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();

    let proj64 = to64(&proj);
    let base: Vec<Vec<f64>> = inputs.iter().map(|i| to64(&i.data)).collect();
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let numeric = numeric_grad(&base[k], |xk| {
            let mut all = base.clone();
            all[k] = xk.to_vec();
            r::dot(&reference(&all), &proj64)
        });
        let analytic = g.grad(*var).unwrap();
        worst = worst.max(relative_error(analytic, &numeric));
    }
    worst
}

fn run(seed: u64, mut instance: impl FnMut(&mut ChaCha8Rng) -> f64) -> f64 {
    let mut rng = rng(seed);
    (0..INSTANCES).map(|_| instance(&mut rng)).fold(0.0, f64::max)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub fn conv2d() -> f64 {
    run(1, |rng| {
        let (n, c, o) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
        let k = [1, 3][dim(rng, 0, 1)];
        let stride = dim(rng, 1, 2);
        let pad = dim(rng, 0, k / 2 + 1).min(k - 1 + (k == 1) as usize);
        let (h, w) = (dim(rng, k.max(3), 6), dim(rng, k.max(3), 6));
        let with_bias = rng.random::<bool>();
        let mut inputs = vec![
            Input::new(&[n, c, h, w], uniform(rng, n * c * h * w, -1.0, 1.0)),
            Input::new(&[o, c, k, k], uniform(rng, o * c * k * k, -1.0, 1.0)),
        ];
        if with_bias {
            inputs.push(Input::new(&[o], uniform(rng, o, -1.0, 1.0)));
        }
        check(
            rng,
            &inputs,
            |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad).unwrap(),
            |a| r::conv2d(&a[0], [n, c, h, w], &a[1], [o, c, k, k], a.get(2).map(|b| &b[..]), stride, pad).0,
        )
    })
}

pub fn batchnorm2d_train() -> f64 {
    run(2, |rng| {
        let (n, c, h, w) = (dim(rng, 2, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 3));
        let inputs = [
            Input::new(&[n, c, h, w], uniform(rng, n * c * h * w, -2.0, 2.0)),
            Input::new(&[c], uniform(rng, c, 0.5, 1.5)),
            Input::new(&[c], uniform(rng, c, -0.5, 0.5)),
        ];
        check(
            rng,
            &inputs,
            |g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0,
            |a| r::batch_norm_train(&a[0], &[n, c, h, w], &a[1], &a[2], 1e-5),
        )
    })
}

pub fn batchnorm2d_eval() -> f64 {
    run(3, |rng| {
        let (n, c, h, w) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
        let mean = uniform(rng, c, -0.5, 0.5);
        let var = uniform(rng, c, 0.5, 2.0);
        let inputs = [
            Input::new(&[n, c, h, w], uniform(rng, n * c * h * w, -2.0, 2.0)),
            Input::new(&[c], uniform(rng, c, 0.5, 1.5)),
            Input::new(&[c], uniform(rng, c, -0.5, 0.5)),
        ];
        let (m64, v64) = (to64(&mean), to64(&var));
        check(
            rng,
            &inputs,
            |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap(),
            |a| r::batch_norm_eval(&a[0], &[n, c, h, w], &a[1], &a[2], &m64, &v64, 1e-5),
        )
    })
}

pub fn batchnorm1d_train() -> f64 {
    run(4, |rng| {
        // Two samples normalize to ±1 whatever x is, leaving no x-gradient to check.
        let (n, c) = (dim(rng, 3, 6), dim(rng, 1, 5));
        let inputs = [
            Input::new(&[n, c], uniform(rng, n * c, -2.0, 2.0)),
            Input::new(&[c], uniform(rng, c, 0.5, 1.5)),
            Input::new(&[c], uniform(rng, c, -0.5, 0.5)),
        ];
        check(
            rng,
            &inputs,
            |g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0,
            |a| r::batch_norm_train(&a[0], &[n, c], &a[1], &a[2], 1e-5),
        )
    })
}

pub fn relu() -> f64 {
    run(5, |rng| {
        let n = dim(rng, 1, 30);
        let inputs = [Input::new(&[n], away_from_zero(rng, n, 0.05))];
        check(rng, &inputs, |g, v| g.relu(v[0]), |a| r::relu(&a[0]))
    })
}

pub fn linear() -> f64 {
    run(6, |rng| {
        let (n, inp, out) = (dim(rng, 1, 4), dim(rng, 1, 6), dim(rng, 1, 5));
        let with_bias = rng.random::<bool>();
        let mut inputs = vec![
            Input::new(&[n, inp], uniform(rng, n * inp, -1.0, 1.0)),
            Input::new(&[out, inp], uniform(rng, out * inp, -1.0, 1.0)),
        ];
        if with_bias {
            inputs.push(Input::new(&[out], uniform(rng, out, -1.0, 1.0)));
        }
        check(
            rng,
            &inputs,
            |g, v| g.linear(v[0], v[1], v.get(2).copied()).unwrap(),
            |a| r::linear(&a[0], n, inp, &a[1], out, a.get(2).map(|b| &b[..])),
        )
    })
}

pub fn dropout() -> f64 {
    run(7, |rng| {
        let n = dim(rng, 4, 40);
        let p = rng.random_range(0.1f32..0.7);
        // The graph seed fixes the mask; recover it from a probe of ones.
        let mut probe = Graph::with_seed(11);
        let ones = probe.leaf(Tensor::full(&[n], 1.0));
        let masked = probe.dropout(ones, p, true).unwrap();
        let mask = to64(probe.value(masked).data());
        let inputs = [Input::new(&[n], uniform(rng, n, -1.0, 1.0))];
        check(
            rng,
            &inputs,
            |g, v| g.dropout(v[0], p, true).unwrap(),
            |a| a[0].iter().zip(&mask).map(|(x, m)| x * m).collect(),
        )
    })
}

pub fn add() -> f64 {
    run(8, |rng| {
        let n = dim(rng, 1, 20);
        let inputs = [
            Input::new(&[n], uniform(rng, n, -1.0, 1.0)),
            Input::new(&[n], uniform(rng, n, -1.0, 1.0)),
        ];
        check(rng, &inputs, |g, v| g.add(v[0], v[1]).unwrap(), |a| {
            a[0].iter().zip(&a[1]).map(|(x, y)| x + y).collect()
        })
    })
}

pub fn elementwise() -> f64 {
    run(9, |rng| {
        let n = dim(rng, 1, 20);
        let k = rng.random_range(-2.0f32..2.0);
        let inputs = [
            Input::new(&[n], uniform(rng, n, -1.0, 1.0)),
            Input::new(&[n], uniform(rng, n, -1.0, 1.0)),
        ];
        // (a - b) * a * k
        check(
            rng,
            &inputs,
            |g, v| {
                let d = g.sub(v[0], v[1]).unwrap();
                let m = g.mul(d, v[0]).unwrap();
                g.scale(m, k)
            },
            |a| a[0].iter().zip(&a[1]).map(|(x, y)| (x - y) * x * k as f64).collect(),
        )
    })
}

pub fn flatten() -> f64 {
    run(10, |rng| {
        let (n, c, h, w) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
        let inputs = [Input::new(&[n, c, h, w], uniform(rng, n * c * h * w, -1.0, 1.0))];
        check(rng, &inputs, |g, v| g.flatten(v[0]).unwrap(), |a| a[0].clone())
    })
}

pub fn max_pool2d() -> f64 {
    run(11, |rng| {
        let (n, c, h, w) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 3, 7), dim(rng, 3, 7));
        let inputs = [Input::new(&[n, c, h, w], distinct(rng, n * c * h * w))];
        check(
            rng,
            &inputs,
            |g, v| g.max_pool2d(v[0], 3, 2, 1).unwrap(),
            |a| r::max_pool2d(&a[0], [n, c, h, w], 3, 2, 1).0,
        )
    })
}

pub fn global_avg_pool() -> f64 {
    run(12, |rng| {
        let (n, c, h, w) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 5), dim(rng, 1, 5));
        let inputs = [Input::new(&[n, c, h, w], uniform(rng, n * c * h * w, -1.0, 1.0))];
        check(
            rng,
            &inputs,
            |g, v| g.global_avg_pool(v[0]).unwrap(),
            |a| r::global_avg_pool(&a[0], [n, c, h, w]),
        )
    })
}

pub fn adaptive_concat_pool() -> f64 {
    run(13, |rng| {
        let (n, c, h, w) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 5), dim(rng, 1, 5));
        let inputs = [Input::new(&[n, c, h, w], distinct(rng, n * c * h * w))];
        check(
            rng,
            &inputs,
            |g, v| g.adaptive_concat_pool(v[0]).unwrap(),
            |a| r::concat_pool(&a[0], [n, c, h, w]),
        )
    })
}

pub fn cross_entropy() -> f64 {
    run(14, |rng| {
        let (n, k) = (dim(rng, 1, 6), dim(rng, 2, 5));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let inputs = [Input::new(&[n, k], uniform(rng, n * k, -3.0, 3.0))];
        let l2 = labels.clone();
        check(
            rng,
            &inputs,
            move |g, v| g.cross_entropy(v[0], &labels).unwrap(),
            move |a| vec![r::cross_entropy(&a[0], k, &l2)],
        )
    })
}

/// Smallest distance between the largest value of each window and the next
/// distinct value below it; only windows whose winner is positive matter
/// (all-zero windows after a relu stay zero under small perturbations).
fn max_gap(windows: impl Iterator<Item = Vec<f64>>) -> f64 {
    let mut gap = f64::INFINITY;
    for w in windows {
        let top = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if top <= 0.0 {
            continue;
        }
        let below = w.iter().cloned().filter(|&v| v < top).fold(f64::NEG_INFINITY, f64::max);
        gap = gap.min(top - below);
    }
    gap
}

fn relu_margin(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min)
}

/// Forward of the composite network in `f64`, plus the distance of the
/// instance from the nearest relu kink or max-pool tie.
fn composite_reference(a: &[Vec<f64>], dims: [usize; 5], labels: &[usize]) -> (f64, f64) {
    let [n, c, hw, hidden, k] = dims;
    let s = [n, c, hw, hw];
    let mut margin = f64::INFINITY;
    let x = r::conv2d(&a[0], s, &a[1], [c, c, 3, 3], None, 1, 1).0;
    let x = r::batch_norm_train(&x, &s, &a[2], &a[3], 1e-5);
    margin = margin.min(relu_margin(&x));
    let x = r::relu(&x);
    let x = r::conv2d(&x, s, &a[4], [c, c, 3, 3], None, 1, 1).0;
    let x = r::batch_norm_train(&x, &s, &a[5], &a[6], 1e-5);
    let x: Vec<f64> = x.iter().zip(&a[0]).map(|(p, q)| p + q).collect();
    margin = margin.min(relu_margin(&x));
    let x = r::relu(&x);
    margin = margin.min(max_gap(pool_windows(&x, s)));
    let (x, ps) = r::max_pool2d(&x, s, 3, 2, 1);
    margin = margin.min(max_gap(x.chunks(ps[2] * ps[3]).map(|p| p.to_vec())));
    let x = r::concat_pool(&x, ps);
    let x = r::batch_norm_train(&x, &[n, 2 * c], &a[7], &a[8], 1e-5);
    let x = r::linear(&x, n, 2 * c, &a[9], hidden, Some(&a[10]));
    margin = margin.min(relu_margin(&x));
    let x = r::relu(&x);
    let x = r::linear(&x, n, hidden, &a[11], k, Some(&a[12]));
    (r::cross_entropy(&x, k, labels), margin)
}

/// The 3×3, stride-2, pad-1 windows of every plane.
fn pool_windows(x: &[f64], s: [usize; 4]) -> impl Iterator<Item = Vec<f64>> + '_ {
    let [n, c, h, w] = s;
    let (ho, wo) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    (0..n * c).flat_map(move |p| {
        (0..ho * wo).map(move |o| {
            let (oy, ox) = (o / wo, o % wo);
            let mut win = Vec::new();
            for ky in 0..3 {
                for kx in 0..3 {
                    let (iy, ix) = ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                    if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                        win.push(x[(p * h + iy as usize) * w + ix as usize]);
                    }
                }
            }
            win
        })
    })
}

/// Clearance from kinks required of a composite instance. A step of 1e-3 on
/// any single input moves every pre-activation by far less than this.
const KINK_MARGIN: f64 = 0.02;

/// Residual unit followed by the replacement head and the loss:
/// conv → bn → relu → conv → bn → (+ skip) → relu → maxpool → concat pool →
/// bn1d → linear → relu → linear → cross entropy.
///
/// Central differences are meaningless across a relu kink or a max-pool tie,
/// so instances closer than [`KINK_MARGIN`] to one are redrawn.
pub fn composite() -> f64 {
    run(15, |rng| {
        let (n, c, hidden, k) = (3, 2, 3, 3);
        let hw = dim(rng, 3, 4);
        let dims = [n, c, hw, hidden, k];
        loop {
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let inputs = [
                Input::new(&[n, c, hw, hw], uniform(rng, n * c * hw * hw, -1.0, 1.0)),
                Input::new(&[c, c, 3, 3], uniform(rng, c * c * 9, -0.5, 0.5)),
                Input::new(&[c], uniform(rng, c, 0.5, 1.5)),
                Input::new(&[c], uniform(rng, c, -0.5, 0.5)),
                Input::new(&[c, c, 3, 3], uniform(rng, c * c * 9, -0.5, 0.5)),
                Input::new(&[c], uniform(rng, c, 0.5, 1.5)),
                Input::new(&[c], uniform(rng, c, -0.5, 0.5)),
                Input::new(&[2 * c], uniform(rng, 2 * c, 0.5, 1.5)),
                Input::new(&[2 * c], uniform(rng, 2 * c, -0.5, 0.5)),
                Input::new(&[hidden, 2 * c], uniform(rng, hidden * 2 * c, -1.0, 1.0)),
                Input::new(&[hidden], uniform(rng, hidden, 0.2, 0.6)),
                Input::new(&[k, hidden], uniform(rng, k * hidden, -1.0, 1.0)),
                Input::new(&[k], uniform(rng, k, -0.5, 0.5)),
            ];
            let base: Vec<Vec<f64>> = inputs.iter().map(|i| to64(&i.data)).collect();
            if composite_reference(&base, dims, &labels).1 < KINK_MARGIN {
                continue;
            }
            let l2 = labels.clone();
            return check(
                rng,
                &inputs,
                move |g, v| {
                    let a = g.conv2d(v[0], v[1], None, 1, 1).unwrap();
                    let a = g.batch_norm_train(a, v[2], v[3], 1e-5).unwrap().0;
                    let a = g.relu(a);
                    let a = g.conv2d(a, v[4], None, 1, 1).unwrap();
                    let a = g.batch_norm_train(a, v[5], v[6], 1e-5).unwrap().0;
                    let a = g.add(a, v[0]).unwrap();
                    let a = g.relu(a);
                    let a = g.max_pool2d(a, 3, 2, 1).unwrap();
                    let a = g.adaptive_concat_pool(a).unwrap();
                    let a = g.flatten(a).unwrap();
                    let a = g.batch_norm_train(a, v[7], v[8], 1e-5).unwrap().0;
                    let a = g.linear(a, v[9], Some(v[10])).unwrap();
                    let a = g.relu(a);
                    let a = g.linear(a, v[11], Some(v[12])).unwrap();
                    g.cross_entropy(a, &labels).unwrap()
                },
                move |a| vec![composite_reference(a, dims, &l2).0],
            );
        }
    })
}

/// Every check by name, for suites that report them together.
pub fn all() -> Vec<(&'static str, fn() -> f64)> {
    vec![
        ("conv2d", conv2d as fn() -> f64),
        ("batchnorm2d_train", batchnorm2d_train),
        ("batchnorm2d_eval", batchnorm2d_eval),
        ("batchnorm1d_train", batchnorm1d_train),
        ("relu", relu),
        ("linear", linear),
        ("dropout", dropout),
        ("add", add),
        ("sub_mul_scale", elementwise),
        ("flatten", flatten),
        ("max_pool2d", max_pool2d),
        ("global_avg_pool", global_avg_pool),
        ("adaptive_concat_pool", adaptive_concat_pool),
        ("cross_entropy", cross_entropy),
        ("composite", composite),
    ]
}
