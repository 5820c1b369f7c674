mod common;

use common::gradcheck;
use common::reference as r;
use common::{rng, to64, uniform, GRAD_TOL};
use stagewise::tensor::{softmax_rows, Graph, Tensor};

macro_rules! gradient_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                let err = gradcheck::$name();
                assert!(err <= GRAD_TOL, "{}: relative error {err:.3e}", stringify!($name));
            }
        )*
    };
}

gradient_tests!(
    conv2d,
    batchnorm2d_train,
    batchnorm2d_eval,
    batchnorm1d_train,
    relu,
    linear,
    dropout,
    add,
    elementwise,
    flatten,
    max_pool2d,
    global_avg_pool,
    adaptive_concat_pool,
    cross_entropy,
    composite,
);

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = rng(100);
    let x = uniform(&mut rng, 2 * 3 * 8 * 8, -1.0, 1.0);
    let w = uniform(&mut rng, 4 * 3 * 3 * 3, -1.0, 1.0);
    let b = uniform(&mut rng, 4, -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.leaf(Tensor::new(&[2, 3, 8, 8], x.clone()).unwrap());
    let wv = g.leaf(Tensor::new(&[4, 3, 3, 3], w.clone()).unwrap());
    let bv = g.leaf(Tensor::new(&[4], b.clone()).unwrap());
    let y = g.conv2d(xv, wv, Some(bv), 1, 1).unwrap();
    let (expect, shape) = r::conv2d(&to64(&x), [2, 3, 8, 8], &to64(&w), [4, 3, 3, 3], Some(&to64(&b)), 1, 1);
    assert_eq!(g.shape(y), &shape);
    for (a, e) in g.value(y).data().iter().zip(&expect) {
        assert!((*a as f64 - e).abs() < 1e-5, "{a} vs {e}");
    }
}

#[test]
fn strided_conv_matches_direct_loops() {
    let mut rng = rng(101);
    let x = uniform(&mut rng, 3 * 9 * 11, -1.0, 1.0);
    let w = uniform(&mut rng, 2 * 3 * 7 * 7, -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.leaf(Tensor::new(&[1, 3, 9, 11], x.clone()).unwrap());
    let wv = g.leaf(Tensor::new(&[2, 3, 7, 7], w.clone()).unwrap());
    let y = g.conv2d(xv, wv, None, 2, 3).unwrap();
    let (expect, shape) = r::conv2d(&to64(&x), [1, 3, 9, 11], &to64(&w), [2, 3, 7, 7], None, 2, 3);
    assert_eq!(g.shape(y), &shape);
    for (a, e) in g.value(y).data().iter().zip(&expect) {
        assert!((*a as f64 - e).abs() < 1e-4);
    }
}

#[test]
fn concat_pool_matches_loops() {
    let mut rng = rng(102);
    let x = uniform(&mut rng, 3 * 5 * 7 * 9, -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.leaf(Tensor::new(&[3, 5, 7, 9], x.clone()).unwrap());
    let y = g.adaptive_concat_pool(xv).unwrap();
    assert_eq!(g.shape(y), &[3, 10]);
    let expect = r::concat_pool(&to64(&x), [3, 5, 7, 9]);
    for (a, e) in g.value(y).data().iter().zip(&expect) {
        assert!((*a as f64 - e).abs() < 1e-6);
    }
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let mut rng = rng(103);
    for _ in 0..20 {
        let logits = uniform(&mut rng, 8 * 4, -5.0, 5.0);
        let labels: Vec<usize> = (0..8).map(|i| (i * 3 + 1) % 4).collect();
        let mut g = Graph::new();
        let lv = g.leaf(Tensor::new(&[8, 4], logits.clone()).unwrap());
        let l = g.cross_entropy(lv, &labels).unwrap();
        let expect = r::cross_entropy(&to64(&logits), 4, &labels);
        assert!((g.value(l).item() as f64 - expect).abs() < 1e-5);
        for row in softmax_rows(&logits, 4).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = rng(104);
        let mut g = Graph::with_seed(5);
        let x = g.leaf(Tensor::new(&[2, 3, 8, 8], uniform(&mut rng, 384, -1.0, 1.0)).unwrap());
        let w = g.leaf(Tensor::new(&[4, 3, 3, 3], uniform(&mut rng, 108, -1.0, 1.0)).unwrap());
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.dropout(y, 0.3, true).unwrap();
        g.value(y).data().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
