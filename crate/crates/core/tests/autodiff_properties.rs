//! Adjoint identities, finiteness and reproducibility of the graph engine.

use geoflow::autodiff::gradcheck::{directional_check, random_tensor};
use geoflow::autodiff::{Graph, Var};
use geoflow::{Result, Shape, Tensor};
use proptest::prelude::*;

type UnaryOp = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

/// Every op is exercised as a function of one input, the others fixed.
fn unary_ops(seed: u64) -> Vec<(&'static str, Shape, UnaryOp)> {
    let img = Shape::new(2, 3, 6, 7);
    let k = random_tensor(Shape::new(4, 3, 3, 3), seed + 1, 0.5);
    let kt = random_tensor(Shape::new(3, 2, 4, 4), seed + 2, 0.5);
    let bias4 = random_tensor(Shape::new(1, 4, 1, 1), seed + 3, 0.5);
    let bias2 = random_tensor(Shape::new(1, 2, 1, 1), seed + 4, 0.5);
    let other = random_tensor(img, seed + 5, 1.0);
    let flow = random_tensor(Shape::new(2, 2, 6, 7), seed + 6, 2.5);
    let src = random_tensor(img, seed + 7, 1.0);
    let mask = random_tensor(Shape::new(2, 1, 6, 7), seed + 8, 0.5).map(|m| m + 0.5);
    let (k1, b1, kt1, b2) = (k.clone(), bias4.clone(), kt.clone(), bias2.clone());
    let (o1, o2, f1, s1, m1, m2) = (other.clone(), other.clone(), flow.clone(), src.clone(), mask.clone(), other);
    vec![
        ("conv2d", img, Box::new(move |g, x| {
            let (k, b) = (g.input(k1.clone()), g.input(b1.clone()));
            g.conv2d(x, k, b, 1, 1)
        })),
        ("conv2d_kernel", Shape::new(4, 3, 3, 3), Box::new(move |g, k| {
            let x = g.input(o1.clone());
            let b = g.input(bias4.clone());
            g.conv2d(x, k, b, 2, 1)
        })),
        ("conv_transpose2d", Shape::new(2, 3, 3, 4), Box::new(move |g, x| {
            let (k, b) = (g.input(kt1.clone()), g.input(b2.clone()));
            g.conv_transpose2d(x, k, b, 2, 1)
        })),
        ("mul", img, Box::new(move |g, x| {
            let o = g.input(o2.clone());
            g.mul(x, o)
        })),
        ("leaky_relu", img, Box::new(|g, x| Ok(g.leaky_relu(x, 0.2)))),
        ("tanh", img, Box::new(|g, x| Ok(g.tanh(x)))),
        ("sigmoid", img, Box::new(|g, x| Ok(g.sigmoid(x)))),
        ("square", img, Box::new(|g, x| Ok(g.square(x)))),
        ("mean_spatial", img, Box::new(|g, x| Ok(g.mean_spatial(x)))),
        ("resize_up", img, Box::new(|g, x| g.bilinear_resize(x, 11, 9))),
        ("resize_down", img, Box::new(|g, x| g.bilinear_resize(x, 4, 3))),
        ("concat_slice", img, Box::new(|g, x| {
            let c = g.concat_channels(&[x, x])?;
            g.slice_channels(c, 2, 3)
        })),
        ("warp_source", img, Box::new(move |g, x| {
            let f = g.input(f1.clone());
            g.warp(x, f)
        })),
        ("warp_flow", Shape::new(2, 2, 6, 7), Box::new(move |g, f| {
            let s = g.input(s1.clone());
            g.warp(s, f)
        })),
        ("blend_mask", Shape::new(2, 1, 6, 7), Box::new(move |g, m| {
            let (a, w) = (g.input(src.clone()), g.input(m2.clone()));
            let m = g.sigmoid(m);
            g.blend(a, w, m)
        })),
        ("blend_target", img, Box::new(move |g, a| {
            let (w, m) = (g.input(flow.clone().map(|v| v * 0.1)), g.input(m1.clone()));
            let w = g.slice_channels(w, 0, 1)?;
            let w = g.concat_channels(&[w, w, w])?;
            g.blend(a, w, m)
        })),
        ("compose_residual", img, Box::new(move |g, r| {
            let b = g.input(mask.clone());
            let b = g.concat_channels(&[b, b, b])?;
            g.compose_residual(b, r, 0.7)
        })),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn backward_is_adjoint_of_forward(seed in 0u64..1_000_000) {
        for (name, shape, f) in unary_ops(seed) {
            let x = random_tensor(shape, seed + 100, 1.0);
            let d = random_tensor(shape, seed + 200, 1.0);
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = f(&mut g, xv).unwrap();
            let out_shape = g.shape(y);
            let u = random_tensor(out_shape, seed + 300, 1.0);
            let (numeric, analytic) = directional_check(&x, &d, &u, 1e-6, &f).unwrap();
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
            prop_assert!(rel <= 1e-4, "{name}: numeric {numeric} analytic {analytic} rel {rel}");
        }
    }

    #[test]
    fn finite_inputs_give_finite_values_and_grads(seed in 0u64..1_000_000, scale in 0.1f64..50.0) {
        for (name, shape, f) in unary_ops(seed) {
            let mut g = Graph::new();
            let x = g.param(random_tensor(shape, seed, scale));
            let y = f(&mut g, x).unwrap();
            prop_assert!(g.value(y).is_finite(), "{name} forward");
            let s = g.sum(y);
            g.backward(s).unwrap();
            prop_assert!(g.grad(x).is_none_or(Tensor::is_finite), "{name} backward");
        }
    }
}

/// Gradient of `Σ conv2d(z, K) ⊙ x` with respect to `z`.
fn conv_input_grad(x: &Tensor<f64>, k: &Tensor<f64>, z_shape: Shape, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let z = g.param(Tensor::zeros(z_shape));
    let kv = g.input(k.clone());
    let b = g.input(Tensor::zeros(Shape::new(1, k.shape().n(), 1, 1)));
    let y = g.conv2d(z, kv, b, stride, pad).unwrap();
    let xv = g.input(x.clone());
    let p = g.mul(y, xv).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    g.grad(z).unwrap().clone()
}

#[test]
fn conv_transpose_equals_conv_input_gradient_exactly() {
    for (stride, pad, k, zh) in [(1, 1, 3, 4), (2, 1, 4, 8), (1, 0, 2, 5)] {
        let x = random_tensor(Shape::new(1, 2, 4, 4), 11, 1.0);
        let kernel = random_tensor(Shape::new(2, 3, k, k), 12, 1.0);
        let expect = conv_input_grad(&x, &kernel, Shape::new(1, 3, zh, zh), stride, pad);
        let mut g = Graph::new();
        let xv = g.input(x);
        let kv = g.input(kernel);
        let b = g.input(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        let y = g.conv_transpose2d(xv, kv, b, stride, pad).unwrap();
        assert_eq!(g.value(y), &expect, "stride {stride} pad {pad}");
    }
}

#[test]
fn repeated_graph_runs_are_bitwise_identical() {
    let run = || {
        let mut out = Vec::new();
        for (_, shape, f) in unary_ops(5) {
            let mut g = Graph::new();
            let x = g.param(random_tensor(shape, 9, 1.0));
            let y = f(&mut g, x).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            out.push((g.value(y).clone(), g.grad(x).cloned()));
        }
        out
    };
    assert_eq!(run(), run());
}
