//! Numerical verification shared by the CLI and the test suites.
//!
//! The float64 finite-difference suite checks every differentiable operator
//! on its own, then the composed transfer, removal and discriminator graphs
//! and the full generator objective at 16×16. The flow-scaling check
//! compares a transfer applied at low resolution with the same maps
//! upscaled, applied at high resolution and downsampled again.

use crate::autodiff::gradcheck::{grad_check, random_projection, random_tensor, GradCheckOptions, GradCheckReport};
use crate::autodiff::{Graph, ParamSet, Var};
use crate::error::Result;
use crate::landmarks::{LandmarkSet, Point};
use crate::losses::{cls_loss, cycle_loss, landmark_loss, lsgan_d_loss, lsgan_g_loss, tv_loss};
use crate::networks::{build_networks, NetConfig, Networks};
use crate::tensor::{Shape, Tensor};
use crate::warpblend::{apply_transfer, blend, compose_residual, warp_bilinear, AppearanceResidual, AttentionMask, FlowField, TransferMaps};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst tolerated relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn named(inputs: &[(&str, Tensor<f64>)]) -> Vec<(String, Tensor<f64>)> {
    inputs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

/// Uniform values in `[lo, hi]`.
fn uniform(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    random_tensor(shape, seed, 1.0).map(|v| lo + (v + 1.0) / 2.0 * (hi - lo))
}

fn landmarks(n: usize, k: usize, size: usize, seed: u64) -> Vec<LandmarkSet> {
    let t = uniform(Shape::new(n, k, 1, 2), seed, 1.3, size as f64 - 2.3);
    (0..n)
        .map(|b| LandmarkSet::new((0..k).map(|j| Point::new(t.at(b, j, 0, 0), t.at(b, j, 0, 1))).collect()))
        .collect()
}

/// Replaces every all-zero parameter (zero-initialized heads and biases)
/// by small random values so that no gradient path is blocked.
pub fn activate_params(params: &mut ParamSet<f64>, seed: u64, scale: f64) {
    for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let v = params.value_mut(id);
        if v.data().iter().all(|&x| x == 0.0) {
            *v = random_tensor(v.shape(), seed.wrapping_add(k as u64), scale);
        }
    }
}

pub fn test_networks(seed: u64) -> Result<Networks<f64>> {
    let cfg = NetConfig {
        width: 2,
        image_size: 16,
        seed,
        ..NetConfig::default()
    };
    let mut nets = build_networks::<f64>(&cfg)?;
    activate_params(&mut nets.transfer.params, seed ^ 1, 0.1);
    activate_params(&mut nets.removal.params, seed ^ 2, 0.1);
    activate_params(&mut nets.disc.params, seed ^ 3, 0.1);
    Ok(nets)
}

fn op_cases(seed: u64) -> Vec<(&'static str, Vec<(String, Tensor<f64>)>, OpFn)> {
    let s = |c| Shape::new(2, c, 5, 6);
    let x = |k: u64, c| random_tensor(s(c), seed + k, 1.0);
    let proj = move |g: &mut Graph<f64>, v: Var| random_projection(g, v, seed + 99);
    let img = |k: u64| random_tensor(Shape::new(2, 3, 8, 8), seed + k, 1.0);
    let mut cases: Vec<(&'static str, Vec<(String, Tensor<f64>)>, OpFn)> = vec![
        ("add", named(&[("a", x(1, 3)), ("b", x(2, 3))]), Box::new(move |g, v| {
            let y = g.add(v[0], v[1])?;
            proj(g, y)
        })),
        ("sub", named(&[("a", x(1, 3)), ("b", x(2, 3))]), Box::new(move |g, v| {
            let y = g.sub(v[0], v[1])?;
            proj(g, y)
        })),
        ("mul", named(&[("a", x(1, 3)), ("b", x(2, 3))]), Box::new(move |g, v| {
            let y = g.mul(v[0], v[1])?;
            proj(g, y)
        })),
        ("mul_broadcast", named(&[("a", x(1, 3)), ("m", x(2, 1))]), Box::new(move |g, v| {
            let y = g.mul(v[0], v[1])?;
            proj(g, y)
        })),
        ("scale_shift_square", named(&[("a", x(3, 2))]), Box::new(move |g, v| {
            let y = g.scale(v[0], -1.7);
            let y = g.add_scalar(y, 0.3);
            let y = g.square(y);
            proj(g, y)
        })),
        ("abs", named(&[("a", x(4, 2))]), Box::new(move |g, v| {
            let y = g.abs(v[0]);
            proj(g, y)
        })),
        ("leaky_relu", named(&[("a", x(5, 2))]), Box::new(move |g, v| {
            let y = g.leaky_relu(v[0], 0.2);
            proj(g, y)
        })),
        ("tanh", named(&[("a", x(6, 2).map(|v| 2.0 * v))]), Box::new(move |g, v| {
            let y = g.tanh(v[0]);
            proj(g, y)
        })),
        ("sigmoid", named(&[("a", x(7, 2).map(|v| 3.0 * v))]), Box::new(move |g, v| {
            let y = g.sigmoid(v[0]);
            proj(g, y)
        })),
        ("clamp", named(&[("a", x(8, 2))]), Box::new(move |g, v| {
            let y = g.clamp(v[0], -0.5, 0.6);
            proj(g, y)
        })),
        ("sum_mean", named(&[("a", x(9, 2))]), Box::new(|g, v| {
            let sq = g.square(v[0]);
            let a = g.sum(sq);
            let b = g.mean(v[0]);
            let b = g.scale(b, 3.0);
            g.add(a, b)
        })),
        ("mean_spatial", named(&[("a", x(10, 3))]), Box::new(move |g, v| {
            let y = g.mean_spatial(v[0]);
            proj(g, y)
        })),
        ("concat_slice_channels", named(&[("a", x(11, 2)), ("b", x(12, 3))]), Box::new(move |g, v| {
            let c = g.concat_channels(&[v[0], v[1]])?;
            let y = g.slice_channels(c, 1, 3)?;
            proj(g, y)
        })),
        ("concat_slice_batch", named(&[("a", x(13, 2)), ("b", x(14, 2))]), Box::new(move |g, v| {
            let c = g.concat_batch(&[v[0], v[1]])?;
            let y = g.slice_batch(c, 1, 2)?;
            proj(g, y)
        })),
        ("resize_up", named(&[("a", x(15, 2))]), Box::new(move |g, v| {
            let y = g.bilinear_resize(v[0], 9, 11)?;
            proj(g, y)
        })),
        ("resize_down", named(&[("a", x(16, 2))]), Box::new(move |g, v| {
            let y = g.bilinear_resize(v[0], 3, 4)?;
            proj(g, y)
        })),
        ("conv2d", named(&[
            ("x", random_tensor(Shape::new(2, 3, 8, 8), seed + 17, 1.0)),
            ("w", random_tensor(Shape::new(4, 3, 3, 3), seed + 18, 0.5)),
            ("b", random_tensor(Shape::new(1, 4, 1, 1), seed + 19, 0.5)),
        ]), Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            proj(g, y)
        })),
        ("conv2d_stride2", named(&[
            ("x", random_tensor(Shape::new(2, 3, 8, 8), seed + 20, 1.0)),
            ("w", random_tensor(Shape::new(4, 3, 4, 4), seed + 21, 0.5)),
            ("b", random_tensor(Shape::new(1, 4, 1, 1), seed + 22, 0.5)),
        ]), Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
            proj(g, y)
        })),
        ("conv_transpose2d", named(&[
            ("x", random_tensor(Shape::new(2, 3, 4, 4), seed + 23, 1.0)),
            ("w", random_tensor(Shape::new(3, 2, 4, 4), seed + 24, 0.5)),
            ("b", random_tensor(Shape::new(1, 2, 1, 1), seed + 25, 0.5)),
        ]), Box::new(move |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], v[2], 2, 1)?;
            proj(g, y)
        })),
        ("conv_activation_sum", named(&[
            ("x", random_tensor(Shape::new(1, 2, 6, 6), seed + 26, 1.0)),
            ("w", random_tensor(Shape::new(3, 2, 3, 3), seed + 27, 0.5)),
            ("b", random_tensor(Shape::new(1, 3, 1, 1), seed + 28, 0.5)),
        ]), Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 0)?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        })),
        ("warp", named(&[
            ("source", img(29)),
            // non-integer displacements that stay clear of the border
            ("flow", uniform(Shape::new(2, 2, 8, 8), seed + 30, -1.7, 1.7).map(|v| v + 0.137)),
        ]), Box::new(move |g, v| {
            let y = g.warp(v[0], v[1])?;
            proj(g, y)
        })),
        ("blend", named(&[
            ("target", img(31)),
            ("warped", img(32)),
            ("mask", uniform(Shape::new(2, 1, 8, 8), seed + 33, 0.05, 0.95)),
        ]), Box::new(move |g, v| {
            let y = g.blend(v[0], v[1], v[2])?;
            proj(g, y)
        })),
        ("compose_residual", named(&[("blended", img(34)), ("residual", img(35))]), Box::new(move |g, v| {
            let y = g.compose_residual(v[0], v[1], 0.7)?;
            proj(g, y)
        })),
        ("lsgan", named(&[("real", x(36, 1)), ("fake", x(37, 1))]), Box::new(|g, v| {
            let d = lsgan_d_loss(g, v[0], v[1])?;
            let l = lsgan_g_loss(g, v[1]);
            g.add(d, l)
        })),
        ("cls", named(&[("logits", random_tensor(Shape::new(4, 1, 1, 1), seed + 38, 3.0))]), Box::new(|g, v| {
            let a = cls_loss(g, v[0], 1);
            let sq = g.square(v[0]);
            let b = cls_loss(g, sq, 0);
            g.add(a, b)
        })),
        ("cycle", named(&[("x", img(39)), ("y", img(40))]), Box::new(|g, v| cycle_loss(g, v[0], v[1]))),
        ("tv", named(&[("flow", random_tensor(Shape::new(2, 2, 6, 7), seed + 41, 2.0))]), Box::new(|g, v| Ok(tv_loss(g, v[0])))),
    ];
    let (lt, ls) = (landmarks(2, 5, 10, seed + 42), landmarks(2, 5, 10, seed + 43));
    cases.push((
        "landmark",
        named(&[("flow", random_tensor(Shape::new(2, 2, 10, 10), seed + 44, 3.0))]),
        Box::new(move |g, v| landmark_loss(g, v[0], &lt, &ls)),
    ));
    cases
}

fn with_params(inputs: &[(&str, Tensor<f64>)], params: &ParamSet<f64>) -> Vec<(String, Tensor<f64>)> {
    let mut all = named(inputs);
    all.extend(params.names().iter().cloned().zip(params.values().iter().cloned()));
    all
}

/// Rebinds `params` from checked variables `v[offset..]`.
fn rebind(params: &ParamSet<f64>, v: &[Var], offset: usize) -> crate::autodiff::Bound {
    crate::autodiff::Bound::from_vars(v[offset..offset + params.len()].to_vec())
}

/// Runs every check. Each report covers one operator or composed graph.
pub fn gradient_suite(opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let seed = opts.seed;
    let mut reports = Vec::new();
    for (label, inputs, f) in op_cases(seed) {
        reports.push(grad_check(label, &inputs, f, opts)?);
    }

    let nets = test_networks(seed)?;
    let shape = Shape::new(2, 3, 16, 16);
    let a = random_tensor(shape, seed + 100, 0.9);
    let b = random_tensor(shape, seed + 101, 0.9);

    let tp = nets.transfer.params.clone();
    let t = nets.transfer.clone();
    let inputs = with_params(&[("a", a.clone()), ("b_y", b.clone())], &tp);
    reports.push(grad_check(
        "transfer",
        &inputs,
        move |g, v| {
            let p = rebind(&t.params, v, 2);
            let out = t.forward(g, &p, v[0], v[1])?;
            let y = random_projection(g, out.output, seed + 102)?;
            let f = random_projection(g, out.flow, seed + 103)?;
            g.add(y, f)
        },
        opts,
    )?);

    let r = nets.removal.clone();
    let inputs = with_params(&[("b_y", b.clone())], &r.params);
    reports.push(grad_check(
        "removal",
        &inputs,
        move |g, v| {
            let p = rebind(&r.params, v, 1);
            let out = r.forward(g, &p, v[0])?;
            random_projection(g, out, seed + 104)
        },
        opts,
    )?);

    let d = nets.disc.clone();
    let inputs = with_params(&[("x", a.clone())], &d.params);
    reports.push(grad_check(
        "discriminator",
        &inputs,
        move |g, v| {
            let p = rebind(&d.params, v, 1);
            let (scores, logits) = d.forward(g, &p, v[0])?;
            let s = random_projection(g, scores, seed + 105)?;
            let l = random_projection(g, logits, seed + 106)?;
            g.add(s, l)
        },
        opts,
    )?);

    // generator-side objective through all three networks
    let (lm_a, lm_b) = (landmarks(2, 12, 16, seed + 107), landmarks(2, 12, 16, seed + 108));
    let n = nets.clone();
    let (np_t, np_f) = (n.transfer.params.len(), n.removal.params.len());
    let mut inputs = with_params(&[("a", a), ("b_y", b)], &n.transfer.params);
    inputs.extend(n.removal.params.names().iter().cloned().zip(n.removal.params.values().iter().cloned()));
    reports.push(grad_check(
        "full_objective",
        &inputs,
        move |g, v| {
            let gp = rebind(&n.transfer.params, v, 2);
            let fp = rebind(&n.removal.params, v, 2 + np_t);
            debug_assert_eq!(v.len(), 2 + np_t + np_f);
            let dp = n.disc.params.bind(g, false);
            let fwd = n.transfer.forward(g, &gp, v[0], v[1])?;
            let bb = n.removal.forward(g, &fp, v[1])?;
            let a_rec = n.removal.forward(g, &fp, fwd.output)?;
            let back = n.transfer.forward(g, &gp, bb, fwd.output)?;
            let (s1, l1) = n.disc.forward(g, &dp, fwd.output)?;
            let (s2, l2) = n.disc.forward(g, &dp, bb)?;
            let mut terms = vec![
                lsgan_g_loss(g, s1),
                lsgan_g_loss(g, s2),
                cls_loss(g, l1, 1),
                cls_loss(g, l2, 0),
                cycle_loss(g, a_rec, v[0])?,
                cycle_loss(g, back.output, v[1])?,
            ];
            let lm = landmark_loss(g, fwd.flow, &lm_a, &lm_b)?;
            terms.push(g.scale(lm, 1e-3));
            terms.push(tv_loss(g, fwd.flow));
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = g.add(total, t)?;
            }
            Ok(total)
        },
        opts,
    )?);
    Ok(reports)
}

/// A smooth field on the unit square: a few random low-frequency cosines,
/// sampled at `h`×`w` with corners at (0, 0) and (1, 1).
pub fn smooth_field(n: usize, c: usize, h: usize, w: usize, seed: u64, amplitude: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..n * c * 3)
        .map(|_| {
            [
                rng.gen_range(0.3..2.0),
                rng.gen_range(0.3..2.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.2..1.0),
            ]
        })
        .collect();
    Tensor::from_fn(Shape::new(n, c, h, w), |[b, ch, i, j]| {
        let (u, v) = (j as f64 / (w - 1) as f64, i as f64 / (h - 1) as f64);
        let k = (b * c + ch) * 3;
        let (sum, norm) = waves[k..k + 3].iter().fold((0.0, 0.0), |(s, z), wv| {
            (s + wv[3] * (std::f64::consts::PI * (wv[0] * u + wv[1] * v) + wv[2]).cos(), z + wv[3])
        });
        amplitude * sum / norm
    })
}

/// Per-pair mean absolute difference between a low-resolution transfer and
/// the same transfer applied at `scale`× resolution then downsampled.
/// Images, flow (up to ±`max_flow` px), mask and residual are smooth
/// random fields.
pub fn scaling_discrepancy(pairs: usize, size: usize, scale: usize, max_flow: f64, seed: u64) -> Result<Vec<f64>> {
    let big = size * scale;
    let mut out = Vec::with_capacity(pairs);
    for p in 0..pairs as u64 {
        let s = seed.wrapping_add(p * 16);
        let target = |n| smooth_field(1, 3, n, n, s, 0.9);
        let source = |n| smooth_field(1, 3, n, n, s + 1, 0.9);
        let maps = TransferMaps {
            flow: FlowField::new(smooth_field(1, 2, size, size, s + 2, max_flow))?,
            mask: AttentionMask::new(smooth_field(1, 1, size, size, s + 3, 2.0).map(|z| 1.0 / (1.0 + (-z).exp())))?,
            residual: AppearanceResidual::new(smooth_field(1, 3, size, size, s + 4, 0.2), 1.0)?,
        };
        let warped = warp_bilinear(&source(size), maps.flow.tensor())?;
        let low = compose_residual(&blend(&target(size), &warped, maps.mask.tensor())?, &maps.residual.data, 1.0)?;
        let high = apply_transfer(&target(big), &source(big), &maps)?;
        let mut g = Graph::new();
        let hv = g.input(high);
        let down = g.bilinear_resize(hv, size, size)?;
        let diff: f64 = g.value(down).data().iter().zip(low.data()).map(|(a, b)| (a - b).abs()).sum();
        out.push(diff / low.len() as f64);
    }
    Ok(out)
}
