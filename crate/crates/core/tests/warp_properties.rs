//! Warp, blend and resolution-transfer properties.

use geoflow::autodiff::gradcheck::random_tensor;
use geoflow::autodiff::Graph;
use geoflow::synthdata::{render_face, FaceSpec};
use geoflow::verify::{scaling_discrepancy, smooth_field};
use geoflow::warpblend::{
    apply_transfer, blend, compose_residual, warp_bilinear, AppearanceResidual, AttentionMask, FlowField, TransferMaps,
};
use geoflow::{Shape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn resize(t: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = g.input(t.clone());
    let r = g.bilinear_resize(v, h, w).unwrap();
    g.value(r).clone()
}

proptest! {
    #[test]
    fn zero_flow_warp_is_identity(seed in any::<u64>(), n in 1usize..3, c in 1usize..4, h in 1usize..9, w in 1usize..9) {
        let x = random_tensor(Shape::new(n, c, h, w), seed, 3.0);
        prop_assert_eq!(warp_bilinear(&x, &Tensor::zeros(Shape::new(n, 2, h, w))).unwrap(), x);
    }

    #[test]
    fn blend_stays_between_its_inputs(seed in any::<u64>(), h in 1usize..8, w in 1usize..8) {
        let s = Shape::new(2, 3, h, w);
        let a = random_tensor(s, seed, 1.0);
        let b = random_tensor(s, seed ^ 1, 1.0);
        let m = random_tensor(s.with_c(1), seed ^ 2, 0.5).map(|v| v + 0.5);
        let out = blend(&a, &b, &m).unwrap();
        for k in 0..out.len() {
            let (x, y, o) = (a.data()[k], b.data()[k], out.data()[k]);
            prop_assert!(x.min(y) - 1e-15 <= o && o <= x.max(y) + 1e-15);
        }
    }

    #[test]
    fn integer_shift_moves_pixels_exactly(seed in any::<u64>(), dx in -3i32..4, dy in -3i32..4) {
        let (h, w) = (7usize, 8usize);
        let x = random_tensor(Shape::new(1, 2, h, w), seed, 1.0);
        let flow = Tensor::from_fn(Shape::new(1, 2, h, w), |[_, c, _, _]| if c == 0 { dx as f64 } else { dy as f64 });
        let out = warp_bilinear(&x, &flow).unwrap();
        for c in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    let si = (i as i32 + dy).clamp(0, h as i32 - 1) as usize;
                    let sj = (j as i32 + dx).clamp(0, w as i32 - 1) as usize;
                    prop_assert_eq!(out.at(0, c, i, j), x.at(0, c, si, sj));
                }
            }
        }
    }
}

#[test]
fn downsampled_high_res_transfer_matches_low_res() {
    let errs = scaling_discrepancy(20, 32, 2, 3.0, 7).unwrap();
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!(mean <= 0.05, "mean L1 {mean}");
}

#[test]
fn unit_scale_application_equals_low_res_pipeline() {
    let (a, b) = (smooth_field(2, 3, 16, 16, 1, 0.8), smooth_field(2, 3, 16, 16, 2, 0.8));
    let maps = TransferMaps {
        flow: FlowField::new(smooth_field(2, 2, 16, 16, 3, 2.5)).unwrap(),
        mask: AttentionMask::new(smooth_field(2, 1, 16, 16, 4, 0.5).map(|v| v + 0.5)).unwrap(),
        residual: AppearanceResidual::new(smooth_field(2, 3, 16, 16, 5, 0.1), 0.7).unwrap(),
    };
    let warped = warp_bilinear(&b, maps.flow.tensor()).unwrap();
    let low = compose_residual(&blend(&a, &warped, maps.mask.tensor()).unwrap(), &maps.residual.data, 0.7).unwrap();
    assert_eq!(apply_transfer(&a, &b, &maps).unwrap(), low);
}

/// Faces rendered at 32 and 128 px; maps made at 32 px and applied at
/// 128 px must stay close to simply upsampling the 32 px result.
#[test]
fn four_times_upscaled_transfer_tracks_upsampled_result() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut total = 0.0;
    let pairs = 5;
    for p in 0..pairs {
        let (ta, sb) = (FaceSpec::sample(&mut rng, false, Default::default()), FaceSpec::sample(&mut rng, true, Default::default()));
        let img = |spec: &FaceSpec, n| render_face(spec, n).image.cast::<f64>();
        let maps = TransferMaps {
            flow: FlowField::new(smooth_field(1, 2, 32, 32, p, 2.0)).unwrap(),
            mask: AttentionMask::new(smooth_field(1, 1, 32, 32, p + 50, 0.5).map(|v| v + 0.5)).unwrap(),
            residual: AppearanceResidual::new(smooth_field(1, 3, 32, 32, p + 90, 0.1), 1.0).unwrap(),
        };
        let low = apply_transfer(&img(&ta, 32), &img(&sb, 32), &maps).unwrap();
        let high = apply_transfer(&img(&ta, 128), &img(&sb, 128), &maps).unwrap();
        let up = resize(&low, 128, 128);
        total += high.data().iter().zip(up.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / up.len() as f64;
    }
    let mean = total / pairs as f64;
    assert!(mean <= 0.05, "mean L1 {mean}");
}
