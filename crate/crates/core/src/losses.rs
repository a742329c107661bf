//! Training objectives. Every function extends a [`Graph`] and returns a
//! 1×1×1×1 loss node.

use crate::autodiff::{op, sigmoid, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
pub use crate::landmarks::{LandmarkSet, Point};
use crate::tensor::{Real, Shape, Tensor};
use crate::warpblend::{sample, scatter, taps};

/// Least-squares discriminator loss: `mean((d_real − 1)²) + mean(d_fake²)`.
pub fn lsgan_d_loss<T: Real>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let r = g.add_scalar(d_real, -1.0);
    let r2 = g.square(r);
    let real = g.mean(r2);
    let f2 = g.square(d_fake);
    let fake = g.mean(f2);
    g.add(real, fake)
}

/// Least-squares generator loss: `mean((d_fake − 1)²)`.
pub fn lsgan_g_loss<T: Real>(g: &mut Graph<T>, d_fake: Var) -> Var {
    let r = g.add_scalar(d_fake, -1.0);
    let r2 = g.square(r);
    g.mean(r2)
}

/// Binary cross-entropy on logits against a constant label, averaged.
pub fn cls_loss<T: Real>(g: &mut Graph<T>, logits: Var, label: u8) -> Var {
    let y = T::of(f64::from(label.min(1)));
    let x = g.value(logits);
    let n = T::of(x.len() as f64);
    // max(z, 0) − z·y + ln(1 + e^{−|z|})
    let total: T = x
        .data()
        .iter()
        .map(|&z| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    let shape = x.shape();
    g.record(
        &[logits],
        Tensor::scalar(total / n),
        op("cls_loss", move |ctx: &BackwardCtx<'_, T>| {
            let scale = ctx.grad.item() / n;
            let data = ctx.inputs[0]
                .data()
                .iter()
                .map(|&z| (sigmoid(z) - y) * scale)
                .collect();
            vec![Some(Tensor::from_vec(shape, data).unwrap())]
        }),
    )
}

/// Mean absolute difference.
pub fn cycle_loss<T: Real>(g: &mut Graph<T>, reconstructed: Var, original: Var) -> Result<Var> {
    let d = g.sub(reconstructed, original)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Landmark alignment of a flow defined on the target grid:
/// `Σ_j (Φˣ(p_j) + x_j − x'_j)² + (Φʸ(p_j) + y_j − y'_j)²` where `p_j = (x_j, y_j)`
/// are target landmarks and `(x'_j, y'_j)` the source landmarks. The flow is
/// sampled bilinearly at fractional positions. Averaged over the batch.
pub fn landmark_loss<T: Real>(
    g: &mut Graph<T>,
    flow: Var,
    lm_target: &[LandmarkSet],
    lm_source: &[LandmarkSet],
) -> Result<Var> {
    const OP: &str = "landmark_loss";
    let fs = g.shape(flow);
    if fs.c() != 2 {
        return Err(Error::Dimension {
            op: OP,
            axis: "channel",
            expected: 2,
            got: fs.c(),
        });
    }
    for (axis_len, got) in [(fs.n(), lm_target.len()), (fs.n(), lm_source.len())] {
        if axis_len != got {
            return Err(Error::Dimension {
                op: OP,
                axis: "batch",
                expected: axis_len,
                got,
            });
        }
    }
    let (h, w, plane) = (fs.h(), fs.w(), fs.plane());
    // (batch, x taps, y taps, target displacement) per landmark
    let mut probes = Vec::new();
    for (b, (t, s)) in lm_target.iter().zip(lm_source).enumerate() {
        if t.len() != s.len() {
            return Err(Error::contract(
                OP,
                format!("landmark counts differ: {} vs {}", t.len(), s.len()),
            ));
        }
        t.check_bounds(h, w, OP)?;
        for (pt, ps) in t.points.iter().zip(&s.points) {
            probes.push((b, taps(pt.x, w), taps(pt.y, h), ps.x - pt.x, ps.y - pt.y));
        }
    }
    let inv_n = T::of(1.0 / fs.n() as f64);
    let fv = g.value(flow);
    let mut total = T::zero();
    let mut residuals = Vec::with_capacity(probes.len());
    for &(b, tx, ty, dx, dy) in &probes {
        let base = b * 2 * plane;
        let (fx, _, _) = sample(&fv.data()[base..base + plane], w, tx, ty);
        let (fy, _, _) = sample(&fv.data()[base + plane..base + 2 * plane], w, tx, ty);
        let (rx, ry) = (fx - T::of(dx), fy - T::of(dy));
        total += rx * rx + ry * ry;
        residuals.push((rx, ry));
    }
    Ok(g.record(
        &[flow],
        Tensor::scalar(total * inv_n),
        op(OP, move |ctx: &BackwardCtx<'_, T>| {
            let mut gf = Tensor::zeros(fs);
            let scale = ctx.grad.item() * inv_n * T::of(2.0);
            for (&(b, tx, ty, _, _), &(rx, ry)) in probes.iter().zip(&residuals) {
                let base = b * 2 * plane;
                let d = gf.data_mut();
                scatter(&mut d[base..base + plane], w, tx, ty, scale * rx);
                scatter(
                    &mut d[base + plane..base + 2 * plane],
                    w,
                    tx,
                    ty,
                    scale * ry,
                );
            }
            vec![Some(gf)]
        }),
    ))
}

/// Squared forward-difference smoothness of a flow. For each displacement
/// channel: mean of squared horizontal differences plus mean of squared
/// vertical differences; channels are summed.
pub fn tv_loss<T: Real>(g: &mut Graph<T>, flow: Var) -> Var {
    let fs = g.shape(flow);
    let (h, w) = (fs.h(), fs.w());
    let nh = fs.n() * (h * w.saturating_sub(1));
    let nv = fs.n() * (h.saturating_sub(1) * w);
    let ih = if nh > 0 { T::of(1.0 / nh as f64) } else { T::zero() };
    let iv = if nv > 0 { T::of(1.0 / nv as f64) } else { T::zero() };
    let v = g.value(flow).data();
    let (mut sh, mut sv) = (T::zero(), T::zero());
    for plane in v.chunks(h * w) {
        for i in 0..h {
            for j in 0..w {
                let x = plane[i * w + j];
                if j + 1 < w {
                    let d = plane[i * w + j + 1] - x;
                    sh += d * d;
                }
                if i + 1 < h {
                    let d = plane[(i + 1) * w + j] - x;
                    sv += d * d;
                }
            }
        }
    }
    let mean = |s: T, n: usize| if n > 0 { s / T::of(n as f64) } else { T::zero() };
    let total = mean(sh, nh) + mean(sv, nv);
    g.record(
        &[flow],
        Tensor::scalar(total),
        op("tv_loss", move |ctx: &BackwardCtx<'_, T>| {
            let mut gf = Tensor::zeros(fs);
            let s = ctx.grad.item() * T::of(2.0);
            let src = ctx.inputs[0].data();
            for (gp, plane) in gf.data_mut().chunks_mut(h * w).zip(src.chunks(h * w)) {
                for i in 0..h {
                    for j in 0..w {
                        let k = i * w + j;
                        if j + 1 < w {
                            let d = (plane[k + 1] - plane[k]) * ih * s;
                            gp[k + 1] += d;
                            gp[k] -= d;
                        }
                        if i + 1 < h {
                            let d = (plane[k + w] - plane[k]) * iv * s;
                            gp[k + w] += d;
                            gp[k] -= d;
                        }
                    }
                }
            }
            vec![Some(gf)]
        }),
    )
}

/// Non-negative weights of the seven objective terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub adv_g: f64,
    pub adv_f: f64,
    pub cls_r: f64,
    pub cls_f: f64,
    pub rec: f64,
    pub lm: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv_g: 1.0,
            adv_f: 1.0,
            cls_r: 1.0,
            cls_f: 1.0,
            rec: 10.0,
            lm: 0.1,
            tv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn ones() -> Self {
        LossWeights {
            adv_g: 1.0,
            adv_f: 1.0,
            cls_r: 1.0,
            cls_f: 1.0,
            rec: 1.0,
            lm: 1.0,
            tv: 1.0,
        }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [self.adv_g, self.adv_f, self.cls_r, self.cls_f, self.rec, self.lm, self.tv]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in LossTerms::NAMES.iter().zip(self.as_array()) {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight `{name}` = {w} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Values of the seven objective terms for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub adv_g: f64,
    pub adv_f: f64,
    pub cls_r: f64,
    pub cls_f: f64,
    pub rec: f64,
    pub lm: f64,
    pub tv: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 7] = ["adv_g", "adv_f", "cls_r", "cls_f", "rec", "lm", "tv"];

    pub fn as_array(&self) -> [f64; 7] {
        [self.adv_g, self.adv_f, self.cls_r, self.cls_f, self.rec, self.lm, self.tv]
    }

    pub fn splat(v: f64) -> Self {
        LossTerms {
            adv_g: v,
            adv_f: v,
            cls_r: v,
            cls_f: v,
            rec: v,
            lm: v,
            tv: v,
        }
    }
}

/// Weighted sum of all terms; with unit weights this is the plain sum of
/// the adversarial, classification, reconstruction and flow objectives.
pub fn full_objective(terms: &LossTerms, weights: &LossWeights) -> f64 {
    terms
        .as_array()
        .iter()
        .zip(weights.as_array())
        .map(|(t, w)| t * w)
        .sum()
}

/// Graph form of a weighted sum of scalar nodes; zero-weight terms are
/// skipped.
pub fn weighted_sum<T: Real>(g: &mut Graph<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        if w == 0.0 {
            continue;
        }
        let s = g.scale(v, w);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => Ok(g.input(Tensor::zeros(Shape::scalar()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn val(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    fn full(g: &mut Graph<f64>, shape: Shape, v: f64) -> Var {
        g.input(Tensor::full(shape, v))
    }

    const PATCH: Shape = Shape::new(2, 1, 4, 4);

    #[test]
    fn lsgan_d_cases() {
        let mut g = Graph::new();
        for (r, f, expected) in [(1.0, 0.0, 0.0), (0.0, 1.0, 2.0), (0.5, 0.5, 0.5)] {
            let (dr, df) = (full(&mut g, PATCH, r), full(&mut g, PATCH, f));
            let l = lsgan_d_loss(&mut g, dr, df).unwrap();
            assert_eq!(val(&g, l), expected);
        }
    }

    #[test]
    fn lsgan_g_cases() {
        let mut g = Graph::new();
        for (f, expected) in [(1.0, 0.0), (0.0, 1.0), (-1.0, 4.0)] {
            let df = full(&mut g, PATCH, f);
            let l = lsgan_g_loss(&mut g, df);
            assert_eq!(val(&g, l), expected);
        }
    }

    #[test]
    fn cls_cases() {
        let mut g = Graph::new();
        let s = Shape::new(1, 1, 1, 1);
        let z = full(&mut g, s, 20.0);
        let l = cls_loss(&mut g, z, 1);
        assert!(val(&g, l) <= 1e-8);
        let z = full(&mut g, s, 0.0);
        for label in [0, 1] {
            let l = cls_loss(&mut g, z, label);
            assert!((val(&g, l) - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let z = full(&mut g, s, -3.0);
        let l = cls_loss(&mut g, z, 1);
        assert!((val(&g, l) - (1.0 + 3f64.exp()).ln()).abs() < 1e-12);
        assert!((val(&g, l) - 3.0486).abs() < 1e-4);
    }

    #[test]
    fn cycle_cases() {
        let mut g = Graph::new();
        let s = Shape::new(1, 1, 1, 2);
        let x = g.input(Tensor::from_vec(s, vec![0.0, 0.5]).unwrap());
        let l = cycle_loss(&mut g, x, x).unwrap();
        assert_eq!(val(&g, l), 0.0);
        let (a, b) = (full(&mut g, s, 0.0), full(&mut g, s, 1.0));
        let l = cycle_loss(&mut g, a, b).unwrap();
        assert_eq!(val(&g, l), 1.0);
        let y = g.input(Tensor::from_vec(s, vec![0.5, 0.0]).unwrap());
        let l = cycle_loss(&mut g, x, y).unwrap();
        assert_eq!(val(&g, l), 0.5);
        let z = full(&mut g, Shape::new(1, 1, 1, 3), 0.0);
        assert!(cycle_loss(&mut g, x, z).is_err());
    }

    fn lm(points: &[(f64, f64)]) -> LandmarkSet {
        LandmarkSet::new(points.iter().map(|&(x, y)| Point::new(x, y)).collect())
    }

    fn const_flow(g: &mut Graph<f64>, fx: f64, fy: f64) -> Var {
        g.input(Tensor::from_fn(Shape::new(1, 2, 12, 12), |[_, c, _, _]| {
            if c == 0 {
                fx
            } else {
                fy
            }
        }))
    }

    #[test]
    fn landmark_cases() {
        let mut g = Graph::new();
        let zero = const_flow(&mut g, 0.0, 0.0);
        let same = lm(&[(2.0, 3.0), (7.5, 1.25)]);
        let l = landmark_loss(&mut g, zero, std::slice::from_ref(&same), std::slice::from_ref(&same)).unwrap();
        assert_eq!(val(&g, l), 0.0);

        let target = lm(&[(5.0, 5.0)]);
        let source = lm(&[(8.0, 5.0)]);
        let three = const_flow(&mut g, 3.0, 0.0);
        let l = landmark_loss(&mut g, three, std::slice::from_ref(&target), std::slice::from_ref(&source)).unwrap();
        assert_eq!(val(&g, l), 0.0);
        let l = landmark_loss(&mut g, zero, &[target], &[source]).unwrap();
        assert_eq!(val(&g, l), 9.0);
    }

    #[test]
    fn landmark_out_of_bounds_is_contract_error() {
        let mut g = Graph::new();
        let f = const_flow(&mut g, 0.0, 0.0);
        let bad = lm(&[(12.0, 0.0)]);
        let err = landmark_loss(&mut g, f, std::slice::from_ref(&bad), std::slice::from_ref(&bad)).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }));
    }

    #[test]
    fn tv_cases() {
        let mut g = Graph::new();
        let c = const_flow(&mut g, 1.5, -2.0);
        let l = tv_loss(&mut g, c);
        assert_eq!(val(&g, l), 0.0);

        let ramp = g.input(Tensor::from_fn(Shape::new(1, 2, 6, 6), |[_, c, _, j]| {
            if c == 0 {
                j as f64
            } else {
                0.0
            }
        }));
        let l = tv_loss(&mut g, ramp);
        assert_eq!(val(&g, l), 1.0);

        let checker = g.input(Tensor::from_fn(Shape::new(1, 2, 6, 6), |[_, c, i, j]| {
            if c == 0 {
                if (i + j) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            } else {
                0.0
            }
        }));
        let l = tv_loss(&mut g, checker);
        // 4 per horizontal term plus 4 per vertical term
        assert_eq!(val(&g, l), 8.0);
    }

    #[test]
    fn objective_cases() {
        let w1 = LossWeights::ones();
        assert_eq!(full_objective(&LossTerms::default(), &w1), 0.0);
        assert_eq!(full_objective(&LossTerms::splat(1.0), &w1), 7.0);
        let w = LossWeights {
            adv_g: 0.0,
            adv_f: 0.0,
            cls_r: 0.0,
            cls_f: 0.0,
            rec: 2.0,
            lm: 0.0,
            tv: 0.0,
        };
        let terms = LossTerms {
            rec: 0.3,
            ..LossTerms::default()
        };
        assert!((full_objective(&terms, &w) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            tv: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
