//! Backward bilinear warping by a dense flow, attention-mask blending,
//! appearance-residual composition, and transfer of low-resolution maps to
//! a higher resolution.
//!
//! Flow is stored in pixel units. Channel 0 displaces the column (x),
//! channel 1 the row (y): output pixel `(row i, col j)` samples the source at
//! column `j + Φˣ(i, j)` and row `i + Φʸ(i, j)`. Sampling positions outside the
//! image are clamped to the border.

use crate::autodiff::{op, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Bilinear taps around a clamped sampling position on one axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`.
    pub frac: f64,
    /// False when the position was clamped; the derivative w.r.t. the
    /// position is zero there.
    pub inside: bool,
}

/// Taps at `pos` on an axis of length `len`. At exact integer positions the
/// upper neighbour is `lo + 1`, so the position derivative is the one-sided
/// (right) difference.
#[inline]
pub(crate) fn taps(pos: f64, len: usize) -> Taps {
    let max = (len - 1) as f64;
    let inside = (0.0..=max).contains(&pos);
    let p = pos.clamp(0.0, max);
    let lo = (p.floor() as usize).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    Taps {
        lo,
        hi,
        frac: p - lo as f64,
        inside: inside && lo != hi,
    }
}

/// Bilinear sample of one plane; returns the value and the partial
/// derivatives with respect to the column and row positions.
#[inline]
pub(crate) fn sample<T: Real>(plane: &[T], w: usize, tx: Taps, ty: Taps) -> (T, T, T) {
    let v00 = plane[ty.lo * w + tx.lo];
    let v01 = plane[ty.lo * w + tx.hi];
    let v10 = plane[ty.hi * w + tx.lo];
    let v11 = plane[ty.hi * w + tx.hi];
    let (fx, fy) = (T::of(tx.frac), T::of(ty.frac));
    let one = T::one();
    let top = v00 * (one - fx) + v01 * fx;
    let bot = v10 * (one - fx) + v11 * fx;
    let value = top * (one - fy) + bot * fy;
    let dx = if tx.inside {
        (v01 - v00) * (one - fy) + (v11 - v10) * fy
    } else {
        T::zero()
    };
    let dy = if ty.inside { bot - top } else { T::zero() };
    (value, dx, dy)
}

#[inline]
pub(crate) fn scatter<T: Real>(plane: &mut [T], w: usize, tx: Taps, ty: Taps, g: T) {
    let (fx, fy) = (T::of(tx.frac), T::of(ty.frac));
    let one = T::one();
    plane[ty.lo * w + tx.lo] += g * (one - fx) * (one - fy);
    plane[ty.lo * w + tx.hi] += g * fx * (one - fy);
    plane[ty.hi * w + tx.lo] += g * (one - fx) * fy;
    plane[ty.hi * w + tx.hi] += g * fx * fy;
}

fn check_flow_shape(source: Shape, flow: Shape, op: &'static str) -> Result<()> {
    Shape::new(source.n(), 2, source.h(), source.w()).expect_eq(&flow, op)
}

fn warp_forward<T: Real>(src: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let s = src.shape();
    let (h, w, plane) = (s.h(), s.w(), s.plane());
    let mut out = Tensor::zeros(s);
    for b in 0..s.n() {
        let fl = &flow.data()[b * 2 * plane..(b + 1) * 2 * plane];
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                let tx = taps(j as f64 + fl[k].as_f64(), w);
                let ty = taps(i as f64 + fl[plane + k].as_f64(), h);
                for c in 0..s.c() {
                    let base = (b * s.c() + c) * plane;
                    let (v, _, _) = sample(&src.data()[base..base + plane], w, tx, ty);
                    out.data_mut()[base + k] = v;
                }
            }
        }
    }
    out
}

/// Warps `source` (B×C×H×W) by `flow` (B×2×H×W).
pub fn warp_bilinear<T: Real>(source: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    check_flow_shape(source.shape(), flow.shape(), "warp_bilinear")?;
    Ok(warp_forward(source, flow))
}

fn check_mask<T: Real>(mask: &Tensor<T>) -> Result<()> {
    match mask
        .data()
        .iter()
        .find(|&&m| !(m >= T::zero() && m <= T::one()))
    {
        None => Ok(()),
        Some(m) => Err(Error::contract(
            "blend",
            format!("mask value {m} outside [0, 1]"),
        )),
    }
}

fn blend_forward<T: Real>(target: &Tensor<T>, warped: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
    let s = target.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    for b in 0..s.n() {
        let m = &mask.data()[b * plane..(b + 1) * plane];
        for c in 0..s.c() {
            let base = (b * s.c() + c) * plane;
            for k in 0..plane {
                let mk = m[k];
                out.data_mut()[base + k] =
                    mk * target.data()[base + k] + (T::one() - mk) * warped.data()[base + k];
            }
        }
    }
    out
}

fn check_blend_shapes(target: Shape, warped: Shape, mask: Shape) -> Result<()> {
    target.expect_eq(&warped, "blend")?;
    target.with_c(1).expect_eq(&mask, "blend")
}

/// `m·target + (1 − m)·warped` with a single-channel mask.
pub fn blend<T: Real>(target: &Tensor<T>, warped: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    check_blend_shapes(target.shape(), warped.shape(), mask.shape())?;
    check_mask(mask)?;
    Ok(blend_forward(target, warped, mask))
}

/// `α·residual + blended`. No clamping: outputs are clamped only when
/// written to disk.
pub fn compose_residual<T: Real>(blended: &Tensor<T>, residual: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    blended.shape().expect_eq(&residual.shape(), "compose_residual")?;
    let a = T::of(alpha);
    let data = blended
        .data()
        .iter()
        .zip(residual.data())
        .map(|(&x, &r)| a * r + x)
        .collect();
    Tensor::from_vec(blended.shape(), data)
}

impl<T: Real> Graph<T> {
    /// Differentiable backward warp with respect to both source and flow.
    pub fn warp(&mut self, source: Var, flow: Var) -> Result<Var> {
        let (ss, fs) = (self.shape(source), self.shape(flow));
        check_flow_shape(ss, fs, "warp_bilinear")?;
        let out = warp_forward(self.value(source), self.value(flow));
        Ok(self.record(
            &[source, flow],
            out,
            op("warp_bilinear", move |ctx: &BackwardCtx<'_, T>| {
                let (src, fl, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let (h, w, plane, ch) = (ss.h(), ss.w(), ss.plane(), ss.c());
                let mut gsrc = ctx.needs[0].then(|| Tensor::zeros(ss));
                let mut gflow = ctx.needs[1].then(|| Tensor::zeros(fs));
                for b in 0..ss.n() {
                    let fb = &fl.data()[b * 2 * plane..(b + 1) * 2 * plane];
                    for i in 0..h {
                        for j in 0..w {
                            let k = i * w + j;
                            let tx = taps(j as f64 + fb[k].as_f64(), w);
                            let ty = taps(i as f64 + fb[plane + k].as_f64(), h);
                            let (mut gx, mut gy) = (T::zero(), T::zero());
                            for c in 0..ch {
                                let base = (b * ch + c) * plane;
                                let gv = g.data()[base + k];
                                if let Some(gs) = gsrc.as_mut() {
                                    scatter(&mut gs.data_mut()[base..base + plane], w, tx, ty, gv);
                                }
                                if gflow.is_some() {
                                    let (_, dx, dy) =
                                        sample(&src.data()[base..base + plane], w, tx, ty);
                                    gx += gv * dx;
                                    gy += gv * dy;
                                }
                            }
                            if let Some(gf) = gflow.as_mut() {
                                gf.data_mut()[b * 2 * plane + k] = gx;
                                gf.data_mut()[b * 2 * plane + plane + k] = gy;
                            }
                        }
                    }
                }
                vec![gsrc, gflow]
            }),
        ))
    }

    /// Differentiable attention blend; the mask must lie in `[0, 1]`.
    pub fn blend(&mut self, target: Var, warped: Var, mask: Var) -> Result<Var> {
        let (ts, ws, ms) = (self.shape(target), self.shape(warped), self.shape(mask));
        check_blend_shapes(ts, ws, ms)?;
        check_mask(self.value(mask))?;
        let out = blend_forward(self.value(target), self.value(warped), self.value(mask));
        Ok(self.record(
            &[target, warped, mask],
            out,
            op("blend", move |ctx: &BackwardCtx<'_, T>| {
                let (a, wp, m, g) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2], ctx.grad);
                let plane = ts.plane();
                let mut ga = Tensor::zeros(ts);
                let mut gw = Tensor::zeros(ts);
                let mut gm = Tensor::zeros(ms);
                for b in 0..ts.n() {
                    for c in 0..ts.c() {
                        let base = (b * ts.c() + c) * plane;
                        for k in 0..plane {
                            let mk = m.data()[b * plane + k];
                            let gv = g.data()[base + k];
                            ga.data_mut()[base + k] = gv * mk;
                            gw.data_mut()[base + k] = gv * (T::one() - mk);
                            gm.data_mut()[b * plane + k] +=
                                gv * (a.data()[base + k] - wp.data()[base + k]);
                        }
                    }
                }
                vec![
                    ctx.needs[0].then_some(ga),
                    ctx.needs[1].then_some(gw),
                    ctx.needs[2].then_some(gm),
                ]
            }),
        ))
    }

    /// `α·residual + blended`.
    pub fn compose_residual(&mut self, blended: Var, residual: Var, alpha: f64) -> Result<Var> {
        let scaled = self.scale(residual, alpha);
        self.add(blended, scaled)
    }
}

/// Displacement field (B×2×H×W), pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T>(Tensor<T>);

impl<T: Real> FlowField<T> {
    /// Validates the shape, rejects non-finite values and clamps magnitudes
    /// to `max(H, W)`.
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let s = data.shape();
        if s.c() != 2 {
            return Err(Error::Dimension {
                op: "flow",
                axis: "channel",
                expected: 2,
                got: s.c(),
            });
        }
        if !data.is_finite() {
            return Err(Error::contract("flow", "non-finite displacement"));
        }
        let lim = T::of(s.h().max(s.w()) as f64);
        Ok(FlowField(data.map(|v| v.max(-lim).min(lim))))
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        FlowField(Tensor::zeros(Shape::new(n, 2, h, w)))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn max_abs(&self) -> T {
        self.0.max_abs()
    }
}

/// Single-channel blending weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask<T>(Tensor<T>);

impl<T: Real> AttentionMask<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.shape().c() != 1 {
            return Err(Error::Dimension {
                op: "mask",
                axis: "channel",
                expected: 1,
                got: data.shape().c(),
            });
        }
        check_mask(&data)?;
        Ok(AttentionMask(data))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Additive appearance correction and its blend weight α.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceResidual<T> {
    pub data: Tensor<T>,
    pub alpha: f64,
}

impl<T: Real> AppearanceResidual<T> {
    pub fn new(data: Tensor<T>, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::contract("residual", format!("alpha {alpha} must be ≥ 0")));
        }
        Ok(AppearanceResidual { data, alpha })
    }
}

/// The three maps a transfer produces, everything needed to re-apply it.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMaps<T> {
    pub flow: FlowField<T>,
    pub mask: AttentionMask<T>,
    pub residual: AppearanceResidual<T>,
}

impl<T: Real> TransferMaps<T> {
    pub fn resolution(&self) -> (usize, usize) {
        let s = self.flow.tensor().shape();
        (s.h(), s.w())
    }
}

fn resize<T: Real>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.input(t.clone());
    let r = g.bilinear_resize(v, h, w)?;
    Ok(g.value(r).clone())
}

/// Resizes mask and residual bilinearly to `scale` × their resolution; the
/// flow is resized and its displacements multiplied by `scale` so they stay
/// in pixel units of the new grid.
pub fn upscale_transfer<T: Real>(maps: &TransferMaps<T>, scale: f64) -> Result<TransferMaps<T>> {
    if !(scale >= 1.0 && scale.is_finite()) {
        return Err(Error::contract("upscale_transfer", format!("scale {scale} must be ≥ 1")));
    }
    let (h, w) = maps.resolution();
    let (nh, nw) = (h as f64 * scale, w as f64 * scale);
    if nh.fract() != 0.0 || nw.fract() != 0.0 {
        return Err(Error::contract(
            "upscale_transfer",
            format!("scale {scale} gives non-integral resolution {nh}×{nw}"),
        ));
    }
    if scale == 1.0 {
        return Ok(maps.clone());
    }
    let (nh, nw) = (nh as usize, nw as usize);
    let s = T::of(scale);
    let flow = resize(maps.flow.tensor(), nh, nw)?.map(|v| v * s);
    Ok(TransferMaps {
        flow: FlowField::new(flow)?,
        mask: AttentionMask::new(resize(maps.mask.tensor(), nh, nw)?.map(|v| v.max(T::zero()).min(T::one())))?,
        residual: AppearanceResidual::new(
            resize(&maps.residual.data, nh, nw)?,
            maps.residual.alpha,
        )?,
    })
}

/// Applies low-resolution transfer maps to a full-resolution target/source
/// pair: warp the source, blend with the target, add the residual.
pub fn apply_transfer<T: Real>(
    target_hr: &Tensor<T>,
    source_hr: &Tensor<T>,
    lowres: &TransferMaps<T>,
) -> Result<Tensor<T>> {
    target_hr.shape().expect_eq(&source_hr.shape(), "apply_transfer")?;
    let (h, w) = lowres.resolution();
    let hr = target_hr.shape();
    if !hr.h().is_multiple_of(h) || !hr.w().is_multiple_of(w) || hr.h() / h != hr.w() / w {
        return Err(Error::Dimension {
            op: "apply_transfer",
            axis: "height",
            expected: h * (hr.w() / w).max(1),
            got: hr.h(),
        });
    }
    let scale = (hr.h() / h) as f64;
    let maps = upscale_transfer(lowres, scale)?;
    let warped = warp_bilinear(source_hr, maps.flow.tensor())?;
    let blended = blend(target_hr, &warped, maps.mask.tensor())?;
    compose_residual(&blended, &maps.residual.data, maps.residual.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    fn flow_x(n: usize, h: usize, w: usize, fx: f64) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(n, 2, h, w), |[_, c, _, _]| if c == 0 { fx } else { 0.0 })
    }

    #[test]
    fn zero_flow_is_identity() {
        let src = Tensor::from_fn(Shape::new(2, 3, 5, 4), |[b, c, i, j]| {
            ((b * 7 + c * 5 + i * 3 + j) as f64 * 0.731).sin()
        });
        let out = warp_bilinear(&src, &Tensor::zeros(Shape::new(2, 2, 5, 4))).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn integer_shift_clamps_at_border() {
        let src = t(Shape::new(1, 1, 1, 3), &[1.0, 2.0, 3.0]);
        let out = warp_bilinear(&src, &flow_x(1, 1, 3, 1.0)).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0, 3.0]);
    }

    #[test]
    fn half_pixel_average() {
        let src = t(Shape::new(1, 1, 1, 2), &[0.0, 2.0]);
        let flow = t(Shape::new(1, 2, 1, 2), &[0.5, 0.0, 0.0, 0.0]);
        let out = warp_bilinear(&src, &flow).unwrap();
        assert_eq!(out.data()[0], 1.0);
    }

    #[test]
    fn warp_shape_mismatch() {
        let src = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        let flow = Tensor::zeros(Shape::new(1, 2, 4, 5));
        assert!(matches!(warp_bilinear(&src, &flow), Err(Error::Dimension { .. })));
    }

    #[test]
    fn blend_boundary_cases() {
        let s = Shape::new(1, 3, 2, 2);
        let a = Tensor::from_fn(s, |[_, c, i, j]| (c + i + j) as f64 * 0.1);
        let w = Tensor::from_fn(s, |[_, c, i, j]| -((c * i + j) as f64) * 0.2);
        let ones = Tensor::full(s.with_c(1), 1.0);
        let zeros = Tensor::zeros(s.with_c(1));
        assert_eq!(blend(&a, &w, &ones).unwrap(), a);
        assert_eq!(blend(&a, &w, &zeros).unwrap(), w);
        let out = blend(
            &Tensor::full(s, -1.0),
            &Tensor::full(s, 1.0),
            &Tensor::full(s.with_c(1), 0.5),
        )
        .unwrap();
        assert_eq!(out, Tensor::zeros(s));
    }

    #[test]
    fn blend_rejects_out_of_range_mask() {
        let s = Shape::new(1, 1, 1, 2);
        let a = Tensor::<f64>::zeros(s);
        let m = t(s, &[0.5, 1.5]);
        assert!(matches!(blend(&a, &a, &m), Err(Error::Contract { .. })));
    }

    #[test]
    fn compose_cases() {
        let s = Shape::new(1, 3, 2, 2);
        let x = Tensor::from_fn(s, |[_, c, i, j]| (c + 2 * i + j) as f64 * 0.05);
        let r = Tensor::full(s, 0.4);
        assert_eq!(compose_residual(&x, &r, 0.0).unwrap(), x);
        assert_eq!(compose_residual(&x, &Tensor::zeros(s), 0.7).unwrap(), x);
        let out = compose_residual(&Tensor::zeros(s), &r, 0.5).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    fn maps(h: usize, w: usize, fx: f64) -> TransferMaps<f64> {
        TransferMaps {
            flow: FlowField::new(flow_x(1, h, w, fx)).unwrap(),
            mask: AttentionMask::new(Tensor::full(Shape::new(1, 1, h, w), 0.3)).unwrap(),
            residual: AppearanceResidual::new(Tensor::full(Shape::new(1, 3, h, w), 0.1), 1.0)
                .unwrap(),
        }
    }

    #[test]
    fn upscale_unit_scale_is_identity() {
        let m = maps(4, 4, 1.5);
        assert_eq!(upscale_transfer(&m, 1.0).unwrap(), m);
    }

    #[test]
    fn upscale_scales_displacements() {
        let up = upscale_transfer(&maps(4, 4, 3.0), 2.0).unwrap();
        assert_eq!(up.resolution(), (8, 8));
        let f = up.flow.tensor();
        for i in 0..8 {
            for j in 0..8 {
                assert!((f.at(0, 0, i, j) - 6.0).abs() < 1e-12);
                assert_eq!(f.at(0, 1, i, j), 0.0);
            }
        }
    }

    #[test]
    fn upscale_rejects_fractional_resolution() {
        assert!(upscale_transfer(&maps(3, 3, 0.0), 1.5).is_err());
    }

    #[test]
    fn apply_identity_maps_returns_target() {
        let s = Shape::new(1, 3, 8, 8);
        let target = Tensor::from_fn(s, |[_, c, i, j]| ((c * 64 + i * 8 + j) as f64 * 0.13).cos());
        let source = Tensor::from_fn(s, |[_, c, i, j]| ((c + i * j) as f64 * 0.07).sin());
        let lowres = TransferMaps {
            flow: FlowField::zeros(1, 4, 4),
            mask: AttentionMask::new(Tensor::full(Shape::new(1, 1, 4, 4), 1.0)).unwrap(),
            residual: AppearanceResidual::new(Tensor::zeros(Shape::new(1, 3, 4, 4)), 1.0).unwrap(),
        };
        assert_eq!(apply_transfer(&target, &source, &lowres).unwrap(), target);
    }

    #[test]
    fn apply_rejects_mismatched_pair() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 3, 8, 8));
        let b = Tensor::zeros(Shape::new(1, 3, 8, 6));
        assert!(apply_transfer(&a, &b, &maps(4, 4, 0.0)).is_err());
    }

    #[test]
    fn flow_is_clamped_at_creation() {
        let f = FlowField::new(flow_x(1, 4, 4, 100.0)).unwrap();
        assert_eq!(f.max_abs(), 4.0);
    }
}
