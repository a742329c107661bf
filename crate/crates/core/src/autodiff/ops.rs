//! Elementwise, reduction, structural and resampling operators.

use super::graph::{BackwardCtx, BackwardOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Backward rule given as a closure over whatever the forward pass saved.
pub struct FnOp<F> {
    name: &'static str,
    f: F,
}

pub fn op<T, F>(name: &'static str, f: F) -> FnOp<F>
where
    T: Real,
    F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + Send,
{
    FnOp { name, f }
}

impl<T, F> BackwardOp<T> for FnOp<F>
where
    T: Real,
    F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + Send,
{
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        (self.f)(ctx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu(slope) => {
                if x >= T::zero() {
                    x
                } else {
                    x * T::of(slope)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::LeakyRelu(slope) => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::of(slope)
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

/// Logistic function that stays finite for large |x|.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

/// Index into a channel-broadcast operand of shape B×1×H×W.
#[inline]
fn bcast_index(shape: Shape, k: usize) -> usize {
    let plane = shape.plane();
    let b = k / (shape.c() * plane);
    b * plane + k % plane
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.shape(a).expect_eq(&self.shape(b), "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(
            &[a, b],
            out,
            op("add", |ctx: &BackwardCtx<'_, T>| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.clone()),
                ]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.shape(a).expect_eq(&self.shape(b), "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.record(
            &[a, b],
            out,
            op("sub", |ctx: &BackwardCtx<'_, T>| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.map(|g| -g)),
                ]
            }),
        ))
    }

    /// Elementwise product. `b` may have one channel, in which case it is
    /// broadcast across the channels of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bcast = sb.c() == 1 && sa.c() != 1;
        if bcast {
            sa.with_c(1).expect_eq(&sb, "mul")?;
        } else {
            sa.expect_eq(&sb, "mul")?;
        }
        let (va, vb) = (self.value(a), self.value(b));
        let out = if bcast {
            let data = va
                .data()
                .iter()
                .enumerate()
                .map(|(k, &x)| x * vb.data()[bcast_index(sa, k)])
                .collect();
            Tensor::from_vec(sa, data)?
        } else {
            zip_map(va, vb, |x, y| x * y)
        };
        Ok(self.record(
            &[a, b],
            out,
            op("mul", move |ctx: &BackwardCtx<'_, T>| {
                let (x, y, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                if !bcast {
                    return vec![
                        ctx.needs[0].then(|| zip_map(g, y, |g, y| g * y)),
                        ctx.needs[1].then(|| zip_map(g, x, |g, x| g * x)),
                    ];
                }
                let gx = ctx.needs[0].then(|| {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &gk)| gk * y.data()[bcast_index(sa, k)])
                        .collect();
                    Tensor::from_vec(sa, data).unwrap()
                });
                let gy = ctx.needs[1].then(|| {
                    let mut gy = Tensor::zeros(sb);
                    for (k, (&gk, &xk)) in g.data().iter().zip(x.data()).enumerate() {
                        gy.data_mut()[bcast_index(sa, k)] += gk * xk;
                    }
                    gy
                });
                vec![gx, gy]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).map(|x| x * s);
        self.record(
            &[a],
            out,
            op("scale", move |ctx: &BackwardCtx<'_, T>| {
                vec![Some(ctx.grad.map(|g| g * s))]
            }),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).map(|x| x + s);
        self.record(
            &[a],
            out,
            op("add_scalar", |ctx: &BackwardCtx<'_, T>| {
                vec![Some(ctx.grad.clone())]
            }),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.record(
            &[a],
            out,
            op("square", |ctx: &BackwardCtx<'_, T>| {
                let two = T::of(2.0);
                vec![Some(zip_map(ctx.grad, ctx.inputs[0], |g, x| two * g * x))]
            }),
        )
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.record(
            &[a],
            out,
            op("abs", |ctx: &BackwardCtx<'_, T>| {
                vec![Some(zip_map(ctx.grad, ctx.inputs[0], |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = self.value(a).map(|x| kind.apply(x));
        self.record(
            &[a],
            out,
            op("activation", move |ctx: &BackwardCtx<'_, T>| {
                let data = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(ctx.inputs[0].data().iter().zip(ctx.output.data()))
                    .map(|(&g, (&x, &y))| g * kind.derivative(x, y))
                    .collect();
                vec![Some(Tensor::from_vec(ctx.grad.shape(), data).unwrap())]
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.activation(a, Activation::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    /// Clamps to `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.record(
            &[a],
            out,
            op("clamp", move |ctx: &BackwardCtx<'_, T>| {
                vec![Some(zip_map(ctx.grad, ctx.inputs[0], |g, x| {
                    if x < lo || x > hi {
                        T::zero()
                    } else {
                        g
                    }
                }))]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let shape = self.shape(a);
        self.record(
            &[a],
            out,
            op("sum", move |ctx: &BackwardCtx<'_, T>| {
                vec![Some(Tensor::full(shape, ctx.grad.item()))]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let inv = T::one() / T::of(shape.numel() as f64);
        let out = Tensor::scalar(self.value(a).sum() * inv);
        self.record(
            &[a],
            out,
            op("mean", move |ctx: &BackwardCtx<'_, T>| {
                vec![Some(Tensor::full(shape, ctx.grad.item() * inv))]
            }),
        )
    }

    /// Spatial average: B×C×H×W → B×C×1×1.
    pub fn mean_spatial(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let plane = shape.plane();
        let inv = T::one() / T::of(plane as f64);
        let out_shape = Shape::new(shape.n(), shape.c(), 1, 1);
        let data = self
            .value(a)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(out_shape, data).unwrap();
        self.record(
            &[a],
            out,
            op("mean_spatial", move |ctx: &BackwardCtx<'_, T>| {
                let data = ctx
                    .grad
                    .data()
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
                    .collect();
                vec![Some(Tensor::from_vec(shape, data).unwrap())]
            }),
        )
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]);
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            first.with_c(s.c()).expect_eq(&s, "concat_channels")?;
            channels.push(s.c());
        }
        let total: usize = channels.iter().sum();
        let out_shape = first.with_c(total);
        let plane = first.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for b in 0..first.n() {
            for (&p, &c) in parts.iter().zip(&channels) {
                let chunk = c * plane;
                data.extend_from_slice(&self.value(p).data()[b * chunk..(b + 1) * chunk]);
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.record(
            parts,
            out,
            op("concat_channels", move |ctx: &BackwardCtx<'_, T>| {
                let g = ctx.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(channels.len());
                for (i, &c) in channels.iter().enumerate() {
                    if ctx.needs[i] {
                        let mut data = Vec::with_capacity(first.n() * c * plane);
                        for b in 0..first.n() {
                            let start = (b * total + offset) * plane;
                            data.extend_from_slice(&g[start..start + c * plane]);
                        }
                        grads.push(Some(Tensor::from_vec(first.with_c(c), data).unwrap()));
                    } else {
                        grads.push(None);
                    }
                    offset += c;
                }
                grads
            }),
        ))
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a);
        if start + len > shape.c() || len == 0 {
            return Err(Error::Dimension {
                op: "slice_channels",
                axis: "channel",
                expected: shape.c(),
                got: start + len,
            });
        }
        let plane = shape.plane();
        let out_shape = shape.with_c(len);
        let mut data = Vec::with_capacity(out_shape.numel());
        for b in 0..shape.n() {
            let from = (b * shape.c() + start) * plane;
            data.extend_from_slice(&self.value(a).data()[from..from + len * plane]);
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.record(
            &[a],
            out,
            op("slice_channels", move |ctx: &BackwardCtx<'_, T>| {
                let mut g = Tensor::zeros(shape);
                for b in 0..shape.n() {
                    let to = (b * shape.c() + start) * plane;
                    let from = b * len * plane;
                    g.data_mut()[to..to + len * plane]
                        .copy_from_slice(&ctx.grad.data()[from..from + len * plane]);
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]);
        let mut sizes = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            first.with_n(s.n()).expect_eq(&s, "concat_batch")?;
            sizes.push(s.numel());
            data.extend_from_slice(self.value(p).data());
        }
        let n = parts.iter().map(|&p| self.shape(p).n()).sum();
        let out = Tensor::from_vec(first.with_n(n), data)?;
        let shapes: Vec<Shape> = parts.iter().map(|&p| self.shape(p)).collect();
        Ok(self.record(
            parts,
            out,
            op("concat_batch", move |ctx: &BackwardCtx<'_, T>| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(shapes.len());
                for (i, (&s, &len)) in shapes.iter().zip(&sizes).enumerate() {
                    grads.push(ctx.needs[i].then(|| {
                        Tensor::from_vec(s, ctx.grad.data()[offset..offset + len].to_vec())
                            .unwrap()
                    }));
                    offset += len;
                }
                grads
            }),
        ))
    }

    pub fn slice_batch(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a);
        if start + len > shape.n() || len == 0 {
            return Err(Error::Dimension {
                op: "slice_batch",
                axis: "batch",
                expected: shape.n(),
                got: start + len,
            });
        }
        let per = shape.numel() / shape.n();
        let out = Tensor::from_vec(
            shape.with_n(len),
            self.value(a).data()[start * per..(start + len) * per].to_vec(),
        )?;
        Ok(self.record(
            &[a],
            out,
            op("slice_batch", move |ctx: &BackwardCtx<'_, T>| {
                let mut g = Tensor::zeros(shape);
                g.data_mut()[start * per..(start + len) * per].copy_from_slice(ctx.grad.data());
                vec![Some(g)]
            }),
        ))
    }

    /// Bilinear resize with the align-corners convention: corner pixels of
    /// input and output coincide.
    pub fn bilinear_resize(&mut self, a: Var, new_h: usize, new_w: usize) -> Result<Var> {
        if new_h == 0 || new_w == 0 {
            return Err(Error::contract("bilinear_resize", "target size must be ≥ 1"));
        }
        let shape = self.shape(a);
        let rows = resize_taps(shape.h(), new_h);
        let cols = resize_taps(shape.w(), new_w);
        let out_shape = Shape::new(shape.n(), shape.c(), new_h, new_w);
        let src = self.value(a);
        let (h, w) = (shape.h(), shape.w());
        let mut out = Vec::with_capacity(out_shape.numel());
        for plane in src.data().chunks(h * w) {
            for &(i0, i1, fy) in &rows {
                let fy = T::of(fy);
                for &(j0, j1, fx) in &cols {
                    let fx = T::of(fx);
                    let top = plane[i0 * w + j0] * (T::one() - fx) + plane[i0 * w + j1] * fx;
                    let bot = plane[i1 * w + j0] * (T::one() - fx) + plane[i1 * w + j1] * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        let out = Tensor::from_vec(out_shape, out)?;
        Ok(self.record(
            &[a],
            out,
            op("bilinear_resize", move |ctx: &BackwardCtx<'_, T>| {
                let mut g = Tensor::zeros(shape);
                let planes = g.data_mut().chunks_mut(h * w);
                for (gp, go) in planes.zip(ctx.grad.data().chunks(new_h * new_w)) {
                    let mut k = 0;
                    for &(i0, i1, fy) in &rows {
                        let fy = T::of(fy);
                        for &(j0, j1, fx) in &cols {
                            let fx = T::of(fx);
                            let gv = go[k];
                            k += 1;
                            gp[i0 * w + j0] += gv * (T::one() - fy) * (T::one() - fx);
                            gp[i0 * w + j1] += gv * (T::one() - fy) * fx;
                            gp[i1 * w + j0] += gv * fy * (T::one() - fx);
                            gp[i1 * w + j1] += gv * fy * fx;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

/// For each output index along one axis: (lower tap, upper tap, weight of
/// the upper tap) under align-corners sampling.
pub(crate) fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            let pos = if dst == 1 || src == 1 {
                0.0
            } else {
                o as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(Shape::new(1, 1, 1, 3), &[0.0, -2.0, 0.0]));
        let th = g.tanh(x);
        assert_eq!(g.value(th).data()[0], 0.0);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        let l = g.leaky_relu(x, 0.2);
        assert!((g.value(l).data()[1] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.input(t(Shape::new(1, 1, 3, 4), &vals));
        let y = g.bilinear_resize(x, 3, 4).unwrap();
        assert_eq!(g.value(y).data(), &vals[..]);
    }

    #[test]
    fn resize_midpoint() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(Shape::new(1, 1, 1, 2), &[0.0, 2.0]));
        let y = g.bilinear_resize(x, 1, 3).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn channel_broadcast_mul() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(Shape::new(1, 2, 1, 2), &[1.0, 2.0, 3.0, 4.0]));
        let m = g.param(t(Shape::new(1, 1, 1, 2), &[10.0, 100.0]));
        let y = g.mul(a, m).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 200.0, 30.0, 400.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(m).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(g.grad(a).unwrap().data(), &[10.0, 100.0, 10.0, 100.0]);
    }

    #[test]
    fn concat_and_slice_channels_invert() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::full(Shape::new(2, 1, 2, 2), 1.0));
        let b = g.param(Tensor::full(Shape::new(2, 2, 2, 2), 2.0));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), Shape::new(2, 3, 2, 2));
        let back = g.slice_channels(c, 1, 2).unwrap();
        assert_eq!(g.value(back), g.value(b));
        assert!(g.slice_channels(c, 2, 2).is_err());
    }

    #[test]
    fn sigmoid_is_finite_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
    }
}
