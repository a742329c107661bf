//! 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Kernel layouts:
//! - `conv2d`: `(C_out, C_in, k, k)`.
//! - `conv_transpose2d`: `(C_in, C_out, k, k)`, i.e. the same tensor a
//!   `conv2d` mapping `C_out → C_in` would use. With that layout the
//!   transposed convolution's forward pass is exactly the input-gradient of
//!   the convolution.

use super::graph::{BackwardCtx, Graph, Var};
use super::ops::op;
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Geometry of one convolution in the forward (`conv2d`) direction: an
/// image of `h × w` maps to a grid of `oh × ow`.
#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one C×H×W image into a `(C·k·k) × (oh·ow)` matrix.
fn im2col<T: Real>(img: &[T], g: &Geom, col: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oi in 0..g.oh {
                    let i = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if i < 0 || i >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + i as usize) * g.w..][..g.w];
                    for (oj, d) in line.iter_mut().enumerate() {
                        let j = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if j < 0 || j >= g.w as isize {
                            T::zero()
                        } else {
                            src[j as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters the matrix back onto a zeroed image.
fn col2im<T: Real>(col: &[T], g: &Geom, img: &mut [T]) {
    img.fill(T::zero());
    let cols = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oi in 0..g.oh {
                    let i = (oi * g.stride + ki) as isize - g.pad as isize;
                    if i < 0 || i >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + i as usize) * g.w..][..g.w];
                    for oj in 0..g.ow {
                        let j = (oj * g.stride + kj) as isize - g.pad as isize;
                        if j >= 0 && j < g.w as isize {
                            dst[j as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

fn check_kernel(op: &'static str, kernel: Shape, bias: Shape, out_ch: usize) -> Result<()> {
    if kernel.h() != kernel.w() {
        return Err(Error::Dimension {
            op,
            axis: "width",
            expected: kernel.h(),
            got: kernel.w(),
        });
    }
    if bias.numel() != out_ch {
        return Err(Error::Dimension {
            op,
            axis: "channel",
            expected: out_ch,
            got: bias.numel(),
        });
    }
    Ok(())
}

fn check_stride(op: &'static str, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::contract(op, "stride must be ≥ 1"));
    }
    Ok(())
}

/// `conv2d(x, w)` input-gradient: `col2im(Wᵀ · g)` per batch item. Shared by
/// the convolution backward pass and the transposed-convolution forward pass.
fn conv_input_grad<T: Real>(
    grad_out: &[T],
    kernel: &[T],
    geo: &Geom,
    c_out: usize,
    batch: usize,
) -> Vec<T> {
    let mut col = vec![T::zero(); geo.rows() * geo.cols()];
    let per_in = geo.c * geo.h * geo.w;
    let per_out = c_out * geo.cols();
    let mut out = vec![T::zero(); batch * per_in];
    for b in 0..batch {
        T::gemm(
            geo.rows(),
            c_out,
            geo.cols(),
            T::one(),
            kernel,
            true,
            &grad_out[b * per_out..(b + 1) * per_out],
            false,
            T::zero(),
            &mut col,
        );
        col2im(&col, geo, &mut out[b * per_in..(b + 1) * per_in]);
    }
    out
}

/// `Σ_b g_b · col(x_b)ᵀ`: kernel gradient of `conv2d`, shape `(c_out, C·k·k)`.
fn conv_kernel_grad<T: Real>(
    image: &[T],
    grad_out: &[T],
    geo: &Geom,
    c_out: usize,
    batch: usize,
) -> Vec<T> {
    let mut col = vec![T::zero(); geo.rows() * geo.cols()];
    let per_in = geo.c * geo.h * geo.w;
    let per_out = c_out * geo.cols();
    let mut gk = vec![T::zero(); c_out * geo.rows()];
    for b in 0..batch {
        im2col(&image[b * per_in..(b + 1) * per_in], geo, &mut col);
        T::gemm(
            c_out,
            geo.cols(),
            geo.rows(),
            T::one(),
            &grad_out[b * per_out..(b + 1) * per_out],
            false,
            &col,
            true,
            T::one(),
            &mut gk,
        );
    }
    gk
}

/// `W · col(x_b)` per batch item: the `conv2d` forward map without bias.
fn conv_apply<T: Real>(image: &[T], kernel: &[T], geo: &Geom, c_out: usize, batch: usize) -> Vec<T> {
    let mut col = vec![T::zero(); geo.rows() * geo.cols()];
    let per_in = geo.c * geo.h * geo.w;
    let per_out = c_out * geo.cols();
    let mut out = vec![T::zero(); batch * per_out];
    for b in 0..batch {
        im2col(&image[b * per_in..(b + 1) * per_in], geo, &mut col);
        T::gemm(
            c_out,
            geo.rows(),
            geo.cols(),
            T::one(),
            kernel,
            false,
            &col,
            false,
            T::zero(),
            &mut out[b * per_out..(b + 1) * per_out],
        );
    }
    out
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    let c = bias.len();
    for (idx, chunk) in out.chunks_mut(plane).enumerate() {
        let bv = bias[idx % c];
        for v in chunk {
            *v += bv;
        }
    }
}

fn bias_grad<T: Real>(grad: &[T], c: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); c];
    for (idx, chunk) in grad.chunks(plane).enumerate() {
        gb[idx % c] += chunk.iter().copied().sum::<T>();
    }
    gb
}

impl<T: Real> Graph<T> {
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        check_stride(OP, stride)?;
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        let c_out = ks.n();
        check_kernel(OP, ks, bs, c_out)?;
        if xs.c() != ks.c() {
            return Err(Error::Dimension {
                op: OP,
                axis: "channel",
                expected: ks.c(),
                got: xs.c(),
            });
        }
        let k = ks.h();
        if xs.h() + 2 * pad < k || xs.w() + 2 * pad < k {
            return Err(Error::Dimension {
                op: OP,
                axis: "height",
                expected: k,
                got: xs.h().min(xs.w()) + 2 * pad,
            });
        }
        let geo = Geom {
            c: xs.c(),
            h: xs.h(),
            w: xs.w(),
            k,
            stride,
            pad,
            oh: (xs.h() + 2 * pad - k) / stride + 1,
            ow: (xs.w() + 2 * pad - k) / stride + 1,
        };
        let batch = xs.n();
        let mut out = conv_apply(self.value(input).data(), self.value(kernel).data(), &geo, c_out, batch);
        add_bias(&mut out, self.value(bias).data(), geo.cols());
        let out = Tensor::from_vec(Shape::new(batch, c_out, geo.oh, geo.ow), out)?;
        Ok(self.record(
            &[input, kernel, bias],
            out,
            op(OP, move |ctx: &BackwardCtx<'_, T>| {
                let g = ctx.grad.data();
                let gx = ctx.needs[0].then(|| {
                    let data = conv_input_grad(g, ctx.inputs[1].data(), &geo, c_out, batch);
                    Tensor::from_vec(xs, data).unwrap()
                });
                let gk = ctx.needs[1].then(|| {
                    let data = conv_kernel_grad(ctx.inputs[0].data(), g, &geo, c_out, batch);
                    Tensor::from_vec(ks, data).unwrap()
                });
                let gb = ctx.needs[2]
                    .then(|| Tensor::from_vec(bs, bias_grad(g, c_out, geo.cols())).unwrap());
                vec![gx, gk, gb]
            }),
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        check_stride(OP, stride)?;
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        let c_out = ks.c();
        check_kernel(OP, ks, bs, c_out)?;
        if xs.c() != ks.n() {
            return Err(Error::Dimension {
                op: OP,
                axis: "channel",
                expected: ks.n(),
                got: xs.c(),
            });
        }
        let k = ks.h();
        let full_h = (xs.h() - 1) * stride + k;
        let full_w = (xs.w() - 1) * stride + k;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::contract(OP, format!("padding {pad} consumes the whole output")));
        }
        let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
        // Forward-direction geometry: the output image convolved down to the
        // input grid.
        let geo = Geom {
            c: c_out,
            h: oh,
            w: ow,
            k,
            stride,
            pad,
            oh: xs.h(),
            ow: xs.w(),
        };
        if (oh + 2 * pad - k) / stride + 1 != xs.h() || (ow + 2 * pad - k) / stride + 1 != xs.w() {
            return Err(Error::contract(OP, "inconsistent stride arithmetic"));
        }
        let batch = xs.n();
        let c_in = xs.c();
        let mut out = conv_input_grad(self.value(input).data(), self.value(kernel).data(), &geo, c_in, batch);
        add_bias(&mut out, self.value(bias).data(), oh * ow);
        let out = Tensor::from_vec(Shape::new(batch, c_out, oh, ow), out)?;
        Ok(self.record(
            &[input, kernel, bias],
            out,
            op(OP, move |ctx: &BackwardCtx<'_, T>| {
                let g = ctx.grad.data();
                let gx = ctx.needs[0].then(|| {
                    let data = conv_apply(g, ctx.inputs[1].data(), &geo, c_in, batch);
                    Tensor::from_vec(xs, data).unwrap()
                });
                let gk = ctx.needs[1].then(|| {
                    let data = conv_kernel_grad(g, ctx.inputs[0].data(), &geo, c_in, batch);
                    Tensor::from_vec(ks, data).unwrap()
                });
                let gb = ctx.needs[2]
                    .then(|| Tensor::from_vec(bs, bias_grad(g, c_out, oh * ow)).unwrap());
                vec![gx, gk, gb]
            }),
        ))
    }
}
