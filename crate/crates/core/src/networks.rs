//! Transfer module G (flow + mask + refinement), removal module F (U-Net
//! residual) and the patch discriminator D with its auxiliary classifier.
//!
//! Every encoder-decoder has the same skeleton: three stride-2 convolutions
//! (k4 p1), three residual blocks (two 3×3 convolutions each) and three
//! stride-2 transposed convolutions (k4 p1). Encoder output `i` is
//! concatenated onto the input of the matching decoder layer. With base
//! width `w`, input channels `c_in` and output channels `c_out`, the
//! parameter count of one encoder-decoder is
//!
//! ```text
//! enc:  16·c_in·w + w  +  16·w·2w + 2w  +  16·2w·4w + 4w
//! res:  6 · (9·4w·4w + 4w)
//! dec:  16·4w·2w + 2w  +  16·4w·w + w  +  16·2w·c_out + c_out
//! ```
//!
//! and the discriminator has `16·3·w + w + 16·w·2w + 2w + 16·2w·4w + 4w`
//! for its trunk plus `2·(9·4w + 1)` for the two heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, Graph, ParamId, ParamSet, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

const LEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub width: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Weight α of the appearance residual.
    pub alpha: f64,
    /// Pixels of displacement per unit of raw flow output.
    pub flow_gain: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            width: 16,
            image_size: 64,
            channels: 3,
            alpha: 1.0,
            flow_gain: 8.0,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 16 || !s.is_power_of_two() {
            return Err(Error::Config(format!(
                "image size {s} must be a power of two ≥ 16 (three stride-2 stages and a ≥2×2 patch grid)"
            )));
        }
        if self.width == 0 || self.channels == 0 {
            return Err(Error::Config("width and channels must be ≥ 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be ≥ 0", self.alpha)));
        }
        if !(self.flow_gain > 0.0 && self.flow_gain.is_finite()) {
            return Err(Error::Config(format!("flow gain {} must be > 0", self.flow_gain)));
        }
        Ok(())
    }
}

/// Which transfer sub-networks are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Flow forced to zero; mask and refinement still learned.
    NoFlow,
    /// Residual forced to zero.
    NoRefine,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoFlow, Variant::NoRefine];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFlow => "no_flow",
            Variant::NoRefine => "no_refine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
    transpose: bool,
}

impl Conv {
    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let (w, b) = (p.get(self.weight), p.get(self.bias));
        if self.transpose {
            g.conv_transpose2d(x, w, b, self.stride, self.pad)
        } else {
            g.conv2d(x, w, b, self.stride, self.pad)
        }
    }
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform in ±gain·√(3 / fan_in), gain √(2 / (1 + 0.2²)).
    Scaled,
    Zero,
}

struct Builder<'a, T> {
    params: &'a mut ParamSet<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        transpose: bool,
        init: Init,
    ) -> Conv {
        let shape = if transpose {
            Shape::new(c_in, c_out, k, k)
        } else {
            Shape::new(c_out, c_in, k, k)
        };
        // Transposed layers receive c_in·k²/stride² contributions per output.
        let fan_in = if transpose {
            (c_in * k * k / (stride * stride)).max(1)
        } else {
            c_in * k * k
        };
        let weight = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::Scaled => {
                let gain = (2.0 / (1.0 + LEAK * LEAK)).sqrt();
                let bound = gain * (3.0 / fan_in as f64).sqrt();
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
            }
        };
        Conv {
            weight: self.params.add(format!("{name}.weight"), weight),
            bias: self
                .params
                .add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1))),
            stride,
            pad,
            transpose,
        }
    }
}

/// Three down, three residual, three up, with encoder skips.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoder {
    enc: [Conv; 3],
    res: [(Conv, Conv); 3],
    dec: [Conv; 3],
}

impl EncoderDecoder {
    fn build<T: Real>(b: &mut Builder<'_, T>, name: &str, c_in: usize, c_out: usize, w: usize) -> Self {
        let s = Init::Scaled;
        let enc = [
            b.conv(&format!("{name}.enc1"), c_in, w, 4, 2, 1, false, s),
            b.conv(&format!("{name}.enc2"), w, 2 * w, 4, 2, 1, false, s),
            b.conv(&format!("{name}.enc3"), 2 * w, 4 * w, 4, 2, 1, false, s),
        ];
        let res = [1, 2, 3].map(|i| {
            (
                b.conv(&format!("{name}.res{i}a"), 4 * w, 4 * w, 3, 1, 1, false, s),
                b.conv(&format!("{name}.res{i}b"), 4 * w, 4 * w, 3, 1, 1, false, s),
            )
        });
        let dec = [
            b.conv(&format!("{name}.dec1"), 4 * w, 2 * w, 4, 2, 1, true, s),
            b.conv(&format!("{name}.dec2"), 4 * w, w, 4, 2, 1, true, s),
            b.conv(&format!("{name}.dec3"), 2 * w, c_out, 4, 2, 1, true, Init::Zero),
        ];
        EncoderDecoder { enc, res, dec }
    }

    /// Raw (pre-activation) output.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(3);
        let mut h = x;
        for conv in &self.enc {
            let y = conv.apply(g, p, h)?;
            h = g.leaky_relu(y, LEAK);
            skips.push(h);
        }
        for (a, b) in &self.res {
            let y = a.apply(g, p, h)?;
            let y = g.leaky_relu(y, LEAK);
            let y = b.apply(g, p, y)?;
            h = g.add(h, y)?;
        }
        let y = self.dec[0].apply(g, p, h)?;
        h = g.leaky_relu(y, LEAK);
        let cat = g.concat_channels(&[h, skips[1]])?;
        let y = self.dec[1].apply(g, p, cat)?;
        h = g.leaky_relu(y, LEAK);
        let cat = g.concat_channels(&[h, skips[0]])?;
        self.dec[2].apply(g, p, cat)
    }
}

/// Attribute transfer module G.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferModule<T> {
    pub params: ParamSet<T>,
    /// Shared flow/mask network: 2C input channels, 2 flow + 1 mask logit out.
    flow_net: EncoderDecoder,
    refine_net: EncoderDecoder,
    pub alpha: f64,
    pub flow_gain: f64,
    pub variant: Variant,
}

/// Graph handles of every intermediate of one transfer pass.
#[derive(Debug, Clone, Copy)]
pub struct TransferOut {
    pub output: Var,
    pub flow: Var,
    pub mask: Var,
    pub warped: Var,
    pub blended: Var,
    pub residual: Var,
}

impl<T: Real> TransferModule<T> {
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, a: Var, b_y: Var) -> Result<TransferOut> {
        let s = g.shape(a);
        s.expect_eq(&g.shape(b_y), "forward_transfer")?;
        let x = g.concat_channels(&[a, b_y])?;
        let head = self.flow_net.forward(g, p, x)?;
        check_finite(g, head, "flow/mask head")?;
        let flow = match self.variant {
            Variant::NoFlow => g.input(Tensor::zeros(s.with_c(2))),
            _ => {
                let raw = g.slice_channels(head, 0, 2)?;
                let scaled = g.scale(raw, self.flow_gain);
                let lim = s.h().max(s.w()) as f64;
                g.clamp(scaled, -lim, lim)
            }
        };
        let logit = g.slice_channels(head, 2, 1)?;
        let mask = g.sigmoid(logit);
        let warped = g.warp(b_y, flow)?;
        let blended = g.blend(a, warped, mask)?;
        let residual = match self.variant {
            Variant::NoRefine => g.input(Tensor::zeros(s)),
            _ => {
                let r = self.refine_net.forward(g, p, blended)?;
                g.tanh(r)
            }
        };
        let output = g.compose_residual(blended, residual, self.alpha)?;
        check_finite(g, output, "transfer output")?;
        Ok(TransferOut {
            output,
            flow,
            mask,
            warped,
            blended,
            residual,
        })
    }
}

/// Attribute removal module F: `b = b_y + r(b_y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RemovalModule<T> {
    pub params: ParamSet<T>,
    unet: EncoderDecoder,
}

impl<T: Real> RemovalModule<T> {
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, b_y: Var) -> Result<Var> {
        let r = self.unet.forward(g, p, b_y)?;
        let out = g.add(b_y, r)?;
        check_finite(g, out, "removal output")?;
        Ok(out)
    }
}

/// Patch discriminator with an auxiliary attribute classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub params: ParamSet<T>,
    trunk: [Conv; 3],
    src_head: Conv,
    cls_head: Conv,
}

impl<T: Real> Discriminator<T> {
    /// Returns `(patch scores B×1×H/8×W/8, logits B×1×1×1)`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for conv in &self.trunk {
            let y = conv.apply(g, p, h)?;
            h = g.leaky_relu(y, LEAK);
        }
        let scores = self.src_head.apply(g, p, h)?;
        let c = self.cls_head.apply(g, p, h)?;
        let logits = g.mean_spatial(c);
        Ok((scores, logits))
    }
}

fn check_finite<T: Real>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
            step: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Networks<T> {
    pub transfer: TransferModule<T>,
    pub removal: RemovalModule<T>,
    pub disc: Discriminator<T>,
}

/// Builds G, F and D from one seed. Final layers of the flow, refinement
/// and removal networks start at zero.
pub fn build_networks<T: Real>(config: &NetConfig) -> Result<Networks<T>> {
    config.validate()?;
    let (w, c) = (config.width, config.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sub = || ChaCha8Rng::seed_from_u64(rng.gen());

    let mut gp = ParamSet::new();
    let mut b = Builder { params: &mut gp, rng: sub() };
    let flow_net = EncoderDecoder::build(&mut b, "flow", 2 * c, 3, w);
    let refine_net = EncoderDecoder::build(&mut b, "refine", c, c, w);

    let mut fp = ParamSet::new();
    let mut b = Builder { params: &mut fp, rng: sub() };
    let unet = EncoderDecoder::build(&mut b, "removal", c, c, w);

    let mut dp = ParamSet::new();
    let mut b = Builder { params: &mut dp, rng: sub() };
    let s = Init::Scaled;
    let trunk = [
        b.conv("disc.conv1", c, w, 4, 2, 1, false, s),
        b.conv("disc.conv2", w, 2 * w, 4, 2, 1, false, s),
        b.conv("disc.conv3", 2 * w, 4 * w, 4, 2, 1, false, s),
    ];
    let src_head = b.conv("disc.src", 4 * w, 1, 3, 1, 1, false, s);
    let cls_head = b.conv("disc.cls", 4 * w, 1, 3, 1, 1, false, s);

    Ok(Networks {
        transfer: TransferModule {
            params: gp,
            flow_net,
            refine_net,
            alpha: config.alpha,
            flow_gain: config.flow_gain,
            variant: Variant::Full,
        },
        removal: RemovalModule { params: fp, unet },
        disc: Discriminator {
            params: dp,
            trunk,
            src_head,
            cls_head,
        },
    })
}

/// Closed-form parameter count of one encoder-decoder.
pub fn encoder_decoder_param_count(c_in: usize, c_out: usize, w: usize) -> usize {
    let enc = 16 * c_in * w + w + 16 * w * 2 * w + 2 * w + 16 * 2 * w * 4 * w + 4 * w;
    let res = 6 * (9 * 4 * w * 4 * w + 4 * w);
    let dec = 16 * 4 * w * 2 * w + 2 * w + 16 * 4 * w * w + w + 16 * 2 * w * c_out + c_out;
    enc + res + dec
}

/// Closed-form parameter count of the discriminator.
pub fn discriminator_param_count(c: usize, w: usize) -> usize {
    16 * c * w + w + 16 * w * 2 * w + 2 * w + 16 * 2 * w * 4 * w + 4 * w + 2 * (9 * 4 * w + 1)
}
