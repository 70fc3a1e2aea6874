//! Encoder-decoder with skip connections.
//!
//! Level 0 is a stem of two 3x3 convolutions. Each deeper level halves the
//! resolution with a stride-2 3x3 convolution followed by a 3x3 convolution.
//! The decoder upsamples (nearest 2x), applies a 3x3 convolution, concatenates
//! the encoder skip and mixes it with another 3x3 convolution. Heads are 1x1.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Parameter, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetSpec {
    pub input_channels: usize,
    pub level_channels: Vec<usize>,
    /// Adds a 1-channel 1x1 head on the last decoder features.
    pub guidance: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayer {
    fn new(name: String, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.level_channels.len() < 2 {
            return Err(Error::Config(format!(
                "a U-Net needs at least 2 levels, got {}",
                self.level_channels.len()
            )));
        }
        if self.input_channels == 0 || self.level_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.level_channels.len()
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let d = self.divisor();
        if !height.is_multiple_of(d) || !width.is_multiple_of(d) || height == 0 || width == 0 {
            return Err(Error::ShapeNotDivisible {
                height,
                width,
                divisor: d,
            });
        }
        Ok(())
    }

    /// Convolutions in parameter order.
    pub fn layers(&self) -> Vec<ConvLayer> {
        let ch = &self.level_channels;
        let mut v = vec![
            ConvLayer::new("enc0.a".into(), self.input_channels, ch[0], 3, 1),
            ConvLayer::new("enc0.b".into(), ch[0], ch[0], 3, 1),
        ];
        for l in 1..ch.len() {
            v.push(ConvLayer::new(format!("enc{l}.down"), ch[l - 1], ch[l], 3, 2));
            v.push(ConvLayer::new(format!("enc{l}.conv"), ch[l], ch[l], 3, 1));
        }
        for l in (0..ch.len() - 1).rev() {
            v.push(ConvLayer::new(format!("dec{l}.up"), ch[l + 1], ch[l], 3, 1));
            v.push(ConvLayer::new(format!("dec{l}.mix"), 2 * ch[l], ch[l], 3, 1));
        }
        v.push(ConvLayer::new("head.depth".into(), ch[0], 1, 1, 1));
        v.push(ConvLayer::new("head.conf".into(), ch[0], 1, 1, 1));
        if self.guidance {
            v.push(ConvLayer::new("head.guide".into(), ch[0], 1, 1, 1));
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(ConvLayer::param_count).sum()
    }
}

/// Raw head outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct UNetOutputs {
    pub depth: Var,
    pub confidence: Var,
    pub guidance: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub spec: UNetSpec,
    pub store: ParamStore,
}

/// softplus(x) = 2 at this bias, so a fresh depth head starts near 2 * depth_scale.
const DEPTH_HEAD_BIAS: f32 = 1.854_587_9;

impl UNet {
    pub fn new(spec: UNetSpec, group: u32, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new(group);
        for layer in spec.layers() {
            let head = layer.name.starts_with("head.");
            let gain = if head { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            let shape = [layer.out_channels, layer.in_channels, layer.kernel, layer.kernel];
            store.push(Parameter::kaiming(format!("{}.w", layer.name), shape, gain, rng));
            let bias = if layer.name == "head.depth" { DEPTH_HEAD_BIAS } else { 0.0 };
            store.push(Parameter::new(
                format!("{}.b", layer.name),
                Tensor::filled([1, layer.out_channels, 1, 1], bias),
            ));
        }
        Ok(Self { spec, store })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Runs the network on `input` using parameter leaves `params` (as returned
    /// by `self.store.bind`).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<UNetOutputs> {
        let [_, c, h, w] = tape.value(input).shape();
        if c != self.spec.input_channels {
            return Err(Error::TensorShape {
                op: "unet",
                detail: format!("expected {} input channels, got {c}", self.spec.input_channels),
            });
        }
        self.spec.check_input(h, w)?;
        let layers = self.spec.layers();
        if params.len() != 2 * layers.len() {
            return Err(Error::TensorShape {
                op: "unet",
                detail: format!("{} parameter leaves for {} layers", params.len(), layers.len()),
            });
        }
        let mut next = 0usize;
        let mut conv = |tape: &mut Tape<T>, x: Var, relu: bool| -> Result<Var> {
            let layer = &layers[next / 2];
            let pad = layer.kernel / 2;
            let y = tape.conv2d(x, params[next], params[next + 1], layer.stride, pad)?;
            next += 2;
            Ok(if relu { tape.relu(y) } else { y })
        };

        let levels = self.spec.levels();
        let mut skips = Vec::with_capacity(levels);
        let mut x = conv(tape, input, true)?;
        x = conv(tape, x, true)?;
        skips.push(x);
        for _ in 1..levels {
            x = conv(tape, x, true)?;
            x = conv(tape, x, true)?;
            skips.push(x);
        }
        for l in (0..levels - 1).rev() {
            let up = tape.upsample_nearest2x(x);
            let up = conv(tape, up, true)?;
            let cat = tape.concat_channels(up, skips[l])?;
            x = conv(tape, cat, true)?;
        }
        let depth = conv(tape, x, false)?;
        let confidence = conv(tape, x, false)?;
        let guidance = if self.spec.guidance {
            Some(conv(tape, x, false)?)
        } else {
            None
        };
        Ok(UNetOutputs {
            depth,
            confidence,
            guidance,
        })
    }
}
