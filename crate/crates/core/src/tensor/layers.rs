//! Parameterised layers used by the forecasting networks.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use super::{ConvGeometry, Graph, Tensor, Var};
use crate::error::Result;

/// Weight and bias of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Params {
    /// `uniform(-a, a)` weights with `a = sqrt(1 / fan_in)`, zero bias.
    fn init(weight_shape: Vec<usize>, out_channels: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let a = (1.0 / fan_in as f64).sqrt() as f32;
        let dist = Uniform::new_inclusive(-a, a);
        let weight = Tensor::from_fn(weight_shape, |_| dist.sample(rng));
        Params {
            weight,
            bias: Tensor::zeros([out_channels]),
        }
    }
}

/// Graph handles for a bound [`Params`].
#[derive(Clone, Copy, Debug)]
pub struct BoundParams {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub params: Params,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Deconv2dLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub params: Params,
}

/// Temporal layers see only the time axis: a `1×1×kt` kernel shared by every
/// spatial cell.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub params: Params,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalDeconvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub params: Params,
}

/// `C -> C'` affine map applied at every spatial cell (a 1×1 convolution).
#[derive(Clone, Debug, PartialEq)]
pub struct PerLocationLinear {
    pub in_channels: usize,
    pub out_channels: usize,
    pub params: Params,
}

impl Conv2dLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        rng: &mut impl Rng,
    ) -> Self {
        let (kh, kw) = geometry.kernel;
        let params = Params::init(
            vec![out_channels, in_channels, kh, kw],
            out_channels,
            in_channels * kh * kw,
            rng,
        );
        Conv2dLayer {
            in_channels,
            out_channels,
            geometry,
            params,
        }
    }
}

impl Deconv2dLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        rng: &mut impl Rng,
    ) -> Self {
        let (kh, kw) = geometry.kernel;
        let params = Params::init(
            vec![in_channels, out_channels, kh, kw],
            out_channels,
            in_channels * kh * kw,
            rng,
        );
        Deconv2dLayer {
            in_channels,
            out_channels,
            geometry,
            params,
        }
    }
}

impl TemporalConvLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let params = Params::init(
            vec![out_channels, in_channels, kernel],
            out_channels,
            in_channels * kernel,
            rng,
        );
        TemporalConvLayer {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            params,
        }
    }
}

impl TemporalDeconvLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let params = Params::init(
            vec![in_channels, out_channels, kernel],
            out_channels,
            in_channels * kernel,
            rng,
        );
        TemporalDeconvLayer {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            params,
        }
    }
}

impl PerLocationLinear {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let params = Params::init(vec![out_channels, in_channels], out_channels, in_channels, rng);
        PerLocationLinear {
            in_channels,
            out_channels,
            params,
        }
    }
}

/// Any of the layer kinds above.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2dLayer),
    Deconv2d(Deconv2dLayer),
    TemporalConv(TemporalConvLayer),
    TemporalDeconv(TemporalDeconvLayer),
    Linear(PerLocationLinear),
}

impl Layer {
    pub fn params(&self) -> &Params {
        match self {
            Layer::Conv2d(l) => &l.params,
            Layer::Deconv2d(l) => &l.params,
            Layer::TemporalConv(l) => &l.params,
            Layer::TemporalDeconv(l) => &l.params,
            Layer::Linear(l) => &l.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Params {
        match self {
            Layer::Conv2d(l) => &mut l.params,
            Layer::Deconv2d(l) => &mut l.params,
            Layer::TemporalConv(l) => &mut l.params,
            Layer::TemporalDeconv(l) => &mut l.params,
            Layer::Linear(l) => &mut l.params,
        }
    }

    /// Puts the parameters on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let p = self.params();
        let (weight, bias) = if trainable {
            (g.param(p.weight.clone()), g.param(p.bias.clone()))
        } else {
            (g.constant(p.weight.clone()), g.constant(p.bias.clone()))
        };
        BoundParams { weight, bias }
    }

    /// Linear part of the layer only; activations are applied by the caller.
    pub fn apply(&self, g: &mut Graph, x: Var, p: BoundParams) -> Result<Var> {
        match self {
            Layer::Conv2d(l) => g.conv2d(x, p.weight, p.bias, l.geometry),
            Layer::Deconv2d(l) => g.deconv2d(x, p.weight, p.bias, l.geometry),
            Layer::TemporalConv(l) => {
                g.temporal_conv(x, p.weight, p.bias, l.kernel, l.stride, l.padding)
            }
            Layer::TemporalDeconv(l) => {
                g.temporal_deconv(x, p.weight, p.bias, l.kernel, l.stride, l.padding)
            }
            Layer::Linear(_) => g.per_location_linear(x, p.weight, p.bias),
        }
    }

    pub fn parameter_count(&self) -> usize {
        let p = self.params();
        p.weight.len() + p.bias.len()
    }
}
