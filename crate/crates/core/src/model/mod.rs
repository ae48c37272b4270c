//! The patch density forecasting network and its whole-map ablation.
//!
//! Layer stack (80×80 maps, 8 input and 12 output frames):
//!
//! | stage      | layer                                   | output          |
//! |------------|-----------------------------------------|-----------------|
//! | encoder    | conv 1→32, 32→64, 64→64 (k4 s2 p1) +ReLU | 10×10×64        |
//! | encoder    | per-cell linear 64→K                     | 10×10×K         |
//! | forecaster | tconv K→64 (4,2,1), 64→128 (4,2,1), 128→256 (2,1,0) +ReLU | T 8→4→2→1 |
//! | forecaster | tdeconv 256→128 (3,1,0), 128→64 (4,2,1), 64→K (4,2,1) +ReLU | T 1→3→6→12 |
//! | decoder    | deconv K→32, 32→32 +ReLU, 32→1 +sigmoid  | 80×80×1         |
//!
//! The whole-map variant flattens the 10×10×64 encoder output into one
//! 128-wide vector and forecasts on a 1×1 grid.

mod checkpoint;

pub use checkpoint::{Checkpoint, MAGIC as CDFW_MAGIC};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::density::{sqrt_transform, square_transform, DensityMap, DensitySequence};
use crate::error::{Error, Result};
use crate::tensor::layers::{
    BoundParams, Conv2dLayer, Deconv2dLayer, Layer, PerLocationLinear, TemporalConvLayer,
    TemporalDeconvLayer,
};
use crate::tensor::{ConvGeometry, Graph, Tensor, Var};

pub const MAP_SIZE: usize = 80;
pub const GRID_SIZE: usize = 10;
pub const T_IN: usize = 8;
pub const T_OUT: usize = 12;
pub const PDFN_LATENT: usize = 16;
pub const DFN_LATENT: usize = 128;

const ENCODER_CHANNELS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Latent grid of 10×10 cells, each forecast independently.
    Patch,
    /// Whole map squeezed into one vector.
    WholeMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

/// A named stack of layers, each followed by an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub name: &'static str,
    pub layers: Vec<Layer>,
    pub activations: Vec<Activation>,
}

impl Stage {
    fn new(name: &'static str, layers: Vec<(Layer, Activation)>) -> Self {
        let (layers, activations) = layers.into_iter().unzip();
        Stage {
            name,
            layers,
            activations,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<BoundParams> {
        self.layers.iter().map(|l| l.bind(g, trainable)).collect()
    }

    fn apply(&self, g: &mut Graph, mut x: Var, bound: &[BoundParams], layers: std::ops::Range<usize>) -> Result<Var> {
        for i in layers {
            x = self.layers[i].apply(g, x, bound[i])?;
            x = match self.activations[i] {
                Activation::None => x,
                Activation::Relu => g.relu(x),
                Activation::Sigmoid => g.sigmoid(x),
            };
        }
        Ok(x)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    /// `(name.i.weight, name.i.bias)` pairs in layer order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let p = l.params();
                [
                    (format!("{}.{i}.weight", self.name), &p.weight),
                    (format!("{}.{i}.bias", self.name), &p.bias),
                ]
            })
            .collect()
    }

    /// Every weight then bias, in layer order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let p = l.params_mut();
                [&mut p.weight, &mut p.bias]
            })
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        let name = self.name;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = layer.params_mut();
            for (suffix, slot) in [("weight", &mut p.weight), ("bias", &mut p.bias)] {
                let key = format!("{name}.{i}.{suffix}");
                let t = ck
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{key}: checkpoint shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }
}

fn conv(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Conv2d(Conv2dLayer::new(c_in, c_out, ConvGeometry::square(4, 2, 1), rng))
}

fn deconv(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Deconv2d(Deconv2dLayer::new(c_in, c_out, ConvGeometry::square(4, 2, 1), rng))
}

/// Encoder, forecaster and decoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PdfnModel {
    pub variant: Variant,
    pub latent_dim: usize,
    pub encoder: Stage,
    pub forecaster: Stage,
    pub decoder: Stage,
}

/// Latent sequence `[K, T, H', W']`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    values: Tensor,
}

impl LatentSequence {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.ndim() != 4 {
            return Err(Error::shape(
                "latent_sequence",
                format!("expected [K, T, H, W], got {:?}", values.shape()),
            ));
        }
        Ok(LatentSequence { values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.values.shape()[2], self.values.shape()[3])
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

impl PdfnModel {
    /// Patch network with latent width `latent_dim`, seeded initialization.
    pub fn pdfn(latent_dim: usize, seed: u64) -> Self {
        Self::build(Variant::Patch, latent_dim, seed)
    }

    /// Whole-map ablation with latent width `latent_dim`.
    pub fn dfn(latent_dim: usize, seed: u64) -> Self {
        Self::build(Variant::WholeMap, latent_dim, seed)
    }

    fn build(variant: Variant, k: usize, seed: u64) -> Self {
        use Activation::*;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let flat = ENCODER_CHANNELS * GRID_SIZE * GRID_SIZE;
        let head_in = match variant {
            Variant::Patch => ENCODER_CHANNELS,
            Variant::WholeMap => flat,
        };
        let encoder = Stage::new(
            "encoder",
            vec![
                (conv(1, 32, r), Relu),
                (conv(32, 64, r), Relu),
                (conv(64, ENCODER_CHANNELS, r), Relu),
                (Layer::Linear(PerLocationLinear::new(head_in, k, r)), None),
            ],
        );
        let forecaster = Stage::new(
            "forecaster",
            vec![
                (Layer::TemporalConv(TemporalConvLayer::new(k, 64, 4, 2, 1, r)), Relu),
                (Layer::TemporalConv(TemporalConvLayer::new(64, 128, 4, 2, 1, r)), Relu),
                (Layer::TemporalConv(TemporalConvLayer::new(128, 256, 2, 1, 0, r)), Relu),
                (Layer::TemporalDeconv(TemporalDeconvLayer::new(256, 128, 3, 1, 0, r)), Relu),
                (Layer::TemporalDeconv(TemporalDeconvLayer::new(128, 64, 4, 2, 1, r)), Relu),
                (Layer::TemporalDeconv(TemporalDeconvLayer::new(64, k, 4, 2, 1, r)), Relu),
            ],
        );
        let mut dec = Vec::new();
        let first = match variant {
            Variant::Patch => k,
            Variant::WholeMap => {
                dec.push((Layer::Linear(PerLocationLinear::new(k, flat, r)), None));
                ENCODER_CHANNELS
            }
        };
        dec.push((deconv(first, 32, r), Relu));
        dec.push((deconv(32, 32, r), Relu));
        dec.push((deconv(32, 1, r), Sigmoid));
        let decoder = Stage::new("decoder", dec);
        PdfnModel {
            variant,
            latent_dim: k,
            encoder,
            forecaster,
            decoder,
        }
    }

    /// Side of the latent grid: 10 for the patch network, 1 for the whole-map one.
    pub fn grid_size(&self) -> usize {
        match self.variant {
            Variant::Patch => GRID_SIZE,
            Variant::WholeMap => 1,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.parameter_count() + self.forecaster.parameter_count() + self.decoder.parameter_count()
    }

    /// `[N, 1, 80, 80]` maps to `[N, K, G, G]` latents.
    pub fn encode_graph(&self, g: &mut Graph, x: Var, bound: &[BoundParams]) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != MAP_SIZE || s[3] != MAP_SIZE {
            return Err(Error::shape(
                "encode",
                format!("expected [N, 1, {MAP_SIZE}, {MAP_SIZE}], got {s:?}"),
            ));
        }
        let h = self.encoder.apply(g, x, bound, 0..3)?;
        let h = match self.variant {
            Variant::Patch => h,
            Variant::WholeMap => {
                let n = s[0];
                g.reshape(h, [n, ENCODER_CHANNELS * GRID_SIZE * GRID_SIZE, 1, 1])?
            }
        };
        self.encoder.apply(g, h, bound, 3..4)
    }

    /// `[N, K, G, G]` latents to `[N, 1, 80, 80]` maps in (0, 1).
    pub fn decode_graph(&self, g: &mut Graph, z: Var, bound: &[BoundParams]) -> Result<Var> {
        let s = g.value(z).shape().to_vec();
        let grid = self.grid_size();
        if s.len() != 4 || s[1] != self.latent_dim || s[2] != grid || s[3] != grid {
            return Err(Error::shape(
                "decode",
                format!("expected [N, {}, {grid}, {grid}], got {s:?}", self.latent_dim),
            ));
        }
        match self.variant {
            Variant::Patch => self.decoder.apply(g, z, bound, 0..3),
            Variant::WholeMap => {
                let h = self.decoder.apply(g, z, bound, 0..1)?;
                let h = g.reshape(h, [s[0], ENCODER_CHANNELS, GRID_SIZE, GRID_SIZE])?;
                self.decoder.apply(g, h, bound, 1..4)
            }
        }
    }

    /// `[B, K, 8, G, G]` to `[B, K, 12, G, G]`, independently per grid cell.
    pub fn forecast_graph(&self, g: &mut Graph, z: Var, bound: &[BoundParams]) -> Result<Var> {
        let s = g.value(z).shape().to_vec();
        let grid = self.grid_size();
        if s.len() != 5 || s[1] != self.latent_dim || s[2] != T_IN || s[3] != grid || s[4] != grid {
            return Err(Error::shape(
                "forecast_latent",
                format!(
                    "expected [B, {}, {T_IN}, {grid}, {grid}], got {s:?}",
                    self.latent_dim
                ),
            ));
        }
        self.forecaster.apply(g, z, bound, 0..6)
    }

    /// Encodes `[N, 1, 80, 80]` (already square-rooted) without recording gradients.
    pub fn encode_batch(&self, maps: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.encoder.bind(&mut g, false);
        let x = g.constant(maps);
        let z = self.encode_graph(&mut g, x, &b)?;
        Ok(g.value(z).clone())
    }

    pub fn decode_batch(&self, latents: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.decoder.bind(&mut g, false);
        let z = g.constant(latents);
        let y = self.decode_graph(&mut g, z, &b)?;
        Ok(g.value(y).clone())
    }

    pub fn forecast_batch(&self, z_in: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.forecaster.bind(&mut g, false);
        let z = g.constant(z_in);
        let y = self.forecast_graph(&mut g, z, &b)?;
        Ok(g.value(y).clone())
    }

    /// One (square-rooted) 80×80 map to its `[K, G, G]` latent grid.
    pub fn encode(&self, map: &DensityMap) -> Result<Tensor> {
        if map.width() != MAP_SIZE || map.height() != MAP_SIZE {
            return Err(Error::shape(
                "encode",
                format!("expected a {MAP_SIZE}x{MAP_SIZE} map, got {}x{}", map.width(), map.height()),
            ));
        }
        let x = Tensor::new([1, 1, MAP_SIZE, MAP_SIZE], map.values().to_vec())?;
        let z = self.encode_batch(x)?;
        let shape = z.shape()[1..].to_vec();
        z.reshape(shape)
    }

    /// `[K, G, G]` latent grid to an 80×80 map.
    pub fn decode(&self, latent: &Tensor) -> Result<DensityMap> {
        let mut shape = vec![1];
        shape.extend_from_slice(latent.shape());
        let y = self.decode_batch(latent.clone().reshape(shape)?)?;
        DensityMap::new(MAP_SIZE, MAP_SIZE, y.into_data())
    }

    pub fn forecast_latent(&self, z_in: &LatentSequence) -> Result<LatentSequence> {
        let mut shape = vec![1];
        shape.extend_from_slice(z_in.values.shape());
        let y = self.forecast_batch(z_in.values.clone().reshape(shape)?)?;
        let shape = y.shape()[1..].to_vec();
        LatentSequence::new(y.reshape(shape)?)
    }

    /// Square-rooted input frames `[T, 80, 80]` to the latent sequence `[K, T, G, G]`.
    pub fn encode_sequence(&self, seq: &DensitySequence) -> Result<LatentSequence> {
        let t = seq.len();
        let data: Vec<f32> = seq.frames().iter().flat_map(|f| f.values().iter().copied()).collect();
        let z = self.encode_batch(Tensor::new([t, 1, seq.height(), seq.width()], data)?)?;
        let (k, gsz) = (self.latent_dim, self.grid_size());
        let z = z.reshape([1, t, k, gsz * gsz])?.swap_axes_1_2()?;
        LatentSequence::new(z.reshape([k, t, gsz, gsz])?)
    }

    pub fn decode_sequence(&self, z: &LatentSequence) -> Result<DensitySequence> {
        let (k, t) = (z.channels(), z.len());
        let (gh, gw) = z.grid();
        let frames = z
            .values
            .clone()
            .reshape([1, k, t, gh * gw])?
            .swap_axes_1_2()?
            .reshape([t, k, gh, gw])?;
        let y = self.decode_batch(frames)?;
        let maps = y
            .into_data()
            .chunks_exact(MAP_SIZE * MAP_SIZE)
            .map(|c| DensityMap::new(MAP_SIZE, MAP_SIZE, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        DensitySequence::new(maps, 0.0)
    }

    /// Eight observed frames to twelve forecast frames:
    /// √ → encode → forecast → decode → square.
    pub fn forecast(&self, c_in: &DensitySequence) -> Result<DensitySequence> {
        if c_in.len() != T_IN {
            return Err(Error::shape(
                "forecast",
                format!("expected {T_IN} input frames, got {}", c_in.len()),
            ));
        }
        let z_in = self.encode_sequence(&sqrt_transform(c_in))?;
        let z_out = self.forecast_latent(&z_in)?;
        let decoded = self.decode_sequence(&z_out)?;
        let out = square_transform(&decoded);
        DensitySequence::new(out.into_frames(), c_in.frame_rate())
    }

    /// Autoencoder round trip of every frame: √ → encode → decode → square.
    pub fn reconstruct(&self, seq: &DensitySequence) -> Result<DensitySequence> {
        let z = self.encode_sequence(&sqrt_transform(seq))?;
        let out = square_transform(&self.decode_sequence(&z)?);
        DensitySequence::new(out.into_frames(), seq.frame_rate())
    }

    pub fn autoencoder_checkpoint(&self) -> Checkpoint {
        let tensors = self
            .encoder
            .named_tensors()
            .into_iter()
            .chain(self.decoder.named_tensors())
            .map(|(n, t)| (n, t.clone()))
            .collect();
        Checkpoint { tensors }
    }

    pub fn forecaster_checkpoint(&self) -> Checkpoint {
        let tensors = self
            .forecaster
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        Checkpoint { tensors }
    }

    /// Rebuilds a model whose architecture is implied by the autoencoder
    /// checkpoint. The forecaster keeps its seeded initialization.
    pub fn from_autoencoder_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let head = ck
            .get("encoder.3.weight")
            .ok_or_else(|| Error::Checkpoint("missing tensor encoder.3.weight".into()))?;
        if head.ndim() != 2 {
            return Err(Error::Checkpoint(format!(
                "encoder.3.weight has shape {:?}",
                head.shape()
            )));
        }
        let (k, c_in) = (head.shape()[0], head.shape()[1]);
        let variant = if c_in == ENCODER_CHANNELS {
            Variant::Patch
        } else if c_in == ENCODER_CHANNELS * GRID_SIZE * GRID_SIZE {
            Variant::WholeMap
        } else {
            return Err(Error::Checkpoint(format!(
                "encoder.3.weight input width {c_in} matches no known variant"
            )));
        };
        let mut model = Self::build(variant, k, 0);
        model.encoder.load(ck)?;
        model.decoder.load(ck)?;
        let expected = model.encoder.parameter_count() + model.decoder.parameter_count();
        if ck.parameter_count() != expected {
            return Err(Error::Checkpoint(format!(
                "autoencoder checkpoint holds {} values, architecture needs {expected}",
                ck.parameter_count()
            )));
        }
        Ok(model)
    }

    /// Replaces the forecaster with a freshly initialized one drawn from `seed`.
    pub fn reinit_forecaster(&mut self, seed: u64) {
        self.forecaster = Self::build(self.variant, self.latent_dim, seed).forecaster;
    }

    pub fn load_forecaster(&mut self, ck: &Checkpoint) -> Result<()> {
        self.forecaster.load(ck)?;
        if ck.parameter_count() != self.forecaster.parameter_count() {
            return Err(Error::Checkpoint(format!(
                "forecaster checkpoint holds {} values, architecture needs {}",
                ck.parameter_count(),
                self.forecaster.parameter_count()
            )));
        }
        Ok(())
    }

    /// Output shape after every layer for a batch of `batch` sequences,
    /// labelled `stage.index`. Encoder/decoder shapes are `[B·T, C, H, W]`,
    /// forecaster shapes `[B, C, T, H, W]`.
    pub fn shape_trace(&self, batch: usize) -> Result<Vec<(String, Vec<usize>)>> {
        let mut trace = Vec::new();
        let mut g = Graph::new();
        let enc = self.encoder.bind(&mut g, false);
        let fc = self.forecaster.bind(&mut g, false);
        let dec = self.decoder.bind(&mut g, false);
        let mut x = g.constant(Tensor::zeros([batch * T_IN, 1, MAP_SIZE, MAP_SIZE]));
        trace.push(("input".to_string(), g.value(x).shape().to_vec()));
        for i in 0..4 {
            if i == 3 && self.variant == Variant::WholeMap {
                x = g.reshape(x, [batch * T_IN, ENCODER_CHANNELS * GRID_SIZE * GRID_SIZE, 1, 1])?;
            }
            x = self.encoder.apply(&mut g, x, &enc, i..i + 1)?;
            trace.push((format!("encoder.{i}"), g.value(x).shape().to_vec()));
        }
        let (k, gs) = (self.latent_dim, self.grid_size());
        let z = g
            .value(x)
            .clone()
            .reshape([batch, T_IN, k, gs * gs])?
            .swap_axes_1_2()?
            .reshape([batch, k, T_IN, gs, gs])?;
        let mut y = g.constant(z);
        trace.push(("transpose_in".to_string(), g.value(y).shape().to_vec()));
        for i in 0..6 {
            y = self.forecaster.apply(&mut g, y, &fc, i..i + 1)?;
            trace.push((format!("forecaster.{i}"), g.value(y).shape().to_vec()));
        }
        let frames = g
            .value(y)
            .clone()
            .reshape([batch, k, T_OUT, gs * gs])?
            .swap_axes_1_2()?
            .reshape([batch * T_OUT, k, gs, gs])?;
        let mut d = g.constant(frames);
        trace.push(("transpose_out".to_string(), g.value(d).shape().to_vec()));
        let n_dec = self.decoder.layers.len();
        for i in 0..n_dec {
            d = self.decoder.apply(&mut g, d, &dec, i..i + 1)?;
            if self.variant == Variant::WholeMap && i == 0 {
                d = g.reshape(d, [batch * T_OUT, ENCODER_CHANNELS, GRID_SIZE, GRID_SIZE])?;
            }
            trace.push((format!("decoder.{i}"), g.value(d).shape().to_vec()));
        }
        Ok(trace)
    }
}

/// Output sizes in `W × H × C × T` order (`W × H × T × C` inside the
/// forecaster), per sequence, as `(label, [a, b, c, d], batch)` where `batch`
/// is the number of sequences the traced shape actually holds.
pub fn output_sizes(trace: &[(String, Vec<usize>)]) -> Vec<(String, [usize; 4], usize)> {
    trace
        .iter()
        .map(|(label, s)| {
            let t = frames_at(label);
            let row = match s.as_slice() {
                // [B·T, C, H, W]
                &[bt, c, h, w] => ([w, h, c, t], bt / t.max(1)),
                // [B, C, T, H, W]
                &[b, c, t, h, w] => ([w, h, t, c], b),
                _ => ([0; 4], 0),
            };
            (label.clone(), row.0, row.1)
        })
        .collect()
}

/// Frames per sequence at a traced layer: observed frames before the
/// forecaster, forecast frames after it.
pub fn frames_at(label: &str) -> usize {
    if label == "input" || label.starts_with("encoder") {
        T_IN
    } else {
        T_OUT
    }
}

/// Zeroes every weight and bias (used for closed-form checks).
pub fn zero_parameters(model: &mut PdfnModel) {
    for stage in [&mut model.encoder, &mut model.forecaster, &mut model.decoder] {
        for t in stage.tensors_mut() {
            t.data_mut().fill(0.0);
        }
    }
}
