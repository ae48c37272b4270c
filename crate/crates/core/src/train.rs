//! Sliding-window samples and the two training stages: the autoencoder on a
//! binary cross-entropy reconstruction loss over the observed frames, then
//! the latent forecaster on a mean-squared error against encoded future
//! frames with the autoencoder frozen.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::density::DensitySequence;
use crate::error::{Error, Result};
use crate::model::{PdfnModel, Stage, MAP_SIZE, T_IN, T_OUT};
use crate::tensor::optim::AdamState;
use crate::tensor::{Graph, Tensor};

pub const WINDOW_LEN: usize = T_IN + T_OUT;

/// Fixed-length windows over one sequence.
#[derive(Clone, Debug)]
pub struct WindowDataset {
    source: DensitySequence,
    stride: usize,
    offsets: Vec<usize>,
}

/// Windows of 20 frames at offsets `0, stride, 2·stride, …`.
pub fn make_windows(seq: &DensitySequence, stride: usize) -> Result<WindowDataset> {
    if stride == 0 {
        return Err(Error::InvalidArgument("window stride must be positive".into()));
    }
    if seq.len() < WINDOW_LEN {
        return Err(Error::InvalidArgument(format!(
            "sequence has {} frames, a window needs {WINDOW_LEN}",
            seq.len()
        )));
    }
    let count = (seq.len() - WINDOW_LEN) / stride + 1;
    Ok(WindowDataset {
        source: seq.clone(),
        stride,
        offsets: (0..count).map(|i| i * stride).collect(),
    })
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn source(&self) -> &DensitySequence {
        &self.source
    }

    /// `(input, output)` frames of window `i`.
    pub fn window(&self, i: usize) -> Result<(DensitySequence, DensitySequence)> {
        let start = *self
            .offsets
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("window {i} out of range")))?;
        Ok((
            self.source.window(start, T_IN)?,
            self.source.window(start + T_IN, T_OUT)?,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetTransform {
    /// Reconstruct the square-rooted map that is fed to the encoder.
    Sqrt,
    /// Reconstruct the raw map.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub target_transform: TargetTransform,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            iterations: 1000,
            learning_rate: 0.001,
            seed: 0,
            target_transform: TargetTransform::Sqrt,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid learning rate {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Window indices for one iteration: uniform with replacement, a pure
/// function of `(seed, iteration)`.
pub fn sample_batch(seed: u64, iteration: usize, n_windows: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    (0..batch).map(|_| rng.gen_range(0..n_windows)).collect()
}

/// Per-iteration training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub losses: Vec<f64>,
    /// Most gradient buffers allocated by any backward pass.
    pub max_grad_buffers: usize,
}

impl LossTrace {
    pub fn initial(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    pub fn write_csv_to(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "iteration,loss")?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(w, "{i},{l}")?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }
}

/// SHA-256 over every parameter's shape and bit pattern.
pub fn parameter_fingerprint(stage: &Stage) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in stage.named_tensors() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

fn stack_frames(seq: &DensitySequence, indices: &[usize], f: impl Fn(f32) -> f32) -> Result<Tensor> {
    let plane = MAP_SIZE * MAP_SIZE;
    let mut data = Vec::with_capacity(indices.len() * plane);
    for &i in indices {
        data.extend(seq.frames()[i].values().iter().map(|&v| f(v)));
    }
    Tensor::new([indices.len(), 1, MAP_SIZE, MAP_SIZE], data)
}

fn check_map_size(seq: &DensitySequence) -> Result<()> {
    if seq.width() != MAP_SIZE || seq.height() != MAP_SIZE {
        return Err(Error::shape(
            "training data",
            format!("expected {MAP_SIZE}x{MAP_SIZE} maps, got {}x{}", seq.width(), seq.height()),
        ));
    }
    Ok(())
}

/// Progress callback: `(iteration, loss)`.
pub type Progress<'a> = &'a mut dyn FnMut(usize, f64);

/// Autoencoder reconstruction loss on a set of frames, weighted per frame.
fn autoencoder_loss(
    model: &PdfnModel,
    seq: &DensitySequence,
    frames: &[usize],
    weights: Vec<f64>,
    target: TargetTransform,
    trainable: bool,
) -> Result<(f64, Option<(Vec<Tensor>, usize)>)> {
    let mut g = Graph::new();
    let enc = model.encoder.bind(&mut g, trainable);
    let dec = model.decoder.bind(&mut g, trainable);
    let x = g.constant(stack_frames(seq, frames, f32::sqrt)?);
    let t = match target {
        TargetTransform::Sqrt => g.constant(g.value(x).clone()),
        TargetTransform::Identity => g.constant(stack_frames(seq, frames, |v| v)?),
    };
    let z = model.encode_graph(&mut g, x, &enc)?;
    let y = model.decode_graph(&mut g, z, &dec)?;
    let loss = g.bce_loss_weighted(y, t, weights)?;
    let value = g.value(loss).data()[0] as f64;
    if !trainable || !value.is_finite() {
        return Ok((value, None));
    }
    let mut grads = g.backward(loss)?;
    let allocated = grads.allocated();
    let mut out = Vec::new();
    for b in enc.iter().chain(dec.iter()) {
        for v in [b.weight, b.bias] {
            let shape = g.value(v).shape().to_vec();
            out.push(grads.take(v).unwrap_or_else(|| Tensor::zeros(shape)));
        }
    }
    Ok((value, Some((out, allocated))))
}

/// Trains encoder and decoder jointly on the observed part of each window.
pub fn train_autoencoder(
    model: &mut PdfnModel,
    data: &WindowDataset,
    cfg: &TrainConfig,
    mut progress: Option<Progress<'_>>,
) -> Result<LossTrace> {
    cfg.validate()?;
    check_map_size(&data.source)?;
    let mut adam = AdamState::new(
        cfg.learning_rate,
        model.encoder.tensors().into_iter().chain(model.decoder.tensors()),
    );
    let mut trace = LossTrace::default();
    let denom = (cfg.batch_size * T_IN) as f64;
    for it in 0..cfg.iterations {
        let batch = sample_batch(cfg.seed, it, data.len(), cfg.batch_size);
        // overlapping windows share frames; each distinct frame is run once
        // and weighted by how often the batch contains it
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &w in &batch {
            for f in data.offsets[w]..data.offsets[w] + T_IN {
                *counts.entry(f).or_default() += 1;
            }
        }
        let frames: Vec<usize> = counts.keys().copied().collect();
        let weights = counts.values().map(|&c| c as f64 / denom).collect();
        let (loss, grads) =
            autoencoder_loss(model, &data.source, &frames, weights, cfg.target_transform, true)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                loss,
                batch,
            });
        }
        let (grads, allocated) = grads.expect("trainable pass returns gradients");
        trace.max_grad_buffers = trace.max_grad_buffers.max(allocated);
        trace.losses.push(loss);
        if let Some(p) = progress.as_mut() {
            p(it, loss);
        }
        let mut params: Vec<&mut Tensor> = model
            .encoder
            .tensors_mut()
            .into_iter()
            .chain(model.decoder.tensors_mut())
            .collect();
        adam.step(&mut params, &grads)?;
    }
    Ok(trace)
}

/// Mean reconstruction loss of the autoencoder over `frames` (equal weights).
pub fn reconstruction_loss(
    model: &PdfnModel,
    seq: &DensitySequence,
    frames: &[usize],
    target: TargetTransform,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in frames.chunks(32) {
        let w = vec![1.0 / frames.len() as f64; chunk.len()];
        total += autoencoder_loss(model, seq, chunk, w, target, false)?.0;
    }
    Ok(total)
}

/// Latents `[T, K, G, G]` for every frame of `seq` (square-rooted first).
pub fn encode_all(model: &PdfnModel, seq: &DensitySequence) -> Result<Tensor> {
    check_map_size(seq)?;
    let (k, gs) = (model.latent_dim, model.grid_size());
    let mut data = Vec::with_capacity(seq.len() * k * gs * gs);
    let all: Vec<usize> = (0..seq.len()).collect();
    for chunk in all.chunks(32) {
        let z = model.encode_batch(stack_frames(seq, chunk, f32::sqrt)?)?;
        data.extend_from_slice(z.data());
    }
    Tensor::new([seq.len(), k, gs, gs], data)
}

/// `[B, K, len, G, G]` latent windows starting at `starts`.
fn gather_latents(latents: &Tensor, starts: &[usize], len: usize) -> Result<Tensor> {
    let s = latents.shape();
    let (k, cells) = (s[1], s[2] * s[3]);
    let frame = k * cells;
    let mut data = Vec::with_capacity(starts.len() * len * frame);
    for &start in starts {
        let block = Tensor::new(
            [1, len, k, cells],
            latents.data()[start * frame..(start + len) * frame].to_vec(),
        )?;
        data.extend(block.swap_axes_1_2()?.into_data());
    }
    Tensor::new([starts.len(), k, len, s[2], s[3]], data)
}

fn forecaster_loss(
    model: &PdfnModel,
    latents: &Tensor,
    starts: &[usize],
    trainable: bool,
) -> Result<(f64, Option<(Vec<Tensor>, usize)>)> {
    let z_in = gather_latents(latents, starts, T_IN)?;
    let out_starts: Vec<usize> = starts.iter().map(|s| s + T_IN).collect();
    let z_out = gather_latents(latents, &out_starts, T_OUT)?;
    let mut g = Graph::new();
    let fc = model.forecaster.bind(&mut g, trainable);
    let x = g.constant(z_in);
    let target = g.constant(z_out);
    let y = model.forecast_graph(&mut g, x, &fc)?;
    let loss = g.mse_loss(y, target)?;
    let value = g.value(loss).data()[0] as f64;
    if !trainable || !value.is_finite() {
        return Ok((value, None));
    }
    let mut grads = g.backward(loss)?;
    let allocated = grads.allocated();
    let mut out = Vec::new();
    for b in &fc {
        for v in [b.weight, b.bias] {
            let shape = g.value(v).shape().to_vec();
            out.push(grads.take(v).unwrap_or_else(|| Tensor::zeros(shape)));
        }
    }
    Ok((value, Some((out, allocated))))
}

/// Trains only the forecaster; targets are the frozen encoder's latents of
/// the future frames.
pub fn train_forecaster(
    model: &mut PdfnModel,
    data: &WindowDataset,
    cfg: &TrainConfig,
    mut progress: Option<Progress<'_>>,
) -> Result<LossTrace> {
    cfg.validate()?;
    let latents = encode_all(model, &data.source)?;
    let mut adam = AdamState::new(cfg.learning_rate, model.forecaster.tensors());
    let mut trace = LossTrace::default();
    for it in 0..cfg.iterations {
        let batch = sample_batch(cfg.seed, it, data.len(), cfg.batch_size);
        let starts: Vec<usize> = batch.iter().map(|&w| data.offsets[w]).collect();
        let (loss, grads) = forecaster_loss(model, &latents, &starts, true)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                loss,
                batch,
            });
        }
        let (grads, allocated) = grads.expect("trainable pass returns gradients");
        trace.max_grad_buffers = trace.max_grad_buffers.max(allocated);
        trace.losses.push(loss);
        if let Some(p) = progress.as_mut() {
            p(it, loss);
        }
        let mut params = model.forecaster.tensors_mut();
        adam.step(&mut params, &grads)?;
    }
    Ok(trace)
}

/// Mean latent MSE of the forecaster over every window of `data`.
pub fn latent_mse(model: &PdfnModel, data: &WindowDataset) -> Result<f64> {
    let latents = encode_all(model, &data.source)?;
    let mut total = 0.0;
    for chunk in data.offsets.chunks(16) {
        let (l, _) = forecaster_loss(model, &latents, chunk, false)?;
        total += l * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}
