//! Reference predictors: constant-velocity extrapolation of tracked people,
//! last-frame persistence, and the whole-map (DFN) ablation.

use crate::annotations::{Annotation, AnnotationStream};
use crate::density::{rasterize, smooth_spatiotemporal, DensitySequence};
use crate::error::Result;
use crate::model::{PdfnModel, DFN_LATENT, T_OUT};
use crate::sim::Trajectory;
use crate::train::{train_autoencoder, train_forecaster, LossTrace, TrainConfig, WindowDataset};

/// Extrapolated positions `(id, x, y)` for each of the `t_out` frames after
/// `last_frame`. A person is dropped from the first frame it leaves
/// `[0, width) × [0, height)` onwards.
pub fn constvel_positions(
    trajectories: &[Trajectory],
    last_frame: u32,
    t_out: usize,
    width: usize,
    height: usize,
) -> Vec<Vec<(u32, f64, f64)>> {
    let mut frames = vec![Vec::new(); t_out];
    for tr in trajectories {
        let (Some(p), Some(q)) = (
            last_frame.checked_sub(1).and_then(|f| tr.position_at(f)),
            tr.position_at(last_frame),
        ) else {
            continue;
        };
        let v = (q.0 - p.0, q.1 - p.1);
        for (tau, out) in frames.iter_mut().enumerate() {
            let k = (tau + 1) as f64;
            let (x, y) = (q.0 + k * v.0, q.1 + k * v.1);
            if !(x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64) {
                break;
            }
            out.push((tr.id, x, y));
        }
    }
    frames
}

/// Rasterizes the extrapolated positions and smooths them with `sigma`,
/// the same pipeline that produces ground-truth maps. `sigma = 0` skips
/// smoothing.
pub fn constvel_forecast(
    trajectories: &[Trajectory],
    last_frame: u32,
    t_out: usize,
    width: usize,
    height: usize,
    sigma: f64,
) -> Result<DensitySequence> {
    let records = constvel_positions(trajectories, last_frame, t_out, width, height)
        .into_iter()
        .enumerate()
        .flat_map(|(t, pts)| {
            pts.into_iter().map(move |(id, x, y)| Annotation {
                frame: t as u32,
                id,
                x,
                y,
            })
        })
        .collect();
    let raw = rasterize(&AnnotationStream::new(records)?, width, height, t_out)?;
    if sigma > 0.0 {
        smooth_spatiotemporal(&raw, sigma)
    } else {
        Ok(raw)
    }
}

/// The last input frame repeated [`T_OUT`] times.
pub fn persistence_forecast(c_in: &DensitySequence) -> Result<DensitySequence> {
    persistence_forecast_len(c_in, T_OUT)
}

pub fn persistence_forecast_len(c_in: &DensitySequence, t_out: usize) -> Result<DensitySequence> {
    let last = c_in.frames().last().cloned().ok_or_else(|| {
        crate::Error::InvalidArgument("persistence needs at least one input frame".into())
    })?;
    DensitySequence::new(vec![last; t_out], c_in.frame_rate())
}

/// Builds and trains the whole-map ablation: autoencoder first, then the
/// forecaster on its frozen latents.
pub fn train_dfn(
    data: &WindowDataset,
    ae: &TrainConfig,
    fc: &TrainConfig,
    seed: u64,
) -> Result<(PdfnModel, LossTrace, LossTrace)> {
    let mut model = PdfnModel::dfn(DFN_LATENT, seed);
    let ae_trace = train_autoencoder(&mut model, data, ae, None)?;
    let fc_trace = train_forecaster(&mut model, data, fc, None)?;
    Ok((model, ae_trace, fc_trace))
}
