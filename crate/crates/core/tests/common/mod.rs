#![allow(dead_code)]

use crowdcast::annotations::AnnotationStream;
use crowdcast::density::{rasterize, smooth_spatiotemporal, DensitySequence};
use crowdcast::model::{PdfnModel, GRID_SIZE, MAP_SIZE, T_IN};
use crowdcast::sim::{simulate, Scenario};
use crowdcast::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seed of the shipped reference scenario.
pub const REFERENCE_SEED: u64 = 7;
/// Frames `[0, TRAIN_FRAMES)` are used for training; later windows are held out.
pub const TRAIN_FRAMES: usize = 150;
/// Ground-truth smoothing of rasterized annotations.
pub const GT_SIGMA: f64 = 3.0;

/// `two-groups`, seed 7, 200 frames: annotations and smoothed density maps.
pub fn reference_data() -> (AnnotationStream, DensitySequence) {
    let sc = Scenario {
        seed: REFERENCE_SEED,
        ..Scenario::preset("two-groups").unwrap()
    };
    let ann = simulate(&sc).unwrap();
    let raw = rasterize(&ann, MAP_SIZE, MAP_SIZE, sc.n_frames).unwrap();
    (ann, smooth_spatiotemporal(&raw, GT_SIGMA).unwrap())
}

/// Held-out window starts: every 20-frame window lying in `[TRAIN_FRAMES, len)`.
pub fn held_out_starts(len: usize) -> std::ops::RangeInclusive<usize> {
    TRAIN_FRAMES..=len - 20
}

/// Input rows (or columns) `[lo, hi]` seen by latent cell `u`, derived from
/// the three k=4, s=2, p=1 convolutions (the final 1×1 layer adds nothing).
pub fn receptive_range(u: usize) -> (isize, isize) {
    let (mut lo, mut hi) = (u as isize, u as isize);
    for _ in 0..3 {
        lo = 2 * lo - 1;
        hi = 2 * hi - 1 + 3;
    }
    (lo, hi)
}

#[derive(Debug, Default)]
pub struct Leakage {
    /// Latent values outside the receptive field that changed.
    pub leaked: usize,
    /// Latent values inside that changed (sanity: the perturbation is seen).
    pub inside_changed: usize,
    pub perturbations: usize,
}

/// Perturbs single input pixels and counts latent entries that change
/// outside the cells whose receptive field covers the pixel.
pub fn encoder_leakage(model: &PdfnModel, pixels: &[(usize, usize)], seed: u64) -> Leakage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f32> = (0..MAP_SIZE * MAP_SIZE).map(|_| rng.gen_range(0.0..1.0)).collect();
    let z0 = model
        .encode_batch(Tensor::new([1, 1, MAP_SIZE, MAP_SIZE], base.clone()).unwrap())
        .unwrap();
    let k = model.latent_dim;
    let cell = GRID_SIZE * GRID_SIZE;
    let mut out = Leakage::default();
    for chunk in pixels.chunks(16) {
        let mut data = Vec::with_capacity(chunk.len() * base.len());
        for &(y, x) in chunk {
            let mut img = base.clone();
            let v = &mut img[y * MAP_SIZE + x];
            *v = if *v > 0.5 { *v - 0.5 } else { *v + 0.5 };
            data.extend(img);
        }
        let z = model
            .encode_batch(Tensor::new([chunk.len(), 1, MAP_SIZE, MAP_SIZE], data).unwrap())
            .unwrap();
        for (n, &(y, x)) in chunk.iter().enumerate() {
            out.perturbations += 1;
            for c in 0..k {
                for gy in 0..GRID_SIZE {
                    for gx in 0..GRID_SIZE {
                        let a = z.data()[(n * k + c) * cell + gy * GRID_SIZE + gx];
                        let b = z0.data()[c * cell + gy * GRID_SIZE + gx];
                        let (ylo, yhi) = receptive_range(gy);
                        let (xlo, xhi) = receptive_range(gx);
                        let covers = (ylo..=yhi).contains(&(y as isize)) && (xlo..=xhi).contains(&(x as isize));
                        if a.to_bits() != b.to_bits() {
                            if covers {
                                out.inside_changed += 1;
                            } else {
                                out.leaked += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Perturbs the latent input sequence at single grid cells and counts
/// forecast entries that change at any other cell.
pub fn forecaster_leakage(model: &PdfnModel, cells: &[(usize, usize)], seed: u64) -> Leakage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = model.latent_dim;
    let g = GRID_SIZE;
    let shape = [1, k, T_IN, g, g];
    let base = Tensor::from_fn(shape, |_| rng.gen_range(0.0f32..1.0));
    let y0 = model.forecast_batch(base.clone()).unwrap();
    let per = g * g;
    let mut out = Leakage::default();
    for &(i, j) in cells {
        let mut z = base.clone();
        for c in 0..k * T_IN {
            z.data_mut()[c * per + i * g + j] += 0.75;
        }
        let y = model.forecast_batch(z).unwrap();
        out.perturbations += 1;
        for (idx, (a, b)) in y.data().iter().zip(y0.data()).enumerate() {
            if a.to_bits() != b.to_bits() {
                if idx % per == i * g + j {
                    out.inside_changed += 1;
                } else {
                    out.leaked += 1;
                }
            }
        }
    }
    out
}

/// Latent input that is zero everywhere except cell `(i, j)`; returns the
/// grid cells with any non-zero forecast value.
pub fn forecaster_support(model: &PdfnModel, i: usize, j: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = model.latent_dim;
    let g = GRID_SIZE;
    let mut z = Tensor::<f32>::zeros([1, k, T_IN, g, g]);
    for c in 0..k * T_IN {
        z.data_mut()[c * g * g + i * g + j] = rng.gen_range(0.1..1.0);
    }
    let y = model.forecast_batch(z).unwrap();
    let mut cells: Vec<(usize, usize)> = y
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(idx, _)| ((idx % (g * g)) / g, idx % g))
        .collect();
    cells.sort();
    cells.dedup();
    cells
}

/// Pixels on a stride-3 lattice plus the last row and column.
pub fn pixel_lattice() -> Vec<(usize, usize)> {
    let coords: Vec<usize> = (0..MAP_SIZE).step_by(3).chain([MAP_SIZE - 1]).collect();
    coords.iter().flat_map(|&y| coords.iter().map(move |&x| (y, x))).collect()
}
