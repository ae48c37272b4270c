use super::{DensityMap, DensitySequence};
use crate::error::{Error, Result};

/// Sampled Gaussian truncated at `ceil(3σ)` and renormalized to unit sum.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "smoothing sigma must be positive, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Zero-padded 1-D convolution of `n` lines of `len` samples spaced `stride` apart.
fn convolve_axis(
    data: &[f64],
    kernel: &[f64],
    len: usize,
    stride: usize,
    line_starts: impl Iterator<Item = usize>,
    out: &mut [f64],
) {
    let r = (kernel.len() / 2) as isize;
    for start in line_starts {
        for i in 0..len as isize {
            let lo = (i - r).max(0);
            let hi = (i + r).min(len as isize - 1);
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += kernel[(j - i + r) as usize] * data[start + j as usize * stride];
            }
            out[start + i as usize * stride] = acc;
        }
    }
}

/// Separable 3-D Gaussian over `(x, y, t)` with the same `sigma` on each
/// axis, zero padding at every border, outputs clamped to `[0, 1]`.
pub fn smooth_spatiotemporal(seq: &DensitySequence, sigma: f64) -> Result<DensitySequence> {
    let kernel = gaussian_kernel(sigma)?;
    let (w, h, t) = (seq.width(), seq.height(), seq.len());
    let plane = w * h;
    let mut a: Vec<f64> = seq
        .frames()
        .iter()
        .flat_map(|f| f.values().iter().map(|&v| v as f64))
        .collect();
    let mut b = vec![0.0f64; a.len()];

    convolve_axis(&a, &kernel, w, 1, (0..t * h).map(|r| r * w), &mut b);
    convolve_axis(
        &b,
        &kernel,
        h,
        w,
        (0..t).flat_map(|f| (0..w).map(move |x| f * plane + x)),
        &mut a,
    );
    convolve_axis(&a, &kernel, t, plane, 0..plane, &mut b);

    let frames = b
        .chunks_exact(plane)
        .map(|c| DensityMap {
            width: w,
            height: h,
            values: c.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
        })
        .collect();
    DensitySequence::new(frames, seq.frame_rate())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn impulse(w: usize, h: usize, t: usize, at: (usize, usize, usize)) -> DensitySequence {
        let frames = (0..t)
            .map(|f| {
                let mut m = DensityMap::zeros(w, h);
                if f == at.2 {
                    m.values[at.1 * w + at.0] = 1.0;
                }
                m
            })
            .collect();
        DensitySequence::new(frames, 0.0).unwrap()
    }

    /// Direct triple loop with the same truncated kernel.
    fn naive(seq: &DensitySequence, sigma: f64) -> Vec<f64> {
        let k = gaussian_kernel(sigma).unwrap();
        let r = (k.len() / 2) as isize;
        let (w, h, t) = (seq.width() as isize, seq.height() as isize, seq.len() as isize);
        let mut out = Vec::new();
        for f in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for df in -r..=r {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (ff, yy, xx) = (f + df, y + dy, x + dx);
                                if ff < 0 || ff >= t || yy < 0 || yy >= h || xx < 0 || xx >= w {
                                    continue;
                                }
                                let v = seq.frames()[ff as usize].get(xx as usize, yy as usize);
                                acc += k[(dx + r) as usize] * k[(dy + r) as usize] * k[(df + r) as usize] * v as f64;
                            }
                        }
                    }
                    out.push(acc.clamp(0.0, 1.0));
                }
            }
        }
        out
    }

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel(1.0).unwrap();
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(gaussian_kernel(3.0).unwrap().len(), 19);
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }

    #[test]
    fn zero_in_zero_out() {
        let seq = DensitySequence::new(vec![DensityMap::zeros(5, 4); 3], 0.0).unwrap();
        let s = smooth_spatiotemporal(&seq, 2.0).unwrap();
        assert!(s.frames().iter().all(|f| f.sum() == 0.0));
    }

    #[test]
    fn impulse_matches_triple_loop() {
        let seq = impulse(9, 8, 7, (4, 3, 3));
        let s = smooth_spatiotemporal(&seq, 1.0).unwrap();
        let center = gaussian_kernel(1.0).unwrap()[3];
        let peak = s.frames()[3].get(4, 3) as f64;
        assert!((peak - center.powi(3)).abs() < 1e-7);
        let oracle = naive(&seq, 1.0);
        let got: Vec<f64> = s.frames().iter().flat_map(|f| f.values().iter().map(|&v| v as f64)).collect();
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-7);
        }
        // the boundary-touching impulse exercises zero padding
        let edge = impulse(6, 5, 3, (0, 4, 0));
        let s = smooth_spatiotemporal(&edge, 1.0).unwrap();
        let oracle = naive(&edge, 1.0);
        let got: Vec<f64> = s.frames().iter().flat_map(|f| f.values().iter().map(|&v| v as f64)).collect();
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn interior_impulse_preserves_mass() {
        let seq = impulse(15, 15, 9, (7, 7, 4));
        let s = smooth_spatiotemporal(&seq, 1.0).unwrap();
        let total: f64 = s.frames().iter().map(|f| f.sum()).sum();
        assert!((total - 1.0).abs() < 1e-5);
    }
}
