//! Density maps, their construction from annotations, and the transforms
//! applied before training and scoring.

mod cdmf;
mod smooth;

pub use cdmf::{decode_sequence, encode_sequence, read_sequence, write_sequence, MAGIC as CDMF_MAGIC};
pub use smooth::{gaussian_kernel, smooth_spatiotemporal};

use crate::annotations::AnnotationStream;
use crate::error::{Error, Result};

/// Per-cell crowdedness on a `width × height` grid, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl DensityMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        DensityMap {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "density map extents must be positive, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::shape(
                "density_map",
                format!("{width}x{height} map needs {} values, got {}", width * height, values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "density value {v} outside [0, 1]"
            )));
        }
        Ok(DensityMap {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    fn map_values(&self, f: impl Fn(f32) -> f32) -> Self {
        DensityMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Ordered frames on a shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensitySequence {
    frames: Vec<DensityMap>,
    frame_rate: f64,
}

impl DensitySequence {
    pub fn new(frames: Vec<DensityMap>, frame_rate: f64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("density sequence needs at least one frame".into()))?;
        let (w, h) = (first.width, first.height);
        if let Some((i, f)) = frames
            .iter()
            .enumerate()
            .find(|(_, f)| f.width != w || f.height != h)
        {
            return Err(Error::shape(
                "density_sequence",
                format!("frame {i} is {}x{}, frame 0 is {w}x{h}", f.width, f.height),
            ));
        }
        if !(frame_rate.is_finite() && frame_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid frame rate {frame_rate}")));
        }
        Ok(DensitySequence { frames, frame_rate })
    }

    pub fn frames(&self) -> &[DensityMap] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<DensityMap> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    /// Frames `start..start + len` as a new sequence.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames.len() {
            return Err(Error::InvalidArgument(format!(
                "window [{start}, {}) outside a {}-frame sequence",
                start + len,
                self.frames.len()
            )));
        }
        Self::new(self.frames[start..start + len].to_vec(), self.frame_rate)
    }

    fn map_frames(&self, f: impl Fn(&DensityMap) -> DensityMap) -> Self {
        DensitySequence {
            frames: self.frames.iter().map(f).collect(),
            frame_rate: self.frame_rate,
        }
    }
}

/// One impulse of 1.0 per annotation at `(floor(x), floor(y))`, saturating at 1.0.
pub fn rasterize(
    ann: &AnnotationStream,
    width: usize,
    height: usize,
    n_frames: usize,
) -> Result<DensitySequence> {
    if width == 0 || height == 0 || n_frames == 0 {
        return Err(Error::InvalidArgument(format!(
            "rasterize needs positive extents, got {width}x{height}x{n_frames}"
        )));
    }
    ann.check_bounds(width, height)?;
    let mut frames = vec![DensityMap::zeros(width, height); n_frames];
    for r in ann.records() {
        let frame = frames.get_mut(r.frame as usize).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "annotation (frame {}, id {}) beyond the {n_frames}-frame sequence",
                r.frame, r.id
            ))
        })?;
        let cx = (r.x.floor() as usize).min(width - 1);
        let cy = (r.y.floor() as usize).min(height - 1);
        let cell = &mut frame.values[cy * width + cx];
        *cell = (*cell + 1.0).min(1.0);
    }
    DensitySequence::new(frames, 0.0)
}

/// Row-stochastic overlap matrix mapping `n` source cells onto `m` target cells.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    (overlap > 0.0).then_some((s, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-weighted resampling to `new_width × new_height`.
pub fn resize_area(map: &DensityMap, new_width: usize, new_height: usize) -> Result<DensityMap> {
    if new_width == 0 || new_height == 0 {
        return Err(Error::InvalidArgument(format!(
            "target size must be positive, got {new_width}x{new_height}"
        )));
    }
    let wx = area_weights(map.width, new_width);
    let wy = area_weights(map.height, new_height);
    let mut rows = vec![0.0f64; map.height * new_width];
    for y in 0..map.height {
        for (ox, taps) in wx.iter().enumerate() {
            rows[y * new_width + ox] = taps
                .iter()
                .map(|&(sx, w)| w * map.values[y * map.width + sx] as f64)
                .sum();
        }
    }
    let mut out = Vec::with_capacity(new_width * new_height);
    for taps in &wy {
        for ox in 0..new_width {
            let v: f64 = taps.iter().map(|&(sy, w)| w * rows[sy * new_width + ox]).sum();
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    DensityMap::new(new_width, new_height, out)
}

/// Element-wise square root.
pub fn sqrt_transform(seq: &DensitySequence) -> DensitySequence {
    seq.map_frames(|f| f.map_values(f32::sqrt))
}

/// Element-wise square, the inverse of [`sqrt_transform`].
pub fn square_transform(seq: &DensitySequence) -> DensitySequence {
    seq.map_frames(|f| f.map_values(|v| v * v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::Annotation;
    use proptest::prelude::*;

    fn ann(records: &[(u32, u32, f64, f64)]) -> AnnotationStream {
        AnnotationStream::new(
            records
                .iter()
                .map(|&(frame, id, x, y)| Annotation { frame, id, x, y })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn rasterize_single_person() {
        let seq = rasterize(&ann(&[(0, 0, 3.5, 2.5)]), 8, 6, 1).unwrap();
        let f = &seq.frames()[0];
        assert_eq!(f.get(3, 2), 1.0);
        assert_eq!(f.sum(), 1.0);
    }

    #[test]
    fn rasterize_empty_stream() {
        let seq = rasterize(&AnnotationStream::default(), 4, 4, 5).unwrap();
        assert_eq!(seq.len(), 5);
        assert!(seq.frames().iter().all(|f| f.sum() == 0.0));
    }

    #[test]
    fn rasterize_collision_saturates() {
        let records = [(0, 0, 2.1, 2.2), (0, 1, 2.9, 2.7), (0, 2, 5.0, 1.0)];
        let seq = rasterize(&ann(&records), 8, 8, 1).unwrap();
        // deposit-then-clamp oracle
        let mut oracle = vec![0.0f32; 64];
        for &(_, _, x, y) in &records {
            oracle[(y as usize) * 8 + x as usize] += 1.0;
        }
        oracle.iter_mut().for_each(|v| *v = v.min(1.0));
        assert_eq!(seq.frames()[0].values(), oracle.as_slice());
        assert_eq!(seq.frames()[0].get(2, 2), 1.0);
    }

    #[test]
    fn rasterize_rejects_out_of_bounds() {
        let err = rasterize(&ann(&[(1, 7, -0.5, 3.0)]), 8, 8, 2).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { frame: 1, id: 7, .. }));
        assert!(rasterize(&ann(&[(3, 0, 1.0, 1.0)]), 8, 8, 2).is_err());
    }

    #[test]
    fn resize_examples() {
        let m = DensityMap::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(resize_area(&m, 1, 1).unwrap().values(), &[0.5]);

        let c = DensityMap::new(6, 4, vec![0.3; 24]).unwrap();
        let r = resize_area(&c, 4, 3).unwrap();
        assert!(r.values().iter().all(|&v| (v - 0.3).abs() < 1e-6));

        let vals: Vec<f32> = (0..16).map(|i| ((i * 7) % 11) as f32 / 10.0).collect();
        let m = DensityMap::new(4, 4, vals.clone()).unwrap();
        let r = resize_area(&m, 2, 2).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let mut s = 0.0;
                for y in 0..2 {
                    for x in 0..2 {
                        s += vals[(2 * by + y) * 4 + 2 * bx + x];
                    }
                }
                assert!((r.get(bx, by) - s / 4.0).abs() < 1e-6);
            }
        }
        assert!(resize_area(&m, 0, 2).is_err());
    }

    #[test]
    fn sqrt_examples() {
        let m = DensityMap::new(3, 1, vec![0.0, 1.0, 0.25]).unwrap();
        let seq = DensitySequence::new(vec![m], 0.0).unwrap();
        assert_eq!(sqrt_transform(&seq).frames()[0].values(), &[0.0, 1.0, 0.5]);
    }

    #[test]
    fn sequence_requires_common_grid() {
        assert!(DensitySequence::new(vec![], 1.0).is_err());
        let r = DensitySequence::new(vec![DensityMap::zeros(2, 2), DensityMap::zeros(3, 2)], 1.0);
        assert!(r.is_err());
    }

    proptest! {
        #[test]
        fn square_undoes_sqrt(vals in prop::collection::vec(0.0f32..=1.0, 16)) {
            let seq = DensitySequence::new(vec![DensityMap::new(4, 4, vals.clone()).unwrap()], 0.0).unwrap();
            let back = square_transform(&sqrt_transform(&seq));
            for (a, b) in back.frames()[0].values().iter().zip(&vals) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn rasterize_ignores_record_order(
            pts in prop::collection::vec((0u32..3, 0.0f64..10.0, 0.0f64..10.0), 0..20),
            seed in any::<u64>(),
        ) {
            let records: Vec<Annotation> = pts
                .iter()
                .enumerate()
                .map(|(i, &(frame, x, y))| Annotation { frame, id: i as u32, x, y })
                .collect();
            let mut shuffled = records.clone();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
            let a = rasterize(&AnnotationStream::new(records).unwrap(), 10, 10, 3).unwrap();
            let b = rasterize(&AnnotationStream::new(shuffled).unwrap(), 10, 10, 3).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
