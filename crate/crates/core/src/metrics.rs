//! Divergences between normalized density maps.
//!
//! `D_KL(g‖c)` measures how much of the ground truth `g` the forecast `c`
//! covers (recall-like), `D_IKL(g‖c) = D_KL(c‖g)` is its precision-like
//! mirror, and `D_JS` is the symmetric Jensen–Shannon divergence. Natural
//! logarithms throughout.

use std::io::Write;
use std::path::Path;

use crate::density::{smooth_spatiotemporal, DensityMap, DensitySequence};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Probability field over the cells of a map.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedMap {
    width: usize,
    height: usize,
    probs: Vec<f64>,
}

impl NormalizedMap {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

/// Adds `epsilon` to every cell, then divides by the total.
pub fn normalize_values(width: usize, height: usize, values: &[f64], epsilon: f64) -> Result<NormalizedMap> {
    if values.len() != width * height || values.is_empty() {
        return Err(Error::shape(
            "normalize",
            format!("{width}x{height} grid with {} values", values.len()),
        ));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "density values must be finite and non-negative, found {v}"
        )));
    }
    let total: f64 = values.iter().map(|v| v + epsilon).sum();
    let probs = values.iter().map(|v| (v + epsilon) / total).collect();
    Ok(NormalizedMap {
        width,
        height,
        probs,
    })
}

pub fn normalize(map: &DensityMap, epsilon: f64) -> Result<NormalizedMap> {
    let values: Vec<f64> = map.values().iter().map(|&v| v as f64).collect();
    normalize_values(map.width(), map.height(), &values, epsilon)
}

fn check_grid(g: &NormalizedMap, c: &NormalizedMap) -> Result<()> {
    if (g.width, g.height) != (c.width, c.height) {
        return Err(Error::shape(
            "divergence",
            format!("{}x{} vs {}x{}", g.width, g.height, c.width, c.height),
        ));
    }
    Ok(())
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

fn scaled(value: f64, g: &NormalizedMap, prefactor: bool) -> f64 {
    if prefactor {
        value / (g.width * g.height) as f64
    } else {
        value
    }
}

/// `Σ g·ln(g/c)`, divided by `W·H` when `prefactor` is set.
pub fn kl_divergence(g: &NormalizedMap, c: &NormalizedMap, prefactor: bool) -> Result<f64> {
    check_grid(g, c)?;
    Ok(scaled(kl_raw(&g.probs, &c.probs), g, prefactor))
}

/// `D_KL(c‖g)`.
pub fn inverse_kl(g: &NormalizedMap, c: &NormalizedMap, prefactor: bool) -> Result<f64> {
    kl_divergence(c, g, prefactor)
}

/// `½[KL(g‖m) + KL(c‖m)]` with `m = (g + c)/2`.
pub fn js_divergence(g: &NormalizedMap, c: &NormalizedMap, prefactor: bool) -> Result<f64> {
    check_grid(g, c)?;
    let m: Vec<f64> = g.probs.iter().zip(&c.probs).map(|(a, b)| (a + b) / 2.0).collect();
    let raw = 0.5 * (kl_raw(&g.probs, &m) + kl_raw(&c.probs, &m));
    Ok(scaled(raw, g, prefactor))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameMetrics {
    pub d_kl: f64,
    pub d_ikl: f64,
    pub d_js: f64,
}

impl FrameMetrics {
    fn mean(rows: &[FrameMetrics]) -> FrameMetrics {
        let n = rows.len().max(1) as f64;
        FrameMetrics {
            d_kl: rows.iter().map(|r| r.d_kl).sum::<f64>() / n,
            d_ikl: rows.iter().map(|r| r.d_ikl).sum::<f64>() / n,
            d_js: rows.iter().map(|r| r.d_js).sum::<f64>() / n,
        }
    }
}

/// Per-frame divergences plus their mean (`average`) and the last frame (`final`).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_frame: Vec<FrameMetrics>,
    pub average: FrameMetrics,
    pub final_frame: FrameMetrics,
}

impl MetricReport {
    pub fn from_frames(per_frame: Vec<FrameMetrics>) -> Self {
        let average = FrameMetrics::mean(&per_frame);
        let final_frame = per_frame.last().copied().unwrap_or_default();
        MetricReport {
            per_frame,
            average,
            final_frame,
        }
    }

    /// Frame-wise mean of several equally long reports.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::InvalidArgument("no reports to average".into()))?;
        let t = first.per_frame.len();
        if reports.iter().any(|r| r.per_frame.len() != t) {
            return Err(Error::InvalidArgument("reports differ in length".into()));
        }
        let per_frame = (0..t)
            .map(|i| FrameMetrics::mean(&reports.iter().map(|r| r.per_frame[i]).collect::<Vec<_>>()))
            .collect();
        Ok(Self::from_frames(per_frame))
    }

    pub fn write_csv_to(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "frame,d_kl,d_ikl,d_js")?;
        let row = |w: &mut dyn Write, label: &str, m: &FrameMetrics| {
            writeln!(w, "{label},{},{},{}", m.d_kl, m.d_ikl, m.d_js)
        };
        for (i, m) in self.per_frame.iter().enumerate() {
            row(&mut w, &(i + 1).to_string(), m)?;
        }
        row(&mut w, "average", &self.average)?;
        row(&mut w, "final", &self.final_frame)
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// Smooths both sequences with `sigma`, then scores each forecast frame
/// against its ground-truth frame.
pub fn evaluate_sequence(
    pred: &DensitySequence,
    gt: &DensitySequence,
    sigma: f64,
    prefactor: bool,
) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} forecast frames vs {} ground-truth frames", pred.len(), gt.len()),
        ));
    }
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::shape(
            "evaluate",
            format!(
                "forecast grid {}x{} vs ground truth {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            ),
        ));
    }
    let ps = smooth_spatiotemporal(pred, sigma)?;
    let gs = smooth_spatiotemporal(gt, sigma)?;
    let per_frame = ps
        .frames()
        .iter()
        .zip(gs.frames())
        .map(|(p, g)| {
            let c = normalize(p, DEFAULT_EPSILON)?;
            let g = normalize(g, DEFAULT_EPSILON)?;
            Ok(FrameMetrics {
                d_kl: kl_divergence(&g, &c, false)?,
                d_ikl: inverse_kl(&g, &c, false)?,
                d_js: js_divergence(&g, &c, false)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricReport::from_frames(per_frame);
    if prefactor {
        // scale after averaging so every row is exactly the unscaled one / (W·H)
        let n = (pred.width() * pred.height()) as f64;
        let scale = |m: &mut FrameMetrics| {
            m.d_kl /= n;
            m.d_ikl /= n;
            m.d_js /= n;
        };
        report.per_frame.iter_mut().for_each(scale);
        scale(&mut report.average);
        scale(&mut report.final_frame);
    }
    Ok(report)
}
