//! im2col-based convolution kernels over `[N, C, H, W]` buffers.
//!
//! Temporal layers reuse these by viewing `[N, C, T, H, W]` as
//! `[N, C, T, H·W]` with a `(kt, 1)` kernel, so no cell of the flattened
//! spatial axis ever mixes with another.

use super::Scalar;

/// Kernel, stride and zero-padding along the two convolved axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    /// Kernel along the first axis only; the second axis is untouched.
    pub fn temporal(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel: (kernel, 1),
            stride: (stride, 1),
            padding: (padding, 0),
        }
    }

    /// `floor((in + 2p − k)/s) + 1`, or `None` when no window fits.
    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize| {
            let span = n + 2 * p;
            (span >= k && s > 0).then(|| (span - k) / s + 1)
        };
        Some((
            axis(h, self.kernel.0, self.stride.0, self.padding.0)?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    /// `(in − 1)·s + k − 2p`, or `None` when that is below one.
    pub fn deconv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize| {
            let full = (n - 1) * s + k;
            (full > 2 * p).then(|| full - 2 * p)
        };
        if h == 0 || w == 0 {
            return None;
        }
        Some((
            axis(h, self.kernel.0, self.stride.0, self.padding.0)?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }
}

/// Unfolds one `[C, H, W]` image into `[C·kh·kw, Ho·Wo]`.
fn im2col<E: Scalar>(
    x: &[E],
    c: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    g: &ConvGeometry,
    col: &mut [E],
) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[((ci * kh + i) * kw + j) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * sh + i) as isize - ph as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * sw + j) as isize - pw as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[C·kh·kw, Ho·Wo]` back onto `[C, H, W]`,
/// accumulating into `x`.
fn col2im<E: Scalar>(
    col: &[E],
    c: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    g: &ConvGeometry,
    x: &mut [E],
) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &col[((ci * kh + i) * kw + j) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * sh + i) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * sw + j) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Shapes of one convolution call: batch, channels and spatial extents.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: (usize, usize),
    pub output: (usize, usize),
}

/// Cross-correlation. `weight` is `[C_out, C_in, kh, kw]`.
pub(crate) fn conv2d_forward<E: Scalar>(
    x: &[E],
    weight: &[E],
    bias: &[E],
    d: ConvDims,
    g: &ConvGeometry,
) -> Vec<E> {
    let ck = d.c_in * g.taps();
    let p = d.output.0 * d.output.1;
    let in_sz = d.c_in * d.input.0 * d.input.1;
    let mut out = vec![E::zero(); d.n * d.c_out * p];
    let mut col = vec![E::zero(); ck * p];
    for n in 0..d.n {
        im2col(&x[n * in_sz..][..in_sz], d.c_in, d.input, d.output, g, &mut col);
        let y = &mut out[n * d.c_out * p..][..d.c_out * p];
        for (co, row) in y.chunks_exact_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        E::gemm(d.c_out, ck, p, weight, false, &col, false, E::one(), y);
    }
    out
}

/// Gradients of [`conv2d_forward`]. Returns `dx` only when `want_input` is set;
/// `dw`/`db` are accumulated into the supplied buffers when present.
pub(crate) fn conv2d_backward<E: Scalar>(
    x: &[E],
    weight: &[E],
    dy: &[E],
    d: ConvDims,
    g: &ConvGeometry,
    want_input: bool,
    mut dw: Option<&mut [E]>,
    mut db: Option<&mut [E]>,
) -> Option<Vec<E>> {
    let ck = d.c_in * g.taps();
    let p = d.output.0 * d.output.1;
    let in_sz = d.c_in * d.input.0 * d.input.1;
    let mut dx = want_input.then(|| vec![E::zero(); d.n * in_sz]);
    let mut col = vec![E::zero(); ck * p];
    for n in 0..d.n {
        let dy_n = &dy[n * d.c_out * p..][..d.c_out * p];
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in dy_n.chunks_exact(p).enumerate() {
                db[co] = row.iter().fold(db[co], |acc, &v| acc + v);
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[n * in_sz..][..in_sz], d.c_in, d.input, d.output, g, &mut col);
            E::gemm(d.c_out, p, ck, dy_n, false, &col, true, E::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            E::gemm(ck, d.c_out, p, weight, true, dy_n, false, E::zero(), &mut col);
            col2im(&col, d.c_in, d.input, d.output, g, &mut dx[n * in_sz..][..in_sz]);
        }
    }
    dx
}

/// Transposed convolution. `weight` is `[C_in, C_out, kh, kw]`; the geometry
/// describes the convolution this layer is the adjoint of.
pub(crate) fn deconv2d_forward<E: Scalar>(
    x: &[E],
    weight: &[E],
    bias: &[E],
    d: ConvDims,
    g: &ConvGeometry,
) -> Vec<E> {
    let ck = d.c_out * g.taps();
    let p = d.input.0 * d.input.1;
    let out_sz = d.c_out * d.output.0 * d.output.1;
    let plane = d.output.0 * d.output.1;
    let mut out = vec![E::zero(); d.n * out_sz];
    let mut col = vec![E::zero(); ck * p];
    for n in 0..d.n {
        let x_n = &x[n * d.c_in * p..][..d.c_in * p];
        E::gemm(ck, d.c_in, p, weight, true, x_n, false, E::zero(), &mut col);
        let y = &mut out[n * out_sz..][..out_sz];
        for (co, row) in y.chunks_exact_mut(plane).enumerate() {
            row.fill(bias[co]);
        }
        col2im(&col, d.c_out, d.output, d.input, g, y);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv2d_backward<E: Scalar>(
    x: &[E],
    weight: &[E],
    dy: &[E],
    d: ConvDims,
    g: &ConvGeometry,
    want_input: bool,
    mut dw: Option<&mut [E]>,
    mut db: Option<&mut [E]>,
) -> Option<Vec<E>> {
    let ck = d.c_out * g.taps();
    let p = d.input.0 * d.input.1;
    let out_sz = d.c_out * d.output.0 * d.output.1;
    let plane = d.output.0 * d.output.1;
    let mut dx = want_input.then(|| vec![E::zero(); d.n * d.c_in * p]);
    let mut col = vec![E::zero(); ck * p];
    for n in 0..d.n {
        let dy_n = &dy[n * out_sz..][..out_sz];
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in dy_n.chunks_exact(plane).enumerate() {
                db[co] = row.iter().fold(db[co], |acc, &v| acc + v);
            }
        }
        if dw.is_none() && dx.is_none() {
            continue;
        }
        im2col(dy_n, d.c_out, d.output, d.input, g, &mut col);
        if let Some(dw) = dw.as_deref_mut() {
            let x_n = &x[n * d.c_in * p..][..d.c_in * p];
            E::gemm(d.c_in, p, ck, x_n, false, &col, true, E::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dx_n = &mut dx[n * d.c_in * p..][..d.c_in * p];
            E::gemm(d.c_in, ck, p, weight, false, &col, false, E::zero(), dx_n);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extents() {
        let g = ConvGeometry::square(4, 2, 1);
        assert_eq!(g.conv_out(80, 80), Some((40, 40)));
        assert_eq!(g.conv_out(20, 20), Some((10, 10)));
        assert_eq!(g.deconv_out(10, 10), Some((20, 20)));
        assert_eq!(g.deconv_out(40, 40), Some((80, 80)));
        let t = ConvGeometry::temporal(4, 2, 1);
        assert_eq!(t.conv_out(8, 100), Some((4, 100)));
        assert_eq!(ConvGeometry::temporal(2, 1, 0).conv_out(2, 5), Some((1, 5)));
        assert_eq!(ConvGeometry::temporal(3, 1, 0).deconv_out(1, 5), Some((3, 5)));
        assert_eq!(ConvGeometry::temporal(4, 2, 1).deconv_out(3, 5), Some((6, 5)));
        assert_eq!(ConvGeometry::square(5, 1, 0).conv_out(3, 3), None);
        assert_eq!(ConvGeometry::square(1, 1, 1).deconv_out(1, 1), None);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let g = ConvGeometry::square(3, 2, 1);
        let (h, w) = (5, 4);
        let (ho, wo) = g.conv_out(h, w).unwrap();
        let c = 2;
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * 9 * ho * wo).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, c, (h, w), (ho, wo), &g, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, (h, w), (ho, wo), &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
