//! Reverse-mode tape.
//!
//! Every forward call appends one node; node indices are therefore a
//! topological order and `backward` simply walks them from the loss down.

use super::kernels::{self, ConvDims, ConvGeometry};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
        geom: ConvGeometry,
        transposed: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Bce {
        pred: Var,
        target: Var,
        weights: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph<E: Scalar = f32> {
    nodes: Vec<Node<E>>,
}

/// Gradients produced by [`Graph::backward`]. Only leaf gradients are kept.
#[derive(Debug)]
pub struct Gradients<E: Scalar = f32> {
    grads: Vec<Option<Tensor<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Scalar> Gradients<E> {
    /// Gradient with respect to `v`; all zeros when the loss never reached it.
    pub fn wrt(&self, v: Var) -> Tensor<E> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Moves the gradient out, or `None` if it was never reached.
    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads[v.0].take()
    }

    /// Number of gradient buffers that were allocated.
    pub fn allocated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn sigmoid<E: Scalar>(x: E) -> E {
    let one = E::one();
    let s = if x >= E::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    // Keep the output strictly inside (0, 1) even where the exact value rounds.
    s.max(E::min_positive_value()).min(one - E::epsilon())
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn check_weights(
        &self,
        op: &'static str,
        w: Var,
        b: Var,
        weight_len: usize,
        c_out: usize,
    ) -> Result<()> {
        if self.value(w).len() != weight_len {
            return Err(Error::shape(
                op,
                format!(
                    "weight has {} values, layer needs {weight_len} (shape {:?})",
                    self.value(w).len(),
                    self.shape(w)
                ),
            ));
        }
        if self.value(b).len() != c_out {
            return Err(Error::shape(
                op,
                format!("bias has {} values, expected {c_out}", self.value(b).len()),
            ));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_impl(
        &mut self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Var,
        n: usize,
        c_in: usize,
        input: (usize, usize),
        c_out: usize,
        geom: ConvGeometry,
        transposed: bool,
        out_shape: impl FnOnce((usize, usize)) -> Vec<usize>,
    ) -> Result<Var> {
        let output = if transposed {
            geom.deconv_out(input.0, input.1)
        } else {
            geom.conv_out(input.0, input.1)
        }
        .ok_or_else(|| {
            Error::shape(
                op,
                format!("input extents {input:?} too small for {geom:?}"),
            )
        })?;
        let taps = geom.kernel.0 * geom.kernel.1;
        self.check_weights(op, w, b, c_in * c_out * taps, c_out)?;
        let dims = ConvDims {
            n,
            c_in,
            c_out,
            input,
            output,
        };
        let (xs, ws, bs) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let data = if transposed {
            kernels::deconv2d_forward(xs, ws, bs, dims, &geom)
        } else {
            kernels::conv2d_forward(xs, ws, bs, dims, &geom)
        };
        let value = Tensor::new(out_shape(output), data)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                dims,
                geom,
                transposed,
            },
            rg,
        ))
    }

    fn expect_rank(&self, op: &'static str, x: Var, rank: usize) -> Result<Vec<usize>> {
        let s = self.shape(x).to_vec();
        if s.len() != rank {
            return Err(Error::shape(
                op,
                format!("expected a rank-{rank} input, got shape {s:?}"),
            ));
        }
        Ok(s)
    }

    fn expect_channels(op: &'static str, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(Error::shape(
                op,
                format!("channel axis (1) has extent {got}, layer expects {want}"),
            ));
        }
        Ok(())
    }

    /// 2-D cross-correlation on `[N, C, H, W]`; `w` is `[C', C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let s = self.expect_rank("conv2d", x, 4)?;
        let ws = self.expect_rank("conv2d", w, 4)?;
        Self::expect_channels("conv2d", s[1], ws[1])?;
        let n = s[0];
        let c_out = ws[0];
        self.conv_impl("conv2d", x, w, b, n, s[1], (s[2], s[3]), c_out, geom, false, |o| {
            vec![n, c_out, o.0, o.1]
        })
    }

    /// 2-D transposed convolution on `[N, C, H, W]`; `w` is `[C, C', kh, kw]`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let s = self.expect_rank("deconv2d", x, 4)?;
        let ws = self.expect_rank("deconv2d", w, 4)?;
        Self::expect_channels("deconv2d", s[1], ws[0])?;
        let n = s[0];
        let c_out = ws[1];
        self.conv_impl("deconv2d", x, w, b, n, s[1], (s[2], s[3]), c_out, geom, true, |o| {
            vec![n, c_out, o.0, o.1]
        })
    }

    /// Convolution along `T` of `[N, C, T, H, W]`, independently per `(h, w)`;
    /// `w` is `[C', C, kt]`.
    pub fn temporal_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let s = self.expect_rank("temporal_conv", x, 5)?;
        let ws = self.expect_rank("temporal_conv", w, 3)?;
        Self::expect_channels("temporal_conv", s[1], ws[1])?;
        if ws[2] != kernel {
            return Err(Error::shape(
                "temporal_conv",
                format!("kernel length {kernel} but weight has {}", ws[2]),
            ));
        }
        let (n, h, wd, c_out) = (s[0], s[3], s[4], ws[0]);
        let geom = ConvGeometry::temporal(kernel, stride, padding);
        self.conv_impl(
            "temporal_conv",
            x,
            w,
            b,
            n,
            s[1],
            (s[2], h * wd),
            c_out,
            geom,
            false,
            |o| vec![n, c_out, o.0, h, wd],
        )
    }

    /// Transposed convolution along `T` of `[N, C, T, H, W]`; `w` is `[C, C', kt]`.
    pub fn temporal_deconv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let s = self.expect_rank("temporal_deconv", x, 5)?;
        let ws = self.expect_rank("temporal_deconv", w, 3)?;
        Self::expect_channels("temporal_deconv", s[1], ws[0])?;
        if ws[2] != kernel {
            return Err(Error::shape(
                "temporal_deconv",
                format!("kernel length {kernel} but weight has {}", ws[2]),
            ));
        }
        let (n, h, wd, c_out) = (s[0], s[3], s[4], ws[1]);
        let geom = ConvGeometry::temporal(kernel, stride, padding);
        self.conv_impl(
            "temporal_deconv",
            x,
            w,
            b,
            n,
            s[1],
            (s[2], h * wd),
            c_out,
            geom,
            true,
            |o| vec![n, c_out, o.0, h, wd],
        )
    }

    /// The same affine map `C -> C'` at every spatial cell of `[N, C, H, W]`;
    /// `w` is `[C', C]`.
    pub fn per_location_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let s = self.expect_rank("per_location_linear", x, 4)?;
        let ws = self.expect_rank("per_location_linear", w, 2)?;
        Self::expect_channels("per_location_linear", s[1], ws[1])?;
        let n = s[0];
        let c_out = ws[0];
        self.conv_impl(
            "per_location_linear",
            x,
            w,
            b,
            n,
            s[1],
            (s[2], s[3]),
            c_out,
            ConvGeometry::square(1, 1, 0),
            false,
            |o| vec![n, c_out, o.0, o.1],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(E::zero()));
        let rg = self.requires_grad(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.requires_grad(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Same storage under a new shape.
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!(
                    "prediction {:?} vs target {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        Ok(())
    }

    /// Mean binary cross-entropy over all elements.
    pub fn bce_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let n = self.shape(pred)[0];
        self.bce_loss_weighted(pred, target, vec![1.0 / n as f64; n])
    }

    /// `Σ_n weights[n] · mean_i BCE(pred[n, i], target[n, i])` over the leading axis.
    pub fn bce_loss_weighted(&mut self, pred: Var, target: Var, weights: Vec<f64>) -> Result<Var> {
        self.check_same_shape("bce_loss", pred, target)?;
        let n = self.shape(pred)[0];
        if weights.len() != n {
            return Err(Error::shape(
                "bce_loss",
                format!("{} sample weights for leading extent {n}", weights.len()),
            ));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let per = p.len() / n;
        let mut total = 0.0f64;
        for (s, &wgt) in weights.iter().enumerate() {
            let mut acc = 0.0f64;
            for i in s * per..(s + 1) * per {
                let pi = p[i].to_f64().unwrap_or(f64::NAN);
                let ti = t[i].to_f64().unwrap_or(f64::NAN);
                acc -= ti * pi.ln().max(-100.0) + (1.0 - ti) * (1.0 - pi).ln().max(-100.0);
            }
            total += wgt * acc / per as f64;
        }
        let rg = self.requires_grad(pred);
        Ok(self.push(
            Tensor::scalar(E::from_f64_lossy(total)),
            Op::Bce {
                pred,
                target,
                weights,
            },
            rg,
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_same_shape("mse_loss", pred, target)?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let sum: f64 = p
            .iter()
            .zip(t)
            .map(|(&a, &b)| {
                let d = (a - b).to_f64().unwrap_or(f64::NAN);
                d * d
            })
            .sum();
        let value = Tensor::scalar(E::from_f64_lossy(sum / p.len() as f64));
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(value, Op::Mse { pred, target }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), E::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // interior buffers were consumed above; only leaves remain
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<E>>], v: Var, g: Tensor<E>) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<E>, gy: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                dims,
                geom,
                transposed,
            } => {
                let (x, w, b) = (*x, *w, *b);
                let xv = self.value(x);
                let wv = self.value(w);
                let mut dw = self
                    .requires_grad(w)
                    .then(|| vec![E::zero(); wv.len()]);
                let mut db = self
                    .requires_grad(b)
                    .then(|| vec![E::zero(); self.value(b).len()]);
                let want_x = self.requires_grad(x);
                let dx = if *transposed {
                    kernels::deconv2d_backward(
                        xv.data(),
                        wv.data(),
                        gy.data(),
                        *dims,
                        geom,
                        want_x,
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    )
                } else {
                    kernels::conv2d_backward(
                        xv.data(),
                        wv.data(),
                        gy.data(),
                        *dims,
                        geom,
                        want_x,
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    )
                };
                if let Some(dx) = dx {
                    let t = Tensor::new(xv.shape().to_vec(), dx).expect("dx shape");
                    self.accumulate(grads, x, t);
                }
                if let Some(dw) = dw {
                    let t = Tensor::new(wv.shape().to_vec(), dw).expect("dw shape");
                    self.accumulate(grads, w, t);
                }
                if let Some(db) = db {
                    let t = Tensor::new(self.value(b).shape().to_vec(), db).expect("db shape");
                    self.accumulate(grads, b, t);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| if v > E::zero() { g } else { E::zero() })
                    .collect();
                let t = Tensor::new(xv.shape().to_vec(), data).expect("relu grad");
                self.accumulate(grads, *x, t);
            }
            Op::Sigmoid(x) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&s, &g)| g * s * (E::one() - s))
                    .collect();
                let t = Tensor::new(node.value.shape().to_vec(), data).expect("sigmoid grad");
                self.accumulate(grads, *x, t);
            }
            Op::Bce {
                pred,
                target,
                weights,
            } => {
                let pv = self.value(*pred);
                let tv = self.value(*target);
                let upstream = gy.data()[0];
                let per = pv.len() / weights.len();
                let mut data = Vec::with_capacity(pv.len());
                for (s, &wgt) in weights.iter().enumerate() {
                    let scale = upstream * E::from_f64_lossy(wgt / per as f64);
                    for i in s * per..(s + 1) * per {
                        let (p, t) = (pv.data()[i], tv.data()[i]);
                        data.push(scale * (p - t) / (p * (E::one() - p)));
                    }
                }
                let t = Tensor::new(pv.shape().to_vec(), data).expect("bce grad");
                self.accumulate(grads, *pred, t);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let tv = self.value(*target);
                let scale = gy.data()[0] * E::from_f64_lossy(2.0 / pv.len() as f64);
                let diff: Vec<E> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(&p, &t)| scale * (p - t))
                    .collect();
                if self.requires_grad(*target) {
                    let neg = diff.iter().map(|&d| -d).collect();
                    let t = Tensor::new(tv.shape().to_vec(), neg).expect("mse grad");
                    self.accumulate(grads, *target, t);
                }
                if self.requires_grad(*pred) {
                    let t = Tensor::new(pv.shape().to_vec(), diff).expect("mse grad");
                    self.accumulate(grads, *pred, t);
                }
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                let t = gy.clone().reshape(shape).expect("reshape grad");
                self.accumulate(grads, *x, t);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let zero = g.constant(Tensor::scalar(0.0));
        let loss = g.mse_loss(x, zero).unwrap();
        assert_eq!(g.value(loss).data()[0], 9.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data()[0], 6.0);
    }

    #[test]
    fn unreached_and_constant_gradients_are_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::scalar(1.5));
        let unused = g.param(Tensor::full([2, 2], 4.0));
        let c = g.constant(Tensor::scalar(2.0));
        let loss = g.mse_loss(x, c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(unused), Tensor::zeros([2, 2]));
        assert_eq!(grads.wrt(c).data(), &[0.0]);
        assert_eq!(grads.allocated(), 1);
    }

    #[test]
    fn backward_on_detached_loss_fails() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(0.0));
        let loss = g.mse_loss(a, b).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Detached)));
        let big = g.param(Tensor::zeros([3]));
        assert!(matches!(g.backward(big), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([3], vec![-1.0, 2.0, 0.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[2], 0.5);
        let extreme = g.constant(Tensor::new([2], vec![-1e4f64, 1e4]).unwrap());
        let s = g.sigmoid(extreme);
        assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn loss_values() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::full([2, 3], 0.5));
        let t = g.constant(Tensor::full([2, 3], 0.5));
        let l = g.bce_loss(p, t).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let p = g.param(Tensor::scalar(0.9));
        let t = g.constant(Tensor::scalar(1.0));
        let l = g.bce_loss(p, t).unwrap();
        assert!((g.value(l).data()[0] - 0.10536051565782628).abs() < 1e-12);

        let p = g.param(Tensor::new([2], vec![0.0, 2.0]).unwrap());
        let t = g.constant(Tensor::new([2], vec![1.0, 0.0]).unwrap());
        let l = g.mse_loss(p, t).unwrap();
        assert_eq!(g.value(l).data()[0], 2.5);
        let l = g.mse_loss(p, p).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 3, 8, 8]));
        let w = g.param(Tensor::zeros([4, 2, 3, 3]));
        let b = g.param(Tensor::zeros([4]));
        let err = g
            .conv2d(x, w, b, ConvGeometry::square(3, 1, 0))
            .unwrap_err()
            .to_string();
        assert!(err.contains("channel axis"), "{err}");
        let p = g.param(Tensor::zeros([2]));
        let t = g.constant(Tensor::zeros([3]));
        assert!(g.mse_loss(p, t).is_err());
        assert!(g.bce_loss(p, t).is_err());
    }
}
