//! Finite-difference verification of every differentiable primitive.
//!
//! Each instance draws random inputs, reduces the primitive's output to a
//! scalar with a squared-error head against a random target (loss primitives
//! are their own head), and compares the tape's gradient for every
//! differentiable input with central differences
//! `(f(x + h) - f(x - h)) / (x₊ - x₋)`, where `x₊`/`x₋` are the perturbed
//! values as actually stored in the working precision. The difference
//! quotient itself is always evaluated in `f64` at those points: rounding a
//! 32-bit output (≈6e-8 relative) and dividing by `2h = 2e-4` would otherwise
//! swamp the tolerance.
//!
//! The error of an instance is `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over all checked
//! inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ConvGeometry, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Conv2d,
    Deconv2d,
    TemporalConv,
    TemporalDeconv,
    PerLocationLinear,
    Relu,
    Sigmoid,
    Bce,
    Mse,
}

impl Primitive {
    pub const ALL: [Primitive; 9] = [
        Primitive::Conv2d,
        Primitive::Deconv2d,
        Primitive::TemporalConv,
        Primitive::TemporalDeconv,
        Primitive::PerLocationLinear,
        Primitive::Relu,
        Primitive::Sigmoid,
        Primitive::Bce,
        Primitive::Mse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Conv2d => "conv2d",
            Primitive::Deconv2d => "deconv2d",
            Primitive::TemporalConv => "temporal_conv",
            Primitive::TemporalDeconv => "temporal_deconv",
            Primitive::PerLocationLinear => "per_location_linear",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Bce => "bce",
            Primitive::Mse => "mse",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    fn is_loss(self) -> bool {
        matches!(self, Primitive::Bce | Primitive::Mse)
    }
}

/// Working precision of a check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    /// Finite-difference step.
    pub fn step(self) -> f64 {
        match self {
            Precision::F32 => 1e-4,
            Precision::F64 => 1e-6,
        }
    }

    /// Largest accepted relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub primitive: Primitive,
    pub precision: Precision,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} gradcheck {} [{}]: {} instances, max rel err {:.3e} (tol {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.primitive.name(),
            self.precision.name(),
            self.instances,
            self.max_rel_error,
            self.precision.tolerance()
        )
    }
}

/// Random inputs for one instance, stored in `f64`.
struct Instance {
    prim: Primitive,
    inputs: Vec<Tensor<f64>>,
    /// Indices of `inputs` whose gradient is checked.
    checked: Vec<usize>,
    /// `(kernel, stride, padding)` for convolution-like primitives.
    geom: (usize, usize, usize),
    head_target: Option<Tensor<f64>>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

const GEOMETRIES: [(usize, usize, usize); 4] = [(4, 2, 1), (3, 1, 0), (2, 1, 0), (3, 2, 1)];

impl Instance {
    fn draw(prim: Primitive, rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(1..=2);
        let ci = rng.gen_range(1..=3);
        let co = rng.gen_range(1..=3);
        let geom = GEOMETRIES[rng.gen_range(0..GEOMETRIES.len())];
        let (k, ..) = geom;
        let (inputs, checked) = match prim {
            Primitive::Conv2d => (
                vec![
                    uniform(rng, &[n, ci, 6, 5], -1.0, 1.0),
                    uniform(rng, &[co, ci, k, k], -1.0, 1.0),
                    uniform(rng, &[co], -1.0, 1.0),
                ],
                vec![0, 1, 2],
            ),
            Primitive::Deconv2d => (
                vec![
                    uniform(rng, &[n, ci, 3, 4], -1.0, 1.0),
                    uniform(rng, &[ci, co, k, k], -1.0, 1.0),
                    uniform(rng, &[co], -1.0, 1.0),
                ],
                vec![0, 1, 2],
            ),
            Primitive::TemporalConv => (
                vec![
                    uniform(rng, &[n, ci, 8, 2, 3], -1.0, 1.0),
                    uniform(rng, &[co, ci, k], -1.0, 1.0),
                    uniform(rng, &[co], -1.0, 1.0),
                ],
                vec![0, 1, 2],
            ),
            Primitive::TemporalDeconv => (
                vec![
                    uniform(rng, &[n, ci, 4, 3, 2], -1.0, 1.0),
                    uniform(rng, &[ci, co, k], -1.0, 1.0),
                    uniform(rng, &[co], -1.0, 1.0),
                ],
                vec![0, 1, 2],
            ),
            Primitive::PerLocationLinear => (
                vec![
                    uniform(rng, &[n, ci, 3, 4], -1.0, 1.0),
                    uniform(rng, &[co, ci], -1.0, 1.0),
                    uniform(rng, &[co], -1.0, 1.0),
                ],
                vec![0, 1, 2],
            ),
            Primitive::Relu => {
                // keep clear of the kink at 0
                let x = Tensor::from_fn(vec![n, ci, 4, 4], |_| {
                    let m = rng.gen_range(0.05..1.0);
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                });
                (vec![x], vec![0])
            }
            Primitive::Sigmoid => (vec![uniform(rng, &[n, ci, 4, 4], -4.0, 4.0)], vec![0]),
            Primitive::Bce => (
                vec![
                    uniform(rng, &[n, ci, 4, 4], 0.05, 0.95),
                    uniform(rng, &[n, ci, 4, 4], 0.0, 1.0),
                ],
                vec![0],
            ),
            Primitive::Mse => (
                vec![
                    uniform(rng, &[n, ci, 4, 4], -1.0, 1.0),
                    uniform(rng, &[n, ci, 4, 4], -1.0, 1.0),
                ],
                vec![0, 1],
            ),
        };
        let mut inst = Instance {
            prim,
            inputs,
            checked,
            geom,
            head_target: None,
        };
        if !prim.is_loss() {
            let shape = inst
                .output::<f64>(&inst.inputs.clone())
                .expect("instances are drawn with valid shapes")
                .shape()
                .to_vec();
            inst.head_target = Some(uniform(rng, &shape, -1.0, 1.0));
        }
        inst
    }

    fn apply<E: Scalar>(&self, g: &mut Graph<E>, v: &[Var]) -> Result<Var> {
        let (k, s, p) = self.geom;
        match self.prim {
            Primitive::Conv2d => g.conv2d(v[0], v[1], v[2], ConvGeometry::square(k, s, p)),
            Primitive::Deconv2d => g.deconv2d(v[0], v[1], v[2], ConvGeometry::square(k, s, p)),
            Primitive::TemporalConv => g.temporal_conv(v[0], v[1], v[2], k, s, p),
            Primitive::TemporalDeconv => g.temporal_deconv(v[0], v[1], v[2], k, s, p),
            Primitive::PerLocationLinear => g.per_location_linear(v[0], v[1], v[2]),
            Primitive::Relu => Ok(g.relu(v[0])),
            Primitive::Sigmoid => Ok(g.sigmoid(v[0])),
            Primitive::Bce => g.bce_loss(v[0], v[1]),
            Primitive::Mse => g.mse_loss(v[0], v[1]),
        }
    }

    /// Primitive output for inputs given in working precision.
    fn output<E: Scalar>(&self, inputs: &[Tensor<E>]) -> Result<Tensor<E>> {
        let mut g = Graph::<E>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = self.apply(&mut g, &vars)?;
        Ok(g.value(y).clone())
    }

    /// Scalar objective: the primitive's output reduced by the head.
    fn objective<E: Scalar>(&self, inputs: &[Tensor<E>]) -> Result<f64> {
        let y = self.output(inputs)?;
        let f = |v: E| v.to_f64().unwrap_or(f64::NAN);
        Ok(match &self.head_target {
            None => f(y.data()[0]),
            Some(t) => {
                y.data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| (f(a) - b).powi(2))
                    .sum::<f64>()
                    / y.len() as f64
            }
        })
    }

    fn objective_f64<E: Scalar>(&self, inputs: &[Tensor<E>]) -> Result<f64> {
        let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
        self.objective(&wide)
    }

    fn analytic<E: Scalar>(&self, inputs: &[Tensor<E>]) -> Result<Vec<Tensor<E>>> {
        let mut g = Graph::<E>::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if self.checked.contains(&i) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let y = self.apply(&mut g, &vars)?;
        let loss = match &self.head_target {
            None => y,
            Some(t) => {
                let t = g.constant(t.cast());
                g.mse_loss(y, t)?
            }
        };
        let grads = g.backward(loss)?;
        Ok(self.checked.iter().map(|&i| grads.wrt(vars[i])).collect())
    }

    /// Relative error between tape and finite-difference gradients.
    /// `fault` is added to the first analytic entry to simulate a broken
    /// backward pass.
    fn rel_error<E: Scalar>(&self, h: f64, fault: Option<f64>) -> Result<f64> {
        let mut inputs: Vec<Tensor<E>> = self.inputs.iter().map(|t| t.cast()).collect();
        let analytic = self.analytic(&inputs)?;
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        let mut first = true;
        for (slot, &i) in self.checked.iter().enumerate() {
            for j in 0..inputs[i].len() {
                let x = inputs[i].data()[j];
                let plus = x + E::from_f64_lossy(h);
                let minus = x - E::from_f64_lossy(h);
                inputs[i].data_mut()[j] = plus;
                let fp = self.objective_f64(&inputs)?;
                inputs[i].data_mut()[j] = minus;
                let fm = self.objective_f64(&inputs)?;
                inputs[i].data_mut()[j] = x;
                let step = (plus - minus).to_f64().unwrap_or(f64::NAN);
                let numeric = (fp - fm) / step;
                let mut a = analytic[slot].data()[j].to_f64().unwrap_or(f64::NAN);
                if first {
                    a += fault.unwrap_or(0.0);
                    first = false;
                }
                diff2 += (a - numeric).powi(2);
                a2 += a * a;
                n2 += numeric * numeric;
            }
        }
        let scale = a2.sqrt().max(n2.sqrt());
        Ok(if scale == 0.0 { diff2.sqrt() } else { diff2.sqrt() / scale })
    }
}

/// Checks one primitive on `instances` random cases drawn from `seed`.
/// `fault` corrupts each analytic gradient by the given offset.
pub fn check_primitive(
    prim: Primitive,
    precision: Precision,
    instances: usize,
    seed: u64,
    fault: Option<f64>,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(Primitive::ALL.iter().position(|&p| p == prim).unwrap_or(0) as u64);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let inst = Instance::draw(prim, &mut rng);
        let err = match precision {
            Precision::F32 => inst.rel_error::<f32>(precision.step(), fault)?,
            Precision::F64 => inst.rel_error::<f64>(precision.step(), fault)?,
        };
        // NaN must fail
        worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
    }
    Ok(CheckReport {
        primitive: prim,
        precision,
        instances,
        max_rel_error: worst,
        passed: worst < precision.tolerance(),
    })
}

/// Every primitive in both precisions. `faulty` names a primitive whose
/// analytic gradient is deliberately corrupted.
pub fn check_all(instances: usize, seed: u64, faulty: Option<Primitive>) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for precision in [Precision::F32, Precision::F64] {
        for prim in Primitive::ALL {
            let fault = (faulty == Some(prim)).then_some(0.5);
            out.push(check_primitive(prim, precision, instances, seed, fault)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in Primitive::ALL {
            assert_eq!(Primitive::from_name(p.name()), Some(p));
        }
        assert_eq!(Primitive::from_name("softmax"), None);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let r = check_primitive(Primitive::Sigmoid, Precision::F64, 3, 1, Some(0.5)).unwrap();
        assert!(!r.passed, "{r}");
        assert!(r.to_string().starts_with("FAIL"));
    }
}
