//! Central finite-difference checks of every differentiable primitive and of
//! the ArcFace head.
//!
//! Each primitive case is reduced to the scalar `L = sum(r * f(inputs))` for
//! a fixed random `r`; the analytic gradient of `L` from the tape is compared
//! with `(L(x + h) - L(x - h)) / 2h` element by element. The reported error
//! of one input is `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)`.

use std::fmt;

use crate::arcface::{self, ArcFaceHead};
use crate::autograd::{Graph, Var};
use crate::blocks::{mixconv_var, se_var, MixConvSpec};
use crate::error::Result;
use crate::ops::{BnMode, ConvParams};
use crate::params::Initializer;
use crate::tensor::{Element, Shape, Tensor};

pub const F64_TOLERANCE: f64 = 1e-6;
pub const F64_STEP: f64 = 1e-4;
pub const F32_TOLERANCE: f64 = 1e-3;
pub const F32_STEP: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub precision: &'static str,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.rel_error <= self.tolerance
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} {:>4}  rel {:.3e}  (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.precision,
            self.rel_error,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checks: Vec<CheckOutcome>,
}

impl GradReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }

    pub fn worst(&self, precision: &str) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.precision == precision)
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }
}

/// Norm-wise relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

type CaseFn<T> = Box<dyn Fn(&Graph<T>, &[Var<T>]) -> Result<Var<T>>>;

/// A differentiable function of some tensors.
pub struct Case<T: Element> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<T>>,
    pub f: CaseFn<T>,
}

fn precision_name<T: Element>() -> &'static str {
    if std::mem::size_of::<T>() == 8 {
        "f64"
    } else {
        "f32"
    }
}

fn projected<T: Element>(out: &Tensor<T>, r: &[f64]) -> f64 {
    out.data().iter().zip(r).map(|(&v, &w)| v.to_f64c() * w).sum()
}

/// Central-difference gradient of a scalar function of `x`. The realized
/// step `(x + h) - (x - h)` is used so rounding of the perturbed value in
/// low precision does not bias the quotient.
pub fn numeric_gradient<T: Element>(x: &Tensor<T>, step: f64, mut loss: impl FnMut(&Tensor<T>) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let h = T::from_f64c(step);
    let mut out = Vec::with_capacity(x.numel());
    for j in 0..x.numel() {
        let v = x.data()[j];
        let (hi, lo) = (v + h, v - h);
        probe.data_mut()[j] = hi;
        let lp = loss(&probe)?;
        probe.data_mut()[j] = lo;
        let lm = loss(&probe)?;
        probe.data_mut()[j] = v;
        out.push((lp - lm) / (hi.to_f64c() - lo.to_f64c()));
    }
    Ok(out)
}

/// Worst relative error over the inputs of `case`.
pub fn check_case<T: Element>(case: &Case<T>, step: f64, init: &mut Initializer) -> Result<f64> {
    let graph = Graph::new();
    let vars: Vec<Var<T>> = case.inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let out = (case.f)(&graph, &vars)?;
    let r: Tensor<f64> = init.normal(out.shape(), 1.0);
    let grads = graph.backward_with(&out, r.cast())?;
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads.get_or_zeros(var).data().iter().map(|v| v.to_f64c()).collect();
        let numeric = numeric_gradient(&case.inputs[i], step, |probe| {
            let g = Graph::inference();
            let args: Vec<Var<T>> = case
                .inputs
                .iter()
                .enumerate()
                .map(|(k, t)| g.constant(if k == i { probe.clone() } else { t.clone() }))
                .collect();
            Ok(projected((case.f)(&g, &args)?.value(), r.data()))
        })?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn randn<T: Element>(init: &mut Initializer, shape: impl Into<Shape>) -> Tensor<T> {
    init.normal::<f64>(shape.into(), 1.0).cast()
}

/// Values kept at least `gap` away from zero, so the PReLU kink is never
/// straddled by a finite-difference step.
fn away_from_zero<T: Element>(init: &mut Initializer, shape: impl Into<Shape>, gap: f64) -> Tensor<T> {
    let t: Tensor<f64> = init.normal(shape.into(), 1.0);
    t.map(|v| if v.abs() < gap { v.signum() * gap + v } else { v }).cast()
}

/// Every differentiable primitive and the composite blocks built from them.
pub fn primitive_cases<T: Element>(init: &mut Initializer) -> Vec<Case<T>> {
    let mut cases: Vec<Case<T>> = Vec::new();
    cases.push(Case {
        name: "conv2d 3x3 dense + bias",
        inputs: vec![randn(init, (2, 3, 5, 5)), randn(init, (4, 3, 3, 3)), randn(init, (1, 4, 1, 1))],
        f: Box::new(|g, v| g.conv2d(&v[0], &v[1], Some(&v[2]), ConvParams::new(3, 1, 1, 1))),
    });
    cases.push(Case {
        name: "conv2d grouped stride 2",
        inputs: vec![randn(init, (1, 4, 6, 6)), randn(init, (6, 2, 3, 3))],
        f: Box::new(|g, v| g.conv2d(&v[0], &v[1], None, ConvParams::new(3, 2, 1, 2))),
    });
    cases.push(Case {
        name: "conv2d depthwise 5x5",
        inputs: vec![randn(init, (1, 3, 5, 5)), randn(init, (3, 1, 5, 5))],
        f: Box::new(|g, v| g.conv2d(&v[0], &v[1], None, ConvParams::new(5, 1, 2, 3))),
    });
    cases.push(Case {
        name: "conv2d pointwise",
        inputs: vec![randn(init, (2, 4, 3, 3)), randn(init, (3, 4, 1, 1))],
        f: Box::new(|g, v| g.conv2d(&v[0], &v[1], None, ConvParams::pointwise(1))),
    });
    cases.push(Case {
        name: "batch_norm train",
        inputs: vec![randn(init, (3, 2, 3, 3)), randn(init, (1, 2, 1, 1)), randn(init, (1, 2, 1, 1))],
        f: Box::new(|g, v| {
            let c = v[0].shape().c;
            let (m, s) = (Tensor::zeros((1, c, 1, 1)), Tensor::full((1, c, 1, 1), T::one()));
            Ok(g.batch_norm(&v[0], &v[1], &v[2], &m, &s, T::from_f64c(1e-5), BnMode::Train)?.0)
        }),
    });
    let rm: Tensor<T> = randn(init, (1, 3, 1, 1));
    let rv: Tensor<T> = init.uniform::<f64>(Shape::new(1, 3, 1, 1), 0.5, 2.0).cast();
    cases.push(Case {
        name: "batch_norm infer",
        inputs: vec![randn(init, (2, 3, 2, 2)), randn(init, (1, 3, 1, 1)), randn(init, (1, 3, 1, 1))],
        f: Box::new(move |g, v| Ok(g.batch_norm(&v[0], &v[1], &v[2], &rm, &rv, T::from_f64c(1e-5), BnMode::Infer)?.0)),
    });
    cases.push(Case {
        name: "prelu",
        inputs: vec![away_from_zero(init, (2, 3, 3, 3), 0.05), randn(init, (1, 3, 1, 1))],
        f: Box::new(|g, v| g.prelu(&v[0], &v[1])),
    });
    cases.push(Case {
        name: "swish",
        inputs: vec![randn::<T>(init, (2, 3, 3, 3)).scale(T::from_f64c(3.0))],
        f: Box::new(|g, v| Ok(g.swish(&v[0]))),
    });
    cases.push(Case {
        name: "sigmoid",
        inputs: vec![randn::<T>(init, (2, 3, 3, 3)).scale(T::from_f64c(3.0))],
        f: Box::new(|g, v| Ok(g.sigmoid(&v[0]))),
    });
    cases.push(Case {
        name: "global_avg_pool",
        inputs: vec![randn(init, (2, 3, 4, 3))],
        f: Box::new(|g, v| g.global_avg_pool(&v[0])),
    });
    cases.push(Case {
        name: "add",
        inputs: vec![randn(init, (2, 3, 2, 2)), randn(init, (2, 3, 2, 2))],
        f: Box::new(|g, v| g.add(&v[0], &v[1])),
    });
    cases.push(Case {
        name: "scale_channels",
        inputs: vec![randn(init, (2, 3, 3, 3)), randn(init, (2, 3, 1, 1))],
        f: Box::new(|g, v| g.scale_channels(&v[0], &v[1])),
    });
    cases.push(Case {
        name: "channel_shuffle",
        inputs: vec![randn(init, (2, 6, 2, 2))],
        f: Box::new(|g, v| g.channel_shuffle(&v[0], 2)),
    });
    cases.push(Case {
        name: "slice + concat",
        inputs: vec![randn(init, (2, 5, 2, 2))],
        f: Box::new(|g, v| {
            let a = g.slice_channels(&v[0], 0, 2)?;
            let b = g.slice_channels(&v[0], 2, 3)?;
            let b = g.swish(&b);
            g.concat_channels(&[b, a])
        }),
    });
    cases.push(Case {
        name: "mixconv 3/5/7",
        inputs: vec![
            randn(init, (1, 7, 7, 7)),
            randn(init, (3, 1, 3, 3)),
            randn(init, (2, 1, 5, 5)),
            randn(init, (2, 1, 7, 7)),
        ],
        f: Box::new(|g, v| {
            let spec = MixConvSpec::new(vec![3, 5, 7], 1, 7)?;
            mixconv_var(g, &v[0], &[&v[1], &v[2], &v[3]], &spec)
        }),
    });
    cases.push(Case {
        name: "squeeze-excite swish",
        inputs: vec![
            randn(init, (2, 4, 3, 3)),
            randn(init, (2, 4, 1, 1)),
            randn(init, (1, 2, 1, 1)),
            randn(init, (4, 2, 1, 1)),
            randn(init, (1, 4, 1, 1)),
        ],
        f: Box::new(|g, v| se_var(g, &v[0], (&v[1], &v[2]), (&v[3], &v[4]), None)),
    });
    cases.push(Case {
        name: "squeeze-excite prelu",
        inputs: vec![
            randn(init, (1, 4, 3, 3)),
            randn(init, (2, 4, 1, 1)),
            away_from_zero(init, (1, 2, 1, 1), 0.5),
            randn(init, (4, 2, 1, 1)),
            randn(init, (1, 4, 1, 1)),
            randn(init, (1, 2, 1, 1)),
        ],
        f: Box::new(|g, v| se_var(g, &v[0], (&v[1], &v[2]), (&v[3], &v[4]), Some(&v[5]))),
    });
    cases
}

/// Relative error of the ArcFace head gradients (embeddings and weights)
/// on a random `(n, d, classes)` instance.
pub fn check_arcface<T: Element>(
    init: &mut Initializer,
    (n, d, classes): (usize, usize, usize),
    margin: f64,
    scale: f64,
    step: f64,
) -> Result<f64> {
    let emb: Tensor<T> = randn(init, (n, d, 1, 1));
    let w: Tensor<T> = randn(init, (classes, d, 1, 1));
    let labels: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % classes).collect();
    let head = ArcFaceHead::new(w.clone(), margin, scale)?;
    let grads = arcface::arcface_backward(&emb, &labels, &head)?;
    let loss_of = |e: &Tensor<T>, h: &ArcFaceHead<T>| -> Result<f64> {
        Ok(arcface::cross_entropy(&arcface::arcface_logits(e, &labels, h)?, &labels).to_f64c())
    };
    let ne = numeric_gradient(&emb, step, |e| loss_of(e, &head))?;
    let nw = numeric_gradient(&w, step, |w| loss_of(&emb, &ArcFaceHead::new(w.clone(), margin, scale)?))?;
    let to64 = |t: &Tensor<T>| t.data().iter().map(|v| v.to_f64c()).collect::<Vec<_>>();
    Ok(relative_error(&to64(&grads.embeddings), &ne).max(relative_error(&to64(&grads.weight), &nw)))
}

fn suite<T: Element>(seed: u64, step: f64, tolerance: f64, report: &mut GradReport) -> Result<()> {
    let mut init = Initializer::new(seed);
    let precision = precision_name::<T>();
    for case in primitive_cases::<T>(&mut init) {
        let rel_error = check_case(&case, step, &mut init)?;
        report.checks.push(CheckOutcome {
            name: case.name.to_string(),
            precision,
            rel_error,
            tolerance,
        });
    }

    // d/dx swish at x = 1 against sigma(1) + sigma(1)(1 - sigma(1))
    let g = Graph::<T>::new();
    let x = g.leaf(Tensor::scalar(T::one()));
    let y = g.swish(&x);
    let s = g.sum(&y);
    let grad = g.backward(&s, T::one())?.get_or_zeros(&x).data()[0].to_f64c();
    let sig = 1.0 / (1.0 + (-1.0f64).exp());
    let expected = sig + sig * (1.0 - sig);
    report.checks.push(CheckOutcome {
        name: "swish'(1) closed form".into(),
        precision,
        rel_error: (grad - expected).abs() / expected,
        tolerance,
    });

    // all-ones depthwise 3x3 without padding
    let ones = Case::<T> {
        name: "depthwise all-ones p0",
        inputs: vec![randn(&mut init, (1, 2, 6, 6))],
        f: Box::new(|g, v| {
            let w = g.constant(Tensor::full((2, 1, 3, 3), T::one()));
            let y = g.conv2d(&v[0], &w, None, ConvParams::new(3, 1, 0, 2))?;
            Ok(g.sum(&y))
        }),
    };
    report.checks.push(CheckOutcome {
        name: ones.name.into(),
        precision,
        rel_error: check_case(&ones, step, &mut init)?,
        tolerance,
    });

    for (name, dims, margin, scale) in [
        ("arcface m=0.5 s=64", (4, 8, 5), arcface::DEFAULT_MARGIN, arcface::DEFAULT_SCALE),
        ("arcface m=0.3 s=4", (6, 5, 3), 0.3, 4.0),
    ] {
        report.checks.push(CheckOutcome {
            name: name.into(),
            precision,
            rel_error: check_arcface::<T>(&mut init, dims, margin, scale, step)?,
            tolerance,
        });
    }
    Ok(())
}

/// The full suite in 64-bit and 32-bit precision.
pub fn run(seed: u64) -> Result<GradReport> {
    let mut report = GradReport::default();
    suite::<f64>(seed, F64_STEP, F64_TOLERANCE, &mut report)?;
    suite::<f32>(seed, F32_STEP, F32_TOLERANCE, &mut report)?;
    Ok(report)
}

/// Only the 64-bit half of the suite.
pub fn run_f64(seed: u64) -> Result<GradReport> {
    let mut report = GradReport::default();
    suite::<f64>(seed, F64_STEP, F64_TOLERANCE, &mut report)?;
    Ok(report)
}
