//! ArcFace additive angular margin head and softmax cross-entropy.
//!
//! Embeddings and class weights are unit-normalized; the target logit is
//! `s * cos(theta_y + m)`, every other logit `s * cos(theta_j)`. Once
//! `theta_y + m` would pass pi the target logit falls back to
//! `s * (cos theta_y - m * sin m)`, which keeps it monotone in the angle.

use crate::error::{Error, Result};
use crate::params::Initializer;
use crate::tensor::{Element, Shape, Tensor};

pub const DEFAULT_MARGIN: f64 = 0.5;
pub const DEFAULT_SCALE: f64 = 64.0;
/// Cosines entering the margin derivative are clamped to
/// `[-1 + COS_CLAMP, 1 - COS_CLAMP]`.
pub const COS_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct ArcFaceHead<T = f32> {
    /// Class weights, shape `(classes, dim, 1, 1)`.
    pub weight: Tensor<T>,
    pub margin: f64,
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct ArcFaceGrads<T> {
    pub loss: T,
    pub logits: Tensor<T>,
    /// Same shape as the embeddings passed in.
    pub embeddings: Tensor<T>,
    pub weight: Tensor<T>,
}

impl<T: Element> ArcFaceHead<T> {
    pub fn new(weight: Tensor<T>, margin: f64, scale: f64) -> Result<Self> {
        if !(0.0..std::f64::consts::PI).contains(&margin) {
            return Err(Error::Invalid(format!("margin {margin} outside [0, pi)")));
        }
        if !(scale > 0.0) {
            return Err(Error::Invalid(format!("scale {scale} must be positive")));
        }
        let s = weight.shape();
        if s.h != 1 || s.w != 1 || s.n == 0 || s.c == 0 {
            return Err(Error::Shape(format!("class weights must be (classes, dim, 1, 1), got {s}")));
        }
        Ok(ArcFaceHead { weight, margin, scale })
    }

    /// Gaussian class weights with the default margin and scale.
    pub fn init(classes: usize, dim: usize, init: &mut Initializer) -> Self {
        let weight = init.normal(Shape::new(classes, dim, 1, 1), 0.01);
        ArcFaceHead::new(weight, DEFAULT_MARGIN, DEFAULT_SCALE).expect("default hyperparameters are valid")
    }

    pub fn classes(&self) -> usize {
        self.weight.shape().n
    }

    pub fn dim(&self) -> usize {
        self.weight.shape().c
    }
}

struct Normalized<T> {
    unit: Vec<T>,
    norms: Vec<T>,
}

fn normalize_rows<T: Element>(data: &[T], dim: usize, what: &str) -> Result<Normalized<T>> {
    let mut unit = Vec::with_capacity(data.len());
    let mut norms = Vec::with_capacity(data.len() / dim);
    for (i, row) in data.chunks(dim).enumerate() {
        let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        if n == T::zero() || !n.is_finite() {
            return Err(Error::Invalid(format!("{what} {i} has zero or non-finite norm")));
        }
        unit.extend(row.iter().map(|&v| v / n));
        norms.push(n);
    }
    Ok(Normalized { unit, norms })
}

fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

struct Forward<T> {
    emb: Normalized<T>,
    cls: Normalized<T>,
    cos: Vec<T>,
    logits: Tensor<T>,
}

fn check_inputs<T: Element>(emb: &Tensor<T>, labels: &[usize], head: &ArcFaceHead<T>) -> Result<(usize, usize)> {
    let s = emb.shape();
    let n = s.n;
    let d = s.c * s.h * s.w;
    if d != head.dim() {
        return Err(Error::Shape(format!(
            "embedding dimension {d} does not match head dimension {}",
            head.dim()
        )));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= head.classes()) {
        return Err(Error::Invalid(format!(
            "label {l} of sample {i} outside [0, {})",
            head.classes()
        )));
    }
    Ok((n, d))
}

/// Target logit as a function of the cosine, with its derivative. The
/// value uses the exact cosine; the derivative uses the clamped one so it
/// stays bounded at parallel and antiparallel vectors.
fn margin_logit<T: Element>(cos: T, margin: f64, scale: f64) -> (T, T) {
    let c = cos.to_f64c().clamp(-1.0, 1.0);
    let cc = c.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP);
    let (sm, cm) = margin.sin_cos();
    let (value, slope) = if c > (std::f64::consts::PI - margin).cos() {
        let sin = (1.0 - c * c).sqrt();
        let sin_c = (1.0 - cc * cc).sqrt();
        (c * cm - sin * sm, cm + cc * sm / sin_c)
    } else {
        (c - margin * sm, 1.0)
    };
    (T::from_f64c(scale * value), T::from_f64c(scale * slope))
}

fn forward<T: Element>(emb: &Tensor<T>, labels: &[usize], head: &ArcFaceHead<T>) -> Result<Forward<T>> {
    let (n, d) = check_inputs(emb, labels, head)?;
    let classes = head.classes();
    let e = normalize_rows(emb.data(), d, "embedding")?;
    let w = normalize_rows(head.weight.data(), d, "class weight")?;
    let s = T::from_f64c(head.scale);
    let mut cos = Vec::with_capacity(n * classes);
    let mut logits = Vec::with_capacity(n * classes);
    for i in 0..n {
        let u = &e.unit[i * d..(i + 1) * d];
        for j in 0..classes {
            let c = dot(u, &w.unit[j * d..(j + 1) * d]);
            cos.push(c);
            logits.push(if j == labels[i] {
                margin_logit(c, head.margin, head.scale).0
            } else {
                s * c
            });
        }
    }
    Ok(Forward {
        emb: e,
        cls: w,
        cos,
        logits: Tensor::from_vec((n, classes, 1, 1), logits)?,
    })
}

/// `(n, classes, 1, 1)` logits for embeddings of any `(n, d, ...)` shape.
pub fn arcface_logits<T: Element>(emb: &Tensor<T>, labels: &[usize], head: &ArcFaceHead<T>) -> Result<Tensor<T>> {
    Ok(forward(emb, labels, head)?.logits)
}

fn log_softmax_row<T: Element>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().fold(T::zero(), |a, &z| a + (z - max).exp()).ln() + max;
    row.iter().map(|&z| z - lse).collect()
}

/// Mean softmax cross-entropy over the batch.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> T {
    let classes = logits.shape().c;
    let n = logits.shape().n;
    let total = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .fold(T::zero(), |a, (row, &y)| a - log_softmax_row(row)[y]);
    total / T::from_usize(n).unwrap()
}

/// Loss and gradients with respect to the raw embeddings and class weights.
pub fn arcface_backward<T: Element>(
    emb: &Tensor<T>,
    labels: &[usize],
    head: &ArcFaceHead<T>,
) -> Result<ArcFaceGrads<T>> {
    let f = forward(emb, labels, head)?;
    let (n, classes, d) = (labels.len(), head.classes(), head.dim());
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let s = T::from_f64c(head.scale);
    let mut loss = T::zero();
    // dL/dcos
    let mut gcos = vec![T::zero(); n * classes];
    for i in 0..n {
        let row = &f.logits.data()[i * classes..(i + 1) * classes];
        let logp = log_softmax_row(row);
        loss = loss - logp[labels[i]];
        for j in 0..classes {
            let mut gz = logp[j].exp();
            if j == labels[i] {
                gz = gz - T::one();
            }
            gz = gz * inv_n;
            let slope = if j == labels[i] {
                margin_logit(f.cos[i * classes + j], head.margin, head.scale).1
            } else {
                s
            };
            gcos[i * classes + j] = gz * slope;
        }
    }
    loss = loss * inv_n;

    let mut g_emb = vec![T::zero(); n * d];
    for i in 0..n {
        let u = &f.emb.unit[i * d..(i + 1) * d];
        let mut gu = vec![T::zero(); d];
        for j in 0..classes {
            let g = gcos[i * classes + j];
            for (a, &v) in gu.iter_mut().zip(&f.cls.unit[j * d..(j + 1) * d]) {
                *a = *a + g * v;
            }
        }
        let proj = dot(&gu, u);
        let inv = T::one() / f.emb.norms[i];
        for k in 0..d {
            g_emb[i * d + k] = (gu[k] - proj * u[k]) * inv;
        }
    }
    let mut g_w = vec![T::zero(); classes * d];
    for j in 0..classes {
        let v = &f.cls.unit[j * d..(j + 1) * d];
        let mut gv = vec![T::zero(); d];
        for i in 0..n {
            let g = gcos[i * classes + j];
            for (a, &x) in gv.iter_mut().zip(&f.emb.unit[i * d..(i + 1) * d]) {
                *a = *a + g * x;
            }
        }
        let proj = dot(&gv, v);
        let inv = T::one() / f.cls.norms[j];
        for k in 0..d {
            g_w[j * d + k] = (gv[k] - proj * v[k]) * inv;
        }
    }
    Ok(ArcFaceGrads {
        loss,
        logits: f.logits,
        embeddings: Tensor::from_vec(emb.shape(), g_emb)?,
        weight: Tensor::from_vec(head.weight.shape(), g_w)?,
    })
}

/// Index of the largest plain cosine per row (no margin applied).
pub fn predict<T: Element>(emb: &Tensor<T>, head: &ArcFaceHead<T>) -> Result<Vec<usize>> {
    let labels = vec![0; emb.shape().n];
    let f = forward(emb, &labels, head)?;
    Ok(f.cos
        .chunks(head.classes())
        .map(|row| {
            let mut best = 0;
            for (j, &c) in row.iter().enumerate() {
                if c > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
