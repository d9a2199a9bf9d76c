//! Per-channel batch normalization.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

pub struct BnParams<'a, T> {
    pub gamma: &'a Tensor<T>,
    pub beta: &'a Tensor<T>,
    pub running_mean: &'a Tensor<T>,
    pub running_var: &'a Tensor<T>,
    pub eps: T,
}

/// Everything the backward pass and the running-stat update need.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub mean: Vec<T>,
    /// Biased batch variance in train mode; the running variance in infer mode.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
}

fn check_params<T: Element>(c: usize, p: &BnParams<'_, T>) -> Result<()> {
    for (name, t) in [
        ("gamma", p.gamma),
        ("beta", p.beta),
        ("running_mean", p.running_mean),
        ("running_var", p.running_var),
    ] {
        if t.numel() != c {
            return Err(Error::Shape(format!(
                "batch_norm {name} has {} entries for {c} channels",
                t.numel()
            )));
        }
    }
    Ok(())
}

pub fn batch_norm<T: Element>(
    input: &Tensor<T>,
    params: &BnParams<'_, T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let s = input.shape();
    check_params(s.c, params)?;
    let plane = s.plane();
    let count = s.n * plane;
    let (mean, var) = match mode {
        BnMode::Infer => (
            params.running_mean.data().to_vec(),
            params.running_var.data().to_vec(),
        ),
        BnMode::Train => {
            if count == 0 {
                return Err(Error::Shape("batch_norm over an empty batch".into()));
            }
            let inv_count = T::one() / T::from_usize(count).unwrap();
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            for c in 0..s.c {
                let mut acc = T::zero();
                for n in 0..s.n {
                    acc = input.plane(n, c).iter().fold(acc, |a, &v| a + v);
                }
                let m = acc * inv_count;
                let mut sq = T::zero();
                for n in 0..s.n {
                    sq = input.plane(n, c).iter().fold(sq, |a, &v| a + (v - m) * (v - m));
                }
                mean[c] = m;
                var[c] = sq * inv_count;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + params.eps).sqrt()).collect();
    let g = params.gamma.data();
    let b = params.beta.data();
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
        let c = i % s.c;
        let scale = g[c] * inv_std[c];
        let m = mean[c];
        // (x - mean) * scale + beta keeps identity parameters exact.
        for v in chunk.iter_mut() {
            *v = (*v - m) * scale + b[c];
        }
    }
    Ok((
        out,
        BnSaved {
            mean,
            var,
            inv_std,
            mode,
        },
    ))
}

/// Running-stat update `r = momentum * r + (1 - momentum) * batch`, using
/// the unbiased batch variance.
pub fn update_running_stats<T: Element>(
    saved: &BnSaved<T>,
    count: usize,
    momentum: T,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
) {
    let unbias = if count > 1 {
        T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
    } else {
        T::one()
    };
    let keep = T::one() - momentum;
    for (r, &m) in running_mean.data_mut().iter_mut().zip(&saved.mean) {
        *r = momentum * *r + keep * m;
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(&saved.var) {
        *r = momentum * *r + keep * v * unbias;
    }
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batch_norm_backward<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let s = input.shape();
    grad_out.expect_shape(s, "batch_norm output gradient")?;
    let plane = s.plane();
    let count = T::from_usize(s.n * plane).unwrap();
    let g = gamma.data();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            let x = input.plane(n, c);
            let dy = grad_out.plane(n, c);
            for (&xv, &dv) in x.iter().zip(dy) {
                dbeta[c] = dbeta[c] + dv;
                dgamma[c] = dgamma[c] + dv * (xv - saved.mean[c]) * saved.inv_std[c];
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    let out = dx.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let x = input.plane(n, c);
            let dy = grad_out.plane(n, c);
            let k = g[c] * saved.inv_std[c];
            match saved.mode {
                BnMode::Infer => {
                    for i in 0..plane {
                        out[base + i] = dy[i] * k;
                    }
                }
                BnMode::Train => {
                    let mean_dy = dbeta[c] / count;
                    let mean_dy_xhat = dgamma[c] / count;
                    for i in 0..plane {
                        let xhat = (x[i] - saved.mean[c]) * saved.inv_std[c];
                        out[base + i] = k * (dy[i] - mean_dy - xhat * mean_dy_xhat);
                    }
                }
            }
        }
    }
    Ok(BnGrads {
        input: dx,
        gamma: Tensor::vector(dgamma),
        beta: Tensor::vector(dbeta),
    })
}
