//! Elementwise non-linearities.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[inline]
pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// Gradient of `sigmoid` given its output.
pub fn sigmoid_backward<T: Element>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.zip_map(grad_out, |s, g| g * s * (T::one() - s))
}

/// `x * sigmoid(x)`.
pub fn swish<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x * sigmoid_scalar(x))
}

pub fn swish_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| {
        let s = sigmoid_scalar(x);
        g * (s + x * s * (T::one() - s))
    })
}

fn check_alpha<T: Element>(input: &Tensor<T>, alpha: &Tensor<T>) -> Result<()> {
    if alpha.numel() != input.shape().c {
        return Err(Error::Shape(format!(
            "prelu alpha has {} entries for {} channels",
            alpha.numel(),
            input.shape().c
        )));
    }
    Ok(())
}

/// Channel-wise parametric ReLU: `x` for `x >= 0`, `alpha_c * x` otherwise.
pub fn prelu<T: Element>(input: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
    check_alpha(input, alpha)?;
    let s = input.shape();
    let plane = s.plane().max(1);
    let a = alpha.data();
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ac = a[i % s.c];
        for v in chunk.iter_mut() {
            if *v < T::zero() {
                *v = *v * ac;
            }
        }
    }
    Ok(out)
}

pub fn prelu_backward<T: Element>(
    input: &Tensor<T>,
    alpha: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_alpha(input, alpha)?;
    grad_out.expect_shape(input.shape(), "prelu output gradient")?;
    let s = input.shape();
    let a = alpha.data();
    let mut dx = Tensor::zeros(s);
    let mut da = vec![T::zero(); s.c];
    let x = input.data();
    let gy = grad_out.data();
    let plane = s.plane();
    for (i, slot) in dx.data_mut().iter_mut().enumerate() {
        let c = (i / plane.max(1)) % s.c;
        if x[i] >= T::zero() {
            *slot = gy[i];
        } else {
            *slot = gy[i] * a[c];
            da[c] = da[c] + gy[i] * x[i];
        }
    }
    Ok((dx, Tensor::vector(da)))
}
