//! Channel permutations and per-channel gating.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Source channel for each output channel of a `groups`-way shuffle:
/// reshape `(groups, c / groups)`, transpose, flatten.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Divisibility(format!(
            "channel_shuffle: {channels} channels not divisible by {groups} groups"
        )));
    }
    let per = channels / groups;
    let mut perm = vec![0; channels];
    for g in 0..groups {
        for i in 0..per {
            perm[i * groups + g] = g * per + i;
        }
    }
    Ok(perm)
}

pub fn permute_channels<T: Element>(input: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let s = input.shape();
    if perm.len() != s.c {
        return Err(Error::Shape(format!(
            "permutation of length {} for {} channels",
            perm.len(),
            s.c
        )));
    }
    let mut data = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for &src in perm {
            data.extend_from_slice(input.plane(n, src));
        }
    }
    Tensor::from_vec(s, data)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (dst, &src) in perm.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

pub fn channel_shuffle<T: Element>(input: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let perm = shuffle_permutation(input.shape().c, groups)?;
    permute_channels(input, &perm)
}

pub fn channel_shuffle_backward<T: Element>(grad_out: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let perm = shuffle_permutation(grad_out.shape().c, groups)?;
    permute_channels(grad_out, &inverse_permutation(&perm))
}

/// `x[n, c, :, :] * scale[n, c]` with `scale` shaped `(n, c, 1, 1)`.
pub fn scale_channels<T: Element>(input: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    scale.expect_shape(Shape::new(s.n, s.c, 1, 1), "channel scale")?;
    let plane = s.plane().max(1);
    let k = scale.data();
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        chunk.iter_mut().for_each(|v| *v = *v * k[i]);
    }
    Ok(out)
}

pub fn scale_channels_backward<T: Element>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = input.shape();
    grad_out.expect_shape(s, "channel scale output gradient")?;
    let dx = scale_channels(grad_out, scale)?;
    let plane = s.plane().max(1);
    let ds = input
        .data()
        .chunks(plane)
        .zip(grad_out.data().chunks(plane))
        .map(|(x, g)| x.iter().zip(g).fold(T::zero(), |a, (&xv, &gv)| a + xv * gv))
        .collect();
    Ok((dx, Tensor::from_vec(scale.shape(), ds)?))
}
