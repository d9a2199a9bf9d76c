use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Mean over each `h x w` plane, producing `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.plane() == 0 {
        return Err(Error::Shape(format!(
            "global_avg_pool over empty spatial extent {}x{}",
            s.h, s.w
        )));
    }
    let inv = T::one() / T::from_usize(s.plane()).unwrap();
    let data = input
        .data()
        .chunks(s.plane())
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)
}

pub fn global_avg_pool_backward<T: Element>(input_shape: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(
        Shape::new(input_shape.n, input_shape.c, 1, 1),
        "global_avg_pool output gradient",
    )?;
    let plane = input_shape.plane();
    let inv = T::one() / T::from_usize(plane).unwrap();
    let g = grad_out.data();
    Ok(Tensor::from_fn(input_shape, |i| g[i / plane] * inv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_values() {
        let x = Tensor::full((2, 3, 4, 4), 3.0f32);
        assert!(global_avg_pool(&x).unwrap().data().iter().all(|&v| v == 3.0));
        let x = Tensor::from_vec((1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        assert!(global_avg_pool(&Tensor::<f32>::zeros((1, 1, 0, 3))).is_err());
    }
}
