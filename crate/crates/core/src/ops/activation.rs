use crate::tensor::Tensor;

/// Logistic function, evaluated without overflowing `exp` for large |x|.
#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f32) -> f32 {
    x * sigmoid_scalar(x)
}

/// d/dx [x sigmoid(x)] = s (1 + x (1 - s))
#[inline]
pub fn silu_grad_scalar(x: f32) -> f32 {
    let s = sigmoid_scalar(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}
