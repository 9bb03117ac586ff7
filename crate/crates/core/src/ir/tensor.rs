use serde::{Deserialize, Serialize};

use crate::fxp::real::{self, Real};
use crate::fxp::{FixedPointType, FixedValue, WeightFormat};

/// Exact-valued tensor: weights, biases and constants before quantization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    #[serde(with = "real::serde_real_vec")]
    pub values: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<Real>) -> Self {
        assert_eq!(numel(&shape), values.len(), "tensor shape/value count mismatch");
        Self { shape, values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self { shape, values: vec![Real::from_integer(0.into()); n] }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Self {
        let v = values
            .iter()
            .map(|x| real::real_from_f64(*x).expect("finite tensor value"))
            .collect();
        Self::new(shape, v)
    }

    pub fn from_ints(shape: Vec<usize>, values: &[i64]) -> Self {
        let v = values.iter().map(|x| real::real_from_int(*x as i128)).collect();
        Self::new(shape, v)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(real::real_to_f64).collect()
    }

    pub fn quantize(&self, format: WeightFormat) -> QTensor {
        QTensor {
            shape: self.shape.clone(),
            payloads: self.values.iter().map(|x| format.quantize(x)).collect(),
            format,
        }
    }

    pub fn transpose(&self, perm: &[usize]) -> Tensor {
        let (values, shape) = permute(&self.values, &self.shape, perm);
        Tensor { shape, values }
    }
}

/// Fixed-point tensor: exact integer payloads sharing one number format.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub payloads: Vec<i128>,
    pub format: WeightFormat,
}

impl QTensor {
    pub fn new(shape: Vec<usize>, payloads: Vec<i128>, format: WeightFormat) -> Self {
        assert_eq!(numel(&shape), payloads.len(), "tensor shape/payload count mismatch");
        debug_assert!(payloads.iter().all(|p| format.admits(*p)));
        Self { shape, payloads, format }
    }

    pub fn fixed(shape: Vec<usize>, payloads: Vec<i128>, ty: FixedPointType) -> Self {
        Self::new(shape, payloads, WeightFormat::Fixed(ty))
    }

    /// Grid type the payloads live on.
    pub fn ty(&self) -> FixedPointType {
        self.format.container()
    }

    pub fn len(&self) -> usize {
        self.payloads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payloads.is_empty()
    }

    pub fn value(&self, i: usize) -> FixedValue {
        FixedValue::new(self.payloads[i], self.ty()).expect("payload within format")
    }

    pub fn values(&self) -> impl Iterator<Item = FixedValue> + '_ {
        let ty = self.ty();
        self.payloads.iter().map(move |p| FixedValue::new(*p, ty).expect("payload within format"))
    }

    pub fn reals(&self) -> Vec<Real> {
        let e = self.ty().lsb_exp();
        self.payloads.iter().map(|p| real::real_from_scaled(*p, e)).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values().map(|v| v.to_f64()).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), values: self.reals() }
    }

    /// Casts every element into `t`.
    pub fn cast(&self, t: FixedPointType) -> QTensor {
        let e = self.ty().lsb_exp();
        QTensor {
            shape: self.shape.clone(),
            payloads: self.payloads.iter().map(|p| crate::fxp::cast_payload(*p, e, t)).collect(),
            format: WeightFormat::Fixed(t),
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> QTensor {
        assert_eq!(numel(&shape), self.len());
        QTensor { shape, payloads: self.payloads.clone(), format: self.format }
    }

    pub fn transpose(&self, perm: &[usize]) -> QTensor {
        let (payloads, shape) = permute(&self.payloads, &self.shape, perm);
        QTensor { shape, payloads, format: self.format }
    }

    /// True when both tensors hold the same shape and the same real values.
    pub fn value_eq(&self, other: &QTensor) -> bool {
        self.shape == other.shape && self.values().zip(other.values()).all(|(a, b)| a.value_eq(&b))
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Row-major axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Clone>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    assert_eq!(shape.len(), perm.len(), "permutation rank mismatch");
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    for flat in 0..n {
        let mut src = 0;
        for (axis, &p) in perm.iter().enumerate() {
            let idx = (flat / out_strides[axis]) % out_shape[axis];
            src += idx * in_strides[p];
        }
        out.push(data[src].clone());
    }
    (out, out_shape)
}

pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_manual_transpose() {
        // 2x3 -> 3x2
        let data = [0, 1, 2, 3, 4, 5];
        let (out, shape) = permute(&data, &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, vec![0, 3, 1, 4, 2, 5]);
        let (back, _) = permute(&out, &shape, &invert_perm(&[1, 0]));
        assert_eq!(back, data);
    }

    #[test]
    fn chw_to_hwc() {
        // C=2, H=1, W=2
        let data = [1, 2, 10, 20];
        let (out, shape) = permute(&data, &[2, 1, 2], &[1, 2, 0]);
        assert_eq!(shape, vec![1, 2, 2]);
        assert_eq!(out, vec![1, 10, 2, 20]);
    }
}
