//! Scalar abstraction and named parameter collections.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{
    ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, IxDyn, LinalgScalar, ScalarOperand,
};

use crate::error::{Error, Result};

/// Floating-point element type for model math. Training runs in `f32`;
/// gradient checks run the same code in `f64`.
pub trait Float:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Float for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Ordered, named tensors. Gradients, optimizer moments and momentum copies
/// all share the layout of the parameter set they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Float> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[ArrayD<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn mat(&self, i: usize) -> ArrayView2<'_, T> {
        self.values[i]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matrix parameter")
    }

    pub fn vector(&self, i: usize) -> ArrayView1<'_, T> {
        self.values[i]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("vector parameter")
    }

    pub fn mat_mut(&mut self, i: usize) -> ArrayViewMut2<'_, T> {
        self.values[i]
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("matrix parameter")
    }

    pub fn vector_mut(&mut self, i: usize) -> ArrayViewMut1<'_, T> {
        self.values[i]
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("vector parameter")
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Same names and shapes, in the same order.
    pub fn is_congruent<U: Float>(&self, other: &ParamSet<U>) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn ensure_congruent<U: Float>(&self, other: &ParamSet<U>) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("parameter sets differ in names or shapes".into()))
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (*x - *y).abs().as_f64()))
            .fold(0.0, f64::max)
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .map(|x| {
                let x = x.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| U::of(x.as_f64()))).collect(),
        }
    }

    /// Flat scalar accessor in declaration order, used by finite-difference probes.
    pub fn scalar(&self, tensor: usize, offset: usize) -> T {
        self.values[tensor].as_slice_memory_order().expect("contiguous")[offset]
    }

    pub fn set_scalar(&mut self, tensor: usize, offset: usize, value: T) {
        self.values[tensor].as_slice_memory_order_mut().expect("contiguous")[offset] = value;
    }

    pub fn from_parts(names: Vec<String>, values: Vec<ArrayD<T>>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} names for {} tensors",
                names.len(),
                values.len()
            )));
        }
        Ok(Self { names, values })
    }

    pub fn from_shapes(shapes: &[(String, Vec<usize>)]) -> Self {
        let mut p = Self::default();
        for (name, shape) in shapes {
            p.push(name.clone(), ArrayD::zeros(IxDyn(shape)));
        }
        p
    }
}

/// Row-wise L2 normalization; returns the normalized rows and the original norms.
pub fn l2_normalize_rows<T: Float>(x: &ArrayView2<'_, T>) -> Result<(ndarray::Array2<T>, Vec<T>)> {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            return Err(Error::ZeroVector);
        }
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Backward of row-wise L2 normalization: `dx = (du - u (u . du)) / |x|`.
pub fn l2_normalize_rows_backward<T: Float>(
    normalized: &ArrayView2<'_, T>,
    norms: &[T],
    grad_out: &ArrayView2<'_, T>,
) -> ndarray::Array2<T> {
    let mut dx = grad_out.to_owned();
    for ((mut d, u), &n) in dx.rows_mut().into_iter().zip(normalized.rows()).zip(norms) {
        let proj = d.dot(&u);
        ndarray::Zip::from(&mut d)
            .and(&u)
            .for_each(|g, &uu| *g = (*g - uu * proj) / n);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalize_rows_and_reject_zero() {
        let x = array![[3.0f64, 4.0], [0.0, 2.0]];
        let (u, n) = l2_normalize_rows(&x.view()).unwrap();
        assert_eq!(u, array![[0.6, 0.8], [0.0, 1.0]]);
        assert_eq!(n, vec![5.0, 2.0]);
        assert!(l2_normalize_rows(&array![[0.0f64, 0.0]].view()).is_err());
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let x = array![[0.3f64, -1.2, 0.5], [2.0, 0.1, -0.7]];
        let w = array![[0.7f64, 0.2, -0.4], [-1.0, 0.5, 0.3]];
        let loss = |x: &ndarray::Array2<f64>| (l2_normalize_rows(&x.view()).unwrap().0 * &w).sum();
        let (u, n) = l2_normalize_rows(&x.view()).unwrap();
        let analytic = l2_normalize_rows_backward(&u.view(), &n, &w.view());
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut p = x.clone();
                p[[i, j]] += h;
                let mut m = x.clone();
                m[[i, j]] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - analytic[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn param_set_helpers() {
        let mut p = ParamSet::<f32>::default();
        p.push("a", ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
        p.push("b", ArrayD::from_elem(IxDyn(&[3]), 2.0));
        assert_eq!(p.scalar_count(), 7);
        let z = p.zeros_like();
        assert!(p.is_congruent(&z));
        assert_eq!(p.max_abs_diff(&z), 2.0);
        let d: ParamSet<f64> = p.cast();
        assert!(d.is_congruent(&p));
        assert!((d.global_norm() - (4.0f64 + 12.0).sqrt()).abs() < 1e-12);
    }
}
