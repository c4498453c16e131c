//! Grid containers and the resampling machinery built on them.
//!
//! All volumes are stored row-major with x varying fastest. A 2D image is a
//! volume with `d == 1`; every routine treats a singleton axis as absent.

mod filters;
mod warp;

pub use filters::{
    box_sum, box_sum_adjoint, downsample2, gaussian_kernel, gaussian_smooth, gaussian_smooth_adjoint,
    upsample_displacement, window_bounds,
};
pub use warp::{
    sample_linear, sample_linear_grad, warp_labels, warp_labels_nearest, warp_onehot, warp_onehot_with_grad,
    warp_scalar, warp_scalar_with_grad, Interpolation,
};

use std::fmt;

use crate::error::{Error, Result};
use crate::real::Real;

/// Grid extent `(w, h, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub w: usize,
    pub h: usize,
    pub d: usize,
}

impl Dims {
    pub const fn new(w: usize, h: usize, d: usize) -> Self {
        Self { w, h, d }
    }

    pub const fn new_2d(w: usize, h: usize) -> Self {
        Self { w, h, d: 1 }
    }

    #[inline]
    pub const fn len(&self) -> usize {
        self.w * self.h * self.d
    }

    #[inline]
    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn is_2d(&self) -> bool {
        self.d == 1
    }

    #[inline]
    pub const fn extent(&self, axis: usize) -> usize {
        match axis {
            0 => self.w,
            1 => self.h,
            _ => self.d,
        }
    }

    #[inline]
    pub const fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.w,
            _ => self.w * self.h,
        }
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.w, self.h, self.d]
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.w * (y + self.h * z)
    }

    #[inline]
    pub const fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        let z = i / (self.w * self.h);
        [x, y, z]
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::param("dims", format!("all extents must be positive, got {self}")));
        }
        Ok(())
    }

    pub(crate) fn ensure_same(&self, other: &Dims) -> Result<()> {
        if self != other {
            return Err(Error::DimMismatch {
                left: *self,
                right: *other,
            });
        }
        Ok(())
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.w, self.h, self.d)
    }
}

fn check_finite<T: Real>(data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Real-valued intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField<T> {
    dims: Dims,
    spacing: [T; 3],
    data: Vec<T>,
}

impl<T: Real> ScalarField<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::LengthMismatch {
                dims,
                expected: dims.len(),
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self {
            dims,
            spacing: [T::one(); 3],
            data,
        })
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        Self {
            dims,
            spacing: [T::one(); 3],
            data: vec![value; dims.len()],
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    data.push(f(x, y, z));
                }
            }
        }
        Self {
            dims,
            spacing: [T::one(); 3],
            data,
        }
    }

    /// Builds a field without the finiteness scan. Callers guarantee the invariant.
    pub(crate) fn from_raw(dims: Dims, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.len(), data.len());
        Self {
            dims,
            spacing: [T::one(); 3],
            data,
        }
    }

    pub fn with_spacing(mut self, spacing: [T; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [T; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::from_usize(self.data.len()).unwrap()
    }

    /// Converts the scalar type, e.g. for `f32` file output.
    pub fn cast<U: Real>(&self) -> ScalarField<U> {
        ScalarField {
            dims: self.dims,
            spacing: self.spacing.map(|s| U::lit(s.as_f64())),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Per-voxel displacement `(dx, dy, dz)` in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField<T> {
    dims: Dims,
    vectors: Vec<[T; 3]>,
}

impl<T: Real> DisplacementField<T> {
    pub fn new(dims: Dims, vectors: Vec<[T; 3]>) -> Result<Self> {
        dims.validate()?;
        if vectors.len() != dims.len() {
            return Err(Error::LengthMismatch {
                dims,
                expected: dims.len(),
                actual: vectors.len(),
            });
        }
        if let Some(index) = vectors.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { dims, vectors })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            vectors: vec![[T::zero(); 3]; dims.len()],
        }
    }

    pub fn constant(dims: Dims, v: [T; 3]) -> Self {
        Self {
            dims,
            vectors: vec![v; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> [T; 3]) -> Self {
        let mut vectors = Vec::with_capacity(dims.len());
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    vectors.push(f(x, y, z));
                }
            }
        }
        Self { dims, vectors }
    }

    pub(crate) fn from_raw(dims: Dims, vectors: Vec<[T; 3]>) -> Self {
        debug_assert_eq!(dims.len(), vectors.len());
        Self { dims, vectors }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn vectors(&self) -> &[[T; 3]] {
        &self.vectors
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut [[T; 3]] {
        &mut self.vectors
    }

    pub fn scaled(&self, s: T) -> Self {
        Self::from_raw(self.dims, self.vectors.iter().map(|v| v.map(|c| c * s)).collect())
    }

    /// Largest Euclidean vector length.
    pub fn max_norm(&self) -> T {
        self.vectors
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(T::zero(), T::max)
    }

    pub fn mean_norm(&self) -> T {
        let total: T = self
            .vectors
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .sum();
        total / T::from_usize(self.vectors.len()).unwrap()
    }

    pub fn cast<U: Real>(&self) -> DisplacementField<U> {
        DisplacementField {
            dims: self.dims,
            vectors: self.vectors.iter().map(|v| v.map(|c| U::lit(c.as_f64()))).collect(),
        }
    }
}

/// Integer tissue labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    labels: Vec<u32>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(dims: Dims, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        dims.validate()?;
        if num_classes < 2 {
            return Err(Error::param("num_classes", format!("need at least 2 classes, got {num_classes}")));
        }
        if labels.len() != dims.len() {
            return Err(Error::LengthMismatch {
                dims,
                expected: dims.len(),
                actual: labels.len(),
            });
        }
        if let Some(index) = labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: labels[index] as i64,
                index,
                num_classes,
            });
        }
        Ok(Self {
            dims,
            labels,
            num_classes,
        })
    }

    pub(crate) fn from_raw(dims: Dims, labels: Vec<u32>, num_classes: usize) -> Self {
        debug_assert!(labels.iter().all(|&l| (l as usize) < num_classes));
        Self {
            dims,
            labels,
            num_classes,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.labels[self.dims.index(x, y, z)]
    }

    /// Voxel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Hard one-hot encoding as a probability mask.
    pub fn one_hot<T: Real>(&self) -> ProbMask<T> {
        let k = self.num_classes;
        let mut probs = vec![T::zero(); self.labels.len() * k];
        for (v, &l) in self.labels.iter().enumerate() {
            probs[v * k + l as usize] = T::one();
        }
        ProbMask::from_raw(self.dims, k, probs)
    }
}

/// Per-voxel class probabilities, voxel-major (`probs[v * K + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask<T> {
    dims: Dims,
    num_classes: usize,
    probs: Vec<T>,
}

impl<T: Real> ProbMask<T> {
    pub fn new(dims: Dims, num_classes: usize, probs: Vec<T>) -> Result<Self> {
        dims.validate()?;
        if num_classes < 2 {
            return Err(Error::param("num_classes", format!("need at least 2 classes, got {num_classes}")));
        }
        if probs.len() != dims.len() * num_classes {
            return Err(Error::LengthMismatch {
                dims,
                expected: dims.len() * num_classes,
                actual: probs.len(),
            });
        }
        let tol = T::lit(1e-6).max(T::epsilon() * T::lit(64.0));
        for (voxel, p) in probs.chunks_exact(num_classes).enumerate() {
            if let Some(c) = p.iter().position(|&q| !(q >= -tol && q <= T::one() + tol)) {
                return Err(Error::InvalidProbMask {
                    voxel,
                    reason: format!("channel {c} value {} outside [0, 1]", p[c]),
                });
            }
            let s: T = p.iter().copied().sum();
            if (s - T::one()).abs() > tol {
                return Err(Error::InvalidProbMask {
                    voxel,
                    reason: format!("channels sum to {s}"),
                });
            }
        }
        Ok(Self {
            dims,
            num_classes,
            probs,
        })
    }

    /// Uniform `1/K` everywhere.
    pub fn uniform(dims: Dims, num_classes: usize) -> Self {
        let p = T::one() / T::from_usize(num_classes).unwrap();
        Self::from_raw(dims, num_classes, vec![p; dims.len() * num_classes])
    }

    pub(crate) fn from_raw(dims: Dims, num_classes: usize, probs: Vec<T>) -> Self {
        debug_assert_eq!(probs.len(), dims.len() * num_classes);
        Self {
            dims,
            num_classes,
            probs,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    #[inline]
    pub fn voxel(&self, v: usize) -> &[T] {
        &self.probs[v * self.num_classes..(v + 1) * self.num_classes]
    }

    /// One channel as a scalar field.
    pub fn channel(&self, c: usize) -> ScalarField<T> {
        ScalarField::from_raw(
            self.dims,
            self.probs.chunks_exact(self.num_classes).map(|p| p[c]).collect(),
        )
    }

    /// Per-voxel argmax, ties to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let labels = self
            .probs
            .chunks_exact(self.num_classes)
            .map(|p| {
                let mut best = 0;
                for c in 1..p.len() {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect();
        LabelMap::from_raw(self.dims, labels, self.num_classes)
    }

    pub fn cast<U: Real>(&self) -> ProbMask<U> {
        ProbMask {
            dims: self.dims,
            num_classes: self.num_classes,
            probs: self.probs.iter().map(|&p| U::lit(p.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let d = Dims::new(3, 4, 5);
        for i in 0..d.len() {
            let [x, y, z] = d.coords(i);
            assert_eq!(d.index(x, y, z), i);
        }
    }

    #[test]
    fn scalar_field_rejects_bad_input() {
        let d = Dims::new_2d(2, 2);
        assert!(matches!(
            ScalarField::<f64>::new(d, vec![0.0; 3]),
            Err(Error::LengthMismatch { expected: 4, actual: 3, .. })
        ));
        assert!(matches!(
            ScalarField::new(d, vec![0.0, f64::NAN, 0.0, 0.0]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(ScalarField::<f64>::new(Dims::new(0, 1, 1), vec![]).is_err());
    }

    #[test]
    fn label_map_range_checked() {
        let d = Dims::new_2d(2, 1);
        assert!(LabelMap::new(d, vec![0, 2], 2).is_err());
        assert!(LabelMap::new(d, vec![0, 1], 1).is_err());
        let l = LabelMap::new(d, vec![0, 1], 2).unwrap();
        assert_eq!(l.histogram(), vec![1, 1]);
    }

    #[test]
    fn prob_mask_validation() {
        let d = Dims::new_2d(1, 1);
        assert!(ProbMask::new(d, 2, vec![0.5f64, 0.5]).is_ok());
        assert!(ProbMask::new(d, 2, vec![0.6f64, 0.5]).is_err());
        assert!(ProbMask::new(d, 2, vec![1.2f64, -0.2]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let d = Dims::new_2d(2, 1);
        let m = ProbMask::new(d, 3, vec![0.4f64, 0.4, 0.2, 0.2, 0.4, 0.4]).unwrap();
        assert_eq!(m.argmax().labels(), &[0, 1]);
    }
}
