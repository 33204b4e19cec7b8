//! Dense scalar volumes on a unit-spaced voxel grid.

use crate::geometry::GridShape;
use crate::scalar::{self, Real};

/// Scalar density sampled on an `nx × ny × nz` grid, x fastest in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T = f64> {
    shape: GridShape,
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn zeros(shape: GridShape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn filled(shape: GridShape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Panics if `data.len()` does not match the grid.
    pub fn from_vec(shape: GridShape, data: Vec<T>) -> Self {
        assert_eq!(data.len(), shape.len(), "volume data length mismatch");
        Self { shape, data }
    }

    pub fn from_fn(shape: GridShape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.nz {
            for y in 0..shape.ny {
                for x in 0..shape.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.shape.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.shape.index(x, y, z);
        self.data[i] = v;
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |s, &v| s + v)
    }

    pub fn min(&self) -> T {
        self.data.iter().fold(T::infinity(), |m, &v| m.min(v))
    }

    pub fn norm(&self) -> T {
        scalar::norm(&self.data)
    }

    pub fn dot(&self, other: &Self) -> T {
        scalar::dot(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sums along z, producing an `nx × ny` image (x fastest).
    pub fn sum_z(&self) -> Vec<T> {
        let plane = self.shape.nx * self.shape.ny;
        let mut out = vec![T::zero(); plane];
        for slab in self.data.chunks_exact(plane) {
            for (o, &v) in out.iter_mut().zip(slab) {
                *o += v;
            }
        }
        out
    }

    /// Broadcasts an `nx × ny` image along z (transpose of [`Volume::sum_z`]).
    pub fn broadcast_z(shape: GridShape, image: &[T]) -> Self {
        let plane = shape.nx * shape.ny;
        assert_eq!(image.len(), plane);
        let mut data = Vec::with_capacity(shape.len());
        for _ in 0..shape.nz {
            data.extend_from_slice(image);
        }
        Self { shape, data }
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}
