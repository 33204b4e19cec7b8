//! Parallel-beam forward projector `W(a)`, its exact transpose, and the
//! action of its parameter Jacobian.
//!
//! Projection `i` is `T_roi S_z R(nominal_i ⊕ a_i) u`: the object is moved
//! rigidly (nominal tomographic angle added to the perturbation `theta_zx`),
//! summed along z onto an `nx × ny` detector and optionally cropped to a
//! rectangular window. A shift along z is parallel to the rays, so the
//! projector ignores `s_z`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{affine_map, AlignParams, AlignStack, GridShape, Param, N_PARAMS};
use crate::interp::{
    direct3d_derivatives, direct3d_gather, direct3d_scatter, Decomposition, InterpScheme, KernelKind, PlaneOp, Stage,
};
use crate::scalar::{self, Real};
use crate::volume::Volume;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectorError {
    #[error("region of interest {roi:?} exceeds the {width}x{height} detector")]
    RoiOutOfBounds { roi: Roi, width: usize, height: usize },
    #[error("projector needs at least one projection")]
    NoProjections,
}

/// Rectangular detector window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub offset: [usize; 2],
    pub extent: [usize; 2],
}

impl Roi {
    /// Window of the given extent centered on the detector.
    pub fn centered(detector: [usize; 2], extent: [usize; 2]) -> Self {
        Self {
            offset: [
                detector[0].saturating_sub(extent[0]) / 2,
                detector[1].saturating_sub(extent[1]) / 2,
            ],
            extent,
        }
    }

    pub fn fits(&self, detector: [usize; 2]) -> bool {
        self.offset[0] + self.extent[0] <= detector[0] && self.offset[1] + self.extent[1] <= detector[1]
    }

    pub fn crop<T: Real>(&self, image: &[T], detector_width: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.extent[0] * self.extent[1]);
        for y in 0..self.extent[1] {
            let start = self.offset[0] + detector_width * (self.offset[1] + y);
            out.extend_from_slice(&image[start..start + self.extent[0]]);
        }
        out
    }

    /// Zero-embedding, the transpose of [`Roi::crop`].
    pub fn embed<T: Real>(&self, window: &[T], detector: [usize; 2]) -> Vec<T> {
        let mut out = vec![T::zero(); detector[0] * detector[1]];
        for y in 0..self.extent[1] {
            let start = self.offset[0] + detector[0] * (self.offset[1] + y);
            out[start..start + self.extent[0]].copy_from_slice(&window[y * self.extent[0]..(y + 1) * self.extent[0]]);
        }
        out
    }
}

/// Detector images of a tilt series, image-major, x fastest within an image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionStack<T = f64> {
    pub images: Vec<T>,
    pub width: usize,
    pub height: usize,
    pub nominal_angles: Vec<T>,
    pub roi: Option<Roi>,
}

impl<T: Real> ProjectionStack<T> {
    pub fn zeros(width: usize, height: usize, nominal_angles: Vec<T>, roi: Option<Roi>) -> Self {
        Self {
            images: vec![T::zero(); width * height * nominal_angles.len()],
            width,
            height,
            nominal_angles,
            roi,
        }
    }

    pub fn from_images(images: Vec<Vec<T>>, width: usize, height: usize, nominal_angles: Vec<T>, roi: Option<Roi>) -> Self {
        assert_eq!(images.len(), nominal_angles.len());
        let mut flat = Vec::with_capacity(width * height * images.len());
        for img in images {
            assert_eq!(img.len(), width * height);
            flat.extend(img);
        }
        Self {
            images: flat,
            width,
            height,
            nominal_angles,
            roi,
        }
    }

    pub fn n_proj(&self) -> usize {
        self.nominal_angles.len()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn image(&self, i: usize) -> &[T] {
        let m = self.pixels();
        &self.images[i * m..(i + 1) * m]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [T] {
        let m = self.pixels();
        &mut self.images[i * m..(i + 1) * m]
    }

    pub fn dot(&self, other: &Self) -> T {
        scalar::dot(&self.images, &other.images)
    }

    pub fn norm(&self) -> T {
        scalar::norm(&self.images)
    }

    pub fn is_finite(&self) -> bool {
        self.images.iter().all(|v| v.is_finite())
    }

    /// `self - other`, element-wise.
    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (a, &b) in out.images.iter_mut().zip(&other.images) {
            *a -= b;
        }
        out
    }
}

/// Projection image of one projection together with its six parameter
/// derivative images (the block `∂W_i/∂a_i u` of the Jacobian).
#[derive(Clone, Debug)]
pub struct ProjectionJacobian<T> {
    pub image: Vec<T>,
    pub derivs: [Vec<T>; N_PARAMS],
}

impl<T: Real> ProjectionJacobian<T> {
    /// `Σ_j d_j ∂W_i/∂a_ij u`
    pub fn apply(&self, d: &[T; N_PARAMS]) -> Vec<T> {
        let mut out = vec![T::zero(); self.image.len()];
        for (j, &dj) in d.iter().enumerate() {
            if !dj.is_zero() {
                for (o, &g) in out.iter_mut().zip(&self.derivs[j]) {
                    *o += dj * g;
                }
            }
        }
        out
    }

    /// `(∂W_i/∂a_i u)^T r`
    pub fn apply_transpose(&self, r: &[T]) -> [T; N_PARAMS] {
        std::array::from_fn(|j| scalar::dot(&self.derivs[j], r))
    }
}

/// Geometry of a parallel-beam acquisition: grid, nominal angles, resampling
/// scheme and optional detector window.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector<T = f64> {
    pub shape: GridShape,
    pub nominal_angles: Vec<T>,
    pub scheme: InterpScheme,
    pub roi: Option<Roi>,
}

impl<T: Real> Projector<T> {
    pub fn new(shape: GridShape, nominal_angles: Vec<T>, scheme: InterpScheme, roi: Option<Roi>) -> Result<Self, ProjectorError> {
        if nominal_angles.is_empty() {
            return Err(ProjectorError::NoProjections);
        }
        if let Some(r) = roi {
            if !r.fits([shape.nx, shape.ny]) {
                return Err(ProjectorError::RoiOutOfBounds {
                    roi: r,
                    width: shape.nx,
                    height: shape.ny,
                });
            }
        }
        Ok(Self {
            shape,
            nominal_angles,
            scheme,
            roi,
        })
    }

    pub fn with_scheme(&self, scheme: InterpScheme) -> Self {
        Self {
            scheme,
            ..self.clone()
        }
    }

    pub fn with_roi(&self, roi: Option<Roi>) -> Self {
        Self { roi, ..self.clone() }
    }

    pub fn n_proj(&self) -> usize {
        self.nominal_angles.len()
    }

    pub fn detector(&self) -> [usize; 2] {
        [self.shape.nx, self.shape.ny]
    }

    /// Extents of the recorded images (the window when a RoI is set).
    pub fn image_extent(&self) -> [usize; 2] {
        self.roi.map(|r| r.extent).unwrap_or_else(|| self.detector())
    }

    pub fn empty_stack(&self) -> ProjectionStack<T> {
        let [w, h] = self.image_extent();
        ProjectionStack::zeros(w, h, self.nominal_angles.clone(), self.roi)
    }

    /// Parameters of the full rigid motion of projection `i`.
    pub fn effective_params(&self, i: usize, a: &AlignParams<T>) -> AlignParams<T> {
        let mut e = *a;
        e.theta_zx += self.nominal_angles[i];
        e.shift[2] = T::zero();
        e
    }

    fn image_shape(&self) -> GridShape {
        GridShape::new(self.shape.nx, self.shape.ny, 1)
    }

    fn crop(&self, full: Vec<T>) -> Vec<T> {
        match &self.roi {
            Some(r) => r.crop(&full, self.shape.nx),
            None => full,
        }
    }

    fn embed(&self, img: &[T]) -> Vec<T> {
        match &self.roi {
            Some(r) => r.embed(img, self.detector()),
            None => img.to_vec(),
        }
    }

    fn kernel(&self) -> KernelKind {
        self.scheme.kernel
    }

    /// `W_i(a_i) u`
    pub fn project_one(&self, u: &Volume<T>, i: usize, a: &AlignParams<T>) -> Vec<T> {
        assert_eq!(u.shape(), self.shape, "volume does not match projector grid");
        let e = self.effective_params(i, a);
        let full = match self.scheme.decomposition {
            Decomposition::Direct3d => {
                if e.is_zero() {
                    u.sum_z()
                } else {
                    direct3d_gather(u, &affine_map(&e, self.shape), self.kernel()).sum_z()
                }
            }
            Decomposition::Plane2d => {
                let [zx, yz, xy] = Stage::decompose(&e);
                let mut v = u.data().to_vec();
                for st in [zx, yz] {
                    if !st.is_identity() {
                        v = PlaneOp::resample(&st, self.shape, self.kernel()).apply(&v);
                    }
                }
                // S_z commutes with the x-y stage: its weights do not depend on z
                let img = Volume::from_vec(self.shape, v).sum_z();
                if xy.is_identity() {
                    img
                } else {
                    PlaneOp::resample(&xy, self.image_shape(), self.kernel()).apply(&img)
                }
            }
        };
        self.crop(full)
    }

    /// `W_i(a_i)^T p_i`
    pub fn backproject_one(&self, image: &[T], i: usize, a: &AlignParams<T>) -> Volume<T> {
        let [w, h] = self.image_extent();
        assert_eq!(image.len(), w * h, "image does not match detector window");
        let e = self.effective_params(i, a);
        let full = self.embed(image);
        match self.scheme.decomposition {
            Decomposition::Direct3d => {
                let v = Volume::broadcast_z(self.shape, &full);
                if e.is_zero() {
                    v
                } else {
                    direct3d_scatter(&v, &affine_map(&e, self.shape), self.kernel())
                }
            }
            Decomposition::Plane2d => {
                let [zx, yz, xy] = Stage::decompose(&e);
                let img = if xy.is_identity() {
                    full
                } else {
                    PlaneOp::resample(&xy, self.image_shape(), self.kernel()).transpose().apply(&full)
                };
                let mut v = Volume::broadcast_z(self.shape, &img).into_vec();
                for st in [yz, zx] {
                    if !st.is_identity() {
                        v = PlaneOp::resample(&st, self.shape, self.kernel()).transpose().apply(&v);
                    }
                }
                Volume::from_vec(self.shape, v)
            }
        }
    }

    /// Forward projection of the whole tilt series.
    pub fn project(&self, u: &Volume<T>, a: &AlignStack<T>) -> ProjectionStack<T> {
        assert_eq!(a.len(), self.n_proj(), "alignment stack length mismatch");
        let images: Vec<Vec<T>> = (0..self.n_proj())
            .into_par_iter()
            .map(|i| self.project_one(u, i, &a.params[i]))
            .collect();
        let [w, h] = self.image_extent();
        ProjectionStack::from_images(images, w, h, self.nominal_angles.clone(), self.roi)
    }

    /// Exact transpose of [`Projector::project`]; contributions are summed
    /// in projection order, independently of the thread count.
    pub fn backproject(&self, p: &ProjectionStack<T>, a: &AlignStack<T>) -> Volume<T> {
        assert_eq!(a.len(), self.n_proj(), "alignment stack length mismatch");
        assert_eq!(p.n_proj(), self.n_proj(), "projection count mismatch");
        let mut acc = Volume::zeros(self.shape);
        let group = rayon::current_num_threads().max(1);
        let idx: Vec<usize> = (0..self.n_proj()).collect();
        for chunk in idx.chunks(group) {
            let parts: Vec<Volume<T>> = chunk
                .par_iter()
                .map(|&i| self.backproject_one(p.image(i), i, &a.params[i]))
                .collect();
            for part in parts {
                acc.data_mut()
                    .par_iter_mut()
                    .zip(part.data().par_iter())
                    .for_each(|(s, &v)| *s += v);
            }
        }
        acc
    }

    /// Projection image and its parameter derivatives for projection `i`.
    pub fn projection_jacobian(&self, u: &Volume<T>, i: usize, a: &AlignParams<T>) -> ProjectionJacobian<T> {
        assert_eq!(u.shape(), self.shape, "volume does not match projector grid");
        let e = self.effective_params(i, a);
        let kernel = self.kernel();
        let npix = self.shape.nx * self.shape.ny;
        let zero_img = || vec![T::zero(); npix];
        let (image, mut derivs): (Vec<T>, [Vec<T>; N_PARAMS]) = match self.scheme.decomposition {
            Decomposition::Direct3d => {
                let image = if e.is_zero() {
                    u.sum_z()
                } else {
                    direct3d_gather(u, &affine_map(&e, self.shape), kernel).sum_z()
                };
                let vols = direct3d_derivatives(u, &e, kernel);
                (image, vols.map(|v| v.sum_z()))
            }
            Decomposition::Plane2d => {
                let [zx, yz, xy] = Stage::decompose(&e);
                let img_shape = self.image_shape();
                let apply_opt = |st: &Stage<T>, shape: GridShape, v: Vec<T>| {
                    if st.is_identity() {
                        v
                    } else {
                        PlaneOp::resample(st, shape, kernel).apply(&v)
                    }
                };
                let yz_op = (!yz.is_identity()).then(|| PlaneOp::resample(&yz, self.shape, kernel));
                let apply_yz = |v: Vec<T>| match &yz_op {
                    Some(op) => op.apply(&v),
                    None => v,
                };
                let xy_op = (!xy.is_identity()).then(|| PlaneOp::resample(&xy, img_shape, kernel));
                let apply_xy = |v: Vec<T>| match &xy_op {
                    Some(op) => op.apply(&v),
                    None => v,
                };
                let sum_z = |v: Vec<T>| Volume::from_vec(self.shape, v).sum_z();

                let v1 = apply_opt(&zx, self.shape, u.data().to_vec());
                let d_zx = PlaneOp::derivative(&zx, Param::ThetaZx, self.shape, kernel).apply(u.data());
                let d_zx = apply_xy(sum_z(apply_yz(d_zx)));
                let d_yz = PlaneOp::derivative(&yz, Param::ThetaYz, self.shape, kernel).apply(&v1);
                let d_yz = apply_xy(sum_z(d_yz));
                let w = sum_z(apply_yz(v1));
                let mut derivs: [Vec<T>; N_PARAMS] = std::array::from_fn(|_| Vec::new());
                for p in [Param::ShiftX, Param::ShiftY, Param::ThetaXy] {
                    derivs[p.index()] = PlaneOp::derivative(&xy, p, img_shape, kernel).apply(&w);
                }
                derivs[Param::ShiftZ.index()] = zero_img();
                derivs[Param::ThetaYz.index()] = d_yz;
                derivs[Param::ThetaZx.index()] = d_zx;
                (apply_xy(w), derivs)
            }
        };
        derivs[Param::ShiftZ.index()] = zero_img();
        ProjectionJacobian {
            image: self.crop(image),
            derivs: derivs.map(|d| self.crop(d)),
        }
    }

    /// Jacobian-vector product `G(a, u) da`; block-diagonal over projections.
    pub fn jacobian_tvp(&self, a: &AlignStack<T>, u: &Volume<T>, da: &AlignStack<T>) -> ProjectionStack<T> {
        assert_eq!(da.len(), self.n_proj());
        let [w, h] = self.image_extent();
        let images: Vec<Vec<T>> = (0..self.n_proj())
            .into_par_iter()
            .map(|i| {
                let d = da.params[i].to_array();
                if d.iter().all(|v| v.is_zero()) {
                    vec![T::zero(); w * h]
                } else {
                    self.projection_jacobian(u, i, &a.params[i]).apply(&d)
                }
            })
            .collect();
        ProjectionStack::from_images(images, w, h, self.nominal_angles.clone(), self.roi)
    }

    /// Transposed Jacobian action `G(a, u)^T r`, one 6-vector per projection.
    pub fn jacobian_vjp(&self, a: &AlignStack<T>, u: &Volume<T>, r: &ProjectionStack<T>) -> Vec<[T; N_PARAMS]> {
        assert_eq!(r.n_proj(), self.n_proj());
        (0..self.n_proj())
            .into_par_iter()
            .map(|i| {
                let img = r.image(i);
                if img.iter().all(|v| v.is_zero()) {
                    [T::zero(); N_PARAMS]
                } else {
                    self.projection_jacobian(u, i, &a.params[i]).apply_transpose(img)
                }
            })
            .collect()
    }
}

/// Forward projection `T_roi W(a) u`.
pub fn project<T: Real>(u: &Volume<T>, a: &AlignStack<T>, scheme: InterpScheme, roi: Option<Roi>) -> ProjectionStack<T> {
    Projector::new(u.shape(), a.nominal_angles.clone(), scheme, roi)
        .expect("valid projector geometry")
        .project(u, a)
}

/// Backprojection `W(a)^T T_roi^T p` onto a grid of the given shape.
pub fn backproject<T: Real>(
    p: &ProjectionStack<T>,
    a: &AlignStack<T>,
    shape: GridShape,
    scheme: InterpScheme,
    roi: Option<Roi>,
) -> Volume<T> {
    Projector::new(shape, a.nominal_angles.clone(), scheme, roi)
        .expect("valid projector geometry")
        .backproject(p, a)
}
