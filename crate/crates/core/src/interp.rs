//! Interpolation kernels, sparse resampling operators and their derivatives
//! with respect to the rigid-motion parameters.
//!
//! A rigid transform `R(a)` acts on a volume by sampling its interpolant at
//! inverse-mapped grid points, `R(a)(u)(x) = ũ(A(a)^{-1} x)`. Two evaluation
//! schemes are provided: a single 3D interpolation pass (`Direct3d`) and a
//! sequence of three plane-restricted passes (`Plane2d`) whose weights are
//! shared along the axis normal to each plane.

use std::sync::Once;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    affine_map, map_param_jacobian, AffineMap, AlignParams, GridShape, Param, Plane, Vec3, N_PARAMS,
};
use crate::scalar::Real;
use crate::volume::Volume;

/// Weights with magnitude below this are not stored.
const WEIGHT_DROP: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Cubic,
}

impl KernelKind {
    /// Half-width of the kernel support.
    pub fn radius(self) -> usize {
        match self {
            KernelKind::Linear => 1,
            KernelKind::Cubic => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelOrder {
    Value,
    Derivative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decomposition {
    Direct3d,
    Plane2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InterpScheme {
    pub kernel: KernelKind,
    pub decomposition: Decomposition,
}

impl InterpScheme {
    pub const TRILINEAR: Self = Self {
        kernel: KernelKind::Linear,
        decomposition: Decomposition::Direct3d,
    };
    pub const TRICUBIC: Self = Self {
        kernel: KernelKind::Cubic,
        decomposition: Decomposition::Direct3d,
    };
    pub const BILINEAR: Self = Self {
        kernel: KernelKind::Linear,
        decomposition: Decomposition::Plane2d,
    };
    pub const BICUBIC: Self = Self {
        kernel: KernelKind::Cubic,
        decomposition: Decomposition::Plane2d,
    };

    pub fn name(&self) -> &'static str {
        match (self.kernel, self.decomposition) {
            (KernelKind::Linear, Decomposition::Direct3d) => "trilinear",
            (KernelKind::Cubic, Decomposition::Direct3d) => "tricubic",
            (KernelKind::Linear, Decomposition::Plane2d) => "bilinear",
            (KernelKind::Cubic, Decomposition::Plane2d) => "bicubic",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "trilinear" => Some(Self::TRILINEAR),
            "tricubic" => Some(Self::TRICUBIC),
            "bilinear" => Some(Self::BILINEAR),
            "bicubic" => Some(Self::BICUBIC),
            _ => None,
        }
    }
}

/// Piecewise-polynomial interpolation kernel and its derivative.
///
/// The linear kernel's derivative is taken from the right at its knots.
pub fn eval_kernel<T: Real>(kind: KernelKind, x: T, order: KernelOrder) -> T {
    let ax = x.abs();
    match (kind, order) {
        (KernelKind::Linear, KernelOrder::Value) => {
            if ax <= T::one() {
                T::one() - ax
            } else {
                T::zero()
            }
        }
        (KernelKind::Linear, KernelOrder::Derivative) => {
            if x >= -T::one() && x < T::zero() {
                T::one()
            } else if x >= T::zero() && x < T::one() {
                -T::one()
            } else {
                T::zero()
            }
        }
        (KernelKind::Cubic, KernelOrder::Value) => {
            if ax <= T::one() {
                (T::lit(1.5) * ax - T::lit(2.5)) * ax * ax + T::one()
            } else if ax <= T::lit(2.0) {
                ((T::lit(-0.5) * ax + T::lit(2.5)) * ax - T::lit(4.0)) * ax + T::lit(2.0)
            } else {
                T::zero()
            }
        }
        (KernelKind::Cubic, KernelOrder::Derivative) => {
            let d = if ax <= T::one() {
                (T::lit(4.5) * ax - T::lit(5.0)) * ax
            } else if ax <= T::lit(2.0) {
                (T::lit(-1.5) * ax + T::lit(5.0)) * ax - T::lit(4.0)
            } else {
                T::zero()
            };
            if x < T::zero() {
                -d
            } else {
                d
            }
        }
    }
}

/// Kernel footprint of one coordinate, restricted to nodes inside `[0, n)`.
#[derive(Clone, Copy, Debug)]
struct AxisTaps<T> {
    idx: [usize; 4],
    w: [T; 4],
    dw: [T; 4],
    len: usize,
}

#[inline]
fn axis_taps<T: Real>(kind: KernelKind, t: T, n: usize, with_derivative: bool) -> AxisTaps<T> {
    let mut taps = AxisTaps {
        idx: [0; 4],
        w: [T::zero(); 4],
        dw: [T::zero(); 4],
        len: 0,
    };
    let tf = t.as_f64();
    let r = kind.radius() as f64;
    // points far outside the grid contribute nothing
    if !tf.is_finite() || tf < -r || tf > n as f64 - 1.0 + r {
        return taps;
    }
    let base = tf.floor() as i64;
    let lo = base - kind.radius() as i64 + 1;
    let hi = base + kind.radius() as i64;
    for i in lo..=hi {
        if i < 0 || i >= n as i64 {
            continue;
        }
        let off = t - T::lit(i as f64);
        let w = eval_kernel(kind, off, KernelOrder::Value);
        let dw = if with_derivative {
            eval_kernel(kind, off, KernelOrder::Derivative)
        } else {
            T::zero()
        };
        if w.abs() < T::lit(WEIGHT_DROP) && (!with_derivative || dw.abs() < T::lit(WEIGHT_DROP)) {
            continue;
        }
        taps.idx[taps.len] = i as usize;
        taps.w[taps.len] = w;
        taps.dw[taps.len] = dw;
        taps.len += 1;
    }
    taps
}

/// Row-major compressed sparse matrix of interpolation weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseWeights<T = f64> {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<T>,
    n_out: usize,
    n_in: usize,
}

impl<T: Real> SparseWeights<T> {
    fn with_capacity(n_out: usize, n_in: usize, nnz: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(n_out + 1);
        row_ptr.push(0);
        Self {
            row_ptr,
            cols: Vec::with_capacity(nnz),
            vals: Vec::with_capacity(nnz),
            n_out,
            n_in,
        }
    }

    fn push(&mut self, col: usize, val: T) {
        if val.abs() >= T::lit(WEIGHT_DROP) {
            self.cols.push(col);
            self.vals.push(val);
        }
    }

    fn finish_row(&mut self) {
        self.row_ptr.push(self.cols.len());
    }

    /// `(n_out, n_in)`
    pub fn shape(&self) -> (usize, usize) {
        (self.n_out, self.n_in)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[T]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn row_sum(&self, i: usize) -> T {
        self.row(i).1.iter().fold(T::zero(), |s, &v| s + v)
    }

    /// Row/column/value triplets in row order.
    pub fn triplets(&self) -> Vec<(usize, usize, T)> {
        (0..self.n_out)
            .flat_map(|r| {
                let (c, v) = self.row(r);
                c.iter().zip(v).map(move |(&c, &v)| (r, c, v)).collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.n_in + 1];
        for &c in &self.cols {
            counts[c + 1] += 1;
        }
        for i in 0..self.n_in {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut fill = counts;
        let mut cols = vec![0usize; self.nnz()];
        let mut vals = vec![T::zero(); self.nnz()];
        for r in 0..self.n_out {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.cols[k];
                let dst = fill[c];
                cols[dst] = r;
                vals[dst] = self.vals[k];
                fill[c] += 1;
            }
        }
        Self {
            row_ptr,
            cols,
            vals,
            n_out: self.n_in,
            n_in: self.n_out,
        }
    }

    /// Matrix-vector product.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.n_in);
        (0..self.n_out)
            .map(|r| {
                let (c, v) = self.row(r);
                c.iter().zip(v).fold(T::zero(), |s, (&c, &v)| s + v * x[c])
            })
            .collect()
    }
}

/// Interpolation weights for sample points in a 2D grid of extents
/// `[n0, n1]`; the input index of node `(i0, i1)` is `i0 + n0 * i1`.
pub fn build_plane_weights<T: Real>(points: &[[T; 2]], grid: [usize; 2], kernel: KernelKind) -> SparseWeights<T> {
    let per_row = (2 * kernel.radius()).pow(2);
    let mut w = SparseWeights::with_capacity(points.len(), grid[0] * grid[1], points.len() * per_row);
    for p in points {
        let a = axis_taps(kernel, p[0], grid[0], false);
        let b = axis_taps(kernel, p[1], grid[1], false);
        for jb in 0..b.len {
            for ja in 0..a.len {
                w.push(a.idx[ja] + grid[0] * b.idx[jb], a.w[ja] * b.w[jb]);
            }
        }
        w.finish_row();
    }
    w
}

/// Weights of the directional derivative `t · ∇ũ` at each sample point.
pub fn build_plane_derivative_weights<T: Real>(
    points: &[[T; 2]],
    tangents: &[[T; 2]],
    grid: [usize; 2],
    kernel: KernelKind,
) -> SparseWeights<T> {
    assert_eq!(points.len(), tangents.len());
    let per_row = (2 * kernel.radius()).pow(2);
    let mut w = SparseWeights::with_capacity(points.len(), grid[0] * grid[1], points.len() * per_row);
    for (p, t) in points.iter().zip(tangents) {
        let a = axis_taps(kernel, p[0], grid[0], true);
        let b = axis_taps(kernel, p[1], grid[1], true);
        for jb in 0..b.len {
            for ja in 0..a.len {
                let v = t[0] * a.dw[ja] * b.w[jb] + t[1] * a.w[ja] * b.dw[jb];
                w.push(a.idx[ja] + grid[0] * b.idx[jb], v);
            }
        }
        w.finish_row();
    }
    w
}

/// One plane-restricted factor of the decomposed rigid transform.
///
/// The decomposition is `R(a) = R_xy R_yz R_zx`, each factor interpolating
/// only inside its coordinate plane:
/// * `Zx`: tomographic rotation,
/// * `Yz`: pitch rotation followed by the shift along z,
/// * `Xy`: shift along x and y followed by the in-plane rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Stage<T> {
    Zx { theta: T },
    Yz { theta: T, shift: T },
    Xy { theta: T, shift: [T; 2] },
}

impl<T: Real> Stage<T> {
    pub(crate) fn decompose(a: &AlignParams<T>) -> [Stage<T>; 3] {
        [
            Stage::Zx { theta: a.theta_zx },
            Stage::Yz {
                theta: a.theta_yz,
                shift: a.shift[2],
            },
            Stage::Xy {
                theta: a.theta_xy,
                shift: [a.shift[0], a.shift[1]],
            },
        ]
    }

    pub(crate) fn plane(&self) -> Plane {
        match self {
            Stage::Zx { .. } => Plane::Zx,
            Stage::Yz { .. } => Plane::Yz,
            Stage::Xy { .. } => Plane::Xy,
        }
    }

    pub(crate) fn is_identity(&self) -> bool {
        match *self {
            Stage::Zx { theta } => theta.is_zero(),
            Stage::Yz { theta, shift } => theta.is_zero() && shift.is_zero(),
            Stage::Xy { theta, shift } => theta.is_zero() && shift[0].is_zero() && shift[1].is_zero(),
        }
    }

    /// Parameters this stage depends on.
    pub(crate) fn params(&self) -> &'static [Param] {
        match self {
            Stage::Zx { .. } => &[Param::ThetaZx],
            Stage::Yz { .. } => &[Param::ThetaYz, Param::ShiftZ],
            Stage::Xy { .. } => &[Param::ThetaXy, Param::ShiftX, Param::ShiftY],
        }
    }

    fn theta(&self) -> T {
        match *self {
            Stage::Zx { theta } | Stage::Yz { theta, .. } | Stage::Xy { theta, .. } => theta,
        }
    }

    /// Inverse map in centered plane coordinates `(p, q)`.
    fn inverse(&self, d: [T; 2]) -> [T; 2] {
        let (s, c) = self.theta().sin_cos();
        let rt = |v: [T; 2]| [c * v[0] + s * v[1], -s * v[0] + c * v[1]];
        match *self {
            Stage::Zx { .. } => rt(d),
            Stage::Yz { shift, .. } => rt([d[0], d[1] - shift]),
            Stage::Xy { shift, .. } => {
                let r = rt(d);
                [r[0] - shift[0], r[1] - shift[1]]
            }
        }
    }

    /// Derivative of [`Stage::inverse`] with respect to `param`.
    fn inverse_derivative(&self, param: Param, d: [T; 2]) -> [T; 2] {
        let (s, c) = self.theta().sin_cos();
        let drt = |v: [T; 2]| [-s * v[0] + c * v[1], -c * v[0] - s * v[1]];
        let z = T::zero();
        match (*self, param) {
            (Stage::Zx { .. }, Param::ThetaZx) => drt(d),
            (Stage::Yz { shift, .. }, Param::ThetaYz) => drt([d[0], d[1] - shift]),
            (Stage::Yz { .. }, Param::ShiftZ) => [-s, -c],
            (Stage::Xy { .. }, Param::ThetaXy) => drt(d),
            (Stage::Xy { .. }, Param::ShiftX) => [-T::one(), z],
            (Stage::Xy { .. }, Param::ShiftY) => [z, -T::one()],
            _ => [z, z],
        }
    }
}

/// A plane-restricted linear operator on volumes (a resampling stage or
/// one of its parameter derivatives).
#[derive(Clone, Debug)]
pub(crate) struct PlaneOp<T> {
    plane: Plane,
    shape: GridShape,
    weights: SparseWeights<T>,
}

fn plane_grid(plane: Plane, shape: GridShape) -> [usize; 2] {
    let ext = shape.extents();
    let (p, q) = plane.axes();
    [ext[p], ext[q]]
}

/// Input coordinates (in plane grid units) of every output node of a stage.
fn stage_points<T: Real>(stage: &Stage<T>, shape: GridShape) -> Vec<[T; 2]> {
    let (p, q) = stage.plane().axes();
    let center = shape.center::<T>();
    let [np, nq] = plane_grid(stage.plane(), shape);
    let mut pts = Vec::with_capacity(np * nq);
    for iq in 0..nq {
        for ip in 0..np {
            let d = [T::from_usize_lossy(ip) - center[p], T::from_usize_lossy(iq) - center[q]];
            let r = stage.inverse(d);
            pts.push([r[0] + center[p], r[1] + center[q]]);
        }
    }
    pts
}

fn stage_tangents<T: Real>(stage: &Stage<T>, param: Param, shape: GridShape) -> Vec<[T; 2]> {
    let (p, q) = stage.plane().axes();
    let center = shape.center::<T>();
    let [np, nq] = plane_grid(stage.plane(), shape);
    let mut out = Vec::with_capacity(np * nq);
    for iq in 0..nq {
        for ip in 0..np {
            let d = [T::from_usize_lossy(ip) - center[p], T::from_usize_lossy(iq) - center[q]];
            out.push(stage.inverse_derivative(param, d));
        }
    }
    out
}

impl<T: Real> PlaneOp<T> {
    pub(crate) fn resample(stage: &Stage<T>, shape: GridShape, kernel: KernelKind) -> Self {
        let pts = stage_points(stage, shape);
        Self {
            plane: stage.plane(),
            shape,
            weights: build_plane_weights(&pts, plane_grid(stage.plane(), shape), kernel),
        }
    }

    pub(crate) fn derivative(stage: &Stage<T>, param: Param, shape: GridShape, kernel: KernelKind) -> Self {
        let pts = stage_points(stage, shape);
        let tan = stage_tangents(stage, param, shape);
        Self {
            plane: stage.plane(),
            shape,
            weights: build_plane_derivative_weights(&pts, &tan, plane_grid(stage.plane(), shape), kernel),
        }
    }

    pub(crate) fn transpose(&self) -> Self {
        Self {
            plane: self.plane,
            shape: self.shape,
            weights: self.weights.transpose(),
        }
    }

    /// Applies the plane weights to every slab normal to the plane.
    pub(crate) fn apply(&self, input: &[T]) -> Vec<T> {
        let shape = self.shape;
        assert_eq!(input.len(), shape.len());
        let ext = shape.extents();
        let strides = shape.strides();
        let (p, q) = self.plane.axes();
        let np = ext[p];
        let col_off: Vec<usize> = (0..np * ext[q])
            .map(|k| (k % np) * strides[p] + (k / np) * strides[q])
            .collect();
        let w = &self.weights;
        let (nx, ny) = (shape.nx, shape.ny);
        let mut out = vec![T::zero(); shape.len()];
        if out.is_empty() {
            return out;
        }
        match self.plane.normal_axis() {
            // Yz plane: whole x-rows share their weights
            0 => out.par_chunks_mut(nx).enumerate().for_each(|(row, seg)| {
                let (cols, vals) = w.row(row);
                for (&col, &v) in cols.iter().zip(vals) {
                    let base = col_off[col];
                    for (o, &src) in seg.iter_mut().zip(&input[base..base + nx]) {
                        *o += v * src;
                    }
                }
            }),
            // Zx plane: rows are (z, x), repeated along y
            1 => out.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
                for x in 0..nx {
                    let (cols, vals) = w.row(z + np * x);
                    for (&col, &v) in cols.iter().zip(vals) {
                        let base = col_off[col];
                        for (y, src) in input[base..].iter().step_by(nx).take(ny).enumerate() {
                            slab[x + nx * y] += v * *src;
                        }
                    }
                }
            }),
            // Xy plane: every z-slab is one copy of the plane
            _ => out.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
                let toff = z * strides[2];
                for (row, o) in slab.iter_mut().enumerate() {
                    let (cols, vals) = w.row(row);
                    let mut acc = T::zero();
                    for (&col, &v) in cols.iter().zip(vals) {
                        acc += v * input[col_off[col] + toff];
                    }
                    *o = acc;
                }
            }),
        }
        out
    }
}

/// Pre-assembled plane stages for one parameter vector (identity stages skipped).
#[derive(Clone, Debug)]
pub(crate) struct PlanePipeline<T> {
    pub(crate) stages: [Stage<T>; 3],
    pub(crate) ops: [Option<PlaneOp<T>>; 3],
}

impl<T: Real> PlanePipeline<T> {
    pub(crate) fn new(a: &AlignParams<T>, shape: GridShape, kernel: KernelKind) -> Self {
        let stages = Stage::decompose(a);
        let ops = std::array::from_fn(|k| {
            if stages[k].is_identity() {
                None
            } else {
                Some(PlaneOp::resample(&stages[k], shape, kernel))
            }
        });
        Self { stages, ops }
    }

    pub(crate) fn apply_stage(&self, k: usize, v: Vec<T>) -> Vec<T> {
        match &self.ops[k] {
            Some(op) => op.apply(&v),
            None => v,
        }
    }
}

fn warn_linear_derivative() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        log::warn!("parameter derivatives requested with the linear kernel; they are discontinuous in the alignment parameters");
    });
}

/// Gathers `ũ(map^{-1}(x))` at every grid node with a single 3D interpolation.
pub(crate) fn direct3d_gather<T: Real>(u: &Volume<T>, map: &AffineMap<T>, kernel: KernelKind) -> Volume<T> {
    let shape = u.shape();
    let (nx, ny, nz) = (shape.nx, shape.ny, shape.nz);
    let src = u.data();
    let mut out = vec![T::zero(); shape.len()];
    out.par_chunks_mut((nx * ny).max(1)).enumerate().for_each(|(z, slab)| {
        for y in 0..ny {
            for x in 0..nx {
                let q = map.apply_inverse(&[
                    T::from_usize_lossy(x),
                    T::from_usize_lossy(y),
                    T::from_usize_lossy(z),
                ]);
                let tx = axis_taps(kernel, q[0], nx, false);
                let ty = axis_taps(kernel, q[1], ny, false);
                let tz = axis_taps(kernel, q[2], nz, false);
                let mut acc = T::zero();
                for kz in 0..tz.len {
                    for ky in 0..ty.len {
                        let wyz = ty.w[ky] * tz.w[kz];
                        let base = nx * (ty.idx[ky] + ny * tz.idx[kz]);
                        for kx in 0..tx.len {
                            acc += tx.w[kx] * wyz * src[base + tx.idx[kx]];
                        }
                    }
                }
                slab[x + nx * y] = acc;
            }
        }
    });
    Volume::from_vec(shape, out)
}

/// Exact transpose of [`direct3d_gather`].
pub(crate) fn direct3d_scatter<T: Real>(v: &Volume<T>, map: &AffineMap<T>, kernel: KernelKind) -> Volume<T> {
    let shape = v.shape();
    let (nx, ny, nz) = (shape.nx, shape.ny, shape.nz);
    let src = v.data();
    let mut out = vec![T::zero(); shape.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let val = src[shape.index(x, y, z)];
                if val.is_zero() {
                    continue;
                }
                let q = map.apply_inverse(&[
                    T::from_usize_lossy(x),
                    T::from_usize_lossy(y),
                    T::from_usize_lossy(z),
                ]);
                let tx = axis_taps(kernel, q[0], nx, false);
                let ty = axis_taps(kernel, q[1], ny, false);
                let tz = axis_taps(kernel, q[2], nz, false);
                for kz in 0..tz.len {
                    for ky in 0..ty.len {
                        let wyz = ty.w[ky] * tz.w[kz] * val;
                        let base = nx * (ty.idx[ky] + ny * tz.idx[kz]);
                        for kx in 0..tx.len {
                            out[base + tx.idx[kx]] += tx.w[kx] * wyz;
                        }
                    }
                }
            }
        }
    }
    Volume::from_vec(shape, out)
}

/// All six pointwise derivatives `(∂A^{-1}(x)/∂a_j) · ∇ũ(A^{-1}(x))`.
pub(crate) fn direct3d_derivatives<T: Real>(
    u: &Volume<T>,
    a: &AlignParams<T>,
    kernel: KernelKind,
) -> [Volume<T>; N_PARAMS] {
    let shape = u.shape();
    let (nx, ny, nz) = (shape.nx, shape.ny, shape.nz);
    let map = affine_map(a, shape);
    let src = u.data();
    let plane = (nx * ny).max(1);
    let slabs: Vec<[Vec<T>; N_PARAMS]> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut out: [Vec<T>; N_PARAMS] = std::array::from_fn(|_| vec![T::zero(); plane]);
            for y in 0..ny {
                for x in 0..nx {
                    let xs: Vec3<T> = [T::from_usize_lossy(x), T::from_usize_lossy(y), T::from_usize_lossy(z)];
                    let q = map.apply_inverse(&xs);
                    let tx = axis_taps(kernel, q[0], nx, true);
                    let ty = axis_taps(kernel, q[1], ny, true);
                    let tz = axis_taps(kernel, q[2], nz, true);
                    let mut g = [T::zero(); 3];
                    for kz in 0..tz.len {
                        for ky in 0..ty.len {
                            let base = nx * (ty.idx[ky] + ny * tz.idx[kz]);
                            for kx in 0..tx.len {
                                let s = src[base + tx.idx[kx]];
                                g[0] += tx.dw[kx] * ty.w[ky] * tz.w[kz] * s;
                                g[1] += tx.w[kx] * ty.dw[ky] * tz.w[kz] * s;
                                g[2] += tx.w[kx] * ty.w[ky] * tz.dw[kz] * s;
                            }
                        }
                    }
                    let jac = map_param_jacobian(a, &xs, shape);
                    for j in 0..N_PARAMS {
                        out[j][x + nx * y] = jac[j][0] * g[0] + jac[j][1] * g[1] + jac[j][2] * g[2];
                    }
                }
            }
            out
        })
        .collect();
    std::array::from_fn(|j| {
        let mut data = Vec::with_capacity(shape.len());
        for s in &slabs {
            data.extend_from_slice(&s[j]);
        }
        Volume::from_vec(shape, data)
    })
}

/// Rigid resampling `R(a)(u)`.
pub fn resample<T: Real>(u: &Volume<T>, a: &AlignParams<T>, scheme: InterpScheme) -> Volume<T> {
    let shape = u.shape();
    match scheme.decomposition {
        Decomposition::Direct3d => {
            if a.is_zero() {
                u.clone()
            } else {
                direct3d_gather(u, &affine_map(a, shape), scheme.kernel)
            }
        }
        Decomposition::Plane2d => {
            let pipe = PlanePipeline::new(a, shape, scheme.kernel);
            let mut v = u.data().to_vec();
            for k in 0..3 {
                v = pipe.apply_stage(k, v);
            }
            Volume::from_vec(shape, v)
        }
    }
}

/// Transpose of [`resample`] as a linear map of `u`.
pub fn resample_adjoint<T: Real>(v: &Volume<T>, a: &AlignParams<T>, scheme: InterpScheme) -> Volume<T> {
    let shape = v.shape();
    match scheme.decomposition {
        Decomposition::Direct3d => {
            if a.is_zero() {
                v.clone()
            } else {
                direct3d_scatter(v, &affine_map(a, shape), scheme.kernel)
            }
        }
        Decomposition::Plane2d => {
            let pipe = PlanePipeline::new(a, shape, scheme.kernel);
            let mut w = v.data().to_vec();
            for k in (0..3).rev() {
                if let Some(op) = &pipe.ops[k] {
                    w = op.transpose().apply(&w);
                }
            }
            Volume::from_vec(shape, w)
        }
    }
}

/// Derivative `∂R(a)(u)/∂a_j`.
pub fn resample_param_derivative<T: Real>(u: &Volume<T>, a: &AlignParams<T>, scheme: InterpScheme, j: Param) -> Volume<T> {
    if scheme.kernel == KernelKind::Linear {
        warn_linear_derivative();
    }
    let shape = u.shape();
    match scheme.decomposition {
        Decomposition::Direct3d => {
            let [d0, d1, d2, d3, d4, d5] = direct3d_derivatives(u, a, scheme.kernel);
            [d0, d1, d2, d3, d4, d5].into_iter().nth(j.index()).expect("parameter index")
        }
        Decomposition::Plane2d => {
            let pipe = PlanePipeline::new(a, shape, scheme.kernel);
            let k = pipe
                .stages
                .iter()
                .position(|s| s.params().contains(&j))
                .expect("every parameter belongs to a stage");
            let mut v = u.data().to_vec();
            for before in 0..k {
                v = pipe.apply_stage(before, v);
            }
            v = PlaneOp::derivative(&pipe.stages[k], j, shape, scheme.kernel).apply(&v);
            for after in k + 1..3 {
                v = pipe.apply_stage(after, v);
            }
            Volume::from_vec(shape, v)
        }
    }
}
