//! Rigid-motion parametrization of the per-projection acquisition geometry.
//!
//! Every projection carries six parameters: three shifts and three plane
//! rotations. The forward map applies, about the grid center `c`,
//!
//! 1. the tomographic rotation in the z-x plane,
//! 2. the pitch rotation in the y-z plane,
//! 3. the shifts along x, y, z,
//! 4. the in-plane rotation in the x-y plane,
//!
//! i.e. `A(x) = c + R_xy (R_yz R_zx (x - c) + s)`.
//!
//! Angles are counterclockwise-positive when viewed from the positive third
//! axis of a right-handed frame: `theta_xy` rotates about +z, `theta_yz` about
//! +x and `theta_zx` about +y.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

/// Number of alignment parameters per projection.
pub const N_PARAMS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("at least two projections are required, got {0}")]
    TooFewProjections(usize),
    #[error("alignment stack has {params} parameter sets but {angles} nominal angles")]
    LengthMismatch { params: usize, angles: usize },
    #[error("nominal angles must be strictly increasing (index {0})")]
    UnsortedAngles(usize),
    #[error("non-finite alignment parameter in projection {0}")]
    NonFinite(usize),
}

/// Extents of a voxel grid, x fastest in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl GridShape {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    /// Memory stride of each axis.
    pub fn strides(&self) -> [usize; 3] {
        [1, self.nx, self.nx * self.ny]
    }

    /// Rotation center: the geometric center of the voxel grid.
    pub fn center<T: Real>(&self) -> Vec3<T> {
        let half = |n: usize| T::from_usize_lossy(n.saturating_sub(1)) * T::lit(0.5);
        [half(self.nx), half(self.ny), half(self.nz)]
    }
}

/// Index of a parameter inside a per-projection 6-vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Param {
    #[serde(rename = "s_x")]
    ShiftX = 0,
    #[serde(rename = "s_y")]
    ShiftY = 1,
    #[serde(rename = "s_z")]
    ShiftZ = 2,
    #[serde(rename = "theta_xy")]
    ThetaXy = 3,
    #[serde(rename = "theta_yz")]
    ThetaYz = 4,
    #[serde(rename = "theta_zx")]
    ThetaZx = 5,
}

impl Param {
    pub const ALL: [Param; N_PARAMS] = [
        Param::ShiftX,
        Param::ShiftY,
        Param::ShiftZ,
        Param::ThetaXy,
        Param::ThetaYz,
        Param::ThetaZx,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::ShiftX => "s_x",
            Param::ShiftY => "s_y",
            Param::ShiftZ => "s_z",
            Param::ThetaXy => "theta_xy",
            Param::ThetaYz => "theta_yz",
            Param::ThetaZx => "theta_zx",
        }
    }

    pub fn is_rotation(self) -> bool {
        self.index() >= 3
    }
}

/// Rigid-motion parameters of one projection: shifts in voxels, angles in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignParams<T = f64> {
    pub shift: [T; 3],
    pub theta_xy: T,
    pub theta_yz: T,
    pub theta_zx: T,
}

impl<T: Real> AlignParams<T> {
    pub fn zero() -> Self {
        Self::from_array([T::zero(); N_PARAMS])
    }

    pub fn from_array(v: [T; N_PARAMS]) -> Self {
        Self {
            shift: [v[0], v[1], v[2]],
            theta_xy: v[3],
            theta_yz: v[4],
            theta_zx: v[5],
        }
    }

    pub fn to_array(&self) -> [T; N_PARAMS] {
        [
            self.shift[0],
            self.shift[1],
            self.shift[2],
            self.theta_xy,
            self.theta_yz,
            self.theta_zx,
        ]
    }

    pub fn get(&self, p: Param) -> T {
        self.to_array()[p.index()]
    }

    pub fn set(&mut self, p: Param, value: T) {
        let mut v = self.to_array();
        v[p.index()] = value;
        *self = Self::from_array(v);
    }

    pub fn is_zero(&self) -> bool {
        self.to_array().iter().all(|v| v.is_zero())
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Maps all angles into `[-pi, pi)`.
    pub fn wrapped(&self) -> Self {
        let mut v = self.to_array();
        for a in v.iter_mut().skip(3) {
            *a = wrap_angle(*a);
        }
        Self::from_array(v)
    }

    pub fn cast<U: Real>(&self) -> AlignParams<U> {
        let v = self.to_array();
        AlignParams::from_array(v.map(|x| U::lit(x.as_f64())))
    }
}

pub fn wrap_angle<T: Real>(a: T) -> T {
    let two_pi = T::PI() + T::PI();
    let mut w = (a + T::PI()) % two_pi;
    if w < T::zero() {
        w += two_pi;
    }
    w - T::PI()
}

/// Alignment parameters of a whole tilt series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignStack<T = f64> {
    pub params: Vec<AlignParams<T>>,
    /// Nominal tomographic angle of each projection (radians).
    pub nominal_angles: Vec<T>,
}

impl<T: Real> AlignStack<T> {
    pub fn new(params: Vec<AlignParams<T>>, nominal_angles: Vec<T>) -> Result<Self, GeometryError> {
        let s = Self {
            params,
            nominal_angles,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn zeros(nominal_angles: Vec<T>) -> Self {
        Self {
            params: vec![AlignParams::zero(); nominal_angles.len()],
            nominal_angles,
        }
    }

    /// `n` equispaced angles from `start` to `stop` (radians); `stop` is
    /// included only when `inclusive` is set.
    pub fn uniform_angles(n: usize, start: T, stop: T, inclusive: bool) -> Vec<T> {
        let denom = if inclusive { n.saturating_sub(1).max(1) } else { n.max(1) };
        let step = (stop - start) / T::from_usize_lossy(denom);
        (0..n).map(|i| start + step * T::from_usize_lossy(i)).collect()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.params.len() != self.nominal_angles.len() {
            return Err(GeometryError::LengthMismatch {
                params: self.params.len(),
                angles: self.nominal_angles.len(),
            });
        }
        for i in 1..self.nominal_angles.len() {
            if self.nominal_angles[i] <= self.nominal_angles[i - 1] {
                return Err(GeometryError::UnsortedAngles(i));
            }
        }
        if let Some(i) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite(i));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Projection-major flattening `[a_0[0..6], a_1[0..6], ...]`.
    pub fn to_flat(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.to_array()).collect()
    }

    pub fn from_flat(flat: &[T], nominal_angles: Vec<T>) -> Self {
        assert_eq!(flat.len(), N_PARAMS * nominal_angles.len());
        let params = flat
            .chunks_exact(N_PARAMS)
            .map(|c| AlignParams::from_array([c[0], c[1], c[2], c[3], c[4], c[5]]))
            .collect();
        Self {
            params,
            nominal_angles,
        }
    }

    /// Values of one parameter family across projections.
    pub fn column(&self, p: Param) -> Vec<T> {
        self.params.iter().map(|a| a.get(p)).collect()
    }

    pub fn set_column(&mut self, p: Param, values: &[T]) {
        for (a, &v) in self.params.iter_mut().zip(values) {
            a.set(p, v);
        }
    }

    /// Element-wise `self - other`, keeping the nominal angles of `self`.
    pub fn difference(&self, other: &Self) -> Self {
        let params = self
            .params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| {
                let (x, y) = (a.to_array(), b.to_array());
                AlignParams::from_array(std::array::from_fn(|j| x[j] - y[j]))
            })
            .collect();
        Self {
            params,
            nominal_angles: self.nominal_angles.clone(),
        }
    }

    pub fn scaled(&self, factor: T) -> Self {
        let params = self
            .params
            .iter()
            .map(|a| AlignParams::from_array(a.to_array().map(|v| v * factor)))
            .collect();
        Self {
            params,
            nominal_angles: self.nominal_angles.clone(),
        }
    }
}

#[inline]
pub fn mat_vec<T: Real>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

#[inline]
pub fn mat_t_vec<T: Real>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    std::array::from_fn(|i| m[0][i] * v[0] + m[1][i] * v[1] + m[2][i] * v[2])
}

pub fn mat_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    std::array::from_fn(|i| std::array::from_fn(|j| a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j]))
}

pub fn transpose<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    std::array::from_fn(|i| std::array::from_fn(|j| m[j][i]))
}

pub fn identity<T: Real>() -> Mat3<T> {
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { T::one() } else { T::zero() }))
}

/// Coordinate plane of an elementary rotation, given as the ordered axis
/// pair `(p, q)` such that a positive angle turns `p` towards `q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Plane {
    Xy,
    Yz,
    Zx,
}

impl Plane {
    pub fn axes(self) -> (usize, usize) {
        match self {
            Plane::Xy => (0, 1),
            Plane::Yz => (1, 2),
            Plane::Zx => (2, 0),
        }
    }

    /// The axis left untouched by rotations in this plane.
    pub fn normal_axis(self) -> usize {
        match self {
            Plane::Xy => 2,
            Plane::Yz => 0,
            Plane::Zx => 1,
        }
    }
}

pub fn plane_rotation<T: Real>(plane: Plane, theta: T) -> Mat3<T> {
    let (p, q) = plane.axes();
    let (s, c) = theta.sin_cos();
    let mut m = identity();
    m[p][p] = c;
    m[p][q] = -s;
    m[q][p] = s;
    m[q][q] = c;
    m
}

pub fn plane_rotation_derivative<T: Real>(plane: Plane, theta: T) -> Mat3<T> {
    let (p, q) = plane.axes();
    let (s, c) = theta.sin_cos();
    let mut m = [[T::zero(); 3]; 3];
    m[p][p] = -s;
    m[p][q] = -c;
    m[q][p] = c;
    m[q][q] = -s;
    m
}

/// Affine map `x -> center + linear (x - center) + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMap<T = f64> {
    pub linear: Mat3<T>,
    pub offset: Vec3<T>,
    pub center: Vec3<T>,
}

impl<T: Real> AffineMap<T> {
    pub fn apply(&self, x: &Vec3<T>) -> Vec3<T> {
        let d = std::array::from_fn(|k| x[k] - self.center[k]);
        let r = mat_vec(&self.linear, &d);
        std::array::from_fn(|k| self.center[k] + r[k] + self.offset[k])
    }

    /// Closed-form inverse for orthogonal `linear`.
    pub fn apply_inverse(&self, y: &Vec3<T>) -> Vec3<T> {
        let d = std::array::from_fn(|k| y[k] - self.center[k] - self.offset[k]);
        let r = mat_t_vec(&self.linear, &d);
        std::array::from_fn(|k| self.center[k] + r[k])
    }

    pub fn inverse(&self) -> Self {
        let lt = transpose(&self.linear);
        let off = mat_vec(&lt, &self.offset);
        Self {
            linear: lt,
            offset: off.map(|v| -v),
            center: self.center,
        }
    }
}

/// Composed forward map of one projection.
pub fn affine_map<T: Real>(a: &AlignParams<T>, grid: GridShape) -> AffineMap<T> {
    let rxy = plane_rotation(Plane::Xy, a.theta_xy);
    let ryz = plane_rotation(Plane::Yz, a.theta_yz);
    let rzx = plane_rotation(Plane::Zx, a.theta_zx);
    AffineMap {
        linear: mat_mul(&rxy, &mat_mul(&ryz, &rzx)),
        offset: mat_vec(&rxy, &a.shift),
        center: grid.center(),
    }
}

/// Derivatives of the inverse-mapped point `A(a)^{-1}(x)` with respect to
/// the six parameters; row `j` belongs to parameter `j`.
pub fn map_param_jacobian<T: Real>(a: &AlignParams<T>, x: &Vec3<T>, grid: GridShape) -> [Vec3<T>; N_PARAMS] {
    let c = grid.center::<T>();
    let d: Vec3<T> = std::array::from_fn(|k| x[k] - c[k]);
    let rxy = plane_rotation(Plane::Xy, a.theta_xy);
    let ryz = plane_rotation(Plane::Yz, a.theta_yz);
    let rzx = plane_rotation(Plane::Zx, a.theta_zx);
    let drxy = plane_rotation_derivative(Plane::Xy, a.theta_xy);
    let dryz = plane_rotation_derivative(Plane::Yz, a.theta_yz);
    let drzx = plane_rotation_derivative(Plane::Zx, a.theta_zx);

    // A^{-1}(x) = c + Rzx^T Ryz^T (Rxy^T d - s)
    let rxy_t_d = mat_t_vec(&rxy, &d);
    let q: Vec3<T> = std::array::from_fn(|k| rxy_t_d[k] - a.shift[k]);
    let back = |v: Vec3<T>| mat_t_vec(&rzx, &mat_t_vec(&ryz, &v));

    let unit = |k: usize| -> Vec3<T> { std::array::from_fn(|i| if i == k { -T::one() } else { T::zero() }) };
    [
        back(unit(0)),
        back(unit(1)),
        back(unit(2)),
        back(mat_t_vec(&drxy, &d)),
        mat_t_vec(&rzx, &mat_t_vec(&dryz, &q)),
        mat_t_vec(&drzx, &mat_t_vec(&ryz, &q)),
    ]
}

/// Orthonormal bases of the globally redundant alignment modes, evaluated
/// at a set of nominal tomographic angles.
#[derive(Clone, Debug)]
pub struct TrivialModes<T = f64> {
    n: usize,
    /// (parameter families, orthonormal vectors over the concatenated families)
    families: Vec<(Vec<Param>, Vec<Vec<T>>)>,
}

impl<T: Real> TrivialModes<T> {
    pub fn new(nominal_angles: &[T]) -> Result<Self, GeometryError> {
        let n = nominal_angles.len();
        if n < 2 {
            return Err(GeometryError::TooFewProjections(n));
        }
        let sin: Vec<T> = nominal_angles.iter().map(|t| t.sin()).collect();
        let cos: Vec<T> = nominal_angles.iter().map(|t| t.cos()).collect();
        let ones = vec![T::one(); n];
        let concat = |a: &[T], b: &[T]| -> Vec<T> { a.iter().chain(b).copied().collect() };
        let neg_sin: Vec<T> = sin.iter().map(|&v| -v).collect();

        let families = vec![
            (vec![Param::ThetaZx], orthonormalize(vec![ones.clone()])),
            // joint tilt of the tomographic axis: (theta_xy, theta_yz) follow the
            // rotated tilt axis, i.e. span{(-sin, cos), (cos, sin)}
            (
                vec![Param::ThetaXy, Param::ThetaYz],
                orthonormalize(vec![concat(&neg_sin, &cos), concat(&cos, &sin)]),
            ),
            (vec![Param::ShiftX], orthonormalize(vec![sin, cos])),
            (vec![Param::ShiftY], orthonormalize(vec![ones])),
        ];
        Ok(Self { n, families })
    }

    /// Raw (non-normalized) mode vectors, one stack per redundant motion.
    pub fn basis_stacks(nominal_angles: &[T]) -> Vec<AlignStack<T>> {
        let mut out = Vec::new();
        let mk = |f: &dyn Fn(T) -> [T; N_PARAMS]| AlignStack {
            params: nominal_angles.iter().map(|&t| AlignParams::from_array(f(t))).collect(),
            nominal_angles: nominal_angles.to_vec(),
        };
        let z = T::zero();
        out.push(mk(&|_| [z, z, z, z, z, T::one()]));
        out.push(mk(&|t| [z, z, z, -t.sin(), t.cos(), z]));
        out.push(mk(&|t| [z, z, z, t.cos(), t.sin(), z]));
        out.push(mk(&|t| [t.sin(), z, z, z, z, z]));
        out.push(mk(&|t| [t.cos(), z, z, z, z, z]));
        out.push(mk(&|_| [z, T::one(), z, z, z, z]));
        out.push(mk(&|_| [z, z, T::one(), z, z, z]));
        out
    }

    /// Subtracts the orthogonal projection onto the redundant modes and
    /// zeroes all `s_z`.
    pub fn remove(&self, a: &AlignStack<T>) -> AlignStack<T> {
        assert_eq!(a.len(), self.n);
        let mut out = a.clone();
        for (params, basis) in &self.families {
            let mut v: Vec<T> = params.iter().flat_map(|&p| a.column(p)).collect();
            for b in basis {
                let c = v.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y);
                for (x, &y) in v.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
            for (k, &p) in params.iter().enumerate() {
                out.set_column(p, &v[k * self.n..(k + 1) * self.n]);
            }
        }
        out.set_column(Param::ShiftZ, &vec![T::zero(); self.n]);
        out
    }
}

/// Modified Gram-Schmidt, applied twice; numerically dependent vectors are dropped.
fn orthonormalize<T: Real>(vectors: Vec<Vec<T>>) -> Vec<Vec<T>> {
    let mut basis: Vec<Vec<T>> = Vec::new();
    for mut v in vectors {
        let scale = v.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
        for _ in 0..2 {
            for b in &basis {
                let c = v.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y);
                for (x, &y) in v.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
        let nv = v.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
        if nv > T::lit(1e-8) * scale.max(T::one()) {
            basis.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    basis
}

/// Removes the globally redundant components from an alignment stack.
pub fn remove_trivial_modes<T: Real>(a: &AlignStack<T>) -> Result<AlignStack<T>, GeometryError> {
    if a.params.len() != a.nominal_angles.len() {
        return Err(GeometryError::LengthMismatch {
            params: a.params.len(),
            angles: a.nominal_angles.len(),
        });
    }
    Ok(TrivialModes::new(&a.nominal_angles)?.remove(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn max_abs_diff(a: &Mat3<f64>, b: &Mat3<f64>) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                m = m.max((a[i][j] - b[i][j]).abs());
            }
        }
        m
    }

    fn sample_params(seed: u64) -> AlignParams<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        AlignParams::from_array(std::array::from_fn(|j| {
            if j < 3 {
                rng.gen_range(-3.0..3.0)
            } else {
                rng.gen_range(-PI..PI)
            }
        }))
    }

    #[test]
    fn zero_params_give_identity() {
        let m = affine_map(&AlignParams::<f64>::zero(), GridShape::cube(8));
        assert_eq!(m.linear, identity());
        assert_eq!(m.offset, [0.0; 3]);
    }

    #[test]
    fn quarter_tomographic_turn_sends_x_to_minus_z() {
        let mut a = AlignParams::<f64>::zero();
        a.theta_zx = PI / 2.0;
        let m = affine_map(&a, GridShape::cube(8));
        // hand-built rotation about +y by 90 degrees
        let expected = [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]];
        assert!(max_abs_diff(&m.linear, &expected) < 1e-15);
        let ex = mat_vec(&m.linear, &[1.0, 0.0, 0.0]);
        assert!((ex[0]).abs() < 1e-15 && (ex[2] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn pure_translation() {
        let mut a = AlignParams::<f64>::zero();
        a.shift = [1.0, 2.0, 3.0];
        let m = affine_map(&a, GridShape::cube(5));
        assert_eq!(m.linear, identity());
        assert_eq!(m.offset, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn composition_order_regression() {
        // stored matrix for (theta_xy, theta_yz, theta_zx) = (0.3, -0.2, 0.5), s = (1, -2, 0.5)
        let a = AlignParams::from_array([1.0, -2.0, 0.5, 0.3, -0.2, 0.5]);
        let m = affine_map(&a, GridShape::cube(9));
        let (sxy, cxy) = 0.3f64.sin_cos();
        let (syz, cyz) = (-0.2f64).sin_cos();
        let (szx, czx) = 0.5f64.sin_cos();
        let rxy = [[cxy, -sxy, 0.0], [sxy, cxy, 0.0], [0.0, 0.0, 1.0]];
        let ryz = [[1.0, 0.0, 0.0], [0.0, cyz, -syz], [0.0, syz, cyz]];
        let rzx = [[czx, 0.0, szx], [0.0, 1.0, 0.0], [-szx, 0.0, czx]];
        let expected = mat_mul(&rxy, &mat_mul(&ryz, &rzx));
        assert!(max_abs_diff(&m.linear, &expected) < 1e-15);
        let off = mat_vec(&rxy, &[1.0, -2.0, 0.5]);
        for k in 0..3 {
            assert!((m.offset[k] - off[k]).abs() < 1e-15);
        }
        // applying the shift after the in-plane rotation gives a different map
        let x = [1.0, 7.0, 2.0];
        let swapped = {
            let c = GridShape::cube(9).center::<f64>();
            let d = [x[0] - c[0], x[1] - c[1], x[2] - c[2]];
            let r = mat_vec(&m.linear, &d);
            [c[0] + r[0] + 1.0, c[1] + r[1] - 2.0, c[2] + r[2] + 0.5]
        };
        let y = m.apply(&x);
        assert!((0..3).any(|k| (y[k] - swapped[k]).abs() > 1e-3));
    }

    #[test]
    fn linear_part_is_orthogonal_and_inverse_roundtrips() {
        let grid = GridShape::new(11, 7, 5);
        for seed in 0..50 {
            let a = sample_params(seed);
            let m = affine_map(&a, grid);
            let qtq = mat_mul(&transpose(&m.linear), &m.linear);
            assert!(max_abs_diff(&qtq, &identity()) <= 1e-12);
            let x = [0.3 * seed as f64, -1.5, 2.25];
            let back = m.apply_inverse(&m.apply(&x));
            let inv = m.inverse().apply(&m.apply(&x));
            for k in 0..3 {
                assert!((back[k] - x[k]).abs() <= 1e-12);
                assert!((inv[k] - x[k]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn translation_derivative_at_zero() {
        let jac = map_param_jacobian(&AlignParams::<f64>::zero(), &[1.0, 2.0, 3.0], GridShape::cube(6));
        assert_eq!(jac[0], [-1.0, 0.0, 0.0]);
        assert_eq!(jac[1], [0.0, -1.0, 0.0]);
        assert_eq!(jac[2], [0.0, 0.0, -1.0]);
    }

    #[test]
    fn param_jacobian_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let grid = GridShape::new(16, 12, 10);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for draw in 0..100 {
            let a = sample_params(1000 + draw);
            let x = [rng.gen_range(0.0..16.0), rng.gen_range(0.0..12.0), rng.gen_range(0.0..10.0)];
            let jac = map_param_jacobian(&a, &x, grid);
            for j in 0..N_PARAMS {
                let mut ap = a.to_array();
                let mut am = a.to_array();
                ap[j] += h;
                am[j] -= h;
                let yp = affine_map(&AlignParams::from_array(ap), grid).apply_inverse(&x);
                let ym = affine_map(&AlignParams::from_array(am), grid).apply_inverse(&x);
                let fd: Vec<f64> = (0..3).map(|k| (yp[k] - ym[k]) / (2.0 * h)).collect();
                let err = (0..3).map(|k| (fd[k] - jac[j][k]).powi(2)).sum::<f64>().sqrt();
                let scale = (0..3).map(|k| jac[j][k].powi(2)).sum::<f64>().sqrt().max(1.0);
                assert!(err / scale <= 1e-6, "draw {draw} param {j}: {err}");
            }
        }
    }

    fn angles(n: usize) -> Vec<f64> {
        AlignStack::uniform_angles(n, 0.0, PI, false)
    }

    #[test]
    fn constant_tomographic_offset_is_removed() {
        let nominal = angles(12);
        let mut a = AlignStack::zeros(nominal);
        for p in a.params.iter_mut() {
            p.theta_zx = 0.1;
        }
        let r = remove_trivial_modes(&a).unwrap();
        assert!(r.column(Param::ThetaZx).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn lateral_sinusoid_is_removed() {
        let nominal = angles(17);
        let mut a = AlignStack::zeros(nominal.clone());
        let sx: Vec<f64> = nominal.iter().map(|t| 3.0 * (t + 0.7).sin()).collect();
        a.set_column(Param::ShiftX, &sx);
        let r = remove_trivial_modes(&a).unwrap();
        assert!(r.to_flat().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn too_few_projections() {
        let a = AlignStack::<f64>::zeros(vec![0.0]);
        assert_eq!(remove_trivial_modes(&a), Err(GeometryError::TooFewProjections(1)));
    }

    #[test]
    fn wrap_angle_range() {
        for k in -20..20 {
            let a = 0.37 * k as f64;
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w));
            assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn uniform_angles_inclusive_and_exclusive() {
        let ex = AlignStack::uniform_angles(4, 0.0, 180.0, false);
        assert_eq!(ex, vec![0.0, 45.0, 90.0, 135.0]);
        let inc = AlignStack::uniform_angles(5, 0.0, 160.0, true);
        assert_eq!(inc, vec![0.0, 40.0, 80.0, 120.0, 160.0]);
    }
}
