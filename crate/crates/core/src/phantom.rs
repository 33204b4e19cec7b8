//! Synthetic test objects, misalignment generators and data simulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{remove_trivial_modes, AlignParams, AlignStack, GeometryError, GridShape, N_PARAMS};
use crate::interp::InterpScheme;
use crate::projector::{ProjectionStack, Projector, Roi};
use crate::scalar::Real;
use crate::volume::Volume;

/// Region containing the object. The cylinder axis is y, the tomographic
/// rotation axis, so a cylindrical object stays inside the grid under any
/// tomographic rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Support {
    Cube,
    Cylinder,
}

impl Support {
    /// Whether the point (grid coordinates) lies inside the support shrunk by `margin`.
    pub fn contains(self, shape: GridShape, p: [f64; 3], margin: f64) -> bool {
        let c = shape.center::<f64>();
        let half = [shape.nx, shape.ny, shape.nz].map(|n| (n as f64 - 1.0) / 2.0);
        let inside_axis = |k: usize| (p[k] - c[k]).abs() <= half[k] - margin;
        match self {
            Support::Cube => (0..3).all(inside_axis),
            Support::Cylinder => {
                let r = half[0].min(half[2]) - margin;
                inside_axis(1) && (p[0] - c[0]).hypot(p[2] - c[2]) <= r
            }
        }
    }

    pub fn mask<T: Real>(self, shape: GridShape) -> Volume<T> {
        Volume::from_fn(shape, |x, y, z| {
            if self.contains(shape, [x as f64, y as f64, z as f64], 0.0) {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub n: usize,
    pub n_ellipsoids: usize,
    pub density_min: f64,
    pub density_max: f64,
    pub support: Support,
    /// Distance in voxels kept free between ellipsoids and the support boundary.
    pub margin: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n: 48,
            n_ellipsoids: 12,
            density_min: 0.2,
            density_max: 1.0,
            support: Support::Cylinder,
            margin: 2.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    /// Rows are the principal axes divided by their semi-axis lengths.
    scaled_axes: [[f64; 3]; 3],
    density: f64,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        self.scaled_axes
            .iter()
            .map(|row| {
                let t = row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
                t * t
            })
            .sum::<f64>()
            <= 1.0
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // uniform random unit quaternion
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = [a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin(), b * (tau * u3).cos()];
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn sample_ellipsoids(spec: &PhantomSpec, shape: GridShape) -> Vec<Ellipsoid> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n as f64;
    let c = shape.center::<f64>();
    let half = (n - 1.0) / 2.0;
    let mut out = Vec::with_capacity(spec.n_ellipsoids);
    let mut attempts = 0usize;
    while out.len() < spec.n_ellipsoids {
        attempts += 1;
        if attempts > 100_000 {
            log::warn!("grid too small for the support margin; placed {} of {} ellipsoids", out.len(), spec.n_ellipsoids);
            break;
        }
        let semi = [0; 3].map(|_| rng.gen_range(0.06 * n..0.22 * n));
        let reach = semi.iter().cloned().fold(0.0, f64::max);
        if reach > half - spec.margin - 0.5 {
            continue;
        }
        let mut center = c;
        for v in center.iter_mut() {
            *v += rng.gen_range(-half..half);
        }
        // the bounding sphere must fit, which keeps the rotated ellipsoid inside
        if !spec.support.contains(shape, center, spec.margin + reach) {
            continue;
        }
        let rot = random_rotation(&mut rng);
        let scaled_axes = std::array::from_fn(|r| rot[r].map(|v| v / semi[r]));
        let density = rng.gen_range(spec.density_min..=spec.density_max);
        out.push(Ellipsoid {
            center,
            scaled_axes,
            density,
        });
    }
    out
}

/// Rasterizes a seeded family of random ellipsoids with 2× supersampling
/// per axis; overlapping densities add.
pub fn make_phantom<T: Real>(spec: &PhantomSpec) -> Volume<T> {
    let shape = GridShape::cube(spec.n);
    let ellipsoids = sample_ellipsoids(spec, shape);
    let offsets = [-0.25, 0.25];
    Volume::from_fn(shape, |x, y, z| {
        let mut v = 0.0;
        for e in &ellipsoids {
            let mut hits = 0;
            for dz in offsets {
                for dy in offsets {
                    for dx in offsets {
                        if e.contains([x as f64 + dx, y as f64 + dy, z as f64 + dz]) {
                            hits += 1;
                        }
                    }
                }
            }
            v += e.density * hits as f64 / 8.0;
        }
        T::lit(v)
    })
}

/// Magnitudes and composition of simulated misalignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MisalignSpec {
    /// Bound on lateral/axial shifts in voxels.
    pub shift: f64,
    /// Bound on in-plane and pitch angles, degrees.
    pub angle_deg: f64,
    /// Bound on the tomographic angle perturbation, degrees.
    pub tomo_angle_deg: f64,
    /// Common multiplier of all bounds.
    pub factor: f64,
    /// Share of the smooth drift in each parameter; the rest is i.i.d. jitter.
    pub systematic_fraction: f64,
    pub seed: u64,
}

impl Default for MisalignSpec {
    fn default() -> Self {
        Self {
            shift: 1.5,
            angle_deg: 1.0,
            tomo_angle_deg: 0.5,
            factor: 1.0,
            systematic_fraction: 0.5,
            seed: 1,
        }
    }
}

impl MisalignSpec {
    pub fn shift_only(shift: f64, seed: u64) -> Self {
        Self {
            shift,
            angle_deg: 0.0,
            tomo_angle_deg: 0.0,
            seed,
            ..Self::default()
        }
    }

    fn bounds(&self) -> [f64; N_PARAMS] {
        let d = self.angle_deg.to_radians();
        let s = self.shift;
        [s, s, 0.0, d, d, self.tomo_angle_deg.to_radians()].map(|v| v * self.factor)
    }
}

/// Seeded per-projection perturbations: for each parameter a low-order
/// sinusoidal drift over the projection index plus uniform jitter, scaled
/// to the family bound. Redundant modes are removed from the result.
pub fn make_misalignment<T: Real>(nominal_angles: &[T], spec: &MisalignSpec) -> Result<AlignStack<T>, GeometryError> {
    let n = nominal_angles.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bounds = spec.bounds();
    let frac = spec.systematic_fraction.clamp(0.0, 1.0);
    let mut cols = [[0.0f64; 0]; N_PARAMS].map(|_| vec![0.0f64; n]);
    for (j, col) in cols.iter_mut().enumerate() {
        let freq = rng.gen_range(1..=2) as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for (i, v) in col.iter_mut().enumerate() {
            let t = i as f64 / n.max(1) as f64;
            let drift = (std::f64::consts::TAU * freq * t + phase).sin();
            let jitter = rng.gen_range(-1.0..=1.0);
            *v = bounds[j] * (frac * drift + (1.0 - frac) * jitter);
        }
    }
    let params = (0..n)
        .map(|i| AlignParams::from_array(std::array::from_fn(|j| T::lit(cols[j][i]))))
        .collect();
    let a = AlignStack::new(params, nominal_angles.to_vec())?;
    remove_trivial_modes(&a)
}

/// `project(u, a_true) + N(0, σ²)` per detector pixel.
pub fn simulate_data<T: Real>(
    u: &Volume<T>,
    a_true: &AlignStack<T>,
    scheme: InterpScheme,
    noise_sigma: T,
    roi: Option<Roi>,
    seed: u64,
) -> ProjectionStack<T> {
    let proj = Projector::new(u.shape(), a_true.nominal_angles.clone(), scheme, roi).expect("valid projector geometry");
    let mut p = proj.project(u, a_true);
    if noise_sigma > T::zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma.as_f64()).expect("finite noise level");
        for v in &mut p.images {
            *v += T::lit(normal.sample(&mut rng));
        }
    }
    p
}

/// Scheme used to simulate data: trilinear, deliberately different from
/// the bicubic reconstruction model.
pub const SIMULATION_SCHEME: InterpScheme = InterpScheme::TRILINEAR;
