//! Per-projection alignment updates at a fixed reconstruction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{AlignParams, AlignStack, GridShape, Param, N_PARAMS};
use crate::projector::{ProjectionJacobian, ProjectionStack, Projector};
use crate::scalar::{self, Real};
use crate::volume::Volume;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("support mask is empty")]
    EmptyMask,
    #[error("box bounds inverted for {param}: lo = {lo} > hi = {hi}")]
    InvertedBounds { param: &'static str, lo: f64, hi: f64 },
    #[error("projection {index} has nonpositive total mass {mass}")]
    NonpositiveMass { index: usize, mass: f64 },
}

/// Smallest rotational weight.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// Per-parameter scales `(1, 1, 1, w_xy, w_yz, w_zx)` converting angles to
/// mean voxel motion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignWeights<T = f64> {
    pub w: [T; N_PARAMS],
}

impl<T: Real> AlignWeights<T> {
    pub fn unit() -> Self {
        Self { w: [T::one(); N_PARAMS] }
    }

    pub fn from_rotational(w_xy: T, w_yz: T, w_zx: T) -> Self {
        let floor = T::lit(WEIGHT_FLOOR);
        let mut w = [T::one(); N_PARAMS];
        w[Param::ThetaXy.index()] = w_xy.max(floor);
        w[Param::ThetaYz.index()] = w_yz.max(floor);
        w[Param::ThetaZx.index()] = w_zx.max(floor);
        Self { w }
    }

    /// Weights of a full grid.
    pub fn for_grid(shape: GridShape) -> Self {
        compute_align_weights(&Volume::filled(shape, T::one())).expect("nonempty grid")
    }

    /// `‖w ⊙ d‖_∞`
    pub fn max_motion(&self, d: &AlignParams<T>) -> T {
        d.to_array()
            .iter()
            .zip(&self.w)
            .fold(T::zero(), |m, (&v, &w)| m.max((v * w).abs()))
    }

    /// `‖w ⊙ d‖²`
    pub fn norm_sq(&self, d: &[T; N_PARAMS]) -> T {
        d.iter().zip(&self.w).fold(T::zero(), |s, (&v, &w)| s + v * v * w * w)
    }
}

/// Mean in-plane distance of the masked voxels to the grid center, per
/// rotation plane.
pub fn compute_align_weights<T: Real>(mask: &Volume<T>) -> Result<AlignWeights<T>, AlignError> {
    let shape = mask.shape();
    let c = shape.center::<f64>();
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for z in 0..shape.nz {
        for y in 0..shape.ny {
            for x in 0..shape.nx {
                if mask.get(x, y, z) > T::zero() {
                    let d = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                    sums[0] += d[0].hypot(d[1]);
                    sums[1] += d[1].hypot(d[2]);
                    sums[2] += d[2].hypot(d[0]);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(AlignError::EmptyMask);
    }
    let n = count as f64;
    Ok(AlignWeights::from_rotational(
        T::lit(sums[0] / n),
        T::lit(sums[1] / n),
        T::lit(sums[2] / n),
    ))
}

/// Gradient of `½‖W_i(a_i)u − p_i‖²` with respect to `a_i`.
pub fn align_gradient<T: Real>(proj: &Projector<T>, i: usize, a_i: &AlignParams<T>, u: &Volume<T>, p_i: &[T]) -> [T; N_PARAMS] {
    let jac = proj.projection_jacobian(u, i, a_i);
    let r: Vec<T> = jac.image.iter().zip(p_i).map(|(&w, &p)| w - p).collect();
    jac.apply_transpose(&r)
}

/// How the search direction is formed from the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Direction `s = ∇`, step `γ = ‖w⊙s‖² / ‖G s‖²`.
    Weighted,
    /// Steepest descent in the weighted norm: direction `s = ∇ / w²`,
    /// exact quadratic step `γ = ⟨∇, s⟩ / ‖G s‖²`.
    Preconditioned,
}

/// Quadratic pull `(λ/2)‖a_i − anchor_i‖²` added to the per-projection objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tether<T> {
    pub lambda: T,
    pub anchor: AlignParams<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions<T> {
    pub weights: AlignWeights<T>,
    pub rule: StepRule,
    /// Parameters that may move; masked gradient entries are zeroed.
    pub fit: [bool; N_PARAMS],
    pub max_halvings: usize,
}

impl<T: Real> Default for StepOptions<T> {
    fn default() -> Self {
        let mut fit = [true; N_PARAMS];
        fit[Param::ShiftZ.index()] = false;
        Self {
            weights: AlignWeights::unit(),
            rule: StepRule::Preconditioned,
            fit,
            max_halvings: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearchOutcome<T = f64> {
    pub params: AlignParams<T>,
    /// Accepted step length (0 when unchanged).
    pub gamma: T,
    pub n_halvings: usize,
    pub stalled: bool,
    /// Masked gradient at the input parameters.
    pub gradient: [T; N_PARAMS],
    /// `½‖W_i(a_i)u − p_i‖²` at the input parameters.
    pub data_term: T,
    pub objective_before: T,
    pub objective_after: T,
}

fn half_sq<T: Real>(img: &[T], p: &[T]) -> T {
    let r: Vec<T> = img.iter().zip(p).map(|(&w, &q)| w - q).collect();
    scalar::norm_sq(&r) * T::lit(0.5)
}

fn tether_value<T: Real>(a: &AlignParams<T>, t: Option<&Tether<T>>) -> T {
    match t {
        Some(t) if t.lambda > T::zero() => {
            let d = a.to_array();
            let c = t.anchor.to_array();
            let s = d.iter().zip(&c).fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y));
            t.lambda * s * T::lit(0.5)
        }
        _ => T::zero(),
    }
}

/// One gradient step with exact line search and halving safeguard on
/// projection `i`; never increases the per-projection objective.
pub fn line_search_update<T: Real>(
    proj: &Projector<T>,
    i: usize,
    a_i: &AlignParams<T>,
    u: &Volume<T>,
    p_i: &[T],
    opts: &StepOptions<T>,
    tether: Option<&Tether<T>>,
) -> LineSearchOutcome<T> {
    let jac = proj.projection_jacobian(u, i, a_i);
    line_search_with(a_i, &jac, p_i, opts, tether, |c| proj.project_one(u, i, c))
}

/// Line search on an arbitrary forward model: `jac` holds the model image
/// and its parameter derivatives at `a_i`, `project` evaluates the model at
/// trial parameters.
pub fn line_search_with<T: Real>(
    a_i: &AlignParams<T>,
    jac: &ProjectionJacobian<T>,
    p_i: &[T],
    opts: &StepOptions<T>,
    tether: Option<&Tether<T>>,
    project: impl Fn(&AlignParams<T>) -> Vec<T>,
) -> LineSearchOutcome<T> {
    let r: Vec<T> = jac.image.iter().zip(p_i).map(|(&w, &p)| w - p).collect();
    let data_term = scalar::norm_sq(&r) * T::lit(0.5);
    let f0 = data_term + tether_value(a_i, tether);
    let mut grad = jac.apply_transpose(&r);
    if let Some(t) = tether {
        let d = a_i.to_array();
        let c = t.anchor.to_array();
        for j in 0..N_PARAMS {
            grad[j] += t.lambda * (d[j] - c[j]);
        }
    }
    for j in 0..N_PARAMS {
        if !opts.fit[j] {
            grad[j] = T::zero();
        }
    }
    let unchanged = |stalled| LineSearchOutcome {
        params: *a_i,
        gamma: T::zero(),
        n_halvings: 0,
        stalled,
        gradient: grad,
        data_term,
        objective_before: f0,
        objective_after: f0,
    };
    if grad.iter().all(|g| g.is_zero()) {
        return unchanged(false);
    }
    let (dir, numer) = match opts.rule {
        StepRule::Weighted => (grad, opts.weights.norm_sq(&grad)),
        StepRule::Preconditioned => {
            let d: [T; N_PARAMS] = std::array::from_fn(|j| grad[j] / (opts.weights.w[j] * opts.weights.w[j]));
            let num = grad.iter().zip(&d).fold(T::zero(), |s, (&g, &v)| s + g * v);
            (d, num)
        }
    };
    let gs = jac.apply(&dir);
    let mut denom = scalar::norm_sq(&gs);
    if let Some(t) = tether {
        denom += t.lambda * dir.iter().fold(T::zero(), |s, &v| s + v * v);
    }
    if !(denom > T::zero()) || !numer.is_finite() {
        return unchanged(false);
    }
    let mut gamma = numer / denom;
    for halvings in 0..=opts.max_halvings {
        let cand = AlignParams::from_array(std::array::from_fn(|j| a_i.to_array()[j] - gamma * dir[j]));
        let f1 = half_sq(&project(&cand), p_i) + tether_value(&cand, tether);
        if f1 <= f0 {
            return LineSearchOutcome {
                params: cand,
                gamma,
                n_halvings: halvings,
                stalled: false,
                gradient: grad,
                data_term,
                objective_before: f0,
                objective_after: f1,
            };
        }
        gamma *= T::lit(0.5);
    }
    let mut out = unchanged(true);
    out.n_halvings = opts.max_halvings;
    out
}

/// Line-search updates of every projection, run concurrently.
pub fn align_step<T: Real>(
    proj: &Projector<T>,
    a: &AlignStack<T>,
    u: &Volume<T>,
    p: &ProjectionStack<T>,
    opts: &StepOptions<T>,
    tether: Option<(T, &AlignStack<T>)>,
) -> Vec<LineSearchOutcome<T>> {
    (0..a.len())
        .into_par_iter()
        .map(|i| {
            let t = tether.map(|(lambda, anchor)| Tether {
                lambda,
                anchor: anchor.params[i],
            });
            line_search_update(proj, i, &a.params[i], u, p.image(i), opts, t.as_ref())
        })
        .collect()
}

/// Projection onto the box `[lo, hi]` (the proximal map of its indicator,
/// hence independent of `gamma`).
pub fn prox_box<T: Real>(a: &AlignStack<T>, lo: &AlignParams<T>, hi: &AlignParams<T>, _gamma: T) -> Result<AlignStack<T>, AlignError> {
    let l = lo.to_array();
    let h = hi.to_array();
    for p in Param::ALL {
        let j = p.index();
        if l[j] > h[j] {
            return Err(AlignError::InvertedBounds {
                param: p.name(),
                lo: l[j].as_f64(),
                hi: h[j].as_f64(),
            });
        }
    }
    let mut out = a.clone();
    for params in &mut out.params {
        let v = params.to_array();
        *params = AlignParams::from_array(std::array::from_fn(|j| v[j].max(l[j]).min(h[j])));
    }
    Ok(out)
}

/// Lateral and axial shifts of each image's center of mass relative to the
/// detector center: the shifts that, fed to the projector, reproduce the
/// observed off-center data from a centered object.
pub fn com_prealign<T: Real>(p: &ProjectionStack<T>, detector: [usize; 2]) -> Result<AlignStack<T>, AlignError> {
    let (off, _) = match p.roi {
        Some(r) => (r.offset, r.extent),
        None => ([0, 0], [p.width, p.height]),
    };
    let cx = T::lit((detector[0] as f64 - 1.0) / 2.0);
    let cy = T::lit((detector[1] as f64 - 1.0) / 2.0);
    let mut params = Vec::with_capacity(p.n_proj());
    for i in 0..p.n_proj() {
        let img = p.image(i);
        let mut mass = T::zero();
        let mut mx = T::zero();
        let mut my = T::zero();
        for y in 0..p.height {
            let fy = T::from_usize_lossy(off[1] + y);
            for x in 0..p.width {
                let v = img[x + p.width * y];
                mass += v;
                mx += v * T::from_usize_lossy(off[0] + x);
                my += v * fy;
            }
        }
        if !(mass > T::zero()) {
            return Err(AlignError::NonpositiveMass {
                index: i,
                mass: mass.as_f64(),
            });
        }
        let mut a = AlignParams::zero();
        a.shift[0] = mx / mass - cx;
        a.shift[1] = my / mass - cy;
        params.push(a);
    }
    Ok(AlignStack {
        params,
        nominal_angles: p.nominal_angles.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::InterpScheme;
    use crate::projector::Roi;

    #[test]
    fn single_center_voxel_hits_weight_floor() {
        let shape = GridShape::cube(5);
        let mut m = Volume::<f64>::zeros(shape);
        m.set(2, 2, 2, 1.0);
        let w = compute_align_weights(&m).unwrap();
        assert_eq!(w.w[..3], [1.0; 3]);
        assert!(w.w[3..].iter().all(|&v| v == WEIGHT_FLOOR));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = Volume::<f64>::zeros(GridShape::cube(3));
        assert_eq!(compute_align_weights(&m), Err(AlignError::EmptyMask));
    }

    #[test]
    fn full_cube_weights_match_direct_sum() {
        let n = 32;
        let w = AlignWeights::<f64>::for_grid(GridShape::cube(n));
        let c = (n as f64 - 1.0) / 2.0;
        let mut s = 0.0;
        for y in 0..n {
            for x in 0..n {
                s += ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            }
        }
        let expected = s / (n * n) as f64;
        for j in 3..6 {
            assert!((w.w[j] - expected).abs() < 1e-12 * expected);
        }
    }

    #[test]
    fn prox_box_clamps_and_validates() {
        let nominal = vec![0.0, 1.0];
        let mut a = AlignStack::zeros(nominal);
        a.params[0].shift[0] = 7.0;
        a.params[1].theta_xy = -0.5;
        let lo = AlignParams::from_array([-2.0, -2.0, -2.0, -0.1, -0.1, -0.1]);
        let hi = AlignParams::from_array([2.0, 2.0, 2.0, 0.1, 0.1, 0.1]);
        let b = prox_box(&a, &lo, &hi, 1.0).unwrap();
        assert_eq!(b.params[0].shift[0], 2.0);
        assert_eq!(b.params[1].theta_xy, -0.1);
        assert!(prox_box(&a, &hi, &lo, 1.0).is_err());
    }

    #[test]
    fn com_of_impulse_and_centered_image() {
        let mut p = ProjectionStack::zeros(9, 9, vec![0.0], None);
        p.image_mut(0)[4 + 9 * 4] = 1.0;
        let a = com_prealign(&p, [9, 9]).unwrap();
        assert_eq!(a.params[0].shift, [0.0, 0.0, 0.0]);
        let mut p = ProjectionStack::zeros(9, 9, vec![0.0], None);
        p.image_mut(0)[7 + 9 * 2] = 1.0;
        let a = com_prealign(&p, [9, 9]).unwrap();
        assert_eq!(a.params[0].shift, [3.0, -2.0, 0.0]);
        assert!(com_prealign(&ProjectionStack::zeros(3, 3, vec![0.0], None), [3, 3]).is_err());
    }

    #[test]
    fn com_shift_reproduces_observed_data() {
        // a centered voxel projected with the recovered shifts lands on the impulse
        let shape = GridShape::cube(9);
        let mut u = Volume::zeros(shape);
        u.set(4, 4, 4, 1.0);
        let mut obs = ProjectionStack::zeros(9, 9, vec![0.0], None);
        obs.image_mut(0)[7 + 9 * 2] = 1.0;
        let a = com_prealign(&obs, [9, 9]).unwrap();
        let proj = Projector::new(shape, vec![0.0], InterpScheme::BICUBIC, None).unwrap();
        let sim = proj.project(&u, &a);
        assert!(sim.sub(&obs).norm() < 1e-12);
    }

    #[test]
    fn com_uses_detector_coordinates_for_windows() {
        let roi = Roi::centered([10, 10], [4, 4]);
        let mut p = ProjectionStack::zeros(4, 4, vec![0.0], Some(roi));
        p.image_mut(0)[0] = 1.0;
        let a = com_prealign(&p, [10, 10]).unwrap();
        assert_eq!(a.params[0].shift[..2], [3.0 - 4.5, 3.0 - 4.5]);
    }

    #[test]
    fn zero_residual_gives_zero_gradient_and_no_step() {
        let shape = GridShape::cube(8);
        let u = Volume::from_fn(shape, |x, y, z| ((x * 3 + y * 5 + z * 7) % 11) as f64);
        let proj = Projector::new(shape, vec![0.3], InterpScheme::BICUBIC, None).unwrap();
        let a = AlignParams::from_array([0.2, -0.1, 0.0, 0.01, 0.02, -0.03]);
        let p = proj.project_one(&u, 0, &a);
        let g = align_gradient(&proj, 0, &a, &u, &p);
        assert!(g.iter().all(|v| v.abs() < 1e-10), "{g:?}");
        let out = line_search_update(&proj, 0, &a, &u, &p, &StepOptions::default(), None);
        assert_eq!(out.params, a);
        assert_eq!(out.gamma, 0.0);
    }
}
