//! Reconstruction at fixed alignment.
//!
//! Minimizes `‖W(a)u − p‖² + α‖∇u‖²` by conjugate gradients on the normal
//! equations, or approximately by symmetric block-Kaczmarz cycles. `∇` is the
//! forward-difference gradient with zero-flux boundary.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::AlignStack;
use crate::projector::{ProjectionStack, Projector};
use crate::scalar::{self, Real};
use crate::volume::Volume;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconError {
    #[error("invalid reconstruction settings: {0}")]
    InvalidConfig(String),
    #[error("reconstruction diverged at iteration {iteration} (non-finite or indefinite curvature)")]
    Diverged { iteration: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconMethod {
    Cg,
    Kaczmarz,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig<T = f64> {
    pub alpha: T,
    /// Gradient tolerance relative to the gradient at the zero volume.
    pub epsilon: T,
    /// CG iterations, or Kaczmarz cycles.
    pub max_iter: usize,
    pub method: ReconMethod,
    pub nonneg: bool,
    /// CG steps per Kaczmarz block.
    pub inner_iter: usize,
    pub warm_start: bool,
}

impl<T: Real> Default for ReconConfig<T> {
    fn default() -> Self {
        Self {
            alpha: T::lit(1e3),
            epsilon: T::lit(1e-4),
            max_iter: 500,
            method: ReconMethod::Cg,
            nonneg: false,
            inner_iter: 10,
            warm_start: true,
        }
    }
}

impl<T: Real> ReconConfig<T> {
    pub fn validate(&self) -> Result<(), ReconError> {
        if !(self.alpha > T::zero()) || !self.alpha.is_finite() {
            return Err(ReconError::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.epsilon > T::zero() && self.epsilon <= T::one()) {
            return Err(ReconError::InvalidConfig(format!("epsilon must lie in (0, 1], got {}", self.epsilon)));
        }
        if self.inner_iter == 0 {
            return Err(ReconError::InvalidConfig("inner_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of a reconstruction.
#[derive(Clone, Debug)]
pub struct ReconOutput<T = f64> {
    pub volume: Volume<T>,
    /// CG iterations or Kaczmarz cycles performed.
    pub iterations: usize,
    /// `‖∇_u f‖ / ‖∇_u f(0)‖` at the returned volume.
    pub achieved_tolerance: T,
    pub converged: bool,
    /// Quadratic energy `½uᵀAu − bᵀu` after each CG iteration, starting with `u0`.
    pub energy: Vec<T>,
}

/// Forward-difference gradient with zero-flux boundary, one volume per axis.
pub fn discrete_gradient<T: Real>(u: &Volume<T>) -> [Volume<T>; 3] {
    let s = u.shape();
    let [sx, sy, sz] = s.strides();
    let ext = s.extents();
    std::array::from_fn(|axis| {
        let stride = [sx, sy, sz][axis];
        let d = u.data();
        let mut out = vec![T::zero(); s.len()];
        out.par_chunks_mut(s.nx * s.ny).enumerate().for_each(|(z, slab)| {
            for y in 0..s.ny {
                for x in 0..s.nx {
                    let c = [x, y, z][axis];
                    if c + 1 < ext[axis] {
                        let k = s.index(x, y, z);
                        slab[x + s.nx * y] = d[k + stride] - d[k];
                    }
                }
            }
        });
        Volume::from_vec(s, out)
    })
}

/// Transpose of [`discrete_gradient`].
pub fn discrete_divergence_adjoint<T: Real>(g: &[Volume<T>; 3]) -> Volume<T> {
    let s = g[0].shape();
    let strides = s.strides();
    let ext = s.extents();
    let mut out = vec![T::zero(); s.len()];
    out.par_chunks_mut(s.nx * s.ny).enumerate().for_each(|(z, slab)| {
        for y in 0..s.ny {
            for x in 0..s.nx {
                let k = s.index(x, y, z);
                let mut acc = T::zero();
                for axis in 0..3 {
                    let c = [x, y, z][axis];
                    let d = g[axis].data();
                    if c + 1 < ext[axis] {
                        acc -= d[k];
                    }
                    if c > 0 {
                        acc += d[k - strides[axis]];
                    }
                }
                slab[x + s.nx * y] = acc;
            }
        }
    });
    Volume::from_vec(s, out)
}

/// `∇ᵀ∇u`, the Neumann graph Laplacian (positive semidefinite).
pub fn gradient_penalty<T: Real>(u: &Volume<T>) -> Volume<T> {
    let s = u.shape();
    let strides = s.strides();
    let ext = s.extents();
    let d = u.data();
    let mut out = vec![T::zero(); s.len()];
    out.par_chunks_mut(s.nx * s.ny).enumerate().for_each(|(z, slab)| {
        for y in 0..s.ny {
            for x in 0..s.nx {
                let k = s.index(x, y, z);
                let mut acc = T::zero();
                for axis in 0..3 {
                    let c = [x, y, z][axis];
                    if c + 1 < ext[axis] {
                        acc += d[k] - d[k + strides[axis]];
                    }
                    if c > 0 {
                        acc += d[k] - d[k - strides[axis]];
                    }
                }
                slab[x + s.nx * y] = acc;
            }
        }
    });
    Volume::from_vec(s, out)
}

/// `‖∇u‖²`
pub fn gradient_norm_sq<T: Real>(u: &Volume<T>) -> T {
    discrete_gradient(u).iter().fold(T::zero(), |acc, g| acc + scalar::norm_sq(g.data()))
}

/// `(WᵀW + α∇ᵀ∇)u`
pub fn normal_operator<T: Real>(proj: &Projector<T>, a: &AlignStack<T>, alpha: T, u: &Volume<T>) -> Volume<T> {
    let mut out = proj.backproject(&proj.project(u, a), a);
    let lap = gradient_penalty(u);
    scalar::axpy(alpha, lap.data(), out.data_mut());
    out
}

/// Regularization weight that balances data fidelity and the gradient
/// penalty at the misalignment scale `delta` (voxels).
///
/// For each axis a cosine mode with wavelength `2·delta` is synthesized and
/// the ratio `‖W u‖² / ‖∇u‖²` evaluated at zero misalignment; the three ratios
/// are combined by their harmonic mean. `delta` is clamped to the Nyquist
/// limit of 2 voxels.
pub fn choose_alpha<T: Real>(delta: T, proj: &Projector<T>) -> T {
    let delta = delta.max(T::lit(2.0));
    let xi = T::PI() / delta;
    let a = AlignStack::zeros(proj.nominal_angles.clone());
    let full = proj.with_roi(None);
    let c = proj.shape.center::<T>();
    let mut inv_sum = T::zero();
    for axis in 0..3 {
        let u = Volume::from_fn(proj.shape, |x, y, z| {
            let pos = T::from_usize_lossy([x, y, z][axis]) - c[axis];
            (xi * pos).cos()
        });
        let num = scalar::norm_sq(&full.project(&u, &a).images);
        let den = gradient_norm_sq(&u);
        inv_sum += den / num;
    }
    T::lit(3.0) / inv_sum
}

fn check_inputs<T: Real>(proj: &Projector<T>, p: &ProjectionStack<T>, a: &AlignStack<T>, u0: Option<&Volume<T>>) {
    assert_eq!(a.len(), proj.n_proj(), "alignment stack length mismatch");
    assert_eq!(p.n_proj(), proj.n_proj(), "projection count mismatch");
    if let Some(u) = u0 {
        assert_eq!(u.shape(), proj.shape, "initial volume does not match grid");
    }
}

/// Conjugate gradients on `(WᵀW + α∇ᵀ∇)u = Wᵀp`.
pub fn solve_tikhonov_cg<T: Real>(
    proj: &Projector<T>,
    p: &ProjectionStack<T>,
    a: &AlignStack<T>,
    cfg: &ReconConfig<T>,
    u0: Option<&Volume<T>>,
) -> Result<ReconOutput<T>, ReconError> {
    cfg.validate()?;
    check_inputs(proj, p, a, u0);
    let b = proj.backproject(p, a);
    let reference = b.norm();
    let mut u = u0.cloned().unwrap_or_else(|| Volume::zeros(proj.shape));
    if reference.is_zero() {
        return Ok(ReconOutput {
            volume: Volume::zeros(proj.shape),
            iterations: 0,
            achieved_tolerance: T::zero(),
            converged: true,
            energy: vec![T::zero()],
        });
    }
    if !reference.is_finite() {
        return Err(ReconError::Diverged { iteration: 0 });
    }
    let mut r = b.clone();
    if u0.is_some() {
        let au = normal_operator(proj, a, cfg.alpha, &u);
        scalar::axpy(-T::one(), au.data(), r.data_mut());
    }
    let energy_of = |u: &Volume<T>, r: &Volume<T>| {
        // ½uᵀAu − bᵀu = −½uᵀ(b + r)
        -(u.dot(&b) + u.dot(r)) * T::lit(0.5)
    };
    let mut energy = vec![energy_of(&u, &r)];
    let target = cfg.epsilon * reference;
    let mut rr = r.dot(&r);
    let mut dir = r.clone();
    let mut iterations = 0;
    while rr.sqrt() > target && iterations < cfg.max_iter {
        let ad = normal_operator(proj, a, cfg.alpha, &dir);
        let curv = dir.dot(&ad);
        if !(curv > T::zero()) || !curv.is_finite() {
            return Err(ReconError::Diverged { iteration: iterations });
        }
        let step = rr / curv;
        scalar::axpy(step, dir.data(), u.data_mut());
        scalar::axpy(-step, ad.data(), r.data_mut());
        let rr_new = r.dot(&r);
        if !rr_new.is_finite() {
            return Err(ReconError::Diverged { iteration: iterations });
        }
        let beta = rr_new / rr;
        dir.data_mut()
            .par_iter_mut()
            .zip(r.data().par_iter())
            .for_each(|(d, &ri)| *d = ri + beta * *d);
        rr = rr_new;
        iterations += 1;
        energy.push(energy_of(&u, &r));
        log::trace!("cg iteration {iterations}: relative residual {}", rr.sqrt() / reference);
    }
    let achieved = rr.sqrt() / reference;
    Ok(ReconOutput {
        volume: u,
        iterations,
        achieved_tolerance: achieved,
        converged: rr.sqrt() <= target,
        energy,
    })
}

/// Angular binary-subdivision order: level `L` visits the midpoints of the
/// intervals left by the previous levels; bit reversal for powers of two.
pub fn multilevel_order(n: usize) -> Vec<usize> {
    assert!(n >= 1, "multilevel order needs at least one element");
    let mut order = vec![0];
    let mut seen = vec![false; n];
    seen[0] = true;
    let mut level = 1u32;
    while order.len() < n {
        let denom = 1usize << level;
        let bits = level - 1;
        for m in 0..(1usize << bits) {
            let rev = if bits == 0 { 0 } else { m.reverse_bits() >> (usize::BITS - bits) };
            let k = 2 * rev + 1;
            let pos = k * n / denom;
            if pos < n && !seen[pos] {
                seen[pos] = true;
                order.push(pos);
            }
        }
        if denom >= n {
            // every index is reached once the subdivision is finer than the grid
            for (i, s) in seen.iter_mut().enumerate() {
                if !*s {
                    *s = true;
                    order.push(i);
                }
            }
        }
        level += 1;
    }
    order
}

/// Block visit sequence of one symmetric cycle: the multilevel order
/// followed by its reverse.
pub fn kaczmarz_sequence(n: usize) -> Vec<usize> {
    let order = multilevel_order(n);
    order.iter().chain(order.iter().rev()).copied().collect()
}

/// One symmetric block-Kaczmarz cycle. Each block step solves
/// `(W_mᵀW_m + α/2 ∇ᵀ∇) Δ = W_mᵀ(p_m − W_m u)` approximately with
/// `inner_iter` CG steps and updates `u += Δ`, clamping negatives if
/// `nonneg` is set.
pub fn kaczmarz_cycle<T: Real>(
    proj: &Projector<T>,
    p: &ProjectionStack<T>,
    a: &AlignStack<T>,
    cfg: &ReconConfig<T>,
    u0: Option<&Volume<T>>,
) -> Result<Volume<T>, ReconError> {
    cfg.validate()?;
    check_inputs(proj, p, a, u0);
    let mut u = u0.cloned().unwrap_or_else(|| Volume::zeros(proj.shape));
    let half_alpha = cfg.alpha * T::lit(0.5);
    for (step, m) in kaczmarz_sequence(proj.n_proj()).into_iter().enumerate() {
        let am = &a.params[m];
        let mut resid = proj.project_one(&u, m, am);
        for (r, &pm) in resid.iter_mut().zip(p.image(m)) {
            *r = pm - *r;
        }
        let rhs = proj.backproject_one(&resid, m, am);
        let block_op = |v: &Volume<T>| {
            let mut out = proj.backproject_one(&proj.project_one(v, m, am), m, am);
            scalar::axpy(half_alpha, gradient_penalty(v).data(), out.data_mut());
            out
        };
        let mut delta = Volume::zeros(proj.shape);
        let mut r = rhs;
        let mut dir = r.clone();
        let mut rr = r.dot(&r);
        for _ in 0..cfg.inner_iter {
            if rr.is_zero() {
                break;
            }
            let ad = block_op(&dir);
            let curv = dir.dot(&ad);
            if !(curv > T::zero()) || !curv.is_finite() {
                return Err(ReconError::Diverged { iteration: step });
            }
            let s = rr / curv;
            scalar::axpy(s, dir.data(), delta.data_mut());
            scalar::axpy(-s, ad.data(), r.data_mut());
            let rr_new = r.dot(&r);
            let beta = rr_new / rr;
            dir.data_mut()
                .par_iter_mut()
                .zip(r.data().par_iter())
                .for_each(|(d, &ri)| *d = ri + beta * *d);
            rr = rr_new;
        }
        scalar::axpy(T::one(), delta.data(), u.data_mut());
        if cfg.nonneg {
            u.data_mut().par_iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero();
                }
            });
        }
        if !u.is_finite() {
            return Err(ReconError::Diverged { iteration: step });
        }
    }
    Ok(u)
}

/// Relative Tikhonov gradient `‖(WᵀW + α∇ᵀ∇)u − Wᵀp‖ / ‖Wᵀp‖`.
pub fn relative_gradient<T: Real>(
    proj: &Projector<T>,
    p: &ProjectionStack<T>,
    a: &AlignStack<T>,
    alpha: T,
    u: &Volume<T>,
) -> T {
    let b = proj.backproject(p, a);
    let reference = b.norm();
    let mut g = normal_operator(proj, a, alpha, u);
    scalar::axpy(-T::one(), b.data(), g.data_mut());
    if reference.is_zero() {
        g.norm()
    } else {
        g.norm() / reference
    }
}

/// Dispatches on `cfg.method`. Kaczmarz runs up to `max_iter` symmetric
/// cycles and stops early once the Tikhonov gradient tolerance is met.
pub fn reconstruct<T: Real>(
    proj: &Projector<T>,
    p: &ProjectionStack<T>,
    a: &AlignStack<T>,
    cfg: &ReconConfig<T>,
    u0: Option<&Volume<T>>,
) -> Result<ReconOutput<T>, ReconError> {
    match cfg.method {
        ReconMethod::Cg => solve_tikhonov_cg(proj, p, a, cfg, u0),
        ReconMethod::Kaczmarz => {
            cfg.validate()?;
            let mut u = u0.cloned().unwrap_or_else(|| Volume::zeros(proj.shape));
            let mut achieved = relative_gradient(proj, p, a, cfg.alpha, &u);
            let mut cycles = 0;
            while cycles < cfg.max_iter.max(1) && !(achieved <= cfg.epsilon) {
                u = kaczmarz_cycle(proj, p, a, cfg, Some(&u))?;
                cycles += 1;
                achieved = relative_gradient(proj, p, a, cfg.alpha, &u);
            }
            Ok(ReconOutput {
                volume: u,
                iterations: cycles,
                achieved_tolerance: achieved,
                converged: achieved <= cfg.epsilon,
                energy: Vec::new(),
            })
        }
    }
}
