//! Outer loops of the joint alignment/reconstruction algorithms, stopping
//! rules and error metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{align_step, prox_box, AlignError, AlignWeights, StepOptions, StepRule};
use crate::geometry::{AlignParams, AlignStack, GeometryError, Param, TrivialModes, N_PARAMS};
use crate::projector::{ProjectionStack, Projector};
use crate::recon::{choose_alpha, gradient_norm_sq, reconstruct, ReconConfig, ReconError};
use crate::scalar::{self, Real};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Reconstruct, then one gradient step per projection.
    Smooth,
    /// As `Smooth`, followed by projection onto the parameter box.
    Prox,
    /// Reconstruct, then `n_align` gradient steps at the fixed volume.
    Alternating,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum EpsilonSchedule<T = f64> {
    Fixed { epsilon: T },
    /// `ε_k = epsilon0 · ratio^k`
    Geometric { epsilon0: T, ratio: T },
}

impl<T: Real> EpsilonSchedule<T> {
    pub fn at(&self, k: usize) -> T {
        match *self {
            EpsilonSchedule::Fixed { epsilon } => epsilon,
            EpsilonSchedule::Geometric { epsilon0, ratio } => epsilon0 * ratio.powi(k as i32),
        }
    }
}

/// Recomputes α each outer iteration from a decaying misalignment estimate
/// `delta0 · decay^k` (voxels).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaContinuation<T = f64> {
    pub delta0: T,
    pub decay: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverConfig<T = f64> {
    pub algorithm: Algorithm,
    pub n_align: usize,
    pub epsilon_schedule: EpsilonSchedule<T>,
    pub max_outer: usize,
    /// Stop once every projection moves less than this many voxels.
    pub stop_increment: T,
    pub recon: ReconConfig<T>,
    pub box_lo: Option<AlignParams<T>>,
    pub box_hi: Option<AlignParams<T>>,
    /// Weight of the quadratic pull towards the initial parameters.
    pub tether_lambda: T,
    pub step_rule: StepRule,
    /// Parameters being estimated, in `Param` order.
    pub fit: [bool; N_PARAMS],
    /// Defaults to the weights of the full grid.
    pub weights: Option<AlignWeights<T>>,
    /// Remove redundant modes from the iterate itself, not only from metrics.
    pub remove_modes_from_iterates: bool,
    pub alpha_continuation: Option<AlphaContinuation<T>>,
}

impl<T: Real> Default for DriverConfig<T> {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Smooth,
            n_align: 1,
            epsilon_schedule: EpsilonSchedule::Fixed { epsilon: T::lit(1e-4) },
            max_outer: 30,
            stop_increment: T::lit(0.05),
            recon: ReconConfig::default(),
            box_lo: None,
            box_hi: None,
            tether_lambda: T::zero(),
            step_rule: StepRule::Preconditioned,
            fit: StepOptions::<T>::default().fit,
            weights: None,
            remove_modes_from_iterates: false,
            alpha_continuation: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("n_align must be at least 1")]
    NAlign,
    #[error("stop_increment must be positive")]
    StopIncrement,
    #[error("geometric epsilon ratio must lie in (0, 1]")]
    Ratio,
    #[error("prox algorithm needs box_lo and box_hi")]
    MissingBox,
    #[error("tether_lambda must be nonnegative")]
    Tether,
    #[error(transparent)]
    Recon(#[from] ReconError),
}

impl<T: Real> DriverConfig<T> {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_align == 0 {
            return Err(ConfigError::NAlign);
        }
        if !(self.stop_increment > T::zero()) {
            return Err(ConfigError::StopIncrement);
        }
        if let EpsilonSchedule::Geometric { ratio, .. } = self.epsilon_schedule {
            if !(ratio > T::zero() && ratio <= T::one()) {
                return Err(ConfigError::Ratio);
            }
        }
        if self.algorithm == Algorithm::Prox && (self.box_lo.is_none() || self.box_hi.is_none()) {
            return Err(ConfigError::MissingBox);
        }
        if self.tether_lambda < T::zero() {
            return Err(ConfigError::Tether);
        }
        let probe = ReconConfig {
            epsilon: self.epsilon_schedule.at(0),
            ..self.recon.clone()
        };
        probe.validate()?;
        Ok(())
    }
}

/// Known ground truth for error metrics.
#[derive(Clone, Debug, Default)]
pub struct Truth<T = f64> {
    /// Reference volume, typically the reconstruction at the true alignment.
    pub volume: Option<Volume<T>>,
    pub align: Option<AlignStack<T>>,
}

/// Alignment error after removing redundant modes from the difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignErrorMetrics<T = f64> {
    /// RMS over lateral and axial shift entries, voxels.
    pub shift_rms: T,
    pub theta_xy_rms: T,
    pub theta_yz_rms: T,
    pub theta_zx_rms: T,
    /// RMS over in-plane and pitch angle entries, radians.
    pub non_tomo_rms: T,
    /// Per-projection RMS of the weighted error vector, voxels.
    pub weighted_rms: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord<T = f64> {
    pub iteration: usize,
    pub epsilon: T,
    pub alpha: T,
    pub recon_iterations: usize,
    pub recon_tolerance: T,
    /// `‖∇f̄_ε‖₂` at the alignment entering this iteration.
    pub optimality: T,
    /// `½‖W(a)u − p‖² + ½α‖∇u‖²` plus the tether term at the same point.
    pub objective: T,
    pub residual: T,
    /// Largest weighted per-projection increment, voxels.
    pub max_increment: T,
    pub halvings: usize,
    pub stalls: usize,
    pub recon_error: Option<T>,
    pub align_error: Option<AlignErrorMetrics<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Increment,
    MaxOuter,
}

#[derive(Clone, Debug)]
pub struct RunReport<T = f64> {
    pub records: Vec<IterationRecord<T>>,
    pub align: AlignStack<T>,
    pub volume: Volume<T>,
    pub weights: AlignWeights<T>,
    pub stop: StopReason,
}

#[derive(Debug, Error)]
pub enum DriverError<T: Real> {
    #[error("invalid driver configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("initial alignment has {got} projections, data has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("reconstruction failed in outer iteration {iteration}: {source}")]
    Recon {
        iteration: usize,
        source: ReconError,
        partial: Box<RunReport<T>>,
    },
}

/// Alignment error metrics of `estimate` against `truth`; the redundant
/// modes of the difference are removed first.
pub fn compute_metrics<T: Real>(
    estimate: &AlignStack<T>,
    truth: &AlignStack<T>,
    weights: &AlignWeights<T>,
) -> Result<AlignErrorMetrics<T>, GeometryError> {
    let modes = TrivialModes::new(&truth.nominal_angles)?;
    let diff = modes.remove(&estimate.difference(truth));
    let n = T::from_usize_lossy(diff.len());
    let col_sq = |p: Param| scalar::norm_sq(&diff.column(p));
    let shifts = col_sq(Param::ShiftX) + col_sq(Param::ShiftY);
    let xy = col_sq(Param::ThetaXy);
    let yz = col_sq(Param::ThetaYz);
    let zx = col_sq(Param::ThetaZx);
    let weighted = diff
        .params
        .iter()
        .fold(T::zero(), |s, a| s + weights.norm_sq(&a.to_array()));
    let two = T::lit(2.0);
    Ok(AlignErrorMetrics {
        shift_rms: (shifts / (two * n)).sqrt(),
        theta_xy_rms: (xy / n).sqrt(),
        theta_yz_rms: (yz / n).sqrt(),
        theta_zx_rms: (zx / n).sqrt(),
        non_tomo_rms: ((xy + yz) / (two * n)).sqrt(),
        weighted_rms: (weighted / n).sqrt(),
    })
}

/// Joint alignment and reconstruction from data `p` starting at `a0`.
pub fn run_joint<T: Real>(
    proj: &Projector<T>,
    p: &ProjectionStack<T>,
    a0: &AlignStack<T>,
    cfg: &DriverConfig<T>,
    truth: Option<&Truth<T>>,
) -> Result<RunReport<T>, DriverError<T>> {
    cfg.validate()?;
    if a0.len() != p.n_proj() {
        return Err(DriverError::LengthMismatch {
            expected: p.n_proj(),
            got: a0.len(),
        });
    }
    a0.validate()?;
    let weights = cfg.weights.unwrap_or_else(|| AlignWeights::for_grid(proj.shape));
    let modes = TrivialModes::new(&a0.nominal_angles)?;
    let opts = StepOptions {
        weights,
        rule: cfg.step_rule,
        fit: cfg.fit,
        max_halvings: 30,
    };
    let n_steps = match cfg.algorithm {
        Algorithm::Alternating => cfg.n_align,
        Algorithm::Smooth | Algorithm::Prox => 1,
    };
    let tether = (cfg.tether_lambda > T::zero()).then_some((cfg.tether_lambda, a0));

    let mut a = a0.clone();
    let mut u: Option<Volume<T>> = None;
    let mut records = Vec::new();
    let mut stop = StopReason::MaxOuter;

    for k in 0..cfg.max_outer {
        let mut rcfg = cfg.recon.clone();
        rcfg.epsilon = cfg.epsilon_schedule.at(k).min(T::one());
        if let Some(c) = cfg.alpha_continuation {
            let delta = c.delta0 * c.decay.powi(k as i32);
            rcfg.alpha = choose_alpha(delta, proj);
        }
        let start = if rcfg.warm_start { u.as_ref() } else { None };
        let rec = match reconstruct(proj, p, &a, &rcfg, start) {
            Ok(r) => r,
            Err(source) => {
                let partial = RunReport {
                    records,
                    align: a,
                    volume: u.unwrap_or_else(|| Volume::zeros(proj.shape)),
                    weights,
                    stop,
                };
                return Err(DriverError::Recon {
                    iteration: k,
                    source,
                    partial: Box::new(partial),
                });
            }
        };
        let vol = rec.volume;

        let mut next = a.clone();
        let mut halvings = 0;
        let mut stalls = 0;
        let mut optimality = T::zero();
        let mut data_term = T::zero();
        let mut align_objective = T::zero();
        for step in 0..n_steps {
            let outcomes = align_step(proj, &next, &vol, p, &opts, tether);
            if step == 0 {
                let g: Vec<T> = outcomes.iter().flat_map(|o| o.gradient).collect();
                optimality = scalar::norm(&g);
                data_term = outcomes.iter().fold(T::zero(), |s, o| s + o.data_term);
                align_objective = outcomes.iter().fold(T::zero(), |s, o| s + o.objective_before);
            }
            for (i, o) in outcomes.iter().enumerate() {
                next.params[i] = o.params;
                halvings += o.n_halvings;
                stalls += o.stalled as usize;
            }
        }
        if cfg.algorithm == Algorithm::Prox {
            let (lo, hi) = (cfg.box_lo.expect("validated"), cfg.box_hi.expect("validated"));
            next = prox_box(&next, &lo, &hi, T::one())?;
        }
        if cfg.remove_modes_from_iterates {
            next = modes.remove(&next);
        }
        let max_increment = next
            .params
            .iter()
            .zip(&a.params)
            .fold(T::zero(), |m, (n, o)| {
                let d = AlignParams::from_array(std::array::from_fn(|j| n.to_array()[j] - o.to_array()[j]));
                m.max(weights.max_motion(&d))
            });

        let recon_error = truth
            .and_then(|t| t.volume.as_ref())
            .map(|r| scalar::relative_l2(vol.data(), r.data()));
        let align_error = match truth.and_then(|t| t.align.as_ref()) {
            Some(t) => Some(compute_metrics(&next, t, &weights)?),
            None => None,
        };
        let record = IterationRecord {
            iteration: k,
            epsilon: rcfg.epsilon,
            alpha: rcfg.alpha,
            recon_iterations: rec.iterations,
            recon_tolerance: rec.achieved_tolerance,
            optimality,
            objective: align_objective + rcfg.alpha * gradient_norm_sq(&vol) * T::lit(0.5),
            residual: (data_term * T::lit(2.0)).sqrt(),
            max_increment,
            halvings,
            stalls,
            recon_error,
            align_error,
        };
        log::info!(
            "outer {k}: optimality {:.3e}, residual {:.4e}, max increment {:.3e}, cg {}",
            record.optimality.as_f64(),
            record.residual.as_f64(),
            record.max_increment.as_f64(),
            record.recon_iterations
        );
        records.push(record);
        a = next;
        u = Some(vol);
        if max_increment < cfg.stop_increment {
            stop = StopReason::Increment;
            break;
        }
    }
    Ok(RunReport {
        records,
        align: a,
        volume: u.unwrap_or_else(|| Volume::zeros(proj.shape)),
        weights,
        stop,
    })
}
