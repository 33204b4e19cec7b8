//! Experiment configuration file. Angles are given in degrees.

use crate::CliError;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use tomoalign::align::compute_align_weights;
use tomoalign::driver::AlphaContinuation;
use tomoalign::{
    Algorithm, AlignParams, AlignWeights, DriverConfig, EpsilonSchedule, GridShape, InterpScheme, MisalignSpec, Param,
    PhantomSpec, ReconConfig, ReconMethod, Roi, StepRule, N_PARAMS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SchemeName {
    Trilinear,
    Tricubic,
    Bilinear,
    Bicubic,
}

impl SchemeName {
    pub fn scheme(self) -> InterpScheme {
        match self {
            SchemeName::Trilinear => InterpScheme::TRILINEAR,
            SchemeName::Tricubic => InterpScheme::TRICUBIC,
            SchemeName::Bilinear => InterpScheme::BILINEAR,
            SchemeName::Bicubic => InterpScheme::BICUBIC,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiSpec {
    pub extent: [usize; 2],
    /// Top-left corner on the detector; centered when absent.
    #[serde(default)]
    pub offset: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Acquisition {
    pub n_proj: usize,
    pub start_deg: f64,
    pub stop_deg: f64,
    /// Whether `stop_deg` itself is a sample.
    pub inclusive: bool,
    pub roi: Option<RoiSpec>,
}

impl Default for Acquisition {
    fn default() -> Self {
        Self {
            n_proj: 48,
            start_deg: 0.0,
            stop_deg: 180.0,
            inclusive: false,
            roi: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Simulation {
    pub scheme: SchemeName,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Default for Simulation {
    fn default() -> Self {
        Self {
            scheme: SchemeName::Trilinear,
            noise_sigma: 0.0,
            noise_seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Reconstruction {
    pub scheme: SchemeName,
    /// Fixed regularization weight; chosen from `alpha_delta` when absent.
    pub alpha: Option<f64>,
    /// Misalignment scale (voxels) balanced by the heuristic weight.
    pub alpha_delta: f64,
    pub max_iter: usize,
    pub method: ReconMethod,
    pub nonneg: bool,
    pub inner_iter: usize,
    pub warm_start: bool,
}

impl Default for Reconstruction {
    fn default() -> Self {
        let r = ReconConfig::<f64>::default();
        Self {
            scheme: SchemeName::Bicubic,
            alpha: None,
            alpha_delta: 2.0,
            max_iter: 1000,
            method: r.method,
            nonneg: r.nonneg,
            inner_iter: r.inner_iter,
            warm_start: r.warm_start,
        }
    }
}

/// Box bound in file units: shifts in voxels, angles in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBound {
    pub s_x: f64,
    pub s_y: f64,
    pub s_z: f64,
    pub theta_xy_deg: f64,
    pub theta_yz_deg: f64,
    pub theta_zx_deg: f64,
}

impl ParamBound {
    fn params(&self) -> AlignParams<f64> {
        AlignParams::from_array([
            self.s_x,
            self.s_y,
            self.s_z,
            self.theta_xy_deg.to_radians(),
            self.theta_yz_deg.to_radians(),
            self.theta_zx_deg.to_radians(),
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSource {
    /// Mean motion over the phantom support.
    Support,
    /// Mean motion over the whole grid.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriverSection {
    pub algorithm: Algorithm,
    pub n_align: usize,
    pub epsilon: EpsilonSchedule<f64>,
    pub max_outer: usize,
    pub stop_increment: f64,
    pub box_lo: Option<ParamBound>,
    pub box_hi: Option<ParamBound>,
    pub tether_lambda: f64,
    pub step_rule: StepRule,
    pub fit: Vec<Param>,
    pub weights: WeightSource,
    pub remove_modes_from_iterates: bool,
    pub alpha_continuation: Option<AlphaContinuation<f64>>,
    /// Start from center-of-mass shifts instead of zero.
    pub com_prealign: bool,
}

impl Default for DriverSection {
    fn default() -> Self {
        let d = DriverConfig::<f64>::default();
        Self {
            algorithm: d.algorithm,
            n_align: d.n_align,
            epsilon: d.epsilon_schedule,
            max_outer: d.max_outer,
            stop_increment: d.stop_increment,
            box_lo: None,
            box_hi: None,
            tether_lambda: d.tether_lambda,
            step_rule: d.step_rule,
            fit: Param::ALL.into_iter().filter(|p| d.fit[p.index()]).collect(),
            weights: WeightSource::Support,
            remove_modes_from_iterates: d.remove_modes_from_iterates,
            alpha_continuation: d.alpha_continuation,
            com_prealign: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; when set, phantom, misalignment and noise seeds derive from it.
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub phantom: PhantomSpec,
    pub acquisition: Acquisition,
    pub misalignment: MisalignSpec,
    pub simulation: Simulation,
    pub reconstruction: Reconstruction,
    pub driver: DriverSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Schema(format!("at `{path}`: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the master seed to the per-component seeds.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.phantom.seed = s;
            self.misalignment.seed = s.wrapping_add(1);
            self.simulation.noise_seed = s.wrapping_add(2);
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |path: &str, msg: &str| Err(CliError::Schema(format!("at `{path}`: {msg}")));
        if self.phantom.n < 4 {
            return bad("phantom.n", "grid must have at least 4 voxels per side");
        }
        if !(self.phantom.density_min >= 0.0 && self.phantom.density_min <= self.phantom.density_max) {
            return bad("phantom.density_min", "densities must satisfy 0 <= min <= max");
        }
        if self.acquisition.n_proj < 2 {
            return bad("acquisition.n_proj", "need at least 2 projections");
        }
        if !(self.acquisition.stop_deg > self.acquisition.start_deg) {
            return bad("acquisition.stop_deg", "must exceed start_deg");
        }
        if let Some(r) = &self.acquisition.roi {
            if self.roi().map_or(true, |roi| !roi.fits([self.phantom.n, self.phantom.n])) || r.extent.contains(&0) {
                return bad("acquisition.roi", "window does not fit on the detector");
            }
        }
        if !(self.simulation.noise_sigma >= 0.0) {
            return bad("simulation.noise_sigma", "must be nonnegative");
        }
        if let Some(a) = self.reconstruction.alpha {
            if !(a > 0.0) {
                return bad("reconstruction.alpha", "must be positive");
            }
        }
        if !(self.reconstruction.alpha_delta > 0.0) {
            return bad("reconstruction.alpha_delta", "must be positive");
        }
        let probe = self.driver_config(1.0, AlignWeights::unit());
        probe.validate().map_err(|e| CliError::Schema(format!("at `driver`: {e}")))?;
        Ok(())
    }

    pub fn shape(&self) -> GridShape {
        GridShape::cube(self.phantom.n)
    }

    pub fn nominal_angles(&self) -> Vec<f64> {
        let a = &self.acquisition;
        tomoalign::AlignStack::uniform_angles(a.n_proj, a.start_deg.to_radians(), a.stop_deg.to_radians(), a.inclusive)
    }

    pub fn roi(&self) -> Option<Roi> {
        let n = self.phantom.n;
        self.acquisition.roi.as_ref().and_then(|r| match r.offset {
            Some(offset) => Some(Roi { offset, extent: r.extent }),
            None if r.extent[0] <= n && r.extent[1] <= n => Some(Roi::centered([n, n], r.extent)),
            None => None,
        })
    }

    pub fn weights(&self) -> AlignWeights<f64> {
        match self.driver.weights {
            WeightSource::Grid => AlignWeights::for_grid(self.shape()),
            WeightSource::Support => compute_align_weights(&self.phantom.support.mask::<f64>(self.shape()))
                .unwrap_or_else(|_| AlignWeights::for_grid(self.shape())),
        }
    }

    pub fn driver_config(&self, alpha: f64, weights: AlignWeights<f64>) -> DriverConfig<f64> {
        let d = &self.driver;
        let r = &self.reconstruction;
        let mut fit = [false; N_PARAMS];
        for p in &d.fit {
            fit[p.index()] = true;
        }
        DriverConfig {
            algorithm: d.algorithm,
            n_align: d.n_align,
            epsilon_schedule: d.epsilon,
            max_outer: d.max_outer,
            stop_increment: d.stop_increment,
            recon: ReconConfig {
                alpha,
                epsilon: d.epsilon.at(0).min(1.0),
                max_iter: r.max_iter,
                method: r.method,
                nonneg: r.nonneg,
                inner_iter: r.inner_iter,
                warm_start: r.warm_start,
            },
            box_lo: d.box_lo.map(|b| b.params()),
            box_hi: d.box_hi.map(|b| b.params()),
            tether_lambda: d.tether_lambda,
            step_rule: d.step_rule,
            fit,
            weights: Some(weights),
            remove_modes_from_iterates: d.remove_modes_from_iterates,
            alpha_continuation: d.alpha_continuation,
        }
    }
}
