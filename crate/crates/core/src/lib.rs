//! Joint alignment and reconstruction for parallel-beam tomography.
//!
//! The crate models every projection as a rigid motion of the object followed
//! by a summation along the beam axis, `W_i(a_i) = S_z R(a_i)`, and recovers
//! both the object and the per-projection motion parameters by alternating
//! regularized reconstructions with gradient steps on the reduced
//! (image-eliminated) least-squares objective.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the
//! `*F32` aliases below name the single-precision instantiations, while the
//! generic types default to `f64`.

pub mod align;
pub mod driver;
pub mod geometry;
pub mod interp;
pub mod phantom;
pub mod projector;
pub mod recon;
pub mod scalar;
pub mod volume;

pub use align::{AlignWeights, LineSearchOutcome, StepRule};
pub use driver::{run_joint, Algorithm, DriverConfig, EpsilonSchedule, IterationRecord, RunReport, Truth};
pub use geometry::{AffineMap, AlignParams, AlignStack, GridShape, Param, N_PARAMS};
pub use interp::{Decomposition, InterpScheme, KernelKind, SparseWeights};
pub use phantom::{MisalignSpec, PhantomSpec, Support};
pub use projector::{ProjectionStack, Projector, Roi};
pub use recon::{ReconConfig, ReconMethod};
pub use scalar::Real;
pub use volume::Volume;

pub type VolumeF32 = Volume<f32>;
pub type AlignParamsF32 = AlignParams<f32>;
pub type AlignStackF32 = AlignStack<f32>;
pub type ProjectionStackF32 = ProjectionStack<f32>;
pub type ProjectorF32 = Projector<f32>;
pub type ReconConfigF32 = ReconConfig<f32>;
pub type DriverConfigF32 = DriverConfig<f32>;


