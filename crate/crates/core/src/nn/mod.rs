//! Parameterized layers over the tape: weight storage, forward context, and
//! the conv/BN/linear/residual building blocks shared by all architectures.

mod forward;
mod modules;
mod params;

pub use forward::{absorb, Forward, Mode, Outcome};
pub use modules::{unit_param_count, BatchNorm3d, Conv3d, Linear, ResidualUnit, UnitKind};
pub use params::{Builder, Init, ParamId, ParamStore, Parameter, RunningStats, StatStore, StatsId};
