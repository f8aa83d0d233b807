//! Averaged three-phase MMC model with additive-current reference
//! calculation that stays usable through singular grid voltage sags.
//!
//! The crate is split the way the signal flows: [`phasors`] does the
//! sequence bookkeeping, [`plant`] integrates the arm dynamics, [`refcalc`]
//! turns vertical power requests into additive current references,
//! [`control`] closes the loops, [`scenario`] describes the grid events and
//! [`simrunner`] ties it all together.

pub mod control;
pub mod error;
pub mod phasors;
pub mod plant;
pub mod refcalc;
pub mod scenario;
pub mod simrunner;

pub use error::Error;
pub use refcalc::MethodId;
pub use scenario::ScenarioSpec;
pub use simrunner::{run, run_summary, RunResult, SimConfig, TraceRecord};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/phasors.md")]
    mod phasors {}
    #[doc = include_str!("../../../book/src/plant.md")]
    mod plant {}
    #[doc = include_str!("../../../book/src/reference.md")]
    mod reference {}
    #[doc = include_str!("../../../book/src/control.md")]
    mod control {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/results.md")]
    mod results {}
}
