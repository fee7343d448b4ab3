//! Multi-group differential item functioning (DIF) detection for
//! dichotomous 2PL/3PL items.
//!
//! - [`irt`]: item model, quadrature grids and effect sizes.
//! - [`estimation`]: multi-group EM calibration, Wald forms and logistic fits.
//! - [`dif`]: RMSD, Wald-2/Wald-1, GLR and GMH.
//! - [`simgen`]: the simulation design and data generation.
//! - [`harness`]: resumable Monte Carlo runs, metrics, reports and acceptance checks.
//!
//! ```
//! use mgdif::dif::rmsd::{run_rmsd, CutoffPolicy};
//! use mgdif::estimation::AnalysisSetup;
//! use mgdif::irt::Model;
//! use mgdif::simgen::toy_dataset;
//!
//! let data = toy_dataset(300, 6, 2, 1);
//! let setup = AnalysisSetup::new(vec![Model::TwoPL; 6]);
//! let result = run_rmsd(&data, &setup, CutoffPolicy::Predicted).unwrap();
//! assert_eq!(result.flagged.len(), 6);
//! ```

pub mod booklet;
pub mod data;
pub mod dif;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod irt;
pub mod simgen;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/rmsd.md")]
    mod rmsd {}
    #[doc = include_str!("../../../book/src/wald.md")]
    mod wald {}
    #[doc = include_str!("../../../book/src/score-based.md")]
    mod score_based {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
