//! Rashomon-set search for explanation models that agree with stakeholder
//! feature rankings.
//!
//! The pipeline: train a reference model, sample masked models whose loss
//! stays near the reference ([`rashomon`]), record their permutation
//! importances ([`attribution`]), fit a differentiable surrogate from masks to
//! attributions ([`dman`]), then search mask heads toward a target ranking
//! through a soft sorting network ([`diffsort`], [`saem`]). Targets come from
//! a small preference language ([`elicitation`]); results are scored with
//! the agreement metrics in [`metrics`].

pub mod attribution;
pub mod data;
pub mod diffsort;
pub mod dman;
pub mod elicitation;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rashomon;
pub mod saem;

pub use attribution::{rank_by_magnitude, rank_of, AttributionDataset, AttributionVector, BaselineKind, Ranking};
pub use data::{Dataset, FeatureKind, FeatureMeta, TaskSplit};
pub use diffsort::{SoftPermutation, SortingNetworkPlan};
pub use dman::{DmanConfig, DmanModel};
pub use elicitation::{PreferenceError, PreferenceProgram};
pub use error::{Error, Result};
pub use metrics::{AgreementReport, FairnessReport};
pub use models::{LinearModel, Mask, MaskState, MaskedModel, MlpModel, Model, Predictor};
pub use rashomon::{Exploration, RashomonConfig, RashomonSample};
pub use saem::{MhmnConfig, SaemResult, StakeholderTarget, TargetSource};
