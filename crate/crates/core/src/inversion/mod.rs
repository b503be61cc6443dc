//! Misfits, regularizers, projected Gauss-Newton and the continuation
//! pipelines.

pub mod gauss_newton;
pub mod misfit;
pub mod regularizer;
pub mod schedule;
pub mod survey;

pub use gauss_newton::{projected_gauss_newton, Evaluation, GnOptions, GnOutcome, GnTermination, MisfitParts, Objective};
pub use misfit::{eik_misfit_and_gradient, fwi_misfit_and_gradient, joint_objective, JointObjective, JointTerms};
pub use regularizer::{Regularizer, RegularizerConfig, RegularizerKind};
pub use schedule::{run_inversion, ContinuationSchedule, HistoryRow, InversionMode, InversionState};
pub use survey::{synthesize, ObservedData, Survey, SurveySpec};
