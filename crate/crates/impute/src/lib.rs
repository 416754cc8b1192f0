//! Counterfactual completion of status streams for registrations that
//! ended in transplantation: each is matched to a risk set of similar,
//! still-waiting registrations and inherits the future of one of them.

pub mod cases;
pub mod complete;
pub mod km;
pub mod riskset;

pub use cases::{read_cases, read_landmarks, ImputationCase, Landmark, MatchAttributes};
pub use complete::{complete_stream, impute_future, Completion, ImputationInput};
pub use km::{weighted_km, StepSurvival};
pub use riskset::{build_risk_set, MatchConfig, RiskSet};
