//! Cox proportional-hazards fitting (Efron ties, Wald intervals) and
//! prognostic scoring of deployed fold models.

mod cox;
mod prognosis;

pub use cox::{fit_cox, CoxCoefficient, CoxResult, SurvivalDataset, MONOTONE_BETA};
pub use prognosis::{
    deploy_mean_scores, score_prognosis, survival_dataset, survival_rows, write_survival_report,
    CovariateSet, Prognosis, ScoreMode, SurvivalRow,
};
