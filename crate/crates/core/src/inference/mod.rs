//! Placebo studies and conformal permutation tests.

mod conformal;
mod placebo;

pub use conformal::{
    conformal_pvalue, conformal_statistic, conformal_test, permutation_statistics, placebo_specification_test,
    ConformalResult, Histogram, PermutationScheme, SpecTestRow,
};
pub use placebo::{placebo_rank_report, run_placebos, run_unit, PlaceboRun, PlaceboStudy, RankReport, RankRow};
