//! Discrimination and regression metrics, score separation, and the
//! statistical tests used to compare models across folds.

mod metrics;
mod report;
mod stats;

pub use metrics::{
    auroc, average_precision, binary_metrics, improvement_pct, regression_metrics,
    separation_stats, BinaryMetrics, RegressionMetrics, ScoreSet, Separation,
};
pub use report::{
    evaluate_scores, read_scores, score_set, summarize, write_fold_metrics, write_scores,
    write_stat_table, write_summary, MetricReport, ScoreRow, StatRow, SummaryRow,
};
pub use stats::{
    bonferroni_alpha, ci95, class_score_ttest, paired_t_test, rm_anova, welch_t_test, Sided,
    StatKind, StatResult, ALPHA,
};
