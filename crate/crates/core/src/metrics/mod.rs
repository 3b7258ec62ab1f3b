//! Evaluation metrics, bootstrap intervals and paired tests.

mod caption;
mod classification;
mod reports;
mod stats;

pub use caption::{
    bleu, cider, corpus_bleu, lcs_len, meteor_lite, rouge_l, rouge_n, stem, tokenize, PrfScore,
};
pub use classification::{accuracy, binary_auroc, confusion_matrix, dice_jac, macro_auroc, macro_f1};
pub use reports::{caption_reports, classification_reports, segmentation_reports, ReportSet};
pub use stats::{
    bootstrap_ci, bootstrap_indices, paired_t_test, paired_t_test_values, resample_indices, subgroup_report,
    BootstrapOptions, MetricReport, PairedTestResult, Replicates, SubgroupEntry, DEFAULT_REPLICATES,
    LOW_N_THRESHOLD,
};
