//! Evaluation instruments: masked PSNR/SSIM, body-region splits, report
//! aggregation, garment-type accuracy and Borda ranking.

mod clothing;
mod pixel;
mod ranking;
mod regions;
mod report;

pub use clothing::{clothing_accuracy, clothing_accuracy_from_str, ClothingAccuracy, ClothingClassifier};
pub use pixel::{masked_mse, psnr, psnr_with_cap, ssim, PSNR_CAP_DB, SSIM_SIGMA, SSIM_WINDOW};
pub use ranking::{borda_aggregate, parse_ballots, Ballot, MethodScore, RankAggregate, RANK_SCHEMA, RANK_VERSION};
pub use regions::{split_regions, Region, RegionMasks, DEFAULT_HIP_FRACTION};
pub use report::{
    format_table, region_eval, region_eval_default, EvalReport, MeanStd, PerceptualMetric, RegionStats, TableRow,
    REPORT_SCHEMA, REPORT_VERSION,
};
