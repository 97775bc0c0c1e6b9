use std::path::Path;

use egofront::quality::{borda_aggregate, parse_ballots, RankAggregate};

use crate::failure::{Failure, Outcome};
use crate::rundir::write_atomic;

/// Aggregates a ballot file and writes `rank.json` and `rank.md`.
pub fn run(ballots: &Path, out: &Path) -> Outcome<RankAggregate> {
    if !ballots.is_file() {
        return Err(Failure::user(format!("ballot file {} not found", ballots.display())));
    }
    let text = std::fs::read_to_string(ballots)?;
    let agg = borda_aggregate(&parse_ballots(&text)?)?;
    if agg.total_points() != agg.expected_total_points() {
        return Err(Failure::internal(format!(
            "Borda total {} differs from {} ballots x {} points",
            agg.total_points(),
            agg.ballot_count,
            agg.expected_total_points() / agg.ballot_count.max(1) as u64
        )));
    }
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("rank.json"), serde_json::to_string_pretty(&agg)?.as_bytes())?;
    write_atomic(&out.join("rank.md"), agg.to_table().as_bytes())?;
    Ok(agg)
}
