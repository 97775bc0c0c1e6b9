use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RANK_SCHEMA: &str = "egofront.rank";
pub const RANK_VERSION: u32 = 1;

/// One rater's complete ordering of the candidate methods, best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ballot {
    pub rater_id: String,
    pub ranking: Vec<String>,
}

impl Ballot {
    pub fn new(rater_id: impl Into<String>, ranking: &[&str]) -> Self {
        Self { rater_id: rater_id.into(), ranking: ranking.iter().map(|s| s.to_string()).collect() }
    }

    /// 1-based rank of `method`, if present.
    pub fn rank_of(&self, method: &str) -> Option<usize> {
        self.ranking.iter().position(|m| m == method).map(|i| i + 1)
    }
}

/// Parses `rater_id,method_1,...,method_k` lines. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_ballots(text: &str) -> Result<Vec<Ballot>> {
    let mut ballots = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let rater = fields.next().unwrap_or_default().to_string();
        let ranking: Vec<String> = fields.map(str::to_string).collect();
        if rater.is_empty() || ranking.is_empty() || ranking.iter().any(|m| m.is_empty()) {
            return Err(Error::InvalidBallot {
                rater: if rater.is_empty() { format!("line {}", i + 1) } else { rater },
                reason: "expected `rater_id,method_1,...,method_k`".into(),
            });
        }
        ballots.push(Ballot { rater_id: rater, ranking });
    }
    Ok(ballots)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    pub borda_score: u64,
    pub mean_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAggregate {
    pub schema: String,
    pub version: u32,
    /// Sorted by Borda score, best first; ties by method name.
    pub methods: Vec<MethodScore>,
    pub ballot_count: usize,
    pub method_count: usize,
}

impl RankAggregate {
    pub fn get(&self, method: &str) -> Option<&MethodScore> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn total_points(&self) -> u64 {
        self.methods.iter().map(|m| m.borda_score).sum()
    }

    /// `B * k * (k - 1) / 2`.
    pub fn expected_total_points(&self) -> u64 {
        let k = self.method_count as u64;
        self.ballot_count as u64 * k * (k.saturating_sub(1)) / 2
    }

    pub fn to_table(&self) -> String {
        let width = self.methods.iter().map(|m| m.method.len()).max().unwrap_or(6).max(6);
        let mut out = format!("| {:<width$} | {:>6} | {:>6} |\n", "Option", "BS ↑", "MR ↓");
        out.push_str(&format!("|{}|{}|{}|\n", "-".repeat(width + 2), "-".repeat(8), "-".repeat(8)));
        for m in &self.methods {
            out.push_str(&format!("| {:<width$} | {:>6} | {:>6.2} |\n", m.method, m.borda_score, m.mean_rank));
        }
        out.push_str(&format!("\n{} ballots, {} methods\n", self.ballot_count, self.method_count));
        out
    }
}

/// Borda aggregation: each ballot awards `k - rank` points to every method.
pub fn borda_aggregate(ballots: &[Ballot]) -> Result<RankAggregate> {
    let first = ballots.first().ok_or_else(|| Error::InvalidInput("no ballots".into()))?;
    let methods: BTreeSet<&str> = first.ranking.iter().map(String::as_str).collect();
    let k = methods.len();

    let mut points: BTreeMap<&str, u64> = methods.iter().map(|m| (*m, 0)).collect();
    let mut rank_sums: BTreeMap<&str, u64> = methods.iter().map(|m| (*m, 0)).collect();
    for ballot in ballots {
        let reject = |reason: String| Error::InvalidBallot { rater: ballot.rater_id.clone(), reason };
        let mut seen = BTreeSet::new();
        for m in &ballot.ranking {
            if !seen.insert(m.as_str()) {
                return Err(reject(format!("method `{m}` ranked twice")));
            }
            if !methods.contains(m.as_str()) {
                return Err(reject(format!("unknown method `{m}`")));
            }
        }
        if let Some(missing) = methods.iter().find(|m| !seen.contains(*m)) {
            return Err(reject(format!("method `{missing}` not ranked")));
        }
        for (i, m) in ballot.ranking.iter().enumerate() {
            let rank = i + 1;
            *points.get_mut(m.as_str()).unwrap() += (k - rank) as u64;
            *rank_sums.get_mut(m.as_str()).unwrap() += rank as u64;
        }
    }

    let b = ballots.len();
    let mut scores: Vec<MethodScore> = methods
        .iter()
        .map(|m| MethodScore {
            method: m.to_string(),
            borda_score: points[m],
            mean_rank: rank_sums[m] as f64 / b as f64,
        })
        .collect();
    scores.sort_by(|a, b| b.borda_score.cmp(&a.borda_score).then(a.method.cmp(&b.method)));
    Ok(RankAggregate {
        schema: RANK_SCHEMA.into(),
        version: RANK_VERSION,
        methods: scores,
        ballot_count: b,
        method_count: k,
    })
}
