use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Device;
use egofront::datapipe::Split;
use egofront::evaluate::EvalOptions;
use egofront::objective::{load_checkpoint, read_checkpoint_meta, RunFiles};
use egofront::quality::{format_table, EvalReport, TableRow};
use egofront::{Error, RunConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::evaluate_trained;
use crate::failure::{Failure, Outcome};
use crate::rundir::{write_atomic, DirLock};
use crate::train::{run_dir, train, LoadedConfig, Resume};

/// An ablation sweep: a base configuration and a set of config keys, each
/// with the values to try. Every combination is trained and evaluated.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matrix {
    /// Base config file, relative to the matrix file.
    #[serde(default)]
    pub base: Option<PathBuf>,
    /// `key=value` overrides applied to every cell.
    #[serde(default)]
    pub set: Vec<String>,
    #[serde(default = "default_split")]
    pub eval_split: Split,
    #[serde(default)]
    pub toy_classifier: bool,
    pub axes: toml::Table,
}

fn default_split() -> Split {
    Split::Val
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub tags: Vec<(String, String)>,
    pub config_hash: String,
    pub report: Option<EvalReport>,
    /// Why the cell could not be run.
    pub unavailable: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct AblationReport {
    pub schema: &'static str,
    pub version: u32,
    pub matrix_hash: String,
    pub rows: Vec<AblationRow>,
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn cells(axes: &toml::Table) -> Outcome<Vec<Vec<(String, toml::Value)>>> {
    let mut out: Vec<Vec<(String, toml::Value)>> = vec![vec![]];
    for (key, values) in axes {
        let values = values
            .as_array()
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Failure::user(format!("axis `{key}` must be a non-empty array")))?;
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut cell = prefix.clone();
                    cell.push((key.clone(), v.clone()));
                    cell
                })
            })
            .collect();
    }
    Ok(out)
}

fn tag_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn run(matrix_path: &Path, root: &Path, quiet: bool) -> Outcome<(PathBuf, AblationReport)> {
    if !matrix_path.is_file() {
        return Err(Failure::user(format!("matrix file {} not found", matrix_path.display())));
    }
    let text = std::fs::read_to_string(matrix_path)?;
    let matrix: Matrix = toml::from_str(&text).map_err(|e| Failure::user(format!("{}: {e}", matrix_path.display())))?;
    let base_dir = matrix_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = match &matrix.base {
        Some(p) => LoadedConfig::load(&base_dir.join(p), &matrix.set)?,
        None => LoadedConfig { config: RunConfig::default().with_overrides(&matrix.set)?, base_dir: base_dir.clone() },
    };
    let cells = cells(&matrix.axes)?;

    let matrix_hash = hex::encode(Sha256::digest(format!("{}\n{}", base.config.digest(), text).as_bytes()));
    let out = root.join(format!("ablate-{}", &matrix_hash[..12]));
    let _lock = DirLock::acquire(&out)?;

    let mut rows = Vec::new();
    for cell in &cells {
        let overrides: Vec<String> = cell.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let mut tags: Vec<(String, String)> = cell.iter().map(|(k, v)| (k.clone(), tag_value(v))).collect();
        let config = base.config.with_overrides(&overrides)?;
        let hash = config.digest();
        tags.push(("config".into(), config.short_digest()));
        if !quiet {
            eprintln!("== {} ({})", overrides.join(" "), config.short_digest());
        }
        let loaded = LoadedConfig { config, base_dir: base.base_dir.clone() };
        match run_cell(&loaded, root, matrix.eval_split, matrix.toy_classifier, quiet) {
            Ok(report) => rows.push(AblationRow { tags, config_hash: hash, report: Some(report), unavailable: None }),
            Err(CellError::Unavailable(why)) => {
                rows.push(AblationRow { tags, config_hash: hash, report: None, unavailable: Some(why) })
            }
            Err(CellError::Failed(f)) => return Err(f),
        }
    }

    let report = AblationReport { schema: "egofront.ablation", version: 1, matrix_hash, rows };
    write_atomic(&out.join("ablation.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_atomic(&out.join("ablation.md"), render(&report).as_bytes())?;
    Ok((out, report))
}

enum CellError {
    Unavailable(String),
    Failed(Failure),
}

impl<T: Into<Failure>> From<T> for CellError {
    fn from(e: T) -> Self {
        Self::Failed(e.into())
    }
}

fn unavailable(e: Error) -> CellError {
    match e {
        Error::VariantUnavailable(why) => CellError::Unavailable(why),
        other => CellError::Failed(other.into()),
    }
}

/// Trains (or reuses a finished run of) one configuration and evaluates it.
fn run_cell(
    loaded: &LoadedConfig,
    root: &Path,
    split: Split,
    toy_classifier: bool,
    quiet: bool,
) -> Result<EvalReport, CellError> {
    let config = &loaded.config;
    // Surface unavailable variants before any training work.
    egofront::EgoFront::new(config, candle_core::DType::F32, &Device::Cpu).map_err(unavailable)?;

    let files = RunFiles::new(run_dir(root, config));
    let done = read_checkpoint_meta(&files.latest()).map(|m| m.step >= config.training.steps).unwrap_or(false);
    let model = if done {
        load_checkpoint(&files.latest(), &Device::Cpu).map_err(unavailable)?.model
    } else {
        let resume = if files.latest().exists() { Resume::Latest } else { Resume::No };
        train(loaded, root, resume, quiet)?.trainer.model
    };
    let set = loaded.load_split(split)?;
    if set.is_empty() {
        return Err(CellError::Failed(Failure::user(format!("the {split:?} split is empty"))));
    }
    let (report, _) = evaluate_trained(&model, &set, &EvalOptions::from_model(&model), toy_classifier, &config.digest())?;
    Ok(report)
}

/// Markdown table in the ablation layout, followed by any skipped cells.
pub fn render(report: &AblationReport) -> String {
    let table_rows: Vec<TableRow<'_>> = report
        .rows
        .iter()
        .filter_map(|r| r.report.as_ref().map(|rep| TableRow { tags: r.tags.clone(), report: rep }))
        .collect();
    let mut out = String::new();
    if !table_rows.is_empty() {
        out.push_str(&format_table(&table_rows));
    }
    let clothing: BTreeMap<String, String> = report
        .rows
        .iter()
        .filter_map(|r| {
            let c = r.report.as_ref()?.clothing?;
            Some((r.tags.last().map(|t| t.1.clone()).unwrap_or_default(), c.to_string()))
        })
        .collect();
    if !clothing.is_empty() {
        out.push_str("\nclothing accuracy (lower / upper)\n");
        for (cfg, acc) in clothing {
            out.push_str(&format!("- {cfg}: {acc}\n"));
        }
    }
    let skipped: Vec<&AblationRow> = report.rows.iter().filter(|r| r.unavailable.is_some()).collect();
    if !skipped.is_empty() {
        out.push_str("\nunavailable\n");
        for r in skipped {
            let tags: Vec<String> = r.tags.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push_str(&format!("- {}: {}\n", tags.join(" "), r.unavailable.as_deref().unwrap_or_default()));
        }
    }
    out
}
