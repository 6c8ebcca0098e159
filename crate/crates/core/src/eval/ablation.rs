//! Ablation grid: named config deltas, each trained from scratch per seed
//! and scored on sgcls recall.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::{evaluate, par_map, EvalReport, Task, DEFAULT_KS};
use crate::model::ModelConfig;
use crate::scenegen::Scene;
use crate::train::{train, TrainConfig};

pub const MIN_SEEDS: usize = 3;

/// A named set of field overrides applied on top of the baseline config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    #[serde(default)]
    pub delta: Map<String, Value>,
}

impl AblationCell {
    pub fn new(name: &str, delta: Value) -> Self {
        let Value::Object(delta) = delta else {
            panic!("ablation delta must be a JSON object");
        };
        Self {
            name: name.to_string(),
            delta,
        }
    }

    /// The baseline with this cell's fields replaced. Unknown field names
    /// and invalid values are config errors.
    pub fn apply(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut v = serde_json::to_value(base)?;
        let obj = v.as_object_mut().expect("config serializes to an object");
        for (k, val) in &self.delta {
            if !obj.contains_key(k) {
                return Err(Error::config(
                    format!("grid cell `{}`", self.name),
                    format!("unknown model field `{k}`"),
                ));
            }
            obj.insert(k.clone(), val.clone());
        }
        let cfg: ModelConfig = serde_json::from_value(v).map_err(|e| {
            Error::config(format!("grid cell `{}`", self.name), e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    /// Baseline plus one cell per varied setting: REM count 0 to 4,
    /// reduction ratio 1/2/4/8, sigmoid rows, euclidean similarity, each
    /// module toggle and both single-source edge inputs.
    pub fn default_grid(base: &ModelConfig) -> Self {
        let mut cells = vec![AblationCell::new("baseline", serde_json::json!({}))];
        for n in 0..=4 {
            if n != base.rem_count {
                cells.push(AblationCell::new(&format!("rem_count_{n}"), serde_json::json!({ "rem_count": n })));
            }
        }
        for r in [1, 2, 4, 8] {
            if r != base.reduction_ratio {
                cells.push(AblationCell::new(&format!("ratio_{r}"), serde_json::json!({ "reduction_ratio": r })));
            }
        }
        cells.push(AblationCell::new("row_op_sigmoid", serde_json::json!({ "row_op": "sigmoid" })));
        cells.push(AblationCell::new("similarity_euclidean", serde_json::json!({ "similarity": "euclidean" })));
        cells.push(AblationCell::new("glem_off", serde_json::json!({ "enable_glem": false })));
        cells.push(AblationCell::new("gce_off", serde_json::json!({ "enable_gce": false })));
        cells.push(AblationCell::new("edge_input_argmax_only", serde_json::json!({ "edge_input": "argmax_only" })));
        cells.push(AblationCell::new("edge_input_context_only", serde_json::json!({ "edge_input": "context_only" })));
        Self { cells }
    }

    pub fn validate(&self, base: &ModelConfig) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::config("grid", "no cells"));
        }
        for (n, c) in self.cells.iter().enumerate() {
            if self.cells[..n].iter().any(|d| d.name == c.name) {
                return Err(Error::config("grid", format!("duplicate cell `{}`", c.name)));
            }
            c.apply(base)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    /// `ok`, or the failure reason.
    pub status: String,
    pub report: Option<EvalReport>,
}

impl AblationRow {
    pub fn is_ok(&self) -> bool {
        self.report.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub n_ok: usize,
    /// `(k, mean, sample std)` over successful seeds.
    pub recall: Vec<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn all_failed(&self) -> bool {
        self.rows.iter().all(|r| !r.is_ok())
    }

    pub fn cell_rows<'a>(&'a self, cell: &'a str) -> impl Iterator<Item = &'a AblationRow> + 'a {
        self.rows.iter().filter(move |r| r.cell == cell)
    }

    /// Header `cell,seed,R@20,R@50,R@100,status`; failed runs leave the
    /// recall columns empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell,seed");
        for k in DEFAULT_KS {
            let _ = write!(s, ",R@{k}");
        }
        s.push_str(",status\n");
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.cell, r.seed);
            for k in DEFAULT_KS {
                match r.report.as_ref().and_then(|rep| rep.recall_at(k)) {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            let _ = writeln!(s, ",{}", r.status.replace([',', '\n'], ";"));
        }
        s
    }

    pub fn summary(&self) -> Vec<CellSummary> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.cell.as_str()) {
                names.push(&r.cell);
            }
        }
        names
            .into_iter()
            .map(|cell| {
                let ok: Vec<&EvalReport> = self.cell_rows(cell).filter_map(|r| r.report.as_ref()).collect();
                let recall = DEFAULT_KS
                    .iter()
                    .map(|&k| {
                        let xs: Vec<f64> = ok.iter().filter_map(|rep| rep.recall_at(k)).collect();
                        let (m, s) = mean_std(&xs);
                        (k, m, s)
                    })
                    .collect();
                CellSummary {
                    cell: cell.to_string(),
                    n_ok: ok.len(),
                    recall,
                }
            })
            .collect()
    }
}

/// Trains every `(cell, seed)` from scratch with `train_cfg.seed = seed` and
/// scores sgcls recall on `eval_data`. A failing run is recorded in its
/// row and does not stop the others. Runs execute on parallel threads;
/// row order is cell-major, then seed, as given.
pub fn run_ablation(
    grid: &AblationGrid,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train_data: &[Scene],
    eval_data: &[Scene],
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.len() < MIN_SEEDS {
        return Err(Error::config("seeds", format!("need at least {MIN_SEEDS} seeds per cell")));
    }
    grid.validate(base)?;
    train_cfg.validate()?;
    let jobs: Vec<(&AblationCell, u64)> = grid
        .cells
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let rows = par_map(&jobs, |&(cell, seed)| {
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let outcome = cell
            .apply(base)
            .and_then(|model| train(train_data, &model, &cfg))
            .and_then(|(trainer, _)| evaluate(&trainer.params, eval_data, Task::Sgcls, &DEFAULT_KS));
        let (status, report) = match outcome {
            Ok(rep) => ("ok".to_string(), Some(rep)),
            Err(Error::Diverged(why)) => (format!("diverged: {why}"), None),
            Err(e) => (format!("error: {e}"), None),
        };
        AblationRow {
            cell: cell.name.clone(),
            seed,
            status,
            report,
        }
    });
    Ok(AblationTable { rows })
}
