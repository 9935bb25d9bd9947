//! NRMSE and R² with step masks, evaluation reports and prediction files.
//!
//! NRMSE divides the RMSE over the selected steps by the standard deviation
//! of the truth over the same steps, so `r_squared = 1 - nrmse^2` exactly.
//! A group of labels pools its residual and total sums of squares.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{domain_split, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::objective::{Domain, DomainMask};
use crate::tensor::Tensor;
use crate::training::{infer, Checkpoint};

/// Residual and total sums of squares over a selection, computed two-pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SumsOfSquares {
    pub steps: usize,
    pub residual: f64,
    pub total: f64,
}

impl SumsOfSquares {
    pub fn of(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() || mask.len() != truth.len() {
            return Err(Error::shape(
                "metrics",
                format!("pred {}, truth {}, mask {}", pred.len(), truth.len(), mask.len()),
            ));
        }
        let selected = || truth.iter().zip(pred).zip(mask).filter(|(_, &m)| m).map(|(tp, _)| tp);
        let steps = selected().count();
        if steps == 0 {
            return Ok(SumsOfSquares::default());
        }
        let mean = selected().map(|(t, _)| t).sum::<f64>() / steps as f64;
        let (mut residual, mut total) = (0.0, 0.0);
        for (t, p) in selected() {
            residual += (p - t) * (p - t);
            total += (t - mean) * (t - mean);
        }
        Ok(SumsOfSquares { steps, residual, total })
    }

    fn ratio(&self) -> Result<f64> {
        if self.steps == 0 {
            return Err(Error::Invalid("no steps selected".into()));
        }
        if !(self.total > 0.0) {
            return Err(Error::Invalid("truth has zero variance on the selection".into()));
        }
        Ok(self.residual / self.total)
    }

    pub fn nrmse(&self) -> Result<f64> {
        Ok(self.ratio()?.sqrt())
    }

    pub fn r_squared(&self) -> Result<f64> {
        Ok(1.0 - self.ratio()?)
    }
}

impl std::ops::Add for SumsOfSquares {
    type Output = SumsOfSquares;

    fn add(self, other: SumsOfSquares) -> SumsOfSquares {
        SumsOfSquares {
            steps: self.steps + other.steps,
            residual: self.residual + other.residual,
            total: self.total + other.total,
        }
    }
}

pub fn nrmse(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    SumsOfSquares::of(pred, truth, mask)?.nrmse()
}

pub fn r_squared(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    SumsOfSquares::of(pred, truth, mask)?.r_squared()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Source,
    Target,
    Overall,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Source, Subset::Target, Subset::Overall];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Source => "source",
            Subset::Target => "target",
            Subset::Overall => "overall",
        }
    }

    pub fn mask(self, domain: &DomainMask) -> Vec<bool> {
        domain
            .steps()
            .iter()
            .map(|&d| match self {
                Subset::Source => d == Domain::Source,
                Subset::Target => d == Domain::Target,
                Subset::Overall => true,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Variable,
    Group,
}

/// One metric cell. `nrmse` and `r_squared` are absent when the subset is
/// empty or the truth is constant on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub kind: RowKind,
    pub name: String,
    pub subset: Subset,
    pub steps: usize,
    /// Mean squared error per label and step.
    pub mse: f64,
    pub nrmse: Option<f64>,
    pub r_squared: Option<f64>,
}

/// Identifies the run a report was computed for.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub meta: RunMetadata,
    pub rows: Vec<ReportRow>,
}

const REPORT_HEADER: [&str; 7] = ["kind", "name", "subset", "steps", "mse", "nrmse", "r_squared"];

fn cell(sums: SumsOfSquares, labels: usize) -> (f64, Option<f64>, Option<f64>) {
    let mse = if sums.steps == 0 {
        0.0
    } else {
        sums.residual / (sums.steps * labels) as f64
    };
    (mse, sums.nrmse().ok(), sums.r_squared().ok())
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// Metrics of every label and every group over source, target and all steps.
    /// `pred` and `truth` are `steps x labels`; groups hold label indices.
    pub fn compute(
        pred: &Tensor,
        truth: &Tensor,
        names: &[String],
        groups: &[(String, Vec<usize>)],
        domain: &DomainMask,
        meta: RunMetadata,
    ) -> Result<Self> {
        if pred.shape() != truth.shape() || names.len() != truth.cols() || domain.len() != truth.rows() {
            return Err(Error::shape(
                "report",
                format!(
                    "pred {:?}, truth {:?}, {} names, {} domain flags",
                    pred.shape(),
                    truth.shape(),
                    names.len(),
                    domain.len()
                ),
            ));
        }
        if let Some(bad) = groups.iter().flat_map(|(_, idx)| idx).find(|&&i| i >= names.len()) {
            return Err(Error::Invalid(format!("group refers to label {bad} of {}", names.len())));
        }
        let mut sums = Vec::with_capacity(names.len());
        for c in 0..truth.cols() {
            let (p, t) = (pred.column(c), truth.column(c));
            let per_subset = Subset::ALL
                .iter()
                .map(|s| SumsOfSquares::of(&p, &t, &s.mask(domain)))
                .collect::<Result<Vec<_>>>()?;
            sums.push(per_subset);
        }
        let mut rows = Vec::new();
        for (c, name) in names.iter().enumerate() {
            for (k, &subset) in Subset::ALL.iter().enumerate() {
                let (mse, nrmse, r_squared) = cell(sums[c][k], 1);
                rows.push(ReportRow {
                    kind: RowKind::Variable,
                    name: name.clone(),
                    subset,
                    steps: sums[c][k].steps,
                    mse,
                    nrmse,
                    r_squared,
                });
            }
        }
        for (group, idx) in groups {
            for (k, &subset) in Subset::ALL.iter().enumerate() {
                let pooled = idx.iter().fold(SumsOfSquares::default(), |acc, &c| {
                    let s = sums[c][k];
                    SumsOfSquares {
                        steps: s.steps,
                        ..(acc + s)
                    }
                });
                let (mse, nrmse, r_squared) = cell(pooled, idx.len());
                rows.push(ReportRow {
                    kind: RowKind::Group,
                    name: group.clone(),
                    subset,
                    steps: pooled.steps,
                    mse,
                    nrmse,
                    r_squared,
                });
            }
        }
        Ok(EvalReport { meta, rows })
    }

    pub fn get(&self, kind: RowKind, name: &str, subset: Subset) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.kind == kind && r.name == name && r.subset == subset)
    }

    /// CSV with the run metadata in leading `#` lines.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# seed = {}\n# config_hash = {}\n# checkpoint = {}\n",
            self.meta.seed, self.meta.config_hash, self.meta.checkpoint
        );
        out.push_str(&REPORT_HEADER.join(","));
        out.push('\n');
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in &self.rows {
            let kind = match r.kind {
                RowKind::Variable => "variable",
                RowKind::Group => "group",
            };
            w.write_record([
                kind.to_string(),
                r.name.clone(),
                r.subset.as_str().to_string(),
                r.steps.to_string(),
                r.mse.to_string(),
                opt(r.nrmse),
                opt(r.r_squared),
            ])
            .expect("writing to memory");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("writing to memory")).expect("utf-8"));
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut meta = RunMetadata::default();
        let mut body = String::new();
        for line in text.lines() {
            match line.strip_prefix('#') {
                Some(m) => {
                    let (k, v) = m
                        .split_once('=')
                        .ok_or_else(|| Error::Invalid(format!("bad report metadata line {line:?}")))?;
                    let v = v.trim().to_string();
                    match k.trim() {
                        "seed" => meta.seed = v.parse().map_err(|_| Error::Invalid(format!("bad seed {v:?}")))?,
                        "config_hash" => meta.config_hash = v,
                        "checkpoint" => meta.checkpoint = v,
                        other => return Err(Error::Invalid(format!("unknown report metadata {other:?}"))),
                    }
                }
                None => {
                    body.push_str(line);
                    body.push('\n');
                }
            }
        }
        let mut reader = csv::Reader::from_reader(body.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Invalid(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if header != REPORT_HEADER {
            return Err(Error::Invalid(format!("report header {header:?}")));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<ReportRow>().enumerate() {
            rows.push(rec.map_err(|e| Error::Parse {
                row: i + 1,
                column: String::new(),
                detail: e.to_string(),
            })?);
        }
        Ok(EvalReport { meta, rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Group table laid out as NRMSE and R² over source, target and overall.
    pub fn text(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "seed {}  config {}  checkpoint {}",
            self.meta.seed, self.meta.config_hash, self.meta.checkpoint
        );
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
        let _ = writeln!(
            out,
            "{:width$}  {:>23}  {:>23}",
            "",
            "NRMSE (S / T / O)",
            "R2 (S / T / O)"
        );
        for kind in [RowKind::Group, RowKind::Variable] {
            let mut names: Vec<&str> = Vec::new();
            for r in self.rows.iter().filter(|r| r.kind == kind) {
                if !names.contains(&r.name.as_str()) {
                    names.push(&r.name);
                }
            }
            for name in names {
                let row = |s| self.get(kind, name, s);
                let metric = |f: fn(&ReportRow) -> Option<f64>| {
                    Subset::ALL
                        .iter()
                        .map(|&s| fmt(row(s).and_then(f)))
                        .map(|v| format!("{v:>7}"))
                        .collect::<Vec<_>>()
                        .join(" ")
                };
                let _ = writeln!(
                    out,
                    "{name:width$}  {}  {}",
                    metric(|r| r.nrmse),
                    metric(|r| r.r_squared)
                );
            }
            out.push('\n');
        }
        out
    }
}

/// Mean and sample standard deviation of one metric over several runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Spread {
    pub kind: RowKind,
    pub name: String,
    pub subset: Subset,
    pub nrmse: Option<(f64, f64)>,
    pub r_squared: Option<(f64, f64)>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Aggregates reports of repeated runs cell by cell. Every report must have
/// the same rows; a cell missing from any run is absent in the result.
pub fn aggregate(reports: &[EvalReport]) -> Result<Vec<Spread>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Invalid("no reports to aggregate".into()))?;
    first
        .rows
        .iter()
        .map(|r| {
            let cells = reports
                .iter()
                .map(|rep| {
                    rep.get(r.kind, &r.name, r.subset)
                        .ok_or_else(|| Error::Invalid(format!("report lacks {} / {}", r.name, r.subset.as_str())))
                })
                .collect::<Result<Vec<_>>>()?;
            let collect = |f: fn(&ReportRow) -> Option<f64>| {
                cells.iter().map(|c| f(c)).collect::<Option<Vec<f64>>>().map(|v| mean_std(&v))
            };
            Ok(Spread {
                kind: r.kind,
                name: r.name.clone(),
                subset: r.subset,
                nrmse: collect(|c| c.nrmse),
                r_squared: collect(|c| c.r_squared),
            })
        })
        .collect()
}

/// Per-step predictions next to the truth, in original units.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub domain: DomainMask,
    pub y_true: Tensor,
    pub y_pred: Tensor,
}

impl Predictions {
    /// Columns `step,domain,y_true_1..k,y_pred_1..k`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let k = self.y_true.cols();
        let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(wrap)?;
        let header: Vec<String> = ["step".to_string(), "domain".to_string()]
            .into_iter()
            .chain((1..=k).map(|i| format!("y_true_{i}")))
            .chain((1..=k).map(|i| format!("y_pred_{i}")))
            .collect();
        w.write_record(&header).map_err(wrap)?;
        for n in 0..self.y_true.rows() {
            let fields: Vec<String> = [n.to_string(), self.domain.get(n).as_str().to_string()]
                .into_iter()
                .chain(self.y_true.row(n).iter().map(f64::to_string))
                .chain(self.y_pred.row(n).iter().map(f64::to_string))
                .collect();
            w.write_record(&fields).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Predictions,
}

/// Runs single-particle inference over `data` (original units) and scores
/// the prior-mean label predictions. Steps are split by the checkpoint's
/// domain rule; metrics are taken on the normalized scale of training.
pub fn evaluate(
    checkpoint: &Checkpoint,
    checkpoint_id: &str,
    data: &TimeSeriesDataset,
    groups: &[(String, Vec<usize>)],
) -> Result<Evaluation> {
    if let Some(cols) = &checkpoint.columns {
        if cols.data != data.x_names || cols.labels != data.y_names {
            return Err(Error::Schema(format!(
                "dataset columns {:?} / {:?} differ from the training columns {:?} / {:?}",
                data.x_names, data.y_names, cols.data, cols.labels
            )));
        }
    }
    if data.is_empty() {
        return Err(Error::Invalid("no steps to evaluate".into()));
    }
    if data.y.cols() != checkpoint.config.model.n_y {
        return Err(Error::Schema(format!(
            "dataset has {} labels, the model predicts {}",
            data.y.cols(),
            checkpoint.config.model.n_y
        )));
    }
    let rule = &checkpoint.config.domain;
    let domain = domain_split(data, &rule.column, rule.low, rule.high)?;
    let normalized = match &checkpoint.normalization {
        Some(n) => n.apply(data)?,
        None => data.clone(),
    };
    let (model, potential) = checkpoint.restore()?;
    let out = infer(&model, &potential, &checkpoint.config.flow, &normalized.x)?;
    let meta = RunMetadata {
        seed: checkpoint.seed,
        config_hash: format!("{:016x}", checkpoint.config.hash()),
        checkpoint: checkpoint_id.to_string(),
    };
    let report = EvalReport::compute(&out.y_pred, &normalized.y, &data.y_names, groups, &domain, meta)?;
    let y_pred = match &checkpoint.normalization {
        Some(n) => n.invert_labels(&out.y_pred),
        None => out.y_pred,
    };
    Ok(Evaluation {
        report,
        predictions: Predictions {
            domain,
            y_true: data.y.clone(),
            y_pred,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors() {
        let t = [1.0, 3.0, 2.0, 6.0];
        let all = [true; 4];
        assert_eq!(nrmse(&t, &t, &all).unwrap(), 0.0);
        assert_eq!(r_squared(&t, &t, &all).unwrap(), 1.0);
        let mean = [3.0; 4];
        assert!((nrmse(&mean, &t, &all).unwrap() - 1.0).abs() < 1e-15);
        assert!(r_squared(&mean, &t, &all).unwrap().abs() < 1e-15);
    }

    #[test]
    fn empty_or_constant_selection_fails() {
        let t = [1.0, 1.0, 2.0];
        assert!(nrmse(&t, &t, &[false; 3]).is_err());
        assert!(nrmse(&t, &t, &[true, true, false]).is_err());
        assert!(r_squared(&t, &t, &[true, true, false]).is_err());
        assert!(nrmse(&t, &t, &[true; 2]).is_err());
    }

    #[test]
    fn report_csv_round_trips() {
        let truth = Tensor::from_fn(6, 2, |r, c| (r * (c + 2)) as f64 * 0.37 - 1.0);
        let pred = truth.map(|v| v * 0.9 + 0.1);
        let domain = DomainMask::new(
            [0, 0, 1, 1, 0, 1]
                .iter()
                .map(|&d| if d == 0 { Domain::Source } else { Domain::Target })
                .collect(),
        );
        let names = vec!["a".to_string(), "b".to_string()];
        let groups = vec![("All".to_string(), vec![0, 1])];
        let meta = RunMetadata {
            seed: 4,
            config_hash: "00ff".into(),
            checkpoint: "run/ckpt.json".into(),
        };
        let rep = EvalReport::compute(&pred, &truth, &names, &groups, &domain, meta).unwrap();
        assert_eq!(rep.rows.len(), 9);
        assert_eq!(EvalReport::from_csv(&rep.to_csv()).unwrap(), rep);
        assert!(rep.text().contains("All"));
    }

    #[test]
    fn aggregate_of_identical_runs_has_zero_spread() {
        let truth = Tensor::from_fn(4, 1, |r, _| r as f64);
        let pred = truth.map(|v| v + 0.5);
        let domain = DomainMask::uniform(Domain::Source, 4);
        let names = vec!["a".to_string()];
        let rep = EvalReport::compute(&pred, &truth, &names, &[], &domain, RunMetadata::default()).unwrap();
        let spread = aggregate(&[rep.clone(), rep]).unwrap();
        let overall = spread.iter().find(|s| s.subset == Subset::Overall).unwrap();
        assert_eq!(overall.nrmse.unwrap().1, 0.0);
        // No target steps: target cells are absent.
        assert!(spread.iter().find(|s| s.subset == Subset::Target).unwrap().nrmse.is_none());
    }
}
