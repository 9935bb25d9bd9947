//! Time-series datasets: schema-driven CSV ingestion, normalization,
//! domain masks, windowing and a synthetic switching process.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{Domain, DomainMask, Window};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Data,
    Label,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaColumn {
    pub name: String,
    pub role: Role,
    /// Report group for label columns.
    pub group: Option<String>,
}

/// Column roles, in the order the model sees them.
///
/// Text form, one column per line:
///
/// ```text
/// # comment
/// LI405 = data
/// PT312 = label Pressure
/// ```
///
/// The optional word after `label` names the report group.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<SchemaColumn>,
}

impl Schema {
    pub fn parse(text: &str) -> Result<Self> {
        let mut columns: Vec<SchemaColumn> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, rest) = line
                .split_once('=')
                .ok_or_else(|| Error::Schema(format!("line {}: expected `name = role`", i + 1)))?;
            let name = name.trim().trim_matches('"').to_string();
            let mut words = rest.split_whitespace();
            let role = match words.next() {
                Some("data") => Role::Data,
                Some("label") => Role::Label,
                other => {
                    return Err(Error::Schema(format!(
                        "line {}: role of {name} must be data or label, got {:?}",
                        i + 1,
                        other.unwrap_or("")
                    )))
                }
            };
            let group: Vec<&str> = words.collect();
            if role == Role::Data && !group.is_empty() {
                return Err(Error::Schema(format!("line {}: data column {name} cannot have a group", i + 1)));
            }
            if name.is_empty() || columns.iter().any(|c| c.name == name) {
                return Err(Error::Schema(format!("line {}: empty or duplicate column name {name:?}", i + 1)));
            }
            columns.push(SchemaColumn {
                name,
                role,
                group: if group.is_empty() { None } else { Some(group.join(" ")) },
            });
        }
        let schema = Schema { columns };
        if schema.data_names().is_empty() || schema.label_names().is_empty() {
            return Err(Error::Schema("schema needs at least one data and one label column".into()));
        }
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.columns {
            let role = match c.role {
                Role::Data => "data",
                Role::Label => "label",
            };
            match &c.group {
                Some(g) => out.push_str(&format!("{} = {role} {g}\n", c.name)),
                None => out.push_str(&format!("{} = {role}\n", c.name)),
            }
        }
        out
    }

    pub fn from_names(data: &[String], labels: &[String]) -> Self {
        let col = |name: &String, role| SchemaColumn {
            name: name.clone(),
            role,
            group: None,
        };
        Schema {
            columns: data
                .iter()
                .map(|n| col(n, Role::Data))
                .chain(labels.iter().map(|n| col(n, Role::Label)))
                .collect(),
        }
    }

    fn names(&self, role: Role) -> Vec<String> {
        self.columns.iter().filter(|c| c.role == role).map(|c| c.name.clone()).collect()
    }

    pub fn data_names(&self) -> Vec<String> {
        self.names(Role::Data)
    }

    pub fn label_names(&self) -> Vec<String> {
        self.names(Role::Label)
    }

    /// Label report groups in first-appearance order, as label indices.
    /// Labels without a group fall into "All" when no label is grouped;
    /// otherwise each ungrouped label forms a group named after itself.
    pub fn label_groups(&self) -> Vec<(String, Vec<usize>)> {
        let labels: Vec<&SchemaColumn> = self.columns.iter().filter(|c| c.role == Role::Label).collect();
        if labels.iter().all(|c| c.group.is_none()) {
            return vec![("All".to_string(), (0..labels.len()).collect())];
        }
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, c) in labels.iter().enumerate() {
            let name = c.group.clone().unwrap_or_else(|| c.name.clone());
            match groups.iter_mut().find(|(g, _)| *g == name) {
                Some((_, idx)) => idx.push(i),
                None => groups.push((name, vec![i])),
            }
        }
        groups
    }
}

/// Measurements, labels and per-step domain flags of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    /// `L x n_x`.
    pub x: Tensor,
    /// `L x n_y`.
    pub y: Tensor,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    pub domain: DomainMask,
}

impl TimeSeriesDataset {
    pub fn new(x: Tensor, y: Tensor, x_names: Vec<String>, y_names: Vec<String>) -> Result<Self> {
        if x.rows() != y.rows() || x.cols() != x_names.len() || y.cols() != y_names.len() {
            return Err(Error::shape(
                "dataset",
                format!(
                    "x {:?} with {} names, y {:?} with {} names",
                    x.shape(),
                    x_names.len(),
                    y.shape(),
                    y_names.len()
                ),
            ));
        }
        let domain = DomainMask::uniform(Domain::Source, x.rows());
        Ok(TimeSeriesDataset {
            x,
            y,
            x_names,
            y_names,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn label_index(&self, name: &str) -> Result<usize> {
        self.y_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Schema(format!("no label column named {name}")))
    }
}

fn parse_cell(text: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = text.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        detail: format!("not a number: {text:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            detail: format!("non-finite value {text:?}"),
        });
    }
    Ok(v)
}

/// Reads a headered CSV, picking data and label columns by schema name.
/// Columns the schema does not mention are ignored. Rows are numbered from 1
/// for the first data row.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<TimeSeriesDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: unreadable header: {e}", path.display())))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let locate = |name: &String| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column {name}", path.display())))
    };
    let x_names = schema.data_names();
    let y_names = schema.label_names();
    let x_idx = x_names.iter().map(locate).collect::<Result<Vec<_>>>()?;
    let y_idx = y_names.iter().map(locate).collect::<Result<Vec<_>>>()?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            detail: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                detail: format!("{} fields, header has {}", record.len(), header.len()),
            });
        }
        for (&j, name) in x_idx.iter().zip(&x_names) {
            xs.push(parse_cell(&record[j], row, name)?);
        }
        for (&j, name) in y_idx.iter().zip(&y_names) {
            ys.push(parse_cell(&record[j], row, name)?);
        }
        rows += 1;
    }
    TimeSeriesDataset::new(
        Tensor::from_vec(rows, x_names.len(), xs)?,
        Tensor::from_vec(rows, y_names.len(), ys)?,
        x_names,
        y_names,
    )
}

/// Writes data columns then label columns with a header row. Values use the
/// shortest decimal form that parses back to the same `f64`.
pub fn write_csv(path: &Path, data: &TimeSeriesDataset) -> Result<()> {
    let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    let header: Vec<&str> = data.x_names.iter().chain(&data.y_names).map(String::as_str).collect();
    w.write_record(&header).map_err(wrap)?;
    for r in 0..data.len() {
        let fields: Vec<String> = data.x.row(r).iter().chain(data.y.row(r)).map(|v| v.to_string()).collect();
        w.write_record(&fields).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-column z-score statistics, fitted on one dataset and applied to others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn column_stats(t: &Tensor, names: &[String]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = t.rows() as f64;
    let mut means = Vec::with_capacity(t.cols());
    let mut stds = Vec::with_capacity(t.cols());
    for c in 0..t.cols() {
        let col = t.column(c);
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::Invalid(format!("column {} has zero variance", names[c])));
        }
        means.push(mean);
        stds.push(std);
    }
    Ok((means, stds))
}

fn standardize(t: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    Tensor::from_fn(t.rows(), t.cols(), |r, c| (t.get(r, c) - mean[c]) / std[c])
}

fn unstandardize(t: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    Tensor::from_fn(t.rows(), t.cols(), |r, c| t.get(r, c) * std[c] + mean[c])
}

impl Normalization {
    /// Population mean and standard deviation of every column.
    pub fn fit(data: &TimeSeriesDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Invalid("cannot fit normalization on an empty dataset".into()));
        }
        let (x_mean, x_std) = column_stats(&data.x, &data.x_names)?;
        let (y_mean, y_std) = column_stats(&data.y, &data.y_names)?;
        Ok(Normalization {
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    /// Measurement statistics over every step, label statistics over source
    /// steps only, so target labels never inform training.
    pub fn fit_source_labels(data: &TimeSeriesDataset) -> Result<Self> {
        let source: Vec<usize> = (0..data.len()).filter(|&r| data.domain.is_source(r)).collect();
        if source.is_empty() {
            return Err(Error::Invalid("no source steps to fit label statistics on".into()));
        }
        let (x_mean, x_std) = column_stats(&data.x, &data.x_names)?;
        let (y_mean, y_std) = column_stats(&data.y.select_rows(&source), &data.y_names)?;
        Ok(Normalization {
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    fn check(&self, data: &TimeSeriesDataset) -> Result<()> {
        if data.x.cols() != self.x_mean.len() || data.y.cols() != self.y_mean.len() {
            return Err(Error::shape(
                "normalize",
                format!(
                    "dataset has {}+{} columns, statistics cover {}+{}",
                    data.x.cols(),
                    data.y.cols(),
                    self.x_mean.len(),
                    self.y_mean.len()
                ),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, data: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        self.check(data)?;
        Ok(TimeSeriesDataset {
            x: standardize(&data.x, &self.x_mean, &self.x_std),
            y: standardize(&data.y, &self.y_mean, &self.y_std),
            ..data.clone()
        })
    }

    pub fn invert(&self, data: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        self.check(data)?;
        Ok(TimeSeriesDataset {
            x: unstandardize(&data.x, &self.x_mean, &self.x_std),
            y: unstandardize(&data.y, &self.y_mean, &self.y_std),
            ..data.clone()
        })
    }

    /// Maps normalized label rows back to original units.
    pub fn invert_labels(&self, y: &Tensor) -> Tensor {
        unstandardize(y, &self.y_mean, &self.y_std)
    }
}

/// Fits statistics on `fit_on` and returns them with `data` normalized by them.
pub fn normalize(data: &TimeSeriesDataset, fit_on: &TimeSeriesDataset) -> Result<(TimeSeriesDataset, Normalization)> {
    let stats = Normalization::fit(fit_on)?;
    Ok((stats.apply(data)?, stats))
}

/// Marks a step as source iff the named label lies in `[low, high]`.
pub fn domain_split(data: &TimeSeriesDataset, column: &str, low: f64, high: f64) -> Result<DomainMask> {
    let c = data.label_index(column)?;
    Ok(DomainMask::new(
        (0..data.len())
            .map(|r| {
                let v = data.y.get(r, c);
                if v >= low && v <= high {
                    Domain::Source
                } else {
                    Domain::Target
                }
            })
            .collect(),
    ))
}

/// Non-overlapping windows of `length` steps in order; the remainder is dropped.
pub fn window(data: &TimeSeriesDataset, length: usize) -> Result<Vec<Window>> {
    if length == 0 || length > data.len() {
        return Err(Error::Invalid(format!(
            "window length {length} for a sequence of {} steps",
            data.len()
        )));
    }
    (0..data.len() / length)
        .map(|k| {
            let start = k * length;
            Window::new(
                data.x.slice_rows(start, length),
                data.y.slice_rows(start, length),
                data.domain.slice(start, length),
            )
        })
        .collect()
}

/// Settings of the synthetic switching process.
///
/// Two flow drivers move between setpoints, each ramping at a bounded rate
/// and dwelling a random time at every setpoint. Setpoints are drawn from a
/// reshuffled deck, so over a long run every setpoint is visited in
/// proportion to its deck count. A hidden state follows
///
/// ```text
/// r_{n+1} = tanh(A r_n + B d_n) + process noise
/// x_n     = C tanh(D r_n) + observation noise
/// ```
///
/// where `d_n` holds both flows rescaled to unit range. Labels are the two
/// flows (noise-free, so the domain rule sees the true operating point)
/// and the leading components of `r` with small label noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_x: usize,
    pub n_y: usize,
    pub state_dim: usize,
    pub air_setpoints: Vec<f64>,
    pub air_deck: Vec<usize>,
    pub water_setpoints: Vec<f64>,
    pub water_deck: Vec<usize>,
    pub dwell_min: usize,
    pub dwell_max: usize,
    /// Largest per-step change of the air flow.
    pub air_ramp: f64,
    pub water_ramp: f64,
    /// Label column holding the air flow.
    pub air_label: usize,
    /// Label column holding the water flow, if any.
    #[serde(default)]
    pub water_label: Option<usize>,
    /// Bound on the Frobenius norm of `A`; below 1 keeps the map contracting.
    pub transition_scale: f64,
    pub input_scale: f64,
    pub observation_scale: f64,
    pub process_noise: f64,
    pub observation_noise: f64,
    pub label_noise: f64,
    pub source_low: f64,
    pub source_high: f64,
    pub length: usize,
    /// Seed of the system matrices; shared by train and test sequences.
    pub system_seed: u64,
    /// Seed of the setpoint schedule and noise.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::mfp()
    }
}

impl SynthConfig {
    /// Seven measurements and thirteen labels, flows in label slots 8 and 9.
    pub fn mfp() -> Self {
        SynthConfig {
            n_x: 7,
            n_y: 13,
            state_dim: 11,
            air_setpoints: vec![0.0208, 0.0278, 0.0347, 0.0417],
            air_deck: vec![6, 4, 5, 5],
            water_setpoints: vec![0.5, 1.0, 2.0, 3.5, 6.0],
            water_deck: vec![1, 1, 1, 1, 1],
            dwell_min: 200,
            dwell_max: 350,
            air_ramp: 0.002,
            water_ramp: 0.5,
            air_label: 7,
            water_label: Some(8),
            transition_scale: 0.8,
            input_scale: 1.0,
            observation_scale: 1.0,
            process_noise: 0.01,
            observation_noise: 0.01,
            label_noise: 0.005,
            source_low: 0.0278,
            source_high: 0.0347,
            length: 20_000,
            system_seed: 7,
            seed: 1,
        }
    }

    /// Three measurements and two labels: air flow and one internal state.
    pub fn small() -> Self {
        SynthConfig {
            n_x: 3,
            n_y: 2,
            state_dim: 4,
            air_label: 0,
            water_label: None,
            ..Self::mfp()
        }
    }

    /// Reads a config file: an optional top-level `preset = "mfp" | "small"`
    /// and a `[synth]` section overriding fields of that preset.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut base = match table.get("preset").map(|v| v.as_str()) {
            None | Some(Some("mfp")) => Self::mfp(),
            Some(Some("small")) => Self::small(),
            Some(other) => return Err(Error::Config(format!("unknown synth preset {other:?}"))),
        };
        for key in table.keys() {
            if key != "preset" && key != "synth" {
                return Err(Error::Config(format!("unknown key {key:?} in synth config")));
            }
        }
        if let Some(overrides) = table.get("synth") {
            let overrides = overrides
                .as_table()
                .ok_or_else(|| Error::Config("[synth] must be a section".into()))?;
            let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
            for (k, v) in overrides {
                merged.insert(k.clone(), v.clone());
            }
            base = toml::Value::Table(merged)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        }
        base.validate()?;
        Ok(base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    fn internal_labels(&self) -> usize {
        self.n_y - 1 - usize::from(self.water_label.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_x == 0 || self.n_y == 0 || self.state_dim < 2 || self.length == 0 {
            return bad("synth dimensions and length must be positive, state_dim >= 2".into());
        }
        if self.air_setpoints.len() < 2 || self.water_setpoints.len() < 2 {
            return bad("each driver needs at least two setpoints".into());
        }
        if self.air_deck.len() != self.air_setpoints.len()
            || self.water_deck.len() != self.water_setpoints.len()
            || self.air_deck.iter().chain(&self.water_deck).all(|&c| c == 0)
            || self.air_deck.iter().sum::<usize>() == 0
            || self.water_deck.iter().sum::<usize>() == 0
        {
            return bad("deck counts must match setpoints and be non-empty".into());
        }
        if self.dwell_min == 0 || self.dwell_max < self.dwell_min {
            return bad("dwell range must satisfy 0 < dwell_min <= dwell_max".into());
        }
        if !(self.process_noise > 0.0 && self.observation_noise > 0.0 && self.label_noise > 0.0) {
            return bad("noise scales must be positive".into());
        }
        if !(self.air_ramp > 0.0 && self.water_ramp > 0.0) {
            return bad("ramp rates must be positive".into());
        }
        if self.air_label >= self.n_y || self.water_label.is_some_and(|w| w >= self.n_y || w == self.air_label) {
            return bad("flow label slots must be distinct label indices".into());
        }
        if self.n_y < 1 + usize::from(self.water_label.is_some()) || self.internal_labels() > self.state_dim {
            return bad(format!(
                "{} internal labels need state_dim >= that count (state_dim {})",
                self.internal_labels(),
                self.state_dim
            ));
        }
        if !(self.source_low <= self.source_high) {
            return bad("source range must satisfy low <= high".into());
        }
        Ok(())
    }

    pub fn x_names(&self) -> Vec<String> {
        (1..=self.n_x).map(|i| format!("x{i}")).collect()
    }

    pub fn y_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_y);
        let mut k = 0;
        for j in 0..self.n_y {
            if j == self.air_label {
                names.push("air_flow".to_string());
            } else if Some(j) == self.water_label {
                names.push("water_flow".to_string());
            } else {
                k += 1;
                names.push(format!("state{k}"));
            }
        }
        names
    }

    /// Thirteen-label layouts are grouped like the plant they mirror: labels
    /// 1-7 "Pressure", 8-13 "Flow Rate and Density".
    pub fn schema(&self) -> Schema {
        let mut schema = Schema::from_names(&self.x_names(), &self.y_names());
        if self.n_y == 13 {
            for (k, c) in schema.columns.iter_mut().filter(|c| c.role == Role::Label).enumerate() {
                c.group = Some(if k < 7 { "Pressure" } else { "Flow Rate and Density" }.to_string());
            }
        }
        schema
    }
}

/// Fixed matrices of the synthetic process.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSystem {
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d: Tensor,
}

impl SynthSystem {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.system_seed);
        let n = cfg.state_dim;
        let raw = Tensor::standard_normal(n, n, &mut rng);
        let a = raw.scale(cfg.transition_scale / raw.norm_sq().sqrt());
        let b = Tensor::standard_normal(n, 2, &mut rng).scale(cfg.input_scale / 2f64.sqrt());
        let c = Tensor::standard_normal(cfg.n_x, n, &mut rng).scale(cfg.observation_scale / (n as f64).sqrt());
        let d = Tensor::standard_normal(n, n, &mut rng).scale(1.0 / (n as f64).sqrt());
        SynthSystem { a, b, c, d }
    }

    /// `tanh(A r + B d)`.
    pub fn transition(&self, r: &[f64], drive: [f64; 2]) -> Vec<f64> {
        (0..r.len())
            .map(|i| {
                let mut s = self.b.get(i, 0) * drive[0] + self.b.get(i, 1) * drive[1];
                for (j, rj) in r.iter().enumerate() {
                    s += self.a.get(i, j) * rj;
                }
                s.tanh()
            })
            .collect()
    }

    /// `C tanh(D r)`.
    pub fn observe(&self, r: &[f64]) -> Vec<f64> {
        let inner: Vec<f64> = (0..r.len())
            .map(|i| (0..r.len()).map(|j| self.d.get(i, j) * r[j]).sum::<f64>().tanh())
            .collect();
        (0..self.c.rows())
            .map(|i| (0..r.len()).map(|j| self.c.get(i, j) * inner[j]).sum())
            .collect()
    }
}

struct SetpointSchedule {
    setpoints: Vec<f64>,
    deck: Vec<usize>,
    hand: Vec<usize>,
    target: f64,
    value: f64,
    remaining: usize,
    ramp: f64,
}

impl SetpointSchedule {
    fn new<R: Rng + ?Sized>(setpoints: &[f64], counts: &[usize], ramp: f64, dwell: (usize, usize), rng: &mut R) -> Self {
        let deck: Vec<usize> = counts.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(i, c)).collect();
        let mut s = SetpointSchedule {
            setpoints: setpoints.to_vec(),
            deck,
            hand: Vec::new(),
            target: 0.0,
            value: 0.0,
            remaining: 0,
            ramp,
        };
        s.draw(dwell, rng);
        s.value = s.target;
        s
    }

    fn draw<R: Rng + ?Sized>(&mut self, dwell: (usize, usize), rng: &mut R) {
        if self.hand.is_empty() {
            self.hand = self.deck.clone();
            self.hand.shuffle(rng);
        }
        self.target = self.setpoints[self.hand.pop().expect("non-empty deck")];
        self.remaining = rng.gen_range(dwell.0..=dwell.1);
    }

    /// Current value, then advance one step.
    fn step<R: Rng + ?Sized>(&mut self, dwell: (usize, usize), rng: &mut R) -> f64 {
        let out = self.value;
        let gap = self.target - self.value;
        self.value = if gap.abs() <= self.ramp {
            self.target
        } else {
            self.value + self.ramp * gap.signum()
        };
        self.remaining -= 1;
        if self.remaining == 0 {
            self.draw(dwell, rng);
        }
        out
    }
}

fn unit_range(v: f64, setpoints: &[f64]) -> f64 {
    let lo = setpoints.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = setpoints.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    2.0 * (v - lo) / (hi - lo) - 1.0
}

/// Generates one sequence with its domain mask already applied to the air-flow label.
pub fn synth_generate(cfg: &SynthConfig) -> Result<TimeSeriesDataset> {
    cfg.validate()?;
    let sys = SynthSystem::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dwell = (cfg.dwell_min, cfg.dwell_max);
    let mut air = SetpointSchedule::new(&cfg.air_setpoints, &cfg.air_deck, cfg.air_ramp, dwell, &mut rng);
    let mut water = SetpointSchedule::new(&cfg.water_setpoints, &cfg.water_deck, cfg.water_ramp, dwell, &mut rng);
    let internal = cfg.internal_labels();
    let mut r = vec![0.0; cfg.state_dim];
    let mut xs = Vec::with_capacity(cfg.length * cfg.n_x);
    let mut ys = Vec::with_capacity(cfg.length * cfg.n_y);
    for _ in 0..cfg.length {
        let fa = air.step(dwell, &mut rng);
        let fw = water.step(dwell, &mut rng);
        for v in sys.observe(&r) {
            let e: f64 = rng.sample(StandardNormal);
            xs.push(v + cfg.observation_noise * e);
        }
        let mut k = 0;
        for j in 0..cfg.n_y {
            if j == cfg.air_label {
                ys.push(fa);
            } else if Some(j) == cfg.water_label {
                ys.push(fw);
            } else {
                let e: f64 = rng.sample(StandardNormal);
                ys.push(r[k] + cfg.label_noise * e);
                k += 1;
            }
        }
        debug_assert_eq!(k, internal);
        let drive = [unit_range(fa, &cfg.air_setpoints), unit_range(fw, &cfg.water_setpoints)];
        r = sys.transition(&r, drive);
        for v in &mut r {
            let e: f64 = rng.sample(StandardNormal);
            *v += cfg.process_noise * e;
        }
    }
    let mut data = TimeSeriesDataset::new(
        Tensor::from_vec(cfg.length, cfg.n_x, xs)?,
        Tensor::from_vec(cfg.length, cfg.n_y, ys)?,
        cfg.x_names(),
        cfg.y_names(),
    )?;
    data.domain = domain_split(&data, "air_flow", cfg.source_low, cfg.source_high)?;
    Ok(data)
}
