//! Training loop, checkpoints and single-particle inference.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Bindings, Graph, NodeId};
use crate::data::{domain_split, window, Normalization, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::flow::{transform_nodes, FlowConfig, VelocityPotential};
use crate::generative::{GenerativeModel, ModelConfig, ParticleEnsemble};
use crate::objective::{Window, WindowGraph};
use crate::optim::AdamState;
use crate::params::{Leaves, Params};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub window_length: usize,
    pub particles: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    /// Learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Keep the potential fixed (the prior-only ablation when it is zero).
    pub freeze_potential: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window_length: 100,
            particles: 8,
            batch_size: 16,
            lr: 1e-4,
            epochs: 300,
            l2: 0.01,
            lr_decay: 0.99,
            seed: 0,
            checkpoint_every: 25,
            freeze_potential: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 || self.batch_size == 0 || self.epochs == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "window_length, batch_size, epochs and checkpoint_every must be positive".into(),
            ));
        }
        if self.particles < 2 {
            return Err(Error::Config("training needs at least two particles".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) || !(self.l2 >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr and lr_decay must be positive, l2 non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate used during epoch `epoch` (counted from 1).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32 - 1)
    }
}

/// Label column and inclusive range that define the source domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainRule {
    pub column: String,
    pub low: f64,
    pub high: f64,
}

impl Default for DomainRule {
    fn default() -> Self {
        DomainRule {
            column: "air_flow".into(),
            low: 0.0278,
            high: 0.0347,
        }
    }
}

/// Everything a training run is configured by.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub domain: DomainRule,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.flow.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// FNV-1a hash of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serializes");
        text.bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
    }
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_theta: f64,
    pub loss_phi: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,loss_theta,loss_phi,lr,seconds";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch, self.loss_theta, self.loss_phi, self.lr, self.seconds
        )
    }
}

/// Receives progress from [`train`].
pub trait TrainObserver {
    fn epoch(&mut self, _log: &EpochLog) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` epochs and after the last epoch.
    fn checkpoint(&mut self, _epoch: usize, _model: &GenerativeModel, _potential: &VelocityPotential) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub log: Vec<EpochLog>,
    /// Generative parameter tensors that received a nonzero gradient at least once.
    pub touched_theta: usize,
    /// Potential parameter tensors that received a nonzero gradient at least once.
    pub touched_phi: usize,
}

fn all_finite(ts: &[Tensor]) -> bool {
    ts.iter().all(Tensor::is_finite)
}

/// Trains on consecutive windows of one or more sequences.
///
/// Windows are shuffled every epoch. A window starts from the transformed
/// ensemble its predecessor in the same sequence ended with the last time it
/// was evaluated (zeros before that, and always for a sequence's first
/// window), detached from the graph. Each batch steps the generative
/// parameters and the potential with separate Adam states.
pub fn train(
    cfg: &TrainConfig,
    flow: &FlowConfig,
    sequences: &[Vec<Window>],
    model: &mut GenerativeModel,
    potential: &mut VelocityPotential,
    observer: &mut dyn TrainObserver,
) -> Result<TrainSummary> {
    cfg.validate()?;
    flow.validate()?;
    let mut windows: Vec<&Window> = Vec::new();
    let mut predecessor: Vec<Option<usize>> = Vec::new();
    for seq in sequences {
        for (k, w) in seq.iter().enumerate() {
            if w.len() != cfg.window_length {
                return Err(Error::Invalid(format!(
                    "window of {} steps for window_length {}",
                    w.len(),
                    cfg.window_length
                )));
            }
            predecessor.push(if k == 0 { None } else { Some(windows.len() - 1) });
            windows.push(w);
        }
    }
    if windows.is_empty() {
        return Err(Error::Invalid("no training windows".into()));
    }
    let mc = model.config().clone();
    let fresh = ParticleEnsemble::zeros(cfg.particles, mc.n_z(), mc.n_h);
    let mut ends: Vec<Option<ParticleEnsemble>> = vec![None; windows.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut graphs: HashMap<usize, WindowGraph> = HashMap::new();
    let mut adam_theta = AdamState::new(&model.params);
    let mut adam_phi = AdamState::new(&potential.params);
    let mut touched_theta = vec![false; model.params.len()];
    let mut touched_phi = vec![false; potential.params.len()];
    let mut log = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut sum_theta, mut sum_phi) = (0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let wg = match graphs.entry(chunk.len()) {
                std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::hash_map::Entry::Vacant(e) => e.insert(WindowGraph::new(
                    model,
                    potential,
                    flow,
                    chunk.len(),
                    cfg.window_length,
                    cfg.particles,
                )?),
            };
            let batch: Vec<&Window> = chunk.iter().map(|&i| windows[i]).collect();
            let init: Vec<ParticleEnsemble> = chunk
                .iter()
                .map(|&i| {
                    predecessor[i]
                        .and_then(|p| ends[p].clone())
                        .unwrap_or_else(|| fresh.clone())
                })
                .collect();
            let noise = wg.sample_noise(&mut rng);
            let values = wg.forward(model, potential, &batch, &init, &noise)?;
            let losses = wg.losses(&values)?;
            let where_ = || format!("epoch {epoch}, batch {}", b + 1);
            if !losses.loss_theta.is_finite() || !losses.loss_phi.is_finite() {
                return Err(Error::NonFinite(format!("loss at {}", where_())));
            }
            let (g_theta, g_phi) = wg.gradients(model, potential, &values)?;
            drop(values);
            if !all_finite(&g_theta) || !all_finite(&g_phi) {
                return Err(Error::NonFinite(format!("gradient at {}", where_())));
            }
            for (t, g) in touched_theta.iter_mut().zip(&g_theta) {
                *t |= g.max_abs() > 0.0;
            }
            for (t, g) in touched_phi.iter_mut().zip(&g_phi) {
                *t |= g.max_abs() > 0.0;
            }
            adam_theta.step(&mut model.params, &g_theta, lr, cfg.l2)?;
            if !cfg.freeze_potential {
                adam_phi.step(&mut potential.params, &g_phi, lr, cfg.l2)?;
            }
            if !model.params.is_finite() || !potential.params.is_finite() {
                return Err(Error::NonFinite(format!("parameters after {}", where_())));
            }
            for (&i, e) in chunk.iter().zip(losses.final_ensembles) {
                ends[i] = Some(e);
            }
            let weight = chunk.len() as f64;
            sum_theta += losses.loss_theta * weight;
            sum_phi += losses.loss_phi * weight;
        }
        let n = windows.len() as f64;
        let row = EpochLog {
            epoch,
            loss_theta: sum_theta / n,
            loss_phi: sum_phi / n,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss_theta {:.5} loss_phi {:.5} lr {:.3e}",
            row.loss_theta, row.loss_phi, lr
        );
        observer.epoch(&row)?;
        log.push(row);
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            observer.checkpoint(epoch, model, potential)?;
        }
    }
    Ok(TrainSummary {
        log,
        touched_theta: touched_theta.iter().filter(|t| **t).count(),
        touched_phi: touched_phi.iter().filter(|t| **t).count(),
    })
}

/// Data-side state a run carries into its checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub columns: Columns,
    pub normalization: Normalization,
    pub windows: Vec<Window>,
    pub source_fraction: f64,
}

/// Applies the domain rule to the raw labels, normalizes (label statistics
/// from source steps only) and cuts windows.
pub fn prepare(config: &RunConfig, raw: &TimeSeriesDataset) -> Result<PreparedData> {
    let m = &config.model;
    if raw.x.cols() != m.n_x || raw.y.cols() != m.n_y {
        return Err(Error::Config(format!(
            "dataset has {} data and {} label columns, model expects n_x={} and n_y={}",
            raw.x.cols(),
            raw.y.cols(),
            m.n_x,
            m.n_y
        )));
    }
    let rule = &config.domain;
    let mut data = raw.clone();
    data.domain = domain_split(raw, &rule.column, rule.low, rule.high)?;
    let normalization = Normalization::fit_source_labels(&data)?;
    let normalized = normalization.apply(&data)?;
    Ok(PreparedData {
        columns: Columns {
            data: raw.x_names.clone(),
            labels: raw.y_names.clone(),
        },
        normalization,
        windows: window(&normalized, config.train.window_length)?,
        source_fraction: data.domain.source_fraction(),
    })
}

/// Builds a fresh model and potential from `config.train.seed`.
pub fn initialize(config: &RunConfig) -> Result<(GenerativeModel, VelocityPotential)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let model = GenerativeModel::new(&config.model, &mut rng)?;
    let mut potential = VelocityPotential::for_model(&config.model, &mut rng)?;
    if config.train.freeze_potential {
        potential.params.set_zero();
    }
    Ok((model, potential))
}

/// Trains from raw data and returns the final checkpoint.
pub fn train_run(
    config: &RunConfig,
    raw: &TimeSeriesDataset,
    observer: &mut dyn TrainObserver,
) -> Result<(Checkpoint, TrainSummary)> {
    config.validate()?;
    let prepared = prepare(config, raw)?;
    let (mut model, mut potential) = initialize(config)?;
    let summary = train(
        &config.train,
        &config.flow,
        std::slice::from_ref(&prepared.windows),
        &mut model,
        &mut potential,
        observer,
    )?;
    let ckpt = Checkpoint::new(config, config.train.epochs, &model, &potential).with_data(&prepared);
    Ok((ckpt, summary))
}

pub const CHECKPOINT_FORMAT: &str = "dpfb-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One parameter tensor, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Column names of the dataset a checkpoint was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Columns {
    pub data: Vec<String>,
    pub labels: Vec<String>,
}

/// A self-describing JSON checkpoint. Generative tensors are named
/// `theta/<param>` and potential tensors `phi/<param>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub epoch: usize,
    pub config: RunConfig,
    pub columns: Option<Columns>,
    pub normalization: Option<Normalization>,
    pub tensors: Vec<NamedTensor>,
}

fn export<'a>(prefix: &'a str, params: &'a Params) -> impl Iterator<Item = NamedTensor> + 'a {
    params.iter().map(move |(name, t)| NamedTensor {
        name: format!("{prefix}/{name}"),
        shape: t.shape(),
        data: t.data().to_vec(),
    })
}

fn import(prefix: &str, params: &mut Params, tensors: &HashMap<&'_ str, &NamedTensor>) -> Result<()> {
    for (name, t) in params.iter_mut() {
        let key = format!("{prefix}/{name}");
        let stored = tensors
            .get(key.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
        if stored.shape != t.shape() || stored.data.len() != t.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {key} has shape {:?}, model expects {:?}",
                stored.shape,
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&stored.data);
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(config: &RunConfig, epoch: usize, model: &GenerativeModel, potential: &VelocityPotential) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: config.train.seed,
            epoch,
            config: config.clone(),
            columns: None,
            normalization: None,
            tensors: export("theta", &model.params).chain(export("phi", &potential.params)).collect(),
        }
    }

    pub fn with_data(mut self, prepared: &PreparedData) -> Self {
        self.columns = Some(prepared.columns.clone());
        self.normalization = Some(prepared.normalization.clone());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format {:?})", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Rebuilds the model and potential with the stored parameters.
    pub fn restore(&self) -> Result<(GenerativeModel, VelocityPotential)> {
        self.config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut model = GenerativeModel::new(&self.config.model, &mut rng)?;
        let mut potential = VelocityPotential::for_model(&self.config.model, &mut rng)?;
        let by_name: HashMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        if by_name.len() != model.params.len() + potential.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model and potential have {}",
                by_name.len(),
                model.params.len() + potential.params.len()
            )));
        }
        import("theta", &mut model.params, &by_name)?;
        import("phi", &mut potential.params, &by_name)?;
        Ok((model, potential))
    }
}

/// Per-step outputs of single-particle inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `L x n_y` label predictions: the prior mean before the flow.
    pub y_pred: Tensor,
    /// `L x n_z` transformed latent state.
    pub z: Tensor,
    /// `L x n_h` transformed hidden state.
    pub h: Tensor,
}

struct InferenceGraph {
    graph: Graph,
    model_leaves: Leaves,
    potential_leaves: Leaves,
    z_prev: NodeId,
    h_prev: NodeId,
    x: NodeId,
    mu: NodeId,
    z: NodeId,
    h: NodeId,
}

impl InferenceGraph {
    fn new(model: &GenerativeModel, potential: &VelocityPotential, flow: &FlowConfig) -> Result<Self> {
        let cfg = model.config();
        let mut g = Graph::new();
        let model_leaves = model.params.declare(&mut g);
        let potential_leaves = potential.params.declare(&mut g);
        let z_prev = g.input("z_prev", 1, cfg.n_z());
        let h_prev = g.input("h_prev", 1, cfg.n_h);
        let x = g.input("x", 1, cfg.n_x);
        let noise = g.constant(Tensor::zeros(1, cfg.n_z()));
        let prior = model.prior_step_nodes(&mut g, &model_leaves, z_prev, h_prev, noise)?;
        let state = g.concat(&[prior.z, prior.h])?;
        let (moved, _) = transform_nodes(potential, flow, &mut g, &potential_leaves, x, state, 1)?;
        let z = g.slice_cols(moved, 0, cfg.n_z())?;
        let h = g.slice_cols(moved, cfg.n_z(), cfg.n_h)?;
        Ok(InferenceGraph {
            graph: g,
            model_leaves,
            potential_leaves,
            z_prev,
            h_prev,
            x,
            mu: prior.mu,
            z,
            h,
        })
    }
}

/// Runs one noise-free particle through a sequence of measurements,
/// applying the flow at every step.
pub fn infer(model: &GenerativeModel, potential: &VelocityPotential, flow: &FlowConfig, x: &Tensor) -> Result<Inference> {
    flow.validate()?;
    let cfg = model.config();
    if x.cols() != cfg.n_x {
        return Err(Error::shape(
            "infer",
            format!("data has {} columns, model expects n_x={}", x.cols(), cfg.n_x),
        ));
    }
    let ig = InferenceGraph::new(model, potential, flow)?;
    let steps = x.rows();
    let mut y_pred = Tensor::zeros(steps, cfg.n_z());
    let mut zs = Tensor::zeros(steps, cfg.n_z());
    let mut hs = Tensor::zeros(steps, cfg.n_h);
    let mut z = Tensor::zeros(1, cfg.n_z());
    let mut h = Tensor::zeros(1, cfg.n_h);
    let mut b = Bindings::new();
    model.params.bind(&ig.model_leaves, &mut b)?;
    potential.params.bind(&ig.potential_leaves, &mut b)?;
    for n in 0..steps {
        b.bind(ig.z_prev, z).bind(ig.h_prev, h);
        b.bind(ig.x, Tensor::row_vector(x.row(n).to_vec())?);
        let vals = ig.graph.forward(&b)?;
        z = vals.get(ig.z).clone();
        h = vals.get(ig.h).clone();
        if !z.is_finite() || !h.is_finite() {
            return Err(Error::NonFinite(format!("inference state at step {n}")));
        }
        for (dst, src) in [(&mut y_pred, vals.get(ig.mu)), (&mut zs, &z), (&mut hs, &h)] {
            for c in 0..src.cols() {
                dst.set(n, c, src.get(0, c));
            }
        }
    }
    Ok(Inference { y_pred, z: zs, h: hs })
}
