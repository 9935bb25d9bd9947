//! Window objective: per-step reconstruction, source-label and flow terms.
//!
//! Each step of a window runs
//!
//! ```text
//! prior step -> decode (pre-flow) -> NIS -> flow objective
//!            -> flow transform -> decode (post-flow) -> reconstruction
//! ```
//!
//! and the label term scores the step's labels under the pre-flow prior head
//! when the step belongs to the source domain. Terms are averaged over
//! particles and sequences and summed over steps:
//!
//! ```text
//! loss_theta = sum_n recon_n + label_n
//! loss_phi   = sum_n flow_n
//! ```
//!
//! `loss_phi` has no path to the generative parameters: the potential sees
//! detached particle positions and the NIS is detached. The reconstruction
//! and label terms reach the potential through the transform.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Bindings, Graph, NodeId, Values};
use crate::error::{Error, Result};
use crate::flow::{flow_objective_nodes, nis_nodes, transform_nodes, FlowConfig, Potential};
use crate::generative::{gaussian_log_density_nodes, GenerativeModel, ParticleEnsemble};
use crate::params::Leaves;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Invalid(format!("unknown domain {other:?}"))),
        }
    }
}

/// Source/target flag for every step of a sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainMask {
    steps: Vec<Domain>,
}

impl DomainMask {
    pub fn new(steps: Vec<Domain>) -> Self {
        DomainMask { steps }
    }

    pub fn uniform(domain: Domain, len: usize) -> Self {
        DomainMask { steps: vec![domain; len] }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn get(&self, n: usize) -> Domain {
        self.steps[n]
    }

    pub fn steps(&self) -> &[Domain] {
        &self.steps
    }

    pub fn is_source(&self, n: usize) -> bool {
        self.steps[n] == Domain::Source
    }

    pub fn source_fraction(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().filter(|d| **d == Domain::Source).count() as f64 / self.steps.len() as f64
    }

    pub fn slice(&self, start: usize, len: usize) -> DomainMask {
        DomainMask {
            steps: self.steps[start..start + len].to_vec(),
        }
    }
}

/// A contiguous stretch of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `L x n_x` measurements.
    pub x: Tensor,
    /// `L x n_y` labels; rows on target steps never enter a loss.
    pub y: Tensor,
    pub mask: DomainMask,
}

impl Window {
    pub fn new(x: Tensor, y: Tensor, mask: DomainMask) -> Result<Self> {
        if x.rows() != y.rows() || x.rows() != mask.len() {
            return Err(Error::shape(
                "window",
                format!("x has {} rows, y {}, mask {}", x.rows(), y.rows(), mask.len()),
            ));
        }
        Ok(Window { x, y, mask })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// Per-step loss terms, already averaged over particles and sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    /// Negative data log-likelihood at the transformed particles.
    pub recon: f64,
    /// Negative source-label log-likelihood under the pre-flow prior; zero on target steps.
    pub label: f64,
    /// Flow objective of the pre-flow ensemble.
    pub flow: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowLoss {
    pub loss_theta: f64,
    pub loss_phi: f64,
    pub steps: Vec<StepLoss>,
    /// Transformed ensemble after the last step, one per sequence.
    pub final_ensembles: Vec<ParticleEnsemble>,
}

#[derive(Clone, Copy, Debug)]
struct StepNodes {
    x: NodeId,
    y: NodeId,
    weight: NodeId,
    noise: NodeId,
    recon: NodeId,
    label: NodeId,
    flow: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    /// Reconstruction plus label terms.
    Theta,
    /// Flow objective.
    Phi,
    Total,
}

/// Static graph of the window objective for a fixed batch size, window
/// length and particle count. Rows stack `batch` ensembles of `particles`
/// rows each; the graph is built once and re-bound for every batch.
pub struct WindowGraph {
    graph: Graph,
    model_leaves: Leaves,
    potential_leaves: Leaves,
    batch: usize,
    len: usize,
    particles: usize,
    n_x: usize,
    n_y: usize,
    n_z: usize,
    n_h: usize,
    z0: NodeId,
    h0: NodeId,
    steps: Vec<StepNodes>,
    loss_theta: NodeId,
    loss_phi: NodeId,
    total: NodeId,
    z_final: NodeId,
    h_final: NodeId,
}

impl WindowGraph {
    pub fn new<P: Potential + ?Sized>(
        model: &GenerativeModel,
        potential: &P,
        flow: &FlowConfig,
        batch: usize,
        len: usize,
        particles: usize,
    ) -> Result<Self> {
        flow.validate()?;
        if len == 0 {
            return Err(Error::Invalid("window must contain at least one step".into()));
        }
        if batch == 0 || particles < 2 {
            return Err(Error::Invalid(format!(
                "window objective needs a batch and at least two particles (batch {batch}, particles {particles})"
            )));
        }
        let cfg = model.config();
        let (n_x, n_y, n_z, n_h) = (cfg.n_x, cfg.n_y, cfg.n_z(), cfg.n_h);
        if potential.data_width() != n_x || potential.state_width() != n_z + n_h {
            return Err(Error::shape(
                "window",
                format!(
                    "potential over ({}, {}) for model with n_x={n_x}, state width {}",
                    potential.data_width(),
                    potential.state_width(),
                    n_z + n_h
                ),
            ));
        }
        let rows = batch * particles;
        let mut g = Graph::new();
        let model_leaves = model.params.declare(&mut g);
        let potential_leaves = potential.params().declare(&mut g);
        let z0 = g.input("z0", rows, n_z);
        let h0 = g.input("h0", rows, n_h);
        let (mut z, mut h) = (z0, h0);
        let mut steps = Vec::with_capacity(len);
        let mut recon_total: Option<NodeId> = None;
        let mut flow_total: Option<NodeId> = None;
        let accumulate = |g: &mut Graph, acc: Option<NodeId>, term: NodeId| -> Result<NodeId> {
            match acc {
                Some(a) => g.add(a, term),
                None => Ok(term),
            }
        };
        for n in 0..len {
            let x = g.input(format!("x{n}"), rows, n_x);
            let y = g.input(format!("y{n}"), rows, n_y);
            let weight = g.input(format!("w{n}"), rows, 1);
            let noise = g.input(format!("eps{n}"), rows, n_z);

            let prior = model.prior_step_nodes(&mut g, &model_leaves, z, h, noise)?;
            let label_ll = gaussian_log_density_nodes(&mut g, prior.mu, prior.sigma, y)?;
            let weighted = g.mul(label_ll, weight)?;
            let label = g.sum(weighted)?;
            let label = g.scale(label, -1.0 / rows as f64)?;

            let (mu_pre, sigma_pre) = model.decode_nodes(&mut g, &model_leaves, prior.z, prior.h)?;
            let gamma = nis_nodes(&mut g, x, mu_pre, sigma_pre)?;
            let state = g.concat(&[prior.z, prior.h])?;
            let (moved, pot) = transform_nodes(potential, flow, &mut g, &potential_leaves, x, state, particles)?;
            let (flow_loss, _, _) = flow_objective_nodes(&mut g, &pot, gamma, particles)?;

            z = g.slice_cols(moved, 0, n_z)?;
            h = g.slice_cols(moved, n_z, n_h)?;
            let (mu_dec, sigma_dec) = model.decode_nodes(&mut g, &model_leaves, z, h)?;
            let data_ll = gaussian_log_density_nodes(&mut g, mu_dec, sigma_dec, x)?;
            let recon = g.mean(data_ll)?;
            let recon = g.scale(recon, -1.0)?;

            let step_theta = g.add(recon, label)?;
            recon_total = Some(accumulate(&mut g, recon_total, step_theta)?);
            flow_total = Some(accumulate(&mut g, flow_total, flow_loss)?);
            steps.push(StepNodes {
                x,
                y,
                weight,
                noise,
                recon,
                label,
                flow: flow_loss,
            });
        }
        let loss_theta = recon_total.expect("non-empty window");
        let loss_phi = flow_total.expect("non-empty window");
        let total = g.add(loss_theta, loss_phi)?;
        Ok(WindowGraph {
            graph: g,
            model_leaves,
            potential_leaves,
            batch,
            len,
            particles,
            n_x,
            n_y,
            n_z,
            n_h,
            z0,
            h0,
            steps,
            loss_theta,
            loss_phi,
            total,
            z_final: z,
            h_final: h,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.len()
    }

    /// Standard-normal reparameterization noise for every step.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor> {
        (0..self.len)
            .map(|_| Tensor::standard_normal(self.batch * self.particles, self.n_z, rng))
            .collect()
    }

    fn bindings<P: Potential + ?Sized>(
        &self,
        model: &GenerativeModel,
        potential: &P,
        windows: &[&Window],
        init: &[ParticleEnsemble],
        noise: &[Tensor],
    ) -> Result<Bindings> {
        let rows = self.batch * self.particles;
        if windows.len() != self.batch || init.len() != self.batch || noise.len() != self.len {
            return Err(Error::shape(
                "window",
                format!(
                    "{} windows, {} initial ensembles and {} noise steps for batch {} of length {}",
                    windows.len(),
                    init.len(),
                    noise.len(),
                    self.batch,
                    self.len
                ),
            ));
        }
        for w in windows {
            if w.len() != self.len || w.x.cols() != self.n_x || w.y.cols() != self.n_y {
                return Err(Error::shape(
                    "window",
                    format!(
                        "window x {:?}, y {:?} for length {}, n_x={}, n_y={}",
                        w.x.shape(),
                        w.y.shape(),
                        self.len,
                        self.n_x,
                        self.n_y
                    ),
                ));
            }
        }
        for e in init {
            if e.particles() != self.particles || e.z.cols() != self.n_z || e.h.cols() != self.n_h {
                return Err(Error::shape(
                    "window",
                    format!("initial ensemble z {:?}, h {:?}", e.z.shape(), e.h.shape()),
                ));
            }
        }
        let mut b = Bindings::new();
        model.params.bind(&self.model_leaves, &mut b)?;
        potential.params().bind(&self.potential_leaves, &mut b)?;
        let zs: Vec<&Tensor> = init.iter().map(|e| &e.z).collect();
        let hs: Vec<&Tensor> = init.iter().map(|e| &e.h).collect();
        b.bind(self.z0, Tensor::vcat(&zs)?);
        b.bind(self.h0, Tensor::vcat(&hs)?);
        let p = self.particles;
        for (n, nodes) in self.steps.iter().enumerate() {
            if noise[n].shape() != [rows, self.n_z] {
                return Err(Error::shape("window", format!("noise {:?} at step {n}", noise[n].shape())));
            }
            let x = Tensor::from_fn(rows, self.n_x, |r, c| windows[r / p].x.get(n, c));
            let y = Tensor::from_fn(rows, self.n_y, |r, c| {
                let w = windows[r / p];
                if w.mask.is_source(n) {
                    w.y.get(n, c)
                } else {
                    0.0
                }
            });
            let weight = Tensor::from_fn(rows, 1, |r, _| if windows[r / p].mask.is_source(n) { 1.0 } else { 0.0 });
            b.bind(nodes.x, x).bind(nodes.y, y).bind(nodes.weight, weight);
            b.bind(nodes.noise, noise[n].clone());
        }
        Ok(b)
    }

    pub fn forward<P: Potential + ?Sized>(
        &self,
        model: &GenerativeModel,
        potential: &P,
        windows: &[&Window],
        init: &[ParticleEnsemble],
        noise: &[Tensor],
    ) -> Result<Values> {
        let b = self.bindings(model, potential, windows, init, noise)?;
        self.graph.forward(&b)
    }

    pub fn losses(&self, values: &Values) -> Result<WindowLoss> {
        let steps = self
            .steps
            .iter()
            .map(|s| StepLoss {
                recon: values.get(s.recon).item(),
                label: values.get(s.label).item(),
                flow: values.get(s.flow).item(),
            })
            .collect();
        let z = values.get(self.z_final);
        let h = values.get(self.h_final);
        let p = self.particles;
        let final_ensembles = (0..self.batch)
            .map(|b| ParticleEnsemble::new(z.slice_rows(b * p, p), h.slice_rows(b * p, p)))
            .collect::<Result<Vec<_>>>()?;
        Ok(WindowLoss {
            loss_theta: values.get(self.loss_theta).item(),
            loss_phi: values.get(self.loss_phi).item(),
            steps,
            final_ensembles,
        })
    }

    /// Gradients of one loss term, split into the generative parameters and
    /// the potential parameters.
    pub fn gradients_of<P: Potential + ?Sized>(
        &self,
        model: &GenerativeModel,
        potential: &P,
        values: &Values,
        term: LossTerm,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let root = match term {
            LossTerm::Theta => self.loss_theta,
            LossTerm::Phi => self.loss_phi,
            LossTerm::Total => self.total,
        };
        let mut leaves = self.model_leaves.ids();
        leaves.extend(self.potential_leaves.ids());
        let grads = self.graph.backward_wrt(values, root, &leaves)?;
        Ok((
            model.params.gradients_from(&self.model_leaves, &grads)?,
            potential.params().gradients_from(&self.potential_leaves, &grads)?,
        ))
    }

    /// Gradients of `loss_theta + loss_phi`, split into the generative
    /// parameters and the potential parameters, each in parameter order.
    ///
    /// The generative part equals the gradient of `loss_theta` alone, since
    /// `loss_phi` does not depend on those parameters.
    pub fn gradients<P: Potential + ?Sized>(
        &self,
        model: &GenerativeModel,
        potential: &P,
        values: &Values,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        self.gradients_of(model, potential, values, LossTerm::Total)
    }
}

/// Objective of a single window started from `init`.
pub fn window_loss<P: Potential + ?Sized>(
    model: &GenerativeModel,
    potential: &P,
    flow: &FlowConfig,
    window: &Window,
    init: &ParticleEnsemble,
    noise: &[Tensor],
) -> Result<WindowLoss> {
    let wg = WindowGraph::new(model, potential, flow, 1, window.len(), init.particles())?;
    let values = wg.forward(model, potential, &[window], std::slice::from_ref(init), noise)?;
    wg.losses(&values)
}

/// Loss terms of one step and the transformed ensemble it hands to the next step.
#[allow(clippy::too_many_arguments)]
pub fn step_loss<P: Potential + ?Sized>(
    model: &GenerativeModel,
    potential: &P,
    flow: &FlowConfig,
    x: &Tensor,
    y: &Tensor,
    domain: Domain,
    prev: &ParticleEnsemble,
    noise: &Tensor,
) -> Result<(StepLoss, ParticleEnsemble)> {
    let window = Window::new(x.clone(), y.clone(), DomainMask::uniform(domain, 1))?;
    let mut out = window_loss(model, potential, flow, &window, prev, std::slice::from_ref(noise))?;
    Ok((out.steps[0], out.final_ensembles.remove(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::VelocityPotential;
    use crate::generative::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (GenerativeModel, VelocityPotential, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cfg = ModelConfig {
            n_x: 3,
            n_y: 2,
            n_h: 6,
            z_encoder_hidden: vec![5],
            z_feature_width: 4,
            prior_hidden: vec![5],
            decoder_hidden: vec![6],
            x_encoder_hidden: vec![4],
            x_feature_width: 3,
            potential_hidden: vec![8, 6],
        };
        let model = GenerativeModel::new(&cfg, &mut rng).unwrap();
        let pot = VelocityPotential::for_model(&cfg, &mut rng).unwrap();
        (model, pot, rng)
    }

    fn random_window(len: usize, domain: Domain, rng: &mut ChaCha8Rng) -> Window {
        Window::new(
            Tensor::uniform(len, 3, 2.0, rng),
            Tensor::uniform(len, 2, 2.0, rng),
            DomainMask::uniform(domain, len),
        )
        .unwrap()
    }

    #[test]
    fn target_steps_have_zero_label_loss() {
        let (model, pot, mut rng) = toy();
        let w = random_window(3, Domain::Target, &mut rng);
        let noise: Vec<Tensor> = (0..3).map(|_| Tensor::standard_normal(4, 2, &mut rng)).collect();
        let out = window_loss(&model, &pot, &FlowConfig::default(), &w, &ParticleEnsemble::zeros(4, 2, 6), &noise).unwrap();
        assert!(out.steps.iter().all(|s| s.label == 0.0));
        assert!(out.loss_theta.is_finite() && out.loss_phi.is_finite());
    }

    #[test]
    fn masks_change_only_the_label_term() {
        let (model, pot, mut rng) = toy();
        let src = random_window(4, Domain::Source, &mut rng);
        let tgt = Window::new(src.x.clone(), src.y.clone(), DomainMask::uniform(Domain::Target, 4)).unwrap();
        let noise: Vec<Tensor> = (0..4).map(|_| Tensor::standard_normal(3, 2, &mut rng)).collect();
        let init = ParticleEnsemble::zeros(3, 2, 6);
        let a = window_loss(&model, &pot, &FlowConfig::default(), &src, &init, &noise).unwrap();
        let b = window_loss(&model, &pot, &FlowConfig::default(), &tgt, &init, &noise).unwrap();
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(sa.recon, sb.recon);
            assert_eq!(sa.flow, sb.flow);
            assert_eq!(sb.label, 0.0);
            assert!(sa.label != 0.0);
        }
        let label_sum: f64 = a.steps.iter().map(|s| s.label).sum();
        assert!((a.loss_theta - b.loss_theta - label_sum).abs() < 1e-12);
    }

    #[test]
    fn single_step_window_matches_step_loss() {
        let (model, pot, mut rng) = toy();
        let w = random_window(1, Domain::Source, &mut rng);
        let noise = Tensor::standard_normal(5, 2, &mut rng);
        let init = ParticleEnsemble::new(Tensor::standard_normal(5, 2, &mut rng), Tensor::uniform(5, 6, 0.5, &mut rng)).unwrap();
        let whole = window_loss(&model, &pot, &FlowConfig::default(), &w, &init, std::slice::from_ref(&noise)).unwrap();
        let (step, next) = step_loss(&model, &pot, &FlowConfig::default(), &w.x, &w.y, Domain::Source, &init, &noise).unwrap();
        assert_eq!(whole.steps[0], step);
        assert_eq!(whole.loss_theta, step.recon + step.label);
        assert_eq!(whole.loss_phi, step.flow);
        assert_eq!(whole.final_ensembles[0], next);
    }

    #[test]
    fn empty_window_is_rejected() {
        let (model, pot, _) = toy();
        assert!(WindowGraph::new(&model, &pot, &FlowConfig::default(), 1, 0, 4).is_err());
    }

    #[test]
    fn batched_graph_matches_separate_windows() {
        let (model, pot, mut rng) = toy();
        let flow = FlowConfig::default();
        let w1 = random_window(3, Domain::Source, &mut rng);
        let w2 = random_window(3, Domain::Target, &mut rng);
        let wg = WindowGraph::new(&model, &pot, &flow, 2, 3, 4).unwrap();
        let init = vec![ParticleEnsemble::zeros(4, 2, 6), ParticleEnsemble::zeros(4, 2, 6)];
        let noise = wg.sample_noise(&mut rng);
        let vals = wg.forward(&model, &pot, &[&w1, &w2], &init, &noise).unwrap();
        let both = wg.losses(&vals).unwrap();
        let split = |b: usize| -> Vec<Tensor> { noise.iter().map(|t| t.slice_rows(4 * b, 4)).collect() };
        let a = window_loss(&model, &pot, &flow, &w1, &init[0], &split(0)).unwrap();
        let b = window_loss(&model, &pot, &flow, &w2, &init[1], &split(1)).unwrap();
        assert!((both.loss_theta - 0.5 * (a.loss_theta + b.loss_theta)).abs() < 1e-10);
        assert!((both.loss_phi - 0.5 * (a.loss_phi + b.loss_phi)).abs() < 1e-10);
        assert!(both.final_ensembles[1].z.max_abs_diff(&b.final_ensembles[0].z) < 1e-12);
    }
}
