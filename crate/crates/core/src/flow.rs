//! Potential-driven particle flow.
//!
//! Particles move along the gradient of a learned scalar velocity potential,
//! integrated with forward Euler over pseudo-time `[0, 1]`:
//!
//! ```text
//! s <- s + dt * grad_s phi(x, s)        (K steps, K * dt = 1)
//! ```
//!
//! where `s = [z | h]`. The potential is trained with
//!
//! ```text
//! L = 1/2 E ||grad phi||^2 + 1/2 Cov(phi, Gamma)
//! ```
//!
//! with `Gamma` the normalized innovation squared of the decoder at the
//! pre-flow particles, held constant.
//!
//! Particles of one ensemble occupy consecutive rows; a graph may hold several
//! ensembles stacked, each of `group` rows, and every ensemble statistic
//! (mean subtraction, covariance) is taken within a group.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::generative::ModelConfig;
use crate::nn::{Fcnn, FcnnSpec};
use crate::optim::AdamState;
use crate::params::{Leaves, Params};
use crate::tensor::Tensor;

/// A scalar field over particle states, conditioned on one measurement.
pub trait Potential {
    fn params(&self) -> &Params;

    fn params_mut(&mut self) -> &mut Params;

    fn data_width(&self) -> usize;

    fn state_width(&self) -> usize;

    /// Raw potential per row (`R x 1`) for measurements `x` (`R x n_x`) and states (`R x d`).
    fn build(&self, g: &mut Graph, leaves: &Leaves, x: NodeId, state: NodeId) -> Result<NodeId>;
}

/// FCNN potential on `concat(enc_x(x), z, h)` with a scalar output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityPotential {
    n_x: usize,
    state_width: usize,
    measurement_encoder: Fcnn,
    net: Fcnn,
    pub params: Params,
}

impl VelocityPotential {
    pub fn new<R: Rng + ?Sized>(
        n_x: usize,
        state_width: usize,
        encoder_hidden: &[usize],
        feature_width: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Params::new();
        let measurement_encoder = Fcnn::new("enc_x", FcnnSpec::new(n_x, encoder_hidden, feature_width), &mut params, rng)?;
        let net = Fcnn::new(
            "potential",
            FcnnSpec::new(feature_width + state_width, hidden, 1),
            &mut params,
            rng,
        )?;
        Ok(VelocityPotential {
            n_x,
            state_width,
            measurement_encoder,
            net,
            params,
        })
    }

    /// Potential over `[z | h]` sized from a model config.
    pub fn for_model<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        Self::new(
            config.n_x,
            config.n_z() + config.n_h,
            &config.x_encoder_hidden,
            config.x_feature_width,
            &config.potential_hidden,
            rng,
        )
    }
}

impl Potential for VelocityPotential {
    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn data_width(&self) -> usize {
        self.n_x
    }

    fn state_width(&self) -> usize {
        self.state_width
    }

    fn build(&self, g: &mut Graph, leaves: &Leaves, x: NodeId, state: NodeId) -> Result<NodeId> {
        let feat = self.measurement_encoder.apply(g, leaves, x)?;
        let joint = g.concat(&[feat, state])?;
        self.net.apply(g, leaves, joint)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub step_size: f64,
    pub num_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            step_size: 1.0,
            num_steps: 1,
        }
    }
}

impl FlowConfig {
    pub fn with_steps(num_steps: usize) -> Self {
        FlowConfig {
            step_size: 1.0 / num_steps as f64,
            num_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || self.num_steps == 0 {
            return Err(Error::Config("flow step_size and num_steps must be positive".into()));
        }
        if (self.step_size * self.num_steps as f64 - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "flow must cover pseudo-time [0, 1]: {} steps of {}",
                self.num_steps, self.step_size
            )));
        }
        Ok(())
    }
}

/// Nodes produced by one potential evaluation.
#[derive(Clone, Copy, Debug)]
pub struct PotentialNodes {
    /// Raw potential, `R x 1`.
    pub phi: NodeId,
    /// Potential with each group's mean removed.
    pub centered: NodeId,
    /// Gradient with respect to the state, `R x d`, still differentiable in the parameters.
    pub grad: NodeId,
}

/// Evaluates the potential at `state` and appends its state gradient.
///
/// The state is detached first. The FCNN potential is piecewise linear in the
/// state (leaky-ReLU hidden layers, linear output), so its state Hessian is
/// zero and detaching changes no gradient that reaches the model through the
/// transform. It does stop the flow objective from reaching the model
/// parameters through the particle positions.
pub fn potential_nodes<P: Potential + ?Sized>(
    pot: &P,
    g: &mut Graph,
    leaves: &Leaves,
    x: NodeId,
    state: NodeId,
    group: usize,
) -> Result<PotentialNodes> {
    let detached = g.stop_grad(state)?;
    let phi = pot.build(g, leaves, x, detached)?;
    let total = g.sum(phi)?;
    let grad = g.gradient(total, &[detached])?[0];
    let centered = g.group_center(phi, group)?;
    Ok(PotentialNodes { phi, centered, grad })
}

/// `Gamma_i = sum_k ((x_k - mu_ik) / sigma_ik)^2` per row.
pub fn nis_nodes(g: &mut Graph, x: NodeId, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
    let diff = g.sub(x, mu)?;
    let inv = g.recip(sigma)?;
    let r = g.mul(diff, inv)?;
    let sq = g.square(r)?;
    g.sum_cols(sq)
}

/// `1/2 mean ||grad||^2 + 1/2 mean(center(phi) * center(gamma))`, with
/// `gamma` detached. Returns `(total, gradient term, covariance term)`.
pub fn flow_objective_nodes(
    g: &mut Graph,
    pot: &PotentialNodes,
    gamma: NodeId,
    group: usize,
) -> Result<(NodeId, NodeId, NodeId)> {
    let rows = g.shape(pot.grad)[0] as f64;
    let sq = g.square(pot.grad)?;
    let energy = g.sum(sq)?;
    let energy = g.scale(energy, 0.5 / rows)?;
    let gamma = g.stop_grad(gamma)?;
    let gamma_c = g.group_center(gamma, group)?;
    let prod = g.mul(pot.centered, gamma_c)?;
    let cov = g.mean(prod)?;
    let cov = g.scale(cov, 0.5)?;
    let total = g.add(energy, cov)?;
    Ok((total, energy, cov))
}

/// Euler transport of `state`; returns the final state and the potential
/// nodes of the first (pre-flow) evaluation.
pub fn transform_nodes<P: Potential + ?Sized>(
    pot: &P,
    config: &FlowConfig,
    g: &mut Graph,
    leaves: &Leaves,
    x: NodeId,
    state: NodeId,
    group: usize,
) -> Result<(NodeId, PotentialNodes)> {
    let first = potential_nodes(pot, g, leaves, x, state, group)?;
    let mut s = state;
    let mut grad = first.grad;
    for k in 0..config.num_steps {
        if k > 0 {
            grad = potential_nodes(pot, g, leaves, x, s, group)?.grad;
        }
        let step = g.scale(grad, config.step_size)?;
        s = g.add(s, step)?;
    }
    Ok((s, first))
}

fn check_inputs<P: Potential + ?Sized>(pot: &P, x: &Tensor, state: &Tensor) -> Result<Tensor> {
    if state.cols() != pot.state_width() {
        return Err(Error::shape(
            "potential",
            format!("state width {} for potential over {}", state.cols(), pot.state_width()),
        ));
    }
    if x.cols() != pot.data_width() || (x.rows() != 1 && x.rows() != state.rows()) {
        return Err(Error::shape(
            "potential",
            format!("measurement {:?} for {} particles", x.shape(), state.rows()),
        ));
    }
    Ok(if x.rows() == 1 { x.repeat_rows(state.rows()) } else { x.clone() })
}

struct EagerGraph {
    g: Graph,
    leaves: Leaves,
    x: NodeId,
    state: NodeId,
}

impl EagerGraph {
    fn new<P: Potential + ?Sized>(pot: &P, rows: usize) -> Self {
        let mut g = Graph::new();
        let leaves = pot.params().declare(&mut g);
        let x = g.input("x", rows, pot.data_width());
        let state = g.input("state", rows, pot.state_width());
        EagerGraph { g, leaves, x, state }
    }

    fn run<P: Potential + ?Sized>(&self, pot: &P, x: Tensor, state: &Tensor) -> Result<crate::ad::Values> {
        let mut b = Bindings::new();
        pot.params().bind(&self.leaves, &mut b)?;
        b.bind(self.x, x).bind(self.state, state.clone());
        self.g.forward(&b)
    }
}

/// Normalized innovation squared of one measurement under each particle's decoder.
pub fn nis(x: &Tensor, mu_dec: &Tensor, sigma_dec: &Tensor) -> Result<Vec<f64>> {
    if mu_dec.shape() != sigma_dec.shape() || x.cols() != mu_dec.cols() || (x.rows() != 1 && x.rows() != mu_dec.rows()) {
        return Err(Error::shape(
            "nis",
            format!("x {:?}, mu {:?}, sigma {:?}", x.shape(), mu_dec.shape(), sigma_dec.shape()),
        ));
    }
    Ok((0..mu_dec.rows())
        .map(|i| {
            let xi = x.row(if x.rows() == 1 { 0 } else { i });
            (0..mu_dec.cols())
                .map(|k| {
                    let r = (xi[k] - mu_dec.get(i, k)) / sigma_dec.get(i, k);
                    r * r
                })
                .sum()
        })
        .collect())
}

/// Mean-subtracted potential of every particle in one ensemble.
pub fn potential_eval<P: Potential + ?Sized>(pot: &P, x: &Tensor, state: &Tensor) -> Result<Vec<f64>> {
    let xr = check_inputs(pot, x, state)?;
    let mut e = EagerGraph::new(pot, state.rows());
    let phi = pot.build(&mut e.g, &e.leaves, e.x, e.state)?;
    let centered = e.g.group_center(phi, state.rows())?;
    Ok(e.run(pot, xr, state)?.get(centered).data().to_vec())
}

/// State gradient of the potential for every particle.
pub fn flow_gradient<P: Potential + ?Sized>(pot: &P, x: &Tensor, state: &Tensor) -> Result<Tensor> {
    let xr = check_inputs(pot, x, state)?;
    let mut e = EagerGraph::new(pot, state.rows());
    let nodes = potential_nodes(pot, &mut e.g, &e.leaves, e.x, e.state, state.rows())?;
    Ok(e.run(pot, xr, state)?.get(nodes.grad).clone())
}

/// Transports an ensemble through the flow.
pub fn flow_transform<P: Potential + ?Sized>(pot: &P, config: &FlowConfig, x: &Tensor, state: &Tensor) -> Result<Tensor> {
    config.validate()?;
    let xr = check_inputs(pot, x, state)?;
    let mut e = EagerGraph::new(pot, state.rows());
    let first = potential_nodes(pot, &mut e.g, &e.leaves, e.x, e.state, state.rows())?;
    let grad_vals = e.run(pot, xr.clone(), state)?;
    let mut s = state.clone();
    let mut grad = grad_vals.get(first.grad).clone();
    for k in 0..config.num_steps {
        if k > 0 {
            grad = e.run(pot, xr.clone(), &s)?.get(first.grad).clone();
        }
        s = s.zip(&grad, |a, b| a + config.step_size * b);
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("flow step {} of {}", k + 1, config.num_steps)));
        }
    }
    Ok(s)
}

/// Flow objective of one ensemble for a fixed NIS vector.
pub fn flow_objective<P: Potential + ?Sized>(pot: &P, x: &Tensor, state: &Tensor, gamma: &[f64]) -> Result<f64> {
    let p = state.rows();
    if p < 2 {
        return Err(Error::Invalid("flow objective needs at least two particles".into()));
    }
    if gamma.len() != p {
        return Err(Error::shape("flow_objective", format!("{} NIS values for {p} particles", gamma.len())));
    }
    let xr = check_inputs(pot, x, state)?;
    let mut e = EagerGraph::new(pot, p);
    let gamma_node = e.g.constant(Tensor::column_vector(gamma.to_vec())?);
    let nodes = potential_nodes(pot, &mut e.g, &e.leaves, e.x, e.state, p)?;
    let (total, _, _) = flow_objective_nodes(&mut e.g, &nodes, gamma_node, p)?;
    Ok(e.run(pot, xr, state)?.get(total).item())
}

/// Settings for fitting a potential to a frozen ensemble.
#[derive(Clone, Debug)]
pub struct FitOptions {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied every iteration.
    pub lr_decay: f64,
    /// When nonzero, the objective over the whole ensemble is evaluated
    /// every `select_every` iterations and the best parameters seen are kept.
    /// Per-particle gradients of the energy term miss the effect of moving a
    /// leaky-ReLU kink across particles, so long fits can drift uphill.
    pub select_every: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            iterations: 1500,
            batch: 512,
            lr: 3e-3,
            lr_decay: 0.999,
            select_every: 0,
        }
    }
}

/// Minimizes the flow objective over the potential's parameters for a frozen
/// ensemble and NIS, using random minibatches as the ensemble estimate.
/// Returns the objective on each minibatch.
pub fn fit_potential<P, R>(
    pot: &mut P,
    x: &Tensor,
    state: &Tensor,
    gamma: &[f64],
    opts: &FitOptions,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    P: Potential + ?Sized,
    R: Rng + ?Sized,
{
    let n = state.rows();
    let batch = opts.batch.min(n);
    if batch < 2 || gamma.len() != n {
        return Err(Error::Invalid(format!(
            "fit needs >= 2 particles and one NIS value each ({} particles, {} values)",
            n,
            gamma.len()
        )));
    }
    let xr = check_inputs(pot, x, state)?;
    let mut e = EagerGraph::new(pot, batch);
    let gamma_in = e.g.input("gamma", batch, 1);
    let nodes = potential_nodes(pot, &mut e.g, &e.leaves, e.x, e.state, batch)?;
    let (total, _, _) = flow_objective_nodes(&mut e.g, &nodes, gamma_in, batch)?;
    let param_ids = e.leaves.ids();
    let mut adam = AdamState::new(pot.params());
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(opts.iterations);
    let mut lr = opts.lr;
    let mut cursor = n;
    let full = if opts.select_every > 0 {
        let mut f = EagerGraph::new(pot, n);
        let gamma_node = f.g.constant(Tensor::column_vector(gamma.to_vec())?);
        let nodes = potential_nodes(pot, &mut f.g, &f.leaves, f.x, f.state, n)?;
        let (objective, _, _) = flow_objective_nodes(&mut f.g, &nodes, gamma_node, n)?;
        Some((f, objective))
    } else {
        None
    };
    let evaluate = |pot: &P| -> Result<f64> {
        let (f, objective) = full.as_ref().expect("selection graph");
        Ok(f.run(pot, xr.clone(), state)?.get(*objective).item())
    };
    let mut best = match full {
        Some(_) => Some((evaluate(pot)?, pot.params().clone())),
        None => None,
    };
    for it in 1..=opts.iterations {
        if cursor + batch > n {
            order.shuffle(rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let mut b = Bindings::new();
        pot.params().bind(&e.leaves, &mut b)?;
        b.bind(e.x, xr.select_rows(idx));
        b.bind(e.state, state.select_rows(idx));
        b.bind(gamma_in, Tensor::column_vector(idx.iter().map(|&i| gamma[i]).collect())?);
        let vals = e.g.forward(&b)?;
        let loss = vals.get(total).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("potential fit objective at iteration {it}")));
        }
        history.push(loss);
        let grads = e.g.backward_wrt(&vals, total, &param_ids)?;
        let grads = pot.params().gradients_from(&e.leaves, &grads)?;
        adam.step(pot.params_mut(), &grads, lr, 0.0)?;
        lr *= opts.lr_decay;
        if let Some((best_value, best_params)) = best.as_mut() {
            if it % opts.select_every == 0 || it == opts.iterations {
                let value = evaluate(pot)?;
                if value < *best_value {
                    *best_value = value;
                    *best_params = pot.params().clone();
                }
            }
        }
    }
    if let Some((_, params)) = best {
        *pot.params_mut() = params;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_potential(rng: &mut ChaCha8Rng) -> VelocityPotential {
        VelocityPotential::new(2, 3, &[4], 3, &[8, 6], rng).unwrap()
    }

    #[test]
    fn nis_examples() {
        let mu = Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap();
        assert_eq!(nis(&mu, &mu, &Tensor::ones(1, 2)).unwrap(), vec![0.0]);
        let x = Tensor::from_rows(&[vec![1.5, 1.0]]).unwrap();
        assert_eq!(nis(&x, &mu, &Tensor::ones(1, 2)).unwrap(), vec![5.0]);
    }

    #[test]
    fn single_particle_potential_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pot = small_potential(&mut rng);
        let phi = potential_eval(&pot, &Tensor::ones(1, 2), &Tensor::standard_normal(1, 3, &mut rng)).unwrap();
        assert_eq!(phi, vec![0.0]);
    }

    #[test]
    fn zero_potential_is_flat_and_static() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut pot = small_potential(&mut rng);
        pot.params.set_zero();
        let x = Tensor::standard_normal(1, 2, &mut rng);
        let s = Tensor::standard_normal(5, 3, &mut rng);
        assert!(potential_eval(&pot, &x, &s).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(flow_gradient(&pot, &x, &s).unwrap(), Tensor::zeros(5, 3));
        assert_eq!(flow_transform(&pot, &FlowConfig::default(), &x, &s).unwrap(), s);
        let gamma: Vec<f64> = (0..5).map(|i| i as f64).collect();
        assert_eq!(flow_objective(&pot, &x, &s, &gamma).unwrap(), 0.0);
    }

    #[test]
    fn objective_needs_two_particles() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pot = small_potential(&mut rng);
        let err = flow_objective(&pot, &Tensor::ones(1, 2), &Tensor::ones(1, 3), &[1.0]);
        assert!(matches!(err, Err(Error::Invalid(_))));
    }

    #[test]
    fn config_must_cover_unit_interval() {
        assert!(FlowConfig::default().validate().is_ok());
        assert!(FlowConfig::with_steps(4).validate().is_ok());
        assert!(FlowConfig { step_size: 0.5, num_steps: 1 }.validate().is_err());
        assert!(FlowConfig { step_size: 1.0, num_steps: 0 }.validate().is_err());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let pot = small_potential(&mut rng);
        assert!(flow_gradient(&pot, &Tensor::ones(1, 3), &Tensor::ones(4, 3)).is_err());
        assert!(flow_gradient(&pot, &Tensor::ones(1, 2), &Tensor::ones(4, 2)).is_err());
    }
}
