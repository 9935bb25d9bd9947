//! Stochastic recurrent generative model over particle ensembles.
//!
//! Each particle carries a latent state `z` and its own GRU hidden state `h`.
//! One prior step advances every particle independently:
//!
//! ```text
//! h_n        = gru(enc_z(z_{n-1}), h_{n-1})
//! (mu, sig)  = prior(h_n)
//! z_n        = mu + sig * eps
//! ```
//!
//! The decoder reads `concat(enc_z(z_n), h_n)`. Data never enters the GRU.
//! The prior head doubles as the label likelihood, which forces the latent
//! width to equal the label width.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{eval_blocks, Fcnn, FcnnSpec, GaussianHead, Gru, GruSpec};
use crate::params::{Leaves, Params};
use crate::tensor::Tensor;

/// Layer widths for the generative model and the velocity potential.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_x: usize,
    /// Label width; also the latent width.
    pub n_y: usize,
    pub n_h: usize,
    pub z_encoder_hidden: Vec<usize>,
    pub z_feature_width: usize,
    pub prior_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub x_encoder_hidden: Vec<usize>,
    pub x_feature_width: usize,
    pub potential_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_x: 7,
            n_y: 13,
            n_h: 512,
            z_encoder_hidden: vec![256],
            z_feature_width: 128,
            prior_hidden: vec![256, 128],
            decoder_hidden: vec![512, 256, 128],
            x_encoder_hidden: vec![128],
            x_feature_width: 64,
            potential_hidden: vec![512, 256, 128],
        }
    }
}

impl ModelConfig {
    /// Desk-scale widths for the three-measurement, two-label synthetic preset.
    pub fn small() -> Self {
        ModelConfig {
            n_x: 3,
            n_y: 2,
            n_h: 32,
            z_encoder_hidden: vec![32],
            z_feature_width: 16,
            prior_hidden: vec![32],
            decoder_hidden: vec![32, 32],
            x_encoder_hidden: vec![16],
            x_feature_width: 8,
            potential_hidden: vec![32, 32],
        }
    }

    pub fn n_z(&self) -> usize {
        self.n_y
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_x", self.n_x),
            ("n_y", self.n_y),
            ("n_h", self.n_h),
            ("z_feature_width", self.z_feature_width),
            ("x_feature_width", self.x_feature_width),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        let lists = [
            &self.z_encoder_hidden,
            &self.prior_hidden,
            &self.decoder_hidden,
            &self.x_encoder_hidden,
            &self.potential_hidden,
        ];
        if lists.iter().any(|l| l.contains(&0)) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Latent and hidden states of `P` particles at one time step, one particle per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub z: Tensor,
    pub h: Tensor,
}

impl ParticleEnsemble {
    pub fn new(z: Tensor, h: Tensor) -> Result<Self> {
        if z.rows() != h.rows() {
            return Err(Error::shape(
                "ensemble",
                format!("z has {} particles, h has {}", z.rows(), h.rows()),
            ));
        }
        Ok(ParticleEnsemble { z, h })
    }

    /// All particles at the origin.
    pub fn zeros(particles: usize, n_z: usize, n_h: usize) -> Self {
        ParticleEnsemble {
            z: Tensor::zeros(particles, n_z),
            h: Tensor::zeros(particles, n_h),
        }
    }

    pub fn particles(&self) -> usize {
        self.z.rows()
    }

    /// `[z | h]` per particle.
    pub fn state(&self) -> Tensor {
        Tensor::hcat(&[&self.z, &self.h]).expect("row counts checked on construction")
    }

    pub fn from_state(state: &Tensor, n_z: usize) -> Result<Self> {
        if n_z == 0 || n_z >= state.cols() {
            return Err(Error::shape(
                "ensemble",
                format!("cannot split {} columns at {n_z}", state.cols()),
            ));
        }
        Ok(ParticleEnsemble {
            z: state.slice_cols(0, n_z),
            h: state.slice_cols(n_z, state.cols() - n_z),
        })
    }

    pub fn permute(&self, order: &[usize]) -> Self {
        ParticleEnsemble {
            z: self.z.select_rows(order),
            h: self.h.select_rows(order),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.z.is_finite() && self.h.is_finite()
    }
}

/// Graph nodes produced by one prior step.
#[derive(Clone, Copy, Debug)]
pub struct PriorNodes {
    pub h: NodeId,
    pub mu: NodeId,
    pub sigma: NodeId,
    pub z: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeModel {
    config: ModelConfig,
    latent_encoder: Fcnn,
    gru: Gru,
    prior_head: GaussianHead,
    decoder_head: GaussianHead,
    pub params: Params,
}

impl GenerativeModel {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let latent_encoder = Fcnn::new(
            "enc_z",
            FcnnSpec::new(config.n_z(), &config.z_encoder_hidden, config.z_feature_width),
            &mut params,
            rng,
        )?;
        let gru = Gru::new(
            "gru",
            GruSpec {
                input_width: config.z_feature_width,
                hidden_width: config.n_h,
            },
            &mut params,
            rng,
        )?;
        let prior_head = GaussianHead::new("prior", config.n_h, &config.prior_hidden, config.n_z(), &mut params, rng)?;
        let decoder_head = GaussianHead::new(
            "dec",
            config.z_feature_width + config.n_h,
            &config.decoder_hidden,
            config.n_x,
            &mut params,
            rng,
        )?;
        Ok(GenerativeModel {
            config: config.clone(),
            latent_encoder,
            gru,
            prior_head,
            decoder_head,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn prior_head(&self) -> &GaussianHead {
        &self.prior_head
    }

    pub fn prior_step_nodes(
        &self,
        g: &mut Graph,
        leaves: &Leaves,
        z_prev: NodeId,
        h_prev: NodeId,
        noise: NodeId,
    ) -> Result<PriorNodes> {
        let feat = self.latent_encoder.apply(g, leaves, z_prev)?;
        let h = self.gru.step(g, leaves, feat, h_prev)?;
        let (mu, sigma) = self.prior_head.apply(g, leaves, h)?;
        let z = crate::nn::reparameterize(g, mu, sigma, noise)?;
        Ok(PriorNodes { h, mu, sigma, z })
    }

    /// Decoder mean and standard deviation nodes for particles `(z, h)`.
    pub fn decode_nodes(&self, g: &mut Graph, leaves: &Leaves, z: NodeId, h: NodeId) -> Result<(NodeId, NodeId)> {
        let feat = self.latent_encoder.apply(g, leaves, z)?;
        let joint = g.concat(&[feat, h])?;
        self.decoder_head.apply(g, leaves, joint)
    }

    fn check_ensemble(&self, e: &ParticleEnsemble) -> Result<()> {
        if e.z.cols() != self.config.n_z() || e.h.cols() != self.config.n_h || e.z.rows() != e.h.rows() {
            return Err(Error::shape(
                "ensemble",
                format!(
                    "z {:?} / h {:?} for n_z={}, n_h={}",
                    e.z.shape(),
                    e.h.shape(),
                    self.config.n_z(),
                    self.config.n_h
                ),
            ));
        }
        Ok(())
    }

    /// Samples the next prior ensemble from the transformed ensemble of the
    /// previous step. Returns the ensemble and the prior `(mu, sigma)`.
    pub fn prior_step(&self, prev: &ParticleEnsemble, noise: &Tensor) -> Result<(ParticleEnsemble, Tensor, Tensor)> {
        self.check_ensemble(prev)?;
        if noise.shape() != prev.z.shape() {
            return Err(Error::shape(
                "prior_step",
                format!("noise {:?} for {} particles", noise.shape(), prev.particles()),
            ));
        }
        let out = eval_blocks(&self.params, &[&prev.z, &prev.h, noise], |g, leaves, x| {
            let n = self.prior_step_nodes(g, leaves, x[0], x[1], x[2])?;
            Ok(vec![n.z, n.h, n.mu, n.sigma])
        })?;
        let mut it = out.into_iter();
        let (z, h, mu, sigma) = (
            it.next().expect("z"),
            it.next().expect("h"),
            it.next().expect("mu"),
            it.next().expect("sigma"),
        );
        Ok((ParticleEnsemble { z, h }, mu, sigma))
    }

    pub fn decode(&self, ensemble: &ParticleEnsemble) -> Result<(Tensor, Tensor)> {
        self.check_ensemble(ensemble)?;
        let mut out = eval_blocks(&self.params, &[&ensemble.z, &ensemble.h], |g, leaves, x| {
            let (m, s) = self.decode_nodes(g, leaves, x[0], x[1])?;
            Ok(vec![m, s])
        })?;
        let sigma = out.pop().expect("sigma");
        Ok((out.pop().expect("mu"), sigma))
    }
}

/// Per-row diagonal Gaussian log-density nodes: `P x n` inputs, `P x 1` output.
pub fn gaussian_log_density_nodes(g: &mut Graph, mu: NodeId, sigma: NodeId, value: NodeId) -> Result<NodeId> {
    let diff = g.sub(value, mu)?;
    let inv = g.recip(sigma)?;
    let z = g.mul(diff, inv)?;
    let sq = g.square(z)?;
    let log_sigma = g.log(sigma)?;
    let two_log_sigma = g.scale(log_sigma, 2.0)?;
    let terms = g.add(sq, two_log_sigma)?;
    let terms = g.add_scalar(terms, (2.0 * PI).ln())?;
    let total = g.sum_cols(terms)?;
    g.scale(total, -0.5)
}

/// Log-density of `value` (one row shared by all particles, or one row per
/// particle) under each particle's diagonal Gaussian.
pub fn gaussian_log_density(mu: &Tensor, sigma: &Tensor, value: &Tensor) -> Result<Vec<f64>> {
    if mu.shape() != sigma.shape() || value.cols() != mu.cols() || (value.rows() != 1 && value.rows() != mu.rows()) {
        return Err(Error::shape(
            "log_likelihood",
            format!("mu {:?}, sigma {:?}, value {:?}", mu.shape(), sigma.shape(), value.shape()),
        ));
    }
    let ln2pi = (2.0 * PI).ln();
    Ok((0..mu.rows())
        .map(|i| {
            let v = value.row(if value.rows() == 1 { 0 } else { i });
            let s: f64 = (0..mu.cols())
                .map(|k| {
                    let sd = sigma.get(i, k);
                    let r = (v[k] - mu.get(i, k)) / sd;
                    ln2pi + 2.0 * sd.ln() + r * r
                })
                .sum();
            -0.5 * s
        })
        .collect())
}

/// Label log-likelihood per particle under the prior head's Gaussian.
pub fn label_log_likelihood(mu_prior: &Tensor, sigma_prior: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    gaussian_log_density(mu_prior, sigma_prior, y)
}

/// Data log-likelihood per particle under the decoder's Gaussian.
pub fn data_log_likelihood(mu_dec: &Tensor, sigma_dec: &Tensor, x: &Tensor) -> Result<Vec<f64>> {
    gaussian_log_density(mu_dec, sigma_dec, x)
}
