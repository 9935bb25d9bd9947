//! Fully connected networks, a GRU cell, Gaussian heads and the
//! reparameterized sampler, all expressed as graph builders.
//!
//! Every block registers its parameters in a [`Params`] set under a name
//! prefix and later reads them back through the matching [`Leaves`]. Weights
//! are `fan_in x fan_out` so a layer maps particle rows as `x W + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{Leaves, Params};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Lower bound added to every softplus standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcnnSpec {
    /// Input width, hidden widths, output width.
    pub layer_widths: Vec<usize>,
}

impl FcnnSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut layer_widths = Vec::with_capacity(hidden.len() + 2);
        layer_widths.push(input);
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(output);
        FcnnSpec { layer_widths }
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 || self.layer_widths.contains(&0) {
            return Err(Error::Invalid(format!(
                "fcnn widths must have at least one layer and be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruSpec {
    pub input_width: usize,
    pub hidden_width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Linear {
    weight: String,
    bias: String,
}

impl Linear {
    fn register<R: Rng + ?Sized>(prefix: &str, fan_in: usize, fan_out: usize, params: &mut Params, rng: &mut R) -> Self {
        let l = Linear {
            weight: format!("{prefix}.w"),
            bias: format!("{prefix}.b"),
        };
        params.insert_linear(&l.weight, &l.bias, fan_in, fan_out, rng);
        l
    }

    fn apply(&self, g: &mut Graph, leaves: &Leaves, input: NodeId) -> Result<NodeId> {
        let xw = g.matmul(input, leaves.get(&self.weight)?)?;
        g.add_row(xw, leaves.get(&self.bias)?)
    }
}

/// Check that a graph node has `width` columns before feeding it to `block`.
fn expect_width(g: &Graph, node: NodeId, width: usize, block: &str) -> Result<()> {
    let got = g.shape(node)[1];
    if got != width {
        return Err(Error::shape(
            block.to_string(),
            format!("expected input width {width}, got {got}"),
        ));
    }
    Ok(())
}

/// Fully connected network: leaky-ReLU on hidden layers, identity on the output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fcnn {
    name: String,
    spec: FcnnSpec,
    layers: Vec<Linear>,
    activate_output: bool,
}

impl Fcnn {
    pub fn new<R: Rng + ?Sized>(name: &str, spec: FcnnSpec, params: &mut Params, rng: &mut R) -> Result<Self> {
        Self::build(name, spec, false, params, rng)
    }

    fn build<R: Rng + ?Sized>(
        name: &str,
        spec: FcnnSpec,
        activate_output: bool,
        params: &mut Params,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::register(&format!("{name}.{i}"), w[0], w[1], params, rng))
            .collect();
        Ok(Fcnn {
            name: name.to_string(),
            spec,
            layers,
            activate_output,
        })
    }

    pub fn spec(&self) -> &FcnnSpec {
        &self.spec
    }

    pub fn apply(&self, g: &mut Graph, leaves: &Leaves, input: NodeId) -> Result<NodeId> {
        expect_width(g, input, self.spec.input_width(), &self.name)?;
        let mut h = input;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, leaves, h)?;
            if i < last || self.activate_output {
                h = g.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }

    /// Evaluates the network on a batch of rows.
    pub fn eval(&self, params: &Params, input: &Tensor) -> Result<Tensor> {
        let mut out = eval_blocks(params, &[input], |g, leaves, x| {
            Ok(vec![self.apply(g, leaves, x[0])?])
        })?;
        Ok(out.remove(0))
    }
}

/// Single-layer GRU cell with gates ordered reset, update, candidate and
/// biases on both the input and recurrent paths:
///
/// ```text
/// r  = sigmoid(x W_r + b_r + h U_r + c_r)
/// u  = sigmoid(x W_u + b_u + h U_u + c_u)
/// n  = tanh(x W_n + b_n + r * (h U_n + c_n))
/// h' = (1 - u) * n + u * h
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    name: String,
    spec: GruSpec,
    input_map: Linear,
    hidden_map: Linear,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(name: &str, spec: GruSpec, params: &mut Params, rng: &mut R) -> Result<Self> {
        if spec.input_width == 0 || spec.hidden_width == 0 {
            return Err(Error::Invalid(format!("gru widths must be positive: {spec:?}")));
        }
        let h = spec.hidden_width;
        let input_map = Linear {
            weight: format!("{name}.w_in"),
            bias: format!("{name}.b_in"),
        };
        let hidden_map = Linear {
            weight: format!("{name}.w_hid"),
            bias: format!("{name}.b_hid"),
        };
        params.insert_linear(&input_map.weight, &input_map.bias, spec.input_width, 3 * h, rng);
        params.insert_linear(&hidden_map.weight, &hidden_map.bias, h, 3 * h, rng);
        Ok(Gru {
            name: name.to_string(),
            spec,
            input_map,
            hidden_map,
        })
    }

    pub fn spec(&self) -> &GruSpec {
        &self.spec
    }

    pub fn step(&self, g: &mut Graph, leaves: &Leaves, input: NodeId, h_prev: NodeId) -> Result<NodeId> {
        let h = self.spec.hidden_width;
        expect_width(g, input, self.spec.input_width, &self.name)?;
        expect_width(g, h_prev, h, &self.name)?;
        let gi = self.input_map.apply(g, leaves, input)?;
        let gh = self.hidden_map.apply(g, leaves, h_prev)?;
        let (ir, iu, inn) = (g.slice_cols(gi, 0, h)?, g.slice_cols(gi, h, h)?, g.slice_cols(gi, 2 * h, h)?);
        let (hr, hu, hn) = (g.slice_cols(gh, 0, h)?, g.slice_cols(gh, h, h)?, g.slice_cols(gh, 2 * h, h)?);
        let r_pre = g.add(ir, hr)?;
        let reset = g.sigmoid(r_pre)?;
        let u_pre = g.add(iu, hu)?;
        let update = g.sigmoid(u_pre)?;
        let gated = g.mul(reset, hn)?;
        let n_pre = g.add(inn, gated)?;
        let cand = g.tanh(n_pre)?;
        // h' = n + u * (h - n)
        let diff = g.sub(h_prev, cand)?;
        let keep = g.mul(update, diff)?;
        g.add(cand, keep)
    }

    pub fn eval(&self, params: &Params, input: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
        let mut out = eval_blocks(params, &[input, h_prev], |g, leaves, x| {
            Ok(vec![self.step(g, leaves, x[0], x[1])?])
        })?;
        Ok(out.remove(0))
    }
}

/// Diagonal Gaussian head: a shared leaky-ReLU trunk followed by a linear
/// mean map and a linear map through `softplus(.) + SIGMA_FLOOR` for the
/// standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    name: String,
    trunk: Option<Fcnn>,
    mean: Linear,
    scale: Linear,
    input_width: usize,
    output_width: usize,
}

impl GaussianHead {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input_width: usize,
        hidden: &[usize],
        output_width: usize,
        params: &mut Params,
        rng: &mut R,
    ) -> Result<Self> {
        if input_width == 0 || output_width == 0 {
            return Err(Error::Invalid(format!("gaussian head {name} needs positive widths")));
        }
        let trunk = match hidden.split_last() {
            None => None,
            Some((&last, inner)) => Some(Fcnn::build(
                &format!("{name}.trunk"),
                FcnnSpec::new(input_width, inner, last),
                true,
                params,
                rng,
            )?),
        };
        let feat = hidden.last().copied().unwrap_or(input_width);
        let mean = Linear::register(&format!("{name}.mean"), feat, output_width, params, rng);
        let scale = Linear::register(&format!("{name}.scale"), feat, output_width, params, rng);
        Ok(GaussianHead {
            name: name.to_string(),
            trunk,
            mean,
            scale,
            input_width,
            output_width,
        })
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.output_width
    }

    /// Returns `(mean, std)` nodes.
    pub fn apply(&self, g: &mut Graph, leaves: &Leaves, input: NodeId) -> Result<(NodeId, NodeId)> {
        expect_width(g, input, self.input_width, &self.name)?;
        let feat = match &self.trunk {
            Some(t) => t.apply(g, leaves, input)?,
            None => input,
        };
        let mu = self.mean.apply(g, leaves, feat)?;
        let raw = self.scale.apply(g, leaves, feat)?;
        let sp = g.softplus(raw)?;
        let sigma = g.add_scalar(sp, SIGMA_FLOOR)?;
        Ok((mu, sigma))
    }

    pub fn eval(&self, params: &Params, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut out = eval_blocks(params, &[input], |g, leaves, x| {
            let (m, s) = self.apply(g, leaves, x[0])?;
            Ok(vec![m, s])
        })?;
        let sigma = out.pop().expect("two outputs");
        Ok((out.pop().expect("two outputs"), sigma))
    }

    /// The mean path as a standalone network sharing this head's parameters.
    pub fn mean_branch(&self) -> Fcnn {
        let mut layers = self.trunk.as_ref().map(|t| t.layers.clone()).unwrap_or_default();
        layers.push(self.mean.clone());
        let mut widths = self
            .trunk
            .as_ref()
            .map(|t| t.spec.layer_widths.clone())
            .unwrap_or_else(|| vec![self.input_width]);
        widths.push(self.output_width);
        Fcnn {
            name: format!("{}.mean_branch", self.name),
            spec: FcnnSpec { layer_widths: widths },
            layers,
            activate_output: false,
        }
    }
}

/// `mu + sigma * eps` as graph nodes.
pub fn reparameterize(g: &mut Graph, mu: NodeId, sigma: NodeId, eps: NodeId) -> Result<NodeId> {
    let scaled = g.mul(sigma, eps)?;
    g.add(mu, scaled)
}

/// Eager form of [`reparameterize`].
pub fn reparameterize_values(mu: &Tensor, sigma: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if mu.shape() != sigma.shape() || mu.shape() != eps.shape() {
        return Err(Error::shape(
            "reparameterize",
            format!("{:?}, {:?}, {:?}", mu.shape(), sigma.shape(), eps.shape()),
        ));
    }
    let scaled = sigma.zip(eps, |s, e| s * e);
    Ok(mu.zip(&scaled, |m, v| m + v))
}

/// Builds a throwaway graph over `params` plus the given data inputs and
/// returns the values of the nodes produced by `build`.
pub(crate) fn eval_blocks(
    params: &Params,
    inputs: &[&Tensor],
    build: impl FnOnce(&mut Graph, &Leaves, &[NodeId]) -> Result<Vec<NodeId>>,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let leaves = params.declare(&mut g);
    let ids: Vec<NodeId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.input(format!("input{i}"), t.rows(), t.cols()))
        .collect();
    let outs = build(&mut g, &leaves, &ids)?;
    let mut b = Bindings::new();
    params.bind(&leaves, &mut b)?;
    for (id, t) in ids.iter().zip(inputs) {
        b.bind(*id, (*t).clone());
    }
    let vals = g.forward(&b)?;
    Ok(outs.into_iter().map(|id| vals.get(id).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_fcnn_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::new();
        let net = Fcnn::new("f", FcnnSpec::new(3, &[5, 4], 2), &mut p, &mut rng).unwrap();
        p.set_zero();
        let out = net.eval(&p, &Tensor::from_fn(4, 3, |r, c| r as f64 - c as f64)).unwrap();
        assert_eq!(out, Tensor::zeros(4, 2));
    }

    #[test]
    fn identity_single_layer_passes_positive_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = Params::new();
        let net = Fcnn::new("f", FcnnSpec::new(3, &[], 3), &mut p, &mut rng).unwrap();
        *p.get_mut("f.0.w").unwrap() = Tensor::identity(3);
        p.get_mut("f.0.b").unwrap().data_mut().fill(0.0);
        let x = Tensor::from_fn(2, 3, |r, c| 0.5 + (r * 3 + c) as f64);
        assert_eq!(net.eval(&p, &x).unwrap(), x);
    }

    #[test]
    fn width_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Params::new();
        let net = Fcnn::new("enc", FcnnSpec::new(3, &[4], 2), &mut p, &mut rng).unwrap();
        let err = net.eval(&p, &Tensor::zeros(2, 4)).unwrap_err().to_string();
        assert!(err.contains("enc"), "{err}");
        assert!(FcnnSpec::new(0, &[], 2).validate().is_err());
        assert!(FcnnSpec { layer_widths: vec![3] }.validate().is_err());
    }

    #[test]
    fn zero_gru_keeps_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = Params::new();
        let gru = Gru::new("gru", GruSpec { input_width: 3, hidden_width: 5 }, &mut p, &mut rng).unwrap();
        p.set_zero();
        let h = gru.eval(&p, &Tensor::ones(2, 3), &Tensor::zeros(2, 5)).unwrap();
        assert_eq!(h, Tensor::zeros(2, 5));
    }

    #[test]
    fn zero_head_gives_softplus_zero_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = Params::new();
        let head = GaussianHead::new("prior", 4, &[6, 3], 2, &mut p, &mut rng).unwrap();
        p.set_zero();
        let (mu, sigma) = head.eval(&p, &Tensor::ones(3, 4)).unwrap();
        assert_eq!(mu, Tensor::zeros(3, 2));
        let expected = 2f64.ln() + SIGMA_FLOOR;
        assert!(sigma.data().iter().all(|&s| (s - expected).abs() < 1e-15));
    }

    #[test]
    fn head_mean_equals_mean_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = Params::new();
        for hidden in [vec![], vec![7], vec![5, 4]] {
            let name = format!("h{}", hidden.len());
            let head = GaussianHead::new(&name, 3, &hidden, 2, &mut p, &mut rng).unwrap();
            let x = Tensor::standard_normal(6, 3, &mut rng);
            let (mu, _) = head.eval(&p, &x).unwrap();
            assert_eq!(head.mean_branch().eval(&p, &x).unwrap(), mu);
        }
    }

    #[test]
    fn reparameterize_limits() {
        let mu = Tensor::from_fn(2, 2, |r, c| r as f64 + 0.5 * c as f64);
        let sigma = Tensor::full(2, 2, 1.7);
        assert_eq!(reparameterize_values(&mu, &sigma, &Tensor::zeros(2, 2)).unwrap(), mu);
        let eps = Tensor::from_fn(2, 2, |r, c| (r as f64 - c as f64) * 0.3);
        assert_eq!(
            reparameterize_values(&Tensor::zeros(2, 2), &Tensor::ones(2, 2), &eps).unwrap(),
            eps
        );
        assert!(reparameterize_values(&mu, &sigma, &Tensor::zeros(1, 2)).is_err());
    }
}
