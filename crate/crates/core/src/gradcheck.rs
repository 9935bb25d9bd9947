//! Central finite-difference checks of reverse-mode gradients.
//!
//! Each check reduces an operation to a scalar with fixed random weights and
//! compares analytic gradients against `(f(p + eps) - f(p - eps)) / 2 eps`.
//! The reported error is the largest absolute discrepancy over the checked
//! entries divided by the largest gradient magnitude among them.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ad::{Bindings, Graph, NodeId};
use crate::error::Result;
use crate::flow::{flow_objective_nodes, potential_nodes, FlowConfig, Potential, VelocityPotential};
use crate::generative::{GenerativeModel, ModelConfig, ParticleEnsemble};
use crate::nn::{Fcnn, FcnnSpec, GaussianHead, Gru, GruSpec};
use crate::objective::{Domain, DomainMask, LossTerm, Window, WindowGraph};
use crate::params::{Leaves, Params};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Number of scalar entries compared.
    pub entries: usize,
    pub max_abs_error: f64,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error.is_finite() && self.rel_error < self.tolerance
    }

    fn from_pairs(name: &str, pairs: &[(f64, f64)], tolerance: f64) -> Self {
        let max_abs_error = pairs.iter().map(|(a, f)| (a - f).abs()).fold(0.0, f64::max);
        let scale = pairs.iter().map(|(a, f)| a.abs().max(f.abs())).fold(0.0, f64::max);
        let rel_error = if max_abs_error == 0.0 {
            0.0
        } else if scale > 0.0 {
            max_abs_error / scale
        } else {
            f64::INFINITY
        };
        CheckResult {
            name: name.to_string(),
            entries: pairs.len(),
            max_abs_error,
            rel_error,
            tolerance,
        }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<32} entries {:>5}  rel error {:.2e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.entries,
            self.rel_error,
            self.tolerance
        )
    }
}

/// Entries of a tensor to perturb: all of them, or `limit` chosen at random.
fn pick<R: Rng + ?Sized>(len: usize, limit: Option<usize>, rng: &mut R) -> Vec<usize> {
    match limit {
        Some(k) if k < len => sample(rng, len, k).into_vec(),
        _ => (0..len).collect(),
    }
}

/// Compares the gradient of `root` wrt every leaf in `wrt` with central
/// differences of the forward pass.
#[allow(clippy::too_many_arguments)]
pub fn check_graph<R: Rng + ?Sized>(
    name: &str,
    g: &Graph,
    root: NodeId,
    bindings: &Bindings,
    wrt: &[NodeId],
    limit: Option<usize>,
    tolerance: f64,
    rng: &mut R,
) -> Result<CheckResult> {
    let values = g.forward(bindings)?;
    let grads = g.backward_wrt(&values, root, wrt)?;
    let mut b = bindings.clone();
    let mut pairs = Vec::new();
    for &leaf in wrt {
        let base = bindings.get(leaf).cloned().expect("leaf is bound");
        let analytic = grads
            .get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.rows(), base.cols()));
        for i in pick(base.len(), limit, rng) {
            let mut at = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                b.bind(leaf, t);
                Ok(g.forward(&b)?.get(root).item())
            };
            let fd = (at(EPS)? - at(-EPS)?) / (2.0 * EPS);
            pairs.push((analytic.data()[i], fd));
        }
        b.bind(leaf, base);
    }
    Ok(CheckResult::from_pairs(name, &pairs, tolerance))
}

/// `sum(w (.) node)` for a fixed random `w`.
fn project<R: Rng + ?Sized>(g: &mut Graph, node: NodeId, rng: &mut R) -> Result<NodeId> {
    let [r, c] = g.shape(node);
    let w = g.constant(Tensor::uniform(r, c, 1.0, rng));
    let prod = g.mul(node, w)?;
    g.sum(prod)
}

fn bind_all(params: &Params, g: &mut Graph, b: &mut Bindings) -> Result<Leaves> {
    let leaves = params.declare(g);
    params.bind(&leaves, b)?;
    Ok(leaves)
}

fn input<R: Rng + ?Sized>(g: &mut Graph, b: &mut Bindings, name: &str, rows: usize, cols: usize, rng: &mut R) -> NodeId {
    let id = g.input(name, rows, cols);
    b.bind(id, Tensor::standard_normal(rows, cols, rng));
    id
}

pub fn check_fcnn<R: Rng + ?Sized>(rng: &mut R) -> Result<CheckResult> {
    let mut params = Params::new();
    let net = Fcnn::new("net", FcnnSpec::new(3, &[6, 5], 2), &mut params, rng)?;
    let (mut g, mut b) = (Graph::new(), Bindings::new());
    let leaves = bind_all(&params, &mut g, &mut b)?;
    let mut wrt = leaves.ids();
    let x = input(&mut g, &mut b, "x", 4, 3, rng);
    wrt.push(x);
    let out = net.apply(&mut g, &leaves, x)?;
    let root = project(&mut g, out, rng)?;
    check_graph("fcnn", &g, root, &b, &wrt, None, OP_TOLERANCE, rng)
}

pub fn check_gru<R: Rng + ?Sized>(rng: &mut R) -> Result<CheckResult> {
    let mut params = Params::new();
    let cell = Gru::new(
        "gru",
        GruSpec {
            input_width: 3,
            hidden_width: 5,
        },
        &mut params,
        rng,
    )?;
    let (mut g, mut b) = (Graph::new(), Bindings::new());
    let leaves = bind_all(&params, &mut g, &mut b)?;
    let mut wrt = leaves.ids();
    let x = input(&mut g, &mut b, "x", 4, 3, rng);
    let h = input(&mut g, &mut b, "h", 4, 5, rng);
    wrt.extend([x, h]);
    let next = cell.step(&mut g, &leaves, x, h)?;
    let root = project(&mut g, next, rng)?;
    check_graph("gru", &g, root, &b, &wrt, None, OP_TOLERANCE, rng)
}

pub fn check_gaussian_head<R: Rng + ?Sized>(rng: &mut R) -> Result<CheckResult> {
    let mut params = Params::new();
    let head = GaussianHead::new("head", 4, &[6], 3, &mut params, rng)?;
    let (mut g, mut b) = (Graph::new(), Bindings::new());
    let leaves = bind_all(&params, &mut g, &mut b)?;
    let mut wrt = leaves.ids();
    let x = input(&mut g, &mut b, "x", 5, 4, rng);
    wrt.push(x);
    let (mu, sigma) = head.apply(&mut g, &leaves, x)?;
    let a = project(&mut g, mu, rng)?;
    let s = project(&mut g, sigma, rng)?;
    let root = g.add(a, s)?;
    check_graph("gaussian head", &g, root, &b, &wrt, None, OP_TOLERANCE, rng)
}

pub fn check_potential<R: Rng + ?Sized>(rng: &mut R) -> Result<CheckResult> {
    let pot = VelocityPotential::new(2, 3, &[4], 3, &[6, 5], rng)?;
    let (mut g, mut b) = (Graph::new(), Bindings::new());
    let leaves = bind_all(&pot.params, &mut g, &mut b)?;
    let mut wrt = leaves.ids();
    let x = input(&mut g, &mut b, "x", 5, 2, rng);
    let s = input(&mut g, &mut b, "state", 5, 3, rng);
    wrt.extend([x, s]);
    let phi = pot.build(&mut g, &leaves, x, s)?;
    let root = project(&mut g, phi, rng)?;
    check_graph("potential", &g, root, &b, &wrt, None, OP_TOLERANCE, rng)
}

/// Parameter gradient of `1/2 E ||grad phi||^2`, a gradient of a gradient.
pub fn check_energy_term<R: Rng + ?Sized>(rng: &mut R) -> Result<CheckResult> {
    let (particles, n_x, width) = (16, 2, 2);
    let pot = VelocityPotential::new(n_x, width, &[4], 3, &[8, 16, 8], rng)?;
    let (mut g, mut b) = (Graph::new(), Bindings::new());
    let leaves = bind_all(&pot.params, &mut g, &mut b)?;
    let wrt = leaves.ids();
    let x = g.input("x", particles, n_x);
    b.bind(x, Tensor::standard_normal(1, n_x, rng).repeat_rows(particles));
    let s = input(&mut g, &mut b, "state", particles, width, rng);
    let gamma = g.constant(Tensor::uniform(particles, 1, 2.0, rng).map(|v| v + 2.0));
    let nodes = potential_nodes(&pot, &mut g, &leaves, x, s, particles)?;
    let (_, energy, _) = flow_objective_nodes(&mut g, &nodes, gamma, particles)?;
    check_graph("energy term (grad of grad)", &g, energy, &b, &wrt, None, LOSS_TOLERANCE, rng)
}

/// Model used by the window-loss check: `n_z = 2`, `n_h = 8`.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        n_x: 3,
        n_y: 2,
        n_h: 8,
        z_encoder_hidden: vec![6],
        z_feature_width: 4,
        prior_hidden: vec![6],
        decoder_hidden: vec![6],
        x_encoder_hidden: vec![4],
        x_feature_width: 3,
        potential_hidden: vec![8, 8],
    }
}

/// Central differences of `loss` wrt the entries of every tensor in `params`
/// (up to `limit` per tensor), paired with `analytic`.
fn fd_params<R: Rng + ?Sized>(
    params: &mut Params,
    analytic: &[Tensor],
    limit: Option<usize>,
    rng: &mut R,
    mut loss: impl FnMut(&Params) -> Result<f64>,
) -> Result<Vec<(f64, f64)>> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut pairs = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let len = params.get(name).expect("named").len();
        for i in pick(len, limit, rng) {
            let orig = params.get(name).expect("named").data()[i];
            let mut at = |v: f64| -> Result<f64> {
                params.get_mut(name).expect("named").data_mut()[i] = v;
                loss(params)
            };
            let fd = (at(orig + EPS)? - at(orig - EPS)?) / (2.0 * EPS);
            at(orig)?;
            pairs.push((analytic[k].data()[i], fd));
        }
    }
    Ok(pairs)
}

/// The window objective on a toy model (`P = 4`, mixed domains).
///
/// Over five steps: `loss_theta` wrt the generative parameters and wrt the
/// potential (through the transported states). The flow objective holds the
/// NIS and the pre-flow states fixed, so its potential gradient is compared
/// on a single step, where neither depends on the potential.
pub fn check_window_loss<R: Rng + ?Sized>(rng: &mut R, limit: Option<usize>) -> Result<Vec<CheckResult>> {
    let cfg = toy_model_config();
    let particles = 4;
    let model = GenerativeModel::new(&cfg, rng)?;
    let pot = VelocityPotential::for_model(&cfg, rng)?;
    let flow = FlowConfig::default();
    let steps = [Domain::Source, Domain::Source, Domain::Target, Domain::Source, Domain::Target];
    let window = Window::new(
        Tensor::standard_normal(steps.len(), cfg.n_x, rng),
        Tensor::standard_normal(steps.len(), cfg.n_y, rng),
        DomainMask::new(steps.to_vec()),
    )?;
    let first = Window::new(window.x.slice_rows(0, 1), window.y.slice_rows(0, 1), window.mask.slice(0, 1))?;
    let init = ParticleEnsemble::new(
        Tensor::standard_normal(particles, cfg.n_z(), rng).scale(0.5),
        Tensor::uniform(particles, cfg.n_h, 0.5, rng),
    )?;
    let mut out = Vec::new();
    for (w, term, name) in [
        (&window, LossTerm::Theta, "window loss_theta / generative"),
        (&window, LossTerm::Theta, "window loss_theta / potential"),
        (&first, LossTerm::Phi, "step loss_phi / potential"),
    ] {
        let wg = WindowGraph::new(&model, &pot, &flow, 1, w.len(), particles)?;
        let noise = wg.sample_noise(rng);
        let init = std::slice::from_ref(&init);
        let values = wg.forward(&model, &pot, &[w], init, &noise)?;
        let (g_theta, g_phi) = wg.gradients_of(&model, &pot, &values, term)?;
        let eval = |m: &GenerativeModel, p: &VelocityPotential| -> Result<f64> {
            let l = wg.losses(&wg.forward(m, p, &[w], init, &noise)?)?;
            Ok(if term == LossTerm::Theta { l.loss_theta } else { l.loss_phi })
        };
        let pairs = if name.ends_with("generative") {
            let p = &pot;
            let mut m = model.clone();
            fd_params(&mut model.params.clone(), &g_theta, limit, rng, |params| {
                m.params = params.clone();
                eval(&m, p)
            })?
        } else {
            let m = &model;
            let mut p = pot.clone();
            fd_params(&mut pot.params.clone(), &g_phi, limit, rng, |params| {
                p.params = params.clone();
                eval(m, &p)
            })?
        };
        out.push(CheckResult::from_pairs(name, &pairs, LOSS_TOLERANCE));
    }
    Ok(out)
}

/// Every check, seeded.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        check_fcnn(&mut rng)?,
        check_gru(&mut rng)?,
        check_gaussian_head(&mut rng)?,
        check_potential(&mut rng)?,
        check_energy_term(&mut rng)?,
    ];
    out.extend(check_window_loss(&mut rng, None)?);
    Ok(out)
}
