use dpfb::flow::{flow_objective, flow_transform, nis, FlowConfig, VelocityPotential};
use dpfb::generative::{data_log_likelihood, label_log_likelihood, GenerativeModel, ModelConfig, ParticleEnsemble};
use dpfb::objective::{window_loss, Domain, DomainMask, LossTerm, Window, WindowGraph};
use dpfb::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig {
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
    }
}

struct Setup {
    model: GenerativeModel,
    pot: VelocityPotential,
    flow: FlowConfig,
}

fn setup(seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = GenerativeModel::new(&config(), &mut rng).unwrap();
    let pot = VelocityPotential::for_model(&config(), &mut rng).unwrap();
    Setup {
        model,
        pot,
        flow: FlowConfig::with_steps(2),
    }
}

fn random_window(len: usize, mask: Vec<Domain>, rng: &mut ChaCha8Rng) -> Window {
    Window::new(
        Tensor::standard_normal(len, 3, rng),
        Tensor::standard_normal(len, 2, rng),
        DomainMask::new(mask),
    )
    .unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn window_loss_matches_a_step_by_step_unroll() {
    let s = setup(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = 5;
    let w = random_window(3, vec![Domain::Source, Domain::Target, Domain::Source], &mut rng);
    let init = ParticleEnsemble::new(Tensor::standard_normal(p, 2, &mut rng), Tensor::standard_normal(p, 6, &mut rng)).unwrap();
    let noise: Vec<Tensor> = (0..3).map(|_| Tensor::standard_normal(p, 2, &mut rng)).collect();
    let got = window_loss(&s.model, &s.pot, &s.flow, &w, &init, &noise).unwrap();

    let mut ens = init.clone();
    let (mut theta, mut phi) = (0.0, 0.0);
    for n in 0..3 {
        let x = w.x.slice_rows(n, 1);
        let (prior, mu, sigma) = s.model.prior_step(&ens, &noise[n]).unwrap();
        let label = if w.mask.is_source(n) {
            -mean(&label_log_likelihood(&mu, &sigma, &w.y.slice_rows(n, 1)).unwrap())
        } else {
            0.0
        };
        let (mu_pre, sigma_pre) = s.model.decode(&prior).unwrap();
        let gamma = nis(&x, &mu_pre, &sigma_pre).unwrap();
        let state = prior.state();
        let flow = flow_objective(&s.pot, &x, &state, &gamma).unwrap();
        ens = ParticleEnsemble::from_state(&flow_transform(&s.pot, &s.flow, &x, &state).unwrap(), 2).unwrap();
        let (mu_dec, sigma_dec) = s.model.decode(&ens).unwrap();
        let recon = -mean(&data_log_likelihood(&mu_dec, &sigma_dec, &x).unwrap());
        let step = got.steps[n];
        assert!((step.recon - recon).abs() < 1e-10, "step {n} recon {} vs {recon}", step.recon);
        assert!((step.label - label).abs() < 1e-10, "step {n} label {} vs {label}", step.label);
        assert!((step.flow - flow).abs() < 1e-10, "step {n} flow {} vs {flow}", step.flow);
        theta += recon + label;
        phi += flow;
    }
    assert!((got.loss_theta - theta).abs() < 1e-9);
    assert!((got.loss_phi - phi).abs() < 1e-9);
    assert!(got.final_ensembles[0].state().max_abs_diff(&ens.state()) < 1e-10);
}

#[test]
fn batched_windows_average_their_single_losses() {
    let s = setup(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = 4;
    let a = random_window(4, vec![Domain::Source; 4], &mut rng);
    let b = random_window(4, vec![Domain::Target, Domain::Source, Domain::Target, Domain::Target], &mut rng);
    let fresh = ParticleEnsemble::zeros(p, 2, 6);
    let noise_a: Vec<Tensor> = (0..4).map(|_| Tensor::standard_normal(p, 2, &mut rng)).collect();
    let noise_b: Vec<Tensor> = (0..4).map(|_| Tensor::standard_normal(p, 2, &mut rng)).collect();
    let la = window_loss(&s.model, &s.pot, &s.flow, &a, &fresh, &noise_a).unwrap();
    let lb = window_loss(&s.model, &s.pot, &s.flow, &b, &fresh, &noise_b).unwrap();
    let wg = WindowGraph::new(&s.model, &s.pot, &s.flow, 2, 4, p).unwrap();
    let stacked: Vec<Tensor> = noise_a.iter().zip(&noise_b).map(|(x, y)| Tensor::vcat(&[x, y]).unwrap()).collect();
    let values = wg.forward(&s.model, &s.pot, &[&a, &b], &[fresh.clone(), fresh], &stacked).unwrap();
    let both = wg.losses(&values).unwrap();
    assert!((both.loss_theta - (la.loss_theta + lb.loss_theta) / 2.0).abs() < 1e-10);
    assert!((both.loss_phi - (la.loss_phi + lb.loss_phi) / 2.0).abs() < 1e-10);
    assert_eq!(both.final_ensembles.len(), 2);
}

#[test]
fn flow_term_does_not_reach_the_generative_parameters() {
    let s = setup(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = random_window(3, vec![Domain::Source, Domain::Target, Domain::Target], &mut rng);
    let wg = WindowGraph::new(&s.model, &s.pot, &s.flow, 1, 3, 4).unwrap();
    let noise = wg.sample_noise(&mut rng);
    let values = wg.forward(&s.model, &s.pot, &[&w], &[ParticleEnsemble::zeros(4, 2, 6)], &noise).unwrap();
    let (theta, phi) = wg.gradients_of(&s.model, &s.pot, &values, LossTerm::Phi).unwrap();
    assert!(theta.iter().all(|g| g.max_abs() == 0.0));
    assert!(phi.iter().any(|g| g.max_abs() > 0.0));
    // The split gradient of the total equals the sum of the two terms.
    let (t_theta, t_phi) = wg.gradients_of(&s.model, &s.pot, &values, LossTerm::Theta).unwrap();
    let (all_theta, all_phi) = wg.gradients(&s.model, &s.pot, &values).unwrap();
    for (a, b) in all_theta.iter().zip(&t_theta) {
        assert!(a.max_abs_diff(b) < 1e-12);
    }
    for ((a, b), c) in all_phi.iter().zip(&t_phi).zip(&phi) {
        assert!(a.max_abs_diff(&b.zip(c, |u, v| u + v)) < 1e-10);
    }
}

#[test]
fn mismatched_batches_are_rejected() {
    let s = setup(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = random_window(3, vec![Domain::Source; 3], &mut rng);
    let wg = WindowGraph::new(&s.model, &s.pot, &s.flow, 1, 3, 4).unwrap();
    let noise = wg.sample_noise(&mut rng);
    let wrong_particles = ParticleEnsemble::zeros(5, 2, 6);
    assert!(wg.forward(&s.model, &s.pot, &[&w], &[wrong_particles], &noise).is_err());
    let short = random_window(2, vec![Domain::Source; 2], &mut rng);
    assert!(wg.forward(&s.model, &s.pot, &[&short], &[ParticleEnsemble::zeros(4, 2, 6)], &noise).is_err());
    assert!(WindowGraph::new(&s.model, &s.pot, &s.flow, 1, 3, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn target_labels_never_enter_the_loss(seed in 0u64..10_000) {
        let s = setup(9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = vec![Domain::Source, Domain::Target, Domain::Source, Domain::Target];
        let w = random_window(4, mask.clone(), &mut rng);
        let mut y = w.y.clone();
        for n in [1, 3] {
            for c in 0..2 {
                y.set(n, c, rng.gen_range(-100.0..100.0));
            }
        }
        let altered = Window::new(w.x.clone(), y, DomainMask::new(mask)).unwrap();
        let fresh = ParticleEnsemble::zeros(3, 2, 6);
        let noise: Vec<Tensor> = (0..4).map(|_| Tensor::standard_normal(3, 2, &mut rng)).collect();
        let a = window_loss(&s.model, &s.pot, &s.flow, &w, &fresh, &noise).unwrap();
        let b = window_loss(&s.model, &s.pot, &s.flow, &altered, &fresh, &noise).unwrap();
        prop_assert_eq!(a.loss_theta, b.loss_theta);
        prop_assert_eq!(a.steps[1].label, 0.0);
        prop_assert_eq!(a.steps[3].label, 0.0);
    }
}
