use dpfb::ad::{Bindings, Graph, NodeId};
use dpfb::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central differences of a scalar root with respect to every entry of `leaf`.
fn central_diff(g: &Graph, root: NodeId, b: &Bindings, leaf: NodeId) -> Tensor {
    let base = b.get(leaf).unwrap().clone();
    let eps = 1e-6;
    Tensor::from_fn(base.rows(), base.cols(), |r, c| {
        let eval = |delta: f64| {
            let mut t = base.clone();
            t.set(r, c, base.get(r, c) + delta);
            let mut b2 = b.clone();
            b2.bind(leaf, t);
            g.forward(&b2).unwrap().get(root).item()
        };
        (eval(eps) - eval(-eps)) / (2.0 * eps)
    })
}

/// Smooth two-layer expression touching most elementwise and shape ops.
fn composite(g: &mut Graph, a: NodeId, w: NodeId) -> NodeId {
    let m = g.matmul(a, w).unwrap();
    let t = g.tanh(m).unwrap();
    let s = g.sigmoid(m).unwrap();
    let sp = g.softplus(t).unwrap();
    let prod = g.mul(sp, s).unwrap();
    let cat = g.concat(&[prod, t]).unwrap();
    let part = g.slice_cols(cat, 1, 3).unwrap();
    let e = g.exp(part).unwrap();
    let l = g.log(e).unwrap();
    let sq = g.square(l).unwrap();
    let centered = g.group_center(sq, 2).unwrap();
    let sc = g.sum_cols(centered).unwrap();
    let r = g.add_scalar(sc, 3.0).unwrap();
    let inv = g.recip(r).unwrap();
    let tr = g.transpose(inv).unwrap();
    let m2 = g.matmul(tr, a).unwrap();
    g.mean(m2).unwrap()
}

#[test]
fn composite_graph_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let a = g.input("a", 4, 3);
    let w = g.input("w", 3, 2);
    let root = composite(&mut g, a, w);
    let mut b = Bindings::new();
    b.bind(a, Tensor::standard_normal(4, 3, &mut rng).scale(0.7));
    b.bind(w, Tensor::standard_normal(3, 2, &mut rng).scale(0.7));
    let values = g.forward(&b).unwrap();
    let grads = g.backward(&values, root).unwrap();
    for leaf in [a, w] {
        let fd = central_diff(&g, root, &b, leaf);
        let ad = grads.get(leaf).unwrap();
        assert!(ad.max_abs_diff(&fd) < 1e-8, "leaf {leaf:?}: {}", ad.max_abs_diff(&fd));
    }
}

#[test]
fn symbolic_gradient_matches_backward_and_differentiates_again() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let a = g.input("a", 4, 3);
    let w = g.input("w", 3, 2);
    let root = composite(&mut g, a, w);
    let da = g.gradient(root, &[a]).unwrap()[0];
    // Second-order quantity: the squared norm of the first gradient, as a function of w.
    let sq = g.square(da).unwrap();
    let energy = g.sum(sq).unwrap();
    let mut b = Bindings::new();
    b.bind(a, Tensor::standard_normal(4, 3, &mut rng).scale(0.7));
    b.bind(w, Tensor::standard_normal(3, 2, &mut rng).scale(0.7));
    let values = g.forward(&b).unwrap();
    let reverse = g.backward(&values, root).unwrap();
    assert!(values.get(da).max_abs_diff(reverse.get(a).unwrap()) < 1e-14);
    let grads = g.backward(&values, energy).unwrap();
    let fd = central_diff(&g, energy, &b, w);
    let ad = grads.get(w).unwrap();
    let scale = fd.max_abs().max(1e-12);
    assert!(ad.max_abs_diff(&fd) / scale < 1e-6, "{}", ad.max_abs_diff(&fd) / scale);
}

#[test]
fn leaky_relu_second_derivative_is_zero_away_from_the_kink() {
    let mut g = Graph::new();
    let x = g.input("x", 1, 4);
    let y = g.leaky_relu(x, 0.01).unwrap();
    let s = g.sum(y).unwrap();
    let d = g.gradient(s, &[x]).unwrap()[0];
    let d_sum = g.sum(d).unwrap();
    let dd = g.gradient(d_sum, &[x]).unwrap()[0];
    let mut b = Bindings::new();
    b.bind(x, Tensor::row_vector(vec![-2.0, -0.1, 0.3, 5.0]).unwrap());
    let v = g.forward(&b).unwrap();
    assert_eq!(v.get(d).data(), &[0.01, 0.01, 1.0, 1.0]);
    assert_eq!(v.get(dd).data(), &[0.0; 4]);
}

#[test]
fn stop_grad_blocks_only_its_branch() {
    let mut g = Graph::new();
    let x = g.input("x", 1, 1);
    let frozen = g.stop_grad(x).unwrap();
    let prod = g.mul(x, frozen).unwrap();
    let root = g.sum(prod).unwrap();
    let mut b = Bindings::new();
    b.bind(x, Tensor::scalar(3.0));
    let v = g.forward(&b).unwrap();
    // d/dx [x * c] with c = x held fixed.
    assert_eq!(g.backward(&v, root).unwrap().get(x).unwrap().item(), 3.0);
}

#[test]
fn group_center_removes_block_means() {
    let mut g = Graph::new();
    let x = g.input("x", 6, 1);
    let c = g.group_center(x, 3).unwrap();
    let mut b = Bindings::new();
    b.bind(x, Tensor::column_vector(vec![1.0, 2.0, 6.0, -1.0, -1.0, 5.0]).unwrap());
    let v = g.forward(&b).unwrap();
    assert_eq!(v.get(c).data(), &[-2.0, -1.0, 3.0, -2.0, -2.0, 4.0]);
}

#[test]
fn shape_mismatches_are_rejected() {
    let mut g = Graph::new();
    let a = g.input("a", 2, 3);
    let b = g.input("b", 2, 3);
    assert!(g.matmul(a, b).is_err());
    let c = g.input("c", 3, 3);
    assert!(g.add(a, c).is_err());
    assert!(g.group_center(a, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradient_is_linear_in_the_root(seed in 0u64..10_000, alpha in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let a = g.input("a", 4, 3);
        let w = g.input("w", 3, 2);
        let root = composite(&mut g, a, w);
        let scaled = g.scale(root, alpha).unwrap();
        let mut b = Bindings::new();
        b.bind(a, Tensor::standard_normal(4, 3, &mut rng));
        b.bind(w, Tensor::standard_normal(3, 2, &mut rng));
        let v = g.forward(&b).unwrap();
        let g1 = g.backward(&v, root).unwrap();
        let g2 = g.backward(&v, scaled).unwrap();
        for leaf in [a, w] {
            let expect = g1.get(leaf).unwrap().scale(alpha);
            prop_assert!(g2.get(leaf).unwrap().max_abs_diff(&expect) <= 1e-12 * (1.0 + expect.max_abs()));
        }
    }

    #[test]
    fn matmul_gradient_matches_closed_form(seed in 0u64..10_000) {
        // d/dA sum(A W) = 1 W^T.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let a = g.input("a", 3, 4);
        let w = g.input("w", 4, 2);
        let m = g.matmul(a, w).unwrap();
        let root = g.sum(m).unwrap();
        let wv = Tensor::standard_normal(4, 2, &mut rng);
        let mut b = Bindings::new();
        b.bind(a, Tensor::standard_normal(3, 4, &mut rng));
        b.bind(w, wv.clone());
        let grads = g.backward(&g.forward(&b).unwrap(), root).unwrap();
        let expect = Tensor::from_fn(3, 4, |_, c| wv.row(c).iter().sum());
        prop_assert!(grads.get(a).unwrap().max_abs_diff(&expect) < 1e-12);
    }
}
