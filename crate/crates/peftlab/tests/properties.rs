//! Property tests over the tensor engine and kernel machinery.

use proptest::prelude::*;

use peftlab::gradcheck::{finite_diff_grad, max_rel_err, DEFAULT_H};
use peftlab::graph::Graph;
use peftlab::model::{FrozenModel, ModelKind, ModelSpec, SiteGroup};
use peftlab::ntk::{compute_ntk, ParamSubset, Probe};
use peftlab::peft::{
    build_adapters, materialize_effective_weight, propulsion_apply, AdapterSet, AdapterSpec,
};
use peftlab::tensor::{Parameter, Tensor};

fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |data| Tensor::new(vec![rows, cols], data).unwrap())
}

/// Full-block check: propulsion gradients through embedding, attention
/// (transpose, softmax, head slice/concat), residuals, and the MLP all
/// agree with finite differences.
#[test]
fn transformer_propulsion_gradients_match_finite_differences() {
    use peftlab::model::{Batch, ForwardMode};

    let spec = ModelSpec {
        kind: ModelKind::Transformer,
        depth: 2,
        d_in: 1,
        d_model: 4,
        d_ff: 6,
        n_heads: 2,
        vocab_size: 12,
        max_seq: 6,
        n_classes: 2,
        seed: 31,
    };
    let mut model = FrozenModel::build(&spec).unwrap();
    let adapters =
        build_adapters(&mut model, &AdapterSpec::propulsion(SiteGroup::All, 2), 0).unwrap();
    let batch = Batch::Tokens(vec![vec![1, 5, 9], vec![2, 2]]);
    let labels = [0usize, 1];

    let loss_with = |set: &AdapterSet| -> f64 {
        let mut g = Graph::new();
        let logits = model.forward(&mut g, &batch, set, &mut ForwardMode::eval()).unwrap();
        let loss = g.cross_entropy(logits, &labels).unwrap();
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let logits = model.forward(&mut g, &batch, &adapters, &mut ForwardMode::eval()).unwrap();
    let loss = g.cross_entropy(logits, &labels).unwrap();
    g.backward(loss).unwrap();

    for (name, analytic) in g.trainable_grads() {
        let at = {
            let mut set = adapters.clone();
            set.param_mut(&name).unwrap().tensor.clone()
        };
        let mut f = |t: &Tensor| {
            let mut set = adapters.clone();
            set.param_mut(&name).unwrap().tensor = t.clone();
            loss_with(&set)
        };
        let numeric = finite_diff_grad(&mut f, &at, DEFAULT_H);
        let err = max_rel_err(analytic.data(), numeric.data());
        assert!(err <= 1e-5, "{name}: rel err {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_gradients_match_finite_differences(
        a in small_matrix(2, 3),
        b in small_matrix(3, 2),
    ) {
        let mut fa = |t: &Tensor| {
            let mut g = Graph::new();
            let av = g.leaf(t.clone());
            let bv = g.leaf(b.clone());
            let c = g.matmul(av, bv).unwrap();
            let s = g.sum(c).unwrap();
            g.value(s).item()
        };
        let numeric = finite_diff_grad(&mut fa, &a, DEFAULT_H);
        let mut g = Graph::new();
        let av = g.leaf_grad(a.clone());
        let bv = g.leaf_grad(b.clone());
        let c = g.matmul(av, bv).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        prop_assert!(max_rel_err(g.grad(av).unwrap().data(), numeric.data()) <= 1e-5);

        let mut fb = |t: &Tensor| {
            let mut g = Graph::new();
            let av = g.leaf(a.clone());
            let bv = g.leaf(t.clone());
            let c = g.matmul(av, bv).unwrap();
            let s = g.sum(c).unwrap();
            g.value(s).item()
        };
        let numeric = finite_diff_grad(&mut fb, &b, DEFAULT_H);
        prop_assert!(max_rel_err(g.grad(bv).unwrap().data(), numeric.data()) <= 1e-5);
    }

    #[test]
    fn activation_chain_gradients_match_finite_differences(x in small_matrix(2, 4)) {
        let run = |g: &mut Graph, xv: peftlab::graph::Var| {
            let sm = g.softmax_rows(xv).unwrap();
            let act = g.gelu(sm).unwrap();
            let sq = g.ew_mul(act, act).unwrap();
            g.mean(sq).unwrap()
        };
        let mut f = |t: &Tensor| {
            let mut g = Graph::new();
            let xv = g.leaf(t.clone());
            let out = run(&mut g, xv);
            g.value(out).item()
        };
        let numeric = finite_diff_grad(&mut f, &x, DEFAULT_H);
        let mut g = Graph::new();
        let xv = g.leaf_grad(x.clone());
        let out = run(&mut g, xv);
        g.backward(out).unwrap();
        prop_assert!(max_rel_err(g.grad(xv).unwrap().data(), numeric.data()) <= 1e-5);
    }

    #[test]
    fn pow_int_gradients_match_finite_differences(
        data in proptest::collection::vec(0.3f64..1.7, 4),
        k in 0i64..=6,
    ) {
        let z = Tensor::vector(data);
        let mut f = |t: &Tensor| {
            let mut g = Graph::new();
            let zv = g.leaf(t.clone());
            let p = g.pow_int(zv, k).unwrap();
            let s = g.sum(p).unwrap();
            g.value(s).item()
        };
        let numeric = finite_diff_grad(&mut f, &z, DEFAULT_H);
        let mut g = Graph::new();
        let zv = g.leaf_grad(z.clone());
        let p = g.pow_int(zv, k).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        match g.grad(zv) {
            Some(analytic) => {
                prop_assert!(max_rel_err(analytic.data(), numeric.data()) <= 1e-5)
            }
            // k = 0 disconnects z from the output entirely.
            None => prop_assert_eq!(k, 0),
        }
    }

    #[test]
    fn slice_concat_gradients_match_finite_differences(x in small_matrix(2, 4)) {
        let run = |g: &mut Graph, xv: peftlab::graph::Var| {
            let left = g.slice_cols(xv, 0, 2).unwrap();
            let right = g.slice_cols(xv, 2, 4).unwrap();
            let swapped = g.concat_cols(&[right, left]).unwrap();
            let act = g.gelu(swapped).unwrap();
            let stacked = g.concat_rows(&[act, act]).unwrap();
            g.mean(stacked).unwrap()
        };
        let mut f = |t: &Tensor| {
            let mut g = Graph::new();
            let xv = g.leaf(t.clone());
            let out = run(&mut g, xv);
            g.value(out).item()
        };
        let numeric = finite_diff_grad(&mut f, &x, DEFAULT_H);
        let mut g = Graph::new();
        let xv = g.leaf_grad(x.clone());
        let out = run(&mut g, xv);
        g.backward(out).unwrap();
        prop_assert!(max_rel_err(g.grad(xv).unwrap().data(), numeric.data()) <= 1e-5);
    }

    /// Multiplying by a ones vector is the identity on values and on the
    /// gradients of the other operand.
    #[test]
    fn ones_vector_is_multiplicative_identity(x in small_matrix(3, 4)) {
        let grad_of = |with_ones: bool| -> (Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let xv = g.leaf_grad(x.clone());
            let y = if with_ones {
                let ones = g.leaf(Tensor::ones(&[4]));
                g.ew_mul(xv, ones).unwrap()
            } else {
                xv
            };
            let act = g.gelu(y).unwrap();
            let s = g.sum(act).unwrap();
            g.backward(s).unwrap();
            (g.value(y).data().to_vec(), g.grad(xv).unwrap().into_data())
        };
        let (val_plain, grad_plain) = grad_of(false);
        let (val_ones, grad_ones) = grad_of(true);
        prop_assert!(val_plain.iter().zip(&val_ones).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(grad_plain.iter().zip(&grad_ones).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    /// Frozen parameters stay grad-free no matter the graph.
    #[test]
    fn frozen_parameters_never_accumulate_grads(x in small_matrix(2, 2)) {
        let frozen = Parameter::frozen("w", x.clone());
        let live = Parameter::trainable("z", Tensor::ones(&[2]));
        let mut g = Graph::new();
        let wv = g.param(&frozen);
        let zv = g.param(&live);
        let prod = g.row_mul(wv, zv).unwrap();
        let s = g.sum(prod).unwrap();
        g.backward(s).unwrap();
        prop_assert!(g.grad(wv).is_none());
        prop_assert!(g.grad(zv).is_some());
        let grads = g.trainable_grads();
        prop_assert_eq!(grads.len(), 1);
        prop_assert_eq!(grads[0].0.as_str(), "z");
    }

    /// `x (W diag(z^k)) == propulsion_apply(x W, z, k)` for random sites
    /// and degrees.
    #[test]
    fn effective_weight_equivalence(
        d_in in 1usize..5,
        d_out in 1usize..5,
        rows in 1usize..4,
        k in prop::sample::select(vec![1i64, 2, 15]),
        seed in 0u64..1000,
    ) {
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let w = Tensor::randn(&[d_in, d_out], 1.0, &mut rng);
        let x = Tensor::randn(&[rows, d_in], 1.0, &mut rng);
        let z = Tensor::randn(&[d_out], 0.15, &mut rng);
        let z = Tensor::new(
            vec![d_out],
            z.data().iter().map(|v| 1.0 + v).collect(),
        ).unwrap();

        let eff = materialize_effective_weight(&w, &z, k).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let ev = g.leaf(eff);
        let direct = g.matmul(xv, ev).unwrap();
        let wv = g.leaf(w.clone());
        let zv = g.leaf(z.clone());
        let xw = g.matmul(xv, wv).unwrap();
        let applied = propulsion_apply(&mut g, xw, zv, k).unwrap();
        let worst = g
            .value(direct)
            .data()
            .iter()
            .zip(g.value(applied).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        prop_assert!(worst <= 1e-10, "deviation {}", worst);
    }

    /// Every empirical kernel is symmetric and PSD within tolerance.
    #[test]
    fn kernels_are_symmetric_psd(
        d in 2usize..10,
        n_probes in 1usize..6,
        seed in 0u64..500,
        propulsion_subset in any::<bool>(),
    ) {
        use rand::SeedableRng;
        let spec = ModelSpec {
            kind: ModelKind::Linear,
            depth: 1,
            d_in: d,
            d_model: d,
            d_ff: 0,
            n_heads: 0,
            vocab_size: 0,
            max_seq: 0,
            n_classes: d,
            seed,
        };
        let mut model = FrozenModel::build(&spec).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed ^ 0xF00D);
        let probes: Vec<Probe> =
            (0..n_probes).map(|_| Probe::Dense(Tensor::randn(&[d], 1.0, &mut rng).into_data())).collect();
        let kernel = if propulsion_subset {
            let adapters =
                build_adapters(&mut model, &AdapterSpec::propulsion(SiteGroup::All, 2), 0).unwrap();
            compute_ntk(&model, &adapters, &probes, ParamSubset::Propulsion).unwrap()
        } else {
            compute_ntk(&model, &AdapterSet::none(), &probes, ParamSubset::Full).unwrap()
        };
        prop_assert!(kernel.max_asymmetry() <= 1e-10);
        prop_assert!(kernel.min_eigenvalue() >= -1e-8);
    }
}
