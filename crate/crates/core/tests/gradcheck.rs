//! Central finite-difference checks for every differentiable primitive.

use prunelab::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const CASES: u64 = 100;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights so
/// that every output element contributes a distinct coefficient.
fn scalarize(g: &mut Graph, out: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = g.shape(out).to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, rng));
    let prod = g.mul(out, w).unwrap();
    g.sum(prod).unwrap()
}

fn loss_value(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss = scalarize(&mut g, out, &mut rng);
    g.value(loss).item().unwrap()
}

fn check(name: &str, inputs: Vec<Tensor>, build: &Build, seed: u64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss = scalarize(&mut g, out, &mut rng);
    let grads = g.backward(loss).unwrap();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += EPS;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= EPS;
            let numeric = (loss_value(&plus, build, seed) - loss_value(&minus, build, seed)) / (2.0 * EPS);
            let a = analytic.data()[i];
            let scale = a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (a - numeric).abs() <= REL_TOL * scale,
                "{name} input {k} elem {i}: analytic {a} vs numeric {numeric} (seed {seed})"
            );
        }
    }
}

fn for_cases(mut f: impl FnMut(&mut ChaCha8Rng, u64)) {
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        f(&mut rng, seed);
    }
}

#[test]
fn matmul_gradients() {
    for_cases(|rng, seed| {
        let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let a = Tensor::randn(&[m, k], 1.0, rng);
        let b = Tensor::randn(&[k, n], 1.0, rng);
        check("matmul", vec![a, b], &|g, v| g.matmul(v[0], v[1]).unwrap(), seed);
    });
}

#[test]
fn batched_matmul_nt_gradients() {
    for_cases(|rng, seed| {
        let (bsz, m, k, n) = (
            2,
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..4),
        );
        let a = Tensor::randn(&[bsz, m, k], 1.0, rng);
        let b = Tensor::randn(&[bsz, n, k], 1.0, rng);
        check("matmul_nt", vec![a, b], &|g, v| g.matmul_nt(v[0], v[1]).unwrap(), seed);
    });
}

#[test]
fn linear_gradients() {
    for_cases(|rng, seed| {
        let (m, i, o) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let x = Tensor::randn(&[m, i], 1.0, rng);
        let w = Tensor::randn(&[o, i], 1.0, rng);
        let b = Tensor::randn(&[o], 1.0, rng);
        check(
            "linear",
            vec![x, w, b],
            &|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(),
            seed,
        );
    });
}

#[test]
fn relu_gradients() {
    for_cases(|rng, seed| {
        // keep inputs away from the kink so the finite difference is valid
        let x = Tensor::randn(&[5], 1.0, rng).map(|v| if v.abs() < 0.01 { v + 0.05 } else { v });
        check("relu", vec![x], &|g, v| g.relu(v[0]).unwrap(), seed);
    });
}

#[test]
fn layer_norm_gradients() {
    for_cases(|rng, seed| {
        let d = rng.random_range(2..6);
        let x = Tensor::randn(&[3, d], 1.0, rng);
        let gain = Tensor::randn(&[d], 1.0, rng);
        let bias = Tensor::randn(&[d], 1.0, rng);
        check(
            "layer_norm",
            vec![x, gain, bias],
            &|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(),
            seed,
        );
    });
}

#[test]
fn softmax_gradients() {
    for_cases(|rng, seed| {
        let x = Tensor::randn(&[2, 3, 4], 1.0, rng);
        let axis = rng.random_range(0..3);
        check("softmax", vec![x], &move |g, v| g.softmax(v[0], axis).unwrap(), seed);
    });
}

#[test]
fn embedding_gradients() {
    for_cases(|rng, seed| {
        let table = Tensor::randn(&[5, 3], 1.0, rng);
        let ids: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
        check(
            "embedding",
            vec![table],
            &move |g, v| g.embedding(v[0], &ids, &[2, 3]).unwrap(),
            seed,
        );
    });
}

#[test]
fn gate_gradients() {
    for_cases(|rng, seed| {
        let x = Tensor::randn(&[3, 2, 2], 1.0, rng);
        let gate = Tensor::randn(&[3], 1.0, rng);
        check("gate", vec![x, gate], &|g, v| g.gate(v[0], v[1]).unwrap(), seed);
    });
}

#[test]
fn elementwise_and_shape_gradients() {
    for_cases(|rng, seed| {
        let a = Tensor::randn(&[2, 3], 1.0, rng);
        let b = Tensor::randn(&[2, 3], 1.0, rng);
        check(
            "add/mul/scale/reshape/gather",
            vec![a, b],
            &|g, v| {
                let s = g.add(v[0], v[1]).unwrap();
                let p = g.mul(s, v[1]).unwrap();
                let q = g.scale(p, -1.5).unwrap();
                let r = g.reshape(q, &[3, 2]).unwrap();
                g.gather_rows(r, &[2, 0, 2]).unwrap()
            },
            seed,
        );
    });
}

#[test]
fn cross_entropy_gradients() {
    for_cases(|rng, seed| {
        let classes = rng.random_range(2..6);
        let logits = Tensor::randn(&[4, classes], 2.0, rng);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..classes)).collect();
        let mut pad: Vec<bool> = (0..4).map(|_| rng.random_bool(0.3)).collect();
        pad[0] = false;
        check(
            "cross_entropy",
            vec![logits],
            &move |g, v| g.cross_entropy(v[0], &targets, &pad).unwrap(),
            seed,
        );
    });
}

/// Every parameter of a 2-layer toy translator and classifier against central
/// finite differences of the teacher-forced loss.
#[test]
fn whole_model_parameter_gradients() {
    use prunelab::model::{
        build_model, synth_corpus, Batch, CorpusSpec, Gates, LossReduction, TaskSpec, TransformerModel,
    };

    fn loss_of(model: &TransformerModel, batch: &Batch) -> f64 {
        model.batch_loss(batch).unwrap()
    }

    for task in [TaskSpec::Reversal, TaskSpec::PairMatch] {
        let spec = CorpusSpec {
            n_symbols: 6,
            max_len: 4,
            train_size: 6,
            eval_size: 2,
            ..CorpusSpec::new(task)
        };
        let corpus = synth_corpus(&spec, 11).unwrap();
        let model = build_model(&spec.model_config(2, 2, 4, 8), 11).unwrap();
        let batch = Batch::new(&corpus.train[..3]).unwrap();

        let mut g = Graph::new();
        let w = model.weights().bind(&mut g);
        let gates = Gates::from_mask(&mut g, &model);
        let fwd = model.forward(&mut g, &w, &batch, &gates).unwrap();
        let loss = model.loss(&mut g, &fwd, &batch, LossReduction::BatchMean).unwrap();
        assert!((g.value(loss).item().unwrap() - loss_of(&model, &batch)).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        let mut analytic = Vec::new();
        w.map(&mut |name, v| analytic.push((name.to_string(), grads.get(*v))));

        let mut checked = 0;
        for (k, (name, grad)) in analytic.iter().enumerate() {
            for i in 0..grad.len() {
                let perturbed = |delta: f64| {
                    let mut m = model.clone();
                    let mut idx = 0;
                    m.weights_mut().visit_mut(&mut |_, t| {
                        if idx == k {
                            t.data_mut()[i] += delta;
                        }
                        idx += 1;
                    });
                    loss_of(&m, &batch)
                };
                let numeric = (perturbed(EPS) - perturbed(-EPS)) / (2.0 * EPS);
                let a = grad.data()[i];
                let scale = a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (a - numeric).abs() <= REL_TOL * scale,
                    "{task:?} {name}[{i}]: analytic {a} vs numeric {numeric}"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, model.param_count());
    }
}
