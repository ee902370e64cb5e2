use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splitformer::ctc::ctc_loss;
use splitformer::layers::Forward;
use splitformer::model::{Checkpoint, ForwardOptions, Model, ModelConfig, OptimizerSnapshot, Variant};
use splitformer::tensor::{Graph, Tensor};
use splitformer::train::{ee_loss, OptimizerState};

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        conv_kernel: 3,
        n_layers: 3,
        exit_every: 1,
        n_exits: 3,
        vocab_size: 5,
        split_exits: if variant == Variant::Splitformer { vec![1, 3] } else { vec![] },
        split_factor: 2,
        ..ModelConfig::ee_baseline()
    }
}

fn features(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[20, 80], |_| rng.gen_range(-1.0..1.0))
}

/// Gradients of `loss(lattices)` per parameter, `None` when unreached.
fn grads(model: &Model<f64>, x: &Tensor<f64>, loss: impl Fn(&mut Graph<f64>, &[splitformer::tensor::Var]) -> splitformer::tensor::Var) -> Vec<Option<Vec<f64>>> {
    let mut g = Graph::new();
    let mut f = Forward::new(&mut g, model.params());
    let xv = f.graph.constant(x.clone());
    let lattices = model.forward(&mut f, xv, &ForwardOptions::default()).unwrap();
    let mut out = vec![None; model.params().len()];
    let l = loss(f.graph, &lattices);
    let gr = f.graph.backward(l).unwrap();
    for (id, gvals) in f.param_grads(&gr) {
        out[id.index()] = Some(gvals.to_vec());
    }
    out
}

#[test]
fn exit_losses_reach_only_their_prefix() {
    for variant in [Variant::EeBaseline, Variant::Splitformer] {
        let model = Model::<f64>::build(small(variant), 2).unwrap();
        let x = features(1);
        for m in 1..=3 {
            let g = grads(&model, &x, |g, l| ctc_loss(g, l[m - 1], &[1, 2]).unwrap().0);
            for (id, p) in model.params().iter() {
                let reached = g[id.index()].as_ref().is_some_and(|v| v.iter().any(|x| *x != 0.0));
                let other_decoder = p.name.starts_with("exits.") && p.exit != m;
                if p.exit > m || other_decoder {
                    assert!(!reached, "{}: {} got gradient from exit {m}", variant.name(), p.name);
                } else {
                    assert!(reached, "{}: {} no gradient from exit {m}", variant.name(), p.name);
                }
            }
        }
    }
}

#[test]
fn joint_gradient_is_sum_of_exit_gradients() {
    let model = Model::<f64>::build(small(Variant::Splitformer), 5).unwrap();
    let x = features(2);
    let target = [3, 1, 4];
    let joint = grads(&model, &x, |g, l| ee_loss(g, l, &target).unwrap().0);
    let parts: Vec<_> = (0..3).map(|m| grads(&model, &x, |g, l| ctc_loss(g, l[m], &target).unwrap().0)).collect();
    for (i, j) in joint.iter().enumerate() {
        let j = j.as_ref().unwrap();
        for (k, v) in j.iter().enumerate() {
            let sum: f64 = parts.iter().filter_map(|p| p[i].as_ref()).map(|p| p[k]).sum();
            assert!((v - sum).abs() <= 1e-10 * (1.0 + sum.abs()), "param {i} elem {k}: {v} vs {sum}");
        }
    }
}

#[test]
fn optimizer_state_survives_checkpoint() {
    let model = Model::<f32>::build(small(Variant::EeBaseline), 1).unwrap();
    let sizes: Vec<usize> = model.params().iter().map(|(_, p)| p.tensor.numel()).collect();
    let mut state = OptimizerState::<f32>::new(sizes.iter().copied());
    state.step = 17;
    for (i, m) in state.m.iter_mut().enumerate() {
        for (k, v) in m.iter_mut().enumerate() {
            *v = (i * 31 + k) as f32 * 1e-3;
        }
    }
    for v in state.v.iter_mut().flatten() {
        *v = 0.25;
    }
    let mut ck = Checkpoint::from_model(&model, 17, 2);
    ck.optimizer = Some(state.snapshot());
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes).unwrap();
    let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    let snap: OptimizerSnapshot = back.optimizer.clone().unwrap();
    let restored = OptimizerState::<f32>::from_snapshot(&snap);
    assert_eq!(restored.step, 17);
    assert_eq!(restored.m, state.m);
    assert_eq!(restored.v, state.v);
    assert_eq!(back.to_model().unwrap().params(), model.params());
}

#[test]
fn f32_and_f64_models_agree() {
    let m64 = Model::<f64>::build(small(Variant::Splitformer), 9).unwrap();
    let m32: Model<f32> = m64.cast();
    let x = features(3);
    let x32 = Tensor::new(x.shape(), x.data().iter().map(|v| *v as f32).collect()).unwrap();
    let a = m64.infer(&x, &ForwardOptions::default()).unwrap();
    let b = m32.infer(&x32, &ForwardOptions::default()).unwrap();
    for (la, lb) in a.lattices.iter().zip(&b.lattices) {
        for (p, q) in la.values().data().iter().zip(lb.values().data()) {
            assert!((p - *q as f64).abs() < 1e-4);
        }
    }
}
