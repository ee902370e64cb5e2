//! Finite-difference check of one conformer layer in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitformer::layers::{ConformerLayer, ConformerLayerParams, Forward, NormKind, ParamStore, Registry};
use splitformer::tensor::{grad_check, Tensor, TensorError};

fn main() {
    let p = ConformerLayerParams { d_model: 8, n_heads: 2, d_ff: 16, conv_kernel: 3, conv_norm: NormKind::BatchNorm };
    let mut store = ParamStore::<f64>::new();
    let layer = ConformerLayer::new(&mut Registry::new(&mut store, 1), "layer", &p);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut point = vec![Tensor::from_fn(&[6, 8], |_| rng.gen_range(-1.0..1.0))];
    point.extend(store.iter().map(|(_, p)| p.tensor.clone()));
    let report = grad_check::<_, TensorError>(
        |g, vars| {
            let mut f = Forward::with_bindings(g, &store, &vars[1..]);
            layer.forward(&mut f, vars[0])
        },
        &point,
        1e-5,
    )
    .unwrap();
    println!("{} parameters checked, max relative error {:.2e}", report.elements, report.max_rel_error);
}
