//! The parallel downsampled branch changes the early exits; bypassing it
//! gives back the plain early-exit model with the same initialization.

use splitformer::data::{synthesize, SynthConfig};
use splitformer::model::{ForwardOptions, Model, ModelConfig, Variant};

fn main() {
    let utt = synthesize(64, &SynthConfig { n_utts: 1, ..Default::default() }).unwrap().remove(0);
    let ee = Model::<f32>::build(ModelConfig::toy(Variant::EeBaseline, 65), 7).unwrap();
    let split = Model::<f32>::build(ModelConfig::toy(Variant::Splitformer, 65), 7).unwrap();
    let base = ee.infer(&utt.frames, &ForwardOptions::default()).unwrap();
    let on = split.infer(&utt.frames, &ForwardOptions::default()).unwrap();
    let off = split.infer(&utt.frames, &ForwardOptions { bypass_parallel: true, ..Default::default() }).unwrap();
    for m in 0..ee.exits() {
        let diff = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        println!(
            "exit {}: branch on max|Δ| {:.4}, bypassed max|Δ| {:.1e}, params {} vs {}",
            m + 1,
            diff(on.lattices[m].values().data(), base.lattices[m].values().data()),
            diff(off.lattices[m].values().data(), base.lattices[m].values().data()),
            split.param_count(Some(m + 1)),
            ee.param_count(Some(m + 1)),
        );
    }
}
