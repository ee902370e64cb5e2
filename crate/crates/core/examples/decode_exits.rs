//! Runs one utterance through an untrained model and decodes every exit
//! greedily and with a pruned beam.

use splitformer::ctc::{beam_decode, greedy_decode, BeamConfig};
use splitformer::data::{synthesize, SynthConfig, Vocabulary};
use splitformer::model::{ForwardOptions, Model, ModelConfig, Variant};

fn main() {
    let vocab = Vocabulary::chars();
    let utt = synthesize(vocab.len(), &SynthConfig { n_utts: 1, seed: 5, ..Default::default() }).unwrap().remove(0);
    let model = Model::<f32>::build(ModelConfig::toy(Variant::Splitformer, vocab.classes()), 0).unwrap();
    let out = model.infer(&utt.frames, &ForwardOptions::default()).unwrap();
    println!("reference {:?}, {} frames in, {} out", vocab.detokenize(&utt.tokens).unwrap(), utt.frames.shape()[0], out.lattices[0].frames());
    let beam = BeamConfig { beam_width: 8, blank_prune_threshold: 0.95, n_best: 1 };
    for (m, l) in out.lattices.iter().enumerate() {
        let g = vocab.detokenize(&greedy_decode(l)).unwrap();
        let b = beam_decode(l, &beam);
        println!("exit {}: greedy {g:?} beam {:?} ({} frames pruned)", m + 1, vocab.detokenize(b.best()).unwrap(), b.pruned_frames);
    }
    let first = model.infer(&utt.frames, &ForwardOptions { max_exit: Some(1), ..Default::default() }).unwrap();
    println!("stopping at exit 1 computes {} lattice(s)", first.lattices.len());
}
