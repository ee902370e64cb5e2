//! Writes a small synthetic corpus and shows how noise level affects how
//! separable the frames are.
//!
//! cargo run --example gen_data -- /tmp/toy

use splitformer::data::{gen_synthetic_corpus, nearest_prototype_accuracy, prototypes, synthesize, SynthConfig, Vocabulary};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("splitformer-toy").display().to_string());
    let vocab = Vocabulary::chars();
    let cfg = SynthConfig { n_utts: 200, ..Default::default() };
    let corpus = gen_synthetic_corpus(dir.as_ref(), &vocab, &cfg)?;
    println!(
        "{}: {} train / {} dev / {} test utterances",
        corpus.dir.display(),
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len()
    );
    let r = &corpus.train.records[0];
    let feats = corpus.train.load_features(r)?;
    println!("first utterance {} has {} frames: {:?}", r.id, feats.len(), r.transcript);

    let protos = prototypes(vocab.len(), 0);
    for sigma in [0.05, 0.1, 0.2, 0.4, 0.8] {
        let utts = synthesize(vocab.len(), &SynthConfig { n_utts: 50, sigma, ..Default::default() })?;
        println!("sigma {sigma:<4} nearest-prototype frame accuracy {:.3}", nearest_prototype_accuracy(&utts, &protos));
    }
    Ok(())
}
