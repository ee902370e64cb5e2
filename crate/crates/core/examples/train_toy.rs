//! Trains a desk-scale early-exit model on a synthetic corpus and reports
//! error per exit. Takes a few minutes in release mode.
//!
//! cargo run --release --example train_toy -- [ee_baseline|splitformer] [epochs]

use splitformer::data::{gen_synthetic_corpus, SynthConfig, Vocabulary};
use splitformer::eval::{evaluate_exits, Decode};
use splitformer::model::{Model, ModelConfig, Variant};
use splitformer::train::{load_prepared, train, TrainConfig, TrainOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().as_deref().unwrap_or("ee_baseline").parse()?;
    let epochs = args.next().map(|e| e.parse()).transpose()?.unwrap_or(8);

    let dir = tempfile_dir();
    let vocab = Vocabulary::chars();
    let corpus = gen_synthetic_corpus(&dir, &vocab, &SynthConfig { n_utts: 1200, ..Default::default() })?;
    let (data, _) = load_prepared(&corpus.train, &vocab, 600)?;
    let (dev, _) = load_prepared(&corpus.dev, &vocab, 600)?;

    let mut model = Model::<f32>::build(ModelConfig::toy(variant, vocab.classes()), 1)?;
    let cfg = TrainConfig { epochs, average_last_k: 1, seed: 1, ..Default::default() };
    let summary = train(&mut model, &data, Some(&dev), &cfg, &TrainOptions { out_dir: dir.join("run"), ..Default::default() })?;
    println!("epoch mean losses {:.3?}", summary.epoch_means);
    print!("{}", evaluate_exits(&model, &corpus.test, &vocab, &Decode::Greedy)?.to_table());
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    std::env::temp_dir().join(format!("splitformer-train-{}", std::process::id()))
}
