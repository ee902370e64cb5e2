//! Saves a few checkpoints and averages them parameter by parameter.

use splitformer::model::{Checkpoint, Model, ModelConfig, Variant};
use splitformer::train::average_checkpoint_files;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("splitformer-avg-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let mut paths = Vec::new();
    for seed in 0..3 {
        let model = Model::<f32>::build(ModelConfig::toy(Variant::EeBaseline, 65), seed)?;
        let path = dir.join(format!("epoch_{seed}.ckpt"));
        Checkpoint::from_model(&model, 100 * seed, seed).save(&path)?;
        paths.push(path);
    }
    let refs: Vec<&std::path::Path> = paths.iter().map(|p| p.as_path()).collect();
    let avg = average_checkpoint_files(&refs)?;
    let (name, t) = &avg.tensors[0];
    println!("{} tensors averaged; {name} starts {:?}", avg.tensors.len(), &t.data()[..4]);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
