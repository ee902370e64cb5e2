//! Prefix beam search with and without blank-frame pruning on a lattice
//! dominated by blank, as a trained CTC model produces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitformer::ctc::{beam_decode, greedy_decode, BeamConfig, LogProbLattice};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let classes = 6;
    let rows: Vec<Vec<f64>> = (0..60)
        .map(|_| {
            let (k, p) = if rng.gen_bool(0.7) { (0, rng.gen_range(0.9..0.999)) } else { (rng.gen_range(1..classes), rng.gen_range(0.6..0.9)) };
            let rest = (1.0 - p) / (classes - 1) as f64;
            (0..classes).map(|c| if c == k { p } else { rest }).collect()
        })
        .collect();
    let lattice = LogProbLattice::<f64>::from_probs(&rows).unwrap();
    println!("greedy {:?}", greedy_decode(&lattice));
    for threshold in [1.0, 0.99, 0.95, 0.9] {
        let out = beam_decode(&lattice, &BeamConfig { beam_width: 8, blank_prune_threshold: threshold, n_best: 1 });
        println!(
            "threshold {threshold:<4} pruned {:>2} expanded {:>2} best {:?} ({:.3})",
            out.pruned_frames,
            out.expanded_frames,
            out.best(),
            out.hypotheses[0].score
        );
    }
}
