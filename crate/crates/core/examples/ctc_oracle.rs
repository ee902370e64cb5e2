//! CTC loss from the forward recursion against brute-force path enumeration.

use splitformer::ctc::{ctc_enumeration_oracle, ctc_loss_value, LogProbLattice};

fn main() {
    let probs = vec![
        vec![0.6, 0.3, 0.1],
        vec![0.2, 0.5, 0.3],
        vec![0.4, 0.1, 0.5],
        vec![0.7, 0.2, 0.1],
    ];
    let lattice = LogProbLattice::<f64>::from_probs(&probs).unwrap();
    for target in [vec![], vec![1], vec![2, 1], vec![1, 1], vec![1, 2, 1], vec![1, 1, 1]] {
        let dp = ctc_loss_value(&lattice, &target).unwrap();
        let brute = ctc_enumeration_oracle(&lattice, &target).unwrap();
        println!("target {target:?}: recursion {dp:.12} enumeration {brute:.12}");
    }
}
