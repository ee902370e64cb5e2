use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::layers::FEATURE_DIM;
use crate::tensor::Tensor;

/// Padded minibatch. Rows past `feature_lengths[b]` / `target_lengths[b]`
/// are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub features: Tensor<f32>,
    pub feature_lengths: Vec<usize>,
    pub targets: Vec<usize>,
    pub target_lengths: Vec<usize>,
}

impl Batch {
    pub fn collate(indices: &[usize], features: &[&Tensor<f32>], targets: &[&[usize]]) -> Self {
        assert_eq!(features.len(), targets.len());
        let t_max = features.iter().map(|f| f.shape()[0]).max().unwrap_or(0);
        let u_max = targets.iter().map(|t| t.len()).max().unwrap_or(0);
        let b = features.len();
        let mut feats = vec![0.0f32; b * t_max * FEATURE_DIM];
        let mut tgts = vec![0usize; b * u_max];
        for (i, (f, t)) in features.iter().zip(targets).enumerate() {
            let base = i * t_max * FEATURE_DIM;
            feats[base..base + f.numel()].copy_from_slice(f.data());
            tgts[i * u_max..i * u_max + t.len()].copy_from_slice(t);
        }
        Self {
            indices: indices.to_vec(),
            features: Tensor::new(&[b, t_max, FEATURE_DIM], feats).expect("sizes computed above"),
            feature_lengths: features.iter().map(|f| f.shape()[0]).collect(),
            targets: tgts,
            target_lengths: targets.iter().map(|t| t.len()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn max_frames(&self) -> usize {
        self.features.shape()[1]
    }

    /// Unpadded features of utterance `b`.
    pub fn utterance(&self, b: usize) -> Tensor<f32> {
        let t_max = self.max_frames();
        let start = b * t_max * FEATURE_DIM;
        let len = self.feature_lengths[b];
        Tensor::new(&[len, FEATURE_DIM], self.features.data()[start..start + len * FEATURE_DIM].to_vec())
            .expect("length within padding")
    }

    pub fn target(&self, b: usize) -> &[usize] {
        let u_max = self.targets.len() / self.len().max(1);
        &self.targets[b * u_max..b * u_max + self.target_lengths[b]]
    }
}

/// Partitions utterance indices into length-sorted buckets of `batch_size`,
/// then shuffles bucket order with a stream keyed by `(seed, epoch)`.
pub fn make_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch);
    batches.shuffle(&mut rng);
    batches
}
