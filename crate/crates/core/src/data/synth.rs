use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{io_err, write_features, DataError, Manifest, Record, Vocabulary};
use crate::layers::FEATURE_DIM;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_utts: usize,
    /// Target utterance length range in 100 Hz frames (inclusive).
    pub frames: (usize, usize),
    /// Frames per token (inclusive).
    pub duration: (usize, usize),
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_utts: 2500,
            frames: (40, 80),
            duration: (6, 12),
            sigma: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub tokens: Vec<usize>,
    /// Token id of every frame.
    pub frame_labels: Vec<usize>,
    pub frames: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub dir: PathBuf,
    pub train: Manifest,
    pub dev: Manifest,
    pub test: Manifest,
}

/// One random unit-norm 80-d vector per token id (row `id − 1`).
pub fn prototypes(n_tokens: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4f54_4f54_5950);
    (0..n_tokens)
        .map(|_| {
            let v: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Generates utterances in memory. Token strings and durations come from a
/// stream independent of `sigma`, and the noise is `sigma` times a fixed
/// standard-normal draw, so corpora differing only in `sigma` share layout.
/// Adjacent tokens always differ, because a repeated token would render as
/// one longer segment.
pub fn synthesize(n_tokens: usize, cfg: &SynthConfig) -> Result<Vec<SynthUtterance>, DataError> {
    if cfg.n_utts == 0 {
        return Err(DataError::Invalid("number of utterances must be positive".into()));
    }
    let (t_lo, t_hi) = cfg.frames;
    let (d_lo, d_hi) = cfg.duration;
    if d_lo == 0 || d_lo > d_hi || t_lo > t_hi || t_hi < d_lo {
        return Err(DataError::Invalid(format!("bad frame range {:?} or duration {:?}", cfg.frames, cfg.duration)));
    }
    if n_tokens < 2 {
        return Err(DataError::Invalid("synthetic corpus needs at least two tokens".into()));
    }
    let protos = prototypes(n_tokens, cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_utts);
    for u in 0..cfg.n_utts {
        let key = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(u as u64);
        let mut layout = ChaCha8Rng::seed_from_u64(key);
        let mut noise = ChaCha8Rng::seed_from_u64(key ^ 0x4e4f_4953_4500_0000);
        let target = layout.gen_range(t_lo..=t_hi);
        let mut tokens = Vec::new();
        let mut frame_labels = Vec::new();
        loop {
            let d = layout.gen_range(d_lo..=d_hi);
            if !tokens.is_empty() && frame_labels.len() + d > t_hi {
                break;
            }
            let tok = loop {
                let t = layout.gen_range(1..=n_tokens);
                if tokens.last() != Some(&t) {
                    break t;
                }
            };
            tokens.push(tok);
            frame_labels.extend(std::iter::repeat_n(tok, d));
            if frame_labels.len() >= target {
                break;
            }
        }
        let mut data = Vec::with_capacity(frame_labels.len() * FEATURE_DIM);
        for &tok in &frame_labels {
            for &p in &protos[tok - 1] {
                let z: f64 = noise.sample(StandardNormal);
                data.push((p + cfg.sigma * z) as f32);
            }
        }
        out.push(SynthUtterance {
            id: format!("utt{u:06}"),
            tokens,
            frames: Tensor::new(&[frame_labels.len(), FEATURE_DIM], data).expect("sized above"),
            frame_labels,
        });
    }
    Ok(out)
}

/// Fraction of frames whose nearest prototype (Euclidean) is their own token.
pub fn nearest_prototype_accuracy(utts: &[SynthUtterance], protos: &[Vec<f64>]) -> f64 {
    let mut right = 0usize;
    let mut total = 0usize;
    for u in utts {
        for (t, &label) in u.frame_labels.iter().enumerate() {
            let x = u.frames.row(t);
            let best = protos
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let d: f64 = x.iter().zip(p).map(|(&a, &b)| (a as f64 - b).powi(2)).sum();
                    (d, k + 1)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, k)| k);
            right += (best == Some(label)) as usize;
            total += 1;
        }
    }
    right as f64 / total.max(1) as f64
}

/// Writes `feats/*.spf`, `train.tsv`, `dev.tsv`, `test.tsv` (80/10/10) and
/// `vocab.txt` under `dir`.
pub fn gen_synthetic_corpus(dir: &Path, vocab: &Vocabulary, cfg: &SynthConfig) -> Result<SynthCorpus, DataError> {
    let utts = synthesize(vocab.len(), cfg)?;
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(io_err(&feats))?;
    vocab.save(&dir.join("vocab.txt"))?;
    let n = utts.len();
    let n_train = n * 8 / 10;
    let n_dev = n / 10;
    let mut sets = [Manifest::new(dir), Manifest::new(dir), Manifest::new(dir)];
    for (i, u) in utts.into_iter().enumerate() {
        let rel = PathBuf::from("feats").join(format!("{}.spf", u.id));
        write_features(&dir.join(&rel), &u.frames)?;
        let set = if i < n_train {
            0
        } else if i < n_train + n_dev {
            1
        } else {
            2
        };
        sets[set].records.push(Record {
            id: u.id,
            path: rel,
            transcript: vocab.detokenize(&u.tokens)?,
        });
    }
    for (set, name) in sets.iter().zip(["train.tsv", "dev.tsv", "test.tsv"]) {
        set.save(&dir.join(name))?;
    }
    let [train, dev, test] = sets;
    Ok(SynthCorpus {
        dir: dir.to_path_buf(),
        train,
        dev,
        test,
    })
}
