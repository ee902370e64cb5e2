use std::collections::BTreeMap;

use super::{alignment_count, collapse, for_each_alignment, log_add, CtcError, LogProbLattice, BLANK};
use crate::tensor::Scalar;

/// A decoded label sequence with its total log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Frames whose blank probability exceeds this value only extend
    /// hypotheses with blank. `1.0` disables pruning.
    pub blank_prune_threshold: f64,
    pub n_best: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 8,
            blank_prune_threshold: 0.95,
            n_best: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    /// Best first, at most `n_best`.
    pub hypotheses: Vec<Hypothesis>,
    /// Frames skipped for expansion by the blank rule.
    pub pruned_frames: usize,
    /// Frames where hypotheses were expanded with every label.
    pub expanded_frames: usize,
}

impl BeamOutput {
    pub fn best(&self) -> &[usize] {
        self.hypotheses.first().map_or(&[], |h| &h.tokens)
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-frame argmax, then the collapse map. Ties go to the lower id.
pub fn greedy_decode<T: Scalar>(lattice: &LogProbLattice<T>) -> Vec<usize> {
    let path: Vec<usize> = (0..lattice.frames()).map(|t| argmax(lattice.row(t))).collect();
    collapse(&path)
}

/// Fraction of valid frames whose argmax is blank.
pub fn blank_fraction<T: Scalar>(lattice: &LogProbLattice<T>) -> f64 {
    let frames = lattice.frames();
    if frames == 0 {
        return 0.0;
    }
    let blanks = (0..frames).filter(|&t| argmax(lattice.row(t)) == BLANK).count();
    blanks as f64 / frames as f64
}

#[derive(Debug, Clone, Copy)]
struct PrefixScore {
    blank: f64,
    label: f64,
}

impl PrefixScore {
    const EMPTY: Self = Self {
        blank: f64::NEG_INFINITY,
        label: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        log_add(self.blank, self.label)
    }
}

fn rank(beams: BTreeMap<Vec<usize>, PrefixScore>) -> Vec<(Vec<usize>, PrefixScore)> {
    let mut ranked: Vec<_> = beams.into_iter().collect();
    // Stable sort over the BTreeMap order keeps ties deterministic.
    ranked.sort_by(|a, b| b.1.total().total_cmp(&a.1.total()));
    ranked
}

/// Prefix beam search over collapsed label sequences, with duplicate
/// prefixes merged by log-sum-exp.
pub fn beam_decode<T: Scalar>(lattice: &LogProbLattice<T>, config: &BeamConfig) -> BeamOutput {
    let width = config.beam_width.max(1);
    let classes = lattice.classes();
    let mut beams: Vec<(Vec<usize>, PrefixScore)> = vec![(
        Vec::new(),
        PrefixScore {
            blank: 0.0,
            label: f64::NEG_INFINITY,
        },
    )];
    let (mut pruned, mut expanded) = (0, 0);

    for t in 0..lattice.frames() {
        let row: Vec<f64> = lattice.row(t).iter().map(|v| v.as_f64()).collect();
        let mut next: BTreeMap<Vec<usize>, PrefixScore> = BTreeMap::new();
        if row[BLANK].exp() > config.blank_prune_threshold {
            pruned += 1;
            for (prefix, score) in beams {
                let entry = next.entry(prefix).or_insert(PrefixScore::EMPTY);
                entry.blank = log_add(entry.blank, score.total() + row[BLANK]);
            }
        } else {
            expanded += 1;
            for (prefix, score) in &beams {
                let stay = next.entry(prefix.clone()).or_insert(PrefixScore::EMPTY);
                stay.blank = log_add(stay.blank, score.total() + row[BLANK]);
                let last = prefix.last().copied();
                for (c, &lp) in row.iter().enumerate().skip(1).take(classes - 1) {
                    if Some(c) == last {
                        let stay = next.get_mut(prefix).expect("inserted above");
                        stay.label = log_add(stay.label, score.label + lp);
                        let mut ext = prefix.clone();
                        ext.push(c);
                        let e = next.entry(ext).or_insert(PrefixScore::EMPTY);
                        e.label = log_add(e.label, score.blank + lp);
                    } else {
                        let mut ext = prefix.clone();
                        ext.push(c);
                        let e = next.entry(ext).or_insert(PrefixScore::EMPTY);
                        e.label = log_add(e.label, score.total() + lp);
                    }
                }
            }
        }
        beams = rank(next);
        beams.truncate(width);
    }

    let hypotheses = beams
        .into_iter()
        .filter(|(_, s)| s.total() > f64::NEG_INFINITY)
        .take(config.n_best.max(1))
        .map(|(tokens, s)| Hypothesis {
            tokens,
            score: s.total(),
        })
        .collect();
    BeamOutput {
        hypotheses,
        pruned_frames: pruned,
        expanded_frames: expanded,
    }
}

/// Posterior of every collapsed sequence, by enumerating all alignments.
/// Exponential; intended for small instances and tests.
pub fn collapsed_posteriors<T: Scalar>(
    lattice: &LogProbLattice<T>,
) -> Result<BTreeMap<Vec<usize>, f64>, CtcError> {
    let (frames, classes) = (lattice.frames(), lattice.classes());
    alignment_count(frames, classes)?;
    let mut out = BTreeMap::new();
    for_each_alignment(frames, classes, |a| {
        let logp: f64 = a.iter().enumerate().map(|(t, &k)| lattice.row(t)[k].as_f64()).sum();
        *out.entry(collapse(a)).or_insert(0.0) += logp.exp();
    });
    Ok(out)
}
