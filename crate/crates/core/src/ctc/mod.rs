//! Connectionist temporal classification: the forward-backward loss, an
//! exhaustive enumeration oracle, and greedy / prefix-beam decoders.
//!
//! Label 0 is the blank symbol throughout; targets use ids `1..=V`.

mod decode;

pub use decode::{
    beam_decode, blank_fraction, collapsed_posteriors, greedy_decode, BeamConfig, BeamOutput,
    Hypothesis,
};

use thiserror::Error;

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

pub const BLANK: usize = 0;

/// Upper bound on `(V+1)^T` accepted by [`ctc_enumeration_oracle`].
pub const ORACLE_MAX_ALIGNMENTS: u64 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("target contains the blank id at position {0}")]
    BlankInTarget(usize),
    #[error("target id {id} at position {position} exceeds vocabulary of {classes} classes")]
    TokenOutOfRange { id: usize, position: usize, classes: usize },
    #[error("enumeration of {0} alignments refused (limit {ORACLE_MAX_ALIGNMENTS})")]
    TooLarge(u128),
    #[error("lattice row {row} sums to {sum} in probability")]
    Unnormalized { row: usize, sum: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-frame log-probabilities `[T′ × (V+1)]`; only the first `length` rows
/// are meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbLattice<T> {
    values: Tensor<T>,
    length: usize,
}

impl<T: Scalar> LogProbLattice<T> {
    pub fn new(values: Tensor<T>) -> Result<Self, CtcError> {
        let length = match values.shape() {
            [t, v] if *v > 0 => *t,
            s => {
                return Err(CtcError::Tensor(TensorError::Shape {
                    op: "lattice",
                    detail: format!("expected [T x classes], got {s:?}"),
                }))
            }
        };
        Ok(Self { values, length })
    }

    /// Lattice whose rows past `length` are padding.
    pub fn with_length(values: Tensor<T>, length: usize) -> Result<Self, CtcError> {
        let mut lattice = Self::new(values)?;
        lattice.length = length.min(lattice.length);
        Ok(lattice)
    }

    /// Builds a lattice from per-frame probabilities (taking logs).
    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self, CtcError> {
        let logs: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.iter().map(|&p| T::from_f64_lossy(p.ln())).collect())
            .collect();
        Self::new(Tensor::from_rows(&logs)?)
    }

    pub fn frames(&self) -> usize {
        self.length
    }

    pub fn classes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[T] {
        self.values.row(t)
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    /// Checks that every valid row normalizes to 1 within `tol`.
    pub fn validate(&self, tol: f64) -> Result<(), CtcError> {
        for row in 0..self.length {
            let sum: f64 = self.row(row).iter().map(|v| v.as_f64().exp()).sum();
            if (sum - 1.0).abs() > tol {
                return Err(CtcError::Unnormalized { row, sum });
            }
        }
        Ok(())
    }
}

/// Collapse map: merge adjacent repeats, then drop blanks.
pub fn collapse(alignment: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &a in alignment {
        if Some(a) != prev && a != BLANK {
            out.push(a);
        }
        prev = Some(a);
    }
    out
}

/// Fewest frames that can emit `target`: one per label plus one separating
/// blank per adjacent repeat.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(target: &[usize], classes: usize) -> Result<(), CtcError> {
    for (position, &id) in target.iter().enumerate() {
        if id == BLANK {
            return Err(CtcError::BlankInTarget(position));
        }
        if id >= classes {
            return Err(CtcError::TokenOutOfRange { id, position, classes });
        }
    }
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Loss value and gradient with respect to every lattice entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcOutcome {
    /// `−ln P(target | lattice)`; `+∞` when the target cannot be aligned.
    pub loss: f64,
    /// Row-major `[frames × classes]`; zero for an infeasible target.
    pub grad: Vec<f64>,
    pub feasible: bool,
}

/// Forward-backward over the blank-interleaved target in log space.
///
/// `log_probs` is row-major `[frames × classes]`. Rows need not be
/// normalized; the gradient is that of `−ln Σ_alignments Π exp(entry)`.
pub fn ctc_forward_backward(
    log_probs: &[f64],
    frames: usize,
    classes: usize,
    target: &[usize],
) -> Result<CtcOutcome, CtcError> {
    check_target(target, classes)?;
    let infeasible = || CtcOutcome {
        loss: f64::INFINITY,
        grad: vec![0.0; frames * classes],
        feasible: false,
    };
    if frames == 0 || min_frames(target) > frames {
        return Ok(infeasible());
    }
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let y = |t: usize, k: usize| log_probs[t * classes + k];
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; frames * s_len];
    alpha[0] = y(0, ext[0]);
    if s_len > 1 {
        alpha[1] = y(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == neg { neg } else { acc + y(t, ext[s]) };
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == neg {
        return Ok(infeasible());
    }

    let mut beta = vec![neg; frames * s_len];
    beta[last + s_len - 1] = y(frames - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = y(frames - 1, ext[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc == neg { neg } else { acc + y(t, ext[s]) };
        }
    }

    // α and β both include the emission at t, so α·β / y counts each path
    // through (t, s) once.
    let mut grad = vec![0.0; frames * classes];
    let mut occupancy = vec![neg; classes];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|o| *o = neg);
        for s in 0..s_len {
            let k = ext[s];
            occupancy[k] = log_add(occupancy[k], alpha[t * s_len + s] + beta[t * s_len + s]);
        }
        for k in 0..classes {
            if occupancy[k] > neg {
                grad[t * classes + k] = -(occupancy[k] - y(t, k) - log_p).exp();
            }
        }
    }
    Ok(CtcOutcome {
        loss: -log_p,
        grad,
        feasible: true,
    })
}

/// Differentiable CTC loss of a `[T′ × (V+1)]` lattice node. The dynamic
/// program always runs in 64-bit.
pub fn ctc_loss<T: Scalar>(
    g: &mut Graph<T>,
    lattice: Var,
    target: &[usize],
) -> Result<(Var, bool), CtcError> {
    let (frames, classes) = match g.shape(lattice) {
        [t, c] => (*t, *c),
        s => {
            return Err(CtcError::Tensor(TensorError::Shape {
                op: "ctc_loss",
                detail: format!("lattice must be [T x classes], got {s:?}"),
            }))
        }
    };
    let values: Vec<f64> = g.value(lattice).data().iter().map(|v| v.as_f64()).collect();
    let out = ctc_forward_backward(&values, frames, classes, target)?;
    let grad = out.grad.iter().map(|&v| T::from_f64_lossy(v)).collect();
    let loss = if out.feasible {
        T::from_f64_lossy(out.loss)
    } else {
        T::infinity()
    };
    Ok((g.scalar_with_gradient(lattice, loss, grad)?, out.feasible))
}

/// CTC loss of a plain lattice (no tape).
pub fn ctc_loss_value<T: Scalar>(lattice: &LogProbLattice<T>, target: &[usize]) -> Result<f64, CtcError> {
    let frames = lattice.frames();
    let classes = lattice.classes();
    let values: Vec<f64> = lattice.values.data()[..frames * classes]
        .iter()
        .map(|v| v.as_f64())
        .collect();
    Ok(ctc_forward_backward(&values, frames, classes, target)?.loss)
}

/// Calls `visit` with every alignment of length `frames` over `classes`
/// symbols, in lexicographic order.
pub(crate) fn for_each_alignment(frames: usize, classes: usize, mut visit: impl FnMut(&[usize])) {
    let mut a = vec![0usize; frames];
    loop {
        visit(&a);
        let mut i = frames;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            a[i] += 1;
            if a[i] < classes {
                break;
            }
            a[i] = 0;
        }
    }
}

pub(crate) fn alignment_count(frames: usize, classes: usize) -> Result<u128, CtcError> {
    let count = (classes as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if count > ORACLE_MAX_ALIGNMENTS as u128 {
        return Err(CtcError::TooLarge(count));
    }
    Ok(count)
}

/// Literal CTC loss: sums the probability of every alignment that collapses
/// to `target`. Refuses instances with more than [`ORACLE_MAX_ALIGNMENTS`].
pub fn ctc_enumeration_oracle<T: Scalar>(
    lattice: &LogProbLattice<T>,
    target: &[usize],
) -> Result<f64, CtcError> {
    let (frames, classes) = (lattice.frames(), lattice.classes());
    check_target(target, classes)?;
    alignment_count(frames, classes)?;
    let mut total = 0.0f64;
    for_each_alignment(frames, classes, |a| {
        if collapse(a) == target {
            total += a
                .iter()
                .enumerate()
                .map(|(t, &k)| lattice.row(t)[k].as_f64())
                .sum::<f64>()
                .exp();
        }
    });
    Ok(-total.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_rule() {
        assert_eq!(collapse(&[0, 1, 1, 0, 2]), vec![1, 2]);
        assert_eq!(collapse(&[1, 2, 2, 1]), vec![1, 2, 1]);
        assert_eq!(collapse(&[1, 0, 1]), vec![1, 1]);
        assert!(collapse(&[0, 0]).is_empty());
    }

    #[test]
    fn single_frame_single_label() {
        let l = LogProbLattice::<f64>::from_probs(&[vec![0.3, 0.6, 0.1]]).unwrap();
        let loss = ctc_loss_value(&l, &[1]).unwrap();
        assert!((loss - (-(0.6f64).ln())).abs() < 1e-12);
        assert!((loss - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn two_uniform_frames() {
        let third = 1.0 / 3.0;
        let l = LogProbLattice::<f64>::from_probs(&[vec![third; 3], vec![third; 3]]).unwrap();
        let loss = ctc_loss_value(&l, &[1]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!((ctc_enumeration_oracle(&l, &[1]).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let l = LogProbLattice::<f64>::from_probs(&[vec![0.5, 0.5], vec![0.25, 0.75]]).unwrap();
        let want = -(0.5f64 * 0.25).ln();
        assert!((ctc_loss_value(&l, &[]).unwrap() - want).abs() < 1e-12);
        assert!((ctc_enumeration_oracle(&l, &[]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_is_infinite() {
        let l = LogProbLattice::<f64>::from_probs(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        // [1, 1] needs a separating blank: three frames.
        assert_eq!(ctc_loss_value(&l, &[1, 1]).unwrap(), f64::INFINITY);
        assert_eq!(ctc_enumeration_oracle(&l, &[1, 1]).unwrap(), f64::INFINITY);
        assert_eq!(ctc_loss_value(&l, &[1, 1, 1]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn rejects_bad_targets() {
        let l = LogProbLattice::<f64>::from_probs(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(ctc_loss_value(&l, &[0]), Err(CtcError::BlankInTarget(0)));
        assert!(matches!(ctc_loss_value(&l, &[2]), Err(CtcError::TokenOutOfRange { .. })));
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let l = LogProbLattice::<f64>::new(Tensor::zeros(&[12, 5])).unwrap();
        assert!(matches!(ctc_enumeration_oracle(&l, &[1]), Err(CtcError::TooLarge(_))));
    }

    #[test]
    fn certain_alignment_has_zero_loss() {
        let l = LogProbLattice::<f64>::from_probs(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(ctc_loss_value(&l, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn min_frames_counts_repeats() {
        assert_eq!(min_frames(&[]), 0);
        assert_eq!(min_frames(&[1, 2, 3]), 3);
        assert_eq!(min_frames(&[1, 1, 2, 2]), 6);
    }
}
