//! Wall-clock measurement. Results depend on the machine.

use std::time::Instant;

use super::{decode_lattice, Decode};
use crate::ctc::LogProbLattice;
use crate::layers::Forward;
use crate::model::{ForwardOptions, Model, ModelError};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub exit: usize,
    /// Median over repeats of the encoder time until this exit's lattice is
    /// ready, summed over utterances.
    pub encoder_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
    /// Smallest and largest total over repeats.
    pub spread: (f64, f64),
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One encoder pass per utterance and repeat, stamping the elapsed time as
/// each exit's lattice becomes available, then decoding every exit. Runs on
/// the calling thread only.
pub fn timing_harness(
    model: &Model<f32>,
    utterances: &[Tensor<f32>],
    decode: &Decode,
    repeats: usize,
) -> Result<Vec<TimingRow>, ModelError> {
    let exits = model.exits();
    let repeats = repeats.max(1);
    let mut enc = vec![Vec::with_capacity(repeats); exits];
    let mut dec = vec![Vec::with_capacity(repeats); exits];
    let mut tot = vec![Vec::with_capacity(repeats); exits];
    if let Some(u) = utterances.first() {
        model.infer(u, &ForwardOptions::default())?;
    }
    for _ in 0..repeats {
        let mut e = vec![0.0; exits];
        let mut d = vec![0.0; exits];
        for feats in utterances {
            let mut graph = Graph::inference();
            let mut f = Forward::new(&mut graph, model.params());
            let x = f.graph.constant(feats.clone());
            let start = Instant::now();
            let mut stamps = Vec::with_capacity(exits);
            model.forward_with(&mut f, x, &ForwardOptions::default(), |_, v| {
                stamps.push((v, start.elapsed().as_secs_f64()));
            })?;
            for (m, (v, t)) in stamps.into_iter().enumerate() {
                e[m] += t;
                let lattice = LogProbLattice::new(graph.value(v).clone())
                    .map_err(|err| ModelError::Parameters(err.to_string()))?;
                let t0 = Instant::now();
                std::hint::black_box(decode_lattice(&lattice, decode));
                d[m] += t0.elapsed().as_secs_f64();
            }
        }
        for m in 0..exits {
            enc[m].push(e[m]);
            dec[m].push(d[m]);
            tot[m].push(e[m] + d[m]);
        }
    }
    Ok((0..exits)
        .map(|m| {
            let lo = tot[m].iter().copied().fold(f64::INFINITY, f64::min);
            let hi = tot[m].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            TimingRow {
                exit: m + 1,
                encoder_s: median(&mut enc[m]),
                decode_s: median(&mut dec[m]),
                total_s: median(&mut tot[m]),
                spread: (lo, hi),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
