//! Error rates, per-exit evaluation, FLOP accounting and timing.

mod flops;
mod timing;

pub use flops::{flops_closed_form, flops_per_exit, layer_components, layer_flops, unet_block_flops, FlopsComponent, FlopsReport};
pub use timing::{timing_harness, TimingRow};

use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;

use crate::ctc::{beam_decode, blank_fraction, greedy_decode, BeamConfig, LogProbLattice};
use crate::data::{DataError, Manifest, Vocabulary};
use crate::model::{ForwardOptions, Model, ModelError};

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            cur[j + 1] = (prev[j + 1] + 1).min(cur[j] + 1).min(prev[j] + (h != r) as usize);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Edits over `max(1, |ref|)`: an empty reference counts every hypothesis
/// word as an insertion.
pub fn wer<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    let h: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    edit_distance(&h, &r) as f64 / r.len().max(1) as f64
}

/// Accumulated edits and reference length; the corpus rate is their ratio.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub edits: usize,
    pub reference: usize,
}

impl ErrorCounts {
    pub fn add<T: PartialEq>(&mut self, hyp: &[T], reference: &[T]) {
        self.edits += edit_distance(hyp, reference);
        self.reference += reference.len();
    }

    pub fn rate(&self) -> f64 {
        self.edits as f64 / self.reference.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decode {
    Greedy,
    Beam(BeamConfig),
}

/// One utterance decoded at one exit.
pub fn decode_lattice(lattice: &LogProbLattice<f32>, decode: &Decode) -> (Vec<usize>, usize, usize) {
    match decode {
        Decode::Greedy => (greedy_decode(lattice), 0, lattice.frames()),
        Decode::Beam(cfg) => {
            let out = beam_decode(lattice, cfg);
            (out.best().to_vec(), out.pruned_frames, out.expanded_frames)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitRow {
    pub exit: usize,
    /// Encoder layers on the path to this exit.
    pub layers: usize,
    pub wer: f64,
    pub token_err: f64,
    pub blank_frac: f64,
    pub params: usize,
    pub flops: u128,
    pub pruned_frames: usize,
    pub expanded_frames: usize,
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExitReport {
    pub rows: Vec<ExitRow>,
    pub utterances: usize,
    /// Utterances that could not be evaluated, with the reason.
    pub skipped: Vec<(String, String)>,
}

pub const REPORT_COLUMNS: &str = "exit,wer,token_err,blank_frac,params,flops";

impl ExitReport {
    /// Rates are percentages.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_COLUMNS}\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{:.4},{:.4},{:.6},{},{}",
                r.exit,
                100.0 * r.wer,
                100.0 * r.token_err,
                r.blank_frac,
                r.params,
                r.flops
            )
            .unwrap();
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:>4} {:>6} {:>8} {:>8} {:>7} {:>10} {:>14} {:>10}",
            "exit", "layer", "WER%", "TokErr%", "blank", "params(M)", "GFLOPs", "time(s)"
        )
        .unwrap();
        for r in &self.rows {
            let time = r.wall_time_s.map_or("-".to_string(), |t| format!("{t:.4}"));
            writeln!(
                s,
                "{:>4} {:>6} {:>8.2} {:>8.2} {:>7.3} {:>10.2} {:>14.3} {:>10}",
                r.exit,
                r.layers,
                100.0 * r.wer,
                100.0 * r.token_err,
                r.blank_frac,
                r.params as f64 / 1e6,
                r.flops as f64 / 1e9,
                time
            )
            .unwrap();
        }
        s
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("no utterance could be evaluated")]
    Empty,
}

struct UttResult {
    tokens: Vec<Vec<usize>>,
    blank: Vec<f64>,
    pruned: Vec<usize>,
    expanded: Vec<usize>,
    frames: usize,
}

/// Decodes every utterance at every exit. Utterances run in parallel and
/// are merged in manifest order.
pub fn evaluate_exits(
    model: &Model<f32>,
    manifest: &Manifest,
    vocab: &Vocabulary,
    decode: &Decode,
) -> Result<ExitReport, EvalError> {
    let exits = model.exits();
    let results: Vec<Result<UttResult, String>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let feats = manifest.load_features(r).map_err(|e| e.to_string())?;
            let out = model.infer(&feats.frames, &ForwardOptions::default()).map_err(|e| e.to_string())?;
            let mut res = UttResult {
                tokens: Vec::with_capacity(exits),
                blank: Vec::with_capacity(exits),
                pruned: Vec::with_capacity(exits),
                expanded: Vec::with_capacity(exits),
                frames: feats.len(),
            };
            for l in &out.lattices {
                let (tokens, pruned, expanded) = decode_lattice(l, decode);
                res.tokens.push(tokens);
                res.blank.push(blank_fraction(l));
                res.pruned.push(pruned);
                res.expanded.push(expanded);
            }
            Ok(res)
        })
        .collect();

    let mut words = vec![ErrorCounts::default(); exits];
    let mut toks = vec![ErrorCounts::default(); exits];
    let mut blank = vec![0.0; exits];
    let mut pruned = vec![0usize; exits];
    let mut expanded = vec![0usize; exits];
    let mut flops = vec![0u128; exits];
    let mut report = ExitReport::default();
    for (r, res) in manifest.records.iter().zip(results) {
        let res = match res.and_then(|res| vocab.tokenize(&r.transcript).map(|t| (res, t)).map_err(|e| e.to_string())) {
            Ok(v) => v,
            Err(e) => {
                warn!("{}: {e}; skipped", r.id);
                report.skipped.push((r.id.clone(), e));
                continue;
            }
        };
        let (res, reference) = res;
        let ref_words: Vec<&str> = r.transcript.split_whitespace().collect();
        for m in 0..exits {
            let hyp = vocab.detokenize(&res.tokens[m]).unwrap_or_default();
            let hyp_words: Vec<&str> = hyp.split_whitespace().collect();
            words[m].add(&hyp_words, &ref_words);
            toks[m].add(&res.tokens[m], &reference);
            blank[m] += res.blank[m];
            pruned[m] += res.pruned[m];
            expanded[m] += res.expanded[m];
        }
        for (f, v) in flops.iter_mut().zip(flops_per_exit(model.config(), res.frames).per_exit) {
            *f += v;
        }
        report.utterances += 1;
    }
    if report.utterances == 0 {
        return Err(EvalError::Empty);
    }
    let n = report.utterances as f64;
    let cfg = model.config();
    report.rows = (0..exits)
        .map(|m| ExitRow {
            exit: m + 1,
            layers: if cfg.variant.is_early_exit() { (m + 1) * cfg.exit_every } else { cfg.n_layers },
            wer: words[m].rate(),
            token_err: toks[m].rate(),
            blank_frac: blank[m] / n,
            params: model.param_count(Some(m + 1)),
            flops: flops[m],
            pruned_frames: pruned[m],
            expanded_frames: expanded[m],
            wall_time_s: None,
        })
        .collect();
    Ok(report)
}
