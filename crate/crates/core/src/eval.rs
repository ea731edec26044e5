//! Per-utterance evaluation and the CSV format shared by `eval` and
//! `pareto`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::backbone::Demucs;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::metrics::{count_macs, si_sdr, MacReport};
use crate::router::{csv_err, RoutingTrace};

/// Name of the aggregate row appended by [`write_csv`].
pub const MEAN_ROW: &str = "mean";

/// How a model is run during evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Fixed width, given as an index into the factor set.
    Static(usize),
    /// Router decisions, noise free.
    Route,
}

impl Mode {
    pub fn label(&self, model: &Demucs) -> String {
        match *self {
            Mode::Static(j) => format!("uf_{}", model.config.uset.get(j)),
            Mode::Route => "routed".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    /// Mixing SNR when the corpus records it.
    pub snr_db: Option<f64>,
    pub si_sdr_in: f64,
    pub si_sdr_out: f64,
    pub improvement: f64,
    pub mean_utilization: f64,
    /// Backbone plus router MACs per input sample.
    pub macs: f64,
}

/// Enhances one signal, returning the output and, for routed runs, the trace.
pub fn enhance(model: &Demucs, x: &[f64], mode: Mode) -> Result<(Vec<f64>, Option<RoutingTrace>)> {
    match mode {
        Mode::Static(j) => Ok((model.forward_static_index(x, j)?, None)),
        Mode::Route => {
            let (y, trace) = model.forward_dynamic(x)?;
            Ok((y, Some(trace)))
        }
    }
}

/// Scores every utterance of `corpus`.
pub fn evaluate(model: &Demucs, corpus: &Corpus, mode: Mode) -> Result<Vec<EvalRow>> {
    if corpus.is_empty() {
        return Err(Error::Data("evaluation corpus is empty".into()));
    }
    if let Mode::Static(j) = mode {
        if j >= model.config.uset.len() {
            return Err(Error::invalid("evaluate", format!("factor index {j} out of range")));
        }
    }
    let report = count_macs(&model.config)?;
    corpus
        .items
        .iter()
        .map(|u| {
            let (y, trace) = enhance(model, &u.noisy, mode)?;
            let si_sdr_in = si_sdr(&u.clean, &u.noisy)?;
            let si_sdr_out = si_sdr(&u.clean, &y)?;
            let (mean_utilization, macs) = cost(&report, model, mode, trace.as_ref());
            Ok(EvalRow {
                name: u.name.clone(),
                snr_db: u.snr_db,
                si_sdr_in,
                si_sdr_out,
                improvement: si_sdr_out - si_sdr_in,
                mean_utilization,
                macs,
            })
        })
        .collect()
}

fn cost(report: &MacReport, model: &Demucs, mode: Mode, trace: Option<&RoutingTrace>) -> (f64, f64) {
    match (mode, trace) {
        (Mode::Static(j), _) => (model.config.uset.get(j), report.total(j)),
        (Mode::Route, Some(t)) => (t.mean_utilization, report.mean_for_trace(t)),
        (Mode::Route, None) => unreachable!("routed runs always produce a trace"),
    }
}

/// Column means over all rows; `snr_db` is averaged over rows that have one.
pub fn aggregate(rows: &[EvalRow]) -> EvalRow {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let snrs: Vec<f64> = rows.iter().filter_map(|r| r.snr_db).collect();
    EvalRow {
        name: MEAN_ROW.into(),
        snr_db: (!snrs.is_empty()).then(|| snrs.iter().sum::<f64>() / snrs.len() as f64),
        si_sdr_in: mean(|r| r.si_sdr_in),
        si_sdr_out: mean(|r| r.si_sdr_out),
        improvement: mean(|r| r.improvement),
        mean_utilization: mean(|r| r.mean_utilization),
        macs: mean(|r| r.macs),
    }
}

/// Writes the per-utterance rows followed by their [`aggregate`].
pub fn write_csv<W: Write>(rows: &[EvalRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows.iter().cloned().chain(std::iter::once(aggregate(rows))) {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_csv`], returning the per-utterance rows
/// and the aggregate row.
pub fn read_csv<R: Read>(input: R) -> Result<(Vec<EvalRow>, EvalRow)> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows: Vec<EvalRow> = r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
    match rows.pop() {
        Some(last) if last.name == MEAN_ROW => Ok((rows, last)),
        _ => Err(Error::Data(format!("evaluation CSV has no `{MEAN_ROW}` row"))),
    }
}
