//! Per-epoch metrics records, their CSV form and summary reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::decoding::spearman_rho;
use crate::error::{Error, Result};

/// Column order of the metrics CSV.
pub const CSV_HEADER: &str = "run_id,variant,seed,epoch,steps,loss_total,loss_emg_ctc,loss_audio_ctc,loss_cross,\
loss_sup,dtw_cost,val_ctc_silent,wer_silent,wer_vocal,wer_audio,test_wer_silent,wall_time_s";

/// One row per (run, epoch). Losses are epoch means over training steps;
/// WERs are on the validation split except `test_wer_silent`, which is only
/// filled after the last epoch. Empty fields mean "not computed".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub variant: String,
    pub seed: u64,
    pub epoch: u64,
    pub steps: u64,
    pub loss_total: Option<f64>,
    pub loss_emg_ctc: Option<f64>,
    pub loss_audio_ctc: Option<f64>,
    pub loss_cross: Option<f64>,
    pub loss_sup: Option<f64>,
    pub dtw_cost: Option<f64>,
    pub val_ctc_silent: Option<f64>,
    pub wer_silent: Option<f64>,
    pub wer_vocal: Option<f64>,
    pub wer_audio: Option<f64>,
    pub test_wer_silent: Option<f64>,
    pub wall_time_s: Option<f64>,
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

pub fn write_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a metrics CSV, insisting on the exact header.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected header {:?}", header.join(",")),
        });
    }
    r.deserialize().map(|rec| rec.map_err(csv_err)).collect()
}

/// Numeric columns usable in correlations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    LossTotal,
    ValCtcSilent,
    WerSilent,
    WerVocal,
    WerAudio,
    TestWerSilent,
}

impl Column {
    pub fn get(self, r: &MetricsRecord) -> Option<f64> {
        match self {
            Column::LossTotal => r.loss_total,
            Column::ValCtcSilent => r.val_ctc_silent,
            Column::WerSilent => r.wer_silent,
            Column::WerVocal => r.wer_vocal,
            Column::WerAudio => r.wer_audio,
            Column::TestWerSilent => r.test_wer_silent,
        }
    }
}

impl std::str::FromStr for Column {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown metrics column {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    /// Final-epoch validation silent WER: mean and minimum across seeds.
    pub mean_wer_silent: f64,
    pub min_wer_silent: f64,
    pub best_run: String,
    pub mean_wer_vocal: Option<f64>,
    pub mean_wer_audio: Option<f64>,
    pub mean_test_wer_silent: Option<f64>,
}

/// Validation WER and CTC per evaluated epoch of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub run_id: String,
    pub epochs: Vec<u64>,
    pub wer_silent: Vec<Option<f64>>,
    pub val_ctc_silent: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub variants: Vec<VariantSummary>,
    pub series: Vec<Series>,
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.collect::<Option<Vec<_>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Last-epoch record of every run, in order of first appearance.
pub fn final_records(records: &[MetricsRecord]) -> Vec<&MetricsRecord> {
    let mut order: Vec<&str> = Vec::new();
    let mut last: BTreeMap<&str, &MetricsRecord> = BTreeMap::new();
    for r in records {
        match last.get(r.run_id.as_str()) {
            None => {
                order.push(&r.run_id);
                last.insert(&r.run_id, r);
            }
            Some(prev) if r.epoch >= prev.epoch => {
                last.insert(&r.run_id, r);
            }
            _ => {}
        }
    }
    order.into_iter().map(|id| last[id]).collect()
}

pub fn report(records: &[MetricsRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::pre("report needs at least one record"));
    }
    let finals = final_records(records);
    let mut variants: Vec<&str> = Vec::new();
    for r in &finals {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let mut summaries = Vec::new();
    for v in variants {
        let runs: Vec<&&MetricsRecord> = finals.iter().filter(|r| r.variant == v).collect();
        let silent: Vec<f64> = runs.iter().map(|r| r.wer_silent.unwrap_or(f64::NAN)).collect();
        let best = runs
            .iter()
            .min_by(|a, b| a.wer_silent.unwrap_or(f64::INFINITY).total_cmp(&b.wer_silent.unwrap_or(f64::INFINITY)))
            .expect("variant has runs");
        summaries.push(VariantSummary {
            variant: v.to_string(),
            runs: runs.len(),
            mean_wer_silent: silent.iter().sum::<f64>() / silent.len() as f64,
            min_wer_silent: silent.iter().copied().fold(f64::INFINITY, f64::min),
            best_run: best.run_id.clone(),
            mean_wer_vocal: mean_opt(runs.iter().map(|r| r.wer_vocal)),
            mean_wer_audio: mean_opt(runs.iter().map(|r| r.wer_audio)),
            mean_test_wer_silent: mean_opt(runs.iter().map(|r| r.test_wer_silent)),
        });
    }
    let series = finals
        .iter()
        .map(|f| {
            let rs: Vec<&MetricsRecord> = records.iter().filter(|r| r.run_id == f.run_id).collect();
            Series {
                run_id: f.run_id.clone(),
                epochs: rs.iter().map(|r| r.epoch).collect(),
                wer_silent: rs.iter().map(|r| r.wer_silent).collect(),
                val_ctc_silent: rs.iter().map(|r| r.val_ctc_silent).collect(),
            }
        })
        .collect();
    Ok(Report {
        variants: summaries,
        series,
    })
}

/// Spearman rho and p-value between two columns over the final record of each
/// run. Runs missing either value are skipped.
pub fn spearman_columns(records: &[MetricsRecord], a: Column, b: Column) -> Result<(f64, f64)> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = final_records(records)
        .into_iter()
        .filter_map(|r| Some((a.get(r)?, b.get(r)?)))
        .unzip();
    spearman_rho(&xs, &ys)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.1}", 100.0 * x))
}

impl Report {
    /// Plain-text table of the variant summaries (WER in percent).
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:>4} {:>12} {:>11} {:>10} {:>10} {:>10}  best",
            "variant", "runs", "silent mean", "silent min", "vocal", "audio", "test"
        );
        for v in &self.variants {
            let _ = writeln!(
                s,
                "{:<18} {:>4} {:>12} {:>11} {:>10} {:>10} {:>10}  {}",
                v.variant,
                v.runs,
                pct(Some(v.mean_wer_silent)),
                pct(Some(v.min_wer_silent)),
                pct(v.mean_wer_vocal),
                pct(v.mean_wer_audio),
                pct(v.mean_test_wer_silent),
                v.best_run
            );
        }
        s
    }

    /// Long-format series CSV: `run_id,epoch,wer_silent,val_ctc_silent`.
    pub fn series_csv(&self) -> String {
        let mut s = String::from("run_id,epoch,wer_silent,val_ctc_silent\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.series {
            for i in 0..r.epochs.len() {
                let _ = writeln!(s, "{},{},{},{}", r.run_id, r.epochs[i], opt(r.wer_silent[i]), opt(r.val_ctc_silent[i]));
            }
        }
        s
    }
}
