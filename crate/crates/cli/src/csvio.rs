//! CSV artifacts: predictions, ground truth, curves and tables.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use vidclass_core::metrics::{GroundTruth, PredictionSet, VideoPredictions};

use crate::config::CliError;

pub const PREDICTIONS_HEADER: [&str; 3] = ["video_id", "label", "confidence"];
pub const TRUTH_HEADER: [&str; 2] = ["video_id", "label"];

fn reader(path: &Path, header: &[&str]) -> anyhow::Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(CliError::new(
            "format",
            format!("{}: expected header {}, found {}", path.display(), header.join(","), found.join(",")),
        )
        .into());
    }
    Ok(r)
}

fn row_err(path: &Path, line: u64, e: impl std::fmt::Display) -> anyhow::Error {
    CliError::new("format", format!("{} line {line}: {e}", path.display())).into()
}

/// Reads `video_id,label,confidence`; videos keep first-appearance order.
pub fn read_predictions(path: &Path) -> anyhow::Result<PredictionSet> {
    let mut r = reader(path, &PREDICTIONS_HEADER)?;
    let mut order: Vec<String> = Vec::new();
    let mut scores: HashMap<String, Vec<(u32, f64)>> = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| row_err(path, line, e))?;
        let id = rec[0].to_string();
        let label: u32 = rec[1].parse().map_err(|e| row_err(path, line, format!("label: {e}")))?;
        let conf: f64 = rec[2].parse().map_err(|e| row_err(path, line, format!("confidence: {e}")))?;
        if !scores.contains_key(&id) {
            order.push(id.clone());
        }
        scores.entry(id).or_default().push((label, conf));
    }
    let videos = order
        .into_iter()
        .map(|id| {
            let s = scores.remove(&id).unwrap();
            VideoPredictions { id, scores: s }
        })
        .collect();
    Ok(PredictionSet { videos })
}

pub fn read_truth(path: &Path) -> anyhow::Result<GroundTruth> {
    let mut r = reader(path, &TRUTH_HEADER)?;
    let mut truth: HashMap<String, BTreeSet<u32>> = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| row_err(path, line, e))?;
        let label: u32 = rec[1].parse().map_err(|e| row_err(path, line, format!("label: {e}")))?;
        truth.entry(rec[0].to_string()).or_default().insert(label);
    }
    Ok(truth)
}

pub fn write_predictions(path: &Path, preds: &PredictionSet) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(PREDICTIONS_HEADER)?;
    for v in &preds.videos {
        for (label, conf) in &v.scores {
            w.write_record([v.id.as_str(), &label.to_string(), &conf.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes rows to `path`, or to stdout when no path is given.
pub fn write_table(path: Option<&Path>, header: &str, rows: &[Vec<String>]) -> anyhow::Result<()> {
    let mut out: Box<dyn Write> = match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| CliError::new("io", format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut out);
    w.write_record(header.split(','))?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    drop(w);
    out.flush()?;
    Ok(())
}

/// Shortest rendering that keeps at least one decimal, with float noise
/// such as `0.30000000000000004` rounded away.
pub fn fmt_epoch(e: f64) -> String {
    let s = format!("{:.9}", e);
    let s = s.trim_end_matches('0');
    if s.ends_with('.') {
        format!("{s}0")
    } else {
        s.to_string()
    }
}
