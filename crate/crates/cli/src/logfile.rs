//! Training logs (newline-delimited JSON) and evaluation reports (JSON).

use std::path::Path;

use serde::Serialize;
use thiserror::Error;
use wmagin_core::trainer::{EpochRecord, EvalReport};

use crate::atomic::write_atomic;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Serialize)]
struct EpochLine<'a> {
    epoch: usize,
    stage_losses: &'a [f64],
    total_loss: f64,
    valid_wa: f64,
    valid_ua: f64,
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    wa: f64,
    ua: f64,
    per_class_recall: &'a [f64],
    confusion: &'a [Vec<u64>],
}

/// One JSON object per epoch, one epoch per line.
pub fn render_training_log(log: &[EpochRecord]) -> String {
    let mut text = String::new();
    for record in log {
        let line = EpochLine {
            epoch: record.epoch,
            stage_losses: &record.stage_losses,
            total_loss: record.total_loss,
            valid_wa: record.valid_wa,
            valid_ua: record.valid_ua,
        };
        text.push_str(&serde_json::to_string(&line).expect("plain finite floats serialize"));
        text.push('\n');
    }
    text
}

/// Writes the epoch log atomically.
pub fn write_training_log(path: &Path, log: &[EpochRecord]) -> Result<(), LogError> {
    write_atomic(path, render_training_log(log).as_bytes()).map_err(|source| LogError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Pretty-printed JSON form of an evaluation report.
pub fn render_report(report: &EvalReport) -> String {
    let doc = ReportDoc {
        wa: report.wa,
        ua: report.ua,
        per_class_recall: &report.per_class_recall,
        confusion: &report.confusion,
    };
    serde_json::to_string_pretty(&doc).expect("plain finite floats serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_log() -> Vec<EpochRecord> {
        vec![
            EpochRecord {
                epoch: 1,
                stage_losses: vec![1.25, 1.5, 1.0],
                total_loss: 1.25,
                valid_wa: 0.5,
                valid_ua: 0.4,
            },
            EpochRecord {
                epoch: 2,
                stage_losses: vec![1.0, 1.25, 0.75],
                total_loss: 1.0,
                valid_wa: 0.625,
                valid_ua: 0.5,
            },
        ]
    }

    #[test]
    fn log_renders_one_parsable_line_per_epoch() {
        let text = render_training_log(&sample_log());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for line in &lines {
            let value: serde_json::Value = serde_json::from_str(line).unwrap();
            for key in ["epoch", "stage_losses", "total_loss", "valid_wa", "valid_ua"] {
                assert!(value.get(key).is_some(), "missing {key} in {line}");
            }
        }
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["epoch"], 1);
        assert_eq!(first["stage_losses"].as_array().unwrap().len(), 3);
        assert_eq!(first["valid_wa"], 0.5);
    }

    #[test]
    fn log_file_round_trips_and_rendering_is_deterministic() {
        let log = sample_log();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("training_log.ndjson");
        write_training_log(&path, &log).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            render_training_log(&log)
        );
        assert_eq!(render_training_log(&log), render_training_log(&log));
    }

    #[test]
    fn report_json_carries_all_metric_fields() {
        let report = EvalReport::from_confusion(vec![vec![9, 1], vec![5, 5]]).unwrap();
        let text = render_report(&report);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["wa"], 0.7);
        assert_eq!(value["ua"], 0.7);
        assert_eq!(value["per_class_recall"][0], 0.9);
        assert_eq!(value["confusion"][1][0], 5);
    }
}
