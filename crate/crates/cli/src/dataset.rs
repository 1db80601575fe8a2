//! Feature CSV ingestion and emission.
//!
//! A dataset file is a plain CSV with the header
//! `utterance_id,group_id,label,frame_index,f0,...,f{h-1}` and one row per
//! frame. All rows of one utterance are contiguous, their `frame_index`
//! counts up from zero, and the utterance's `group_id` and `label` never
//! change mid-stream. Utterances are returned in file order. Floats are
//! written with enough digits to round-trip exactly.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use thiserror::Error;
use wmagin_core::graph::UtteranceFeatures;
use wmagin_core::tensor::Tensor;

use crate::atomic::write_atomic;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: dataset has no utterances")]
    Empty { path: String },
    #[error("{0}")]
    Invalid(String),
}

const FIXED_COLUMNS: [&str; 4] = ["utterance_id", "group_id", "label", "frame_index"];

/// Parses a feature CSV. `num_classes` bounds the label column.
pub fn load_dataset(
    path: &Path,
    num_classes: usize,
) -> Result<Vec<UtteranceFeatures>, DatasetError> {
    let display = path.display().to_string();
    let io_err = |source| DatasetError::Io {
        path: display.clone(),
        source,
    };
    let parse_err = |line: usize, message: String| DatasetError::Parse {
        path: display.clone(),
        line,
        message,
    };

    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let feature_dim = match lines.next() {
        None => return Err(parse_err(1, "empty file; expected a header line".into())),
        Some((_, header)) => parse_header(&header.map_err(io_err)?)
            .map_err(|message| parse_err(1, message))?,
    };

    let mut out: Vec<UtteranceFeatures> = Vec::new();
    let mut finished: HashSet<String> = HashSet::new();
    // The utterance currently being accumulated: id, group, label, flat rows.
    let mut current: Option<(String, String, usize, Vec<f64>)> = None;

    let finish = |current: &mut Option<(String, String, usize, Vec<f64>)>,
                      out: &mut Vec<UtteranceFeatures>,
                      finished: &mut HashSet<String>| {
        if let Some((id, group, label, rows)) = current.take() {
            let frames = rows.len() / feature_dim;
            let tensor = Tensor::from_vec(vec![frames, feature_dim], rows)
                .expect("the parser only accumulates whole rows");
            let utterance = UtteranceFeatures::new(id.clone(), group, label, tensor)
                .expect("the parser enforces non-empty utterances");
            finished.insert(id);
            out.push(utterance);
        }
    };

    for (index, line) in lines {
        let line_no = index + 1;
        let row = line.map_err(io_err)?;
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != FIXED_COLUMNS.len() + feature_dim {
            return Err(parse_err(
                line_no,
                format!(
                    "expected {} fields, found {}",
                    FIXED_COLUMNS.len() + feature_dim,
                    fields.len()
                ),
            ));
        }
        let id = fields[0];
        let group = fields[1];
        let label: usize = fields[2]
            .parse()
            .map_err(|_| parse_err(line_no, format!("label `{}` is not an integer", fields[2])))?;
        if label >= num_classes {
            return Err(parse_err(
                line_no,
                format!("label {label} out of range for {num_classes} classes"),
            ));
        }
        let frame_index: usize = fields[3].parse().map_err(|_| {
            parse_err(
                line_no,
                format!("frame_index `{}` is not an integer", fields[3]),
            )
        })?;

        let same_utterance = matches!(&current, Some((cur_id, ..)) if cur_id == id);
        if !same_utterance {
            finish(&mut current, &mut out, &mut finished);
            if finished.contains(id) {
                return Err(parse_err(
                    line_no,
                    format!("utterance `{id}` reappears after other rows"),
                ));
            }
            if frame_index != 0 {
                return Err(parse_err(
                    line_no,
                    format!("utterance `{id}` must start at frame_index 0, found {frame_index}"),
                ));
            }
            current = Some((
                id.to_string(),
                group.to_string(),
                label,
                Vec::with_capacity(feature_dim),
            ));
        }

        let (_, cur_group, cur_label, rows) = current.as_mut().expect("set above");
        if group != cur_group {
            return Err(parse_err(
                line_no,
                format!("utterance `{id}` changes group_id mid-stream"),
            ));
        }
        if label != *cur_label {
            return Err(parse_err(
                line_no,
                format!("utterance `{id}` changes label mid-stream"),
            ));
        }
        let expected = rows.len() / feature_dim;
        if frame_index != expected {
            return Err(parse_err(
                line_no,
                format!("frame_index {frame_index} out of order; expected {expected}"),
            ));
        }
        for (k, field) in fields[FIXED_COLUMNS.len()..].iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| {
                parse_err(line_no, format!("column f{k}: cannot parse `{field}`"))
            })?;
            rows.push(value);
        }
    }
    finish(&mut current, &mut out, &mut finished);

    if out.is_empty() {
        return Err(DatasetError::Empty { path: display });
    }
    Ok(out)
}

/// Validates the header and returns the feature dimension `h`.
fn parse_header(header: &str) -> Result<usize, String> {
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() <= FIXED_COLUMNS.len() {
        return Err(format!(
            "header must be `utterance_id,group_id,label,frame_index,f0,...`, found `{header}`"
        ));
    }
    for (expected, found) in FIXED_COLUMNS.iter().zip(&columns) {
        if expected != found {
            return Err(format!(
                "header column `{found}` where `{expected}` was expected"
            ));
        }
    }
    for (k, found) in columns[FIXED_COLUMNS.len()..].iter().enumerate() {
        if *found != format!("f{k}") {
            return Err(format!("feature column `{found}` where `f{k}` was expected"));
        }
    }
    Ok(columns.len() - FIXED_COLUMNS.len())
}

/// Writes a dataset in the same CSV format `load_dataset` reads. Floats are
/// rendered with shortest round-trip precision, so a save/load cycle
/// reproduces the values bit-for-bit. The file appears atomically.
pub fn save_dataset(path: &Path, data: &[UtteranceFeatures]) -> Result<(), DatasetError> {
    let display = path.display().to_string();
    if data.is_empty() {
        return Err(DatasetError::Empty { path: display });
    }
    let feature_dim = data[0].feature_dim();
    if data.iter().any(|u| u.feature_dim() != feature_dim) {
        return Err(DatasetError::Invalid(
            "feature dimension changes between utterances".into(),
        ));
    }

    let mut text = String::from("utterance_id,group_id,label,frame_index");
    for k in 0..feature_dim {
        let _ = write!(text, ",f{k}");
    }
    text.push('\n');
    for utterance in data {
        let values = utterance.frames.data();
        for t in 0..utterance.num_frames() {
            let _ = write!(
                text,
                "{},{},{},{}",
                utterance.utterance_id, utterance.group_id, utterance.label, t
            );
            for k in 0..feature_dim {
                let _ = write!(text, ",{:?}", values[t * feature_dim + k]);
            }
            text.push('\n');
        }
    }
    write_atomic(path, text.as_bytes()).map_err(|source| DatasetError::Io {
        path: display,
        source,
    })
}
