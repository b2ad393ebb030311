//! Dataset-level preprocessing: raw dataset directory → per-split containers
//! plus a `labels.csv`, and loading those back as [`ModelInput`]s.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use super::container::{decode_avi, quantize, read_container, to_unit_range, write_container};
use super::manifest::{load_manifest, load_tracings, HeartbeatIndex, ManifestRecord, Split};
use super::{make_model_input, EchoClip, LabelCheck, ModelInput, PreprocessConfig};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic_str;

pub const FILE_LIST: &str = "FileList.csv";
pub const VOLUME_TRACINGS: &str = "VolumeTracings.csv";
pub const VIDEO_DIR: &str = "Videos";
pub const LABELS_FILE: &str = "labels.csv";
pub const CONTAINER_EXT: &str = "uswv";

/// Relative EF tolerance used when volumes are available for a cross-check.
const LABEL_TOLERANCE: f64 = 0.1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreprocessReport {
    /// `(split, clip_id)` for every container written, in manifest order.
    pub written: Vec<(Split, String)>,
    /// Clips left out because their record or annotations are unusable.
    pub skipped: Vec<(String, String)>,
    /// Clips whose video could not be read or converted.
    pub failed: Vec<(String, String)>,
}

impl PreprocessReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip_id,status,reason\n");
        for (_, id) in &self.written {
            out.push_str(&format!("{id},written,\n"));
        }
        for (id, why) in &self.skipped {
            out.push_str(&format!("{id},skipped,{}\n", csv_field(why)));
        }
        for (id, why) in &self.failed {
            out.push_str(&format!("{id},failed,{}\n", csv_field(why)));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Locate the video for a record under `data_dir/Videos`. A bare name is
/// tried with the raw-container extension first, then `.avi`.
pub fn video_path(data_dir: &Path, record: &ManifestRecord) -> PathBuf {
    let dir = data_dir.join(VIDEO_DIR);
    if Path::new(&record.file_name).extension().is_some() {
        return dir.join(&record.file_name);
    }
    let container = dir.join(format!("{}.{CONTAINER_EXT}", record.file_name));
    if container.exists() {
        container
    } else {
        dir.join(format!("{}.avi", record.file_name))
    }
}

/// Read a clip's frames, in `[0, 1]`.
pub fn load_video(path: &Path, height: usize, width: usize) -> Result<crate::tensor::Video<f32>> {
    let is_avi = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("avi"));
    let raw = if is_avi {
        decode_avi(path, height, width)?
    } else {
        read_container(path)?
    };
    Ok(to_unit_range(&raw))
}

enum Outcome {
    Written(Split, String),
    Skipped(String, String),
    Failed(String, String),
}

fn process_record(
    data_dir: &Path,
    out_dir: &Path,
    record: &ManifestRecord,
    beat: Option<&HeartbeatIndex>,
    cfg: &PreprocessConfig,
) -> Outcome {
    let id = record.clip_id().to_string();
    if !record.is_usable() {
        return Outcome::Skipped(id, record.issues.join("; "));
    }
    let Some(beat) = beat else {
        return Outcome::Skipped(id, "no ES/ED tracings".into());
    };
    let frames = match load_video(&video_path(data_dir, record), record.frame_height, record.frame_width) {
        Ok(v) => v,
        Err(e) => return Outcome::Failed(id, e.to_string()),
    };
    let clip = EchoClip {
        clip_id: id.clone(),
        frames,
        fps: record.fps,
        ef_label: record.ef,
        esv: record.esv,
        edv: record.edv,
        es_index: beat.es,
        ed_index: beat.ed,
    };
    if let LabelCheck::Checked { consistent: false, discrepancy } = clip.validate_labels(LABEL_TOLERANCE) {
        warn!("{id}: EF label disagrees with volumes (relative discrepancy {discrepancy:.3})");
    }
    let input = match make_model_input(&clip, cfg) {
        Ok(i) => i,
        Err(e @ (Error::DegenerateClip(_) | Error::Domain(_))) => return Outcome::Skipped(id, e.to_string()),
        Err(e) => return Outcome::Failed(id, e.to_string()),
    };
    let path = out_dir
        .join(record.split.as_str())
        .join(format!("{id}.{CONTAINER_EXT}"));
    match write_container(&path, &quantize(&input.frames)) {
        Ok(()) => Outcome::Written(record.split, id),
        Err(e) => Outcome::Failed(id, e.to_string()),
    }
}

/// Convert every usable clip of `data_dir` into `out_dir/<SPLIT>/<clip>.uswv`
/// and write `out_dir/<SPLIT>/labels.csv` (`clip_id,ef`) for each split.
pub fn preprocess_dataset(data_dir: &Path, out_dir: &Path, cfg: &PreprocessConfig) -> Result<PreprocessReport> {
    let manifest = load_manifest(&data_dir.join(FILE_LIST))?;
    let tracings_path = data_dir.join(VOLUME_TRACINGS);
    let tracings: HashMap<String, HeartbeatIndex> = if tracings_path.exists() {
        load_tracings(&tracings_path)?
    } else {
        warn!("{} missing; every clip will be skipped", tracings_path.display());
        HashMap::new()
    };
    let outcomes: Vec<Outcome> = manifest
        .records
        .par_iter()
        .map(|r| process_record(data_dir, out_dir, r, tracings.get(r.clip_id()), cfg))
        .collect();

    let mut report = PreprocessReport::default();
    let mut labels: HashMap<Split, String> = HashMap::new();
    let ef_of: HashMap<&str, f64> = manifest.records.iter().map(|r| (r.clip_id(), r.ef)).collect();
    for o in outcomes {
        match o {
            Outcome::Written(split, id) => {
                labels
                    .entry(split)
                    .or_insert_with(|| "clip_id,ef\n".to_string())
                    .push_str(&format!("{id},{}\n", ef_of[id.as_str()]));
                report.written.push((split, id));
            }
            Outcome::Skipped(id, why) => {
                warn!("skipping {id}: {why}");
                report.skipped.push((id, why));
            }
            Outcome::Failed(id, why) => {
                warn!("failed {id}: {why}");
                report.failed.push((id, why));
            }
        }
    }
    for (split, text) in &labels {
        write_atomic_str(&out_dir.join(split.as_str()).join(LABELS_FILE), text)?;
    }
    info!(
        "preprocessed {} clips ({} skipped, {} failed)",
        report.written.len(),
        report.skipped.len(),
        report.failed.len()
    );
    Ok(report)
}

/// Labels of a preprocessed split, in file order.
pub fn read_labels(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{other:?}"),
        },
    })?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let id = row.get(0).ok_or_else(|| parse_err("missing clip_id".into()))?;
        let ef = row
            .get(1)
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| parse_err("ef: expected a number".into()))?;
        out.push((id.to_string(), ef));
    }
    Ok(out)
}

/// Load every clip of one preprocessed split.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<ModelInput>> {
    let split_dir = dir.join(split.as_str());
    let labels_path = split_dir.join(LABELS_FILE);
    if !labels_path.exists() {
        return Err(Error::Config(format!(
            "split {split} not found under {} (no {LABELS_FILE})",
            dir.display()
        )));
    }
    read_labels(&labels_path)?
        .into_par_iter()
        .map(|(clip_id, ef)| {
            let frames = to_unit_range(&read_container(&split_dir.join(format!("{clip_id}.{CONTAINER_EXT}")))?);
            Ok(ModelInput {
                clip_id,
                frames,
                ef_target: ef,
            })
        })
        .collect()
}
