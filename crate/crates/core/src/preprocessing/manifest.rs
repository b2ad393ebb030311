//! EchoNet-Dynamic style dataset metadata: `FileList.csv` and `VolumeTracings.csv`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const FILE_LIST_COLUMNS: [&str; 9] = [
    "FileName",
    "EF",
    "ESV",
    "EDV",
    "FrameHeight",
    "FrameWidth",
    "FPS",
    "NumberOfFrames",
    "Split",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TRAIN" => Ok(Split::Train),
            "VAL" => Ok(Split::Val),
            "TEST" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub file_name: String,
    pub ef: f64,
    pub esv: Option<f64>,
    pub edv: Option<f64>,
    pub frame_height: usize,
    pub frame_width: usize,
    pub fps: f64,
    pub number_of_frames: usize,
    pub split: Split,
    /// 1-based line in the source file.
    pub line: usize,
    /// Why the record cannot be used; empty when usable.
    pub issues: Vec<String>,
}

impl ManifestRecord {
    pub fn is_usable(&self) -> bool {
        self.issues.is_empty()
    }

    /// File name without any extension, the key shared with `VolumeTracings.csv`.
    pub fn clip_id(&self) -> &str {
        strip_ext(&self.file_name)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn unusable(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| !r.is_usable())
    }

    pub fn to_csv(&self) -> String {
        let mut out = FILE_LIST_COLUMNS.join(",");
        out.push('\n');
        for r in &self.records {
            let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.file_name,
                r.ef,
                opt(r.esv),
                opt(r.edv),
                r.frame_height,
                r.frame_width,
                r.fps,
                r.number_of_frames,
                r.split
            ));
        }
        out
    }
}

fn strip_ext(name: &str) -> &str {
    Path::new(name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(name)
}

fn open_csv(path: &Path) -> Result<(csv::Reader<std::fs::File>, HashMap<String, usize>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let columns = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_string(), i))
        .collect();
    Ok((rdr, columns))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{kind:?}"),
        },
    }
}

fn require_columns(
    path: &Path,
    columns: &HashMap<String, usize>,
    names: &[&str],
) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            columns.get(*n).copied().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("missing column {n}"),
            })
        })
        .collect()
}

/// Parse a `FileList.csv`.
///
/// Malformed values are hard errors carrying the line number. Well-formed rows
/// that violate dataset invariants (too few frames, EF outside `(0, 100)`, …)
/// are kept and carry their problems in [`ManifestRecord::issues`].
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let (mut rdr, columns) = open_csv(path)?;
    let idx = require_columns(path, &columns, &FILE_LIST_COLUMNS)?;
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let field = |i: usize| row.get(idx[i]).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| {
                err(format!("{}: expected a number, got {:?}", FILE_LIST_COLUMNS[i], field(i)))
            })
        };
        let opt_num = |i: usize| -> Result<Option<f64>> {
            if field(i).is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let count = |i: usize| -> Result<usize> {
            field(i).parse::<usize>().map_err(|_| {
                err(format!(
                    "{}: expected a non-negative integer, got {:?}",
                    FILE_LIST_COLUMNS[i],
                    field(i)
                ))
            })
        };

        let file_name = field(0).to_string();
        if file_name.is_empty() {
            return Err(err("empty FileName".into()));
        }
        let split = field(8).parse::<Split>().map_err(err)?;
        let mut rec = ManifestRecord {
            file_name,
            ef: num(1)?,
            esv: opt_num(2)?,
            edv: opt_num(3)?,
            frame_height: count(4)?,
            frame_width: count(5)?,
            fps: num(6)?,
            number_of_frames: count(7)?,
            split,
            line,
            issues: Vec::new(),
        };
        if rec.number_of_frames < 2 {
            rec.issues
                .push(format!("NumberOfFrames = {} (need at least 2)", rec.number_of_frames));
        }
        if !(rec.ef > 0.0 && rec.ef < 100.0) {
            rec.issues.push(format!("EF = {} outside (0, 100)", rec.ef));
        }
        if !(rec.fps > 0.0) {
            rec.issues.push(format!("FPS = {} not positive", rec.fps));
        }
        if rec.frame_height == 0 || rec.frame_width == 0 {
            rec.issues.push("zero frame size".into());
        }
        if let (Some(esv), Some(edv)) = (rec.esv, rec.edv) {
            if !(edv > 0.0 && esv >= 0.0 && esv < edv) {
                rec.issues.push(format!("volumes ESV = {esv}, EDV = {edv} inconsistent"));
            }
        }
        records.push(rec);
    }
    Ok(DatasetManifest { records })
}

/// ES and ED frame indices of the annotated heartbeat.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeartbeatIndex {
    pub es: usize,
    pub ed: usize,
}

/// Parse a `VolumeTracings.csv` (`FileName,X1,Y1,X2,Y2,Frame`) into per-clip ES/ED indices.
///
/// Tracings are listed in order of cross-sectional area, so the first traced
/// frame of a clip is end-systole and the last is end-diastole. A clip with a
/// single traced frame maps to `es == ed`, which preprocessing rejects.
pub fn load_tracings(path: &Path) -> Result<HashMap<String, HeartbeatIndex>> {
    let (mut rdr, columns) = open_csv(path)?;
    let idx = require_columns(path, &columns, &["FileName", "Frame"])?;
    let mut frames: HashMap<String, Vec<usize>> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let name = strip_ext(row.get(idx[0]).unwrap_or("")).to_string();
        let raw = row.get(idx[1]).unwrap_or("");
        // some releases write the frame as a float ("46.0")
        let frame = raw
            .parse::<usize>()
            .ok()
            .or_else(|| raw.parse::<f64>().ok().filter(|f| *f >= 0.0 && f.fract() == 0.0).map(|f| f as usize))
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("Frame: expected a frame index, got {raw:?}"),
            })?;
        let list = frames.entry(name).or_default();
        if !list.contains(&frame) {
            list.push(frame);
        }
    }
    Ok(frames
        .into_iter()
        .map(|(k, v)| {
            let hb = HeartbeatIndex {
                es: v[0],
                ed: *v.last().unwrap(),
            };
            (k, hb)
        })
        .collect())
}
