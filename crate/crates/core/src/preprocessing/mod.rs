//! Echocardiogram clip preprocessing.
//!
//! A clip is reduced to one heartbeat (the frames between the ES and ED
//! annotations), stretched or squeezed to a fixed frame count, and zero padded
//! to a square frame. The result is a [`ModelInput`] of fixed shape.

mod container;
mod manifest;
mod pipeline;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{TokenGrid, Video};

pub use container::{
    decode_avi, quantize, read_container, to_unit_range, write_container, CONTAINER_MAGIC,
};
pub use manifest::{
    load_manifest, load_tracings, DatasetManifest, HeartbeatIndex, ManifestRecord, Split,
    FILE_LIST_COLUMNS,
};
pub use pipeline::{
    load_split, load_video, preprocess_dataset, read_labels, video_path, PreprocessReport,
    CONTAINER_EXT, FILE_LIST, LABELS_FILE, VIDEO_DIR, VOLUME_TRACINGS,
};

/// Default clip length and frame size fed to the encoder.
pub const DEFAULT_TARGET_FRAMES: usize = 128;
pub const DEFAULT_TARGET_SIZE: usize = 128;

/// One echocardiogram recording with its labels.
#[derive(Clone, Debug)]
pub struct EchoClip {
    pub clip_id: String,
    /// `[T × H × W × 3]`, values in `[0, 1]`.
    pub frames: Video<f32>,
    pub fps: f64,
    pub ef_label: f64,
    pub esv: Option<f64>,
    pub edv: Option<f64>,
    pub es_index: usize,
    pub ed_index: usize,
}

impl EchoClip {
    /// Checks the structural invariants of the clip.
    pub fn check(&self) -> Result<()> {
        let t = self.frames.frames();
        if self.es_index >= t || self.ed_index >= t {
            return Err(Error::DegenerateClip(format!(
                "{}: ES/ED index ({}, {}) out of range for {} frames",
                self.clip_id, self.es_index, self.ed_index, t
            )));
        }
        if self.es_index == self.ed_index {
            return Err(Error::DegenerateClip(format!(
                "{}: ES and ED share frame {}",
                self.clip_id, self.es_index
            )));
        }
        if !(self.ef_label > 0.0 && self.ef_label < 100.0) {
            return Err(Error::Domain(format!(
                "{}: EF label {} outside (0, 100)",
                self.clip_id, self.ef_label
            )));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Domain(format!("{}: fps {} not positive", self.clip_id, self.fps)));
        }
        Ok(())
    }

    pub fn validate_labels(&self, tolerance: f64) -> LabelCheck {
        validate_labels(self.ef_label, self.edv, self.esv, tolerance)
    }
}

/// A fixed-shape encoder input.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub clip_id: String,
    /// `[frames × size × size × 3]`
    pub frames: Video<f32>,
    pub ef_target: f64,
}

/// Ejection fraction in percent from end-diastolic and end-systolic volumes.
pub fn ef_from_volumes(edv: f64, esv: f64) -> Result<f64> {
    if !(edv > 0.0) {
        return Err(Error::Domain(format!("EDV must be positive, got {edv}")));
    }
    if !(esv >= 0.0) {
        return Err(Error::Domain(format!("ESV must be non-negative, got {esv}")));
    }
    if esv > edv {
        return Err(Error::Domain(format!("ESV {esv} exceeds EDV {edv}")));
    }
    Ok((edv - esv) / edv * 100.0)
}

/// Outcome of checking a clip's EF label against its volumes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelCheck {
    Checked { consistent: bool, discrepancy: f64 },
    /// Volumes absent or out of domain; nothing to compare against.
    Unvalidatable,
}

impl LabelCheck {
    pub fn is_consistent(&self) -> bool {
        matches!(self, LabelCheck::Checked { consistent: true, .. })
    }

    pub fn discrepancy(&self) -> Option<f64> {
        match self {
            LabelCheck::Checked { discrepancy, .. } => Some(*discrepancy),
            LabelCheck::Unvalidatable => None,
        }
    }
}

pub fn validate_labels(
    ef_label: f64,
    edv: Option<f64>,
    esv: Option<f64>,
    tolerance: f64,
) -> LabelCheck {
    let (Some(edv), Some(esv)) = (edv, esv) else {
        return LabelCheck::Unvalidatable;
    };
    match ef_from_volumes(edv, esv) {
        Ok(ef) => {
            let discrepancy = (ef - ef_label).abs();
            LabelCheck::Checked {
                consistent: discrepancy <= tolerance,
                discrepancy,
            }
        }
        Err(_) => LabelCheck::Unvalidatable,
    }
}

/// Inclusive frame range between the ES and ED annotations, in temporal order.
pub fn heartbeat_range(
    num_frames: usize,
    es_index: usize,
    ed_index: usize,
) -> Result<std::ops::RangeInclusive<usize>> {
    if es_index >= num_frames || ed_index >= num_frames {
        return Err(Error::DegenerateClip(format!(
            "ES/ED index ({es_index}, {ed_index}) out of range for {num_frames} frames"
        )));
    }
    if es_index == ed_index {
        return Err(Error::DegenerateClip(format!(
            "ES and ED share frame {es_index}"
        )));
    }
    Ok(es_index.min(ed_index)..=es_index.max(ed_index))
}

/// Cut out the frames of one heartbeat (ES, ED and everything between).
pub fn select_heartbeat<S: Copy + Default>(
    frames: &TokenGrid<S>,
    es_index: usize,
    ed_index: usize,
) -> Result<TokenGrid<S>> {
    let range = heartbeat_range(frames.frames(), es_index, ed_index)?;
    let frame_len = frames.height() * frames.width() * frames.channels();
    let data = frames.data()[range.start() * frame_len..(range.end() + 1) * frame_len].to_vec();
    let [_, h, w, c] = frames.dims();
    TokenGrid::from_vec([range.end() - range.start() + 1, h, w, c], data)
}

/// Source index for each of the `target` output positions when fitting a
/// sequence of `len` frames.
///
/// Longer sequences are subsampled at `round(i·(len−1)/(target−1))`, which
/// keeps both endpoints. Shorter ones are extended by cycling the interior
/// frames after the last frame: `[0, 1, …, n, len−1, 1, …, n, 1, …]`. With no
/// interior frames the two endpoints alternate.
pub fn fit_length_indices(len: usize, target: usize) -> Result<Vec<usize>> {
    if len < 2 {
        return Err(Error::DegenerateClip(format!(
            "need at least 2 frames to fit a heartbeat, got {len}"
        )));
    }
    if target == 0 {
        return Err(Error::Config("target length must be positive".into()));
    }
    if len == target {
        return Ok((0..len).collect());
    }
    if len > target {
        if target == 1 {
            return Ok(vec![0]);
        }
        let span = (len - 1) as f64 / (target - 1) as f64;
        return Ok((0..target)
            .map(|i| ((i as f64 * span).round() as usize).min(len - 1))
            .collect());
    }

    let mut out: Vec<usize> = (0..len).collect();
    let interior = len - 2;
    if interior == 0 {
        warn!("heartbeat has no interior frames; alternating ES/ED to fill {target} frames");
        let mut k = 0;
        while out.len() < target {
            out.push(k % 2);
            k += 1;
        }
    } else {
        let mut k = 0;
        while out.len() < target {
            out.push(1 + k % interior);
            k += 1;
        }
    }
    Ok(out)
}

/// Fit an arbitrary sequence to `target` elements (see [`fit_length_indices`]).
pub fn fit_length<T: Clone>(seq: &[T], target: usize) -> Result<Vec<T>> {
    Ok(fit_length_indices(seq.len(), target)?
        .into_iter()
        .map(|i| seq[i].clone())
        .collect())
}

/// Fit a video's frame count to `target`.
pub fn fit_video_length<S: Copy + Default>(
    video: &TokenGrid<S>,
    target: usize,
) -> Result<TokenGrid<S>> {
    let idx = fit_length_indices(video.frames(), target)?;
    let frame_len = video.height() * video.width() * video.channels();
    let mut data = Vec::with_capacity(target * frame_len);
    for i in idx {
        data.extend_from_slice(&video.data()[i * frame_len..(i + 1) * frame_len]);
    }
    let [_, h, w, c] = video.dims();
    TokenGrid::from_vec([target, h, w, c], data)
}

/// Zero-pad every frame to `size × size`, keeping the content centred at
/// offset `(⌊(size−H)/2⌋, ⌊(size−W)/2⌋)`.
pub fn pad_spatial<S: Copy + Default>(video: &TokenGrid<S>, size: usize) -> Result<TokenGrid<S>> {
    let [t, h, w, c] = video.dims();
    if h > size || w > size {
        return Err(Error::Shape(format!(
            "frame {h}×{w} larger than target {size}×{size}; cropping is not supported"
        )));
    }
    if h == size && w == size {
        return Ok(video.clone());
    }
    let (top, left) = ((size - h) / 2, (size - w) / 2);
    let mut out = TokenGrid::zeros([t, size, size, c]);
    for f in 0..t {
        for y in 0..h {
            let src = video.offset(f, y, 0);
            let dst = out.offset(f, y + top, left);
            out.data_mut()[dst..dst + w * c].copy_from_slice(&video.data()[src..src + w * c]);
        }
    }
    Ok(out)
}

/// Knobs for [`make_model_input`].
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub target_frames: usize,
    pub target_size: usize,
    /// Random flips. Off by default: augmentation hurts on ultrasound data.
    pub augment: bool,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_frames: DEFAULT_TARGET_FRAMES,
            target_size: DEFAULT_TARGET_SIZE,
            augment: false,
            seed: 0,
        }
    }
}

/// Heartbeat selection, length fitting and spatial padding.
pub fn make_model_input(clip: &EchoClip, cfg: &PreprocessConfig) -> Result<ModelInput> {
    clip.check()?;
    let beat = select_heartbeat(&clip.frames, clip.es_index, clip.ed_index)?;
    let fitted = fit_video_length(&beat, cfg.target_frames)?;
    let mut frames = pad_spatial(&fitted, cfg.target_size)?;
    if cfg.augment {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(clip.clip_id.as_bytes()));
        if rng.gen_bool(0.5) {
            frames = flip(&frames, false);
        }
        if rng.gen_bool(0.5) {
            frames = flip(&frames, true);
        }
    }
    Ok(ModelInput {
        clip_id: clip.clip_id.clone(),
        frames,
        ef_target: clip.ef_label,
    })
}

fn flip<S: Copy + Default>(video: &TokenGrid<S>, vertical: bool) -> TokenGrid<S> {
    let [_, h, w, _] = video.dims();
    TokenGrid::from_fn(video.dims(), |t, y, x, c| {
        if vertical {
            video.get(t, h - 1 - y, x, c)
        } else {
            video.get(t, y, w - 1 - x, c)
        }
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}
