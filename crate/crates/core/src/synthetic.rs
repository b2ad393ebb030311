//! Deterministic echo-like clips: a bright ellipse whose area pulsates so that
//! the ES/ED area ratio encodes the EF label.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic_str;
use crate::preprocessing::{
    make_model_input, write_container, EchoClip, ModelInput, PreprocessConfig, Split, CONTAINER_EXT, FILE_LIST,
    FILE_LIST_COLUMNS, VIDEO_DIR, VOLUME_TRACINGS,
};
use crate::tensor::Video;

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticTarget {
    /// EF is encoded only by the ES/ED area ratio.
    #[default]
    AreaRatio,
    /// Additionally lifts the background gray level to `EF/200`, making EF an
    /// affine function of mean intensity.
    IntensityLinear,
}

impl std::str::FromStr for SyntheticTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "area-ratio" | "area_ratio" => Ok(Self::AreaRatio),
            "intensity-linear" | "intensity_linear" => Ok(Self::IntensityLinear),
            other => Err(Error::Config(format!("unknown synthetic target {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_clips: usize,
    pub height: usize,
    pub width: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_ef: f64,
    pub max_ef: f64,
    pub seed: u64,
    pub target: SyntheticTarget,
    /// Fractions of clips assigned to TRAIN and VAL; the rest go to TEST.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_clips: 16,
            height: 112,
            width: 112,
            min_frames: 28,
            max_frames: 250,
            min_ef: 6.9,
            max_ef: 96.96,
            seed: 0,
            target: SyntheticTarget::AreaRatio,
            train_fraction: 0.75,
            val_fraction: 0.125,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.height < 4 || self.width < 4 {
            return bad("synthetic frames must be at least 4×4");
        }
        if self.min_frames < 4 || self.min_frames > self.max_frames {
            return bad("frame range must satisfy 4 ≤ min_frames ≤ max_frames");
        }
        if !(self.min_ef > 0.0 && self.min_ef <= self.max_ef && self.max_ef < 100.0) {
            return bad("EF range must satisfy 0 < min_ef ≤ max_ef < 100");
        }
        if !(self.train_fraction >= 0.0 && self.val_fraction >= 0.0 && self.train_fraction + self.val_fraction <= 1.0) {
            return bad("split fractions must be non-negative and sum to at most 1");
        }
        Ok(())
    }

    pub fn split_of(&self, index: usize) -> Split {
        let n = self.n_clips.max(1) as f64;
        let pos = index as f64 + 0.5;
        if pos < self.train_fraction * n {
            Split::Train
        } else if pos < (self.train_fraction + self.val_fraction) * n {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Labels and geometry of one generated clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub clip_id: String,
    pub split: Split,
    pub ef: f64,
    pub es_index: usize,
    pub ed_index: usize,
    /// Analytic ellipse areas in pixels, used as volume stand-ins.
    pub ed_area: f64,
    pub es_area: f64,
    pub frames: Video<u8>,
}

impl SyntheticClip {
    pub fn to_echo_clip(&self) -> EchoClip {
        EchoClip {
            clip_id: self.clip_id.clone(),
            frames: crate::preprocessing::to_unit_range(&self.frames),
            fps: 50.0,
            ef_label: self.ef,
            esv: Some(self.es_area),
            edv: Some(self.ed_area),
            es_index: self.es_index,
            ed_index: self.ed_index,
        }
    }
}

/// Fraction of pixel `(y, x)` covered by the ellipse, by `SUPERSAMPLE²` point samples.
fn coverage(y: usize, x: usize, cy: f64, cx: f64, a: f64, b: f64) -> f64 {
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let (dy, dx) = ((py - cy) / b, (px - cx) / a);
            if dx * dx + dy * dy <= 1.0 {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

/// Render clip `index` of `spec`. Each clip draws from its own RNG stream, so
/// clips are independent of generation order.
pub fn render_clip(spec: &SyntheticSpec, index: usize) -> SyntheticClip {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let frames = rng.gen_range(spec.min_frames..=spec.max_frames);
    let ef = rng.gen_range(spec.min_ef..=spec.max_ef);
    let period = rng.gen_range((frames / 4).clamp(4, 48)..=frames.min(48)) & !1;
    let period = period.max(4);
    let ed = rng.gen_range(0..frames - period / 2);
    let es = ed + period / 2;

    let (h, w) = (spec.height as f64, spec.width as f64);
    let a0 = w * rng.gen_range(0.25..0.4);
    let b0 = h * rng.gen_range(0.25..0.4);
    let cy = h / 2.0 + rng.gen_range(-0.05..0.05) * h;
    let cx = w / 2.0 + rng.gen_range(-0.05..0.05) * w;
    let background = match spec.target {
        SyntheticTarget::AreaRatio => 0.0,
        SyntheticTarget::IntensityLinear => ef / 200.0,
    };
    let contraction = ef / 100.0;

    let video = Video::from_fn([frames, spec.height, spec.width, 3], |_, _, _, _| 0u8);
    let mut data = video.into_vec();
    let plane = spec.height * spec.width * 3;
    data.par_chunks_mut(plane).enumerate().for_each(|(t, frame)| {
        // area scale 1 at ED, 1 − EF/100 at ES, cosine in between
        let phase = 2.0 * PI * (t as f64 - ed as f64) / period as f64;
        let area_scale = 1.0 - contraction * (1.0 - phase.cos()) / 2.0;
        let s = area_scale.sqrt();
        let (a, b) = (a0 * s, b0 * s);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let c = coverage(y, x, cy, cx, a, b);
                let v = background + (1.0 - background) * c;
                let px = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                let o = (y * spec.width + x) * 3;
                frame[o..o + 3].fill(px);
            }
        }
    });
    let ed_area = PI * a0 * b0;
    SyntheticClip {
        clip_id: format!("synth_{index:05}"),
        split: spec.split_of(index),
        ef,
        es_index: es,
        ed_index: ed,
        ed_area,
        es_area: ed_area * (1.0 - contraction),
        frames: Video::from_vec([frames, spec.height, spec.width, 3], data).expect("dims match"),
    }
}

/// Write `FileList.csv`, `VolumeTracings.csv` and `Videos/*.uswv` under `dir`.
pub fn generate(spec: &SyntheticSpec, dir: &Path) -> Result<Vec<SyntheticClip>> {
    spec.validate()?;
    let clips: Vec<SyntheticClip> = (0..spec.n_clips).into_par_iter().map(|i| render_clip(spec, i)).collect();
    let mut file_list = FILE_LIST_COLUMNS.join(",");
    file_list.push('\n');
    let mut tracings = String::from("FileName,X1,Y1,X2,Y2,Frame\n");
    for c in &clips {
        let [t, h, w, _] = c.frames.dims();
        file_list.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.clip_id, c.ef, c.es_area, c.ed_area, h, w, 50, t, c.split
        ));
        // ES is listed first, ED last; coordinates mark the horizontal chord
        for frame in [c.es_index, c.ed_index] {
            tracings.push_str(&format!(
                "{}.{CONTAINER_EXT},{},{},{},{},{frame}\n",
                c.clip_id,
                w as f64 * 0.25,
                h as f64 / 2.0,
                w as f64 * 0.75,
                h as f64 / 2.0
            ));
        }
    }
    clips.par_iter().try_for_each(|c| {
        write_container(
            &dir.join(VIDEO_DIR).join(format!("{}.{CONTAINER_EXT}", c.clip_id)),
            &c.frames,
        )
    })?;
    write_atomic_str(&dir.join(FILE_LIST), &file_list)?;
    write_atomic_str(&dir.join(VOLUME_TRACINGS), &tracings)?;
    Ok(clips)
}

/// Render and preprocess clips in memory, skipping the filesystem.
pub fn model_inputs(spec: &SyntheticSpec, cfg: &PreprocessConfig) -> Result<Vec<(Split, ModelInput)>> {
    spec.validate()?;
    (0..spec.n_clips)
        .into_par_iter()
        .map(|i| {
            let clip = render_clip(spec, i);
            Ok((clip.split, make_model_input(&clip.to_echo_clip(), cfg)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocessing::{load_manifest, load_tracings, read_container};
    use proptest::prelude::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_clips: 6,
            height: 32,
            width: 40,
            min_frames: 12,
            max_frames: 30,
            ..SyntheticSpec::default()
        }
    }

    fn rendered_area(v: &Video<u8>, t: usize) -> f64 {
        let f = v.frame(t);
        f.data().iter().step_by(3).map(|&p| p as f64 / 255.0).sum()
    }

    #[test]
    fn ef_fifty_halves_the_area() {
        let spec = SyntheticSpec {
            n_clips: 1,
            min_ef: 50.0,
            max_ef: 50.0,
            ..SyntheticSpec::default()
        };
        let clip = render_clip(&spec, 0);
        assert_eq!(clip.ef, 50.0);
        let ratio = rendered_area(&clip.frames, clip.es_index) / rendered_area(&clip.frames, clip.ed_index);
        assert!((ratio - 0.5).abs() < 0.01, "ES/ED area ratio {ratio}");
        assert!((clip.es_area / clip.ed_area - 0.5).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&small_spec(), a.path()).unwrap();
        generate(&small_spec(), b.path()).unwrap();
        for name in [FILE_LIST, VOLUME_TRACINGS, "Videos/synth_00003.uswv"] {
            assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn zero_clips_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let clips = generate(&SyntheticSpec { n_clips: 0, ..small_spec() }, dir.path()).unwrap();
        assert!(clips.is_empty());
        assert!(load_manifest(&dir.path().join(FILE_LIST)).unwrap().records.is_empty());
        assert!(!dir.path().join(VIDEO_DIR).exists());
    }

    #[test]
    fn emitted_files_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let clips = generate(&small_spec(), dir.path()).unwrap();
        let manifest = load_manifest(&dir.path().join(FILE_LIST)).unwrap();
        let tracings = load_tracings(&dir.path().join(VOLUME_TRACINGS)).unwrap();
        assert_eq!(manifest.records.len(), clips.len());
        for (r, c) in manifest.records.iter().zip(&clips) {
            assert!(r.is_usable(), "{:?}", r.issues);
            assert_eq!(r.clip_id(), c.clip_id);
            let beat = tracings[&c.clip_id];
            assert_eq!((beat.es, beat.ed), (c.es_index, c.ed_index));
            let video = read_container(&dir.path().join(VIDEO_DIR).join(format!("{}.uswv", c.clip_id))).unwrap();
            assert_eq!(video, c.frames);
        }
    }

    #[test]
    fn intensity_target_raises_background() {
        let spec = SyntheticSpec {
            target: SyntheticTarget::IntensityLinear,
            min_ef: 60.0,
            max_ef: 60.0,
            ..small_spec()
        };
        let clip = render_clip(&spec, 0);
        assert_eq!(clip.frames.get(0, 0, 0, 0), (0.3f64 * 255.0).round() as u8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn labels_and_ranges_hold(seed in any::<u64>(), index in 0usize..50) {
            let spec = SyntheticSpec { seed, height: 12, width: 12, min_frames: 6, max_frames: 40, ..SyntheticSpec::default() };
            let clip = render_clip(&spec, index);
            let [t, h, w, c] = clip.frames.dims();
            prop_assert!((spec.min_frames..=spec.max_frames).contains(&t));
            prop_assert_eq!((h, w, c), (12, 12, 3));
            prop_assert!(clip.ef >= spec.min_ef && clip.ef <= spec.max_ef);
            prop_assert!(clip.es_index < t && clip.ed_index < clip.es_index);
            prop_assert!(clip.to_echo_clip().validate_labels(0.1).is_consistent());
        }
    }
}
