//! Raw video container: magic `USWV1`, then `T, H, W, C` as little-endian
//! `u32`, then `T·H·W·C` bytes of row-major `u8` pixels.

use std::fs;
use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::{TokenGrid, Video};

pub const CONTAINER_MAGIC: &[u8; 5] = b"USWV1";
const HEADER_LEN: usize = 5 + 4 * 4;

pub fn encode_container(video: &Video<u8>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + video.data().len());
    buf.extend_from_slice(CONTAINER_MAGIC);
    for d in video.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(video.data());
    buf
}

pub fn decode_container(bytes: &[u8], path: &Path) -> Result<Video<u8>> {
    let bad = |msg: String| Error::Container {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < HEADER_LEN || &bytes[..5] != CONTAINER_MAGIC {
        return Err(bad("missing USWV1 header".into()));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 5 + 4 * i;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    }
    let expected: usize = dims.iter().product();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(bad(format!(
            "dims {:?} need {} bytes of pixels, found {}",
            dims,
            expected,
            payload.len()
        )));
    }
    TokenGrid::from_vec(dims, payload.to_vec())
}

pub fn write_container(path: &Path, video: &Video<u8>) -> Result<()> {
    write_atomic(path, &encode_container(video))
}

pub fn read_container(path: &Path) -> Result<Video<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes, path)
}

/// 8-bit pixels to `[0, 1]`.
pub fn to_unit_range(video: &Video<u8>) -> Video<f32> {
    video.map(|v| v as f32 / 255.0)
}

/// `[0, 1]` values back to 8-bit pixels. Exact inverse of [`to_unit_range`].
pub fn quantize(video: &Video<f32>) -> Video<u8> {
    video.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Decode an AVI file to RGB frames by piping it through `ffmpeg`.
///
/// Frame size must be known up front (FileList.csv carries it).
pub fn decode_avi(path: &Path, height: usize, width: usize) -> Result<Video<u8>> {
    let mut child = Command::new("ffmpeg")
        .args(["-v", "error", "-i"])
        .arg(path)
        .args(["-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Decoder(format!("cannot run ffmpeg for {}: {e}", path.display())))?;
    let mut raw = Vec::new();
    child
        .stdout
        .take()
        .expect("piped stdout")
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    let status = child.wait().map_err(|e| Error::io(path, e))?;
    if !status.success() {
        return Err(Error::Decoder(format!("ffmpeg failed on {}", path.display())));
    }
    let frame_len = height * width * 3;
    if frame_len == 0 || raw.len() % frame_len != 0 {
        return Err(Error::Container {
            path: path.to_path_buf(),
            msg: format!("decoded {} bytes, not a multiple of {height}×{width}×3", raw.len()),
        });
    }
    TokenGrid::from_vec([raw.len() / frame_len, height, width, 3], raw)
}
