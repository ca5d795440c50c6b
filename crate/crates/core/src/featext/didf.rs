//! Feature file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DIDF" | version u32 = 1 | n_frames u32 | n_coeffs u32
//! | payload f32 x (n_frames * n_coeffs), row-major
//! ```
//!
//! The file stores only the matrix; the utterance id lives in the manifest
//! that references the file.

use std::path::Path;

use crate::error::{DidError, Result};
use crate::nnet::tensor::Tensor2;

const MAGIC: &[u8; 4] = b"DIDF";
const VERSION: u32 = 1;

/// Writes a feature matrix. At least one frame and one coefficient are
/// required; an empty matrix is never a valid utterance.
pub fn write_features(path: &Path, frames: &Tensor2) -> Result<()> {
    if frames.rows() == 0 || frames.cols() == 0 {
        return Err(DidError::FeatureFile {
            path: path.into(),
            reason: format!("refusing to write an empty {:?} matrix", frames.shape()),
        });
    }
    let mut out = Vec::with_capacity(16 + frames.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
    for &v in frames.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| DidError::io(path, e))
}

/// Reads and validates a feature file.
pub fn read_features(path: &Path) -> Result<Tensor2> {
    let bytes = std::fs::read(path).map_err(|e| DidError::io(path, e))?;
    let fail = |reason: String| DidError::FeatureFile {
        path: path.into(),
        reason,
    };

    if bytes.len() < 16 {
        return Err(fail("file shorter than the 16-byte header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}, expected \"DIDF\"", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}, expected {VERSION}")));
    }
    let n_frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n_coeffs = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if n_frames == 0 || n_coeffs == 0 {
        return Err(fail(format!("empty matrix ({n_frames} x {n_coeffs})")));
    }
    let expect = 16 + n_frames * n_coeffs * 4;
    if bytes.len() != expect {
        return Err(fail(format!(
            "payload of {} bytes does not match header ({n_frames} x {n_coeffs} needs {})",
            bytes.len() - 16,
            expect - 16
        )));
    }
    let mut data = Vec::with_capacity(n_frames * n_coeffs);
    for (i, chunk) in bytes[16..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(fail(format!("non-finite value at element {i}")));
        }
        data.push(v);
    }
    Tensor2::from_vec(n_frames, n_coeffs, data)
}
