//! Minimal RIFF/WAVE reader and writer for the one encoding the pipeline
//! accepts: mono 16-bit little-endian PCM at 16 kHz.
//!
//! The reader walks the chunk list (so files with extra chunks such as LIST
//! still load), validates the format chunk strictly and rejects anything it
//! cannot faithfully interpret.

use std::path::Path;

use crate::error::{DidError, Result};
use crate::featext::{AudioClip, SAMPLE_RATE};

/// Reads and validates a wav file.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path).map_err(|e| DidError::io(path, e))?;
    let fail = |reason: &str| DidError::Wav {
        path: path.into(),
        reason: reason.to_string(),
    };

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail("missing RIFF/WAVE header"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            return Err(fail("chunk extends past end of file"));
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fail("fmt chunk too small"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {} // skip unknown chunks
        }
        // Chunks are word-aligned: odd sizes carry a pad byte.
        pos = body_end + (size % 2);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| fail("no fmt chunk"))?;
    if format != 1 {
        return Err(fail(&format!("audio format {format}, only PCM (1) supported")));
    }
    if channels != 1 {
        return Err(fail(&format!("{channels} channels, only mono supported")));
    }
    if bits != 16 {
        return Err(fail(&format!("{bits}-bit samples, only 16-bit supported")));
    }
    if rate != SAMPLE_RATE {
        return Err(fail(&format!("sample rate {rate} Hz, expected {SAMPLE_RATE}")));
    }

    let data = data.ok_or_else(|| fail("no data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(fail("data chunk has an odd byte count"));
    }
    let samples: Vec<i16> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    AudioClip::new(samples, rate)
}

/// Writes a clip as a canonical 44-byte-header PCM wav file.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let n_bytes = clip.len() * 2;
    let mut out = Vec::with_capacity(44 + n_bytes);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&u32::try_from(36 + n_bytes).map_err(|_| DidError::Wav {
        path: path.into(),
        reason: "clip too long for the wav container".into(),
    })?.to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate().to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate() * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(n_bytes as u32).to_le_bytes());
    for &s in clip.samples() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| DidError::io(path, e))
}
