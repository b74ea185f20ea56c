//! PCM-16 mono WAV reading and writing.
//!
//! Only the subset the pipeline consumes is supported; anything else fails
//! with a distinct error naming the offending property.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::Waveform;

const PCM_TAG: u16 = 1;

/// Read a PCM 16-bit mono WAV file. Samples are scaled to `[-1, 1)` by
/// dividing by 32768; the sample rate comes from the header.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let pstr = path.display().to_string();
    let fail = |reason: &str| Error::WavFormat {
        path: pstr.clone(),
        reason: reason.to_string(),
    };

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail("not a RIFF/WAVE file"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(fail("truncated chunk"));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fail("fmt chunk too short"));
                }
                let tag = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((tag, channels, sample_rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_end + (size & 1);
    }

    let (tag, channels, sample_rate, bits) = fmt.ok_or_else(|| fail("missing fmt chunk"))?;
    if tag != PCM_TAG {
        return Err(Error::WavUnsupported {
            path: pstr,
            reason: format!("non-PCM encoding (format tag {tag})"),
        });
    }
    if channels != 1 {
        return Err(Error::WavUnsupported {
            path: pstr,
            reason: format!("multi-channel input ({channels} channels), expected mono"),
        });
    }
    if bits != 16 {
        return Err(Error::WavUnsupported {
            path: pstr,
            reason: format!("{bits}-bit samples, expected 16-bit"),
        });
    }
    let payload = data.ok_or_else(|| fail("missing data chunk"))?;
    if payload.len() % 2 != 0 {
        return Err(fail("odd data chunk length for 16-bit samples"));
    }

    let samples: Vec<f64> = payload
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Write a waveform as PCM 16-bit mono. Samples are clamped to the i16 range
/// after scaling by 32768, so `write_wav ∘ load_wav` is the identity on
/// 16-bit payloads.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let data_len = w.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_TAG.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &w.samples {
        let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}
