use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded mono PCM audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Audio {
    /// Samples in `[-1, 1)`, normalized by 32768.
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Decode a RIFF/WAVE byte stream holding 16-bit integer PCM. Stereo input is
/// averaged to mono.
pub fn decode_wav(bytes: &[u8]) -> Result<Audio> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| Error::Wav(e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "unsupported encoding: {:?} {}-bit (only 16-bit integer PCM is supported)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(Error::Wav(format!("unsupported channel count {channels}")));
    }
    let expected = reader.len() as usize;
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Wav(format!("truncated or corrupt data: {e}")))?;
    if raw.len() != expected {
        return Err(Error::Wav(format!("truncated data: {} of {expected} samples", raw.len())));
    }
    let samples = raw
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f32 = frame.iter().map(|&s| s as f32).sum();
            sum / channels as f32 / 32768.0
        })
        .collect();
    Ok(Audio {
        samples,
        sample_rate: spec.sample_rate,
    })
}

pub fn read_wav(path: &Path) -> Result<Audio> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes).map_err(|e| match e {
        Error::Wav(m) => Error::Wav(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Encode mono 16-bit PCM. Samples are clamped to `[-1, 1]`.
pub fn encode_wav(samples: &[f32], sample_rate: u32) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).map_err(|e| Error::Wav(e.to_string()))?;
        for &s in samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v).map_err(|e| Error::Wav(e.to_string()))?;
        }
        w.finalize().map_err(|e| Error::Wav(e.to_string()))?;
    }
    Ok(buf.into_inner())
}
