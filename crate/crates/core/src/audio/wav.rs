use std::io::{Read, Seek, Write};

use super::{AudioClip, SAMPLE_RATE};
use crate::error::{format_err, Result};

/// Reads a RIFF PCM16 mono 16 kHz file. Anything else is a format error.
pub fn read_wav<R: Read>(r: R) -> Result<AudioClip> {
    let reader = hound::WavReader::new(r).map_err(|e| format_err!("wav: {e}"))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(format_err!(
            "wav must be PCM16 mono {} Hz, got {} ch {} Hz {}-bit {:?}",
            SAMPLE_RATE,
            spec.channels,
            spec.sample_rate,
            spec.bits_per_sample,
            spec.sample_format
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format_err!("wav: {e}"))?;
    AudioClip::new(samples)
}

pub fn write_wav<W: Write + Seek>(w: W, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::new(w, spec).map_err(|e| format_err!("wav: {e}"))?;
    for &s in clip.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| format_err!("wav: {e}"))?;
    }
    writer.finalize().map_err(|e| format_err!("wav: {e}"))
}
