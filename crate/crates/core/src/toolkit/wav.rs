//! WAV input (16-bit PCM or 32-bit float, mono or stereo) and 32-bit float
//! mono output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::dsp::SAMPLE_RATE;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Audio {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

fn wav_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Wav { path: path.to_path_buf(), msg: e.to_string() }
}

/// Reads a WAV file, averaging stereo channels. Rates other than 44.1 kHz are
/// rejected unless `allow_any_rate` is set.
pub fn read_wav(path: &Path, allow_any_rate: bool) -> Result<Audio> {
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => wav_err(path, other),
    })?;
    let spec = reader.spec();
    if !allow_any_rate && spec.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate { found: spec.sample_rate, expected: SAMPLE_RATE });
    }
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(wav_err(path, format!("{channels} channels; only mono and stereo are supported")));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()
        }
        (format, bits) => return Err(wav_err(path, format!("unsupported codec: {bits}-bit {format:?}"))),
    }
    .map_err(|e| wav_err(path, e))?;
    if !interleaved.len().is_multiple_of(channels) {
        return Err(wav_err(path, "truncated sample frame"));
    }
    let samples = interleaved.chunks_exact(channels).map(|frame| frame.iter().sum::<f64>() / channels as f64).collect();
    Ok(Audio { samples, sample_rate: spec.sample_rate })
}

/// Writes 32-bit float mono.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = WavSpec { channels: 1, sample_rate, bits_per_sample: 32, sample_format: SampleFormat::Float };
    let mut w = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in samples {
        w.write_sample(s as f32).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pcm16(path: &Path, channels: u16, frames: &[i16]) {
        let spec =
            WavSpec { channels, sample_rate: SAMPLE_RATE, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in frames {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn float_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..1000).map(|i| ((i as f64) * 0.01).sin() as f32 as f64).collect();
        write_wav(&path, &samples, SAMPLE_RATE).unwrap();
        let first = read_wav(&path, false).unwrap();
        assert_eq!(first.samples, samples);
        write_wav(&path, &first.samples, SAMPLE_RATE).unwrap();
        assert_eq!(read_wav(&path, false).unwrap(), first);
    }

    #[test]
    fn zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.wav");
        write_wav(&path, &vec![0.0; 44_100], SAMPLE_RATE).unwrap();
        assert_eq!(read_wav(&path, false).unwrap().samples, vec![0.0; 44_100]);
    }

    #[test]
    fn pcm16_full_scale_square() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sq.wav");
        write_pcm16(&path, 1, &[32767, -32768, 32767, -32768]);
        let a = read_wav(&path, false).unwrap();
        assert_eq!(a.samples, vec![32767.0 / 32768.0, -1.0, 32767.0 / 32768.0, -1.0]);
    }

    #[test]
    fn stereo_identical_channels_downmix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        write_pcm16(&path, 2, &[100, 100, -2000, -2000, 7, 7]);
        let a = read_wav(&path, false).unwrap();
        assert_eq!(a.samples, vec![100.0 / 32768.0, -2000.0 / 32768.0, 7.0 / 32768.0]);
    }

    #[test]
    fn sample_rate_gate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.wav");
        write_wav(&path, &[0.1, 0.2], 22_050).unwrap();
        assert!(matches!(read_wav(&path, false), Err(Error::SampleRate { found: 22_050, .. })));
        assert_eq!(read_wav(&path, true).unwrap().sample_rate, 22_050);
    }

    #[test]
    fn malformed_and_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.wav");
        std::fs::write(&bad, b"RIFF\x00\x00not a wav").unwrap();
        assert!(matches!(read_wav(&bad, false), Err(Error::Wav { .. })));
        let p8 = dir.path().join("p8.wav");
        let spec =
            WavSpec { channels: 1, sample_rate: SAMPLE_RATE, bits_per_sample: 8, sample_format: SampleFormat::Int };
        let mut w = WavWriter::create(&p8, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        let err = read_wav(&p8, false).unwrap_err();
        assert!(err.to_string().contains("unsupported"));
    }
}
