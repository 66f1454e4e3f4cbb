//! RIFF WAV input/output (mono, 32 kHz, 16-bit integer or 32-bit float).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

fn data_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut r = WavReader::open(path).map_err(|e| data_err(path, e))?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(data_err(path, format!("expected mono audio, found {} channels", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(data_err(
            path,
            format!("expected {SAMPLE_RATE} Hz audio, found {} Hz", spec.sample_rate),
        ));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => r
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| data_err(path, e))?,
        (SampleFormat::Float, 32) => r
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| data_err(path, e))?,
        (f, b) => {
            return Err(data_err(
                path,
                format!("unsupported sample format {f:?} with {b} bits (need 16-bit int or 32-bit float)"),
            ))
        }
    };
    Waveform::new(samples, spec.sample_rate).map_err(|e| data_err(path, e))
}

/// Writes 16-bit PCM, clipping to `[-1, 1)`.
pub fn write_wav_i16(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut wr = WavWriter::create(path, spec).map_err(|e| data_err(path, e))?;
    for &s in &w.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        wr.write_sample(v).map_err(|e| data_err(path, e))?;
    }
    wr.finalize().map_err(|e| data_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn int16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.25, -1.0], SAMPLE_RATE).unwrap();
        write_wav_i16(&p, &w).unwrap();
        assert_eq!(read_wav(&p).unwrap(), w);
    }

    #[test]
    fn float_wav_accepted_other_rates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut wr = WavWriter::create(&p, spec).unwrap();
        wr.write_sample(0.125f32).unwrap();
        wr.finalize().unwrap();
        assert_eq!(read_wav(&p).unwrap().samples, vec![0.125]);

        let q = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut wr = WavWriter::create(&q, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(read_wav(&q), Err(Error::Data(_))));
        assert!(matches!(read_wav(&dir.path().join("missing.wav")), Err(Error::Data(_))));
    }
}
