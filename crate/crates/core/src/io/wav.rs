use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono 16 kHz audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveClip {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl WaveClip {
    pub fn new(id: impl Into<String>, samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::arg("WaveClip", "empty clip"));
        }
        Ok(Self {
            id: id.into(),
            samples,
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn hound_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::UnsupportedFormat(format!("{}: {other}", path.display())),
    }
}

/// Reads RIFF/WAVE PCM 16-bit mono 16 kHz; anything else is rejected
/// (no resampling, no downmixing).
pub fn read_wav(path: impl AsRef<Path>) -> Result<WaveClip> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| hound_err(path, e))?;
    let spec = reader.spec();
    let mut problems = Vec::new();
    if spec.channels != 1 {
        problems.push(format!("channels={}", spec.channels));
    }
    if spec.sample_rate != SAMPLE_RATE {
        problems.push(format!("sample_rate={}", spec.sample_rate));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        problems.push(format!(
            "codec={:?}{}",
            spec.sample_format, spec.bits_per_sample
        ));
    }
    if !problems.is_empty() {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {} (need mono 16-bit PCM at 16000 Hz)",
            path.display(),
            problems.join(", ")
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| hound_err(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    WaveClip::new(id, samples)
}

/// Writes PCM16 mono 16 kHz, quantizing `round(x·32768)` with clipping.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| hound_err(path, e))?;
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(|e| hound_err(path, e))?;
    }
    w.finalize().map_err(|e| hound_err(path, e))
}

/// Every `*.wav` in `dir`, sorted by file name.
pub fn read_wav_dir(dir: impl AsRef<Path>) -> Result<Vec<WaveClip>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    paths.iter().map(read_wav).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..16_000)
            .map(|i| ((i % 200) as f64 / 100.0) - 1.0)
            .collect();
        write_wav(&path, &samples).unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.len(), 16_000);
        assert_eq!(clip.id, "a");
        assert_eq!(clip.samples[0], -1.0);
    }

    #[test]
    fn stereo_is_rejected_with_channel_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for _ in 0..32 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let err = read_wav(&path).unwrap_err();
        assert_eq!(err.code(), "E_FORMAT");
        assert!(err.to_string().contains("channels=2"), "{err}");
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(read_wav(&path)
            .unwrap_err()
            .to_string()
            .contains("sample_rate=44100"));
    }
}
