//! Audio ingestion, synthetic clips and checkpoint persistence.

mod checkpoint;
mod synth;
mod wav;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use synth::synth_dataset;
pub use wav::{read_wav, read_wav_dir, write_wav, WaveClip, SAMPLE_RATE};

use crate::error::{Error, Result};

/// Resolves a clip source: `synth:<seed>,<count>,<seconds>` or a directory
/// of WAV files.
pub fn load_clips(spec: &str) -> Result<Vec<WaveClip>> {
    if let Some(rest) = spec.strip_prefix("synth:") {
        let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
        let bad = || {
            Error::Parse(format!(
                "clip spec `{spec}`: expected synth:<seed>,<count>,<seconds>"
            ))
        };
        if parts.len() != 3 {
            return Err(bad());
        }
        let seed = parts[0].parse().map_err(|_| bad())?;
        let count = parts[1].parse().map_err(|_| bad())?;
        let dur = parts[2].parse().map_err(|_| bad())?;
        return synth_dataset(seed, count, dur);
    }
    let clips = read_wav_dir(spec)?;
    if clips.is_empty() {
        return Err(Error::arg("load_clips", format!("no .wav files in {spec}")));
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_spec() {
        let c = load_clips("synth:7,2,0.5").unwrap();
        assert_eq!((c.len(), c[0].len()), (2, 8000));
        assert_eq!(c, synth_dataset(7, 2, 0.5).unwrap());
        for bad in ["synth:1,2", "synth:a,1,1", "synth:1,2,3,4"] {
            assert_eq!(load_clips(bad).unwrap_err().code(), "E_PARSE");
        }
        assert_eq!(load_clips("/nonexistent/dir").unwrap_err().code(), "E_IO");
    }
}
