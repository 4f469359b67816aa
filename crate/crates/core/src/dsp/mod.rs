//! Audio ingestion, spectral-segment extraction, and training augmentation.
//!
//! The pipeline works on mono WAV pairs resampled to a common rate. Model
//! input is the 257×256 linear-magnitude STFT of a 500 ms window; see
//! [`stft`] for the exact geometry.

mod cache;
mod stft;

use std::path::Path;

use rand::Rng;
use thiserror::Error;

pub use cache::{CacheEntry, SegmentCacheReader, SegmentCacheWriter};
pub use stft::{
    extract_segment, hop_for_rate, SegmentExtractor, SpectralSegment, N_FFT, N_FRAMES,
    N_FREQ_BINS, WINDOW_S,
};

/// Default pipeline sample rate.
pub const DEFAULT_SAMPLE_RATE: u32 = 48_000;

/// Channel pairs may disagree in length by at most this much.
pub const MAX_LENGTH_MISMATCH_S: f64 = 0.1;

/// One recorder channel, resampled to the pipeline rate.
#[derive(Debug, Clone)]
pub struct AudioChannel {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl AudioChannel {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

#[derive(Debug, Error)]
pub enum DspError {
    #[error("wav error for {path}: {source}")]
    Wav {
        path: String,
        source: hound::Error,
    },
    #[error("unsupported wav encoding in {path}: {detail} (need mono 16-bit PCM or 32-bit float)")]
    UnsupportedEncoding { path: String, detail: String },
    #[error(
        "channel lengths differ by {:.3}s (> {MAX_LENGTH_MISMATCH_S}s): {len1_s:.3}s vs {len2_s:.3}s — unaligned session",
        (len1_s - len2_s).abs()
    )]
    LengthMismatch { len1_s: f64, len2_s: f64 },
    #[error("segment start {start_s:.3}s is beyond the audio end ({duration_s:.3}s)")]
    StartOutOfRange { start_s: f64, duration_s: f64 },
    #[error("duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("shift must be positive, got {0}")]
    NonPositiveShift(f64),
    #[error("sample rate {0} cannot produce the 257x256 segment geometry")]
    BadSampleRate(u32),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Read a mono WAV file (16-bit PCM or 32-bit float) at its native rate.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioChannel, DspError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut reader = hound::WavReader::open(path).map_err(|source| DspError::Wav {
        path: display.clone(),
        source,
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DspError::UnsupportedEncoding {
            path: display,
            detail: format!("{} channels", spec.channels),
        });
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| {
                s.map(|v| v as f32 / 32768.0).map_err(|source| DspError::Wav {
                    path: display.clone(),
                    source,
                })
            })
            .collect::<Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| {
                s.map_err(|source| DspError::Wav {
                    path: display.clone(),
                    source,
                })
            })
            .collect::<Result<_, _>>()?,
        (fmt, bits) => {
            return Err(DspError::UnsupportedEncoding {
                path: display,
                detail: format!("{fmt:?} {bits}-bit"),
            })
        }
    };
    Ok(AudioChannel {
        samples,
        sample_rate_hz: spec.sample_rate,
    })
}

/// Write mono 16-bit PCM.
pub fn write_wav_mono16(
    path: impl AsRef<Path>,
    samples: &[f32],
    sample_rate_hz: u32,
) -> Result<(), DspError> {
    let display = path.as_ref().display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(|source| {
        DspError::Wav {
            path: display.clone(),
            source,
        }
    })?;
    for &v in samples {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(q).map_err(|source| DspError::Wav {
            path: display.clone(),
            source,
        })?;
    }
    writer.finalize().map_err(|source| DspError::Wav {
        path: display,
        source,
    })?;
    Ok(())
}

/// Linear interpolation at fractional source position `pos` (clamped ends).
#[inline]
pub(crate) fn sample_linear(samples: &[f32], pos: f64) -> f32 {
    if samples.is_empty() {
        return 0.0;
    }
    let i0 = pos.floor() as usize;
    if i0 + 1 >= samples.len() {
        return *samples.last().unwrap();
    }
    let frac = (pos - i0 as f64) as f32;
    samples[i0] + (samples[i0 + 1] - samples[i0]) * frac
}

/// Number of output samples when resampling `n_src` samples.
pub(crate) fn resampled_len(n_src: usize, src_rate: u32, dst_rate: u32) -> usize {
    (n_src as f64 * dst_rate as f64 / src_rate as f64).round() as usize
}

/// Resample by linear interpolation.
pub fn resample_linear(samples: &[f32], src_rate: u32, dst_rate: u32) -> Vec<f32> {
    if src_rate == dst_rate {
        return samples.to_vec();
    }
    let n_out = resampled_len(samples.len(), src_rate, dst_rate);
    let step = src_rate as f64 / dst_rate as f64;
    (0..n_out)
        .map(|t| sample_linear(samples, t as f64 * step))
        .collect()
}

/// Load a recorder pair, resample both channels to `target_rate`, and
/// equalize lengths by zero-padding the shorter channel. A length mismatch
/// beyond [`MAX_LENGTH_MISMATCH_S`] signals an unaligned session.
pub fn load_wav_pair(
    path1: impl AsRef<Path>,
    path2: impl AsRef<Path>,
    target_rate: u32,
) -> Result<(AudioChannel, AudioChannel), DspError> {
    let ch1 = load_wav(path1)?;
    let ch2 = load_wav(path2)?;
    align_pair(ch1, ch2, target_rate)
}

/// Resample + length-equalize an already-loaded pair.
pub fn align_pair(
    ch1: AudioChannel,
    ch2: AudioChannel,
    target_rate: u32,
) -> Result<(AudioChannel, AudioChannel), DspError> {
    let mut s1 = resample_linear(&ch1.samples, ch1.sample_rate_hz, target_rate);
    let mut s2 = resample_linear(&ch2.samples, ch2.sample_rate_hz, target_rate);
    let diff_s = (s1.len() as f64 - s2.len() as f64).abs() / target_rate as f64;
    if diff_s > MAX_LENGTH_MISMATCH_S {
        return Err(DspError::LengthMismatch {
            len1_s: s1.len() as f64 / target_rate as f64,
            len2_s: s2.len() as f64 / target_rate as f64,
        });
    }
    let n = s1.len().max(s2.len());
    s1.resize(n, 0.0);
    s2.resize(n, 0.0);
    Ok((
        AudioChannel {
            samples: s1,
            sample_rate_hz: target_rate,
        },
        AudioChannel {
            samples: s2,
            sample_rate_hz: target_rate,
        },
    ))
}

/// Sliding-window start times: `0, shift, 2·shift, …` while the start is
/// inside the recording. Edge windows are zero-padded downstream.
pub fn segment_grid(duration_s: f64, window_s: f64, shift_s: f64) -> Result<Vec<f64>, DspError> {
    if duration_s <= 0.0 {
        return Err(DspError::NonPositiveDuration(duration_s));
    }
    if shift_s <= 0.0 || window_s <= 0.0 {
        return Err(DspError::NonPositiveShift(shift_s.min(window_s)));
    }
    let mut starts = Vec::new();
    let mut i = 0u64;
    loop {
        let start = i as f64 * shift_s;
        if start >= duration_s - 1e-9 {
            break;
        }
        starts.push(start);
        i += 1;
    }
    Ok(starts)
}

/// Cyclic 2-d roll of the segment values: positive `df` moves content toward
/// higher frequency rows, positive `dt` toward later time columns.
pub fn roll2d(values: &ndarray::Array2<f32>, df: isize, dt: isize) -> ndarray::Array2<f32> {
    let (h, w) = values.dim();
    let mut out = ndarray::Array2::zeros((h, w));
    let wrap = |v: isize, m: usize| -> usize {
        let m = m as isize;
        (((v % m) + m) % m) as usize
    };
    for i in 0..h {
        let ti = wrap(i as isize + df, h);
        for j in 0..w {
            out[[ti, wrap(j as isize + dt, w)]] = values[[i, j]];
        }
    }
    out
}

/// Training augmentation: independent cyclic shifts of 1–5 pixels on each
/// axis, direction chosen per axis. The value multiset is preserved.
pub fn roll_shift<R: Rng>(seg: &SpectralSegment, rng: &mut R) -> SpectralSegment {
    let df_mag = rng.gen_range(1..=5) as isize;
    let df = if rng.gen::<bool>() { df_mag } else { -df_mag };
    let dt_mag = rng.gen_range(1..=5) as isize;
    let dt = if rng.gen::<bool>() { dt_mag } else { -dt_mag };
    SpectralSegment {
        values: roll2d(&seg.values, df, dt),
        origin_s: seg.origin_s,
        channel: seg.channel,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, rate: u32, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() as f32)
            .collect()
    }

    #[test]
    fn wav_round_trip_via_tempdir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples = tone(440.0, 8000, 1600);
        write_wav_mono16(&path, &samples, 8000).unwrap();
        let ch = load_wav(&path).unwrap();
        assert_eq!(ch.sample_rate_hz, 8000);
        assert_eq!(ch.samples.len(), 1600);
        for (a, b) in ch.samples.iter().zip(&samples) {
            assert!((a - b).abs() < 2.0 / 32768.0);
        }
    }

    #[test]
    fn pair_loading_keeps_equal_lengths_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.wav"), dir.path().join("b.wav"));
        write_wav_mono16(&p1, &tone(440.0, 48_000, 48_000), 48_000).unwrap();
        write_wav_mono16(&p2, &tone(880.0, 48_000, 48_000), 48_000).unwrap();
        let (c1, c2) = load_wav_pair(&p1, &p2, 48_000).unwrap();
        assert_eq!(c1.samples.len(), 48_000);
        assert_eq!(c2.samples.len(), 48_000);
    }

    #[test]
    fn resample_length_follows_rate_ratio() {
        // Oracle: output length = round(n_src * dst / src).
        let n_src = 44_100;
        let out = resample_linear(&tone(440.0, 44_100, n_src), 44_100, 48_000);
        let expect = (n_src as f64 * 48_000.0 / 44_100.0).round() as usize;
        assert!((out.len() as i64 - expect as i64).abs() <= 1);
        assert_eq!(out.len(), 48_000);
    }

    #[test]
    fn pair_length_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.wav"), dir.path().join("b.wav"));
        write_wav_mono16(&p1, &tone(440.0, 8000, 8000), 8000).unwrap();
        write_wav_mono16(&p2, &tone(440.0, 8000, 8000 + 16_000), 8000).unwrap();
        let err = load_wav_pair(&p1, &p2, 8000).unwrap_err();
        assert!(matches!(err, DspError::LengthMismatch { .. }), "{err}");
    }

    #[test]
    fn pair_small_gap_zero_padded() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.wav"), dir.path().join("b.wav"));
        write_wav_mono16(&p1, &tone(440.0, 8000, 8000), 8000).unwrap();
        write_wav_mono16(&p2, &tone(440.0, 8000, 8000 - 400), 8000).unwrap(); // 50ms shorter
        let (c1, c2) = load_wav_pair(&p1, &p2, 8000).unwrap();
        assert_eq!(c1.samples.len(), c2.samples.len());
        assert_eq!(&c2.samples[7600..], &vec![0.0; 400][..]);
    }

    #[test]
    fn grid_examples() {
        let starts = segment_grid(1.0, 0.5, 0.15).unwrap();
        assert_eq!(starts.len(), 7);
        assert!((starts[6] - 0.90).abs() < 1e-12);
        let starts = segment_grid(0.4, 0.5, 0.15).unwrap();
        assert_eq!(starts, vec![0.0, 0.15, 0.30]);
        assert!(segment_grid(0.0, 0.5, 0.15).is_err());
        // A start landing exactly on the duration is excluded.
        let starts = segment_grid(0.9, 0.5, 0.15).unwrap();
        assert_eq!(starts.len(), 6);
    }

    #[test]
    fn roll_shift_preserves_multiset_and_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values =
            Array2::from_shape_fn((N_FREQ_BINS, N_FRAMES), |(i, j)| ((i * 31 + j) % 97) as f32);
        let seg = SpectralSegment {
            values,
            origin_s: 0.0,
            channel: 1,
        };
        let rolled = roll_shift(&seg, &mut rng);
        let mut a: Vec<f32> = seg.values.iter().copied().collect();
        let mut b: Vec<f32> = rolled.values.iter().copied().collect();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);

        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let rolled2 = roll_shift(&seg, &mut rng2);
        assert_eq!(rolled.values, rolled2.values);
    }

    #[test]
    fn roll2d_moves_one_hot_pixel() {
        let mut values = Array2::zeros((257, 256));
        values[[10, 10]] = 1.0;
        let out = roll2d(&values, 2, -3);
        assert_eq!(out[[12, 7]], 1.0);
        assert_eq!(out.sum(), 1.0);
    }
}
