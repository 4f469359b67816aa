//! Spectral-segment extraction.
//!
//! A segment is the linear-magnitude STFT of one 500 ms window: 512-point
//! FFT (257 bins) over a 512-sample Hann window, hopped so that exactly 256
//! frames fit inside the window. At 48 kHz the hop is 92 samples
//! (255·92 + 512 = 23972 ≤ 24000); other rates derive the largest hop that
//! keeps all frames inside. Values are max-normalized per segment.

use ndarray::Array2;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use std::sync::Arc;

use super::{AudioChannel, DspError};

pub const N_FFT: usize = 512;
pub const N_FREQ_BINS: usize = 257;
pub const N_FRAMES: usize = 256;
/// Analysis window length in seconds.
pub const WINDOW_S: f64 = 0.5;

const NORM_EPS: f32 = 1e-8;

/// One 257×256 linear-magnitude spectrogram window from one channel.
#[derive(Debug, Clone)]
pub struct SpectralSegment {
    /// `[frequency bin, time frame]`, max-normalized to `[0, 1]`.
    pub values: Array2<f32>,
    pub origin_s: f64,
    /// Recorder channel tag, 1 or 2.
    pub channel: u8,
}

/// Largest hop that keeps all 256 frames inside the analysis window.
pub fn hop_for_rate(sample_rate_hz: u32) -> Result<usize, DspError> {
    let win = window_samples(sample_rate_hz);
    if win < N_FFT {
        return Err(DspError::BadSampleRate(sample_rate_hz));
    }
    let hop = (win - N_FFT) / (N_FRAMES - 1);
    if hop == 0 {
        return Err(DspError::BadSampleRate(sample_rate_hz));
    }
    Ok(hop)
}

pub(crate) fn window_samples(sample_rate_hz: u32) -> usize {
    (sample_rate_hz as f64 * WINDOW_S).round() as usize
}

/// Reusable FFT plan + Hann window for one sample rate.
pub struct SegmentExtractor {
    sample_rate_hz: u32,
    hop: usize,
    win_len: usize,
    fft: Arc<dyn Fft<f32>>,
    hann: Vec<f32>,
}

impl SegmentExtractor {
    pub fn new(sample_rate_hz: u32) -> Result<Self, DspError> {
        let hop = hop_for_rate(sample_rate_hz)?;
        let fft = FftPlanner::<f32>::new().plan_fft_forward(N_FFT);
        let hann: Vec<f32> = (0..N_FFT)
            .map(|n| {
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / N_FFT as f64).cos()) as f32
            })
            .collect();
        Ok(SegmentExtractor {
            sample_rate_hz,
            hop,
            win_len: window_samples(sample_rate_hz),
            fft,
            hann,
        })
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window_len(&self) -> usize {
        self.win_len
    }

    /// Copy the analysis window starting at `start_sample`, zero-padding
    /// beyond the recording edges.
    pub fn gather_window(&self, samples: &[f32], start_sample: usize, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.win_len);
        for (i, o) in out.iter_mut().enumerate() {
            let idx = start_sample + i;
            *o = if idx < samples.len() { samples[idx] } else { 0.0 };
        }
    }

    /// STFT of one already-gathered window buffer.
    pub fn stft_window(&self, window: &[f32]) -> Array2<f32> {
        debug_assert_eq!(window.len(), self.win_len);
        let mut values = Array2::<f32>::zeros((N_FREQ_BINS, N_FRAMES));
        let mut buf = vec![Complex::new(0.0f32, 0.0f32); N_FFT];
        let mut scratch = vec![Complex::new(0.0f32, 0.0f32); self.fft.get_inplace_scratch_len()];
        for t in 0..N_FRAMES {
            let off = t * self.hop;
            for (n, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(window[off + n] * self.hann[n], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..N_FREQ_BINS {
                values[[k, t]] = buf[k].norm();
            }
        }
        let max = values.iter().copied().fold(0.0f32, f32::max);
        values.mapv_inplace(|v| v / (max + NORM_EPS));
        values
    }

    /// Extract the segment whose window begins at `start_s`.
    pub fn extract(
        &self,
        ch: &AudioChannel,
        start_s: f64,
        channel_tag: u8,
    ) -> Result<SpectralSegment, DspError> {
        debug_assert_eq!(ch.sample_rate_hz, self.sample_rate_hz);
        let start_sample = (start_s * self.sample_rate_hz as f64).round();
        if start_s < 0.0 || start_sample < 0.0 || start_sample as usize >= ch.samples.len() {
            return Err(DspError::StartOutOfRange {
                start_s,
                duration_s: ch.duration_s(),
            });
        }
        let mut window = vec![0.0f32; self.win_len];
        self.gather_window(&ch.samples, start_sample as usize, &mut window);
        Ok(SpectralSegment {
            values: self.stft_window(&window),
            origin_s: start_s,
            channel: channel_tag,
        })
    }
}

/// One-shot extraction (builds a throwaway plan; hot paths should hold a
/// [`SegmentExtractor`]).
pub fn extract_segment(
    ch: &AudioChannel,
    start_s: f64,
    channel_tag: u8,
) -> Result<SpectralSegment, DspError> {
    SegmentExtractor::new(ch.sample_rate_hz)?.extract(ch, start_s, channel_tag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel(samples: Vec<f32>, rate: u32) -> AudioChannel {
        AudioChannel {
            samples,
            sample_rate_hz: rate,
        }
    }

    fn tone(freq: f64, rate: u32, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() as f32)
            .collect()
    }

    #[test]
    fn hop_matches_target_geometry_at_48k() {
        assert_eq!(hop_for_rate(48_000).unwrap(), 92);
        assert!(255 * 92 + N_FFT <= 24_000);
        // Other rates still admit 256 full frames.
        for rate in [16_000u32, 24_000, 44_100] {
            let hop = hop_for_rate(rate).unwrap();
            assert!(255 * hop + N_FFT <= window_samples(rate), "rate {rate}");
        }
    }

    #[test]
    fn pure_tone_peaks_at_expected_bin() {
        // 1 kHz at 48 kHz: bin resolution 93.75 Hz, peak at round(1000/93.75) = 11.
        let ch = channel(tone(1000.0, 48_000, 48_000), 48_000);
        let seg = extract_segment(&ch, 0.25, 1).unwrap();
        assert_eq!(seg.values.dim(), (N_FREQ_BINS, N_FRAMES));
        for t in 0..N_FRAMES {
            let col = seg.values.column(t);
            let argmax = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, 11, "frame {t}");
        }
    }

    #[test]
    fn zero_audio_gives_zero_segment() {
        let ch = channel(vec![0.0; 48_000], 48_000);
        let seg = extract_segment(&ch, 0.0, 1).unwrap();
        assert!(seg.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn values_stay_in_unit_range() {
        let ch = channel(tone(2500.0, 48_000, 48_000), 48_000);
        let seg = extract_segment(&ch, 0.1, 2).unwrap();
        assert!(seg.values.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
        assert_eq!(seg.channel, 2);
    }

    #[test]
    fn start_beyond_end_is_an_error() {
        let ch = channel(vec![0.1; 4800], 48_000);
        assert!(extract_segment(&ch, 0.09, 1).is_ok()); // zero-padded tail
        let err = extract_segment(&ch, 0.11, 1).unwrap_err();
        assert!(matches!(err, DspError::StartOutOfRange { .. }), "{err}");
    }

    #[test]
    fn shift_by_whole_hops_translates_columns() {
        // Two extractions offset by k whole hops see identical samples in
        // their overlapping frames. A loud burst in the overlap pins the
        // per-segment normalization max to a frame both windows contain, so
        // interior columns must match to float precision.
        let rate = 48_000;
        let mut samples = tone(1000.0, rate, 2 * rate as usize);
        for (i, s) in tone(3700.0, rate, 2 * rate as usize).iter().enumerate() {
            samples[i] += 0.5 * s;
        }
        for (i, s) in tone(5000.0, rate, 2400).iter().enumerate() {
            samples[24_000 + i] += 3.0 * s; // burst at 0.5s, inside both windows
        }
        let ch = channel(samples, rate);
        let hop = hop_for_rate(rate).unwrap();
        let k = 3usize;
        let t0 = 0.25f64;
        let t1 = t0 + (k * hop) as f64 / rate as f64;
        let a = extract_segment(&ch, t0, 1).unwrap();
        let b = extract_segment(&ch, t1, 1).unwrap();
        // Columns k.. of a correspond to columns 0..256-k of b.
        for t in 0..(N_FRAMES - k) {
            for f in 0..N_FREQ_BINS {
                let va = a.values[[f, t + k]];
                let vb = b.values[[f, t]];
                let denom = va.abs().max(vb.abs()).max(1e-6);
                assert!(
                    ((va - vb) / denom).abs() < 1e-6,
                    "mismatch at f={f} t={t}: {va} vs {vb}"
                );
            }
        }
    }

    #[test]
    fn energy_zero_iff_window_zero() {
        let mut samples = vec![0.0f32; 48_000];
        for (i, v) in tone(2000.0, 48_000, 4800).iter().enumerate() {
            samples[24_000 + i] = *v;
        }
        let ch = channel(samples, 48_000);
        let silent = extract_segment(&ch, 0.0, 1).unwrap();
        assert_eq!(silent.values.sum(), 0.0);
        let voiced = extract_segment(&ch, 0.3, 1).unwrap();
        assert!(voiced.values.sum() > 0.0);
    }
}
