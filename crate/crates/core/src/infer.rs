//! Streaming long-recording prediction and reconstruction of per-animal
//! segment files from frame labels.
//!
//! The recording is cut into non-overlapping 2500 ms macro-segments; each
//! yields 50 windows at a 50 ms shift (windows near the boundary read into
//! the next macro-segment, the final one is zero-padded). A window's label
//! is assigned to the 50 ms unit starting at the window center — the unit
//! grid is anchored at 0, so the first 250 ms and the unassigned tail come
//! out as noise. Memory stays bounded by one macro-segment regardless of
//! recording length.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::dsp::{self, DspError, SegmentExtractor, SpectralSegment};
use crate::models::{ModelError, TwoStreamModel};
use crate::taxonomy::{CallAnnotation, Caller, SegmentFile, TargetLabel, TaxonomyError};

/// Prediction unit in seconds (one frame).
pub const FRAME_S: f64 = 0.05;
/// Windows per macro-segment.
pub const WINDOWS_PER_MACRO: usize = 50;
/// Macro-segment length in seconds.
pub const MACRO_S: f64 = FRAME_S * WINDOWS_PER_MACRO as f64;
/// Frames between a window start and the unit it labels (the window center).
pub const CENTER_OFFSET_FRAMES: usize = 5;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("sample rate {0} is not divisible into 50ms frames")]
    BadFrameRate(u32),
    #[error("frames are not contiguous at {at_s:.3}s (gap of {gap_s:.6}s)")]
    NonContiguousFrames { at_s: f64, gap_s: f64 },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// One 50 ms prediction unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePrediction {
    pub begin_s: f64,
    pub end_s: f64,
    pub label: TargetLabel,
    /// Max softmax probability of the emitting window; edge frames that no
    /// window labels default to noise with confidence 1.
    pub confidence: f64,
}

/// Window starts for streaming prediction, one batch per macro-segment:
/// batch `k` holds starts `k·2.5 + i·0.05` for `i = 0..50`.
pub fn stream_plan(duration_s: f64) -> Result<Vec<Vec<f64>>, InferError> {
    if duration_s <= 0.0 {
        return Err(InferError::NonPositiveDuration(duration_s));
    }
    let macros = (duration_s / MACRO_S - 1e-9).ceil().max(1.0) as usize;
    Ok((0..macros)
        .map(|k| {
            (0..WINDOWS_PER_MACRO)
                .map(|i| (k * WINDOWS_PER_MACRO + i) as f64 * FRAME_S)
                .collect()
        })
        .collect())
}

/// Supplies aligned window sample buffers for both channels. Implementations
/// must zero-pad beyond their channel ends; `fill` is called with
/// non-decreasing starts.
pub trait WindowSource {
    fn sample_rate(&self) -> u32;
    /// Aligned pair length in samples at the pipeline rate.
    fn total_samples(&self) -> usize;
    fn fill(&mut self, start_sample: usize, ch1: &mut [f32], ch2: &mut [f32]);

    fn duration_s(&self) -> f64 {
        self.total_samples() as f64 / self.sample_rate() as f64
    }
}

/// Whole-recording source backed by in-memory channels.
pub struct InMemoryPair<'a> {
    pub ch1: &'a dsp::AudioChannel,
    pub ch2: &'a dsp::AudioChannel,
}

impl WindowSource for InMemoryPair<'_> {
    fn sample_rate(&self) -> u32 {
        self.ch1.sample_rate_hz
    }

    fn total_samples(&self) -> usize {
        self.ch1.samples.len().max(self.ch2.samples.len())
    }

    fn fill(&mut self, start_sample: usize, ch1: &mut [f32], ch2: &mut [f32]) {
        copy_padded(&self.ch1.samples, start_sample, ch1);
        copy_padded(&self.ch2.samples, start_sample, ch2);
    }
}

fn copy_padded(samples: &[f32], start: usize, out: &mut [f32]) {
    for (i, o) in out.iter_mut().enumerate() {
        let idx = start + i;
        *o = if idx < samples.len() { samples[idx] } else { 0.0 };
    }
}

/// Run streaming prediction over a window source. Output tiles
/// `ceil(duration / 0.05)` frames.
pub fn predict_frames<S: WindowSource>(
    model: &TwoStreamModel<f32>,
    source: &mut S,
) -> Result<Vec<FramePrediction>, InferError> {
    let rate = source.sample_rate();
    if rate % 20 != 0 {
        return Err(InferError::BadFrameRate(rate));
    }
    let frame_samples = (rate / 20) as usize;
    let total = source.total_samples();
    if total == 0 {
        return Err(InferError::NonPositiveDuration(0.0));
    }
    let n_frames = total.div_ceil(frame_samples);
    let duration_s = source.duration_s();

    let mut frames: Vec<FramePrediction> = (0..n_frames)
        .map(|j| FramePrediction {
            begin_s: j as f64 * FRAME_S,
            end_s: (j + 1) as f64 * FRAME_S,
            label: TargetLabel::Noise,
            confidence: 1.0,
        })
        .collect();

    let extractor = SegmentExtractor::new(rate)?;
    let win_len = extractor.window_len();
    let macro_samples = frame_samples * WINDOWS_PER_MACRO;
    let n_macros = total.div_ceil(macro_samples);

    let mut buffers: Vec<(usize, Vec<f32>, Vec<f32>)> = Vec::with_capacity(WINDOWS_PER_MACRO);
    for k in 0..n_macros {
        // Gather sequentially (the source streams forward), then classify the
        // batch in parallel.
        buffers.clear();
        for i in 0..WINDOWS_PER_MACRO {
            let window_index = k * WINDOWS_PER_MACRO + i;
            let frame_idx = window_index + CENTER_OFFSET_FRAMES;
            if frame_idx >= n_frames {
                break;
            }
            let start_sample = window_index * frame_samples;
            let mut b1 = vec![0.0f32; win_len];
            let mut b2 = vec![0.0f32; win_len];
            source.fill(start_sample, &mut b1, &mut b2);
            buffers.push((frame_idx, b1, b2));
        }
        let results: Result<Vec<(usize, usize, f64)>, InferError> = buffers
            .par_iter()
            .map(|(frame_idx, b1, b2)| {
                let seg1 = SpectralSegment {
                    values: extractor.stft_window(b1),
                    origin_s: 0.0,
                    channel: 1,
                };
                let seg2 = SpectralSegment {
                    values: extractor.stft_window(b2),
                    origin_s: 0.0,
                    channel: 2,
                };
                let (class, confidence) = model.predict_one(&seg1, &seg2)?;
                Ok((*frame_idx, class, confidence))
            })
            .collect();
        for (frame_idx, class, confidence) in results? {
            frames[frame_idx] = FramePrediction {
                begin_s: frame_idx as f64 * FRAME_S,
                end_s: (frame_idx + 1) as f64 * FRAME_S,
                label: TargetLabel::from_id(class).expect("class id in range"),
                confidence,
            };
        }
    }
    debug_assert!(frames.len() as f64 * FRAME_S >= duration_s - 1e-9);
    Ok(frames)
}

/// A merged run of identical frame labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSpan {
    pub begin_s: f64,
    pub end_s: f64,
    pub label: TargetLabel,
}

/// Merge successive identical non-noise frame labels into call spans; noise
/// runs produce no entry.
pub fn merge_labels(frames: &[FramePrediction]) -> Result<Vec<LabeledSpan>, InferError> {
    for pair in frames.windows(2) {
        let gap = pair[1].begin_s - pair[0].end_s;
        if gap.abs() > 1e-9 {
            return Err(InferError::NonContiguousFrames {
                at_s: pair[1].begin_s,
                gap_s: gap,
            });
        }
    }
    let mut spans: Vec<LabeledSpan> = Vec::new();
    for f in frames {
        match spans.last_mut() {
            Some(last) if last.label == f.label && (f.begin_s - last.end_s).abs() < 1e-9 => {
                last.end_s = f.end_s;
            }
            _ => spans.push(LabeledSpan {
                begin_s: f.begin_s,
                end_s: f.end_s,
                label: f.label,
            }),
        }
    }
    Ok(spans.into_iter().filter(|s| !s.label.is_noise()).collect())
}

/// Separate a merged track into the two per-animal segment files, stripping
/// the caller suffix.
pub fn split_by_caller(track: &[LabeledSpan]) -> (SegmentFile, SegmentFile) {
    let mut entries1 = Vec::new();
    let mut entries2 = Vec::new();
    for span in track {
        if let TargetLabel::Call(call) = span.label {
            let entry = CallAnnotation {
                kind: call.kind,
                begin_s: span.begin_s,
                end_s: span.end_s,
            };
            match call.caller {
                Caller::Animal1 => entries1.push(entry),
                Caller::Animal2 => entries2.push(entry),
            }
        }
    }
    let file1 = SegmentFile::from_entries(Caller::Animal1, entries1)
        .expect("merged spans are ordered and disjoint");
    let file2 = SegmentFile::from_entries(Caller::Animal2, entries2)
        .expect("merged spans are ordered and disjoint");
    (file1, file2)
}

/// End-to-end streaming prediction from a WAV pair on disk (bounded memory).
pub fn predict_wav_pair_streaming(
    model: &TwoStreamModel<f32>,
    wav1: impl AsRef<Path>,
    wav2: impl AsRef<Path>,
    target_rate: u32,
) -> Result<Vec<FramePrediction>, InferError> {
    let mut source = streaming::StreamingWavPair::open(wav1, wav2, target_rate)?;
    predict_frames(model, &mut source)
}

/// Offline prediction over fully-loaded channels (identical output path).
pub fn predict_loaded_pair(
    model: &TwoStreamModel<f32>,
    ch1: &dsp::AudioChannel,
    ch2: &dsp::AudioChannel,
) -> Result<Vec<FramePrediction>, InferError> {
    let mut source = InMemoryPair { ch1, ch2 };
    predict_frames(model, &mut source)
}

pub mod streaming {
    //! Forward-only WAV pair reader with a bounded rolling buffer and
    //! on-the-fly linear resampling that reproduces the in-memory resampler
    //! sample for sample.

    use std::collections::VecDeque;
    use std::fs::File;
    use std::io::BufReader;
    use std::path::Path;

    use super::{InferError, WindowSource};
    use crate::dsp::{DspError, MAX_LENGTH_MISMATCH_S};

    enum SampleIter {
        I16(hound::WavIntoSamples<BufReader<File>, i16>),
        F32(hound::WavIntoSamples<BufReader<File>, f32>),
    }

    impl SampleIter {
        fn next_sample(&mut self) -> Option<f32> {
            match self {
                SampleIter::I16(it) => it.next().and_then(|r| r.ok()).map(|v| v as f32 / 32768.0),
                SampleIter::F32(it) => it.next().and_then(|r| r.ok()),
            }
        }
    }

    struct StreamingWav {
        iter: SampleIter,
        src_rate: u32,
        dst_rate: u32,
        n_src: usize,
        n_dst: usize,
        /// Rolling window of source samples; `front_idx` is the absolute
        /// index of `buf[0]`.
        buf: VecDeque<f32>,
        front_idx: usize,
        pulled: usize,
    }

    impl StreamingWav {
        fn open(path: &Path, dst_rate: u32) -> Result<Self, DspError> {
            let display = path.display().to_string();
            let reader = hound::WavReader::open(path).map_err(|source| DspError::Wav {
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
            let n_src = reader.len() as usize;
            let src_rate = spec.sample_rate;
            let iter = match (spec.sample_format, spec.bits_per_sample) {
                (hound::SampleFormat::Int, 16) => SampleIter::I16(reader.into_samples()),
                (hound::SampleFormat::Float, 32) => SampleIter::F32(reader.into_samples()),
                (fmt, bits) => {
                    return Err(DspError::UnsupportedEncoding {
                        path: display,
                        detail: format!("{fmt:?} {bits}-bit"),
                    })
                }
            };
            Ok(StreamingWav {
                iter,
                src_rate,
                dst_rate,
                n_src,
                n_dst: crate::dsp::resampled_len(n_src, src_rate, dst_rate),
                buf: VecDeque::new(),
                front_idx: 0,
                pulled: 0,
            })
        }

        fn ensure(&mut self, upto_src: usize) {
            while self.pulled <= upto_src && self.pulled < self.n_src {
                match self.iter.next_sample() {
                    Some(v) => {
                        self.buf.push_back(v);
                        self.pulled += 1;
                    }
                    None => break,
                }
            }
        }

        fn discard_below(&mut self, src_idx: usize) {
            while self.front_idx < src_idx && !self.buf.is_empty() {
                self.buf.pop_front();
                self.front_idx += 1;
            }
        }

        fn src_at(&self, idx: usize) -> f32 {
            debug_assert!(idx >= self.front_idx, "window source rewound past buffer");
            self.buf
                .get(idx - self.front_idx)
                .copied()
                .unwrap_or(0.0)
        }

        /// Target-rate sample `t`, matching `dsp::resample_linear` exactly.
        fn dst_sample(&mut self, t: usize) -> f32 {
            if t >= self.n_dst || self.n_src == 0 {
                return 0.0;
            }
            if self.src_rate == self.dst_rate {
                self.ensure(t);
                return self.src_at(t);
            }
            let step = self.src_rate as f64 / self.dst_rate as f64;
            let pos = t as f64 * step;
            let i0 = pos.floor() as usize;
            if i0 + 1 >= self.n_src {
                self.ensure(self.n_src - 1);
                return self.src_at(self.n_src - 1);
            }
            self.ensure(i0 + 1);
            let frac = (pos - i0 as f64) as f32;
            let x0 = self.src_at(i0);
            let x1 = self.src_at(i0 + 1);
            x0 + (x1 - x0) * frac
        }

        fn fill(&mut self, start_dst: usize, out: &mut [f32]) {
            let step = self.src_rate as f64 / self.dst_rate as f64;
            let needed_front = ((start_dst as f64 * step).floor() as usize).saturating_sub(2);
            self.discard_below(needed_front);
            for (i, o) in out.iter_mut().enumerate() {
                *o = self.dst_sample(start_dst + i);
            }
        }
    }

    /// Streamed aligned pair.
    pub struct StreamingWavPair {
        ch1: StreamingWav,
        ch2: StreamingWav,
        total: usize,
        dst_rate: u32,
    }

    impl StreamingWavPair {
        pub fn open(
            path1: impl AsRef<Path>,
            path2: impl AsRef<Path>,
            dst_rate: u32,
        ) -> Result<Self, InferError> {
            let ch1 = StreamingWav::open(path1.as_ref(), dst_rate)?;
            let ch2 = StreamingWav::open(path2.as_ref(), dst_rate)?;
            let diff_s = (ch1.n_dst as f64 - ch2.n_dst as f64).abs() / dst_rate as f64;
            if diff_s > MAX_LENGTH_MISMATCH_S {
                return Err(InferError::Dsp(DspError::LengthMismatch {
                    len1_s: ch1.n_dst as f64 / dst_rate as f64,
                    len2_s: ch2.n_dst as f64 / dst_rate as f64,
                }));
            }
            let total = ch1.n_dst.max(ch2.n_dst);
            Ok(StreamingWavPair {
                ch1,
                ch2,
                total,
                dst_rate,
            })
        }
    }

    impl WindowSource for StreamingWavPair {
        fn sample_rate(&self) -> u32 {
            self.dst_rate
        }

        fn total_samples(&self) -> usize {
            self.total
        }

        fn fill(&mut self, start_sample: usize, ch1: &mut [f32], ch2: &mut [f32]) {
            self.ch1.fill(start_sample, ch1);
            self.ch2.fill(start_sample, ch2);
        }
    }
}
