//! Streaming prediction must be exactly equivalent to the naive offline
//! sliding-window loop — same labels, same confidences, bit for bit — both
//! from memory and when streamed from disk with on-the-fly resampling.

use mvx_core::dsp::{
    extract_segment, load_wav_pair, write_wav_mono16, AudioChannel,
};
use mvx_core::infer::{
    predict_loaded_pair, predict_wav_pair_streaming, stream_plan, FramePrediction,
    CENTER_OFFSET_FRAMES, FRAME_S,
};
use mvx_core::models::{BackboneConfig, TwoStreamConfig, TwoStreamModel, ViTConfig};
use mvx_core::synth::{generate_session, SynthConfig};
use mvx_core::taxonomy::TargetLabel;

fn tiny_model() -> TwoStreamModel<f32> {
    TwoStreamModel::<f32>::new(
        TwoStreamConfig {
            backbone: BackboneConfig::Vit(ViTConfig {
                input_h: 257,
                input_w: 256,
                patch: 16,
                dim: 16,
                blocks: 1,
                heads: 2,
                ffn: 32,
            }),
            stream_proj: 8,
            n_classes: TargetLabel::COUNT,
        },
        99,
    )
    .unwrap()
}

/// The reference implementation: plain per-window loop over the stream plan,
/// one extraction + forward per window, center-aligned frame assignment.
fn naive_offline(
    model: &TwoStreamModel<f32>,
    ch1: &AudioChannel,
    ch2: &AudioChannel,
) -> Vec<FramePrediction> {
    let rate = ch1.sample_rate_hz;
    let frame_samples = (rate / 20) as usize;
    let total = ch1.samples.len().max(ch2.samples.len());
    let n_frames = total.div_ceil(frame_samples);
    let duration = total as f64 / rate as f64;
    let mut frames: Vec<FramePrediction> = (0..n_frames)
        .map(|j| FramePrediction {
            begin_s: j as f64 * FRAME_S,
            end_s: (j + 1) as f64 * FRAME_S,
            label: TargetLabel::Noise,
            confidence: 1.0,
        })
        .collect();
    for (k, batch) in stream_plan(duration).unwrap().iter().enumerate() {
        for (i, &start_s) in batch.iter().enumerate() {
            let frame_idx = k * 50 + i + CENTER_OFFSET_FRAMES;
            if frame_idx >= n_frames {
                continue;
            }
            let seg1 = extract_segment(ch1, start_s, 1).unwrap();
            let seg2 = extract_segment(ch2, start_s, 2).unwrap();
            let (class, confidence) = model.predict_one(&seg1, &seg2).unwrap();
            frames[frame_idx] = FramePrediction {
                begin_s: frame_idx as f64 * FRAME_S,
                end_s: (frame_idx + 1) as f64 * FRAME_S,
                label: TargetLabel::from_id(class).unwrap(),
                confidence,
            };
        }
    }
    frames
}

fn assert_frames_identical(a: &[FramePrediction], b: &[FramePrediction]) {
    assert_eq!(a.len(), b.len(), "frame counts differ");
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.label, y.label, "label at {:.2}s", x.begin_s);
        assert_eq!(
            x.confidence.to_bits(),
            y.confidence.to_bits(),
            "confidence at {:.2}s",
            x.begin_s
        );
    }
}

#[test]
fn streaming_equals_naive_offline_loop() {
    let rate = 24_000;
    let synth = generate_session(
        &SynthConfig {
            sample_rate_hz: rate,
            duration_s: 7.3, // deliberately not a macro-segment multiple
            ..SynthConfig::default()
        },
        5,
    );
    let ch1 = AudioChannel {
        samples: synth.ch1,
        sample_rate_hz: rate,
    };
    let ch2 = AudioChannel {
        samples: synth.ch2,
        sample_rate_hz: rate,
    };
    let model = tiny_model();

    let expected = naive_offline(&model, &ch1, &ch2);
    let got = predict_loaded_pair(&model, &ch1, &ch2).unwrap();
    assert_eq!(got.len(), (7.3f64 / FRAME_S).ceil() as usize);
    assert_frames_identical(&expected, &got);

    // frames tile the recording without gaps
    for pair in got.windows(2) {
        assert!((pair[1].begin_s - pair[0].end_s).abs() < 1e-9);
    }
    // leading frames (before any window center lands) are noise
    for f in &got[..CENTER_OFFSET_FRAMES] {
        assert!(f.label.is_noise());
    }
}

#[test]
fn disk_streaming_equals_in_memory() {
    let rate = 24_000;
    let dir = tempfile::tempdir().unwrap();
    let synth = generate_session(
        &SynthConfig {
            sample_rate_hz: rate,
            duration_s: 6.0,
            ..SynthConfig::default()
        },
        11,
    );
    let w1 = dir.path().join("a.wav");
    let w2 = dir.path().join("b.wav");
    write_wav_mono16(&w1, &synth.ch1, rate).unwrap();
    write_wav_mono16(&w2, &synth.ch2, rate).unwrap();

    let model = tiny_model();
    let (ch1, ch2) = load_wav_pair(&w1, &w2, rate).unwrap();
    let offline = predict_loaded_pair(&model, &ch1, &ch2).unwrap();
    let streamed = predict_wav_pair_streaming(&model, &w1, &w2, rate).unwrap();
    assert_frames_identical(&offline, &streamed);
}

#[test]
fn disk_streaming_with_resampling_equals_in_memory() {
    let src_rate = 32_000;
    let dst_rate = 24_000;
    let dir = tempfile::tempdir().unwrap();
    let synth = generate_session(
        &SynthConfig {
            sample_rate_hz: src_rate,
            duration_s: 5.5,
            ..SynthConfig::default()
        },
        13,
    );
    let w1 = dir.path().join("a.wav");
    let w2 = dir.path().join("b.wav");
    write_wav_mono16(&w1, &synth.ch1, src_rate).unwrap();
    write_wav_mono16(&w2, &synth.ch2, src_rate).unwrap();

    let model = tiny_model();
    let (ch1, ch2) = load_wav_pair(&w1, &w2, dst_rate).unwrap();
    let offline = predict_loaded_pair(&model, &ch1, &ch2).unwrap();
    let streamed = predict_wav_pair_streaming(&model, &w1, &w2, dst_rate).unwrap();
    assert_frames_identical(&offline, &streamed);
}
