//! Synthetic dual-channel corpora for tests, benchmarks, and demos.
//!
//! Four tone/chirp signatures stand in for call types. A call is written to
//! both channels with a 3:1 amplitude ratio favoring the caller's recorder;
//! the far channel is additionally low-passed, mimicking distance damping.
//! Independent per-channel noise floors make caller identity recoverable
//! even after per-segment max-normalization.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{write_wav_mono16, DspError};
use crate::taxonomy::{CallAnnotation, CallKind, Caller, SegmentFile};
use crate::train::SessionPaths;

/// Caller-to-far-channel amplitude ratio.
pub const AMP_RATIO: f32 = 3.0;

/// The four synthetic call signatures and the kinds they are labeled as.
pub const SYNTH_KINDS: [CallKind; 4] = [
    CallKind::Trill,
    CallKind::Phee,
    CallKind::Twitter,
    CallKind::Chirp,
];

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub sample_rate_hz: u32,
    pub duration_s: f64,
    /// Peak amplitude on the caller's channel.
    pub call_gain: f32,
    /// White-noise floor per channel.
    pub noise_rms: f32,
    /// Gap range between calls, seconds.
    pub gap_range_s: (f64, f64),
    /// Call length range, seconds.
    pub call_range_s: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sample_rate_hz: 48_000,
            duration_s: 40.0,
            call_gain: 0.40,
            noise_rms: 0.03,
            gap_range_s: (0.30, 1.00),
            call_range_s: (0.40, 0.75),
        }
    }
}

/// One generated session: two channel signals plus exact annotations.
pub struct SynthSession {
    pub ch1: Vec<f32>,
    pub ch2: Vec<f32>,
    pub ann1: SegmentFile,
    pub ann2: SegmentFile,
    pub sample_rate_hz: u32,
}

fn signature_sample(kind: CallKind, t: f64, dur: f64) -> f64 {
    // Distinct spectral signatures, all with a strong upper harmonic so that
    // the far channel's distance low-pass visibly reshapes the (per-segment
    // normalized) spectrum.
    let with_harmonic = |phase: f64| (2.0 * PI * phase).sin() + 0.5 * (2.0 * PI * 2.0 * phase).sin();
    match kind {
        // warbling band around 4 kHz
        CallKind::Trill => {
            let fm = 400.0 * (2.0 * PI * 28.0 * t).sin();
            with_harmonic(4000.0 * t + fm * t)
        }
        // steady 7 kHz tone
        CallKind::Phee => with_harmonic(7000.0 * t),
        // rising chirp 3 -> 6 kHz
        CallKind::Twitter => {
            let f0 = 3000.0;
            let rate = 3000.0 / dur;
            with_harmonic(f0 * t + 0.5 * rate * t * t)
        }
        // falling chirp 10 -> 5 kHz
        CallKind::Chirp => {
            let f0 = 10_000.0;
            let rate = -5000.0 / dur;
            (2.0 * PI * (f0 * t + 0.5 * rate * t * t)).sin()
        }
        _ => 0.0,
    }
}

/// Attack/release envelope with 10 ms cosine ramps.
fn envelope(t: f64, dur: f64) -> f64 {
    let ramp = 0.01f64.min(dur / 4.0);
    if t < ramp {
        0.5 * (1.0 - (PI * t / ramp).cos())
    } else if t > dur - ramp {
        0.5 * (1.0 - (PI * (dur - t) / ramp).cos())
    } else {
        1.0
    }
}

/// First-order low-pass, used for the far channel.
fn one_pole_lowpass(x: &[f32], cutoff_hz: f64, rate: u32) -> Vec<f32> {
    let dt = 1.0 / rate as f64;
    let rc = 1.0 / (2.0 * PI * cutoff_hz);
    let alpha = (dt / (rc + dt)) as f32;
    let mut out = Vec::with_capacity(x.len());
    let mut y = 0.0f32;
    for &v in x {
        y += alpha * (v - y);
        out.push(y);
    }
    out
}

/// Generate one session deterministically from a seed.
pub fn generate_session(cfg: &SynthConfig, seed: u64) -> SynthSession {
    let rate = cfg.sample_rate_hz;
    let n = (cfg.duration_s * rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut ch1 = vec![0.0f32; n];
    let mut ch2 = vec![0.0f32; n];
    let mut entries1 = Vec::new();
    let mut entries2 = Vec::new();

    // Calls never start before 0.5s or run into the last 0.5s.
    let mut cursor = 0.5f64;
    while cursor < cfg.duration_s - 1.0 {
        let kind = SYNTH_KINDS[rng.gen_range(0..SYNTH_KINDS.len())];
        let caller = if rng.gen::<bool>() {
            Caller::Animal1
        } else {
            Caller::Animal2
        };
        let dur = rng.gen_range(cfg.call_range_s.0..cfg.call_range_s.1);
        let dur = dur.min(cfg.duration_s - 0.5 - cursor);
        if dur < 0.1 {
            break;
        }
        // Millisecond-aligned annotation boundaries.
        let begin = (cursor * 1000.0).round() / 1000.0;
        let end = ((cursor + dur) * 1000.0).round() / 1000.0;

        let start_sample = (begin * rate as f64).round() as usize;
        let n_call = ((end - begin) * rate as f64).round() as usize;
        let mut near = Vec::with_capacity(n_call);
        for i in 0..n_call {
            let t = i as f64 / rate as f64;
            let v = signature_sample(kind, t, end - begin) * envelope(t, end - begin);
            near.push((v * cfg.call_gain as f64) as f32);
        }
        let far_raw: Vec<f32> = near.iter().map(|v| v / AMP_RATIO).collect();
        // Two poles at 3.5 kHz: distance damping that survives per-segment
        // normalization by changing the harmonic balance.
        let far = one_pole_lowpass(&one_pole_lowpass(&far_raw, 3500.0, rate), 3500.0, rate);

        let (near_ch, far_ch) = match caller {
            Caller::Animal1 => (&mut ch1, &mut ch2),
            Caller::Animal2 => (&mut ch2, &mut ch1),
        };
        for i in 0..n_call {
            if start_sample + i < n {
                near_ch[start_sample + i] += near[i];
                far_ch[start_sample + i] += far[i];
            }
        }
        let ann = CallAnnotation::new(kind, begin, end).expect("valid synth interval");
        match caller {
            Caller::Animal1 => entries1.push(ann),
            Caller::Animal2 => entries2.push(ann),
        }
        cursor = end + rng.gen_range(cfg.gap_range_s.0..cfg.gap_range_s.1);
    }

    // Independent noise floors.
    for v in ch1.iter_mut() {
        *v += cfg.noise_rms * (rng.gen::<f32>() * 2.0 - 1.0) * 1.732;
    }
    for v in ch2.iter_mut() {
        *v += cfg.noise_rms * (rng.gen::<f32>() * 2.0 - 1.0) * 1.732;
    }

    SynthSession {
        ch1,
        ch2,
        ann1: SegmentFile::from_entries(Caller::Animal1, entries1).expect("disjoint by build"),
        ann2: SegmentFile::from_entries(Caller::Animal2, entries2).expect("disjoint by build"),
        sample_rate_hz: rate,
    }
}

/// Write a generated session to disk as `<id>_ch{1,2}.wav` +
/// `<id>_ann{1,2}.csv`; returns the manifest entry.
pub fn write_session(
    dir: impl AsRef<Path>,
    id: &str,
    session: &SynthSession,
) -> Result<SessionPaths, DspError> {
    let dir = dir.as_ref();
    let wav1 = dir.join(format!("{id}_ch1.wav"));
    let wav2 = dir.join(format!("{id}_ch2.wav"));
    let ann1: PathBuf = dir.join(format!("{id}_ann1.csv"));
    let ann2: PathBuf = dir.join(format!("{id}_ann2.csv"));
    write_wav_mono16(&wav1, &session.ch1, session.sample_rate_hz)?;
    write_wav_mono16(&wav2, &session.ch2, session.sample_rate_hz)?;
    std::fs::write(&ann1, session.ann1.to_csv_string())?;
    std::fs::write(&ann2, session.ann2.to_csv_string())?;
    Ok(SessionPaths {
        id: id.to_string(),
        wav1,
        wav2,
        ann1,
        ann2,
    })
}

/// Generate `n_sessions` sessions and a JSON-lines manifest under `dir`;
/// returns the manifest path.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    cfg: &SynthConfig,
    n_sessions: usize,
    seed: u64,
) -> Result<PathBuf, DspError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut lines = String::new();
    for s in 0..n_sessions {
        let session = generate_session(cfg, seed.wrapping_add(s as u64));
        let paths = write_session(dir, &format!("session{s}"), &session)?;
        lines.push_str(&serde_json::to_string(&paths).map_err(std::io::Error::from)?);
        lines.push('\n');
    }
    let manifest = dir.join("manifest.jsonl");
    std::fs::write(&manifest, lines)?;
    Ok(manifest)
}
