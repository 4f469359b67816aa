//! Supervised dataset assembly from dual audio + per-animal annotations, and
//! the mini-batch training loop.
//!
//! A window's target comes from annotation overlap with only the middle
//! 150 ms of the 500 ms window; long noise stretches are thinned by keeping
//! each noise window with probability `noise_keep`, and surviving examples
//! are roll-shift augmented once per epoch.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{
    self, load_wav_pair, roll_shift, segment_grid, AudioChannel, DspError, SegmentExtractor,
    SpectralSegment,
};
use crate::evalkit::{report_from_counts, MetricCounts, MetricReport};
use crate::models::{ModelError, TwoStreamModel};
use crate::nncore::{AdamConfig, AdamState, NnError, Tape};
use crate::taxonomy::{
    CallLabel, Caller, ParseMode, SegmentFile, TargetLabel, TaxonomyError,
};

/// Width of the label-deciding center slice of each window.
pub const MIDDLE_S: f64 = 0.15;

/// Examples per parallel gradient chunk. Fixed so that batch gradients are
/// bit-identical for any worker count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty corpus: no training windows were produced")]
    EmptyCorpus,
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub window_s: f64,
    pub shift_s: f64,
    pub noise_keep: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window_s: dsp::WINDOW_S,
            shift_s: 0.15,
            noise_keep: 0.2,
            adam: AdamConfig::default(),
            epochs: 20,
            batch: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.noise_keep > 0.0 && self.noise_keep <= 1.0) || self.shift_s <= 0.0 {
            return Err(TrainError::Manifest {
                line: 0,
                detail: format!(
                    "invalid config: noise_keep {} / shift {}",
                    self.noise_keep, self.shift_s
                ),
            });
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SessionPaths {
    pub id: String,
    pub wav1: PathBuf,
    pub wav2: PathBuf,
    pub ann1: PathBuf,
    pub ann2: PathBuf,
}

/// JSON-lines corpus manifest; relative paths resolve against the manifest's
/// directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SessionPaths>, TrainError> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = std::fs::File::open(path)?;
    let mut sessions = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut s: SessionPaths =
            serde_json::from_str(&line).map_err(|e| TrainError::Manifest {
                line: i + 1,
                detail: e.to_string(),
            })?;
        for p in [&mut s.wav1, &mut s.wav2, &mut s.ann1, &mut s.ann2] {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
        sessions.push(s);
    }
    Ok(sessions)
}

/// A fully-loaded recording session.
pub struct Session {
    pub id: String,
    pub ch1: AudioChannel,
    pub ch2: AudioChannel,
    pub ann1: SegmentFile,
    pub ann2: SegmentFile,
}

impl Session {
    pub fn duration_s(&self) -> f64 {
        self.ch1.duration_s().max(self.ch2.duration_s())
    }
}

pub fn load_session(paths: &SessionPaths, sample_rate: u32) -> Result<Session, TrainError> {
    let (ch1, ch2) = load_wav_pair(&paths.wav1, &paths.wav2, sample_rate)?;
    let (ann1, _) = SegmentFile::parse(
        std::io::BufReader::new(std::fs::File::open(&paths.ann1)?),
        Caller::Animal1,
        ParseMode::Lenient,
    )?;
    let (ann2, _) = SegmentFile::parse(
        std::io::BufReader::new(std::fs::File::open(&paths.ann2)?),
        Caller::Animal2,
        ParseMode::Lenient,
    )?;
    Ok(Session {
        id: paths.id.clone(),
        ch1,
        ch2,
        ann1,
        ann2,
    })
}

/// One labeled window: both channel segments plus the target class.
pub struct TrainExample {
    pub start_s: f64,
    pub seg1: SpectralSegment,
    pub seg2: SpectralSegment,
    pub target: TargetLabel,
}

fn overlap(lo: f64, hi: f64, begin: f64, end: f64) -> f64 {
    (hi.min(end) - lo.max(begin)).max(0.0)
}

/// Label a window by annotation overlap with its middle 150 ms. When both
/// animals' calls overlap, the larger overlap wins (animal 1 on ties) and
/// the conflict is reported.
pub fn assign_target_label(
    start_s: f64,
    window_s: f64,
    ann1: &SegmentFile,
    ann2: &SegmentFile,
) -> (TargetLabel, bool) {
    let mid_lo = start_s + (window_s - MIDDLE_S) / 2.0;
    let mid_hi = mid_lo + MIDDLE_S;
    let best_of = |ann: &SegmentFile| -> (f64, Option<CallLabel>) {
        let mut total = 0.0f64;
        let mut best_ov = 0.0f64;
        let mut best = None;
        for e in ann.entries() {
            let ov = overlap(mid_lo, mid_hi, e.begin_s, e.end_s);
            if ov > 0.0 {
                total += ov;
                if ov > best_ov {
                    best_ov = ov;
                    best = Some(CallLabel::new(e.kind, ann.animal));
                }
            }
        }
        (total, best)
    };
    let (t1, l1) = best_of(ann1);
    let (t2, l2) = best_of(ann2);
    match (l1, l2) {
        (None, None) => (TargetLabel::Noise, false),
        (Some(l), None) => (TargetLabel::Call(l), false),
        (None, Some(l)) => (TargetLabel::Call(l), false),
        (Some(a), Some(b)) => {
            // simultaneous calls: larger middle-interval overlap wins
            let winner = if t2 > t1 { b } else { a };
            (TargetLabel::Call(winner), true)
        }
    }
}

/// Build labeled examples for one session over the sliding training grid.
/// Returns the examples plus the simultaneous-call conflict count.
pub fn build_examples(
    session: &Session,
    extractor: &SegmentExtractor,
    cfg: &TrainConfig,
) -> Result<(Vec<TrainExample>, usize), TrainError> {
    let duration = session.duration_s();
    let starts = segment_grid(duration, cfg.window_s, cfg.shift_s)?;
    let results: Result<Vec<(TrainExample, bool)>, TrainError> = starts
        .par_iter()
        .map(|&start_s| {
            let seg1 = extractor.extract(&session.ch1, start_s, 1)?;
            let seg2 = extractor.extract(&session.ch2, start_s, 2)?;
            let (target, conflict) =
                assign_target_label(start_s, cfg.window_s, &session.ann1, &session.ann2);
            Ok((
                TrainExample {
                    start_s,
                    seg1,
                    seg2,
                    target,
                },
                conflict,
            ))
        })
        .collect();
    let results = results?;
    let conflicts = results.iter().filter(|(_, c)| *c).count();
    Ok((results.into_iter().map(|(e, _)| e).collect(), conflicts))
}

/// Thin the noise class: every call example is kept, each noise example
/// survives independently with probability `keep`.
pub fn subsample_noise(
    examples: Vec<TrainExample>,
    keep: f64,
    seed: u64,
) -> Vec<TrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples
        .into_iter()
        .filter(|ex| {
            if ex.target.is_noise() {
                rng.gen::<f64>() < keep
            } else {
                true
            }
        })
        .collect()
}

/// Per-epoch log line.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub dev_fscore: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub dev_report: Option<MetricReport>,
    pub conflicts: usize,
    pub warnings: Vec<String>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean cross-entropy of a model over labeled examples (no augmentation).
pub fn mean_loss(model: &TwoStreamModel<f32>, examples: &[TrainExample]) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let losses: Result<Vec<f64>, TrainError> = examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape);
            let logits = model.forward_segments(&mut tape, &bound, &ex.seg1, &ex.seg2)?;
            let loss = tape.cross_entropy(logits, ex.target.id())?;
            Ok(tape.scalar_value(loss))
        })
        .collect();
    Ok(losses?.iter().sum::<f64>() / examples.len() as f64)
}

/// Window-level report over labeled examples: full 17-class equality,
/// counted with the standard metric formulas. Also returns plain accuracy.
pub fn window_report(
    model: &TwoStreamModel<f32>,
    examples: &[TrainExample],
) -> Result<(MetricReport, f64), TrainError> {
    let preds: Result<Vec<usize>, TrainError> = examples
        .par_iter()
        .map(|ex| Ok(model.predict_one(&ex.seg1, &ex.seg2)?.0))
        .collect();
    let preds = preds?;
    let mut counts = MetricCounts::default();
    let mut correct = 0u64;
    for (ex, &p) in examples.iter().zip(&preds) {
        let hyp = TargetLabel::from_id(p).expect("argmax id in range");
        if hyp == ex.target {
            correct += 1;
        }
        if ex.target.is_noise() {
            counts.n_noise += 1;
            if hyp.is_noise() {
                counts.c_noise += 1;
            } else {
                counts.e_noise += 1;
            }
        } else {
            counts.n_call += 1;
            if hyp == ex.target {
                counts.c_call += 1;
            }
        }
    }
    let acc = if examples.is_empty() {
        0.0
    } else {
        correct as f64 / examples.len() as f64
    };
    Ok((report_from_counts(counts), acc))
}

/// The assembled training and development example sets.
pub struct PreparedCorpus {
    pub train: Vec<TrainExample>,
    pub dev: Vec<TrainExample>,
    pub conflicts: usize,
    pub warnings: Vec<String>,
}

/// Assemble examples from loaded sessions: the last session is held out as
/// the development split (when more than one is given), noise is thinned
/// once per run.
pub fn prepare_corpus(
    sessions: &[Session],
    cfg: &TrainConfig,
) -> Result<PreparedCorpus, TrainError> {
    cfg.validate()?;
    if sessions.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut warnings = Vec::new();
    let sample_rate = sessions[0].ch1.sample_rate_hz;
    let extractor = SegmentExtractor::new(sample_rate)?;

    let (train_sessions, dev_session) = if sessions.len() >= 2 {
        (&sessions[..sessions.len() - 1], &sessions[sessions.len() - 1])
    } else {
        warnings.push("single session: development split equals the training data".to_string());
        (sessions, &sessions[0])
    };

    let mut examples = Vec::new();
    let mut conflicts = 0;
    for s in train_sessions {
        let (mut ex, c) = build_examples(s, &extractor, cfg)?;
        conflicts += c;
        examples.append(&mut ex);
    }
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    // Noise thinning is drawn once per run, not per epoch.
    let examples = subsample_noise(examples, cfg.noise_keep, mix(cfg.seed, 0xA5, 0));
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if examples.iter().all(|e| e.target.is_noise()) {
        warnings.push("degenerate corpus: every training window is noise".to_string());
    }
    let (dev_examples, _) = build_examples(dev_session, &extractor, cfg)?;
    Ok(PreparedCorpus {
        train: examples,
        dev: dev_examples,
        conflicts,
        warnings,
    })
}

/// Train a model in place on loaded sessions; see [`prepare_corpus`] for the
/// split policy. The best-dev-F parameters are restored into the model.
pub fn train(
    model: &mut TwoStreamModel<f32>,
    sessions: &[Session],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let corpus = prepare_corpus(sessions, cfg)?;
    train_prepared(model, &corpus, cfg)
}

/// The training loop proper, over an already-assembled corpus.
pub fn train_prepared(
    model: &mut TwoStreamModel<f32>,
    corpus: &PreparedCorpus,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let examples = &corpus.train;
    let dev_examples = &corpus.dev;
    let conflicts = corpus.conflicts;
    let warnings = corpus.warnings.clone();
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }

    let mut adam = AdamState::new(model.store(), cfg.adam);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<ArrayD<f32>>)> = None;

    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.adam.lr_for_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x51, epoch as u64));
        shuffle(&mut order, &mut rng);

        let mut epoch_loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch.max(1)) {
            let (grads, loss_sum) = batch_gradients(model, examples, batch, cfg.seed, epoch)?;
            epoch_loss_sum += loss_sum;
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Option<ArrayD<f32>>> = grads
                .into_iter()
                .map(|g| g.map(|a| a.mapv(|v| (v as f64 * scale) as f32)))
                .collect();
            adam.step(model.store_mut(), &grads, lr)?;
        }
        let loss = epoch_loss_sum / examples.len() as f64;

        let (dev_rep, _) = window_report(model, dev_examples)?;
        let dev_fscore = dev_rep.f;
        log.push(EpochLog {
            epoch,
            lr,
            loss,
            dev_fscore,
        });
        let improved = best.as_ref().map_or(true, |(f, _, _)| dev_fscore > *f);
        if improved {
            best = Some((dev_fscore, epoch, model.store().snapshot()));
        }
    }

    let (_, best_epoch, snapshot) = best.expect("at least one epoch");
    model.store_mut().restore(&snapshot);
    let dev_report = window_report(model, dev_examples).ok().map(|(r, _)| r);
    Ok(TrainOutcome {
        log,
        best_epoch,
        dev_report,
        conflicts,
        warnings,
    })
}

/// Fisher–Yates with our seeded generator.
fn shuffle<R: Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Sum of per-example gradients and losses over one batch. Work is split
/// into fixed-size chunks reduced in order, so results do not depend on the
/// worker count.
fn batch_gradients(
    model: &TwoStreamModel<f32>,
    examples: &[TrainExample],
    batch: &[usize],
    seed: u64,
    epoch: usize,
) -> Result<(Vec<Option<ArrayD<f32>>>, f64), TrainError> {
    let chunk_results: Result<Vec<(Vec<Option<ArrayD<f32>>>, f64)>, TrainError> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut acc: Vec<Option<ArrayD<f32>>> = vec![None; model.store().len()];
            let mut loss_sum = 0.0f64;
            for &idx in chunk {
                let ex = &examples[idx];
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 0x1000_0000 + idx as u64));
                let s1 = roll_shift(&ex.seg1, &mut rng);
                let s2 = roll_shift(&ex.seg2, &mut rng);
                let mut tape = Tape::<f32>::new();
                let bound = model.bind(&mut tape);
                let logits = model.forward_segments(&mut tape, &bound, &s1, &s2)?;
                let loss = tape.cross_entropy(logits, ex.target.id())?;
                loss_sum += tape.scalar_value(loss);
                let mut grads = tape.backward(loss)?;
                for (i, var) in bound.iter().enumerate() {
                    if let Some(g) = grads.take(*var) {
                        match &mut acc[i] {
                            Some(a) => *a += &g,
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
            Ok((acc, loss_sum))
        })
        .collect();

    let mut total: Vec<Option<ArrayD<f32>>> = vec![None; model.store().len()];
    let mut loss_total = 0.0f64;
    for (chunk_acc, loss) in chunk_results? {
        loss_total += loss;
        for (slot, g) in total.iter_mut().zip(chunk_acc) {
            match (slot.as_mut(), g) {
                (Some(a), Some(b)) => *a += &b,
                (None, Some(b)) => *slot = Some(b),
                _ => {}
            }
        }
    }
    Ok((total, loss_total))
}
