//! Evaluation protocol: noise filling, 50 ms discretization, and the six
//! count-based scores over hypothesis/reference segment files.
//!
//! Counting happens per animal on the caller-less 9-symbol alphabet; a pair
//! report sums the raw counts of both animals before applying the score
//! formulas (count aggregation, not score averaging).

use serde::Serialize;
use thiserror::Error;

use crate::taxonomy::{KindLabel, SegmentFile, TaxonomyError};

/// Discretization quantum in seconds.
pub const UNIT_S: f64 = 0.05;

/// Maximum hyp/ref length difference (in units) tolerated by truncation.
pub const MAX_LENGTH_SLACK: usize = 2;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("entry ending at {end_s:.3}s exceeds the track duration {duration_s:.3}s")]
    EntryBeyondDuration { end_s: f64, duration_s: f64 },
    #[error("label sequences differ by {diff} units ({hyp} vs {reference}); refusing to truncate more than {MAX_LENGTH_SLACK}")]
    LengthMismatch {
        hyp: usize,
        reference: usize,
        diff: usize,
    },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// One span of a gap-free track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSpan {
    pub begin_s: f64,
    pub end_s: f64,
    pub label: KindLabel,
}

/// A gap-free labeling of `[0, duration)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    spans: Vec<TrackSpan>,
    duration_s: f64,
}

impl Track {
    pub fn spans(&self) -> &[TrackSpan] {
        &self.spans
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }
}

/// Fill the gaps of a segment file with noise spans so that every instant of
/// `[0, duration_s)` carries exactly one label.
pub fn fill_noise(sf: &SegmentFile, duration_s: f64) -> Result<Track, EvalError> {
    let mut spans = Vec::with_capacity(sf.len() * 2 + 1);
    let mut cursor = 0.0f64;
    for e in sf.entries() {
        if e.end_s > duration_s + 1e-9 {
            return Err(EvalError::EntryBeyondDuration {
                end_s: e.end_s,
                duration_s,
            });
        }
        if e.begin_s > cursor + 1e-12 {
            spans.push(TrackSpan {
                begin_s: cursor,
                end_s: e.begin_s,
                label: KindLabel::Noise,
            });
        }
        spans.push(TrackSpan {
            begin_s: e.begin_s,
            end_s: e.end_s,
            label: KindLabel::Call(e.kind),
        });
        cursor = e.end_s;
    }
    if cursor < duration_s - 1e-12 {
        spans.push(TrackSpan {
            begin_s: cursor,
            end_s: duration_s,
            label: KindLabel::Noise,
        });
    }
    Ok(Track {
        spans,
        duration_s,
    })
}

/// A 50 ms-unit label sequence starting at time 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSequence {
    pub labels: Vec<KindLabel>,
}

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Number of 50 ms units covering a duration.
pub fn unit_count(duration_s: f64) -> usize {
    (duration_s / UNIT_S - 1e-9).ceil().max(0.0) as usize
}

/// Discretize a gap-free track: unit `u` takes the label covering its
/// midpoint `(u + 0.5) · 50 ms`. Midpoints beyond the track read as noise.
pub fn discretize(track: &Track, duration_s: f64) -> LabelSequence {
    let n = unit_count(duration_s);
    let mut labels = Vec::with_capacity(n);
    let mut cursor = 0usize;
    for u in 0..n {
        let mid = (u as f64 + 0.5) * UNIT_S;
        while cursor < track.spans.len() && track.spans[cursor].end_s <= mid {
            cursor += 1;
        }
        let label = track
            .spans
            .get(cursor)
            .filter(|s| s.begin_s <= mid && mid < s.end_s)
            .map_or(KindLabel::Noise, |s| s.label);
        labels.push(label);
    }
    LabelSequence { labels }
}

/// Raw positional counts over an aligned hyp/ref pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MetricCounts {
    /// Positions correct as noise.
    pub c_noise: u64,
    /// Positions correct as the same call kind.
    pub c_call: u64,
    /// Positions predicted as any call but annotated noise.
    pub e_noise: u64,
    /// Reference noise positions.
    pub n_noise: u64,
    /// Reference call positions.
    pub n_call: u64,
}

impl MetricCounts {
    pub fn c_all(&self) -> u64 {
        self.c_noise + self.c_call
    }

    pub fn n_all(&self) -> u64 {
        self.n_noise + self.n_call
    }

    pub fn accumulate(&mut self, other: &MetricCounts) {
        self.c_noise += other.c_noise;
        self.c_call += other.c_call;
        self.e_noise += other.e_noise;
        self.n_noise += other.n_noise;
        self.n_call += other.n_call;
    }

    /// Count one aligned position.
    pub fn observe(&mut self, hyp: KindLabel, reference: KindLabel) {
        if reference.is_noise() {
            self.n_noise += 1;
            if hyp.is_noise() {
                self.c_noise += 1;
            } else {
                self.e_noise += 1;
            }
        } else {
            self.n_call += 1;
            if hyp == reference {
                self.c_call += 1;
            }
        }
    }
}

/// All six scores plus the raw counts and degeneracy flags.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub noise_acc: f64,
    pub call_acc: f64,
    pub total_acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub c_noise: u64,
    pub c_call: u64,
    pub c_all: u64,
    pub e_noise: u64,
    pub n_noise: u64,
    pub n_call: u64,
    pub n_all: u64,
    /// Metrics whose denominator was 0 (reported as 0 by convention).
    pub degenerate: Vec<String>,
    /// Units dropped to align hyp/ref lengths (0 when lengths matched).
    pub truncated_units: usize,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn fscore(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    }
}

/// Apply the score formulas to raw counts.
pub fn report_from_counts(counts: MetricCounts) -> MetricReport {
    let mut degenerate = Vec::new();
    let mut ratio = |name: &str, num: u64, den: u64| -> f64 {
        if den == 0 {
            degenerate.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let noise_acc = ratio("noise_acc", counts.c_noise, counts.n_noise);
    // call accuracy and recall share numerator and denominator
    let call_acc = ratio("call_acc", counts.c_call, counts.n_call);
    let total_acc = ratio("total_acc", counts.c_all(), counts.n_all());
    let precision = ratio("precision", counts.c_call, counts.c_call + counts.e_noise);
    let recall = call_acc;
    let f = fscore(precision, recall);
    if precision + recall == 0.0 {
        degenerate.push("f".to_string());
    }
    debug_assert_eq!(call_acc.to_bits(), recall.to_bits());
    MetricReport {
        noise_acc,
        call_acc,
        total_acc,
        precision,
        recall,
        f,
        c_noise: counts.c_noise,
        c_call: counts.c_call,
        c_all: counts.c_all(),
        e_noise: counts.e_noise,
        n_noise: counts.n_noise,
        n_call: counts.n_call,
        n_all: counts.n_all(),
        degenerate,
        truncated_units: 0,
    }
}

/// Score a hypothesis sequence against a reference. Length differences up to
/// [`MAX_LENGTH_SLACK`] units are truncated (and recorded); larger ones are
/// errors.
pub fn compute_metrics(
    hyp: &LabelSequence,
    reference: &LabelSequence,
) -> Result<MetricReport, EvalError> {
    let diff = hyp.len().abs_diff(reference.len());
    if diff > MAX_LENGTH_SLACK {
        return Err(EvalError::LengthMismatch {
            hyp: hyp.len(),
            reference: reference.len(),
            diff,
        });
    }
    let n = hyp.len().min(reference.len());
    let mut counts = MetricCounts::default();
    for (h, r) in hyp.labels[..n].iter().zip(&reference.labels[..n]) {
        counts.observe(*h, *r);
    }
    let mut report = report_from_counts(counts);
    report.truncated_units = diff;
    Ok(report)
}

/// Per-animal and pair-level evaluation of predicted segment files against
/// reference annotations.
#[derive(Debug, Clone, Serialize)]
pub struct PairEvaluation {
    pub pair: MetricReport,
    pub animal1: MetricReport,
    pub animal2: MetricReport,
}

pub fn evaluate_pair(
    pred1: &SegmentFile,
    pred2: &SegmentFile,
    ref1: &SegmentFile,
    ref2: &SegmentFile,
    duration_s: f64,
) -> Result<PairEvaluation, EvalError> {
    let animal = |pred: &SegmentFile, reference: &SegmentFile| -> Result<MetricCounts, EvalError> {
        let hyp = discretize(&fill_noise(pred, duration_s)?, duration_s);
        let refseq = discretize(&fill_noise(reference, duration_s)?, duration_s);
        let mut counts = MetricCounts::default();
        for (h, r) in hyp.labels.iter().zip(&refseq.labels) {
            counts.observe(*h, *r);
        }
        Ok(counts)
    };
    let counts1 = animal(pred1, ref1)?;
    let counts2 = animal(pred2, ref2)?;
    let mut pair_counts = counts1;
    pair_counts.accumulate(&counts2);
    Ok(PairEvaluation {
        pair: report_from_counts(pair_counts),
        animal1: report_from_counts(counts1),
        animal2: report_from_counts(counts2),
    })
}

/// Aligned plain-text score table, one row per labeled report.
pub fn render_table(rows: &[(&str, &MetricReport)]) -> String {
    let mut out = String::new();
    let name_w = rows
        .iter()
        .map(|(n, _)| n.len())
        .max()
        .unwrap_or(6)
        .max(6);
    out.push_str(&format!(
        "{:<name_w$}  {:>8}  {:>8}  {:>8}  {:>10}  {:>9}  {:>10}\n",
        "System", "F-score", "Recall", "Prec.", "Noise Acc.", "Call Acc.", "Total Acc."
    ));
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<name_w$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>10.4}  {:>9.4}  {:>10.4}\n",
            name, r.f, r.recall, r.precision, r.noise_acc, r.call_acc, r.total_acc
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{CallAnnotation, CallKind, Caller, SegmentFile};

    fn sf(entries: &[(f64, f64, CallKind)]) -> SegmentFile {
        SegmentFile::from_entries(
            Caller::Animal1,
            entries
                .iter()
                .map(|&(b, e, k)| CallAnnotation::new(k, b, e).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn noise() -> KindLabel {
        KindLabel::Noise
    }

    fn tr() -> KindLabel {
        KindLabel::Call(CallKind::Trill)
    }

    #[test]
    fn fill_noise_empty_file() {
        let track = fill_noise(&SegmentFile::empty(Caller::Animal1), 1.0).unwrap();
        assert_eq!(track.spans().len(), 1);
        assert_eq!(track.spans()[0].label, noise());
        assert_eq!((track.spans()[0].begin_s, track.spans()[0].end_s), (0.0, 1.0));
    }

    #[test]
    fn fill_noise_brackets_a_call() {
        let track = fill_noise(&sf(&[(0.2, 0.5, CallKind::Trill)]), 1.0).unwrap();
        let spans: Vec<(f64, f64, KindLabel)> = track
            .spans()
            .iter()
            .map(|s| (s.begin_s, s.end_s, s.label))
            .collect();
        assert_eq!(
            spans,
            vec![(0.0, 0.2, noise()), (0.2, 0.5, tr()), (0.5, 1.0, noise())]
        );
    }

    #[test]
    fn fill_noise_full_coverage_adds_nothing() {
        let track = fill_noise(
            &sf(&[(0.0, 0.5, CallKind::Trill), (0.5, 1.0, CallKind::Phee)]),
            1.0,
        )
        .unwrap();
        assert_eq!(track.spans().len(), 2);
    }

    #[test]
    fn fill_noise_rejects_entry_beyond_duration() {
        let err = fill_noise(&sf(&[(0.2, 1.5, CallKind::Trill)]), 1.0).unwrap_err();
        assert!(matches!(err, EvalError::EntryBeyondDuration { .. }));
    }

    #[test]
    fn discretize_uses_midpoint_rule() {
        let track = fill_noise(&sf(&[(0.0, 0.15, CallKind::Trill)]), 0.2).unwrap();
        let seq = discretize(&track, 0.2);
        assert_eq!(seq.labels, vec![tr(), tr(), tr(), noise()]);
    }

    #[test]
    fn discretize_all_noise_and_length_rule() {
        let track = fill_noise(&SegmentFile::empty(Caller::Animal1), 0.2).unwrap();
        let seq = discretize(&track, 0.2);
        assert_eq!(seq.labels, vec![noise(); 4]);
        for d in [0.01f64, 0.05, 0.049, 0.051, 1.0, 2.4, 10.225] {
            let track = fill_noise(&SegmentFile::empty(Caller::Animal1), d).unwrap();
            assert_eq!(discretize(&track, d).len(), (d / UNIT_S - 1e-9).ceil() as usize);
        }
    }

    #[test]
    fn perfect_match_scores_all_ones() {
        let seq = LabelSequence {
            labels: vec![noise(), tr(), tr(), noise()],
        };
        let r = compute_metrics(&seq, &seq).unwrap();
        for v in [r.noise_acc, r.call_acc, r.total_acc, r.precision, r.recall, r.f] {
            assert_eq!(v, 1.0);
        }
        assert!(r.degenerate.is_empty());
    }

    #[test]
    fn hand_counted_example() {
        let reference = LabelSequence {
            labels: vec![noise(), tr(), tr(), noise()],
        };
        let hyp = LabelSequence {
            labels: vec![tr(), tr(), noise(), noise()],
        };
        let r = compute_metrics(&hyp, &reference).unwrap();
        assert_eq!(
            (r.c_call, r.e_noise, r.c_noise, r.n_call, r.n_noise),
            (1, 1, 1, 2, 2)
        );
        assert_eq!(r.noise_acc, 0.5);
        assert_eq!(r.call_acc, 0.5);
        assert_eq!(r.total_acc, 0.5);
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.f, 0.5);
    }

    #[test]
    fn all_noise_hypothesis_is_degenerate() {
        let reference = LabelSequence {
            labels: vec![tr(), tr(), noise()],
        };
        let hyp = LabelSequence {
            labels: vec![noise(), noise(), noise()],
        };
        let r = compute_metrics(&hyp, &reference).unwrap();
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.f, 0.0);
        assert!(r.degenerate.contains(&"precision".to_string()));
    }

    #[test]
    fn fscore_reference_points() {
        assert!((fscore(0.8341, 0.7576) - 0.7940).abs() < 1e-4);
        assert!((fscore(0.8227, 0.7212) - 0.7686).abs() < 1e-4);
        assert_eq!(fscore(1.0, 1.0), 1.0);
        assert_eq!(fscore(0.0, 0.0), 0.0);
    }

    #[test]
    fn length_slack_tolerated_up_to_two_units() {
        let a = LabelSequence {
            labels: vec![noise(); 10],
        };
        let b = LabelSequence {
            labels: vec![noise(); 12],
        };
        let r = compute_metrics(&a, &b).unwrap();
        assert_eq!(r.truncated_units, 2);
        assert_eq!(r.n_all, 10);
        let c = LabelSequence {
            labels: vec![noise(); 13],
        };
        assert!(compute_metrics(&a, &c).is_err());
    }

    #[test]
    fn pair_evaluation_sums_counts() {
        // Animal 1 predicted perfectly; animal 2 predicted all-noise.
        // Equal reference call mass per animal gives pair recall 0.5.
        let ref1 = sf(&[(0.0, 0.5, CallKind::Trill)]);
        let ref2 = sf(&[(0.5, 1.0, CallKind::Phee)]);
        let pred1 = ref1.clone();
        let pred2 = SegmentFile::empty(Caller::Animal2);
        let eval = evaluate_pair(&pred1, &pred2, &ref1, &ref2, 1.0).unwrap();
        assert_eq!(eval.animal1.recall, 1.0);
        assert_eq!(eval.animal2.recall, 0.0);
        assert_eq!(eval.pair.recall, 0.5);
        assert_eq!(eval.pair.n_call, 20);
        // Pair-perfect case
        let eval = evaluate_pair(&ref1, &ref2, &ref1, &ref2, 1.0).unwrap();
        for v in [
            eval.pair.noise_acc,
            eval.pair.call_acc,
            eval.pair.total_acc,
            eval.pair.precision,
            eval.pair.recall,
            eval.pair.f,
        ] {
            assert_eq!(v, 1.0);
        }
        // No reference calls at all: degenerate, flagged.
        let empty1 = SegmentFile::empty(Caller::Animal1);
        let empty2 = SegmentFile::empty(Caller::Animal2);
        let eval = evaluate_pair(&empty1, &empty2, &empty1, &empty2, 1.0).unwrap();
        assert_eq!(eval.pair.n_call, 0);
        assert!(eval.pair.degenerate.contains(&"call_acc".to_string()));
    }

    #[test]
    fn total_acc_between_componentwise_accuracies() {
        let reference = LabelSequence {
            labels: vec![noise(), noise(), noise(), tr(), tr(), tr(), tr()],
        };
        let hyp = LabelSequence {
            labels: vec![noise(), tr(), noise(), tr(), tr(), noise(), tr()],
        };
        let r = compute_metrics(&hyp, &reference).unwrap();
        let lo = r.noise_acc.min(r.call_acc);
        let hi = r.noise_acc.max(r.call_acc);
        assert!(r.total_acc >= lo && r.total_acc <= hi);
    }

    #[test]
    fn report_serializes_to_json() {
        let r = report_from_counts(MetricCounts {
            c_noise: 1,
            c_call: 2,
            e_noise: 3,
            n_noise: 4,
            n_call: 5,
        });
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"precision\""), "{json}");
        assert!(json.contains("\"c_all\":3"), "{json}");
    }
}
