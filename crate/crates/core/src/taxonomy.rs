//! Label universe and segment-file model.
//!
//! A *segment file* is the per-animal list of annotated (or predicted) call
//! intervals: one `begin,end,label` CSV line per call. The label universe is
//! the 8 modeled call kinds, crossed with the two callers of a recorded pair,
//! plus the distinguished `noise` class that fills the time between calls —
//! 17 target classes in total.

use std::fmt;
use std::io::{self, BufRead, Write};

use thiserror::Error;

/// The 8 modeled call kinds, in canonical id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CallKind {
    Trill,
    Phee,
    Trillphee,
    Twitter,
    Chirp,
    Tsik,
    Ek,
    Chatter,
}

impl CallKind {
    pub const ALL: [CallKind; 8] = [
        CallKind::Trill,
        CallKind::Phee,
        CallKind::Trillphee,
        CallKind::Twitter,
        CallKind::Chirp,
        CallKind::Tsik,
        CallKind::Ek,
        CallKind::Chatter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CallKind::Trill => "trill",
            CallKind::Phee => "phee",
            CallKind::Trillphee => "trillphee",
            CallKind::Twitter => "twitter",
            CallKind::Chirp => "chirp",
            CallKind::Tsik => "tsik",
            CallKind::Ek => "ek",
            CallKind::Chatter => "chatter",
        }
    }

    pub fn from_name(name: &str) -> Option<CallKind> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    /// Position in [`CallKind::ALL`], 0..8.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }
}

impl fmt::Display for CallKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which animal of the recorded pair produced a call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Caller {
    Animal1,
    Animal2,
}

impl Caller {
    pub fn animal_id(self) -> u8 {
        match self {
            Caller::Animal1 => 1,
            Caller::Animal2 => 2,
        }
    }

    pub fn from_animal_id(id: u8) -> Option<Caller> {
        match id {
            1 => Some(Caller::Animal1),
            2 => Some(Caller::Animal2),
            _ => None,
        }
    }
}

/// A call kind attributed to one animal of the pair.
///
/// The canonical string form is the kind name for animal 1 and the kind name
/// with a `2` suffix for animal 2 (`"phee"`, `"phee2"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CallLabel {
    pub kind: CallKind,
    pub caller: Caller,
}

impl CallLabel {
    pub fn new(kind: CallKind, caller: Caller) -> Self {
        CallLabel { kind, caller }
    }

    pub fn canonical(self) -> String {
        match self.caller {
            Caller::Animal1 => self.kind.name().to_string(),
            Caller::Animal2 => format!("{}2", self.kind.name()),
        }
    }

    pub fn parse(s: &str) -> Option<CallLabel> {
        if let Some(stem) = s.strip_suffix('2') {
            CallKind::from_name(stem).map(|kind| CallLabel::new(kind, Caller::Animal2))
        } else {
            CallKind::from_name(s).map(|kind| CallLabel::new(kind, Caller::Animal1))
        }
    }
}

impl fmt::Display for CallLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// One of the 17 model target classes: a caller-attributed call, or noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TargetLabel {
    Call(CallLabel),
    Noise,
}

impl TargetLabel {
    /// Number of target classes.
    pub const COUNT: usize = 17;
    /// Stable id of the noise class.
    pub const NOISE_ID: usize = 16;

    /// Stable integer id in `[0, 16]`: kinds in listing order for animal 1
    /// (0–7), then animal 2 (8–15), then noise (16). Checkpoints depend on
    /// this order.
    pub fn id(self) -> usize {
        match self {
            TargetLabel::Call(c) => match c.caller {
                Caller::Animal1 => c.kind.index(),
                Caller::Animal2 => 8 + c.kind.index(),
            },
            TargetLabel::Noise => Self::NOISE_ID,
        }
    }

    pub fn from_id(id: usize) -> Option<TargetLabel> {
        match id {
            0..=7 => Some(TargetLabel::Call(CallLabel::new(
                CallKind::ALL[id],
                Caller::Animal1,
            ))),
            8..=15 => Some(TargetLabel::Call(CallLabel::new(
                CallKind::ALL[id - 8],
                Caller::Animal2,
            ))),
            16 => Some(TargetLabel::Noise),
            _ => None,
        }
    }

    pub fn canonical(self) -> String {
        match self {
            TargetLabel::Call(c) => c.canonical(),
            TargetLabel::Noise => "noise".to_string(),
        }
    }

    pub fn parse(s: &str) -> Option<TargetLabel> {
        if s == "noise" {
            Some(TargetLabel::Noise)
        } else {
            CallLabel::parse(s).map(TargetLabel::Call)
        }
    }

    pub fn all() -> impl Iterator<Item = TargetLabel> {
        (0..Self::COUNT).map(|id| TargetLabel::from_id(id).unwrap())
    }

    pub fn is_noise(self) -> bool {
        matches!(self, TargetLabel::Noise)
    }

    /// The caller-less view used by per-animal tracks and evaluation.
    pub fn kind_label(self) -> KindLabel {
        match self {
            TargetLabel::Call(c) => KindLabel::Call(c.kind),
            TargetLabel::Noise => KindLabel::Noise,
        }
    }
}

impl fmt::Display for TargetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// A call kind without caller attribution, or noise — the 9-symbol alphabet
/// of a single animal's track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KindLabel {
    Call(CallKind),
    Noise,
}

impl KindLabel {
    pub fn is_noise(self) -> bool {
        matches!(self, KindLabel::Noise)
    }

    pub fn canonical(self) -> String {
        match self {
            KindLabel::Call(k) => k.name().to_string(),
            KindLabel::Noise => "noise".to_string(),
        }
    }
}

impl fmt::Display for KindLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// Map a raw dataset annotation label onto the modeled alphabet.
///
/// The rare annotation types (`other`, `peep`, `infant cry`) become noise;
/// the 8 modeled kinds map to themselves. Anything else is an error that
/// lists the accepted vocabulary.
pub fn map_rare_label(raw: &str) -> Result<KindLabel, TaxonomyError> {
    let norm = raw.trim();
    if let Some(kind) = CallKind::from_name(norm) {
        return Ok(KindLabel::Call(kind));
    }
    match norm {
        "other" | "peep" | "infant cry" | "infant_cry" | "infantcry" | "noise" => {
            Ok(KindLabel::Noise)
        }
        _ => Err(TaxonomyError::UnknownLabel {
            label: raw.to_string(),
            line: None,
        }),
    }
}

fn accepted_vocabulary() -> String {
    let mut names: Vec<&str> = CallKind::ALL.iter().map(|k| k.name()).collect();
    names.extend_from_slice(&["other", "peep", "infant cry", "noise"]);
    names.join(", ")
}

/// One annotated call interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CallAnnotation {
    pub kind: CallKind,
    pub begin_s: f64,
    pub end_s: f64,
}

impl CallAnnotation {
    pub fn new(kind: CallKind, begin_s: f64, end_s: f64) -> Result<Self, TaxonomyError> {
        if !(begin_s >= 0.0 && begin_s < end_s && begin_s.is_finite() && end_s.is_finite()) {
            return Err(TaxonomyError::InvalidInterval {
                begin_s,
                end_s,
                line: None,
            });
        }
        Ok(CallAnnotation {
            kind,
            begin_s,
            end_s,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.begin_s
    }
}

/// A per-animal, time-sorted, overlap-free list of call annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFile {
    pub animal: Caller,
    entries: Vec<CallAnnotation>,
}

/// Whether unknown labels are rejected or folded into noise on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// Only the 8 modeled kinds are accepted.
    Strict,
    /// Rare dataset types are mapped to noise (and dropped from the call
    /// list); the drop count is reported.
    Lenient,
}

/// Load-time statistics a caller may want to surface.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseReport {
    /// Entries whose label mapped to noise in lenient mode (dropped).
    pub mapped_to_noise: usize,
}

impl SegmentFile {
    pub fn empty(animal: Caller) -> Self {
        SegmentFile {
            animal,
            entries: Vec::new(),
        }
    }

    /// Build from unsorted entries, sorting and validating the overlap-free
    /// invariant.
    pub fn from_entries(
        animal: Caller,
        mut entries: Vec<CallAnnotation>,
    ) -> Result<Self, TaxonomyError> {
        entries.sort_by(|a, b| a.begin_s.total_cmp(&b.begin_s));
        for pair in entries.windows(2) {
            if pair[1].begin_s < pair[0].end_s {
                return Err(TaxonomyError::OverlappingEntries {
                    first: (pair[0].begin_s, pair[0].end_s),
                    second: (pair[1].begin_s, pair[1].end_s),
                });
            }
        }
        Ok(SegmentFile { animal, entries })
    }

    pub fn entries(&self) -> &[CallAnnotation] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// End time of the last call, or 0 for an empty file.
    pub fn last_end_s(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.end_s)
    }

    /// Parse the CSV form: `begin_seconds,end_seconds,label`, one entry per
    /// line, optional header, blank lines ignored, LF or CRLF.
    pub fn parse<R: BufRead>(
        reader: R,
        animal: Caller,
        mode: ParseMode,
    ) -> Result<(Self, ParseReport), TaxonomyError> {
        let mut entries = Vec::new();
        let mut report = ParseReport::default();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r').trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                // A non-CSV first line is tolerated as a header.
                if lineno == 0 {
                    continue;
                }
                return Err(TaxonomyError::MalformedLine {
                    line: lineno + 1,
                    content: line.to_string(),
                });
            }
            let (begin, end) = match (fields[0].parse::<f64>(), fields[1].parse::<f64>()) {
                (Ok(b), Ok(e)) => (b, e),
                _ if lineno == 0 => continue, // header line
                _ => {
                    return Err(TaxonomyError::MalformedLine {
                        line: lineno + 1,
                        content: line.to_string(),
                    })
                }
            };
            if !(begin >= 0.0 && begin < end && begin.is_finite() && end.is_finite()) {
                return Err(TaxonomyError::InvalidInterval {
                    begin_s: begin,
                    end_s: end,
                    line: Some(lineno + 1),
                });
            }
            let kind = match mode {
                ParseMode::Strict => CallKind::from_name(fields[2]).ok_or_else(|| {
                    TaxonomyError::UnknownLabel {
                        label: fields[2].to_string(),
                        line: Some(lineno + 1),
                    }
                })?,
                ParseMode::Lenient => {
                    match map_rare_label(fields[2]).map_err(|_| TaxonomyError::UnknownLabel {
                        label: fields[2].to_string(),
                        line: Some(lineno + 1),
                    })? {
                        KindLabel::Call(kind) => kind,
                        KindLabel::Noise => {
                            report.mapped_to_noise += 1;
                            continue;
                        }
                    }
                }
            };
            entries.push(CallAnnotation {
                kind,
                begin_s: begin,
                end_s: end,
            });
        }
        let file = SegmentFile::from_entries(animal, entries)?;
        Ok((file, report))
    }

    pub fn parse_str(
        text: &str,
        animal: Caller,
        mode: ParseMode,
    ) -> Result<(Self, ParseReport), TaxonomyError> {
        Self::parse(io::Cursor::new(text.as_bytes()), animal, mode)
    }

    /// Write the CSV form: LF line endings, 3 decimal places of seconds.
    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.entries {
            writeln!(w, "{:.3},{:.3},{}", e.begin_s, e.end_s, e.kind.name())?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("malformed segment line {line}: {content:?} (expected begin_seconds,end_seconds,label)")]
    MalformedLine { line: usize, content: String },
    #[error("invalid interval{}: begin {begin_s} must be non-negative and less than end {end_s}",
            fmt_line(*line))]
    InvalidInterval {
        begin_s: f64,
        end_s: f64,
        line: Option<usize>,
    },
    #[error("overlapping entries: [{:.3}, {:.3}) overlaps [{:.3}, {:.3})",
            first.0, first.1, second.0, second.1)]
    OverlappingEntries {
        first: (f64, f64),
        second: (f64, f64),
    },
    #[error("unknown label {label:?}{}; accepted: {}", fmt_line(*line), accepted_vocabulary())]
    UnknownLabel { label: String, line: Option<usize> },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

fn fmt_line(line: Option<usize>) -> String {
    match line {
        Some(n) => format!(" at line {n}"),
        None => String::new(),
    }
}
