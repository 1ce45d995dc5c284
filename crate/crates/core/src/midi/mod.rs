//! MIDI ingestion: SMF parsing, instrument mapping and quantization onto
//! the 48th-note grid.

mod scheme;
mod smf;

pub use scheme::{InstrumentClass, InstrumentScheme};
pub use smf::{parse_smf, parse_track_events, write_smf, EventKind, RawEvent, SmfWriter};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::music::{InstrumentId, KeyLabel, UNITS_PER_BAR, UNITS_PER_QUARTER};

pub const DEFAULT_TEMPO: u32 = 500_000;

/// A note in the tick domain, before quantization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawNote {
    pub pitch: u8,
    pub onset_tick: u64,
    pub dur_ticks: u64,
    pub velocity: u8,
    pub channel: u8,
    pub program: u8,
    pub track: usize,
    /// Filled in by [`map_instruments`].
    pub instrument: Option<InstrumentId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeSignature {
    pub tick: u64,
    pub numerator: u8,
    pub denominator: u8,
}

/// Tick-domain score as read from an SMF.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawScore {
    pub format: u16,
    pub ticks_per_quarter: u16,
    pub notes: Vec<RawNote>,
    pub tempos: Vec<(u64, u32)>,
    pub time_signatures: Vec<TimeSignature>,
    pub key: Option<KeyLabel>,
    pub genre: Option<String>,
    pub warnings: Vec<String>,
}

/// A quantized note. `onset` and `duration` are in grid units (48th notes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Note {
    pub pitch: u8,
    pub onset: u32,
    pub duration: u32,
    pub velocity: u8,
    pub instrument: InstrumentId,
}

impl Note {
    pub fn bar(&self) -> u32 {
        self.onset / UNITS_PER_BAR
    }

    fn sort_key(&self) -> (u32, InstrumentId, u8, u32, u8) {
        (self.onset, self.instrument, self.pitch, self.duration, self.velocity)
    }
}

/// Quantized multitrack score on the 48th-note grid, 4/4 only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub notes: Vec<Note>,
    pub bars: u32,
    pub key: Option<KeyLabel>,
    pub genre: Option<String>,
    pub ticks_per_quarter: u16,
    pub tempo_us_per_quarter: u32,
}

impl Default for Score {
    fn default() -> Self {
        Score {
            notes: Vec::new(),
            bars: 0,
            key: None,
            genre: None,
            ticks_per_quarter: 480,
            tempo_us_per_quarter: DEFAULT_TEMPO,
        }
    }
}

impl Score {
    /// Builds a score from arbitrary grid notes, applying the same overlap
    /// and ordering rules as [`quantize`].
    pub fn from_notes(notes: Vec<Note>) -> Self {
        let mut score = Score {
            notes,
            ..Score::default()
        };
        score.normalize();
        score
    }

    /// Resolves duplicates and same-pitch overlaps, sorts, and recomputes `bars`.
    pub fn normalize(&mut self) {
        self.notes = resolve_overlaps(std::mem::take(&mut self.notes));
        self.bars = self.notes.iter().map(|n| n.bar() + 1).max().unwrap_or(0);
    }

    pub fn instruments(&self) -> Vec<InstrumentId> {
        let mut ids: Vec<InstrumentId> = self.notes.iter().map(|n| n.instrument).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// Assigns an instrument class to every raw note.
pub fn map_instruments(mut score: RawScore, scheme: &InstrumentScheme) -> RawScore {
    let mut unmapped = std::collections::BTreeSet::new();
    for note in &mut score.notes {
        let (id, mapped) = scheme.lookup(note.channel, note.program);
        if !mapped {
            unmapped.insert(note.program);
        }
        note.instrument = Some(id);
    }
    for program in unmapped {
        let msg = format!("program {program} is not covered by the instrument scheme; using the `other` class");
        warn!("{msg}");
        score.warnings.push(msg);
    }
    score
}

/// `round(ticks * 12 / tpq)` with ties rounded up.
fn ticks_to_grid(ticks: u64, tpq: u64) -> u64 {
    (2 * UNITS_PER_QUARTER as u64 * ticks + tpq) / (2 * tpq)
}

/// Snaps onsets and durations to the nearest 48th note (ties up), with a
/// minimum duration of one grid unit. Unmapped notes are classified with
/// the default instrument scheme.
pub fn quantize(score: &RawScore) -> Score {
    assert!(score.ticks_per_quarter > 0, "ticks_per_quarter must be positive");
    let tpq = score.ticks_per_quarter as u64;
    let default_scheme;
    let needs_default = score.notes.iter().any(|n| n.instrument.is_none());
    let fallback = if needs_default {
        default_scheme = InstrumentScheme::default();
        Some(&default_scheme)
    } else {
        None
    };

    let notes = score
        .notes
        .iter()
        .map(|n| {
            let instrument = n
                .instrument
                .unwrap_or_else(|| fallback.expect("scheme loaded").lookup(n.channel, n.program).0);
            Note {
                pitch: n.pitch.min(127),
                onset: ticks_to_grid(n.onset_tick, tpq) as u32,
                duration: ticks_to_grid(n.dur_ticks, tpq).max(1) as u32,
                velocity: n.velocity.clamp(1, 127),
                instrument,
            }
        })
        .collect();

    let mut out = Score {
        notes,
        bars: 0,
        key: score.key,
        genre: score.genre.clone(),
        ticks_per_quarter: score.ticks_per_quarter,
        tempo_us_per_quarter: score.tempos.first().map_or(DEFAULT_TEMPO, |&(_, t)| t),
    };
    out.normalize();
    out
}

/// Parse, map instruments and quantize in one step.
pub fn load_score(bytes: &[u8], scheme: &InstrumentScheme) -> Result<Score> {
    let raw = map_instruments(parse_smf(bytes)?, scheme);
    Ok(quantize(&raw))
}

/// Same-pitch notes on one instrument: duplicates at one onset keep the
/// louder (then longer) note; an earlier note sounding past a later onset
/// is cut at that onset.
fn resolve_overlaps(mut notes: Vec<Note>) -> Vec<Note> {
    notes.sort_by_key(|n| {
        (
            n.instrument,
            n.pitch,
            n.onset,
            std::cmp::Reverse((n.velocity, n.duration)),
        )
    });
    let mut out: Vec<Note> = Vec::with_capacity(notes.len());
    for note in notes {
        if let Some(prev) = out.last_mut() {
            if prev.instrument == note.instrument && prev.pitch == note.pitch {
                if prev.onset == note.onset {
                    continue;
                }
                if prev.onset + prev.duration > note.onset {
                    prev.duration = note.onset - prev.onset;
                }
            }
        }
        out.push(note);
    }
    out.sort_by_key(Note::sort_key);
    out
}
