//! Two-channel onset-only pianoroll (velocity, duration) for one bar of one
//! instrument, and the bar × instrument grid of a whole score.

use std::collections::BTreeMap;

use log::warn;

use crate::error::{Error, Result};
use crate::midi::{Note, Score};
use crate::music::{InstrumentId, PITCHES, UNITS_PER_BAR};

pub const STEPS: usize = UNITS_PER_BAR as usize;
pub const CELLS: usize = PITCHES * STEPS;
/// Velocities at or below this are dropped when decoding.
pub const DEFAULT_DECODE_THRESHOLD: f32 = 1.0;

const MAGIC: &[u8; 4] = b"CLON";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Velocity,
    Duration,
}

/// Row `p` is pitch `p` (0 at the bottom), column `t` the grid offset in the bar.
/// Durations are stored in raw grid units.
#[derive(Debug, Clone, PartialEq)]
pub struct ConlonImage {
    velocity: Vec<f32>,
    duration: Vec<f32>,
}

/// A note positioned inside one bar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BarNote {
    pub pitch: u8,
    pub offset: u8,
    pub duration: u32,
    pub velocity: u8,
}

impl Default for ConlonImage {
    fn default() -> Self {
        Self::zeros()
    }
}

impl ConlonImage {
    pub fn zeros() -> Self {
        ConlonImage {
            velocity: vec![0.0; CELLS],
            duration: vec![0.0; CELLS],
        }
    }

    #[inline]
    fn idx(pitch: usize, step: usize) -> usize {
        debug_assert!(pitch < PITCHES && step < STEPS);
        pitch * STEPS + step
    }

    pub fn velocity(&self, pitch: usize, step: usize) -> f32 {
        self.velocity[Self::idx(pitch, step)]
    }

    pub fn duration(&self, pitch: usize, step: usize) -> f32 {
        self.duration[Self::idx(pitch, step)]
    }

    pub fn set(&mut self, pitch: usize, step: usize, velocity: f32, duration: f32) {
        let i = Self::idx(pitch, step);
        self.velocity[i] = velocity;
        self.duration[i] = duration;
    }

    pub fn channel(&self, channel: Channel) -> &[f32] {
        match channel {
            Channel::Velocity => &self.velocity,
            Channel::Duration => &self.duration,
        }
    }

    pub fn channel_mut(&mut self, channel: Channel) -> &mut [f32] {
        match channel {
            Channel::Velocity => &mut self.velocity,
            Channel::Duration => &mut self.duration,
        }
    }

    /// Builds an image from raw channel data (each `CELLS` long, pitch-major).
    pub fn from_channels(velocity: Vec<f32>, duration: Vec<f32>) -> Result<Self> {
        if velocity.len() != CELLS || duration.len() != CELLS {
            return Err(Error::TensorFormat(format!(
                "channels must hold {CELLS} cells, got {} and {}",
                velocity.len(),
                duration.len()
            )));
        }
        Ok(ConlonImage { velocity, duration })
    }

    pub fn positive_cells(&self) -> usize {
        self.velocity.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.positive_cells() == 0
    }

    /// Element-wise sum, used to merge instruments into one bar image.
    pub fn accumulate(&mut self, other: &ConlonImage) {
        for (a, b) in self.velocity.iter_mut().zip(&other.velocity) {
            *a += b;
        }
        for (a, b) in self.duration.iter_mut().zip(&other.duration) {
            *a += b;
        }
    }

    pub fn scaled(&self, factor: f32) -> ConlonImage {
        ConlonImage {
            velocity: self.velocity.iter().map(|v| v * factor).collect(),
            duration: self.duration.iter().map(|v| v * factor).collect(),
        }
    }

    /// Tensor dump: `CLON`, then little-endian u32 {2, 128, 48}, then the
    /// velocity and duration channels as little-endian f32, pitch-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * CELLS);
        out.extend_from_slice(MAGIC);
        for dim in [2u32, PITCHES as u32, STEPS as u32] {
            out.extend_from_slice(&dim.to_le_bytes());
        }
        for v in self.velocity.iter().chain(&self.duration) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(Error::TensorFormat("missing `CLON` magic".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let dims = [dim(0), dim(1), dim(2)];
        if dims != [2, PITCHES as u32, STEPS as u32] {
            return Err(Error::TensorFormat(format!("unexpected shape {dims:?}")));
        }
        let body = &bytes[16..];
        if body.len() != 8 * CELLS {
            return Err(Error::TensorFormat(format!(
                "expected {} payload bytes, found {}",
                8 * CELLS,
                body.len()
            )));
        }
        let mut values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let velocity: Vec<f32> = values.by_ref().take(CELLS).collect();
        let duration: Vec<f32> = values.collect();
        Ok(ConlonImage { velocity, duration })
    }
}

/// Places each note at `[pitch, offset]`. Two notes on the same cell keep
/// the louder one.
pub fn encode_conlon(notes: &[BarNote]) -> ConlonImage {
    let mut image = ConlonImage::zeros();
    for note in notes {
        assert!((note.offset as usize) < STEPS && (note.pitch as usize) < PITCHES);
        let (p, t) = (note.pitch as usize, note.offset as usize);
        let existing = image.velocity(p, t);
        if existing > 0.0 {
            warn!(
                "two notes at pitch {} offset {}; keeping the louder one",
                note.pitch, note.offset
            );
            if existing >= note.velocity as f32 {
                continue;
            }
        }
        image.set(p, t, note.velocity as f32, note.duration.max(1) as f32);
    }
    image
}

/// Emits a note for every cell whose velocity exceeds `threshold`.
pub fn decode_conlon(image: &ConlonImage, threshold: f32) -> Vec<BarNote> {
    let mut notes = Vec::new();
    for pitch in 0..PITCHES {
        for step in 0..STEPS {
            let v = image.velocity(pitch, step);
            if v > threshold {
                let d = image.duration(pitch, step);
                let duration = if d.is_finite() { d.round().max(1.0) as u32 } else { 1 };
                notes.push(BarNote {
                    pitch: pitch as u8,
                    offset: step as u8,
                    duration,
                    velocity: v.round().clamp(1.0, 127.0) as u8,
                });
            }
        }
    }
    notes
}

/// Bar × instrument grid of CONLON images. A cell is present iff that
/// instrument has at least one onset in that bar.
#[derive(Debug, Clone, PartialEq)]
pub struct BarSequence {
    bars: usize,
    instruments: Vec<InstrumentId>,
    cells: Vec<Option<ConlonImage>>,
}

impl BarSequence {
    pub fn bars(&self) -> usize {
        self.bars
    }

    pub fn instruments(&self) -> &[InstrumentId] {
        &self.instruments
    }

    pub fn get(&self, bar: usize, instrument: InstrumentId) -> Option<&ConlonImage> {
        let col = self.instruments.binary_search(&instrument).ok()?;
        self.cells.get(bar * self.instruments.len() + col)?.as_ref()
    }

    pub fn is_present(&self, bar: usize, instrument: InstrumentId) -> bool {
        self.get(bar, instrument).is_some()
    }

    /// Emptiness mask, `mask[bar][instrument column]`.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        (0..self.bars)
            .map(|b| self.instruments.iter().map(|&i| self.is_present(b, i)).collect())
            .collect()
    }

    /// Sum of every instrument's image in one bar.
    pub fn merged_bar(&self, bar: usize) -> ConlonImage {
        let mut merged = ConlonImage::zeros();
        for &inst in &self.instruments {
            if let Some(img) = self.get(bar, inst) {
                merged.accumulate(img);
            }
        }
        merged
    }
}

/// Splits one note into its bar and in-bar offset. Notes crossing a barline
/// stay in their onset bar with their full duration.
pub fn to_bar_note(note: &Note) -> (u32, BarNote) {
    (
        note.onset / UNITS_PER_BAR,
        BarNote {
            pitch: note.pitch,
            offset: (note.onset % UNITS_PER_BAR) as u8,
            duration: note.duration,
            velocity: note.velocity,
        },
    )
}

pub fn from_bar_note(bar: u32, instrument: InstrumentId, note: &BarNote) -> Note {
    Note {
        pitch: note.pitch,
        onset: bar * UNITS_PER_BAR + note.offset as u32,
        duration: note.duration,
        velocity: note.velocity,
        instrument,
    }
}

/// Notes of each (bar, instrument) cell.
pub fn group_notes(score: &Score) -> BTreeMap<(u32, InstrumentId), Vec<BarNote>> {
    let mut groups: BTreeMap<(u32, InstrumentId), Vec<BarNote>> = BTreeMap::new();
    for note in &score.notes {
        let (bar, bn) = to_bar_note(note);
        groups.entry((bar, note.instrument)).or_default().push(bn);
    }
    groups
}

pub fn split_bars(score: &Score) -> BarSequence {
    let instruments = score.instruments();
    let bars = score.bars as usize;
    let mut cells = vec![None; bars * instruments.len()];
    for ((bar, inst), notes) in group_notes(score) {
        let col = instruments.binary_search(&inst).expect("instrument listed");
        cells[bar as usize * instruments.len() + col] = Some(encode_conlon(&notes));
    }
    BarSequence {
        bars,
        instruments,
        cells,
    }
}
