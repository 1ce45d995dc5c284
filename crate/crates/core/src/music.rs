//! Small music vocabulary shared by every stage: instrument ids, key labels
//! and the genre list.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Grid units per quarter note (one unit is a 48th note in 4/4).
pub const UNITS_PER_QUARTER: u32 = 12;
/// Grid units per 4/4 bar.
pub const UNITS_PER_BAR: u32 = 48;
pub const PITCHES: usize = 128;

/// Instrument class id under an [`crate::midi::InstrumentScheme`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstrumentId(pub u8);

impl InstrumentId {
    /// Drum class id; instrument schemes must place percussion here.
    pub const DRUMS: InstrumentId = InstrumentId(0);

    pub fn is_drums(self) -> bool {
        self == Self::DRUMS
    }
}

impl fmt::Display for InstrumentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Tonic pitch class plus mode. Indexes 0..12 are major keys, 12..24 minor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyLabel {
    pub tonic: u8,
    pub minor: bool,
}

const MAJOR_STEPS: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const NATURAL_MINOR_STEPS: [u8; 7] = [0, 2, 3, 5, 7, 8, 10];
const NOTE_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

impl KeyLabel {
    /// Embedding slots: 24 keys plus one "unknown".
    pub const SLOTS: usize = 25;
    pub const UNKNOWN_SLOT: usize = 24;

    pub fn new(tonic: u8, minor: bool) -> Self {
        KeyLabel {
            tonic: tonic % 12,
            minor,
        }
    }

    pub fn all() -> impl Iterator<Item = KeyLabel> {
        (0..24u8).map(|i| KeyLabel::new(i % 12, i >= 12))
    }

    pub fn index(self) -> usize {
        self.tonic as usize + if self.minor { 12 } else { 0 }
    }

    pub fn slot(key: Option<KeyLabel>) -> usize {
        key.map_or(Self::UNKNOWN_SLOT, KeyLabel::index)
    }

    /// From an SMF key-signature meta event (`sf` sharps/flats, `mi` 1 = minor).
    pub fn from_key_signature(sf: i8, mi: u8) -> Self {
        let major_tonic = (7 * sf as i32).rem_euclid(12) as u8;
        if mi == 1 {
            KeyLabel::new((major_tonic + 9) % 12, true)
        } else {
            KeyLabel::new(major_tonic, false)
        }
    }

    /// Inverse of [`KeyLabel::from_key_signature`], choosing `sf` in -6..=6.
    pub fn to_key_signature(self) -> (i8, u8) {
        let major_tonic = if self.minor { (self.tonic + 3) % 12 } else { self.tonic };
        // 7 is its own inverse mod 12.
        let mut sf = (7 * major_tonic as i32) % 12;
        if sf > 6 {
            sf -= 12;
        }
        (sf as i8, self.minor as u8)
    }

    /// Pitch-class membership in the key's scale (natural minor for minor keys).
    pub fn contains(self, pitch: u8) -> bool {
        let rel = (pitch % 12 + 12 - self.tonic) % 12;
        let steps = if self.minor { &NATURAL_MINOR_STEPS } else { &MAJOR_STEPS };
        steps.contains(&rel)
    }
}

impl fmt::Display for KeyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = if self.minor { "min" } else { "maj" };
        write!(f, "{}{}", NOTE_NAMES[self.tonic as usize], mode)
    }
}

/// Genre vocabulary of the training corpus.
pub const GENRES: [&str; 19] = [
    "country",
    "piano",
    "rock",
    "pop",
    "folk",
    "electronic",
    "rap",
    "chill",
    "dance",
    "jazz",
    "rnb",
    "reggae",
    "house",
    "techno",
    "trance",
    "metal",
    "pop_rock",
    "latin",
    "catchy",
];

pub fn genre_index(label: &str) -> Option<usize> {
    let label = label.trim().to_ascii_lowercase();
    GENRES.iter().position(|g| *g == label)
}
