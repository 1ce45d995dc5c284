//! Writes the 32-bar, three-instrument song used by the integration tests.
//!
//! `cargo run --example fixture_song -- tests/data/song32.mid`

use songgraph::midi::{write_smf, InstrumentScheme, Note, Score};
use songgraph::music::{InstrumentId, KeyLabel, UNITS_PER_BAR, UNITS_PER_QUARTER};

const DRUMS: InstrumentId = InstrumentId(0);
const PIANO: InstrumentId = InstrumentId(1);
const BASS: InstrumentId = InstrumentId(5);

fn note(instrument: InstrumentId, pitch: u8, onset: u32, duration: u32, velocity: u8) -> Note {
    Note {
        pitch,
        onset,
        duration,
        velocity,
        instrument,
    }
}

/// Verse: block chords, quarter-note bass, straight rock beat.
fn verse(bar: u32, chord: [u8; 3], out: &mut Vec<Note>) {
    let t0 = bar * UNITS_PER_BAR;
    let q = UNITS_PER_QUARTER;
    for p in chord {
        out.push(note(PIANO, p, t0, 2 * q, 80));
        out.push(note(PIANO, p, t0 + 2 * q, 2 * q, 72));
    }
    for beat in 0..4 {
        out.push(note(BASS, chord[0] - 24, t0 + beat * q, q, 90));
    }
    for beat in 0..4 {
        out.push(note(DRUMS, if beat % 2 == 0 { 36 } else { 38 }, t0 + beat * q, 3, 100));
    }
    for eighth in 0..8 {
        out.push(note(DRUMS, 42, t0 + eighth * q / 2, 3, 60));
    }
}

/// Chorus: eighth-note arpeggios, syncopated bass, busier hats.
fn chorus(bar: u32, chord: [u8; 3], out: &mut Vec<Note>) {
    let t0 = bar * UNITS_PER_BAR;
    let e = UNITS_PER_QUARTER / 2;
    for i in 0..8 {
        out.push(note(PIANO, chord[i % 3] + 12, t0 + i as u32 * e, e, 96));
    }
    for (step, len) in [(0, 3), (3, 1), (4, 2), (6, 2)] {
        out.push(note(BASS, chord[0] - 24, t0 + step * e, len * e, 104));
    }
    for beat in 0..4u32 {
        out.push(note(DRUMS, 36, t0 + beat * 2 * e, 3, 110));
        if beat % 2 == 1 {
            out.push(note(DRUMS, 38, t0 + beat * 2 * e, 3, 110));
        }
    }
    for s in 0..16 {
        out.push(note(DRUMS, 42, t0 + s * 3, 3, 70));
    }
}

pub fn song() -> Score {
    const C: [u8; 3] = [60, 64, 67];
    const F: [u8; 3] = [65, 69, 72];
    const G: [u8; 3] = [67, 71, 74];
    const AM: [u8; 3] = [57, 60, 64];
    let mut notes = Vec::new();
    for section in 0..4u32 {
        let base = section * 8;
        let chords = if section % 2 == 0 { [C, F, G, C] } else { [AM, F, C, G] };
        for b in 0..8 {
            let chord = chords[(b / 2) as usize];
            if section % 2 == 0 {
                verse(base + b, chord, &mut notes);
            } else {
                chorus(base + b, chord, &mut notes);
            }
        }
    }
    let mut score = Score::from_notes(notes);
    score.key = Some(KeyLabel::new(0, false));
    score.genre = Some("pop".into());
    score
}

fn main() {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "tests/data/song32.mid".into());
    let bytes = write_smf(&song(), &InstrumentScheme::default());
    std::fs::write(&path, bytes).expect("write fixture");
    println!("wrote {path}");
}
