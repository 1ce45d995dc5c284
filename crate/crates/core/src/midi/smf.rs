//! Standard MIDI File reading and writing (formats 0 and 1).

use std::collections::{BTreeMap, VecDeque};

use log::warn;

use super::{RawNote, RawScore, Score, TimeSignature};
use crate::error::{Error, Result};
use crate::midi::InstrumentScheme;
use crate::music::{InstrumentId, KeyLabel, UNITS_PER_QUARTER};

/// One decoded track event on the absolute tick axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEvent {
    pub tick: u64,
    /// Present only for channel messages.
    pub channel: Option<u8>,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    NoteOn {
        pitch: u8,
        velocity: u8,
    },
    NoteOff {
        pitch: u8,
        velocity: u8,
    },
    ProgramChange(u8),
    /// Microseconds per quarter note.
    Tempo(u32),
    TimeSignature {
        numerator: u8,
        denominator_pow: u8,
    },
    KeySignature {
        sharps: i8,
        minor: u8,
    },
    Text {
        meta_type: u8,
        text: String,
    },
    EndOfTrack,
    Other,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: &str) -> Error {
        Error::MalformedTrack {
            offset: self.base + self.pos,
            reason: reason.to_string(),
        }
    }

    fn byte(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| self.err("unexpected end of track"))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(self.err("event runs past end of track"));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn varlen(&mut self) -> Result<u32> {
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.byte()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(self.err("variable-length quantity longer than 4 bytes"))
    }
}

fn read_u32(bytes: &[u8]) -> u32 {
    u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
}

fn read_u16(bytes: &[u8]) -> u16 {
    u16::from_be_bytes([bytes[0], bytes[1]])
}

/// Decodes the events of one `MTrk` body. `base` is the body's offset in
/// the file, used for error positions.
pub fn parse_track_events(data: &[u8], base: usize) -> Result<Vec<RawEvent>> {
    let mut cur = Cursor { data, pos: 0, base };
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut events = Vec::new();

    while cur.pos < data.len() {
        tick += cur.varlen()? as u64;
        let first = cur.byte()?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            let status = running.ok_or_else(|| cur.err("data byte without running status"))?;
            (status, Some(first))
        };

        match status {
            0xFF => {
                running = None;
                let meta_type = cur.byte()?;
                let len = cur.varlen()? as usize;
                let payload = cur.take(len)?;
                let kind = match meta_type {
                    0x2F => EventKind::EndOfTrack,
                    0x51 if len == 3 => {
                        EventKind::Tempo(((payload[0] as u32) << 16) | ((payload[1] as u32) << 8) | payload[2] as u32)
                    }
                    0x58 if len >= 2 => EventKind::TimeSignature {
                        numerator: payload[0],
                        denominator_pow: payload[1],
                    },
                    0x59 if len == 2 => EventKind::KeySignature {
                        sharps: payload[0] as i8,
                        minor: payload[1],
                    },
                    0x01..=0x07 => EventKind::Text {
                        meta_type,
                        text: String::from_utf8_lossy(payload).into_owned(),
                    },
                    _ => EventKind::Other,
                };
                let end = kind == EventKind::EndOfTrack;
                events.push(RawEvent {
                    tick,
                    channel: None,
                    kind,
                });
                if end {
                    break;
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = cur.varlen()? as usize;
                cur.take(len)?;
                events.push(RawEvent {
                    tick,
                    channel: None,
                    kind: EventKind::Other,
                });
            }
            0xF1..=0xFE => {
                return Err(cur.err("system message inside a track"));
            }
            _ => {
                running = Some(status);
                let channel = status & 0x0f;
                let d1 = match first_data {
                    Some(b) => b,
                    None => cur.byte()?,
                };
                let needs_two = !matches!(status & 0xf0, 0xC0 | 0xD0);
                let d2 = if needs_two { cur.byte()? } else { 0 };
                if d1 & 0x80 != 0 || d2 & 0x80 != 0 {
                    return Err(cur.err("status byte where data byte expected"));
                }
                let kind = match status & 0xf0 {
                    0x90 if d2 > 0 => EventKind::NoteOn {
                        pitch: d1,
                        velocity: d2,
                    },
                    0x90 | 0x80 => EventKind::NoteOff {
                        pitch: d1,
                        velocity: d2,
                    },
                    0xC0 => EventKind::ProgramChange(d1),
                    _ => EventKind::Other,
                };
                events.push(RawEvent {
                    tick,
                    channel: Some(channel),
                    kind,
                });
            }
        }
    }
    Ok(events)
}

fn genre_from_text(text: &str) -> Option<String> {
    let lower = text.trim().to_ascii_lowercase();
    let rest = lower.strip_prefix("genre")?;
    let rest = rest.trim_start();
    let rest = rest.strip_prefix('=').or_else(|| rest.strip_prefix(':'))?;
    let label = rest.trim();
    (!label.is_empty()).then(|| label.to_string())
}

/// Parses an SMF into tick-domain notes and metadata.
///
/// Note-on/note-off pairs are matched first-in first-out per channel and
/// pitch. Program changes apply to the channel within their own track.
pub fn parse_smf(bytes: &[u8]) -> Result<RawScore> {
    if bytes.len() < 14 || &bytes[0..4] != b"MThd" {
        return Err(Error::MalformedHeader("missing `MThd` header chunk".into()));
    }
    let header_len = read_u32(&bytes[4..8]) as usize;
    if header_len < 6 {
        return Err(Error::MalformedHeader(format!("header length {header_len} < 6")));
    }
    if 8 + header_len > bytes.len() {
        return Err(Error::TruncatedChunk {
            chunk: "MThd".into(),
            declared: header_len,
            available: bytes.len() - 8,
        });
    }
    let format = read_u16(&bytes[8..10]);
    let declared_tracks = read_u16(&bytes[10..12]);
    let division = read_u16(&bytes[12..14]);
    if format > 1 {
        return Err(Error::UnsupportedFormat(format));
    }
    if division & 0x8000 != 0 {
        return Err(Error::UnsupportedDivision("SMPTE time code".into()));
    }
    if division == 0 {
        return Err(Error::UnsupportedDivision("zero ticks per quarter".into()));
    }

    let mut score = RawScore {
        format,
        ticks_per_quarter: division,
        ..RawScore::default()
    };

    let mut pos = 8 + header_len;
    let mut track_index = 0usize;
    while pos < bytes.len() {
        let remaining = bytes.len() - pos;
        if remaining < 8 {
            return Err(Error::TruncatedChunk {
                chunk: "<chunk header>".into(),
                declared: 8,
                available: remaining,
            });
        }
        let id = &bytes[pos..pos + 4];
        let len = read_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body_start = pos + 8;
        if len > bytes.len() - body_start {
            return Err(Error::TruncatedChunk {
                chunk: String::from_utf8_lossy(id).into_owned(),
                declared: len,
                available: bytes.len() - body_start,
            });
        }
        if id == b"MTrk" {
            let events = parse_track_events(&bytes[body_start..body_start + len], body_start)?;
            collect_track(&mut score, track_index, &events)?;
            track_index += 1;
        }
        pos = body_start + len;
    }
    if track_index != declared_tracks as usize {
        let msg = format!("header declares {declared_tracks} tracks, found {track_index}");
        warn!("{msg}");
        score.warnings.push(msg);
    }

    score.notes.sort_by_key(|n| (n.onset_tick, n.track, n.channel, n.pitch));
    score.tempos.sort_by_key(|&(t, _)| t);
    Ok(score)
}

fn collect_track(score: &mut RawScore, track: usize, events: &[RawEvent]) -> Result<()> {
    let mut programs = [0u8; 16];
    let mut open: BTreeMap<(u8, u8), VecDeque<(u64, u8, u8)>> = BTreeMap::new();
    let mut end_tick = 0u64;

    for ev in events {
        end_tick = end_tick.max(ev.tick);
        match (&ev.kind, ev.channel) {
            (EventKind::NoteOn { pitch, velocity }, Some(ch)) => {
                open.entry((ch, *pitch))
                    .or_default()
                    .push_back((ev.tick, *velocity, programs[ch as usize]));
            }
            (EventKind::NoteOff { pitch, .. }, Some(ch)) => {
                if let Some((onset, velocity, program)) = open.get_mut(&(ch, *pitch)).and_then(VecDeque::pop_front) {
                    score.notes.push(RawNote {
                        pitch: *pitch,
                        onset_tick: onset,
                        dur_ticks: ev.tick - onset,
                        velocity,
                        channel: ch,
                        program,
                        track,
                        instrument: None,
                    });
                }
            }
            (EventKind::ProgramChange(p), Some(ch)) => programs[ch as usize] = *p,
            (EventKind::Tempo(us), _) => score.tempos.push((ev.tick, *us)),
            (
                EventKind::TimeSignature {
                    numerator,
                    denominator_pow,
                },
                _,
            ) => {
                let denominator = 1u32.checked_shl(*denominator_pow as u32).unwrap_or(0);
                if *numerator != 4 || denominator != 4 {
                    return Err(Error::UnsupportedTimeSignature {
                        tick: ev.tick,
                        numerator: *numerator,
                        denominator,
                    });
                }
                score.time_signatures.push(TimeSignature {
                    tick: ev.tick,
                    numerator: *numerator,
                    denominator: denominator as u8,
                });
            }
            (EventKind::KeySignature { sharps, minor }, _) => {
                if score.key.is_none() {
                    score.key = Some(KeyLabel::from_key_signature(*sharps, *minor));
                }
            }
            (EventKind::Text { text, .. }, _) => {
                if score.genre.is_none() {
                    score.genre = genre_from_text(text);
                }
            }
            _ => {}
        }
    }

    for ((ch, pitch), pending) in open {
        for (onset, velocity, program) in pending {
            let msg = format!(
                "track {track}: note-on (channel {ch}, pitch {pitch}, tick {onset}) never released; closed at tick {end_tick}"
            );
            warn!("{msg}");
            score.warnings.push(msg);
            score.notes.push(RawNote {
                pitch,
                onset_tick: onset,
                dur_ticks: end_tick - onset,
                velocity,
                channel: ch,
                program,
                track,
                instrument: None,
            });
        }
    }
    Ok(())
}

fn push_varlen(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

fn push_chunk(out: &mut Vec<u8>, id: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(id);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
}

/// Writes grid-domain scores as format-1 SMF.
///
/// Track 0 carries tempo, time signature, key signature and text events;
/// every instrument present gets its own track with a program change at
/// tick 0. Drums go on channel 10.
#[derive(Debug, Clone)]
pub struct SmfWriter<'a> {
    scheme: &'a InstrumentScheme,
    ticks_per_quarter: u16,
    texts: Vec<String>,
}

impl<'a> SmfWriter<'a> {
    pub fn new(scheme: &'a InstrumentScheme) -> Self {
        SmfWriter {
            scheme,
            ticks_per_quarter: 480,
            texts: Vec::new(),
        }
    }

    /// Must be a positive multiple of 12 so every grid unit is a whole tick count.
    pub fn ticks_per_quarter(mut self, tpq: u16) -> Self {
        assert!(tpq > 0 && tpq % 12 == 0, "ticks per quarter must be a multiple of 12");
        self.ticks_per_quarter = tpq;
        self
    }

    pub fn text(mut self, text: impl Into<String>) -> Self {
        self.texts.push(text.into());
        self
    }

    pub fn write(&self, score: &Score) -> Vec<u8> {
        let unit = (self.ticks_per_quarter as u32 / UNITS_PER_QUARTER) as u64;
        let mut instruments: Vec<InstrumentId> = score.notes.iter().map(|n| n.instrument).collect();
        instruments.sort();
        instruments.dedup();

        let mut out = Vec::new();
        let mut header = Vec::new();
        header.extend_from_slice(&1u16.to_be_bytes());
        header.extend_from_slice(&((instruments.len() + 1) as u16).to_be_bytes());
        header.extend_from_slice(&self.ticks_per_quarter.to_be_bytes());
        push_chunk(&mut out, b"MThd", &header);

        let mut conductor = Vec::new();
        let tempo = score.tempo_us_per_quarter;
        conductor.extend_from_slice(&[0x00, 0xFF, 0x51, 0x03]);
        conductor.extend_from_slice(&[(tempo >> 16) as u8, (tempo >> 8) as u8, tempo as u8]);
        conductor.extend_from_slice(&[0x00, 0xFF, 0x58, 0x04, 0x04, 0x02, 0x18, 0x08]);
        if let Some(key) = score.key {
            let (sf, mi) = key.to_key_signature();
            conductor.extend_from_slice(&[0x00, 0xFF, 0x59, 0x02, sf as u8, mi]);
        }
        let genre_text = score.genre.as_ref().map(|g| format!("genre={g}"));
        for text in genre_text.iter().chain(&self.texts) {
            conductor.extend_from_slice(&[0x00, 0xFF, 0x01]);
            push_varlen(&mut conductor, text.len() as u32);
            conductor.extend_from_slice(text.as_bytes());
        }
        conductor.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);
        push_chunk(&mut out, b"MTrk", &conductor);

        const MELODIC_CHANNELS: [u8; 15] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 12, 13, 14, 15];
        let mut melodic = 0usize;
        for inst in instruments {
            let (channel, program) = if inst.is_drums() {
                (InstrumentScheme::drum_channel(), 0)
            } else {
                let ch = MELODIC_CHANNELS[melodic % MELODIC_CHANNELS.len()];
                melodic += 1;
                (ch, self.scheme.representative_program(inst))
            };

            // (tick, 0 = off / 1 = on, pitch, velocity)
            let mut events: Vec<(u64, u8, u8, u8)> = Vec::new();
            for n in score.notes.iter().filter(|n| n.instrument == inst) {
                let on = n.onset as u64 * unit;
                let off = (n.onset + n.duration) as u64 * unit;
                events.push((on, 1, n.pitch, n.velocity));
                events.push((off, 0, n.pitch, 0x40));
            }
            events.sort();

            let mut body = Vec::new();
            if let Some(name) = self.scheme.name(inst) {
                body.extend_from_slice(&[0x00, 0xFF, 0x03]);
                push_varlen(&mut body, name.len() as u32);
                body.extend_from_slice(name.as_bytes());
            }
            body.extend_from_slice(&[0x00, 0xC0 | channel, program]);
            let mut last = 0u64;
            for (tick, on, pitch, velocity) in events {
                push_varlen(&mut body, (tick - last) as u32);
                last = tick;
                let status = if on == 1 { 0x90 } else { 0x80 } | channel;
                body.extend_from_slice(&[status, pitch, velocity]);
            }
            body.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);
            push_chunk(&mut out, b"MTrk", &body);
        }
        out
    }
}

/// Format-1 SMF for a grid-domain score at 480 ticks per quarter.
pub fn write_smf(score: &Score, scheme: &InstrumentScheme) -> Vec<u8> {
    SmfWriter::new(scheme).write(score)
}
