use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::music::InstrumentId;

const DEFAULT_SCHEME: &str = include_str!("../../assets/instruments.txt");
const DRUM_CHANNEL: u8 = 9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentClass {
    pub id: InstrumentId,
    pub name: String,
    pub programs: Vec<(u8, u8)>,
}

/// Maps `(channel, program)` to an instrument class id.
///
/// Channel 10 (index 9) always maps to [`InstrumentId::DRUMS`]; every other
/// channel is looked up by program number, falling back to the `other` class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentScheme {
    classes: BTreeMap<InstrumentId, InstrumentClass>,
    by_program: [Option<InstrumentId>; 128],
    other: InstrumentId,
}

impl Default for InstrumentScheme {
    fn default() -> Self {
        InstrumentScheme::parse(DEFAULT_SCHEME).expect("bundled instrument scheme is valid")
    }
}

impl InstrumentScheme {
    /// Text of the bundled 17-class scheme.
    pub fn default_text() -> &'static str {
        DEFAULT_SCHEME
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut classes = BTreeMap::new();
        let mut by_program = [None; 128];
        let mut other = None;
        let err = |line: usize, reason: String| Error::InstrumentScheme { line, reason };

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "other" {
                let id = fields
                    .get(1)
                    .and_then(|v| v.parse::<u8>().ok())
                    .ok_or_else(|| err(line_no, "expected `other <id>`".into()))?;
                other = Some(InstrumentId(id));
                continue;
            }
            if fields.len() != 3 {
                return Err(err(line_no, format!("expected `<id> <name> <programs>`, got `{line}`")));
            }
            let id = fields[0]
                .parse::<u8>()
                .map(InstrumentId)
                .map_err(|_| err(line_no, format!("bad class id `{}`", fields[0])))?;
            let mut programs = Vec::new();
            if fields[2] == "percussion" {
                if id != InstrumentId::DRUMS {
                    return Err(err(line_no, "percussion class must have id 0".into()));
                }
            } else {
                for range in fields[2].split(',') {
                    let (lo, hi) = match range.split_once('-') {
                        Some((a, b)) => (a, b),
                        None => (range, range),
                    };
                    let lo: u8 = lo.parse().map_err(|_| err(line_no, format!("bad program `{lo}`")))?;
                    let hi: u8 = hi.parse().map_err(|_| err(line_no, format!("bad program `{hi}`")))?;
                    if lo > hi || hi > 127 {
                        return Err(err(line_no, format!("bad program range `{range}`")));
                    }
                    for p in lo..=hi {
                        if let Some(prev) = by_program[p as usize] {
                            return Err(err(line_no, format!("program {p} already mapped to class {prev}")));
                        }
                        by_program[p as usize] = Some(id);
                    }
                    programs.push((lo, hi));
                }
            }
            let class = InstrumentClass {
                id,
                name: fields[1].to_string(),
                programs,
            };
            if classes.insert(id, class).is_some() {
                return Err(err(line_no, format!("duplicate class id {id}")));
            }
        }

        if !classes.contains_key(&InstrumentId::DRUMS) {
            return Err(err(0, "scheme has no drum class (id 0)".into()));
        }
        let other = other.unwrap_or(InstrumentId::DRUMS);
        if other.is_drums() || !classes.contains_key(&other) {
            return Err(err(0, format!("`other` class {other} must name a non-drum class")));
        }
        Ok(InstrumentScheme {
            classes,
            by_program,
            other,
        })
    }

    /// Class for a channel/program pair; the flag is false when the program
    /// fell through to the `other` bucket.
    pub fn lookup(&self, channel: u8, program: u8) -> (InstrumentId, bool) {
        if channel == DRUM_CHANNEL {
            return (InstrumentId::DRUMS, true);
        }
        match self.by_program[(program & 0x7f) as usize] {
            Some(id) => (id, true),
            None => (self.other, false),
        }
    }

    /// Program used when writing this class back to SMF.
    pub fn representative_program(&self, id: InstrumentId) -> u8 {
        self.classes
            .get(&id)
            .and_then(|c| c.programs.first())
            .map_or(0, |&(lo, _)| lo)
    }

    pub fn name(&self, id: InstrumentId) -> Option<&str> {
        self.classes.get(&id).map(|c| c.name.as_str())
    }

    /// Number of embedding slots needed: highest class id + 1.
    pub fn class_count(&self) -> usize {
        self.classes.keys().next_back().map_or(0, |id| id.0 as usize + 1)
    }

    pub fn classes(&self) -> impl Iterator<Item = &InstrumentClass> {
        self.classes.values()
    }

    pub fn drum_channel() -> u8 {
        DRUM_CHANNEL
    }
}
