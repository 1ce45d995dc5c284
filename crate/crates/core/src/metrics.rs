//! Pattern-level evaluation: note density, unique pitches, key score,
//! velocity and duration averages over masked non-drum patterns.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::generator::{MaskedSegment, TaskKind};
use crate::midi::{Note, Score};
use crate::music::{KeyLabel, UNITS_PER_QUARTER};

/// Reference values reported for the full-scale dataset; annotation only.
pub const REFERENCE_GROUND_TRUTH: MetricRow = MetricRow {
    nd: 20.85,
    up: 6.23,
    ks: 0.74,
    va: 94.81,
    da: 0.81,
};

pub fn note_density(notes: &[Note]) -> usize {
    notes.len()
}

pub fn unique_pitch(notes: &[Note]) -> usize {
    notes.iter().map(|n| n.pitch).collect::<BTreeSet<_>>().len()
}

/// Share of notes on the key's scale (major or natural minor). Without a
/// key label the best of all 24 scales is used. `None` for no notes.
pub fn key_score(notes: &[Note], key: Option<KeyLabel>) -> Option<f64> {
    if notes.is_empty() {
        return None;
    }
    let on_scale = |k: KeyLabel| notes.iter().filter(|n| k.contains(n.pitch)).count();
    let hits = match key {
        Some(k) => on_scale(k),
        None => KeyLabel::all().map(on_scale).max().unwrap_or(0),
    };
    Some(hits as f64 / notes.len() as f64)
}

pub fn velocity_avg(notes: &[Note]) -> Option<f64> {
    mean(notes.iter().map(|n| n.velocity as f64))
}

/// Mean duration in quarter notes.
pub fn duration_avg(notes: &[Note]) -> Option<f64> {
    mean(notes.iter().map(|n| n.duration as f64 / UNITS_PER_QUARTER as f64))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub nd: f64,
    pub up: f64,
    pub ks: f64,
    pub va: f64,
    pub da: f64,
}

/// Metrics of one pattern. KS, VA and DA are undefined for empty patterns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternMetrics {
    pub nd: usize,
    pub up: usize,
    pub ks: Option<f64>,
    pub va: Option<f64>,
    pub da: Option<f64>,
}

impl PatternMetrics {
    pub fn of(notes: &[Note], key: Option<KeyLabel>) -> Self {
        PatternMetrics {
            nd: note_density(notes),
            up: unique_pitch(notes),
            ks: key_score(notes, key),
            va: velocity_avg(notes),
            da: duration_avg(notes),
        }
    }
}

/// Averages over patterns; undefined per-pattern values are skipped.
pub fn mean_row(rows: &[PatternMetrics]) -> Option<MetricRow> {
    if rows.is_empty() {
        return None;
    }
    let opt = |f: fn(&PatternMetrics) -> Option<f64>| mean(rows.iter().filter_map(f)).unwrap_or(f64::NAN);
    Some(MetricRow {
        nd: mean(rows.iter().map(|r| r.nd as f64)).unwrap(),
        up: mean(rows.iter().map(|r| r.up as f64)).unwrap(),
        ks: opt(|r| r.ks),
        va: opt(|r| r.va),
        da: opt(|r| r.da),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub segment: MaskedSegment,
    pub original: PatternMetrics,
    pub generated: PatternMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Ok,
    NoEligibleNodes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Option<TaskKind>,
    pub status: ReportStatus,
    pub nodes: Vec<NodeMetrics>,
    pub excluded_drum_nodes: Vec<usize>,
    pub original_mean: Option<MetricRow>,
    pub generated_mean: Option<MetricRow>,
    /// Published full-dataset values, for orientation only.
    pub reference_ground_truth: MetricRow,
    /// How KS and DA were computed.
    pub conventions: Conventions,
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub key_score: String,
    pub minor_scale: String,
    pub duration_unit: String,
    pub velocity_unit: String,
}

fn segment_notes(score: &Score, seg: &MaskedSegment) -> Vec<Note> {
    score.notes.iter().filter(|n| seg.contains(n)).copied().collect()
}

/// Metrics of every masked non-drum segment on both scores.
pub fn evaluate_task(
    original: &Score,
    generated: &Score,
    masked: &[MaskedSegment],
    task: Option<TaskKind>,
) -> MetricsReport {
    let key = original.key;
    let (drums, eligible): (Vec<&MaskedSegment>, Vec<&MaskedSegment>) =
        masked.iter().partition(|s| s.instrument.is_drums());
    let nodes: Vec<NodeMetrics> = eligible
        .into_iter()
        .map(|seg| NodeMetrics {
            segment: seg.clone(),
            original: PatternMetrics::of(&segment_notes(original, seg), key),
            generated: PatternMetrics::of(&segment_notes(generated, seg), key),
        })
        .collect();
    let originals: Vec<_> = nodes.iter().map(|n| n.original).collect();
    let generateds: Vec<_> = nodes.iter().map(|n| n.generated).collect();
    MetricsReport {
        task,
        status: if nodes.is_empty() {
            ReportStatus::NoEligibleNodes
        } else {
            ReportStatus::Ok
        },
        excluded_drum_nodes: drums.iter().map(|s| s.node).collect(),
        original_mean: mean_row(&originals),
        generated_mean: mean_row(&generateds),
        nodes,
        reference_ground_truth: REFERENCE_GROUND_TRUTH,
        conventions: Conventions {
            key_score: if key.is_some() {
                "labeled key".into()
            } else {
                "best of 24 keys".into()
            },
            minor_scale: "natural minor".into(),
            duration_unit: "quarter notes".into(),
            velocity_unit: "MIDI velocity".into(),
        },
        meta: serde_json::Value::Null,
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize") + "\n"
    }

    /// One line per (node, source).
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut out = String::from("node,instrument,start_bar,length,source,nd,up,ks,va,da\n");
        for n in &self.nodes {
            for (source, m) in [("original", &n.original), ("generated", &n.generated)] {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    n.segment.node,
                    n.segment.instrument,
                    n.segment.start_bar,
                    n.segment.length,
                    source,
                    m.nd,
                    m.up,
                    opt(m.ks),
                    opt(m.va),
                    opt(m.da)
                );
            }
        }
        out
    }

    /// Mean rows laid out like a Task × Metric table.
    pub fn to_table(&self) -> String {
        let task = match self.task {
            Some(TaskKind::Generate) => "Generation",
            Some(TaskKind::Inpaint) => "Inpainting",
            Some(TaskKind::MelodyConditioned) => "Cond. Generation",
            None => "Generated",
        };
        let mut out = format!(
            "{:<28}{:>8}{:>8}{:>8}{:>8}{:>8}\n",
            "Task \\ Metric", "ND", "UP", "KS", "VA", "DA"
        );
        let mut row = |label: &str, r: Option<MetricRow>| {
            let _ = match r {
                Some(r) => writeln!(
                    out,
                    "{label:<28}{:>8.2}{:>8.2}{:>8.2}{:>8.2}{:>8.2}",
                    r.nd, r.up, r.ks, r.va, r.da
                ),
                None => writeln!(out, "{label:<28}{:>8}", "n/a"),
            };
        };
        row("reference (published)", Some(self.reference_ground_truth));
        row("original (this song)", self.original_mean);
        row(task, self.generated_mean);
        out
    }
}
