//! The song-structure graph: musical-pattern nodes cut from the bar grid at
//! novelty boundaries, connected by four typed relations.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conlon::{
    decode_conlon, encode_conlon, from_bar_note, split_bars, BarSequence, Channel, ConlonImage,
    DEFAULT_DECODE_THRESHOLD, STEPS,
};
use crate::error::{Error, Result};
use crate::latent::{BarEmbedder, LatentVector};
use crate::midi::{Note, Score};
use crate::music::{InstrumentId, KeyLabel, PITCHES};
use crate::structure::{
    compute_ssm, detect_boundaries, hu_distance, hu_signature_grid, novelty, HuSignature, NoveltyCurve, NoveltyParams,
    SimilarityMatrix, DEFAULT_HU_THRESHOLD, DEFAULT_SSM_THRESHOLD,
};

pub const SCHEMA: &str = "ssg/1";
pub const DEFAULT_PATTERN_LENGTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Pattern length `pl`, in bars.
    pub pattern_length: usize,
    pub novelty: NoveltyParams,
    /// `None` uses the curve's default threshold.
    pub novelty_threshold: Option<f64>,
    pub ssm_threshold: f64,
    pub hu_threshold: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            pattern_length: DEFAULT_PATTERN_LENGTH,
            novelty: NoveltyParams::default(),
            novelty_threshold: None,
            ssm_threshold: DEFAULT_SSM_THRESHOLD,
            hu_threshold: DEFAULT_HU_THRESHOLD,
        }
    }
}

/// One instrument over one bar segment.
#[derive(Debug, Clone, PartialEq)]
pub struct MusicalPattern {
    pub id: usize,
    pub start_bar: usize,
    pub length: usize,
    pub instrument: InstrumentId,
    pub key: Option<KeyLabel>,
    /// One image per bar of the segment; silent bars are all zero.
    pub images: Vec<ConlonImage>,
    /// `None` marks the node as masked.
    pub latent: Option<LatentVector>,
    pub hu: Option<HuSignature>,
}

impl MusicalPattern {
    pub fn end_bar(&self) -> usize {
        self.start_bar + self.length
    }

    pub fn is_masked(&self) -> bool {
        self.latent.is_none()
    }

    pub fn overlaps(&self, other: &MusicalPattern) -> bool {
        self.start_bar < other.end_bar() && other.start_bar < self.end_bar()
    }

    /// Notes of the pattern in absolute grid time.
    pub fn notes(&self) -> Vec<Note> {
        self.images
            .iter()
            .enumerate()
            .flat_map(|(k, img)| {
                let bar = (self.start_bar + k) as u32;
                decode_conlon(img, DEFAULT_DECODE_THRESHOLD)
                    .into_iter()
                    .map(move |bn| from_bar_note(bar, self.instrument, &bn))
            })
            .collect()
    }

    /// Hu signature of the bar images laid side by side; `None` when silent.
    pub fn compute_hu(&self) -> Option<HuSignature> {
        let width = STEPS * self.images.len();
        let mut grid = vec![0.0f32; PITCHES * width];
        for (k, img) in self.images.iter().enumerate() {
            let vel = img.channel(Channel::Velocity);
            for p in 0..PITCHES {
                grid[p * width + k * STEPS..p * width + (k + 1) * STEPS]
                    .copy_from_slice(&vel[p * STEPS..(p + 1) * STEPS]);
            }
        }
        hu_signature_grid(&grid, width).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    SameTime,
    SameInstrumentFlow,
    SameSongStructure,
    SimilarHomogeneity,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 4] = [
        EdgeKind::SameTime,
        EdgeKind::SameInstrumentFlow,
        EdgeKind::SameSongStructure,
        EdgeKind::SimilarHomogeneity,
    ];

    pub fn is_symmetric(self) -> bool {
        self != EdgeKind::SameInstrumentFlow
    }

    fn dot_color(self) -> &'static str {
        match self {
            EdgeKind::SameTime => "gray40",
            EdgeKind::SameInstrumentFlow => "blue",
            EdgeKind::SameSongStructure => "red",
            EdgeKind::SimilarHomogeneity => "darkgreen",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeRelation {
    pub kind: EdgeKind,
    pub src: usize,
    pub dst: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SongStructureGraph {
    pub song_id: String,
    pub genre: Option<String>,
    pub bars: usize,
    pub nodes: Vec<MusicalPattern>,
    /// Sorted by (kind, src, dst), duplicate free.
    pub edges: Vec<EdgeRelation>,
    /// Free-form provenance (effective config, seed) carried into the JSON.
    pub meta: serde_json::Value,
}

impl SongStructureGraph {
    pub fn edges_of(&self, kind: EdgeKind) -> impl Iterator<Item = &EdgeRelation> {
        self.edges.iter().filter(move |e| e.kind == kind)
    }

    /// Sorts and deduplicates edges; call after editing `edges` by hand.
    pub fn canonicalize_edges(&mut self) {
        let set: BTreeSet<EdgeRelation> = self.edges.drain(..).collect();
        self.edges = set.into_iter().collect();
    }

    pub fn instruments(&self) -> Vec<InstrumentId> {
        let set: BTreeSet<InstrumentId> = self.nodes.iter().map(|n| n.instrument).collect();
        set.into_iter().collect()
    }

    /// Number of endpoints each instrument has among `kind` edges, counting
    /// each symmetric pair once per endpoint.
    pub fn incidences(&self, kind: EdgeKind, instrument: InstrumentId) -> usize {
        self.edges_of(kind)
            .filter(|e| !kind.is_symmetric() || e.src < e.dst)
            .map(|e| {
                (self.nodes[e.src].instrument == instrument) as usize
                    + (self.nodes[e.dst].instrument == instrument) as usize
            })
            .sum()
    }

    /// All notes of all patterns, as a score carrying the graph's genre.
    pub fn to_score(&self, template: &Score) -> Score {
        let notes = self.nodes.iter().flat_map(MusicalPattern::notes).collect();
        let mut score = Score {
            notes,
            key: template.key,
            genre: template.genre.clone(),
            ticks_per_quarter: template.ticks_per_quarter,
            tempo_us_per_quarter: template.tempo_us_per_quarter,
            bars: 0,
        };
        score.normalize();
        score
    }

    pub fn validate(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Graph(format!("node at position {i} has id {}", n.id)));
            }
            if n.length == 0 || n.images.len() != n.length {
                return Err(Error::Graph(format!("node {i} has inconsistent length")));
            }
        }
        for e in &self.edges {
            if e.src >= self.nodes.len() || e.dst >= self.nodes.len() {
                return Err(Error::Graph(format!("edge {e:?} references a missing node")));
            }
        }
        if self.edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Graph("edges are not sorted and unique".into()));
        }
        Ok(())
    }
}

/// Intermediate products of the structure analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureAnalysis {
    pub bar_latents: Vec<LatentVector>,
    pub ssm: SimilarityMatrix,
    pub novelty: NoveltyCurve,
    pub threshold: f64,
    pub boundaries: Vec<usize>,
}

/// Embeds each bar (all instruments summed), then SSM, novelty and boundaries.
pub fn analyze_structure(
    bars: &BarSequence,
    embedder: &dyn BarEmbedder,
    config: &GraphConfig,
) -> Result<StructureAnalysis> {
    let bar_latents = (0..bars.bars())
        .map(|b| {
            let merged = bars.merged_bar(b);
            if merged.is_empty() {
                Ok(LatentVector::zeros(embedder.dim()))
            } else {
                embedder.embed(&merged)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let ssm = compute_ssm(&bar_latents);
    let curve = novelty(&ssm, config.novelty);
    let threshold = config.novelty_threshold.unwrap_or_else(|| curve.default_threshold());
    let boundaries = if ssm.is_empty() {
        Vec::new()
    } else {
        detect_boundaries(&curve.values, threshold)
    };
    Ok(StructureAnalysis {
        bar_latents,
        ssm,
        novelty: curve,
        threshold,
        boundaries,
    })
}

/// Bar segments `[start, end)`: one per unused starting point, then the
/// uncovered remainder cut into `pl`-sized chunks. Together they tile `[0, n)`.
pub fn segment_bars(boundaries: &[usize], n: usize, pl: usize) -> Vec<(usize, usize)> {
    assert!(pl >= 1, "pattern length must be at least 1");
    let mut used = vec![false; n];
    let mut segments = Vec::new();
    for &t in boundaries {
        if t >= n || used[t] {
            continue;
        }
        let end = (t + pl).min(n);
        used[t..end].iter_mut().for_each(|u| *u = true);
        segments.push((t, end));
    }
    let mut b = 0;
    while b < n {
        if used[b] {
            b += 1;
            continue;
        }
        let run_end = (b..n).find(|&x| used[x]).unwrap_or(n);
        let mut s = b;
        while s < run_end {
            let e = (s + pl).min(run_end);
            segments.push((s, e));
            s = e;
        }
        b = run_end;
    }
    segments.sort();
    segments
}

pub fn build_graph(
    score: &Score,
    song_id: &str,
    embedder: &dyn BarEmbedder,
    config: &GraphConfig,
) -> Result<SongStructureGraph> {
    build_graph_with_analysis(score, song_id, embedder, config).map(|(g, _)| g)
}

pub fn build_graph_with_analysis(
    score: &Score,
    song_id: &str,
    embedder: &dyn BarEmbedder,
    config: &GraphConfig,
) -> Result<(SongStructureGraph, StructureAnalysis)> {
    let bars = split_bars(score);
    let analysis = analyze_structure(&bars, embedder, config)?;
    let mut graph = SongStructureGraph {
        song_id: song_id.to_string(),
        genre: score.genre.clone(),
        bars: bars.bars(),
        ..SongStructureGraph::default()
    };
    if score.notes.is_empty() {
        return Ok((graph, analysis));
    }

    for (start, end) in segment_bars(&analysis.boundaries, bars.bars(), config.pattern_length) {
        for &inst in bars.instruments() {
            if !(start..end).any(|b| bars.is_present(b, inst)) {
                continue;
            }
            let images: Vec<ConlonImage> = (start..end)
                .map(|b| bars.get(b, inst).cloned().unwrap_or_default())
                .collect();
            let latents = (start..end)
                .filter(|&b| bars.is_present(b, inst))
                .map(|b| embedder.embed(bars.get(b, inst).unwrap()))
                .collect::<Result<Vec<_>>>()?;
            let mut node = MusicalPattern {
                id: 0,
                start_bar: start,
                length: end - start,
                instrument: inst,
                key: score.key,
                images,
                latent: LatentVector::mean(&latents),
                hu: None,
            };
            node.hu = node.compute_hu();
            graph.nodes.push(node);
        }
    }
    graph.nodes.sort_by_key(|n| (n.start_bar, n.instrument));
    for (i, n) in graph.nodes.iter_mut().enumerate() {
        n.id = i;
    }

    let nodes = &graph.nodes;
    let mut edges = connect_same_time(nodes);
    edges.extend(connect_flow(nodes));
    edges.extend(connect_same_song_structure(nodes, &analysis.ssm, config.ssm_threshold));
    edges.extend(connect_similar_homogeneity(nodes, config.hu_threshold));
    graph.edges = edges;
    graph.canonicalize_edges();
    Ok((graph, analysis))
}

fn both_ways(kind: EdgeKind, a: usize, b: usize) -> [EdgeRelation; 2] {
    [
        EdgeRelation { kind, src: a, dst: b },
        EdgeRelation { kind, src: b, dst: a },
    ]
}

fn pairs(nodes: &[MusicalPattern]) -> impl Iterator<Item = (&MusicalPattern, &MusicalPattern)> {
    nodes
        .iter()
        .enumerate()
        .flat_map(move |(i, a)| nodes[i + 1..].iter().map(move |b| (a, b)))
}

/// Different instruments sounding over overlapping segments.
pub fn connect_same_time(nodes: &[MusicalPattern]) -> Vec<EdgeRelation> {
    pairs(nodes)
        .filter(|(a, b)| a.instrument != b.instrument && a.overlaps(b))
        .flat_map(|(a, b)| both_ways(EdgeKind::SameTime, a.id, b.id))
        .collect()
}

/// Same instrument, next segment starting where this one ends. Directed forward.
pub fn connect_flow(nodes: &[MusicalPattern]) -> Vec<EdgeRelation> {
    nodes
        .iter()
        .flat_map(|a| {
            nodes
                .iter()
                .filter(move |b| b.instrument == a.instrument && b.start_bar == a.end_bar())
                .map(move |b| EdgeRelation {
                    kind: EdgeKind::SameInstrumentFlow,
                    src: a.id,
                    dst: b.id,
                })
        })
        .collect()
}

/// Same instrument, start bars strictly more similar than `threshold`.
pub fn connect_same_song_structure(
    nodes: &[MusicalPattern],
    ssm: &SimilarityMatrix,
    threshold: f64,
) -> Vec<EdgeRelation> {
    pairs(nodes)
        .filter(|(a, b)| a.instrument == b.instrument && ssm.get(a.start_bar, b.start_bar) > threshold)
        .flat_map(|(a, b)| both_ways(EdgeKind::SameSongStructure, a.id, b.id))
        .collect()
}

/// Any two patterns whose Hu signatures are closer than `threshold`.
pub fn connect_similar_homogeneity(nodes: &[MusicalPattern], threshold: f64) -> Vec<EdgeRelation> {
    let usable = |n: &MusicalPattern| n.hu.filter(|h| !h.is_degenerate());
    pairs(nodes)
        .filter_map(|(a, b)| Some((a.id, b.id, usable(a)?, usable(b)?)))
        .filter(|(_, _, ha, hb)| hu_distance(ha, hb) < threshold)
        .flat_map(|(a, b, _, _)| both_ways(EdgeKind::SimilarHomogeneity, a, b))
        .collect()
}

// ---- serialization ----

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    schema: String,
    song_id: String,
    genre: Option<String>,
    bars: usize,
    meta: serde_json::Value,
    nodes: Vec<NodeDoc>,
    edges: Vec<EdgeRelation>,
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: usize,
    start_bar: usize,
    length: usize,
    instrument: InstrumentId,
    key: Option<KeyLabel>,
    masked: bool,
    latent: Option<LatentVector>,
    hu: Option<HuSignature>,
    /// Non-zero CONLON cells: `[bar offset, pitch, step, velocity, duration]`.
    cells: Vec<(usize, usize, usize, f32, f32)>,
}

fn node_doc(n: &MusicalPattern) -> NodeDoc {
    let mut cells = Vec::new();
    for (k, img) in n.images.iter().enumerate() {
        for p in 0..PITCHES {
            for t in 0..STEPS {
                let (v, d) = (img.velocity(p, t), img.duration(p, t));
                if v != 0.0 || d != 0.0 {
                    cells.push((k, p, t, v, d));
                }
            }
        }
    }
    NodeDoc {
        id: n.id,
        start_bar: n.start_bar,
        length: n.length,
        instrument: n.instrument,
        key: n.key,
        masked: n.is_masked(),
        latent: n.latent.clone(),
        hu: n.hu,
        cells,
    }
}

fn node_from_doc(d: NodeDoc) -> Result<MusicalPattern> {
    let mut images = vec![ConlonImage::zeros(); d.length];
    for (k, p, t, v, dur) in d.cells {
        if k >= d.length || p >= PITCHES || t >= STEPS {
            return Err(Error::Graph(format!("node {} has a cell outside its segment", d.id)));
        }
        images[k].set(p, t, v, dur);
    }
    if d.masked != d.latent.is_none() {
        return Err(Error::Graph(format!(
            "node {} masked flag disagrees with its latent",
            d.id
        )));
    }
    Ok(MusicalPattern {
        id: d.id,
        start_bar: d.start_bar,
        length: d.length,
        instrument: d.instrument,
        key: d.key,
        images,
        latent: d.latent,
        hu: d.hu,
    })
}

/// Compact, deterministic JSON.
pub fn serialize_graph(graph: &SongStructureGraph) -> String {
    let doc = GraphDoc {
        schema: SCHEMA.to_string(),
        song_id: graph.song_id.clone(),
        genre: graph.genre.clone(),
        bars: graph.bars,
        meta: graph.meta.clone(),
        nodes: graph.nodes.iter().map(node_doc).collect(),
        edges: graph.edges.clone(),
    };
    serde_json::to_string(&doc).expect("graph documents always serialize")
}

pub fn parse_graph(text: &str) -> Result<SongStructureGraph> {
    let doc: GraphDoc = serde_json::from_str(text)?;
    if doc.schema != SCHEMA {
        return Err(Error::Graph(format!("unsupported schema `{}`", doc.schema)));
    }
    let graph = SongStructureGraph {
        song_id: doc.song_id,
        genre: doc.genre,
        bars: doc.bars,
        nodes: doc.nodes.into_iter().map(node_from_doc).collect::<Result<_>>()?,
        edges: doc.edges,
        meta: doc.meta,
    };
    graph.validate()?;
    Ok(graph)
}

/// Graphviz text; symmetric relations are drawn once without arrowheads.
pub fn to_dot(graph: &SongStructureGraph) -> String {
    let mut out = String::from("digraph song {\n  node [shape=box, fontname=\"monospace\"];\n");
    for n in &graph.nodes {
        let _ = writeln!(
            out,
            "  n{} [label=\"#{} inst {}\\nbars {}-{}{}\"];",
            n.id,
            n.id,
            n.instrument,
            n.start_bar,
            n.end_bar() - 1,
            if n.is_masked() { "\\nmasked" } else { "" }
        );
    }
    for e in &graph.edges {
        if e.kind.is_symmetric() && e.src > e.dst {
            continue;
        }
        let dir = if e.kind.is_symmetric() { ", dir=none" } else { "" };
        let _ = writeln!(
            out,
            "  n{} -> n{} [color={}, label=\"{:?}\"{dir}];",
            e.src,
            e.dst,
            e.kind.dot_color(),
            e.kind
        );
    }
    out.push_str("}\n");
    out
}

/// Bar-note helper used by tests and the task splicer.
pub fn pattern_images_from_notes(notes: &[Note], start_bar: usize, length: usize) -> Vec<ConlonImage> {
    (0..length)
        .map(|k| {
            let bar = (start_bar + k) as u32;
            let bar_notes: Vec<_> = notes
                .iter()
                .filter(|n| n.bar() == bar)
                .map(|n| crate::conlon::to_bar_note(n).1)
                .collect();
            encode_conlon(&bar_notes)
        })
        .collect()
}
