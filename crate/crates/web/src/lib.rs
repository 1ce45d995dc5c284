//! Browser bindings for song-structure analysis. The page in `www/` loads
//! the wasm build and calls the three exported operations.
//!
//! Every operation has a plain Rust twin returning `Result<String, String>`
//! so it can be tested natively; the wasm wrappers only translate errors.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use songgraph::graph::{build_graph_with_analysis, EdgeKind, GraphConfig};
use songgraph::latent::BaselineEmbedder;
use songgraph::midi::{load_score, InstrumentScheme};
use songgraph::structure::{checkerboard_kernel, NoveltyParams};

/// The 32-bar, three-instrument song shipped with the test suite.
pub const DEMO_SONG: &[u8] = include_bytes!("../../core/tests/data/song32.mid");

/// Latent width of the fixed embedder used in the browser.
const D_Z: usize = 32;

#[derive(Debug, Clone, Copy)]
pub struct Params {
    pub pl: usize,
    pub kernel_l: usize,
    pub sigma: f64,
    /// Negative means the automatic threshold.
    pub novelty_thresh: f64,
    pub ssm_thresh: f64,
    pub hu_thresh: f64,
}

impl Params {
    fn graph_config(&self) -> Result<GraphConfig, String> {
        if self.pl == 0 || self.kernel_l == 0 || !(self.sigma > 0.0) {
            return Err("pattern length and kernel width must be at least 1, sigma positive".into());
        }
        Ok(GraphConfig {
            pattern_length: self.pl,
            novelty: NoveltyParams {
                half_width: self.kernel_l,
                sigma: self.sigma,
            },
            novelty_threshold: (self.novelty_thresh >= 0.0).then_some(self.novelty_thresh),
            ssm_threshold: self.ssm_thresh,
            hu_threshold: self.hu_thresh,
        })
    }
}

#[derive(Serialize)]
struct KernelView {
    half_width: usize,
    sigma: f64,
    size: usize,
    values: Vec<f64>,
}

pub fn kernel_json(half_width: usize, sigma: f64) -> Result<String, String> {
    if half_width == 0 || half_width > 64 || !(sigma > 0.0) {
        return Err("kernel width must be in 1..=64 and sigma positive".into());
    }
    let k = checkerboard_kernel(half_width, sigma);
    let view = KernelView {
        half_width,
        sigma,
        size: k.size(),
        values: k.values().to_vec(),
    };
    Ok(serde_json::to_string(&view).unwrap())
}

#[derive(Serialize)]
struct NodeView {
    id: usize,
    start_bar: usize,
    length: usize,
    instrument: u8,
    instrument_name: String,
}

#[derive(Serialize)]
struct EdgeView {
    kind: EdgeKind,
    src: usize,
    dst: usize,
}

#[derive(Serialize)]
struct AnalysisView {
    bars: usize,
    key: Option<String>,
    genre: Option<String>,
    ssm: Vec<f64>,
    novelty: Vec<f64>,
    threshold: f64,
    boundaries: Vec<usize>,
    nodes: Vec<NodeView>,
    edges: Vec<EdgeView>,
    edge_counts: Vec<(EdgeKind, usize)>,
}

/// SSM, novelty, boundaries and the song-structure graph of a MIDI file.
pub fn analyze_json(midi: &[u8], params: Params) -> Result<String, String> {
    let config = params.graph_config()?;
    let scheme = InstrumentScheme::default();
    let score = load_score(midi, &scheme).map_err(|e| e.to_string())?;
    if score.notes.is_empty() {
        return Err("the file has no notes".into());
    }
    let embedder = BaselineEmbedder::new(D_Z, BaselineEmbedder::DEFAULT_SEED);
    let (graph, analysis) =
        build_graph_with_analysis(&score, "upload", &embedder, &config).map_err(|e| e.to_string())?;
    let view = AnalysisView {
        bars: graph.bars,
        key: score.key.map(|k| k.to_string()),
        genre: score.genre.clone(),
        ssm: analysis.ssm.values().to_vec(),
        novelty: analysis.novelty.values.clone(),
        threshold: analysis.threshold,
        boundaries: analysis.boundaries.clone(),
        nodes: graph
            .nodes
            .iter()
            .map(|n| NodeView {
                id: n.id,
                start_bar: n.start_bar,
                length: n.length,
                instrument: n.instrument.0,
                instrument_name: scheme.name(n.instrument).unwrap_or("unknown").to_string(),
            })
            .collect(),
        edges: graph
            .edges
            .iter()
            .filter(|e| !(e.kind.is_symmetric() && e.src > e.dst))
            .map(|e| EdgeView {
                kind: e.kind,
                src: e.src,
                dst: e.dst,
            })
            .collect(),
        edge_counts: EdgeKind::ALL.iter().map(|&k| (k, graph.edges_of(k).count())).collect(),
    };
    Ok(serde_json::to_string(&view).unwrap())
}

#[wasm_bindgen]
pub fn demo_song() -> Vec<u8> {
    DEMO_SONG.to_vec()
}

#[wasm_bindgen]
pub fn kernel(half_width: usize, sigma: f64) -> Result<String, JsError> {
    kernel_json(half_width, sigma).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn analyze(
    midi: &[u8],
    pl: usize,
    kernel_l: usize,
    sigma: f64,
    novelty_thresh: f64,
    ssm_thresh: f64,
    hu_thresh: f64,
) -> Result<String, JsError> {
    let params = Params {
        pl,
        kernel_l,
        sigma,
        novelty_thresh,
        ssm_thresh,
        hu_thresh,
    };
    analyze_json(midi, params).map_err(|e| JsError::new(&e))
}
