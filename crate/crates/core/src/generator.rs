//! Node representation → pattern latent network with additive skips, and
//! the three generation tasks built on it: inpainting, continuation from the
//! opening bars, and melody-conditioned accompaniment.

use std::collections::BTreeSet;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ParamSet, Sidecar};
use crate::conlon::{decode_conlon, from_bar_note, ConlonImage};
use crate::error::{Error, Result};
use crate::graph::{EdgeKind, SongStructureGraph};
use crate::latent::{Autoencoder, LatentVector, LEAKY_SLOPE};
use crate::midi::{Note, Score};
use crate::music::InstrumentId;
use crate::rgcn::{sample_mask, Rgcn, RgcnConfig, RgcnInput};
use crate::tensor::{Sgd, Tape, Tensor, Var};

pub const KIND: &str = "generator";
/// Bars kept by the continuation task.
pub const DEFAULT_HORIZON: usize = 8;
/// Decoded cells quieter than this velocity are not turned into notes.
pub const GENERATED_DECODE_THRESHOLD: f32 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorDims {
    pub d_in: usize,
    /// Width of the outer layers (joined by the skip).
    pub width: usize,
    pub bottleneck: usize,
    pub d_z: usize,
}

impl GeneratorDims {
    pub fn new(d_in: usize, d_z: usize) -> Self {
        GeneratorDims {
            d_in,
            width: 128,
            bottleneck: 64,
            d_z,
        }
    }
}

/// `e1 = σ(x W1)`, `e2 = σ(e1 W2)`, `d1 = σ(e2 W3) + e1`, `z = d1 W4`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    dims: GeneratorDims,
    params: ParamSet,
}

const LAYERS: [&str; 4] = ["enc1", "enc2", "dec1", "dec2"];

impl Generator {
    pub fn new(dims: GeneratorDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let shapes = [
            (dims.d_in, dims.width),
            (dims.width, dims.bottleneck),
            (dims.bottleneck, dims.width),
            (dims.width, dims.d_z),
        ];
        for (name, (r, c)) in LAYERS.iter().zip(shapes) {
            params.push(format!("{name}.w"), Tensor::glorot(r, c, &mut rng));
            params.push(format!("{name}.b"), Tensor::zeros(1, c));
        }
        Generator { dims, params }
    }

    pub fn dims(&self) -> GeneratorDims {
        self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn with_params(&self, params: ParamSet) -> Self {
        assert_eq!(params.names(), self.params.names());
        Generator {
            dims: self.dims,
            params,
        }
    }

    fn forward_on(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let layer = |tape: &mut Tape, i: usize, x: Var| tape.affine(x, vars[2 * i], vars[2 * i + 1]);
        let e1 = layer(tape, 0, x);
        let e1 = tape.leaky_relu(e1, LEAKY_SLOPE);
        let e2 = layer(tape, 1, e1);
        let e2 = tape.leaky_relu(e2, LEAKY_SLOPE);
        let d1 = layer(tape, 2, e2);
        let d1 = tape.leaky_relu(d1, LEAKY_SLOPE);
        let d1 = tape.add(d1, e1);
        layer(tape, 3, d1)
    }

    /// Latents for every row of `inputs` (`[n, d_in]`).
    pub fn forward_batch(&self, inputs: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let x = tape.constant(inputs.clone());
        let out = self.forward_on(&mut tape, &vars, x);
        tape.value(out).clone()
    }

    pub fn forward(&self, node_repr: &[f64]) -> LatentVector {
        assert_eq!(node_repr.len(), self.dims.d_in, "node representation width");
        LatentVector(self.forward_batch(&Tensor::row_vector(node_repr.to_vec())).into_data())
    }

    fn record(&self, params: &[Tensor], inputs: &Tensor, targets: &Tensor) -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
        let x = tape.constant(inputs.clone());
        let out = self.forward_on(&mut tape, &vars, x);
        let loss = tape.mse(out, targets.clone());
        (tape, vars, loss)
    }

    pub fn loss_with(&self, params: &[Tensor], inputs: &Tensor, targets: &Tensor) -> f64 {
        let (tape, _, loss) = self.record(params, inputs, targets);
        tape.value(loss).item()
    }

    pub fn loss_and_grads(&self, params: &[Tensor], inputs: &Tensor, targets: &Tensor) -> (f64, Vec<Tensor>) {
        let (tape, vars, loss) = self.record(params, inputs, targets);
        let mut grads = tape.backward(loss);
        let g = vars
            .iter()
            .zip(params)
            .map(|(&v, t)| grads.take_or_zeros(v, t))
            .collect();
        (tape.value(loss).item(), g)
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.params
            .save(path, KIND, serde_json::json!({ "dims": self.dims, "run": meta }))
    }

    pub fn load(path: &Path) -> Result<(Self, Sidecar)> {
        let (params, sidecar) = ParamSet::load(path)?;
        sidecar.expect_kind(KIND)?;
        let dims: GeneratorDims = serde_json::from_value(sidecar.meta["dims"].clone())?;
        let template = Generator::new(dims, 0);
        if params.names() != template.params.names() {
            return Err(Error::Checkpoint(
                "parameter layout does not match the recorded dims".into(),
            ));
        }
        Ok((template.with_params(params), sidecar))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub width: usize,
    pub bottleneck: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            width: 128,
            bottleneck: 64,
            epochs: 200,
            lr: 0.05,
            momentum: 0.9,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedGenerator {
    pub model: Generator,
    /// Mean batch MSE per epoch, measured before each update.
    pub loss_trace: Vec<f64>,
}

/// Minimizes the latent MSE over `(node representation, target latent)` pairs.
pub fn train_generator(pairs: &[(Vec<f64>, LatentVector)], config: &GeneratorConfig) -> Result<TrainedGenerator> {
    let Some((x0, z0)) = pairs.first() else {
        return Err(Error::EmptyDataset);
    };
    let dims = GeneratorDims {
        d_in: x0.len(),
        width: config.width,
        bottleneck: config.bottleneck,
        d_z: z0.dim(),
    };
    let mut model = Generator::new(dims, config.seed);
    let mut params = model.params.tensors().to_vec();
    let mut opt = Sgd::new(config.lr, config.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x67656e00);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch.max(1)) {
            let x = Tensor::from_rows(&chunk.iter().map(|&i| pairs[i].0.clone()).collect::<Vec<_>>());
            let z = Tensor::from_rows(&chunk.iter().map(|&i| pairs[i].1 .0.clone()).collect::<Vec<_>>());
            let (loss, grads) = model.loss_and_grads(&params, &x, &z);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    stage: "epoch",
                    index: epoch,
                });
            }
            opt.step(&mut params, &grads);
            total += loss;
            batches += 1;
        }
        trace.push(total / batches as f64);
    }
    model.params = model.params.with_tensors(params);
    Ok(TrainedGenerator {
        model,
        loss_trace: trace,
    })
}

/// Training pairs for the generator: final RGCN representations of masked
/// nodes and their true latents, over `samples` masked views per graph.
pub fn generator_pairs(
    graphs: &[SongStructureGraph],
    rgcn: &Rgcn,
    config: &RgcnConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, LatentVector)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for graph in graphs {
        let input = RgcnInput::from_graph(graph, rgcn.dims().instruments)?;
        if input.latents.iter().all(Option::is_none) {
            continue;
        }
        for _ in 0..samples {
            let masked = sample_mask(&input.latents, config.mask_ratio, &mut rng)?;
            let hidden = rgcn.forward(&input.masked(&masked)).hidden;
            for &i in &masked {
                pairs.push((hidden.row(i).to_vec(), input.latents[i].clone().unwrap()));
            }
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Inpaint,
    Generate,
    MelodyConditioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Inpainting mask ratio.
    pub mask_ratio: f64,
    /// Bars kept by [`TaskKind::Generate`].
    pub horizon: usize,
    /// Velocity floor for notes decoded from generated images.
    pub decode_threshold: f32,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        TaskSpec {
            kind,
            mask_ratio: 0.3,
            horizon: DEFAULT_HORIZON,
            decode_threshold: GENERATED_DECODE_THRESHOLD,
            seed,
        }
    }
}

/// Instrument with the most homogeneity-edge endpoints (ties to the lower
/// id). Falls back to the instrument with the most patterns when the graph
/// has no homogeneity edges; the flag reports the fallback.
pub fn primary_instrument(graph: &SongStructureGraph) -> Option<(InstrumentId, bool)> {
    let instruments = graph.instruments();
    let best = |score: &dyn Fn(InstrumentId) -> usize| {
        instruments
            .iter()
            .copied()
            .max_by(|&a, &b| score(a).cmp(&score(b)).then(b.cmp(&a)))
    };
    if graph.edges_of(EdgeKind::SimilarHomogeneity).next().is_some() {
        best(&|i| graph.incidences(EdgeKind::SimilarHomogeneity, i)).map(|i| (i, false))
    } else {
        warn!(
            "graph `{}` has no homogeneity edges; using the most populated instrument",
            graph.song_id
        );
        best(&|i| graph.nodes.iter().filter(|n| n.instrument == i).count()).map(|i| (i, true))
    }
}

/// Node ids to mask for `spec`, plus the primary instrument for the melody task.
pub fn select_mask(graph: &SongStructureGraph, spec: &TaskSpec) -> Result<(Vec<usize>, Option<(InstrumentId, bool)>)> {
    let (masked, primary) = match spec.kind {
        TaskKind::Inpaint => {
            let latents: Vec<_> = graph.nodes.iter().map(|n| n.latent.clone()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            (sample_mask(&latents, spec.mask_ratio, &mut rng)?, None)
        }
        TaskKind::Generate => {
            let ids = graph
                .nodes
                .iter()
                .filter(|n| n.end_bar() > spec.horizon)
                .map(|n| n.id)
                .collect();
            (ids, None)
        }
        TaskKind::MelodyConditioned => {
            let primary = primary_instrument(graph);
            let keep = primary.map(|p| p.0);
            let ids = graph
                .nodes
                .iter()
                .filter(|n| Some(n.instrument) != keep)
                .map(|n| n.id)
                .collect();
            (ids, primary)
        }
    };
    if masked.is_empty() {
        return Err(Error::EmptyMask(format!(
            "{:?} task masks no node of `{}`",
            spec.kind, graph.song_id
        )));
    }
    Ok((masked, primary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedSegment {
    pub node: usize,
    pub instrument: InstrumentId,
    pub start_bar: usize,
    pub length: usize,
}

impl MaskedSegment {
    pub fn contains(&self, note: &Note) -> bool {
        let bar = note.bar() as usize;
        note.instrument == self.instrument && bar >= self.start_bar && bar < self.start_bar + self.length
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: TaskKind,
    pub song_id: String,
    pub seed: u64,
    pub masked: Vec<MaskedSegment>,
    pub primary_instrument: Option<InstrumentId>,
    pub primary_fallback: bool,
    /// Masked drum nodes; drums are generated but excluded from metrics.
    pub drum_nodes: Vec<usize>,
    pub generated_notes: usize,
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutput {
    pub score: Score,
    /// Predicted latent of every masked node, by node id.
    pub latents: Vec<(usize, LatentVector)>,
    pub report: TaskReport,
}

/// The trained models a task needs.
pub struct TaskModels<'a> {
    pub codec: &'a Autoencoder,
    pub rgcn: &'a Rgcn,
    pub generator: &'a Generator,
}

/// Notes of `image` repeated over every bar of a segment.
pub fn tile_bar(image: &ConlonImage, segment: &MaskedSegment, threshold: f32) -> Vec<Note> {
    let bar_notes = decode_conlon(image, threshold);
    (0..segment.length)
        .flat_map(|k| {
            let bar = (segment.start_bar + k) as u32;
            bar_notes
                .iter()
                .map(move |bn| from_bar_note(bar, segment.instrument, bn))
        })
        .collect()
}

/// Replaces the notes inside each masked segment with `generated[k]`. Notes
/// outside the segments are never modified: a generated note is dropped when
/// a kept note of the same pitch is still sounding at its onset.
pub fn splice(original: &Score, segments: &[MaskedSegment], generated: &[Vec<Note>]) -> Score {
    assert_eq!(segments.len(), generated.len());
    let kept: Vec<Note> = original
        .notes
        .iter()
        .filter(|n| !segments.iter().any(|s| s.contains(n)))
        .copied()
        .collect();
    let sounding = |g: &Note| {
        kept.iter().any(|k| {
            k.instrument == g.instrument && k.pitch == g.pitch && k.onset <= g.onset && g.onset < k.onset + k.duration
        })
    };
    let mut notes = kept.clone();
    let mut seen = BTreeSet::new();
    for (seg, gen) in segments.iter().zip(generated) {
        for g in gen {
            if seg.contains(g) && !sounding(g) && seen.insert((g.onset, g.instrument, g.pitch)) {
                notes.push(*g);
            }
        }
    }
    let mut score = Score {
        notes,
        ..original.clone()
    };
    score.normalize();
    score.bars = score.bars.max(original.bars);
    score
}

pub fn run_task(
    graph: &SongStructureGraph,
    original: &Score,
    spec: &TaskSpec,
    models: &TaskModels,
) -> Result<TaskOutput> {
    let (masked, primary) = select_mask(graph, spec)?;
    let input = RgcnInput::from_graph(graph, models.rgcn.dims().instruments)?.masked(&masked);
    let hidden = models.rgcn.forward(&input).hidden;
    let rows: Vec<Vec<f64>> = masked.iter().map(|&i| hidden.row(i).to_vec()).collect();
    let predicted = models.generator.forward_batch(&Tensor::from_rows(&rows));

    let mut segments = Vec::with_capacity(masked.len());
    let mut generated = Vec::with_capacity(masked.len());
    let mut latents = Vec::with_capacity(masked.len());
    for (k, &id) in masked.iter().enumerate() {
        let node = &graph.nodes[id];
        let z = LatentVector(predicted.row(k).to_vec());
        let image = models.codec.decode(&z)?;
        let seg = MaskedSegment {
            node: id,
            instrument: node.instrument,
            start_bar: node.start_bar,
            length: node.length,
        };
        generated.push(tile_bar(&image, &seg, spec.decode_threshold));
        segments.push(seg);
        latents.push((id, z));
    }
    let score = splice(original, &segments, &generated);
    let report = TaskReport {
        task: spec.kind,
        song_id: graph.song_id.clone(),
        seed: spec.seed,
        drum_nodes: segments
            .iter()
            .filter(|s| s.instrument.is_drums())
            .map(|s| s.node)
            .collect(),
        generated_notes: score
            .notes
            .iter()
            .filter(|n| segments.iter().any(|s| s.contains(n)))
            .count(),
        masked: segments,
        primary_instrument: primary.map(|p| p.0),
        primary_fallback: primary.is_some_and(|p| p.1),
        meta: serde_json::Value::Null,
    };
    Ok(TaskOutput { score, latents, report })
}
