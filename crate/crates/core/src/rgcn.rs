//! Relational graph convolution over song-structure graphs, trained to
//! recover masked pattern latents and to classify the song's genre.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ParamSet, Sidecar};
use crate::error::{Error, Result};
use crate::graph::{EdgeKind, EdgeRelation, SongStructureGraph};
use crate::latent::{LatentVector, DEFAULT_DZ, LEAKY_SLOPE};
use crate::music::{genre_index, InstrumentId, KeyLabel, GENRES};
use crate::tensor::{Sgd, SparseRows, Tape, Tensor, Var};

/// Same time, flow forward, flow backward, same song structure, similar homogeneity.
pub const RELATIONS: usize = 5;
pub const KIND: &str = "rgcn";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    SameTime,
    FlowForward,
    FlowBackward,
    SameSongStructure,
    SimilarHomogeneity,
}

impl Relation {
    pub const ALL: [Relation; RELATIONS] = [
        Relation::SameTime,
        Relation::FlowForward,
        Relation::FlowBackward,
        Relation::SameSongStructure,
        Relation::SimilarHomogeneity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Node subset and edge subset of a graph, in the graph's own node ids.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphView {
    pub nodes: Vec<usize>,
    pub edges: Vec<EdgeRelation>,
}

impl GraphView {
    pub fn full(graph: &SongStructureGraph) -> Self {
        GraphView {
            nodes: (0..graph.nodes.len()).collect(),
            edges: graph.edges.clone(),
        }
    }
}

/// Removes each undirected edge pair (or directed flow edge) with probability `p`.
pub fn drop_edge(view: &GraphView, p: f64, seed: u64) -> GraphView {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropped = std::collections::BTreeSet::new();
    for e in &view.edges {
        let canonical = if e.kind.is_symmetric() && e.src > e.dst {
            continue;
        } else {
            *e
        };
        if rng.gen_bool(p.clamp(0.0, 1.0)) {
            dropped.insert(canonical);
        }
    }
    let edges = view
        .edges
        .iter()
        .filter(|e| {
            let c = if e.kind.is_symmetric() && e.src > e.dst {
                EdgeRelation {
                    kind: e.kind,
                    src: e.dst,
                    dst: e.src,
                }
            } else {
                **e
            };
            !dropped.contains(&c)
        })
        .copied()
        .collect();
    GraphView {
        nodes: view.nodes.clone(),
        edges,
    }
}

/// Removes each node with probability `p`, along with its incident edges.
pub fn drop_node(view: &GraphView, p: f64, seed: u64) -> GraphView {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes: Vec<usize> = view
        .nodes
        .iter()
        .copied()
        .filter(|_| !rng.gen_bool(p.clamp(0.0, 1.0)))
        .collect();
    let edges = view
        .edges
        .iter()
        .filter(|e| nodes.binary_search(&e.src).is_ok() && nodes.binary_search(&e.dst).is_ok())
        .copied()
        .collect();
    GraphView { nodes, edges }
}

/// Dense per-node features and relation neighborhoods of one graph view.
#[derive(Debug, Clone, PartialEq)]
pub struct RgcnInput {
    pub key_slots: Vec<usize>,
    pub instrument_slots: Vec<usize>,
    pub start_bars: Vec<usize>,
    /// `None` means masked: the latent projection contributes zero.
    pub latents: Vec<Option<LatentVector>>,
    /// `neighbors[r][i]` lists the local nodes sending to node `i` under relation `r`.
    pub neighbors: [Vec<Vec<usize>>; RELATIONS],
}

impl RgcnInput {
    pub fn len(&self) -> usize {
        self.key_slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_slots.is_empty()
    }

    pub fn from_graph(graph: &SongStructureGraph, instruments: usize) -> Result<Self> {
        Self::from_view(graph, &GraphView::full(graph), instruments)
    }

    /// `instruments` is the instrument class count; id `instruments` itself
    /// is the "unknown" slot, anything above is an error.
    pub fn from_view(graph: &SongStructureGraph, view: &GraphView, instruments: usize) -> Result<Self> {
        let local = |id: usize| view.nodes.binary_search(&id).ok();
        let mut input = RgcnInput {
            key_slots: Vec::new(),
            instrument_slots: Vec::new(),
            start_bars: Vec::new(),
            latents: Vec::new(),
            neighbors: std::array::from_fn(|_| vec![Vec::new(); view.nodes.len()]),
        };
        for &id in &view.nodes {
            let node = &graph.nodes[id];
            input.key_slots.push(KeyLabel::slot(node.key));
            input
                .instrument_slots
                .push(instrument_slot(node.instrument, instruments)?);
            input.start_bars.push(node.start_bar);
            input.latents.push(node.latent.clone());
        }
        for e in &view.edges {
            let (Some(s), Some(d)) = (local(e.src), local(e.dst)) else {
                continue;
            };
            match e.kind {
                EdgeKind::SameTime => input.neighbors[Relation::SameTime.index()][d].push(s),
                EdgeKind::SameSongStructure => input.neighbors[Relation::SameSongStructure.index()][d].push(s),
                EdgeKind::SimilarHomogeneity => input.neighbors[Relation::SimilarHomogeneity.index()][d].push(s),
                EdgeKind::SameInstrumentFlow => {
                    input.neighbors[Relation::FlowForward.index()][d].push(s);
                    input.neighbors[Relation::FlowBackward.index()][s].push(d);
                }
            }
        }
        for rel in &mut input.neighbors {
            for list in rel.iter_mut() {
                list.sort_unstable();
                list.dedup();
            }
        }
        Ok(input)
    }

    /// Copy with the given local nodes masked.
    pub fn masked(&self, masked: &[usize]) -> Self {
        let mut out = self.clone();
        for &i in masked {
            out.latents[i] = None;
        }
        out
    }

    /// Row-normalized neighbor sums for relation `r` (`c_{i,r} = |N_i^r|`).
    fn mixer(&self, r: usize) -> SparseRows {
        SparseRows {
            input_rows: self.len(),
            rows: self.neighbors[r]
                .iter()
                .map(|list| {
                    let c = list.len() as f64;
                    list.iter().map(|&j| (j, 1.0 / c)).collect()
                })
                .collect(),
        }
    }
}

pub fn instrument_slot(id: InstrumentId, instruments: usize) -> Result<usize> {
    if (id.0 as usize) <= instruments {
        Ok(id.0 as usize)
    } else {
        Err(Error::UnknownInstrument(id.0))
    }
}

/// `T[2k] = sin(pos / 10000^(2k/d))`, `T[2k+1] = cos(pos / 10000^(2k/d))`.
pub fn sinusoidal(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let k = (i / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(k / dim as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgcnDims {
    pub layers: usize,
    pub d_h: usize,
    pub d_t: usize,
    pub d_z: usize,
    /// Instrument class count; the table has one extra "unknown" row.
    pub instruments: usize,
}

impl Default for RgcnDims {
    fn default() -> Self {
        RgcnDims {
            layers: 2,
            d_h: 64,
            d_t: 16,
            d_z: DEFAULT_DZ,
            instruments: 17,
        }
    }
}

/// Masked nodes, their true latents, and the song's genre class.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// Local node index and target latent.
    pub masked: Vec<(usize, LatentVector)>,
    pub genre: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    /// `None` when the graph has no usable genre label.
    pub class: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgcnOutput {
    /// Final node representations, `[n, d_h]`.
    pub hidden: Tensor,
    /// Predicted latents, `[n, d_z]`.
    pub latents: Tensor,
    /// Genre logits, `[1, 19]`.
    pub genre_logits: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rgcn {
    dims: RgcnDims,
    params: ParamSet,
}

struct Forward {
    h0: Var,
    hidden: Var,
    latents: Var,
    logits: Var,
}

impl Rgcn {
    pub fn new(dims: RgcnDims, seed: u64) -> Self {
        assert!(dims.layers >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.push("key_emb", Tensor::glorot(KeyLabel::SLOTS, dims.d_h, &mut rng));
        params.push("inst_emb", Tensor::glorot(dims.instruments + 1, dims.d_h, &mut rng));
        params.push("latent_proj", Tensor::glorot(dims.d_z, dims.d_h, &mut rng));
        for l in 0..dims.layers {
            let d_in = if l == 0 { dims.d_h + dims.d_t } else { dims.d_h };
            params.push(format!("layer{l}.w0"), Tensor::glorot(d_in, dims.d_h, &mut rng));
            for r in 0..RELATIONS {
                params.push(format!("layer{l}.w{}", r + 1), Tensor::glorot(d_in, dims.d_h, &mut rng));
            }
        }
        params.push("latent_head.w", Tensor::glorot(dims.d_h, dims.d_z, &mut rng));
        params.push("latent_head.b", Tensor::zeros(1, dims.d_z));
        params.push("genre_head.w", Tensor::glorot(dims.d_h, GENRES.len(), &mut rng));
        params.push("genre_head.b", Tensor::zeros(1, GENRES.len()));
        Rgcn { dims, params }
    }

    pub fn dims(&self) -> RgcnDims {
        self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn with_params(&self, params: ParamSet) -> Self {
        assert_eq!(params.names(), self.params.names());
        Rgcn {
            dims: self.dims,
            params,
        }
    }

    fn forward_on(&self, tape: &mut Tape, vars: &[Var], input: &RgcnInput) -> Forward {
        let p = |name: &str| vars[self.params.index(name)];
        let n = input.len();
        let d = self.dims;

        let key = tape.gather_rows(p("key_emb"), input.key_slots.clone());
        let inst = tape.gather_rows(p("inst_emb"), input.instrument_slots.clone());
        let x = tape.add(key, inst);
        let mut lat = Tensor::zeros(n, d.d_z);
        for (i, z) in input.latents.iter().enumerate() {
            if let Some(z) = z {
                assert_eq!(z.dim(), d.d_z, "latent width");
                lat.row_mut(i).copy_from_slice(&z.0);
            }
        }
        let lat = tape.constant(lat);
        let y_hat = tape.matmul(lat, p("latent_proj"));
        let xy = tape.add(x, y_hat);
        let t_rows: Vec<Vec<f64>> = input.start_bars.iter().map(|&b| sinusoidal(b, d.d_t)).collect();
        let t = tape.constant(Tensor::new(vec![n, d.d_t], t_rows.concat()));
        let h0 = tape.concat_cols(xy, t);

        let mut h = h0;
        for l in 0..d.layers {
            let mut acc = tape.matmul(h, p(&format!("layer{l}.w0")));
            for r in 0..RELATIONS {
                if input.neighbors[r].iter().all(Vec::is_empty) {
                    continue;
                }
                let mixed = tape.mix(h, input.mixer(r));
                let msg = tape.matmul(mixed, p(&format!("layer{l}.w{}", r + 1)));
                acc = tape.add(acc, msg);
            }
            h = if l + 1 < d.layers {
                tape.leaky_relu(acc, LEAKY_SLOPE)
            } else {
                acc
            };
        }
        let latents = tape.affine(h, p("latent_head.w"), p("latent_head.b"));
        let pooled = tape.mean_rows(h);
        let logits = tape.affine(pooled, p("genre_head.w"), p("genre_head.b"));
        Forward {
            h0,
            hidden: h,
            latents,
            logits,
        }
    }

    fn leaves(&self, tape: &mut Tape, params: &[Tensor]) -> Vec<Var> {
        params.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// `h₀ = (X + Ŷ) ⊕ T`.
    pub fn initial_state(&self, input: &RgcnInput) -> Tensor {
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape, self.params.tensors());
        let f = self.forward_on(&mut tape, &vars, input);
        tape.value(f.h0).clone()
    }

    pub fn forward(&self, input: &RgcnInput) -> RgcnOutput {
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape, self.params.tensors());
        let f = self.forward_on(&mut tape, &vars, input);
        RgcnOutput {
            hidden: tape.value(f.hidden).clone(),
            latents: tape.value(f.latents).clone(),
            genre_logits: tape.value(f.logits).clone(),
        }
    }

    fn loss_on(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: &RgcnInput,
        targets: &Targets,
        lambda: f64,
    ) -> (Var, Var, Option<Var>) {
        let f = self.forward_on(tape, vars, input);
        let index: Vec<usize> = targets.masked.iter().map(|(i, _)| *i).collect();
        let rows: Vec<Vec<f64>> = targets.masked.iter().map(|(_, z)| z.0.clone()).collect();
        let picked = tape.gather_rows(f.latents, index);
        let target = Tensor::new(vec![rows.len(), self.dims.d_z], rows.concat());
        // Σ_v MSE(o_v, y_v): per-node mean over d_z, summed over nodes.
        let recon = tape.squared_error(picked, target, 1.0 / self.dims.d_z as f64);
        let class = targets.genre.map(|g| tape.softmax_cross_entropy(f.logits, g));
        let total = match class {
            Some(c) => {
                let weighted = tape.scale(c, lambda);
                tape.add(recon, weighted)
            }
            None => recon,
        };
        (total, recon, class)
    }

    /// `L = L_r + λ·L_c` under explicit parameter values.
    pub fn loss_with(&self, params: &[Tensor], input: &RgcnInput, targets: &Targets, lambda: f64) -> LossParts {
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape, params);
        let (total, recon, class) = self.loss_on(&mut tape, &vars, input, targets, lambda);
        LossParts {
            total: tape.value(total).item(),
            recon: tape.value(recon).item(),
            class: class.map(|c| tape.value(c).item()),
        }
    }

    pub fn loss(&self, input: &RgcnInput, targets: &Targets, lambda: f64) -> LossParts {
        self.loss_with(self.params.tensors(), input, targets, lambda)
    }

    /// Loss and the gradient of `L` for every parameter, in parameter order.
    pub fn loss_and_grads(
        &self,
        params: &[Tensor],
        input: &RgcnInput,
        targets: &Targets,
        lambda: f64,
    ) -> (LossParts, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape, params);
        let (total, recon, class) = self.loss_on(&mut tape, &vars, input, targets, lambda);
        let mut grads = tape.backward(total);
        let parts = LossParts {
            total: tape.value(total).item(),
            recon: tape.value(recon).item(),
            class: class.map(|c| tape.value(c).item()),
        };
        let g = vars
            .iter()
            .zip(params)
            .map(|(&v, t)| grads.take_or_zeros(v, t))
            .collect();
        (parts, g)
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "dims": self.dims, "run": meta });
        self.params.save(path, KIND, meta)
    }

    pub fn load(path: &Path) -> Result<(Self, Sidecar)> {
        let (params, sidecar) = ParamSet::load(path)?;
        sidecar.expect_kind(KIND)?;
        let dims: RgcnDims = serde_json::from_value(sidecar.meta["dims"].clone())?;
        let model = Rgcn::new(dims, 0);
        if params.names() != model.params.names() {
            return Err(Error::Checkpoint(
                "parameter layout does not match the recorded dims".into(),
            ));
        }
        Ok((model.with_params(params), sidecar))
    }
}

/// `round(ratio · n)`, at least one and at most `n`.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Picks `mask_count(candidates)` of the nodes that have a latent.
pub fn sample_mask(latents: &[Option<LatentVector>], ratio: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut candidates: Vec<usize> = (0..latents.len()).filter(|&i| latents[i].is_some()).collect();
    if candidates.is_empty() {
        return Err(Error::EmptyMask("no node carries a latent to mask".into()));
    }
    candidates.shuffle(rng);
    let k = mask_count(candidates.len(), ratio);
    let mut chosen = candidates[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RgcnConfig {
    pub dims: RgcnDims,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub mask_ratio: f64,
    pub drop_edge: f64,
    pub drop_node: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for RgcnConfig {
    fn default() -> Self {
        RgcnConfig {
            dims: RgcnDims::default(),
            epochs: 100,
            lr: 0.01,
            momentum: 0.9,
            mask_ratio: 0.3,
            drop_edge: 0.1,
            drop_node: 0.05,
            lambda: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub graph: usize,
    pub loss: LossParts,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Rgcn,
    pub optimizer: Sgd,
    pub seed: u64,
    pub step: usize,
    pub trace: Vec<LossRecord>,
}

impl TrainState {
    pub fn write_trace_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "step,epoch,graph,loss,recon,class")?;
        for r in &self.trace {
            let class = r.loss.class.map_or(String::new(), |c| c.to_string());
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.epoch, r.graph, r.loss.total, r.loss.recon, class
            )?;
        }
        Ok(())
    }
}

/// Genre class of a graph, if its label is in the vocabulary.
pub fn graph_genre(graph: &SongStructureGraph) -> Option<usize> {
    graph.genre.as_deref().and_then(genre_index)
}

/// One augmented, masked training sample drawn from `graph`.
pub fn training_sample(
    graph: &SongStructureGraph,
    config: &RgcnConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(RgcnInput, Targets)>> {
    let full = GraphView::full(graph);
    let view = drop_node(&full, config.drop_node, rng.gen());
    let view = drop_edge(&view, config.drop_edge, rng.gen());
    let input = RgcnInput::from_view(graph, &view, config.dims.instruments)?;
    if input.latents.iter().all(Option::is_none) {
        return Ok(None);
    }
    let masked = sample_mask(&input.latents, config.mask_ratio, rng)?;
    let targets = Targets {
        masked: masked.iter().map(|&i| (i, input.latents[i].clone().unwrap())).collect(),
        genre: graph_genre(graph),
    };
    Ok(Some((input.masked(&masked), targets)))
}

/// One SGD step per graph per epoch, graphs visited in a seeded order.
pub fn train(graphs: &[SongStructureGraph], config: &RgcnConfig) -> Result<TrainState> {
    if graphs.iter().all(|g| g.nodes.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let mut state = TrainState {
        model: Rgcn::new(config.dims, config.seed),
        optimizer: Sgd::new(config.lr, config.momentum),
        seed: config.seed,
        step: 0,
        trace: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6763_6e00);
    let mut params = state.model.params.tensors().to_vec();
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for &gi in &order {
            let Some((input, targets)) = training_sample(&graphs[gi], config, &mut rng)? else {
                continue;
            };
            let (loss, grads) = state.model.loss_and_grads(&params, &input, &targets, config.lambda);
            if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    stage: "step",
                    index: state.step,
                });
            }
            state.optimizer.step(&mut params, &grads);
            state.trace.push(LossRecord {
                step: state.step,
                epoch,
                graph: gi,
                loss,
            });
            state.step += 1;
        }
    }
    state.model.params = state.model.params.with_tensors(params);
    Ok(state)
}

/// Standalone relational layer: `σ(W0·h_i + Σ_r Σ_j (1/c_{i,r}) W_r·h_j)`,
/// with weights laid out `[d_in, d_out]`.
pub fn rgcn_layer(
    h: &Tensor,
    w0: &Tensor,
    w_r: &[Tensor; RELATIONS],
    neighbors: &[Vec<Vec<usize>>; RELATIONS],
    leaky: bool,
) -> Tensor {
    let input = RgcnInput {
        key_slots: vec![0; h.rows()],
        instrument_slots: vec![0; h.rows()],
        start_bars: vec![0; h.rows()],
        latents: vec![None; h.rows()],
        neighbors: neighbors.clone(),
    };
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let mut acc = {
        let w = tape.constant(w0.clone());
        tape.matmul(hv, w)
    };
    for (r, w) in w_r.iter().enumerate() {
        let mixed = tape.mix(hv, input.mixer(r));
        let w = tape.constant(w.clone());
        let msg = tape.matmul(mixed, w);
        acc = tape.add(acc, msg);
    }
    let out = if leaky { tape.leaky_relu(acc, LEAKY_SLOPE) } else { acc };
    tape.value(out).clone()
}


#[cfg(test)]
mod tests {
    use super::fixtures::random_graph;
    use super::*;
    use crate::tensor::gradcheck::{max_relative_error, numeric_gradients};
    use proptest::prelude::*;

    fn tiny_dims() -> RgcnDims {
        RgcnDims {
            layers: 2,
            d_h: 6,
            d_t: 4,
            d_z: 3,
            instruments: 4,
        }
    }

    #[test]
    fn sinusoidal_at_zero() {
        assert_eq!(sinusoidal(0, 6), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn masked_row_is_x_concat_t() {
        let g = random_graph(5, 3, 4, 1);
        let model = Rgcn::new(tiny_dims(), 2);
        let input = RgcnInput::from_graph(&g, 4).unwrap().masked(&[1, 3]);
        let h0 = model.initial_state(&input);
        let key = model.params.get("key_emb");
        let inst = model.params.get("inst_emb");
        for i in [1, 3] {
            let row = h0.row(i);
            for c in 0..6 {
                assert_eq!(
                    row[c],
                    key.get(input.key_slots[i], c) + inst.get(input.instrument_slots[i], c)
                );
            }
            assert_eq!(&row[6..], sinusoidal(input.start_bars[i], 4).as_slice());
        }
    }

    #[test]
    fn unknown_instrument_rejected() {
        let mut g = random_graph(2, 3, 4, 1);
        g.nodes[0].instrument = InstrumentId(9);
        assert!(matches!(RgcnInput::from_graph(&g, 4), Err(Error::UnknownInstrument(9))));
    }

    #[test]
    fn layer_examples() {
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]);
        let w0 = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]);
        let wr = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, -2.0]]);
        let zero = Tensor::zeros(2, 2);
        let none: [Vec<Vec<usize>>; RELATIONS] = std::array::from_fn(|_| vec![vec![], vec![]]);
        // isolated nodes: σ(h W0)
        let out = rgcn_layer(&h, &w0, &std::array::from_fn(|_| wr.clone()), &none, true);
        let mut expected = h.matmul(&w0);
        expected.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= LEAKY_SLOPE
            }
        });
        assert_eq!(out, expected);
        // one neighbor under relation 2, identity activation
        let mut one = none.clone();
        one[2][0] = vec![1];
        let mut w = std::array::from_fn(|_| zero.clone());
        w[2] = wr.clone();
        let out = rgcn_layer(&h, &w0, &w, &one, false);
        let own = h.matmul(&w0);
        let msg = Tensor::row_vector(h.row(1).to_vec()).matmul(&wr);
        for c in 0..2 {
            assert!((out.get(0, c) - (own.get(0, c) + msg.get(0, c))).abs() < 1e-12);
            assert_eq!(out.get(1, c), own.get(1, c));
        }
        // identity W0, zero relations
        let out = rgcn_layer(
            &h,
            &Tensor::identity(2),
            &std::array::from_fn(|_| zero.clone()),
            &one,
            false,
        );
        assert_eq!(out, h);
    }

    #[test]
    fn drop_extremes_and_determinism() {
        let g = random_graph(8, 3, 4, 5);
        let full = GraphView::full(&g);
        assert_eq!(drop_edge(&full, 0.0, 1), full);
        assert_eq!(drop_node(&full, 0.0, 1), full);
        assert!(drop_edge(&full, 1.0, 1).edges.is_empty());
        let gone = drop_node(&full, 1.0, 1);
        assert!(gone.nodes.is_empty() && gone.edges.is_empty());
        assert_eq!(drop_edge(&full, 0.5, 9), drop_edge(&full, 0.5, 9));
        // symmetric pairs vanish together
        let half = drop_edge(&full, 0.5, 9);
        for e in half.edges.iter().filter(|e| e.kind.is_symmetric()) {
            assert!(half.edges.contains(&EdgeRelation {
                kind: e.kind,
                src: e.dst,
                dst: e.src
            }));
        }
    }

    #[test]
    fn drop_edge_rate_is_binomial() {
        let edges: Vec<EdgeRelation> = (0..10_000)
            .map(|i| EdgeRelation {
                kind: EdgeKind::SameInstrumentFlow,
                src: i,
                dst: i + 1,
            })
            .collect();
        let view = GraphView {
            nodes: (0..10_001).collect(),
            edges,
        };
        let kept = drop_edge(&view, 0.5, 2024).edges.len();
        let removed = 1.0 - kept as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&removed), "{removed}");
    }

    #[test]
    fn mask_count_rounding() {
        assert_eq!(mask_count(10, 0.3), 3);
        assert_eq!(mask_count(2, 0.3), 1);
        assert_eq!(mask_count(1, 0.0), 1);
        assert_eq!(mask_count(4, 1.0), 4);
    }

    #[test]
    fn lambda_zero_is_recon_only() {
        let g = random_graph(4, 3, 4, 3);
        let model = Rgcn::new(tiny_dims(), 3);
        let input = RgcnInput::from_graph(&g, 4).unwrap();
        let targets = Targets {
            masked: vec![(0, g.nodes[0].latent.clone().unwrap())],
            genre: Some(2),
        };
        let parts = model.loss(&input.masked(&[0]), &targets, 0.0);
        assert_eq!(parts.total, parts.recon);
        assert!(parts.class.unwrap() > 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..4 {
            let g = random_graph(5, 3, 4, 100 + seed);
            let model = Rgcn::new(tiny_dims(), seed);
            let input = RgcnInput::from_graph(&g, 4).unwrap();
            let targets = Targets {
                masked: vec![
                    (1, g.nodes[1].latent.clone().unwrap()),
                    (4, g.nodes[4].latent.clone().unwrap()),
                ],
                genre: graph_genre(&g),
            };
            let input = input.masked(&[1, 4]);
            let params = model.params.tensors().to_vec();
            let (_, analytic) = model.loss_and_grads(&params, &input, &targets, 1.0);
            let numeric = numeric_gradients(&params, |p| model.loss_with(p, &input, &targets, 1.0).total, 1e-5);
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn training_is_reproducible_and_checkpoints() {
        let graphs: Vec<_> = (0..3).map(|s| random_graph(5, 3, 4, s)).collect();
        let config = RgcnConfig {
            dims: tiny_dims(),
            epochs: 5,
            ..RgcnConfig::default()
        };
        let a = train(&graphs, &config).unwrap();
        let b = train(&graphs, &config).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.step, 15);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gnn.bin");
        a.model.save(&path, serde_json::json!({"seed": 0})).unwrap();
        let (loaded, _) = Rgcn::load(&path).unwrap();
        assert_eq!(loaded.dims(), a.model.dims());
        let mut csv = Vec::new();
        a.write_trace_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 16);
    }

    fn permute_input(input: &RgcnInput, perm: &[usize]) -> RgcnInput {
        // perm[old] = new
        let n = input.len();
        let mut inv = vec![0; n];
        for (old, &new) in perm.iter().enumerate() {
            inv[new] = old;
        }
        RgcnInput {
            key_slots: inv.iter().map(|&o| input.key_slots[o]).collect(),
            instrument_slots: inv.iter().map(|&o| input.instrument_slots[o]).collect(),
            start_bars: inv.iter().map(|&o| input.start_bars[o]).collect(),
            latents: inv.iter().map(|&o| input.latents[o].clone()).collect(),
            neighbors: std::array::from_fn(|r| {
                inv.iter()
                    .map(|&o| {
                        let mut l: Vec<usize> = input.neighbors[r][o].iter().map(|&j| perm[j]).collect();
                        l.sort_unstable();
                        l
                    })
                    .collect()
            }),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn permutation_equivariance(seed in 0u64..1000, n in 2usize..7) {
            let g = random_graph(n, 3, 4, seed);
            let model = Rgcn::new(tiny_dims(), seed);
            let input = RgcnInput::from_graph(&g, 4).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let out = model.forward(&input).hidden;
            let out_p = model.forward(&permute_input(&input, &perm)).hidden;
            for old in 0..n {
                for c in 0..out.cols() {
                    prop_assert!((out.get(old, c) - out_p.get(perm[old], c)).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn masking_only_touches_latent_part(seed in 0u64..1000) {
            let g = random_graph(6, 3, 4, seed);
            let model = Rgcn::new(tiny_dims(), seed);
            let input = RgcnInput::from_graph(&g, 4).unwrap();
            let masked = input.masked(&[0, 2]);
            let (a, b) = (model.initial_state(&input), model.initial_state(&masked));
            for i in [1, 3, 4, 5] {
                prop_assert_eq!(a.row(i), b.row(i));
            }
            for i in [0, 2] {
                prop_assert_eq!(&a.row(i)[6..], &b.row(i)[6..]);
            }
        }
    }
}
