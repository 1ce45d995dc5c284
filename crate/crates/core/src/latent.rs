//! Bar-image embeddings: a fixed pooled projection that needs no training,
//! and a dense autoencoder (optionally MMD-regularized) trained with SGD.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ParamSet, Sidecar};
use crate::conlon::{Channel, ConlonImage, CELLS, STEPS};
use crate::error::{Error, Result};
use crate::music::PITCHES;
use crate::tensor::{Sgd, Tape, Tensor, Var};

pub const DEFAULT_DZ: usize = 32;
pub const DEFAULT_HIDDEN: usize = 512;
pub const LEAKY_SLOPE: f64 = 0.01;
/// Flattened input width of one CONLON image.
pub const IMAGE_INPUT: usize = 2 * CELLS;

const VELOCITY_SCALE: f64 = 127.0;
const DURATION_SCALE: f64 = 48.0;
const POOL: usize = 4;
const POOLED: usize = 2 * (PITCHES / POOL) * (STEPS / POOL);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn zeros(dim: usize) -> Self {
        LatentVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Element-wise mean; `None` for an empty slice.
    pub fn mean(vectors: &[LatentVector]) -> Option<LatentVector> {
        let first = vectors.first()?;
        let mut out = vec![0.0; first.dim()];
        for v in vectors {
            for (o, x) in out.iter_mut().zip(&v.0) {
                *o += x;
            }
        }
        let n = vectors.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Some(LatentVector(out))
    }
}

pub trait BarEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, image: &ConlonImage) -> Result<LatentVector>;
}

/// Flattens an image to the model input: velocities / 127 then durations / 48.
pub fn image_to_input(image: &ConlonImage) -> Vec<f64> {
    let mut out = Vec::with_capacity(IMAGE_INPUT);
    out.extend(
        image
            .channel(Channel::Velocity)
            .iter()
            .map(|&v| v as f64 / VELOCITY_SCALE),
    );
    out.extend(
        image
            .channel(Channel::Duration)
            .iter()
            .map(|&v| v as f64 / DURATION_SCALE),
    );
    out
}

/// Inverse of [`image_to_input`], clamping to the valid channel ranges.
pub fn input_to_image(values: &[f64]) -> ConlonImage {
    assert_eq!(values.len(), IMAGE_INPUT);
    let velocity = values[..CELLS]
        .iter()
        .map(|&v| (v * VELOCITY_SCALE).clamp(0.0, 127.0) as f32)
        .collect();
    let duration = values[CELLS..]
        .iter()
        .map(|&v| (v * DURATION_SCALE).max(0.0) as f32)
        .collect();
    ConlonImage::from_channels(velocity, duration).expect("sizes match")
}

/// 4×4 average pooling of both normalized channels followed by a fixed,
/// seeded projection with orthonormal rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineEmbedder {
    projection: Tensor,
}

impl BaselineEmbedder {
    pub const DEFAULT_SEED: u64 = 0x5eed_0001;

    pub fn new(d_z: usize, seed: u64) -> Self {
        assert!(d_z > 0 && d_z <= POOLED, "d_z must be in 1..={POOLED}");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d_z);
        while rows.len() < d_z {
            let mut v: Vec<f64> = (0..POOLED).map(|_| StandardNormal.sample(&mut rng)).collect();
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|x| *x /= norm);
                rows.push(v);
            }
        }
        BaselineEmbedder {
            projection: Tensor::from_rows(&rows),
        }
    }

    fn pooled(image: &ConlonImage) -> Vec<f64> {
        let (ph, pw) = (PITCHES / POOL, STEPS / POOL);
        let mut out = vec![0.0; POOLED];
        for (c, (channel, scale)) in [(Channel::Velocity, VELOCITY_SCALE), (Channel::Duration, DURATION_SCALE)]
            .into_iter()
            .enumerate()
        {
            let data = image.channel(channel);
            for p in 0..PITCHES {
                for t in 0..STEPS {
                    let v = data[p * STEPS + t];
                    if v != 0.0 {
                        out[c * ph * pw + (p / POOL) * pw + t / POOL] += v as f64 / (scale * (POOL * POOL) as f64);
                    }
                }
            }
        }
        out
    }
}

impl Default for BaselineEmbedder {
    fn default() -> Self {
        BaselineEmbedder::new(DEFAULT_DZ, Self::DEFAULT_SEED)
    }
}

impl BarEmbedder for BaselineEmbedder {
    fn dim(&self) -> usize {
        self.projection.rows()
    }

    fn embed(&self, image: &ConlonImage) -> Result<LatentVector> {
        let pooled = Tensor::new(vec![POOLED, 1], Self::pooled(image));
        Ok(LatentVector(self.projection.matmul(&pooled).into_data()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub d_z: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub mmd_weight: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            d_z: DEFAULT_DZ,
            hidden: DEFAULT_HIDDEN,
            epochs: 50,
            lr: 5.0,
            momentum: 0.9,
            batch: 16,
            mmd_weight: 0.0,
            seed: 0,
        }
    }
}

/// Dense autoencoder: input → hidden → d_z → hidden → input, leaky
/// rectifiers on the hidden layers, linear latent and output.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    params: ParamSet,
    d_in: usize,
    hidden: usize,
    d_z: usize,
}

const ENCODER_LAYERS: [(&str, &str); 2] = [("enc1.w", "enc1.b"), ("enc2.w", "enc2.b")];
const DECODER_LAYERS: [(&str, &str); 2] = [("dec1.w", "dec1.b"), ("dec2.w", "dec2.b")];

struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    fn bind(tape: &mut Tape, params: Vec<Tensor>) -> Self {
        BoundParams {
            vars: params.into_iter().map(|t| tape.param(t)).collect(),
        }
    }
}

fn forward_layers(tape: &mut Tape, vars: &[Var], names: &[String], layers: &[(&str, &str)], mut x: Var) -> Var {
    let find = |n: &str| vars[names.iter().position(|m| m == n).expect("layer exists")];
    for (i, (w, b)) in layers.iter().enumerate() {
        x = tape.affine(x, find(w), find(b));
        if i + 1 < layers.len() {
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
    }
    x
}

impl Autoencoder {
    pub const KIND: &'static str = "autoencoder";

    pub fn new(d_in: usize, hidden: usize, d_z: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, rows, cols) in [
            ("enc1", d_in, hidden),
            ("enc2", hidden, d_z),
            ("dec1", d_z, hidden),
            ("dec2", hidden, d_in),
        ] {
            params.push(format!("{name}.w"), Tensor::glorot(rows, cols, &mut rng));
            params.push(format!("{name}.b"), Tensor::zeros(1, cols));
        }
        Autoencoder {
            params,
            d_in,
            hidden,
            d_z,
        }
    }

    /// Sized for flattened CONLON images.
    pub fn for_images(hidden: usize, d_z: usize, seed: u64) -> Self {
        Self::new(IMAGE_INPUT, hidden, d_z, seed)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn with_params(&self, params: ParamSet) -> Self {
        assert_eq!(params.names(), self.params.names());
        Autoencoder { params, ..self.clone() }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn run_layers(&self, layers: &[(&str, &str)], input: Vec<f64>) -> Result<Vec<f64>> {
        let mut x = Tensor::row_vector(input);
        for (i, (w, b)) in layers.iter().enumerate() {
            let mut y = x.matmul(self.params.get(w));
            for (v, bias) in y.data_mut().iter_mut().zip(self.params.get(b).data()) {
                *v += bias;
                if i + 1 < layers.len() && *v < 0.0 {
                    *v *= LEAKY_SLOPE;
                }
            }
            if !y.is_finite() {
                return Err(Error::NumericOverflow(w.trim_end_matches(".w").to_string()));
            }
            x = y;
        }
        Ok(x.into_data())
    }

    pub fn encode_input(&self, input: &[f64]) -> Result<LatentVector> {
        assert_eq!(input.len(), self.d_in, "input width mismatch");
        self.run_layers(&ENCODER_LAYERS, input.to_vec()).map(LatentVector)
    }

    pub fn decode_output(&self, z: &LatentVector) -> Result<Vec<f64>> {
        assert_eq!(z.dim(), self.d_z, "latent width mismatch");
        self.run_layers(&DECODER_LAYERS, z.0.clone())
    }

    pub fn encode(&self, image: &ConlonImage) -> Result<LatentVector> {
        self.encode_input(&image_to_input(image))
    }

    pub fn decode(&self, z: &LatentVector) -> Result<ConlonImage> {
        assert_eq!(self.d_in, IMAGE_INPUT, "decoder is not sized for CONLON images");
        Ok(input_to_image(&self.decode_output(z)?))
    }

    /// Reconstruction MSE plus `mmd_weight` times the MMD between the batch
    /// latents and `prior`, recorded on a fresh tape.
    fn record_loss(
        &self,
        params: Vec<Tensor>,
        inputs: &Tensor,
        prior: Option<&Tensor>,
        mmd_weight: f64,
    ) -> (Tape, BoundParams, Var) {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params);
        let x = tape.constant(inputs.clone());
        let z = forward_layers(&mut tape, &bound.vars, self.params.names(), &ENCODER_LAYERS, x);
        let recon = forward_layers(&mut tape, &bound.vars, self.params.names(), &DECODER_LAYERS, z);
        let mut loss = tape.mse(recon, inputs.clone());
        if let Some(prior) = prior {
            if mmd_weight > 0.0 {
                let bandwidth = 2.0 * self.d_z as f64;
                let mmd = tape.mmd(z, prior.clone(), bandwidth);
                let mmd = tape.scale(mmd, mmd_weight);
                loss = tape.add(loss, mmd);
            }
        }
        (tape, bound, loss)
    }

    /// Loss for a batch (rows of `inputs`) under the given parameter values.
    pub fn batch_loss(&self, params: &[Tensor], inputs: &Tensor, prior: Option<&Tensor>, mmd_weight: f64) -> f64 {
        let (tape, _, loss) = self.record_loss(params.to_vec(), inputs, prior, mmd_weight);
        tape.value(loss).item()
    }

    /// Loss and its gradient with respect to every parameter tensor.
    pub fn batch_loss_and_grads(
        &self,
        params: &[Tensor],
        inputs: &Tensor,
        prior: Option<&Tensor>,
        mmd_weight: f64,
    ) -> (f64, Vec<Tensor>) {
        let (loss, grads, _) = self.loss_and_grads_owned(params.to_vec(), inputs, prior, mmd_weight);
        (loss, grads)
    }

    /// As [`Autoencoder::batch_loss_and_grads`], moving the parameters
    /// through the tape instead of copying them.
    fn loss_and_grads_owned(
        &self,
        params: Vec<Tensor>,
        inputs: &Tensor,
        prior: Option<&Tensor>,
        mmd_weight: f64,
    ) -> (f64, Vec<Tensor>, Vec<Tensor>) {
        let (tape, bound, loss) = self.record_loss(params, inputs, prior, mmd_weight);
        let mut grads = tape.backward(loss);
        let g = bound
            .vars
            .iter()
            .map(|v| grads.take_or_zeros(*v, tape.value(*v)))
            .collect();
        let value = tape.value(loss).item();
        (value, g, tape.into_values(&bound.vars))
    }

    pub fn save(&self, path: &Path, config: &AutoencoderConfig) -> Result<()> {
        let meta = serde_json::json!({
            "d_in": self.d_in,
            "hidden": self.hidden,
            "d_z": self.d_z,
            "seed": config.seed,
            "config": config,
        });
        self.params.save(path, Self::KIND, meta)
    }

    pub fn load(path: &Path) -> Result<(Self, Sidecar)> {
        let (params, sidecar) = ParamSet::load(path)?;
        sidecar.expect_kind(Self::KIND)?;
        let dim = |k: &str| {
            sidecar.meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("sidecar is missing `{k}`")))
        };
        let template = Autoencoder::new(dim("d_in")?, dim("hidden")?, dim("d_z")?, 0);
        if params.names() != template.params.names() {
            return Err(Error::Checkpoint("unexpected tensor layout".into()));
        }
        Ok((template.with_params(params), sidecar))
    }
}

impl BarEmbedder for Autoencoder {
    fn dim(&self) -> usize {
        self.d_z
    }

    fn embed(&self, image: &ConlonImage) -> Result<LatentVector> {
        self.encode(image)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedAutoencoder {
    pub model: Autoencoder,
    /// Mean batch loss of each epoch, measured before each update.
    pub loss_trace: Vec<f64>,
}

/// Trains on flattened inputs of width `d_in`.
pub fn train_autoencoder_inputs(
    inputs: &[Vec<f64>],
    d_in: usize,
    config: &AutoencoderConfig,
) -> Result<TrainedAutoencoder> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = Autoencoder::new(d_in, config.hidden, config.d_z, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
    let mut opt = Sgd::new(config.lr, config.momentum);
    let mut params: Vec<Tensor> = model.params.tensors().to_vec();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let batch = config.batch.max(1);
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let x = Tensor::from_rows(&rows);
            let prior = (config.mmd_weight > 0.0).then(|| {
                let data = (0..chunk.len() * config.d_z)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                Tensor::new(vec![chunk.len(), config.d_z], data)
            });
            let (loss, grads, back) = model.loss_and_grads_owned(params, &x, prior.as_ref(), config.mmd_weight);
            params = back;
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
    Ok(TrainedAutoencoder {
        model,
        loss_trace: trace,
    })
}

pub fn train_autoencoder(dataset: &[ConlonImage], config: &AutoencoderConfig) -> Result<TrainedAutoencoder> {
    let inputs: Vec<Vec<f64>> = dataset.iter().map(image_to_input).collect();
    train_autoencoder_inputs(&inputs, IMAGE_INPUT, config)
}

/// Mean squared error of `decode(encode(x))` against `x` in model input units.
pub fn reconstruction_mse(model: &Autoencoder, input: &[f64]) -> Result<f64> {
    let out = model.decode_output(&model.encode_input(input)?)?;
    Ok(out.iter().zip(input).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / input.len() as f64)
}
