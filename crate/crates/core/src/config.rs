//! Run configuration: every tunable of the pipeline, read from a plain
//! `key = value` file and overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, TaskKind, TaskSpec};
use crate::graph::GraphConfig;
use crate::latent::AutoencoderConfig;
use crate::rgcn::{RgcnConfig, RgcnDims};
use crate::structure::NoveltyParams;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "SONGGRAPH_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub pl: usize,
    pub kernel_l: usize,
    pub sigma: f64,
    /// `None` means mean + 0.5·std of the curve.
    pub novelty_thresh: Option<f64>,
    pub ssm_thresh: f64,
    pub hu_thresh: f64,

    pub d_z: usize,
    pub ae_hidden: usize,
    pub ae_epochs: usize,
    pub ae_lr: f64,
    pub ae_batch: usize,
    pub mmd_weight: f64,

    pub d_h: usize,
    pub d_t: usize,
    pub gnn_layers: usize,
    pub gnn_epochs: usize,
    pub gnn_lr: f64,
    pub mask_ratio: f64,
    pub lambda: f64,
    pub drop_edge: f64,
    pub drop_node: f64,

    pub gen_width: usize,
    pub gen_bottleneck: usize,
    pub gen_epochs: usize,
    pub gen_lr: f64,
    pub gen_batch: usize,
    /// Masked views drawn per graph when collecting generator pairs.
    pub gen_samples: usize,

    pub momentum: f64,
    pub horizon: usize,
    pub decode_thresh: f32,
    pub seed: u64,
    /// Worker threads for dataset commands; 0 uses every core.
    pub jobs: usize,

    pub scheme: Option<PathBuf>,
    pub ae_checkpoint: Option<PathBuf>,
    pub gnn_checkpoint: Option<PathBuf>,
    pub gen_checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ae = AutoencoderConfig::default();
        let gnn = RgcnConfig::default();
        let gen = GeneratorConfig::default();
        let graph = GraphConfig::default();
        RunConfig {
            pl: graph.pattern_length,
            kernel_l: graph.novelty.half_width,
            sigma: graph.novelty.sigma,
            novelty_thresh: graph.novelty_threshold,
            ssm_thresh: graph.ssm_threshold,
            hu_thresh: graph.hu_threshold,
            d_z: ae.d_z,
            ae_hidden: ae.hidden,
            ae_epochs: ae.epochs,
            ae_lr: ae.lr,
            ae_batch: ae.batch,
            mmd_weight: ae.mmd_weight,
            d_h: gnn.dims.d_h,
            d_t: gnn.dims.d_t,
            gnn_layers: gnn.dims.layers,
            gnn_epochs: gnn.epochs,
            gnn_lr: gnn.lr,
            mask_ratio: gnn.mask_ratio,
            lambda: gnn.lambda,
            drop_edge: gnn.drop_edge,
            drop_node: gnn.drop_node,
            gen_width: gen.width,
            gen_bottleneck: gen.bottleneck,
            gen_epochs: gen.epochs,
            gen_lr: gen.lr,
            gen_batch: gen.batch,
            gen_samples: 4,
            momentum: 0.9,
            horizon: crate::generator::DEFAULT_HORIZON,
            decode_thresh: crate::generator::GENERATED_DECODE_THRESHOLD,
            seed: 0,
            jobs: 0,
            scheme: None,
            ae_checkpoint: None,
            gnn_checkpoint: None,
            gen_checkpoint: None,
            out: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one key from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "pl" => self.pl = parse_num(key, v)?,
            "kernel_l" => self.kernel_l = parse_num(key, v)?,
            "sigma" => self.sigma = parse_num(key, v)?,
            "novelty_thresh" => self.novelty_thresh = if v == "auto" { None } else { Some(parse_num(key, v)?) },
            "ssm_thresh" => self.ssm_thresh = parse_num(key, v)?,
            "hu_thresh" => self.hu_thresh = parse_num(key, v)?,
            "d_z" => self.d_z = parse_num(key, v)?,
            "ae_hidden" => self.ae_hidden = parse_num(key, v)?,
            "ae_epochs" => self.ae_epochs = parse_num(key, v)?,
            "ae_lr" => self.ae_lr = parse_num(key, v)?,
            "ae_batch" => self.ae_batch = parse_num(key, v)?,
            "mmd_weight" => self.mmd_weight = parse_num(key, v)?,
            "d_h" => self.d_h = parse_num(key, v)?,
            "d_t" => self.d_t = parse_num(key, v)?,
            "gnn_layers" => self.gnn_layers = parse_num(key, v)?,
            "gnn_epochs" => self.gnn_epochs = parse_num(key, v)?,
            "gnn_lr" => self.gnn_lr = parse_num(key, v)?,
            "mask_ratio" => self.mask_ratio = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "drop_edge" => self.drop_edge = parse_num(key, v)?,
            "drop_node" => self.drop_node = parse_num(key, v)?,
            "gen_width" => self.gen_width = parse_num(key, v)?,
            "gen_bottleneck" => self.gen_bottleneck = parse_num(key, v)?,
            "gen_epochs" => self.gen_epochs = parse_num(key, v)?,
            "gen_lr" => self.gen_lr = parse_num(key, v)?,
            "gen_batch" => self.gen_batch = parse_num(key, v)?,
            "gen_samples" => self.gen_samples = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "horizon" => self.horizon = parse_num(key, v)?,
            "decode_thresh" => self.decode_thresh = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "jobs" => self.jobs = parse_num(key, v)?,
            "scheme" => self.scheme = parse_path(v),
            "ae_checkpoint" => self.ae_checkpoint = parse_path(v),
            "gnn_checkpoint" => self.gnn_checkpoint = parse_path(v),
            "gen_checkpoint" => self.gen_checkpoint = parse_path(v),
            "out" => self.out = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its text form, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("pl", self.pl.to_string()),
            ("kernel_l", self.kernel_l.to_string()),
            ("sigma", self.sigma.to_string()),
            (
                "novelty_thresh",
                self.novelty_thresh.map_or("auto".into(), |t| t.to_string()),
            ),
            ("ssm_thresh", self.ssm_thresh.to_string()),
            ("hu_thresh", self.hu_thresh.to_string()),
            ("d_z", self.d_z.to_string()),
            ("ae_hidden", self.ae_hidden.to_string()),
            ("ae_epochs", self.ae_epochs.to_string()),
            ("ae_lr", self.ae_lr.to_string()),
            ("ae_batch", self.ae_batch.to_string()),
            ("mmd_weight", self.mmd_weight.to_string()),
            ("d_h", self.d_h.to_string()),
            ("d_t", self.d_t.to_string()),
            ("gnn_layers", self.gnn_layers.to_string()),
            ("gnn_epochs", self.gnn_epochs.to_string()),
            ("gnn_lr", self.gnn_lr.to_string()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("lambda", self.lambda.to_string()),
            ("drop_edge", self.drop_edge.to_string()),
            ("drop_node", self.drop_node.to_string()),
            ("gen_width", self.gen_width.to_string()),
            ("gen_bottleneck", self.gen_bottleneck.to_string()),
            ("gen_epochs", self.gen_epochs.to_string()),
            ("gen_lr", self.gen_lr.to_string()),
            ("gen_batch", self.gen_batch.to_string()),
            ("gen_samples", self.gen_samples.to_string()),
            ("momentum", self.momentum.to_string()),
            ("horizon", self.horizon.to_string()),
            ("decode_thresh", self.decode_thresh.to_string()),
            ("seed", self.seed.to_string()),
            ("jobs", self.jobs.to_string()),
            ("scheme", show_path(&self.scheme)),
            ("ae_checkpoint", show_path(&self.ae_checkpoint)),
            ("gnn_checkpoint", show_path(&self.gnn_checkpoint)),
            ("gen_checkpoint", show_path(&self.gen_checkpoint)),
            ("out", self.out.display().to_string()),
        ]
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key, value).map_err(|e| {
                Error::Config(format!(
                    "line {}: {}",
                    n + 1,
                    e.to_string().trim_start_matches("config: ")
                ))
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        config.apply_text(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.pl == 0 || self.kernel_l == 0 {
            return fail("`pl` and `kernel_l` must be at least 1");
        }
        if !(self.sigma > 0.0) {
            return fail("`sigma` must be positive");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return fail("`mask_ratio` must lie in (0, 1]");
        }
        for (name, p) in [("drop_edge", self.drop_edge), ("drop_node", self.drop_node)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("`{name}` must lie in [0, 1)")));
            }
        }
        if !(self.lambda >= 0.0) || !(self.mmd_weight >= 0.0) {
            return fail("`lambda` and `mmd_weight` must be non-negative");
        }
        if [self.ae_lr, self.gnn_lr, self.gen_lr].iter().any(|lr| !(*lr > 0.0)) {
            return fail("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("`momentum` must lie in [0, 1)");
        }
        let dims = [
            self.d_z,
            self.ae_hidden,
            self.ae_batch,
            self.d_h,
            self.d_t,
            self.gnn_layers,
            self.gen_width,
            self.gen_bottleneck,
            self.gen_batch,
            self.gen_samples,
        ];
        if dims.contains(&0) {
            return fail("sizes must be at least 1");
        }
        Ok(())
    }

    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            pattern_length: self.pl,
            novelty: NoveltyParams {
                half_width: self.kernel_l,
                sigma: self.sigma,
            },
            novelty_threshold: self.novelty_thresh,
            ssm_threshold: self.ssm_thresh,
            hu_threshold: self.hu_thresh,
        }
    }

    pub fn autoencoder_config(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            d_z: self.d_z,
            hidden: self.ae_hidden,
            epochs: self.ae_epochs,
            lr: self.ae_lr,
            momentum: self.momentum,
            batch: self.ae_batch,
            mmd_weight: self.mmd_weight,
            seed: self.seed,
        }
    }

    pub fn rgcn_config(&self, instruments: usize) -> RgcnConfig {
        RgcnConfig {
            dims: RgcnDims {
                layers: self.gnn_layers,
                d_h: self.d_h,
                d_t: self.d_t,
                d_z: self.d_z,
                instruments,
            },
            epochs: self.gnn_epochs,
            lr: self.gnn_lr,
            momentum: self.momentum,
            mask_ratio: self.mask_ratio,
            drop_edge: self.drop_edge,
            drop_node: self.drop_node,
            lambda: self.lambda,
            seed: self.seed,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            width: self.gen_width,
            bottleneck: self.gen_bottleneck,
            epochs: self.gen_epochs,
            lr: self.gen_lr,
            momentum: self.momentum,
            batch: self.gen_batch,
            seed: self.seed,
        }
    }

    pub fn task_spec(&self, kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            mask_ratio: self.mask_ratio,
            horizon: self.horizon,
            decode_threshold: self.decode_thresh,
            seed: self.seed,
        }
    }
}
