//! The `songgraph` command line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;

use crate::config::{RunConfig, CONFIG_ENV};
use crate::conlon::{split_bars, Channel, ConlonImage, STEPS};
use crate::error::Error;
use crate::generator::{
    generator_pairs, run_task, train_generator, Generator, MaskedSegment, TaskKind, TaskModels, TaskReport,
};
use crate::graph::{
    build_graph, build_graph_with_analysis, parse_graph, serialize_graph, to_dot, SongStructureGraph, StructureAnalysis,
};
use crate::latent::{train_autoencoder, Autoencoder, BarEmbedder, BaselineEmbedder};
use crate::metrics::evaluate_task;
use crate::midi::{load_score, InstrumentScheme, Score, SmfWriter};
use crate::music::PITCHES;
use crate::rgcn::{self, Rgcn};

#[derive(Debug, Parser)]
#[command(
    name = "songgraph",
    version,
    about = "Song-structure graphs for symbolic music generation"
)]
struct Cli {
    /// Config file (`key = value` lines).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Pattern length in bars.
    #[arg(long, global = true)]
    pl: Option<usize>,
    /// Novelty kernel half width in bars.
    #[arg(long = "kernel-l", global = true)]
    kernel_l: Option<usize>,
    #[arg(long, global = true)]
    sigma: Option<f64>,
    /// Novelty threshold, or `auto` for mean + 0.5 std.
    #[arg(long = "novelty-thresh", global = true)]
    novelty_thresh: Option<String>,
    #[arg(long = "ssm-thresh", global = true)]
    ssm_thresh: Option<f64>,
    #[arg(long = "hu-thresh", global = true)]
    hu_thresh: Option<f64>,
    #[arg(long = "mask-ratio", global = true)]
    mask_ratio: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Autoencoder checkpoint.
    #[arg(long, global = true)]
    ae: Option<PathBuf>,
    /// Graph network checkpoint.
    #[arg(long, global = true)]
    gnn: Option<PathBuf>,
    /// Generator checkpoint.
    #[arg(long, global = true)]
    gen: Option<PathBuf>,
    /// Any config key, `KEY=VALUE`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Similarity matrix, novelty curve and boundaries of one song.
    Analyze { midi: PathBuf },
    /// Song-structure graph of one song, as JSON and DOT.
    Graph { midi: PathBuf },
    /// Train the bar autoencoder on a directory of MIDI files.
    TrainAe { dataset: PathBuf },
    /// Train the graph network on a directory of MIDI files.
    TrainGnn { dataset: PathBuf },
    /// Train the pattern generator on a directory of MIDI files.
    TrainGen { dataset: PathBuf },
    /// Mask 30% of the patterns and regenerate them.
    Inpaint { midi: PathBuf },
    /// Keep the opening bars and generate the rest.
    Generate { midi: PathBuf },
    /// Keep the primary instrument and generate the others.
    MelodyGen { midi: PathBuf },
    /// Compare masked patterns of two scores; the report may be a task report or a graph.
    Eval {
        original: PathBuf,
        generated: PathBuf,
        report: PathBuf,
    },
    /// PGM/CSV/DOT views of an analysis, graph or CONLON tensor file.
    Render { artifact: PathBuf },
    /// Print the effective configuration.
    Config,
}

/// Runs the command line and maps failures to exit codes: 1 internal, 2 input.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return if err.is_input_error() { 2 } else { 1 };
        }
        if cause.downcast_ref::<InputError>().is_some() {
            return 2;
        }
    }
    1
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct InputError(String);

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &cli.config {
        let text =
            fs::read_to_string(path).map_err(|e| input_error(format!("cannot read config {}: {e}", path.display())))?;
        config.apply_text(&text)?;
    }
    for kv in &cli.overrides.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| input_error(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        config.set(k, v)?;
    }
    let o = &cli.overrides;
    if let Some(v) = o.pl {
        config.pl = v;
    }
    if let Some(v) = o.kernel_l {
        config.kernel_l = v;
    }
    if let Some(v) = o.sigma {
        config.sigma = v;
    }
    if let Some(v) = &o.novelty_thresh {
        config.set("novelty_thresh", v)?;
    }
    if let Some(v) = o.ssm_thresh {
        config.ssm_thresh = v;
    }
    if let Some(v) = o.hu_thresh {
        config.hu_thresh = v;
    }
    if let Some(v) = o.mask_ratio {
        config.mask_ratio = v;
    }
    if let Some(v) = o.lambda {
        config.lambda = v;
    }
    if let Some(v) = o.seed {
        config.seed = v;
    }
    if let Some(v) = &o.out {
        config.out = v.clone();
    }
    if let Some(v) = &o.ae {
        config.ae_checkpoint = Some(v.clone());
    }
    if let Some(v) = &o.gnn {
        config.gnn_checkpoint = Some(v.clone());
    }
    if let Some(v) = &o.gen {
        config.gen_checkpoint = Some(v.clone());
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = effective_config(&cli)?;
    let ctx = App::new(config)?;
    match &cli.command {
        Command::Analyze { midi } => ctx.analyze(midi),
        Command::Graph { midi } => ctx.graph(midi),
        Command::TrainAe { dataset } => ctx.train_ae(dataset),
        Command::TrainGnn { dataset } => ctx.train_gnn(dataset),
        Command::TrainGen { dataset } => ctx.train_gen(dataset),
        Command::Inpaint { midi } => ctx.task(midi, TaskKind::Inpaint),
        Command::Generate { midi } => ctx.task(midi, TaskKind::Generate),
        Command::MelodyGen { midi } => ctx.task(midi, TaskKind::MelodyConditioned),
        Command::Eval {
            original,
            generated,
            report,
        } => ctx.eval(original, generated, report),
        Command::Render { artifact } => ctx.render(artifact),
        Command::Config => {
            print!("{}", ctx.config.to_text());
            Ok(())
        }
    }
}

struct App {
    config: RunConfig,
    scheme: InstrumentScheme,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "song".into(), |s| s.to_string_lossy().into_owned())
}

fn read_input(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).map_err(|e| input_error(format!("cannot read {}: {e}", path.display())))
}

impl App {
    fn new(config: RunConfig) -> anyhow::Result<Self> {
        let scheme = match &config.scheme {
            Some(path) => InstrumentScheme::parse(&String::from_utf8_lossy(&read_input(path)?))?,
            None => InstrumentScheme::default(),
        };
        Ok(App { config, scheme })
    }

    /// Provenance block embedded in every artifact.
    /// The output directory is left out so runs into different directories match.
    fn provenance(&self) -> serde_json::Value {
        let mut config = self.config.to_json();
        if let Some(map) = config.as_object_mut() {
            map.remove("out");
        }
        serde_json::json!({ "seed": self.config.seed, "config": config })
    }

    fn comment(&self) -> String {
        format!(
            "songgraph seed={} config={}",
            self.config.seed,
            self.provenance()["config"]
        )
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        fs::create_dir_all(&self.config.out).with_context(|| format!("creating {}", self.config.out.display()))?;
        let path = self.config.out.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        info!("wrote {}", path.display());
        Ok(path)
    }

    fn write_json(&self, name: &str, value: &serde_json::Value) -> anyhow::Result<PathBuf> {
        self.write(name, serde_json::to_string_pretty(value)? + "\n")
    }

    fn write_csv(&self, name: &str, body: &str) -> anyhow::Result<PathBuf> {
        self.write(name, format!("# {}\n{body}", self.comment()))
    }

    fn read_score(&self, path: &Path) -> anyhow::Result<Score> {
        load_score(&read_input(path)?, &self.scheme).with_context(|| format!("loading {}", path.display()))
    }

    fn autoencoder(&self) -> anyhow::Result<Option<Autoencoder>> {
        match &self.config.ae_checkpoint {
            Some(path) => {
                if !path.exists() {
                    return Err(input_error(format!(
                        "autoencoder checkpoint {} not found",
                        path.display()
                    )));
                }
                let (model, _) = Autoencoder::load(path)?;
                Ok(Some(model))
            }
            None => Ok(None),
        }
    }

    fn require<T>(
        &self,
        what: &str,
        path: &Option<PathBuf>,
        load: impl Fn(&Path) -> crate::Result<T>,
    ) -> anyhow::Result<T> {
        let path = path
            .as_ref()
            .ok_or_else(|| input_error(format!("this command needs a {what} checkpoint (--{what})")))?;
        if !path.exists() {
            return Err(input_error(format!("{what} checkpoint {} not found", path.display())));
        }
        Ok(load(path)?)
    }

    fn embedder(&self) -> anyhow::Result<Box<dyn BarEmbedder + Sync>> {
        Ok(match self.autoencoder()? {
            Some(ae) => Box::new(ae),
            None => Box::new(BaselineEmbedder::new(self.config.d_z, BaselineEmbedder::DEFAULT_SEED)),
        })
    }

    fn analysis_json(&self, song: &str, score: &Score, a: &StructureAnalysis) -> serde_json::Value {
        let n = a.ssm.len();
        let ssm: Vec<&[f64]> = (0..n).map(|i| a.ssm.row(i)).collect();
        serde_json::json!({
            "kind": "analysis",
            "song": song,
            "bars": score.bars,
            "provenance": self.provenance(),
            "ssm": ssm,
            "novelty": a.novelty.values,
            "threshold": a.threshold,
            "boundaries": a.boundaries,
        })
    }

    fn analyze(&self, midi: &Path) -> anyhow::Result<()> {
        let score = self.read_score(midi)?;
        let song = stem(midi);
        let embedder = self.embedder()?;
        let (_, a) = build_graph_with_analysis(&score, &song, embedder.as_ref(), &self.config.graph_config())?;
        self.write_json(&format!("{song}.analysis.json"), &self.analysis_json(&song, &score, &a))?;
        self.write_csv(&format!("{song}.ssm.csv"), &matrix_csv(&a))?;
        self.write_csv(&format!("{song}.novelty.csv"), &novelty_csv(&a))?;
        self.write_json(
            &format!("{song}.boundaries.json"),
            &serde_json::json!({ "song": song, "threshold": a.threshold, "boundaries": a.boundaries, "provenance": self.provenance() }),
        )?;
        println!("{song}: {} bars, boundaries {:?}", score.bars, a.boundaries);
        Ok(())
    }

    fn build(&self, score: &Score, song: &str, embedder: &dyn BarEmbedder) -> anyhow::Result<SongStructureGraph> {
        let mut g = build_graph(score, song, embedder, &self.config.graph_config())?;
        g.meta = self.provenance();
        Ok(g)
    }

    fn graph(&self, midi: &Path) -> anyhow::Result<()> {
        let score = self.read_score(midi)?;
        let song = stem(midi);
        let g = self.build(&score, &song, self.embedder()?.as_ref())?;
        self.write(&format!("{song}.graph.json"), serialize_graph(&g) + "\n")?;
        self.write(
            &format!("{song}.graph.dot"),
            format!("// {}\n{}", self.comment(), to_dot(&g)),
        )?;
        println!("{song}: {} nodes, {} edges", g.nodes.len(), g.edges.len());
        Ok(())
    }

    fn pool(&self) -> anyhow::Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.config.jobs).build()?)
    }

    /// Every MIDI file of `dir`, sorted by name, with genres from `genres.csv` when present.
    fn load_dataset(&self, dir: &Path) -> anyhow::Result<Vec<(String, Score)>> {
        let entries =
            fs::read_dir(dir).map_err(|e| input_error(format!("cannot read dataset {}: {e}", dir.display())))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| x.eq_ignore_ascii_case("mid") || x.eq_ignore_ascii_case("midi"))
            })
            .collect();
        files.sort();
        let genres = read_genres(&dir.join("genres.csv"))?;
        let loaded: Vec<Option<(String, Score)>> = self.pool()?.install(|| {
            files
                .par_iter()
                .map(|path| match self.read_score(path) {
                    Ok(mut score) => {
                        let name = path.file_name().unwrap().to_string_lossy().into_owned();
                        if let Some(g) = genres.get(&name).or_else(|| genres.get(&stem(path))) {
                            score.genre = Some(g.clone());
                        }
                        Some((stem(path), score))
                    }
                    Err(e) => {
                        warn!("skipping {}: {e:#}", path.display());
                        None
                    }
                })
                .collect()
        });
        let songs: Vec<_> = loaded.into_iter().flatten().collect();
        if songs.is_empty() {
            return Err(Error::EmptyDataset.into());
        }
        Ok(songs)
    }

    fn dataset_graphs(
        &self,
        dir: &Path,
        embedder: &(dyn BarEmbedder + Sync),
    ) -> anyhow::Result<Vec<SongStructureGraph>> {
        let songs = self.load_dataset(dir)?;
        let graphs: anyhow::Result<Vec<_>> = self.pool()?.install(|| {
            songs
                .par_iter()
                .map(|(name, score)| self.build(score, name, embedder))
                .collect()
        });
        graphs
    }

    fn train_ae(&self, dir: &Path) -> anyhow::Result<()> {
        let songs = self.load_dataset(dir)?;
        let mut images: Vec<ConlonImage> = Vec::new();
        for (_, score) in &songs {
            let bars = split_bars(score);
            for b in 0..bars.bars() {
                for &inst in bars.instruments() {
                    if let Some(img) = bars.get(b, inst) {
                        images.push(img.clone());
                    }
                }
            }
        }
        let trained = train_autoencoder(&images, &self.config.autoencoder_config())?;
        let path = self.config.out.join("ae.bin");
        fs::create_dir_all(&self.config.out)?;
        trained.model.save(&path, &self.config.autoencoder_config())?;
        annotate_sidecar(&path, self.provenance())?;
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in trained.loss_trace.iter().enumerate() {
            let _ = writeln!(csv, "{i},{l}");
        }
        self.write_csv("ae.loss.csv", &csv)?;
        println!(
            "autoencoder: {} images, final loss {:?}",
            images.len(),
            trained.loss_trace.last()
        );
        Ok(())
    }

    fn train_gnn(&self, dir: &Path) -> anyhow::Result<()> {
        let embedder = self.embedder()?;
        if self.config.ae_checkpoint.is_none() {
            warn!("no autoencoder checkpoint; node latents come from the fixed baseline embedder");
        }
        let graphs = self.dataset_graphs(dir, embedder.as_ref())?;
        let config = self.config.rgcn_config(self.scheme.class_count());
        let state = rgcn::train(&graphs, &config)?;
        fs::create_dir_all(&self.config.out)?;
        state.model.save(&self.config.out.join("gnn.bin"), self.provenance())?;
        let mut csv = Vec::new();
        state.write_trace_csv(&mut csv)?;
        self.write_csv("gnn.loss.csv", &String::from_utf8(csv)?)?;
        println!("graph network: {} graphs, {} steps", graphs.len(), state.step);
        Ok(())
    }

    fn train_gen(&self, dir: &Path) -> anyhow::Result<()> {
        let embedder = self.embedder()?;
        let (rgcn, _) = self.require("gnn", &self.config.gnn_checkpoint, Rgcn::load)?;
        let graphs = self.dataset_graphs(dir, embedder.as_ref())?;
        let gnn_config = self.config.rgcn_config(rgcn.dims().instruments);
        let pairs = generator_pairs(&graphs, &rgcn, &gnn_config, self.config.gen_samples, self.config.seed)?;
        let trained = train_generator(&pairs, &self.config.generator_config())?;
        fs::create_dir_all(&self.config.out)?;
        trained
            .model
            .save(&self.config.out.join("gen.bin"), self.provenance())?;
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in trained.loss_trace.iter().enumerate() {
            let _ = writeln!(csv, "{i},{l}");
        }
        self.write_csv("gen.loss.csv", &csv)?;
        println!(
            "generator: {} pairs, final loss {:?}",
            pairs.len(),
            trained.loss_trace.last()
        );
        Ok(())
    }

    fn task(&self, midi: &Path, kind: TaskKind) -> anyhow::Result<()> {
        let codec = self
            .autoencoder()?
            .ok_or_else(|| input_error("task commands need an autoencoder checkpoint (--ae)"))?;
        let (rgcn, _) = self.require("gnn", &self.config.gnn_checkpoint, Rgcn::load)?;
        let (generator, _) = self.require("gen", &self.config.gen_checkpoint, Generator::load)?;
        let score = self.read_score(midi)?;
        let song = stem(midi);
        let graph = self.build(&score, &song, &codec)?;
        let models = TaskModels {
            codec: &codec,
            rgcn: &rgcn,
            generator: &generator,
        };
        let mut output = run_task(&graph, &score, &self.config.task_spec(kind), &models)?;
        output.report.meta = self.provenance();
        let tag = task_tag(kind);
        let smf = SmfWriter::new(&self.scheme).text(self.comment()).write(&output.score);
        self.write(&format!("{song}.{tag}.mid"), smf)?;
        self.write_json(
            &format!("{song}.{tag}.report.json"),
            &serde_json::to_value(&output.report)?,
        )?;
        let mut csv = String::from("node,latent\n");
        for (id, z) in &output.latents {
            let values: Vec<String> = z.0.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(csv, "{id},{}", values.join(" "));
        }
        self.write_csv(&format!("{song}.{tag}.latents.csv"), &csv)?;
        println!("{song}: {tag} masked {} nodes", output.report.masked.len());
        Ok(())
    }

    fn eval(&self, original: &Path, generated: &Path, report: &Path) -> anyhow::Result<()> {
        let orig = self.read_score(original)?;
        let gen = self.read_score(generated)?;
        let text = String::from_utf8(read_input(report)?).map_err(|_| input_error("report is not UTF-8"))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| input_error(format!("report: {e}")))?;
        let (segments, task) = if value.get("schema").is_some() {
            let g = parse_graph(&text)?;
            let segs = g
                .nodes
                .iter()
                .map(|n| MaskedSegment {
                    node: n.id,
                    instrument: n.instrument,
                    start_bar: n.start_bar,
                    length: n.length,
                })
                .collect();
            (segs, None)
        } else {
            let r: TaskReport = serde_json::from_value(value).map_err(|e| input_error(format!("report: {e}")))?;
            (r.masked, Some(r.task))
        };
        let mut metrics = evaluate_task(&orig, &gen, &segments, task);
        metrics.meta = self.provenance();
        let song = stem(generated);
        self.write(&format!("{song}.metrics.json"), metrics.to_json())?;
        self.write_csv(&format!("{song}.metrics.csv"), &metrics.to_csv())?;
        print!("{}", metrics.to_table());
        Ok(())
    }

    fn render(&self, artifact: &Path) -> anyhow::Result<()> {
        let bytes = read_input(artifact)?;
        let name = stem(artifact);
        let name = name
            .trim_end_matches(".analysis")
            .trim_end_matches(".graph")
            .to_string();
        if bytes.starts_with(b"CLON") {
            let img = ConlonImage::from_bytes(&bytes)?;
            self.write(&format!("{name}.velocity.pgm"), conlon_pgm(&img, &self.comment()))?;
            return Ok(());
        }
        let text = String::from_utf8(bytes).map_err(|_| input_error("artifact is neither JSON nor a CONLON tensor"))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| input_error(format!("artifact: {e}")))?;
        if value.get("schema").is_some() {
            let g = parse_graph(&text)?;
            self.write(&format!("{name}.dot"), format!("// {}\n{}", self.comment(), to_dot(&g)))?;
        } else if value.get("kind").and_then(|k| k.as_str()) == Some("analysis") {
            let ssm: Vec<Vec<f64>> = serde_json::from_value(value["ssm"].clone())?;
            let novelty: Vec<f64> = serde_json::from_value(value["novelty"].clone())?;
            let boundaries: Vec<usize> = serde_json::from_value(value["boundaries"].clone())?;
            self.write(&format!("{name}.ssm.pgm"), ssm_pgm(&ssm, &self.comment()))?;
            self.write(
                &format!("{name}.novelty.pgm"),
                curve_pgm(&novelty, &boundaries, &self.comment()),
            )?;
        } else {
            bail!(input_error(
                "unrecognized artifact; expected an analysis JSON, a graph JSON or a CONLON tensor"
            ));
        }
        Ok(())
    }
}

fn task_tag(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Inpaint => "inpaint",
        TaskKind::Generate => "generate",
        TaskKind::MelodyConditioned => "melody",
    }
}

fn annotate_sidecar(path: &Path, provenance: serde_json::Value) -> anyhow::Result<()> {
    let side = crate::checkpoint::sidecar_path(path);
    let mut value: serde_json::Value = serde_json::from_slice(&fs::read(&side)?)?;
    value["meta"]["run"] = provenance;
    fs::write(&side, serde_json::to_string_pretty(&value)? + "\n")?;
    Ok(())
}

fn read_genres(path: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(out);
    };
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line == "file,genre") {
            continue;
        }
        let (file, genre) = line
            .split_once(',')
            .ok_or_else(|| anyhow!(input_error(format!("genres.csv line {}: expected `file,genre`", n + 1))))?;
        out.insert(file.trim().to_string(), genre.trim().to_string());
    }
    Ok(out)
}

fn matrix_csv(a: &StructureAnalysis) -> String {
    let mut out = String::new();
    for i in 0..a.ssm.len() {
        let row: Vec<String> = a.ssm.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn novelty_csv(a: &StructureAnalysis) -> String {
    let mut out = String::from("bar,novelty,boundary\n");
    for (m, v) in a.novelty.values.iter().enumerate() {
        let _ = writeln!(out, "{m},{v},{}", a.boundaries.contains(&m) as u8);
    }
    out
}

fn pgm(width: usize, height: usize, comment: &str, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n# {comment}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// One pixel per entry, white for 1.
pub fn ssm_pgm(ssm: &[Vec<f64>], comment: &str) -> Vec<u8> {
    let n = ssm.len();
    let pixels: Vec<u8> = ssm
        .iter()
        .flatten()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    pgm(n, n, comment, &pixels)
}

/// Bar chart of the curve, 4 pixels per bar and 64 rows; boundary columns are grey.
pub fn curve_pgm(curve: &[f64], boundaries: &[usize], comment: &str) -> Vec<u8> {
    const H: usize = 64;
    const W: usize = 4;
    let (lo, hi) = curve.iter().fold((0.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let width = curve.len() * W;
    let mut pixels = vec![0u8; width * H];
    for (m, &v) in curve.iter().enumerate() {
        let top = ((hi - v) / span * (H - 1) as f64).round() as usize;
        let zero = ((hi - 0.0) / span * (H - 1) as f64).round() as usize;
        let (a, b) = (top.min(zero), top.max(zero));
        for y in 0..H {
            let fill = if (a..=b).contains(&y) {
                255
            } else if boundaries.contains(&m) {
                96
            } else {
                0
            };
            for x in 0..W {
                pixels[y * width + m * W + x] = fill;
            }
        }
    }
    pgm(width, H, comment, &pixels)
}

/// Velocity channel, high pitches at the top.
pub fn conlon_pgm(img: &ConlonImage, comment: &str) -> Vec<u8> {
    let vel = img.channel(Channel::Velocity);
    let mut pixels = Vec::with_capacity(vel.len());
    for p in (0..PITCHES).rev() {
        for t in 0..STEPS {
            pixels.push((vel[p * STEPS + t] / 127.0 * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    pgm(STEPS, PITCHES, comment, &pixels)
}
