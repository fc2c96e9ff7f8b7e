//! Experiment configuration and the pipeline stages behind the CLI.
//!
//! Every stage writes into `<out>/<stage>-<key>`, where `key` is a hash of
//! the configuration that determines the stage's output (including its
//! upstream stages). A stage whose directory already exists is not re-run,
//! and a directory is only ever created whole: output goes to a scratch
//! directory that is renamed into place at the end.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{predictability_table, ProbeConfig};
use crate::bench::{
    count_fusion, count_inference, count_prediction, emit_report, measure_rtf_interleaved, source_baseline, BenchConfig,
    ParamBreakdown, RtfResult, RunRow,
};
use crate::checkpoint::{config_hash, Checkpoint};
use crate::downstream::{evaluate, FrameModel, Metrics};
use crate::encoders::EncoderSpec;
use crate::error::{Error, Result};
use crate::fusion::{train_stage1_logged, Dims, FrameAlignment, FusionGraph, FusionModel};
use crate::predict::{train_stage2_logged, InferenceGraph, PredictConfig, PredictionModel};
use crate::synth::{generate_corpus, read_corpus, write_corpus, Corpus, CorpusConfig, Split};
use crate::train::{TrainConfig, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub r: usize,
    pub m: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { r: 32, m: 100 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: Split::Dev }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub encoders: Vec<EncoderSpec>,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub predict: PredictConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        Self {
            encoders: EncoderSpec::default_pair(corpus.channels),
            corpus,
            model: ModelConfig::default(),
            stage1: TrainConfig::default(),
            stage2: TrainConfig::default(),
            predict: PredictConfig::default(),
            probe: ProbeConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if self.encoders.is_empty() {
            return Err(Error::Config("encoders: at least one encoder is required".into()));
        }
        for (i, e) in self.encoders.iter().enumerate() {
            e.validate().map_err(|err| Error::Config(format!("encoders.{i}: {err}")))?;
            if self.encoders[..i].iter().any(|o| o.id == e.id) {
                return Err(Error::Config(format!("encoders.{i}.id: duplicate id {:?}", e.id)));
            }
            if let Some(c) = e.mask.iter().find(|&&c| c >= self.corpus.channels) {
                return Err(Error::Config(format!(
                    "encoders.{i}.mask: channel {c} but corpus.channels is {}",
                    self.corpus.channels
                )));
            }
        }
        FrameAlignment::for_encoders(&self.encoders, None).map_err(|e| Error::Config(format!("encoders: {e}")))?;
        if self.model.r == 0 || self.model.m == 0 {
            return Err(Error::Config("model.r and model.m must be positive".into()));
        }
        self.stage1.validate().map_err(|e| Error::Config(format!("stage1: {e}")))?;
        self.stage2.validate().map_err(|e| Error::Config(format!("stage2: {e}")))?;
        if !self.encoders.iter().any(|e| e.id == self.predict.source) {
            return Err(Error::Config(format!(
                "predict.source: {:?} is not a declared encoder id",
                self.predict.source
            )));
        }
        self.bench.validate()?;
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        // Single-encoder models share the fusion frame rate.
        let stride = self.encoders.iter().map(|e| e.stride).max();
        Dims { r: self.model.r, m: self.model.m, vocab: self.corpus.vocab, stride }
    }
}

/// Object fields whose keys are free-form, so overrides may add entries.
const MAP_FIELDS: [&str; 1] = ["predict.lambda_per"];

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Sets the dotted `key` in `root` to `raw`, parsed as JSON when possible
/// and as a bare string otherwise. Array elements are addressed by index.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (depth, part) in parts.iter().enumerate() {
        let path = parts[..=depth].join(".");
        let parent = parts[..depth].join(".");
        let last = depth + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if !map.contains_key(*part) {
                    if last && MAP_FIELDS.contains(&parent.as_str()) {
                        map.insert(part.to_string(), Value::Null);
                    } else {
                        return Err(Error::Config(format!("unknown config key {path:?}")));
                    }
                }
                map.get_mut(*part).expect("present")
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("{parent:?} is a list; {part:?} is not an index")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("{path:?}: index out of range (length {len})")))?
            }
            other => return Err(Error::Config(format!("{parent:?} is a {} and has no field {part:?}", kind(other)))),
        };
    }
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parsed = match (&*node, parsed) {
        // A bare word that happens to be valid JSON for another type stays a string.
        (Value::String(_), p) if !p.is_string() => Value::String(raw.to_string()),
        (_, p) => p,
    };
    if !node.is_null() && kind(node) != kind(&parsed) {
        return Err(Error::Config(format!(
            "{key:?} expects a {}, got {raw:?}",
            kind(node)
        )));
    }
    *node = parsed;
    Ok(())
}

/// Reads the config file (or defaults), applies `--key=value` overrides and
/// validates the result.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let base: ExperimentConfig = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    for o in overrides {
        let body = o
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("override {o:?} must look like --key=value")))?;
        let (key, raw) = body
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} must look like --key=value")))?;
        apply_override(&mut value, key, raw)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Gen,
    TrainFuse,
    TrainPredict,
    Eval,
    ProbeR2,
    Bench,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::TrainFuse => "train-fuse",
            Stage::TrainPredict => "train-predict",
            Stage::Eval => "eval",
            Stage::ProbeR2 => "probe-r2",
            Stage::Bench => "bench",
            Stage::Report => "report",
        }
    }

    fn upstream(self) -> Option<Stage> {
        match self {
            Stage::Gen => None,
            Stage::TrainFuse => Some(Stage::Gen),
            Stage::TrainPredict | Stage::ProbeR2 => Some(Stage::TrainFuse),
            Stage::Eval | Stage::Bench => Some(Stage::TrainPredict),
            Stage::Report => None,
        }
    }

    /// Hash of everything that determines this stage's output.
    pub fn key(self, cfg: &ExperimentConfig) -> String {
        let up = self.upstream().map(|s| s.key(cfg)).unwrap_or_default();
        let h = match self {
            Stage::Gen => config_hash(&(self.name(), &cfg.corpus)),
            Stage::TrainFuse => config_hash(&(self.name(), &up, &cfg.encoders, &cfg.model, &cfg.stage1)),
            Stage::TrainPredict => config_hash(&(self.name(), &up, &cfg.predict, &cfg.stage2)),
            Stage::Eval => config_hash(&(self.name(), &up, &cfg.eval)),
            Stage::ProbeR2 => config_hash(&(self.name(), &up, &cfg.probe)),
            Stage::Bench => config_hash(&(self.name(), &up, &cfg.bench)),
            Stage::Report => config_hash(&(self.name(), Stage::Eval.key(cfg), Stage::Bench.key(cfg))),
        };
        h[..16].to_string()
    }

    pub fn dir(self, out: &Path, cfg: &ExperimentConfig) -> PathBuf {
        out.join(format!("{}-{}", self.name(), self.key(cfg)))
    }
}

pub const CONFIG_FILE: &str = "config.json";
pub const FUSION_MODEL: &str = "fusion";

pub fn single_model(id: &str) -> String {
    format!("single-{id}")
}

pub fn predict_model(source: &str) -> String {
    format!("predict-{source}")
}

fn require(stage: Stage, out: &Path, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = stage.dir(out, cfg);
    if dir.is_dir() {
        Ok(dir)
    } else {
        let what = format!("{} output not found at {}; run `{}` first", stage.name(), dir.display(), stage.name());
        Err(match stage {
            Stage::Gen => Error::Data(what),
            _ => Error::Checkpoint(what),
        })
    }
}

fn load_corpus(out: &Path, cfg: &ExperimentConfig) -> Result<Corpus> {
    read_corpus(&require(Stage::Gen, out, cfg)?.join("corpus"))
}

fn load_ckpt(stage: Stage, out: &Path, cfg: &ExperimentConfig, model: &str) -> Result<Checkpoint> {
    Checkpoint::load(&require(stage, out, cfg)?.join(model))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn write_trace(path: &Path, log: &TrainLog, l1: Option<&[f64]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step", "loss", "grad_norm"];
    if l1.is_some() {
        header.push("l1");
    }
    w.write_record(&header)?;
    for (s, (loss, norm)) in log.losses.iter().zip(&log.grad_norms).enumerate() {
        let mut rec = vec![s.to_string(), loss.to_string(), norm.to_string()];
        if let Some(l1) = l1 {
            rec.push(l1[s].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs one stage and returns its run directory.
pub fn run(stage: Stage, cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = stage.dir(out, cfg);
    if dir.exists() {
        info!("{} already done: {}", stage.name(), dir.display());
        return Ok(dir);
    }
    fs::create_dir_all(out)?;
    let scratch = out.join(format!(".{}-{}.partial-{}", stage.name(), stage.key(cfg), std::process::id()));
    if scratch.exists() {
        fs::remove_dir_all(&scratch)?;
    }
    fs::create_dir_all(&scratch)?;
    let result = run_into(stage, cfg, out, &scratch);
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&scratch);
        return Err(e);
    }
    write_json(&scratch.join(CONFIG_FILE), cfg)?;
    fs::rename(&scratch, &dir)?;
    info!("{} done: {}", stage.name(), dir.display());
    Ok(dir)
}

fn run_into(stage: Stage, cfg: &ExperimentConfig, out: &Path, dir: &Path) -> Result<()> {
    match stage {
        Stage::Gen => {
            let corpus = generate_corpus(&cfg.corpus)?;
            info!("generated {} / {} / {} utterances", corpus.train.len(), corpus.dev.len(), corpus.test.len());
            write_corpus(&dir.join("corpus"), &corpus)
        }
        Stage::TrainFuse => train_fuse(cfg, out, dir),
        Stage::TrainPredict => train_predict(cfg, out, dir),
        Stage::Eval => eval(cfg, out, dir),
        Stage::ProbeR2 => {
            let corpus = load_corpus(out, cfg)?;
            let ckpt = load_ckpt(Stage::TrainFuse, out, cfg, FUSION_MODEL)?;
            let table = predictability_table(&ckpt, &corpus.train, &cfg.probe)?;
            table.write_csv(fs::File::create(dir.join("r2.csv"))?)
        }
        Stage::Bench => bench(cfg, out, dir),
        Stage::Report => report(cfg, out, dir),
    }
}

fn train_fuse(cfg: &ExperimentConfig, out: &Path, dir: &Path) -> Result<()> {
    let corpus = load_corpus(out, cfg)?;
    let mut runs: Vec<(String, Vec<EncoderSpec>)> = vec![(FUSION_MODEL.to_string(), cfg.encoders.clone())];
    if cfg.encoders.len() > 1 {
        runs.extend(cfg.encoders.iter().map(|e| (single_model(&e.id), vec![e.clone()])));
    }
    let mut summary = BTreeMap::new();
    for (name, specs) in runs {
        info!("training {name}");
        let model = FusionModel::init(specs, cfg.dims(), cfg.stage1.seed)?;
        let (ckpt, log) = train_stage1_logged(&corpus, model, &cfg.stage1)?;
        ckpt.save(&dir.join(&name))?;
        write_trace(&dir.join(format!("{name}.trace.csv")), &log, None)?;
        info!("{name}: dev FER {:.4}", ckpt.metrics.get("dev_fer").copied().unwrap_or(f64::NAN));
        summary.insert(name, ckpt.metrics);
    }
    write_json(&dir.join("metrics.json"), &summary)
}

fn train_predict(cfg: &ExperimentConfig, out: &Path, dir: &Path) -> Result<()> {
    let ckpt1 = load_ckpt(Stage::TrainFuse, out, cfg, FUSION_MODEL)?;
    let corpus = load_corpus(out, cfg)?;
    let model = PredictionModel::from_stage1(&ckpt1, &cfg.predict)?;
    let (ckpt2, log) = train_stage2_logged(&corpus, model, &cfg.stage2, &cfg.predict)?;
    let name = predict_model(&cfg.predict.source);
    ckpt2.save(&dir.join(&name))?;
    write_trace(&dir.join(format!("{name}.trace.csv")), &log.train, Some(&log.l1))?;
    info!("{name}: dev FER {:.4}", ckpt2.metrics.get("dev_fer").copied().unwrap_or(f64::NAN));
    write_json(&dir.join("metrics.json"), &BTreeMap::from([(name, ckpt2.metrics)]))
}

/// Every trained graph of a run, in report order: singles (source first),
/// fusion, prediction.
fn graphs(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(String, Box<dyn FrameModel>)>> {
    let mut ids: Vec<&str> = cfg.encoders.iter().map(|e| e.id.as_str()).collect();
    ids.sort_by_key(|id| *id != cfg.predict.source);
    let mut v: Vec<(String, Box<dyn FrameModel>)> = Vec::new();
    if cfg.encoders.len() > 1 {
        for id in ids {
            let name = single_model(id);
            let ckpt = load_ckpt(Stage::TrainFuse, out, cfg, &name)?;
            v.push((name, Box::new(FusionGraph::from_checkpoint(&ckpt)?)));
        }
    }
    let fusion = load_ckpt(Stage::TrainFuse, out, cfg, FUSION_MODEL)?;
    v.push((FUSION_MODEL.to_string(), Box::new(FusionGraph::from_checkpoint(&fusion)?)));
    let name = predict_model(&cfg.predict.source);
    let ckpt2 = load_ckpt(Stage::TrainPredict, out, cfg, &name)?;
    v.push((name, Box::new(InferenceGraph::from_checkpoint(&ckpt2)?)));
    Ok(v)
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricsLine {
    model: String,
    split: Split,
    #[serde(flatten)]
    metrics: Metrics,
}

fn eval(cfg: &ExperimentConfig, out: &Path, dir: &Path) -> Result<()> {
    let corpus = load_corpus(out, cfg)?;
    let split = cfg.eval.split;
    let mut lines = fs::File::create(dir.join("metrics.jsonl"))?;
    let mut table = csv::Writer::from_path(dir.join("eval.csv"))?;
    table.write_record(["model", "split", "FER", "CE", "frames"])?;
    for (name, graph) in graphs(cfg, out)? {
        let m = evaluate(graph.as_ref(), corpus.split(split))?;
        info!("{name} on {}: FER {:.4}", split.as_str(), m.frame_error_rate);
        table.write_record([
            name.clone(),
            split.as_str().to_string(),
            m.frame_error_rate.to_string(),
            m.mean_cross_entropy.to_string(),
            m.frames.to_string(),
        ])?;
        let line = MetricsLine { model: name, split, metrics: m };
        writeln!(lines, "{}", serde_json::to_string(&line)?)?;
    }
    table.flush()?;
    Ok(())
}

/// Parameter accounting of every graph plus the structural deltas.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamsFile {
    pub models: BTreeMap<String, ParamBreakdown>,
    /// Single-source reference sharing the prediction model's head shapes.
    pub source_baseline: ParamBreakdown,
    pub delta_prediction: i64,
    pub delta_fusion: i64,
}

pub const PARAMS_FILE: &str = "params.json";
pub const TIMING_FILE: &str = "timing.json";

fn bench(cfg: &ExperimentConfig, out: &Path, dir: &Path) -> Result<()> {
    let mut models = BTreeMap::new();
    let fusion = load_ckpt(Stage::TrainFuse, out, cfg, FUSION_MODEL)?;
    let fusion_counts = count_fusion(&FusionModel::from_checkpoint(&fusion))?;
    models.insert(FUSION_MODEL.to_string(), fusion_counts.clone());
    if cfg.encoders.len() > 1 {
        for e in &cfg.encoders {
            let name = single_model(&e.id);
            let ckpt = load_ckpt(Stage::TrainFuse, out, cfg, &name)?;
            models.insert(name, count_fusion(&FusionModel::from_checkpoint(&ckpt))?);
        }
    }
    let pname = predict_model(&cfg.predict.source);
    let ckpt2 = load_ckpt(Stage::TrainPredict, out, cfg, &pname)?;
    let pmodel = PredictionModel::from_checkpoint(&ckpt2, &cfg.predict)?;
    let inference = count_inference(&InferenceGraph::from_checkpoint(&ckpt2)?);
    let baseline = source_baseline(&pmodel)?;
    models.insert(format!("{pname}.train"), count_prediction(&pmodel)?);
    models.insert(pname, inference.clone());
    let params = ParamsFile {
        delta_prediction: inference.delta_over(&baseline),
        delta_fusion: fusion_counts.delta_over(&baseline),
        source_baseline: baseline,
        models,
    };
    write_json(&dir.join(PARAMS_FILE), &params)?;

    let corpus = load_corpus(out, cfg)?;
    let utts = corpus.split(cfg.bench.split);
    let utts = if cfg.bench.max_utts > 0 { &utts[..cfg.bench.max_utts.min(utts.len())] } else { utts };
    let graphs = graphs(cfg, out)?;
    let refs: Vec<&dyn FrameModel> = graphs.iter().map(|(_, g)| g.as_ref()).collect();
    info!("timing {} graphs on {} utterances, {} reps", refs.len(), utts.len(), cfg.bench.reps);
    let results = measure_rtf_interleaved(&refs, utts, cfg.bench.reps, cfg.bench.warmup)?;
    let timing: BTreeMap<String, RtfResult> = graphs.iter().map(|(n, _)| n.clone()).zip(results).collect();
    for (n, r) in &timing {
        info!("{n}: median RTF {:.3e}", r.rtf_median);
    }
    write_json(&dir.join(TIMING_FILE), &timing)
}

fn report(cfg: &ExperimentConfig, out: &Path, dir: &Path) -> Result<()> {
    let eval_dir = require(Stage::Eval, out, cfg)?;
    let bench_dir = require(Stage::Bench, out, cfg)?;
    let mut fers = BTreeMap::new();
    for line in fs::read_to_string(eval_dir.join("metrics.jsonl"))?.lines() {
        let l: MetricsLine = serde_json::from_str(line)?;
        fers.insert(l.model, l.metrics.frame_error_rate);
    }
    let params: ParamsFile = serde_json::from_str(&fs::read_to_string(bench_dir.join(PARAMS_FILE))?)?;
    let timing: BTreeMap<String, RtfResult> = serde_json::from_str(&fs::read_to_string(bench_dir.join(TIMING_FILE))?)?;
    let mut order: Vec<String> = cfg.encoders.iter().map(|e| single_model(&e.id)).collect();
    order.sort_by_key(|n| *n != single_model(&cfg.predict.source));
    if cfg.encoders.len() == 1 {
        order.clear();
    }
    order.push(FUSION_MODEL.to_string());
    order.push(predict_model(&cfg.predict.source));
    let lookup = |name: &str| -> Result<(f64, &ParamBreakdown, f64)> {
        let missing = || Error::Data(format!("no results for model {name:?}"));
        Ok((
            *fers.get(name).ok_or_else(missing)?,
            params.models.get(name).ok_or_else(missing)?,
            timing.get(name).ok_or_else(missing)?.rtf_median,
        ))
    };
    let (base_fer, base_params, _) = lookup(&order[0])?;
    let rows = order
        .iter()
        .map(|name| {
            let (fer, p, rtf) = lookup(name)?;
            Ok(RunRow::new(name, fer, p, rtf, Some((base_params, base_fer))))
        })
        .collect::<Result<Vec<_>>>()?;
    emit_report(&rows, dir)
}

/// Runs gen, train-fuse, train-predict, eval, probe-r2, bench and report.
pub fn run_all(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    for stage in [Stage::Gen, Stage::TrainFuse, Stage::TrainPredict, Stage::Eval, Stage::ProbeR2, Stage::Bench] {
        run(stage, cfg, out)?;
    }
    run(Stage::Report, cfg, out)
}
