//! Parameter accounting, real-time-factor timing and the run report.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamStore;
use crate::downstream::FrameModel;
use crate::encoders::{build_encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::predict::{InferenceGraph, PredictionModel};
use crate::synth::{Split, Utterance};

/// Exact parameter counts grouped by component.
///
/// Component keys: `encoder.<id>`, `weights.<id>` (layer logits),
/// `unify.<id>`, `predictors`, `fusion_head`, `downstream`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub components: BTreeMap<String, usize>,
    /// Components used only while training.
    pub teacher_only: BTreeSet<String>,
    pub total: usize,
    pub inference_total: usize,
}

impl ParamBreakdown {
    fn build(components: BTreeMap<String, usize>, teacher_only: BTreeSet<String>) -> Self {
        let total = components.values().sum();
        let inference_total = components
            .iter()
            .filter(|(k, _)| !teacher_only.contains(*k))
            .map(|(_, v)| v)
            .sum();
        Self { components, teacher_only, total, inference_total }
    }

    pub fn get(&self, component: &str) -> usize {
        self.components.get(component).copied().unwrap_or(0)
    }

    /// Inference parameters added over `baseline`.
    pub fn delta_over(&self, baseline: &ParamBreakdown) -> i64 {
        self.inference_total as i64 - baseline.inference_total as i64
    }
}

fn component_of(param: &str) -> String {
    let (head, rest) = param.split_once('.').unwrap_or((param, ""));
    match head {
        "logits" => format!("weights.{rest}"),
        "unify" => format!("unify.{}", rest.split('.').next().unwrap_or(rest)),
        "pred" => "predictors".into(),
        "head" => "fusion_head".into(),
        "cls" => "downstream".into(),
        other => other.to_string(),
    }
}

/// Groups `encoders` (id, count) and `params` into components; anything
/// belonging to an id in `teachers` is marked training-only.
fn breakdown(encoders: &[(String, usize)], params: &ParamStore, teachers: &[&str]) -> ParamBreakdown {
    let mut comps = BTreeMap::new();
    for (id, n) in encoders {
        comps.insert(format!("encoder.{id}"), *n);
    }
    for (name, t) in params.iter() {
        *comps.entry(component_of(name)).or_insert(0) += t.numel();
    }
    let teacher_only = comps
        .keys()
        .filter(|k| teachers.iter().any(|t| k.split_once('.').is_some_and(|(_, id)| id == *t)))
        .cloned()
        .collect();
    ParamBreakdown::build(comps, teacher_only)
}

fn encoder_counts(specs: &[EncoderSpec]) -> Result<Vec<(String, usize)>> {
    specs.iter().map(|s| Ok((s.id.clone(), build_encoder(s)?.param_count()))).collect()
}

/// Fusion graph: every encoder runs at inference.
pub fn count_fusion(model: &FusionModel) -> Result<ParamBreakdown> {
    Ok(breakdown(&encoder_counts(&model.encoders)?, &model.params, &[]))
}

/// Stage-2 training graph: teachers and their adapters are training-only.
pub fn count_prediction(model: &PredictionModel) -> Result<ParamBreakdown> {
    let teachers: Vec<&str> = model.teacher_ids().collect();
    Ok(breakdown(&encoder_counts(&model.fusion.encoders)?, &model.fusion.params, &teachers))
}

/// Deployed stage-2 graph.
pub fn count_inference(graph: &InferenceGraph) -> ParamBreakdown {
    let enc = vec![(graph.source().to_string(), graph.encoder().param_count())];
    breakdown(&enc, graph.params(), &[])
}

/// The single-source reference the parameter deltas are measured against:
/// the source encoder with its layer weights and unify projection, and the
/// same fusion head and classifier as `model`.
pub fn source_baseline(model: &PredictionModel) -> Result<ParamBreakdown> {
    let full = count_prediction(model)?;
    let src = &model.source;
    let keep = [
        format!("encoder.{src}"),
        format!("weights.{src}"),
        format!("unify.{src}"),
        "fusion_head".to_string(),
        "downstream".to_string(),
    ];
    let comps = full.components.into_iter().filter(|(k, _)| keep.contains(k)).collect();
    Ok(ParamBreakdown::build(comps, BTreeSet::new()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub reps: usize,
    pub warmup: usize,
    pub split: Split,
    /// Utterances timed from the start of the split; 0 means all.
    pub max_utts: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { reps: 5, warmup: 1, split: Split::Dev, max_utts: 50 }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::Config(format!("bench.reps must be >= 3, got {}", self.reps)));
        }
        Ok(())
    }
}

/// Timing summary in seconds; RTF is processing time over nominal duration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfResult {
    pub reps: usize,
    pub utterances: usize,
    pub nominal_seconds: f64,
    pub time_mean: f64,
    pub time_median: f64,
    pub time_min: f64,
    pub rtf_mean: f64,
    /// Headline figure: median over utterances of each utterance's median RTF.
    pub rtf_median: f64,
    pub rtf_min: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn measure_rtf(model: &dyn FrameModel, utts: &[Utterance], reps: usize, warmup: usize) -> Result<RtfResult> {
    Ok(measure_rtf_interleaved(&[model], utts, reps, warmup)?.remove(0))
}

/// Times several graphs on the same utterances, alternating between graphs
/// inside every repetition so drift in machine speed hits all of them alike.
/// Runs on the calling thread only.
pub fn measure_rtf_interleaved(
    models: &[&dyn FrameModel],
    utts: &[Utterance],
    reps: usize,
    warmup: usize,
) -> Result<Vec<RtfResult>> {
    if reps < 3 {
        return Err(Error::Config(format!("RTF needs at least 3 repetitions, got {reps}")));
    }
    if utts.is_empty() {
        return Err(Error::Data("no utterances to time".into()));
    }
    if let Some(u) = utts.iter().find(|u| !(u.nominal_duration_s > 0.0)) {
        return Err(Error::Data(format!("utterance {} has zero nominal duration", u.id)));
    }
    for _ in 0..warmup {
        for u in utts {
            for m in models {
                black_box(m.logits(&u.signal)?);
            }
        }
    }
    // times[model][utt][rep]
    let mut times = vec![vec![Vec::with_capacity(reps); utts.len()]; models.len()];
    for _ in 0..reps {
        for (ui, u) in utts.iter().enumerate() {
            for (mi, m) in models.iter().enumerate() {
                let start = Instant::now();
                black_box(m.logits(black_box(&u.signal))?);
                times[mi][ui].push(start.elapsed().as_secs_f64());
            }
        }
    }
    let nominal: f64 = utts.iter().map(|u| u.nominal_duration_s).sum();
    Ok(times
        .into_iter()
        .map(|per_utt| {
            let all: Vec<f64> = per_utt.iter().flatten().copied().collect();
            let mut utt_medians: Vec<f64> = per_utt.iter().map(|t| median(&mut t.clone())).collect();
            let mut rtfs: Vec<f64> = utt_medians.iter().zip(utts).map(|(t, u)| t / u.nominal_duration_s).collect();
            let time_mean = all.iter().sum::<f64>() / all.len() as f64;
            RtfResult {
                reps,
                utterances: utts.len(),
                nominal_seconds: nominal,
                time_mean,
                time_median: median(&mut utt_medians),
                time_min: all.iter().copied().fold(f64::INFINITY, f64::min),
                rtf_mean: rtfs.iter().sum::<f64>() / rtfs.len() as f64,
                rtf_min: rtfs.iter().copied().fold(f64::INFINITY, f64::min),
                rtf_median: median(&mut rtfs),
            }
        })
        .collect())
}

/// One row of the run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub model: String,
    #[serde(rename = "FER")]
    pub fer: f64,
    pub params_total: usize,
    pub params_inference: usize,
    #[serde(rename = "RTF_median")]
    pub rtf_median: f64,
    pub delta_params_vs_baseline: i64,
    #[serde(rename = "delta_FER_vs_baseline")]
    pub delta_fer_vs_baseline: f64,
}

impl RunRow {
    /// A row with deltas measured against `baseline` (which may be itself).
    pub fn new(model: &str, fer: f64, params: &ParamBreakdown, rtf_median: f64, baseline: Option<(&ParamBreakdown, f64)>) -> Self {
        let (dp, df) = baseline.map_or((0, 0.0), |(b, bfer)| (params.delta_over(b), fer - bfer));
        Self {
            model: model.to_string(),
            fer,
            params_total: params.total,
            params_inference: params.inference_total,
            rtf_median,
            delta_params_vs_baseline: dp,
            delta_fer_vs_baseline: df,
        }
    }
}

pub const REPORT_FILE: &str = "report.csv";
pub const PLOT_FILE: &str = "rtf_fer.csv";

/// Writes `report.csv` and the `(RTF, FER)` plot data into `dir`.
pub fn emit_report(runs: &[RunRow], dir: &Path) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::Data("no runs to report".into()));
    }
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(REPORT_FILE))?;
    for r in runs {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut p = csv::Writer::from_path(dir.join(PLOT_FILE))?;
    p.write_record(["model", "RTF", "FER"])?;
    for r in runs {
        p.write_record([r.model.clone(), r.rtf_median.to_string(), r.fer.to_string()])?;
    }
    p.flush()?;
    Ok(())
}

pub fn parse_report(path: &Path) -> Result<Vec<RunRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Dims;
    use crate::TensorF64;

    #[test]
    fn breakdown_groups_and_sums() {
        let mut p = ParamStore::new();
        p.insert("logits.A", TensorF64::zeros(&[4]));
        p.insert("unify.A.W", TensorF64::zeros(&[24, 32]));
        p.insert("unify.A.b", TensorF64::zeros(&[32]));
        p.insert("pred.L_B", TensorF64::zeros(&[32, 32]));
        p.insert("cls.W", TensorF64::zeros(&[3, 2]));
        let b = breakdown(&[("A".into(), 10)], &p, &[]);
        assert_eq!(b.get("unify.A"), 24 * 32 + 32);
        assert_eq!(b.get("predictors"), 1024);
        assert_eq!(b.total, 10 + 4 + 24 * 32 + 32 + 1024 + 6);
        assert_eq!(b.total, b.inference_total);
    }

    #[test]
    fn fusion_is_additive_over_encoders() {
        let specs = EncoderSpec::default_pair(16);
        let m = FusionModel::init(specs.clone(), Dims { r: 32, m: 100, vocab: 9, stride: None }, 0).unwrap();
        let b = count_fusion(&m).unwrap();
        let enc: usize = specs.iter().map(|s| build_encoder(s).unwrap().param_count()).sum();
        assert_eq!(b.total, enc + m.params.numel_where(|_| true));
    }

    struct Sleepy;

    impl FrameModel for Sleepy {
        fn vocab(&self) -> usize {
            2
        }
        fn logits(&self, signal: &TensorF64) -> Result<TensorF64> {
            std::thread::sleep(std::time::Duration::from_micros(200));
            Ok(TensorF64::zeros(&[signal.rows(), 2]))
        }
        fn frame_labels(&self, labels: &[usize]) -> Result<Vec<usize>> {
            Ok(labels.to_vec())
        }
    }

    fn utt(frames: usize, rate: f64) -> Utterance {
        Utterance {
            id: "u".into(),
            signal: TensorF64::zeros(&[frames, 1]),
            labels: vec![0; frames],
            nominal_duration_s: frames as f64 / rate,
        }
    }

    #[test]
    fn rtf_is_positive_and_validates_inputs() {
        let r = measure_rtf(&Sleepy, &[utt(10, 100.0)], 3, 1).unwrap();
        assert!(r.rtf_median > 0.0 && r.rtf_min <= r.rtf_median);
        assert!(matches!(measure_rtf(&Sleepy, &[utt(10, 100.0)], 2, 0), Err(Error::Config(_))));
        assert!(matches!(measure_rtf(&Sleepy, &[utt(10, f64::INFINITY)], 3, 0), Err(Error::Data(_))));
    }

    #[test]
    fn report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let base = ParamBreakdown::build(BTreeMap::from([("x".to_string(), 7)]), BTreeSet::new());
        let rows = vec![
            RunRow::new("base", 0.1234567890123, &base, 0.0123, Some((&base, 0.1234567890123))),
            RunRow::new("other", 1.0 / 3.0, &base, 1e-5, None),
        ];
        assert_eq!(rows[0].delta_params_vs_baseline, 0);
        assert_eq!(rows[0].delta_fer_vs_baseline, 0.0);
        emit_report(&rows, dir.path()).unwrap();
        assert_eq!(parse_report(&dir.path().join(REPORT_FILE)).unwrap(), rows);
        let text = fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("model,FER,params_total,params_inference,RTF_median,"));
    }
}
