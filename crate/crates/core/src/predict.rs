//! Stage 2: a single source encoder predicts every other encoder's unified
//! features through `r x r` linear maps, so the other encoders are needed
//! only as training targets.
//!
//! Predicted features keep the stage-1 slot order, so the fusion matrix `L`
//! sees the source in its original position and predictions in the teachers'.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analysis::ridge_through_origin;
use crate::checkpoint::{config_hash, Bindings, Checkpoint, ParamStore};
use crate::downstream::{self, classifier_logits, FrameModel, Metrics, CLS_B, CLS_W};
use crate::encoders::{build_encoder, FrozenEncoder, LayerFeatures};
use crate::error::{dim_err, Error, Result};
use crate::fusion::{
    fuse, logits_name, unified_stack, unify_b_name, unify_w_name, FeatureBank, FrameAlignment, FusionModel,
    UttFeatures, HEAD_B, HEAD_L,
};
use crate::synth::Corpus;
use crate::train::{run_sgd, TrainConfig, TrainLog};
use crate::{GraphF64, TensorF64, Var};

/// Ridge used by the closed-form predictor initialisation.
pub const WARM_START_RIDGE: f64 = 1e-6;

pub fn pred_w_name(id: &str) -> String {
    format!("pred.L_{id}")
}

pub fn pred_b_name(id: &str) -> String {
    format!("pred.b_{id}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub source: String,
    /// L1 weight applied to every predictor without an entry in `lambda_per`.
    pub lambda: f64,
    pub lambda_per: BTreeMap<String, f64>,
    pub pred_bias: bool,
    pub init_seed: u64,
    pub warm_start: bool,
    pub warm_start_utts: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            source: "A".into(),
            lambda: 1.0,
            lambda_per: BTreeMap::new(),
            pred_bias: false,
            init_seed: 11,
            warm_start: false,
            warm_start_utts: 50,
        }
    }
}

/// One predictor's graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct Predictor {
    pub w: Var,
    pub b: Option<Var>,
}

/// `{src, src*L_2 (+b_2), ..., src*L_n (+b_n)}`, source first.
pub fn predict_features(g: &mut GraphF64, src: Var, preds: &[Predictor]) -> Result<Vec<Var>> {
    let mut out = vec![src];
    for p in preds {
        let (r_src, w_shape) = (g.shape(src)[1], g.shape(p.w).to_vec());
        if w_shape != [r_src, r_src] {
            return dim_err(format!("predictor {w_shape:?} for source width {r_src}"));
        }
        out.push(g.affine(src, p.w, p.b)?);
    }
    Ok(out)
}

/// Reorders a source-first predicted set into encoder slot order.
pub fn to_slot_order(set: &[Var], src_slot: usize) -> Vec<Var> {
    let mut out = set[1..].to_vec();
    out.insert(src_slot, set[0]);
    out
}

/// Fuses predicted features with the stage-1 fusion matrix.
pub fn fuse_predicted(g: &mut GraphF64, predicted: &[Var], l: Var, bias: Option<Var>) -> Result<Var> {
    fuse(g, predicted, l, bias)
}

/// Mean absolute error between a prediction and its target.
pub fn predictor_loss(g: &mut GraphF64, predicted: Var, target: Var) -> Result<Var> {
    g.l1_loss(predicted, target)
}

/// Source-side head shared by training and inference: predictors, fusion
/// and classifier. Returns the predicted set in slot order and the logits.
fn predicted_head(
    g: &mut GraphF64,
    vars: &Bindings,
    ids: &[String],
    src_slot: usize,
    pred_bias: bool,
    src: Var,
) -> Result<(Vec<Var>, Var)> {
    let preds = ids
        .iter()
        .enumerate()
        .filter(|(slot, _)| *slot != src_slot)
        .map(|(_, id)| {
            Ok(Predictor {
                w: vars.get(&pred_w_name(id))?,
                b: if pred_bias { Some(vars.get(&pred_b_name(id))?) } else { None },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = predict_features(g, src, &preds)?;
    let ordered = to_slot_order(&set, src_slot);
    let fused = fuse_predicted(g, &ordered, vars.get(HEAD_L)?, Some(vars.get(HEAD_B)?))?;
    Ok((ordered, classifier_logits(g, vars, fused)?))
}

/// Nodes of one stage-2 training forward pass.
#[derive(Clone, Debug)]
pub struct StageTwoForward {
    pub logits: Var,
    pub task: Var,
    /// `(teacher id, L1 node)` in slot order.
    pub l1: Vec<(String, Var)>,
    pub loss: Var,
}

/// Stage-1 state plus predictors for every non-source encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionModel {
    pub fusion: FusionModel,
    pub source: String,
    pub pred_bias: bool,
    /// L1 weight per teacher id.
    pub lambdas: BTreeMap<String, f64>,
}

impl PredictionModel {
    /// Continues from a stage-1 checkpoint: freezes every layer-weight logit
    /// and the teachers' unify projections, and adds fresh predictors.
    pub fn from_stage1(ckpt: &Checkpoint, cfg: &PredictConfig) -> Result<Self> {
        if ckpt.stage != 1 {
            return Err(Error::Checkpoint(format!("expected a stage-1 checkpoint, got stage {}", ckpt.stage)));
        }
        let fusion = FusionModel::from_checkpoint(ckpt);
        let mut model = Self::assemble(fusion, cfg)?;
        let r = model.fusion.dims.r;
        let normal = Normal::new(0.0, 1.0 / (r as f64).sqrt()).expect("positive std");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let params = &mut model.fusion.params;
        for spec in &model.fusion.encoders {
            params.freeze(&logits_name(&spec.id));
            if spec.id == model.source {
                continue;
            }
            params.freeze(&unify_w_name(&spec.id));
            params.freeze(&unify_b_name(&spec.id));
            let w = TensorF64::new(vec![r, r], (0..r * r).map(|_| normal.sample(&mut rng)).collect())?;
            params.insert(pred_w_name(&spec.id), w);
            if cfg.pred_bias {
                params.insert(pred_b_name(&spec.id), TensorF64::zeros(&[r]));
            }
        }
        Ok(model)
    }

    /// Rebuilds a model from a stage-2 checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &PredictConfig) -> Result<Self> {
        let source = ckpt
            .source
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no prediction source".into()))?;
        let cfg = PredictConfig { source, pred_bias: ckpt.pred_bias, ..cfg.clone() };
        let model = Self::assemble(FusionModel::from_checkpoint(ckpt), &cfg)?;
        for id in model.teacher_ids() {
            model.fusion.params.get(&pred_w_name(id))?;
        }
        Ok(model)
    }

    fn assemble(fusion: FusionModel, cfg: &PredictConfig) -> Result<Self> {
        if !fusion.encoders.iter().any(|e| e.id == cfg.source) {
            return Err(Error::Config(format!(
                "predict.source {:?} is not a declared encoder ({:?})",
                cfg.source,
                fusion.ids()
            )));
        }
        if let Some(bad) = cfg.lambda_per.keys().find(|k| !fusion.encoders.iter().any(|e| &e.id == *k && **k != cfg.source)) {
            return Err(Error::Config(format!("predict.lambda_per names {bad:?}, which is not a teacher encoder")));
        }
        let lambdas = fusion
            .encoders
            .iter()
            .filter(|e| e.id != cfg.source)
            .map(|e| (e.id.clone(), cfg.lambda_per.get(&e.id).copied().unwrap_or(cfg.lambda)))
            .collect();
        Ok(Self { source: cfg.source.clone(), pred_bias: cfg.pred_bias, lambdas, fusion })
    }

    pub fn source_slot(&self) -> usize {
        self.fusion.encoders.iter().position(|e| e.id == self.source).expect("validated source")
    }

    pub fn teacher_ids(&self) -> impl Iterator<Item = &str> {
        self.fusion.encoders.iter().map(|e| e.id.as_str()).filter(move |id| *id != self.source)
    }

    fn ids(&self) -> Vec<String> {
        self.fusion.encoders.iter().map(|e| e.id.clone()).collect()
    }

    /// Logits from the source path alone; teacher features are not read.
    pub fn forward_source(&self, g: &mut GraphF64, vars: &Bindings, batch: &[UttFeatures<'_>]) -> Result<(Var, Vec<Var>)> {
        let align = self.fusion.alignment()?;
        let src = self.fusion.unified_stack(g, vars, &align, self.source_slot(), batch)?;
        let (predicted, logits) = predicted_head(g, vars, &self.ids(), self.source_slot(), self.pred_bias, src)?;
        Ok((logits, predicted))
    }

    /// Task loss plus weighted L1 against teacher targets.
    pub fn forward_train(&self, g: &mut GraphF64, vars: &Bindings, batch: &[UttFeatures<'_>]) -> Result<StageTwoForward> {
        let (logits, predicted) = self.forward_source(g, vars, batch)?;
        let labels = self.fusion.batch_labels(batch)?;
        let task = downstream::task_loss(g, logits, &labels)?;
        let align = self.fusion.alignment()?;
        let mut loss = task;
        let mut l1 = Vec::new();
        for (slot, spec) in self.fusion.encoders.iter().enumerate() {
            if spec.id == self.source {
                continue;
            }
            let target = self.fusion.unified_stack(g, vars, &align, slot, batch)?;
            let li = predictor_loss(g, predicted[slot], target)?;
            let weighted = g.scale(li, self.lambdas[&spec.id]);
            loss = g.add(loss, weighted)?;
            l1.push((spec.id.clone(), li));
        }
        Ok(StageTwoForward { logits, task, l1, loss })
    }

    /// Mean L1 per teacher over every element of a split, and its mean over
    /// teachers.
    pub fn split_l1(&self, bank: &FeatureBank<'_>) -> Result<(BTreeMap<String, f64>, f64)> {
        let ids = self.ids();
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for idx in 0..bank.len() {
            let view = bank.view(idx, &ids)?;
            let mut g = GraphF64::new();
            let vars = self.fusion.params.bind_constants(&mut g);
            let out = self.forward_train(&mut g, &vars, std::slice::from_ref(&view))?;
            let count = g.value(out.logits).rows() * self.fusion.dims.r;
            for (id, v) in out.l1 {
                let e = sums.entry(id).or_default();
                e.0 += g.value(v).item() * count as f64;
                e.1 += count;
            }
        }
        let per: BTreeMap<String, f64> = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        let mean = if per.is_empty() { 0.0 } else { per.values().sum::<f64>() / per.len() as f64 };
        Ok((per, mean))
    }

    /// Argmax metrics of the source-only path over a split.
    pub fn evaluate_bank(&self, bank: &FeatureBank<'_>) -> Result<Metrics> {
        let ids = self.ids();
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        let mut metrics = Metrics::new(self.fusion.dims.vocab);
        for idx in 0..bank.len() {
            let view = bank.view(idx, &ids)?;
            let mut g = GraphF64::new();
            let vars = self.fusion.params.bind_constants(&mut g);
            let (logits, _) = self.forward_source(&mut g, &vars, std::slice::from_ref(&view))?;
            metrics.add(g.value(logits), &self.fusion.batch_labels(std::slice::from_ref(&view))?)?;
        }
        Ok(metrics)
    }
}

/// Closed-form predictors: ridge regression (no intercept) from the source's
/// unified features to each teacher's, over the calibration utterances.
pub fn warm_start_predictors(
    model: &PredictionModel,
    bank: &FeatureBank<'_>,
    calibration: &[usize],
) -> Result<BTreeMap<String, TensorF64>> {
    if calibration.is_empty() {
        return Err(Error::Data("empty calibration batch".into()));
    }
    let ids = model.ids();
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let views = calibration.iter().map(|&i| bank.view(i, &id_refs)).collect::<Result<Vec<_>>>()?;
    let align = model.fusion.alignment()?;
    let mut g = GraphF64::new();
    let vars = model.fusion.params.bind_constants(&mut g);
    let src = model.fusion.unified_stack(&mut g, &vars, &align, model.source_slot(), &views)?;
    let mut out = BTreeMap::new();
    for (slot, id) in ids.iter().enumerate() {
        if *id == model.source {
            continue;
        }
        let target = model.fusion.unified_stack(&mut g, &vars, &align, slot, &views)?;
        let w = ridge_through_origin(g.value(src), g.value(target), WARM_START_RIDGE)?;
        out.insert(id.clone(), w);
    }
    Ok(out)
}

/// Stage-2 trace: the optimizer log plus the mean predictor L1 per step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTwoLog {
    pub train: TrainLog,
    pub l1: Vec<f64>,
}

pub fn train_stage2(corpus: &Corpus, model: PredictionModel, cfg: &TrainConfig, pcfg: &PredictConfig) -> Result<Checkpoint> {
    train_stage2_logged(corpus, model, cfg, pcfg).map(|(c, _)| c)
}

pub fn train_stage2_logged(
    corpus: &Corpus,
    mut model: PredictionModel,
    cfg: &TrainConfig,
    pcfg: &PredictConfig,
) -> Result<(Checkpoint, StageTwoLog)> {
    let encoders = model.fusion.encoders.iter().map(build_encoder).collect::<Result<Vec<_>>>()?;
    let train = FeatureBank::extract(&encoders, &corpus.train)?;
    let dev = FeatureBank::extract(&encoders, &corpus.dev)?;

    if pcfg.warm_start {
        let calibration: Vec<usize> = (0..pcfg.warm_start_utts.min(train.len())).collect();
        for (id, w) in warm_start_predictors(&model, &train, &calibration)? {
            *model.fusion.params.get_mut(&pred_w_name(&id))? = w;
        }
    }

    let ids = model.ids();
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let mut metrics = BTreeMap::new();
    let (per0, l1_0) = model.split_l1(&train)?;
    let dev0 = if dev.is_empty() { None } else { Some(model.evaluate_bank(&dev)?) };

    let mut params = std::mem::take(&mut model.fusion.params);
    let mut l1_trace = Vec::with_capacity(cfg.steps);
    let log = run_sgd(&mut params, train.len(), cfg, |g, vars, batch| {
        let views = batch.iter().map(|&i| train.view(i, &id_refs)).collect::<Result<Vec<_>>>()?;
        let out = model.forward_train(g, vars, &views)?;
        let l1: Vec<f64> = out.l1.iter().map(|(_, v)| g.value(*v).item()).collect();
        l1_trace.push(if l1.is_empty() { 0.0 } else { l1.iter().sum::<f64>() / l1.len() as f64 });
        Ok(out.loss)
    })?;
    model.fusion.params = params;

    let (per1, l1_1) = model.split_l1(&train)?;
    metrics.insert("train_l1_initial".into(), l1_0);
    metrics.insert("train_l1_final".into(), l1_1);
    for (id, v) in per0 {
        metrics.insert(format!("train_l1_initial.{id}"), v);
    }
    for (id, v) in per1 {
        metrics.insert(format!("train_l1_final.{id}"), v);
    }
    if let (Some(first), Some(last)) = (log.losses.first(), log.losses.last()) {
        metrics.insert("train_loss_first".into(), *first);
        metrics.insert("train_loss_last".into(), *last);
    }
    if let Some(m0) = dev0 {
        let m1 = model.evaluate_bank(&dev)?;
        metrics.insert("dev_fer_initial".into(), m0.frame_error_rate);
        metrics.insert("dev_fer".into(), m1.frame_error_rate);
        metrics.insert("dev_ce".into(), m1.mean_cross_entropy);
    }
    let hash = config_hash(&(&corpus.config, &model.fusion.encoders, &model.fusion.dims, cfg, pcfg));
    let ckpt = Checkpoint {
        stage: 2,
        config_hash: hash,
        step: cfg.steps,
        metrics,
        encoders: model.fusion.encoders.clone(),
        dims: model.fusion.dims,
        source: Some(model.source.clone()),
        pred_bias: model.pred_bias,
        params: model.fusion.params,
    };
    Ok((ckpt, StageTwoLog { train: log, l1: l1_trace }))
}

/// Deployable stage-2 graph: the source encoder and the parameters it
/// reads. Teacher encoders and their unify projections are not loaded.
#[derive(Clone, Debug)]
pub struct InferenceGraph {
    encoder: FrozenEncoder,
    ids: Vec<String>,
    src_slot: usize,
    align: FrameAlignment,
    pred_bias: bool,
    vocab: usize,
    params: ParamStore,
}

impl InferenceGraph {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let source = ckpt
            .source
            .clone()
            .ok_or_else(|| Error::Checkpoint("not a stage-2 checkpoint: no prediction source".into()))?;
        let src_slot = ckpt
            .encoders
            .iter()
            .position(|e| e.id == source)
            .ok_or_else(|| Error::Checkpoint(format!("source {source:?} is not among the checkpoint's encoders")))?;
        let ids: Vec<String> = ckpt.encoders.iter().map(|e| e.id.clone()).collect();
        let mut names = vec![logits_name(&source), unify_w_name(&source), unify_b_name(&source)];
        for id in ids.iter().filter(|id| **id != source) {
            names.push(pred_w_name(id));
            if ckpt.pred_bias {
                names.push(pred_b_name(id));
            }
        }
        names.extend([HEAD_L, HEAD_B, CLS_W, CLS_B].map(String::from));
        let mut params = ParamStore::new();
        for name in names {
            let t = ckpt.params.get(&name).map_err(|_| {
                Error::Checkpoint(format!("stage-2 checkpoint lacks {name:?}"))
            })?;
            params.insert(name, t.clone());
        }
        Ok(Self {
            encoder: build_encoder(&ckpt.encoders[src_slot])?,
            ids,
            src_slot,
            align: FrameAlignment::for_encoders(&ckpt.encoders, ckpt.dims.stride)?,
            pred_bias: ckpt.pred_bias,
            vocab: ckpt.dims.vocab,
            params,
        })
    }

    pub fn source(&self) -> &str {
        self.encoder.id()
    }

    pub fn encoder(&self) -> &FrozenEncoder {
        &self.encoder
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Everything the graph holds: `encoder.<id>` plus parameter names.
    pub fn manifest(&self) -> Vec<String> {
        let mut m = vec![format!("encoder.{}", self.encoder.id())];
        m.extend(self.params.names().map(String::from));
        m
    }

    /// Logits from precomputed source features.
    pub fn logits_from_features(&self, feats: &LayerFeatures, input_frames: usize) -> Result<TensorF64> {
        let mut g = GraphF64::new();
        let vars = self.params.bind_constants(&mut g);
        let frames = self.align.common_frames(input_frames);
        let src = unified_stack(&mut g, &vars, self.source(), self.align.factor(self.src_slot), &[(feats, frames)])?;
        let (_, logits) = predicted_head(&mut g, &vars, &self.ids, self.src_slot, self.pred_bias, src)?;
        Ok(g.value(logits).detached())
    }
}

impl FrameModel for InferenceGraph {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn logits(&self, signal: &TensorF64) -> Result<TensorF64> {
        let feats = self.encoder.extract(signal)?;
        self.logits_from_features(&feats, signal.rows())
    }

    fn frame_labels(&self, labels: &[usize]) -> Result<Vec<usize>> {
        self.align.labels(labels)
    }
}
