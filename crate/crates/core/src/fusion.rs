//! Stage 1: weighted layer sums, unification, concatenation fusion and the
//! fusion training loop.
//!
//! For encoder `i` with layer features `f_i^k`, the weighted sum is
//! `sum_k softmax(logits_i)_k * f_i^k`. Unification mean-pools every encoder
//! to the coarsest frame rate present and projects it to the common width
//! `r`. The fused feature is `[f_1 | ... | f_n] * L + b`, of width `m`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, Bindings, Checkpoint, ParamStore};
use crate::downstream::{self, classifier_logits, pool_labels, FrameModel, Metrics, CLS_B, CLS_W};
use crate::encoders::{build_encoder, EncoderSpec, FrozenEncoder, LayerFeatures};
use crate::error::{dim_err, Error, Result};
use crate::synth::{Corpus, Utterance};
use crate::train::{run_sgd, TrainConfig, TrainLog};
use crate::{GraphF64, TensorF64, Var};

pub const HEAD_L: &str = "head.L";
pub const HEAD_B: &str = "head.b";

pub fn logits_name(id: &str) -> String {
    format!("logits.{id}")
}

pub fn unify_w_name(id: &str) -> String {
    format!("unify.{id}.W")
}

pub fn unify_b_name(id: &str) -> String {
    format!("unify.{id}.b")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    /// Common per-encoder width after unification.
    pub r: usize,
    /// Fused width fed to the classifier.
    pub m: usize,
    pub vocab: usize,
    /// Output frame stride; `None` uses the coarsest encoder stride.
    #[serde(default)]
    pub stride: Option<usize>,
}

/// Effective layer weights: the softmax of the logits.
pub fn effective_weights(logits: &[f64]) -> Vec<f64> {
    crate::numcore::softmax(logits)
}

/// Frame-rate bookkeeping for a set of encoder strides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameAlignment {
    strides: Vec<usize>,
    coarsest: usize,
}

impl FrameAlignment {
    pub fn new(strides: &[usize]) -> Result<Self> {
        Self::with_rate(strides, None)
    }

    /// Aligns to output stride `rate`, which every encoder stride must divide.
    pub fn with_rate(strides: &[usize], rate: Option<usize>) -> Result<Self> {
        let max = *strides
            .iter()
            .max()
            .ok_or_else(|| Error::Config("no encoders to align".into()))?;
        let coarsest = rate.unwrap_or(max);
        if let Some(d) = strides.iter().find(|&&d| d == 0 || !coarsest.is_multiple_of(d)) {
            return Err(Error::Config(format!(
                "stride {d} does not divide the output stride {coarsest}"
            )));
        }
        Ok(Self { strides: strides.to_vec(), coarsest })
    }

    pub fn for_encoders(specs: &[EncoderSpec], rate: Option<usize>) -> Result<Self> {
        Self::with_rate(&specs.iter().map(|s| s.stride).collect::<Vec<_>>(), rate)
    }

    pub fn coarsest(&self) -> usize {
        self.coarsest
    }

    /// Pooling factor that brings encoder `slot` to the coarsest rate.
    pub fn factor(&self, slot: usize) -> usize {
        self.coarsest / self.strides[slot]
    }

    /// Frames shared by every encoder for an input of `input_frames` frames.
    pub fn common_frames(&self, input_frames: usize) -> usize {
        self.strides
            .iter()
            .map(|&d| input_frames.div_ceil(d) / (self.coarsest / d))
            .min()
            .expect("non-empty")
    }

    /// Input-rate labels pooled to the common rate.
    pub fn labels(&self, labels: &[usize]) -> Result<Vec<usize>> {
        let frames = self.common_frames(labels.len());
        if frames == 0 {
            return Err(Error::Data(format!(
                "{} frames is too short for stride {}",
                labels.len(),
                self.coarsest
            )));
        }
        Ok(pool_labels(labels, self.coarsest, frames))
    }
}

/// Weighted sum of one encoder's layers under effective weights `weights`.
pub fn weighted_sum(g: &mut GraphF64, feats: &LayerFeatures, weights: Var) -> Result<Var> {
    if g.value(weights).numel() != feats.num_layers() {
        return dim_err(format!(
            "{} layer weights for {} layers",
            g.value(weights).numel(),
            feats.num_layers()
        ));
    }
    let layers: Vec<Var> = feats.layers.iter().map(|l| g.constant(l.clone())).collect();
    g.weighted_sum(weights, &layers)
}

/// Mean-pools `x` by `factor` and keeps `frames` rows.
pub fn align_frames(g: &mut GraphF64, x: Var, factor: usize, frames: usize) -> Result<Var> {
    g.mean_pool_rows(x, factor, frames)
}

/// Projects aligned features of encoder `id` to width `r`.
pub fn project(g: &mut GraphF64, vars: &Bindings, id: &str, x: Var) -> Result<Var> {
    g.affine(x, vars.get(&unify_w_name(id))?, Some(vars.get(&unify_b_name(id))?))
}

/// Unifies the weighted features of one utterance: every output has
/// `common_frames(input_frames)` rows and width `r`.
pub fn unify(
    g: &mut GraphF64,
    vars: &Bindings,
    ids: &[&str],
    weighted: &[Var],
    align: &FrameAlignment,
    input_frames: usize,
) -> Result<Vec<Var>> {
    if ids.len() != weighted.len() {
        return dim_err(format!("{} ids for {} features", ids.len(), weighted.len()));
    }
    let frames = align.common_frames(input_frames);
    ids.iter()
        .zip(weighted)
        .enumerate()
        .map(|(slot, (id, &x))| {
            let pooled = align_frames(g, x, align.factor(slot), frames)?;
            project(g, vars, id, pooled)
        })
        .collect()
}

/// Concatenates unified features along the feature axis and applies `L`.
pub fn fuse(g: &mut GraphF64, unified: &[Var], l: Var, bias: Option<Var>) -> Result<Var> {
    let Some(&first) = unified.first() else {
        return dim_err("nothing to fuse");
    };
    let shape = g.shape(first).to_vec();
    if let Some(bad) = unified.iter().find(|&&u| g.shape(u) != shape.as_slice()) {
        return dim_err(format!("ragged fusion inputs: {:?} vs {shape:?}", g.shape(*bad)));
    }
    let cat = g.concat_cols(unified)?;
    g.affine(cat, l, bias)
}

/// Weighted sum, pooling by `factor` and projection for one encoder over a
/// batch of `(features, common frames)` items, stacked along frames.
pub fn unified_stack(
    g: &mut GraphF64,
    vars: &Bindings,
    id: &str,
    factor: usize,
    items: &[(&LayerFeatures, usize)],
) -> Result<Var> {
    let weights = g.softmax(vars.get(&logits_name(id))?);
    let mut parts = Vec::with_capacity(items.len());
    for &(feats, frames) in items {
        let ws = weighted_sum(g, feats, weights)?;
        parts.push(align_frames(g, ws, factor, frames)?);
    }
    let stacked = g.concat_rows(&parts)?;
    project(g, vars, id, stacked)
}

/// Layer features of one utterance for a model's encoders, in model order.
#[derive(Clone, Debug)]
pub struct UttFeatures<'a> {
    pub feats: Vec<&'a LayerFeatures>,
    pub input_frames: usize,
    pub labels: &'a [usize],
}

/// Frozen-encoder outputs extracted once for a split.
#[derive(Clone, Debug)]
pub struct FeatureBank<'c> {
    ids: Vec<String>,
    feats: Vec<Vec<LayerFeatures>>,
    utts: &'c [Utterance],
}

impl<'c> FeatureBank<'c> {
    pub fn extract(encoders: &[FrozenEncoder], utts: &'c [Utterance]) -> Result<Self> {
        Ok(Self {
            ids: encoders.iter().map(|e| e.id().to_string()).collect(),
            feats: crate::encoders::extract_all(encoders, utts)?,
            utts,
        })
    }

    pub fn len(&self) -> usize {
        self.utts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utts.is_empty()
    }

    pub fn utterance(&self, idx: usize) -> &Utterance {
        &self.utts[idx]
    }

    /// Features of utterance `idx` for the encoders `ids`, in that order.
    pub fn view(&self, idx: usize, ids: &[&str]) -> Result<UttFeatures<'_>> {
        let feats = ids
            .iter()
            .map(|id| {
                let slot = self
                    .ids
                    .iter()
                    .position(|b| b == id)
                    .ok_or_else(|| Error::Config(format!("no features extracted for encoder {id:?}")))?;
                Ok(&self.feats[idx][slot])
            })
            .collect::<Result<_>>()?;
        let u = &self.utts[idx];
        Ok(UttFeatures { feats, input_frames: u.frames(), labels: &u.labels })
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> TensorF64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    let numel = shape.iter().product();
    TensorF64::new(shape.to_vec(), (0..numel).map(|_| normal.sample(rng)).collect())
        .expect("nonzero extents")
}

/// Stage-1 trainable state over a fixed, ordered encoder set.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub encoders: Vec<EncoderSpec>,
    pub dims: Dims,
    pub params: ParamStore,
}

impl FusionModel {
    /// Zero layer logits (uniform weights), Gaussian projections, zero biases.
    pub fn init(encoders: Vec<EncoderSpec>, dims: Dims, seed: u64) -> Result<Self> {
        if encoders.is_empty() {
            return Err(Error::Config("a fusion model needs at least one encoder".into()));
        }
        for (i, e) in encoders.iter().enumerate() {
            e.validate()?;
            if encoders[..i].iter().any(|o| o.id == e.id) {
                return Err(Error::Config(format!("duplicate encoder id {:?}", e.id)));
            }
        }
        FrameAlignment::for_encoders(&encoders, dims.stride)?;
        let Dims { r, m, vocab, .. } = dims;
        if r == 0 || m == 0 || vocab < 2 {
            return Err(Error::Config("fusion dims r, m must be positive and vocab >= 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for e in &encoders {
            params.insert(logits_name(&e.id), TensorF64::zeros(&[e.num_layers]));
            params.insert(unify_w_name(&e.id), gaussian(&mut rng, &[e.dim, r], 1.0 / (e.dim as f64).sqrt()));
            params.insert(unify_b_name(&e.id), TensorF64::zeros(&[r]));
        }
        let n = encoders.len();
        params.insert(HEAD_L, gaussian(&mut rng, &[n * r, m], 1.0 / ((n * r) as f64).sqrt()));
        params.insert(HEAD_B, TensorF64::zeros(&[m]));
        params.insert(CLS_W, gaussian(&mut rng, &[m, vocab], 1.0 / (m as f64).sqrt()));
        params.insert(CLS_B, TensorF64::zeros(&[vocab]));
        Ok(Self { encoders, dims, params })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self { encoders: ckpt.encoders.clone(), dims: ckpt.dims, params: ckpt.params.clone() }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.encoders.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn alignment(&self) -> Result<FrameAlignment> {
        FrameAlignment::for_encoders(&self.encoders, self.dims.stride)
    }

    /// Current effective layer weights of encoder `id`.
    pub fn layer_weights(&self, id: &str) -> Result<Vec<f64>> {
        Ok(effective_weights(self.params.get(&logits_name(id))?.data()))
    }

    /// Unified features of encoder `slot` for a batch, stacked along frames.
    pub fn unified_stack(
        &self,
        g: &mut GraphF64,
        vars: &Bindings,
        align: &FrameAlignment,
        slot: usize,
        batch: &[UttFeatures<'_>],
    ) -> Result<Var> {
        let items: Vec<_> = batch.iter().map(|u| (u.feats[slot], align.common_frames(u.input_frames))).collect();
        unified_stack(g, vars, &self.encoders[slot].id, align.factor(slot), &items)
    }

    /// Classifier logits for a batch, frames of all utterances stacked.
    pub fn forward(&self, g: &mut GraphF64, vars: &Bindings, batch: &[UttFeatures<'_>]) -> Result<Var> {
        let align = self.alignment()?;
        let unified = (0..self.encoders.len())
            .map(|slot| self.unified_stack(g, vars, &align, slot, batch))
            .collect::<Result<Vec<_>>>()?;
        let fused = fuse(g, &unified, vars.get(HEAD_L)?, Some(vars.get(HEAD_B)?))?;
        classifier_logits(g, vars, fused)
    }

    /// Frame labels of a batch at the common rate, stacked like [`Self::forward`].
    pub fn batch_labels(&self, batch: &[UttFeatures<'_>]) -> Result<Vec<usize>> {
        let align = self.alignment()?;
        let mut out = Vec::new();
        for u in batch {
            out.extend(align.labels(u.labels)?);
        }
        Ok(out)
    }

    pub fn evaluate_bank(&self, bank: &FeatureBank<'_>) -> Result<Metrics> {
        let ids = self.ids();
        let mut metrics = Metrics::new(self.dims.vocab);
        for idx in 0..bank.len() {
            let view = bank.view(idx, &ids)?;
            let mut g = GraphF64::new();
            let vars = self.params.bind_constants(&mut g);
            let logits = self.forward(&mut g, &vars, std::slice::from_ref(&view))?;
            metrics.add(g.value(logits), &self.batch_labels(std::slice::from_ref(&view))?)?;
        }
        Ok(metrics)
    }
}

/// Trains a fusion model on the train split; returns the stage-1 checkpoint.
pub fn train_stage1(corpus: &Corpus, model: FusionModel, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_stage1_logged(corpus, model, cfg).map(|(ckpt, _)| ckpt)
}

pub fn train_stage1_logged(corpus: &Corpus, mut model: FusionModel, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    let encoders = model.encoders.iter().map(build_encoder).collect::<Result<Vec<_>>>()?;
    let train = FeatureBank::extract(&encoders, &corpus.train)?;
    let dev = FeatureBank::extract(&encoders, &corpus.dev)?;
    let ids: Vec<String> = model.ids().into_iter().map(String::from).collect();
    let ids: Vec<&str> = ids.iter().map(String::as_str).collect();

    let dev_initial = if dev.is_empty() { None } else { Some(model.evaluate_bank(&dev)?) };
    let mut params = std::mem::take(&mut model.params);
    let log = run_sgd(&mut params, train.len(), cfg, |g, vars, batch| {
        let views = batch.iter().map(|&i| train.view(i, &ids)).collect::<Result<Vec<_>>>()?;
        let logits = model.forward(g, vars, &views)?;
        let labels = model.batch_labels(&views)?;
        downstream::task_loss(g, logits, &labels)
    })?;
    model.params = params;

    let mut metrics = std::collections::BTreeMap::new();
    if let Some(first) = log.losses.first() {
        metrics.insert("train_loss_first".to_string(), *first);
        metrics.insert("train_loss_last".to_string(), *log.losses.last().expect("non-empty"));
    }
    if let Some(m0) = dev_initial {
        let m1 = model.evaluate_bank(&dev)?;
        metrics.insert("dev_fer_initial".to_string(), m0.frame_error_rate);
        metrics.insert("dev_fer".to_string(), m1.frame_error_rate);
        metrics.insert("dev_ce".to_string(), m1.mean_cross_entropy);
    }
    let hash = config_hash(&(&corpus.config, &model.encoders, &model.dims, cfg));
    let ckpt = Checkpoint {
        stage: 1,
        config_hash: hash,
        step: cfg.steps,
        metrics,
        encoders: model.encoders.clone(),
        dims: model.dims,
        source: None,
        pred_bias: false,
        params: model.params,
    };
    Ok((ckpt, log))
}

/// A stage-1 model with its frozen encoders: runs every encoder at inference.
#[derive(Clone, Debug)]
pub struct FusionGraph {
    pub encoders: Vec<FrozenEncoder>,
    pub model: FusionModel,
}

impl FusionGraph {
    pub fn new(model: FusionModel) -> Result<Self> {
        let encoders = model.encoders.iter().map(build_encoder).collect::<Result<Vec<_>>>()?;
        Ok(Self { encoders, model })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::new(FusionModel::from_checkpoint(ckpt))
    }
}

impl FrameModel for FusionGraph {
    fn vocab(&self) -> usize {
        self.model.dims.vocab
    }

    fn logits(&self, signal: &TensorF64) -> Result<TensorF64> {
        let feats = self.encoders.iter().map(|e| e.extract(signal)).collect::<Result<Vec<_>>>()?;
        let labels = vec![0; signal.rows()];
        let view = UttFeatures { feats: feats.iter().collect(), input_frames: signal.rows(), labels: &labels };
        let mut g = GraphF64::new();
        let vars = self.model.params.bind_constants(&mut g);
        let out = self.model.forward(&mut g, &vars, &[view])?;
        Ok(g.value(out).detached())
    }

    fn frame_labels(&self, labels: &[usize]) -> Result<Vec<usize>> {
        self.model.alignment()?.labels(labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> TensorF64 {
        TensorF64::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn feats3() -> LayerFeatures {
        LayerFeatures {
            layers: vec![
                t(&[2, 2], &[0.3, -1.2, 0.8, 2.1]),
                t(&[2, 2], &[1.7, 0.4, -0.6, 0.05]),
                t(&[2, 2], &[-2.2, 0.9, 1.1, -0.35]),
            ],
        }
    }

    #[test]
    fn one_hot_weights_select_a_layer_exactly() {
        let f = feats3();
        for j in 0..3 {
            let mut g = GraphF64::new();
            let mut w = vec![0.0; 3];
            w[j] = 1.0;
            let wv = g.constant(TensorF64::vector(w).unwrap());
            let out = weighted_sum(&mut g, &f, wv).unwrap();
            assert_eq!(g.value(out), &f.layers[j]);
        }
    }

    #[test]
    fn uniform_two_layer_weights_average() {
        let f = LayerFeatures { layers: feats3().layers[..2].to_vec() };
        let mut g = GraphF64::new();
        let logits = g.constant(TensorF64::zeros(&[2]));
        let w = g.softmax(logits);
        let out = weighted_sum(&mut g, &f, w).unwrap();
        let mean = f.layers[0].add(&f.layers[1]).unwrap().scale(0.5);
        assert!(g.value(out).max_abs_diff(&mean).unwrap() < 1e-15);
    }

    #[test]
    fn random_weights_match_loop_oracle() {
        let f = feats3();
        let logits = [0.4, -1.3, 0.9];
        let w = effective_weights(&logits);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut g = GraphF64::new();
        let lv = g.constant(TensorF64::vector(logits.to_vec()).unwrap());
        let wv = g.softmax(lv);
        let out = weighted_sum(&mut g, &f, wv).unwrap();
        for frame in 0..2 {
            for d in 0..2 {
                let mut expect = 0.0;
                for (k, layer) in f.layers.iter().enumerate() {
                    expect += w[k] * layer.at(frame, d);
                }
                assert!((g.value(out).at(frame, d) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_count_mismatch_is_dimension_error() {
        let mut g = GraphF64::new();
        let w = g.constant(TensorF64::vector(vec![0.5, 0.5]).unwrap());
        assert!(matches!(weighted_sum(&mut g, &feats3(), w), Err(Error::Dimension(_))));
    }

    #[test]
    fn alignment_arithmetic() {
        let a = FrameAlignment::new(&[1, 2]).unwrap();
        assert_eq!(a.common_frames(100), 50);
        assert_eq!(a.common_frames(101), 50);
        assert_eq!(a.factor(0), 2);
        assert_eq!(a.factor(1), 1);
        let single = FrameAlignment::new(&[2]).unwrap();
        assert_eq!(single.common_frames(101), 51);
        assert!(FrameAlignment::new(&[2, 3]).is_err());
        let slowed = FrameAlignment::with_rate(&[1], Some(2)).unwrap();
        assert_eq!((slowed.factor(0), slowed.common_frames(101)), (2, 50));
        assert!(FrameAlignment::with_rate(&[2], Some(3)).is_err());
    }

    #[test]
    fn unify_identity_and_pooling() {
        let mut p = ParamStore::new();
        p.insert(unify_w_name("A"), TensorF64::eye(2));
        p.insert(unify_b_name("A"), TensorF64::zeros(&[2]));
        p.insert(unify_w_name("B"), TensorF64::eye(2));
        p.insert(unify_b_name("B"), TensorF64::zeros(&[2]));
        let mut g = GraphF64::new();
        let vars = p.bind(&mut g);
        let x = t(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let xa = g.constant(x.clone());
        let single = FrameAlignment::new(&[1]).unwrap();
        let out = unify(&mut g, &vars, &["A"], &[xa], &single, 4).unwrap();
        assert_eq!(g.value(out[0]), &x);

        let pair = FrameAlignment::new(&[1, 2]).unwrap();
        let xb = g.constant(t(&[2, 2], &[0.0; 4]));
        let out = unify(&mut g, &vars, &["A", "B"], &[xa, xb], &pair, 4).unwrap();
        assert_eq!(g.value(out[0]).data(), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(g.shape(out[1]), &[2, 2]);
    }

    #[test]
    fn fuse_shapes_and_degenerate_cases() {
        let mut g = GraphF64::new();
        let f1 = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = g.constant(TensorF64::eye(2));
        let out = fuse(&mut g, &[f1], eye, None).unwrap();
        assert_eq!(g.value(out), g.value(f1));

        let f2 = g.constant(t(&[3, 2], &[0.5; 6]));
        let l = g.constant(TensorF64::zeros(&[4, 5]));
        let b = g.constant(TensorF64::vector(vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap());
        let out = fuse(&mut g, &[f1, f2], l, Some(b)).unwrap();
        assert_eq!(g.shape(out), &[3, 5]);
        assert_eq!(g.value(out).row(2), &[0.1, 0.2, 0.3, 0.4, 0.5]);

        let ragged = g.constant(t(&[2, 2], &[0.0; 4]));
        assert!(matches!(fuse(&mut g, &[f1, ragged], l, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn fuse_is_linear_without_bias() {
        let mut g = GraphF64::new();
        let f1 = g.constant(t(&[2, 2], &[0.3, -0.7, 1.9, 0.2]));
        let f2 = g.constant(t(&[2, 2], &[-1.1, 0.6, 0.4, 2.5]));
        let l = g.constant(t(&[4, 3], &[0.2, -0.1, 0.7, 1.3, 0.05, -0.4, 0.9, 0.33, -0.8, 0.1, 0.6, -0.25]));
        let base = fuse(&mut g, &[f1, f2], l, None).unwrap();
        let alpha = -2.75;
        let s1 = g.scale(f1, alpha);
        let s2 = g.scale(f2, alpha);
        let scaled = fuse(&mut g, &[s1, s2], l, None).unwrap();
        let expect = g.value(base).scale(alpha);
        assert!(g.value(scaled).max_abs_diff(&expect).unwrap() < 1e-10);
    }
}
