//! Frozen multi-layer feature extractors.
//!
//! Each encoder is a fixed random network: a linear projection of its visible
//! channels, then `num_layers` blocks of width-3 convolution, `tanh` and a
//! residual linear mix. Block 1 carries the encoder's frame stride. Weights
//! are a pure function of the spec and are never trained or serialized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, Error, Result};
use crate::numcore::kernels::{self, Conv1dGeom};
use crate::synth::Utterance;
use crate::TensorF64;

pub const CONV_WIDTH: usize = 3;
pub const ALLOWED_STRIDES: [usize; 3] = [1, 2, 4];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub id: String,
    pub seed: u64,
    pub num_layers: usize,
    pub dim: usize,
    pub stride: usize,
    /// Input channels this encoder can see.
    pub mask: Vec<usize>,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("encoder {:?}: {f}", self.id);
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Config(field("id must be non-empty [A-Za-z0-9_]")));
        }
        if self.mask.is_empty() {
            return Err(Error::Config(field("mask is empty")));
        }
        if self.num_layers < 2 || self.dim == 0 {
            return Err(Error::Config(field("num_layers must be >= 2 and dim > 0")));
        }
        if !ALLOWED_STRIDES.contains(&self.stride) {
            return Err(Error::Config(field("stride must be 1, 2 or 4")));
        }
        Ok(())
    }

    /// Frames produced from an input of `frames` frames.
    pub fn out_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.stride)
    }

    /// The default two-encoder family over `channels` input channels: `A`
    /// sees the first half, `B` the second half.
    pub fn default_pair(channels: usize) -> Vec<EncoderSpec> {
        let half = channels / 2;
        vec![
            EncoderSpec {
                id: "A".into(),
                seed: 101,
                num_layers: 4,
                dim: 24,
                stride: 1,
                mask: (0..half).collect(),
            },
            EncoderSpec {
                id: "B".into(),
                seed: 202,
                num_layers: 6,
                dim: 32,
                stride: 2,
                mask: (half..channels).collect(),
            },
        ]
    }

    /// A third encoder seeing every channel, for three-encoder runs.
    pub fn full_view(channels: usize) -> EncoderSpec {
        EncoderSpec {
            id: "C".into(),
            seed: 303,
            num_layers: 5,
            dim: 28,
            stride: 1,
            mask: (0..channels).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv_w: TensorF64,
    conv_b: TensorF64,
    mix: TensorF64,
}

/// Per-layer outputs of one encoder on one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    pub layers: Vec<TensorF64>,
}

impl LayerFeatures {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn frames(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    spec: EncoderSpec,
    proj_w: TensorF64,
    proj_b: TensorF64,
    blocks: Vec<Block>,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> TensorF64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    let numel = shape.iter().product();
    TensorF64::new(shape.to_vec(), (0..numel).map(|_| normal.sample(rng)).collect())
        .expect("nonzero extents")
}

pub fn build_encoder(spec: &EncoderSpec) -> Result<FrozenEncoder> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, r) = (spec.mask.len(), spec.dim);
    let proj_w = gaussian(&mut rng, &[c, r], 1.0 / (c as f64).sqrt());
    let proj_b = gaussian(&mut rng, &[r], 0.1);
    let blocks = (0..spec.num_layers)
        .map(|_| Block {
            conv_w: gaussian(&mut rng, &[CONV_WIDTH * r, r], 1.0 / ((CONV_WIDTH * r) as f64).sqrt()),
            conv_b: gaussian(&mut rng, &[r], 0.1),
            mix: gaussian(&mut rng, &[r, r], 0.5 / (r as f64).sqrt()),
        })
        .collect();
    Ok(FrozenEncoder { spec: spec.clone(), proj_w, proj_b, blocks })
}

impl FrozenEncoder {
    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(TensorF64::numel).sum()
    }

    fn tensors(&self) -> impl Iterator<Item = &TensorF64> {
        [&self.proj_w, &self.proj_b]
            .into_iter()
            .chain(self.blocks.iter().flat_map(|b| [&b.conv_w, &b.conv_b, &b.mix]))
    }

    /// SHA-256 over every weight, for freeze checks.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Runs the encoder on a `[frames x channels]` signal.
    pub fn extract(&self, signal: &TensorF64) -> Result<LayerFeatures> {
        if signal.rank() != 2 {
            return dim_err(format!("signal must be [frames x channels], got {:?}", signal.shape()));
        }
        let max_ch = *self.spec.mask.iter().max().expect("validated mask");
        if max_ch >= signal.cols() {
            return dim_err(format!(
                "encoder {} reads channel {max_ch} but the signal has {} channels",
                self.spec.id,
                signal.cols()
            ));
        }
        let r = self.spec.dim;
        let mut h = signal.select_cols(&self.spec.mask)?.matmul(&self.proj_w)?.add_row(&self.proj_b)?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (j, block) in self.blocks.iter().enumerate() {
            let geom = Conv1dGeom {
                frames: h.rows(),
                in_ch: r,
                out_ch: r,
                width: CONV_WIDTH,
                stride: if j == 0 { self.spec.stride } else { 1 },
            };
            let mut conv = vec![0.0; geom.out_frames() * r];
            kernels::conv1d(geom, h.data(), block.conv_w.data(), block.conv_b.data(), &mut conv);
            let act = TensorF64::new(vec![geom.out_frames(), r], conv)?.map(f64::tanh);
            h = act.add(&act.matmul(&block.mix)?)?;
            layers.push(h.clone());
        }
        Ok(LayerFeatures { layers })
    }
}

/// Extracts every encoder's features for every utterance: `out[utt][enc]`.
pub fn extract_all(encoders: &[FrozenEncoder], utts: &[Utterance]) -> Result<Vec<Vec<LayerFeatures>>> {
    utts.par_iter()
        .map(|u| encoders.iter().map(|e| e.extract(&u.signal)).collect())
        .collect()
}
