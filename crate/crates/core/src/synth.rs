//! Seeded synthetic frame-labelled corpus.
//!
//! Every frame label `y = a * q_b + b` is built from two latent factors. Factor
//! `a` is rendered only into the first half of the channels and factor `b`
//! only into the second half, so an encoder that sees one half can recover
//! exactly one factor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::dump;
use crate::TensorF64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    /// Label vocabulary size, `q_a * q_b`.
    pub vocab: usize,
    pub q_a: usize,
    pub q_b: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub nominal_frame_rate: f64,
    /// Labels are held constant over segments of this many frames.
    pub segment_min: usize,
    pub segment_max: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            num_train: 600,
            num_dev: 100,
            num_test: 100,
            frames_min: 80,
            frames_max: 200,
            vocab: 9,
            q_a: 3,
            q_b: 3,
            channels: 16,
            noise_std: 0.1,
            nominal_frame_rate: 100.0,
            segment_min: 4,
            segment_max: 12,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.q_a < 2 || self.q_b < 2 || self.q_a * self.q_b != self.vocab {
            return bad(format!(
                "corpus.vocab = {} does not factor as q_a * q_b = {} * {} with both >= 2",
                self.vocab, self.q_a, self.q_b
            ));
        }
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return bad(format!("corpus.channels = {} must be even and >= 2", self.channels));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return bad(format!(
                "corpus.frames_min/frames_max = {}/{} is not a valid range",
                self.frames_min, self.frames_max
            ));
        }
        if self.segment_min == 0 || self.segment_min > self.segment_max {
            return bad(format!(
                "corpus.segment_min/segment_max = {}/{} is not a valid range",
                self.segment_min, self.segment_max
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("corpus.noise_std = {} must be finite and >= 0", self.noise_std));
        }
        if !(self.nominal_frame_rate > 0.0 && self.nominal_frame_rate.is_finite()) {
            return bad("corpus.nominal_frame_rate must be positive".into());
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.channels / 2
    }

    /// `(a, b)` factors of a label.
    pub fn factors(&self, label: usize) -> (usize, usize) {
        (label / self.q_b, label % self.q_b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[frames x channels]`
    pub signal: TensorF64,
    pub labels: Vec<usize>,
    pub nominal_duration_s: f64,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

struct Patterns {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl Patterns {
    fn new(cfg: &CorpusConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut draw = |count: usize| -> Vec<Vec<f64>> {
            (0..count)
                .map(|_| (0..cfg.half()).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect()
        };
        let a = draw(cfg.q_a);
        let b = draw(cfg.q_b);
        Self { a, b }
    }
}

fn utterance(cfg: &CorpusConfig, patterns: &Patterns, index: usize, id: String) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let frames = rng.random_range(cfg.frames_min..=cfg.frames_max);
    let mut labels = Vec::with_capacity(frames);
    while labels.len() < frames {
        let len = rng.random_range(cfg.segment_min..=cfg.segment_max);
        let y = rng.random_range(0..cfg.vocab);
        labels.extend(std::iter::repeat_n(y, len.min(frames - labels.len())));
    }
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
    let half = cfg.half();
    let mut data = Vec::with_capacity(frames * cfg.channels);
    for &y in &labels {
        let (a, b) = cfg.factors(y);
        for c in 0..cfg.channels {
            let base = if c < half { patterns.a[a][c] } else { patterns.b[b][c - half] };
            data.push(base + noise.sample(&mut rng));
        }
    }
    Utterance {
        id,
        signal: TensorF64::new(vec![frames, cfg.channels], data).expect("frames >= 1"),
        labels,
        nominal_duration_s: frames as f64 / cfg.nominal_frame_rate,
    }
}

/// Generates the train/dev/test splits. Utterance `i` depends only on
/// `(seed, i)`, so generation runs in parallel without changing the output.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let patterns = Patterns::new(cfg);
    let mut offset = 0;
    let mut make = |split: Split, count: usize| {
        let start = offset;
        offset += count;
        (0..count)
            .into_par_iter()
            .map(|k| utterance(cfg, &patterns, start + k, format!("{}-{k:05}", split.as_str())))
            .collect::<Vec<_>>()
    };
    let train = make(Split::Train, cfg.num_train);
    let dev = make(Split::Dev, cfg.num_dev);
    let test = make(Split::Test, cfg.num_test);
    Ok(Corpus { config: cfg.clone(), train, dev, test })
}

/// Which latent factors a model can observe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visibility {
    FactorA,
    FactorB,
    Full,
}

/// Bayes frame error rate of a model that sees only part of the signal.
///
/// The unseen factor is uniform and independent, so the best guess is right
/// with probability `1 / q_unseen`. Full visibility is error-free in the
/// noise-free limit.
pub fn oracle_best_single_fer(cfg: &CorpusConfig, visible: Visibility) -> f64 {
    match visible {
        Visibility::FactorA => 1.0 - 1.0 / cfg.q_b as f64,
        Visibility::FactorB => 1.0 - 1.0 / cfg.q_a as f64,
        Visibility::Full => 0.0,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    split: Split,
    signal: String,
    labels: String,
    frames: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    config: CorpusConfig,
    utterances: Vec<ManifestEntry>,
}

/// Writes `manifest.json`, `signals/<id>.eft` and `labels/<id>.txt` under `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir.join("signals"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut entries = Vec::new();
    for split in Split::ALL {
        for u in corpus.split(split) {
            let signal = format!("signals/{}.eft", u.id);
            let labels = format!("labels/{}.txt", u.id);
            dump::save(&dir.join(&signal), &u.signal)?;
            let text: Vec<String> = u.labels.iter().map(usize::to_string).collect();
            fs::write(dir.join(&labels), text.join(" ") + "\n")?;
            entries.push(ManifestEntry {
                id: u.id.clone(),
                split,
                signal,
                labels,
                frames: u.frames(),
            });
        }
    }
    let manifest = CorpusManifest { config: corpus.config.clone(), utterances: entries };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read corpus manifest {}: {e}", path.display())))?;
    let manifest: CorpusManifest = serde_json::from_str(&text)?;
    let cfg = manifest.config;
    let mut splits: BTreeMap<Split, Vec<Utterance>> = BTreeMap::new();
    for e in manifest.utterances {
        let signal: TensorF64 = dump::load(&dir.join(&e.signal))?;
        let labels = fs::read_to_string(dir.join(&e.labels))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|err| Error::Data(format!("{}: {err}", e.labels))))
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != e.frames || signal.rows() != e.frames {
            return Err(Error::Data(format!("utterance {} frame count mismatch", e.id)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cfg.vocab) {
            return Err(Error::Data(format!("utterance {} has label {bad} >= {}", e.id, cfg.vocab)));
        }
        splits.entry(e.split).or_default().push(Utterance {
            id: e.id,
            signal,
            nominal_duration_s: e.frames as f64 / cfg.nominal_frame_rate,
            labels,
        });
    }
    Ok(Corpus {
        train: splits.remove(&Split::Train).unwrap_or_default(),
        dev: splits.remove(&Split::Dev).unwrap_or_default(),
        test: splits.remove(&Split::Test).unwrap_or_default(),
        config: cfg,
    })
}
