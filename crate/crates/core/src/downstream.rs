//! Frame classifier head, task loss and frame-level metrics.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Bindings;
use crate::error::{Error, Result};
use crate::synth::Utterance;
use crate::{GraphF64, TensorF64, Var};

pub const CLS_W: &str = "cls.W";
pub const CLS_B: &str = "cls.b";

/// Per-frame logits `[frames x vocab]` from `[frames x m]` features.
pub fn classifier_logits(g: &mut GraphF64, vars: &Bindings, x: Var) -> Result<Var> {
    g.affine(x, vars.get(CLS_W)?, Some(vars.get(CLS_B)?))
}

/// Mean softmax cross-entropy over frames.
pub fn task_loss(g: &mut GraphF64, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Majority vote over blocks of `factor` labels, producing `frames` labels.
/// Ties go to the smaller class; a short final block votes over what it has.
pub fn pool_labels(labels: &[usize], factor: usize, frames: usize) -> Vec<usize> {
    if factor == 1 {
        return labels[..frames].to_vec();
    }
    let vocab = labels.iter().max().map_or(1, |m| m + 1);
    let mut counts = vec![0usize; vocab];
    (0..frames)
        .map(|j| {
            counts.iter_mut().for_each(|c| *c = 0);
            let end = ((j + 1) * factor).min(labels.len());
            for &y in &labels[j * factor..end] {
                counts[y] += 1;
            }
            // max_by_key keeps the last maximum; scan in reverse to prefer the smallest class.
            (0..vocab).rev().max_by_key(|&y| counts[y]).expect("vocab >= 1")
        })
        .collect()
}

/// Anything that maps a signal to per-frame logits at its own frame rate.
pub trait FrameModel {
    fn vocab(&self) -> usize;

    /// `[frames x vocab]` logits for one utterance.
    fn logits(&self, signal: &TensorF64) -> Result<TensorF64>;

    /// Reference labels at the model's frame rate.
    fn frame_labels(&self, labels: &[usize]) -> Result<Vec<usize>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frame_error_rate: f64,
    pub mean_cross_entropy: f64,
    pub frames: usize,
    pub errors: usize,
    /// `confusion[reference][predicted]`
    pub confusion: Vec<Vec<u64>>,
    #[serde(skip)]
    ce_sum: f64,
}

impl Metrics {
    pub fn new(vocab: usize) -> Self {
        Self {
            frame_error_rate: 0.0,
            mean_cross_entropy: 0.0,
            frames: 0,
            errors: 0,
            confusion: vec![vec![0; vocab]; vocab],
            ce_sum: 0.0,
        }
    }

    /// Adds one utterance: argmax decoding of `logits` against `labels`.
    pub fn add(&mut self, logits: &TensorF64, labels: &[usize]) -> Result<()> {
        let vocab = self.confusion.len();
        if logits.rank() != 2 || logits.rows() != labels.len() || logits.cols() != vocab {
            return Err(Error::Dimension(format!(
                "logits {:?} for {} labels over {vocab} classes",
                logits.shape(),
                labels.len()
            )));
        }
        for (t, &y) in labels.iter().enumerate() {
            if y >= vocab {
                return Err(Error::Data(format!("label {y} out of range for {vocab} classes")));
            }
            let row = logits.row(t);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            let max = row[best];
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            self.ce_sum += lse - row[y];
            self.confusion[y][best] += 1;
            if best != y {
                self.errors += 1;
            }
            self.frames += 1;
        }
        self.frame_error_rate = self.errors as f64 / self.frames as f64;
        self.mean_cross_entropy = self.ce_sum / self.frames as f64;
        Ok(())
    }
}

/// Argmax frame error over a split. Utterances are visited in order, so the
/// result depends only on the model and the split.
pub fn evaluate<M: FrameModel + ?Sized>(model: &M, utts: &[Utterance]) -> Result<Metrics> {
    let mut metrics = Metrics::new(model.vocab());
    for u in utts {
        let logits = model.logits(&u.signal)?;
        let labels = model.frame_labels(&u.labels)?;
        metrics.add(&logits, &labels)?;
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Oracle {
        vocab: usize,
        constant: Option<usize>,
    }

    // Treats channel 0 of the signal as the label; used only in tests.
    impl FrameModel for Oracle {
        fn vocab(&self) -> usize {
            self.vocab
        }

        fn logits(&self, signal: &TensorF64) -> Result<TensorF64> {
            let mut out = TensorF64::zeros(&[signal.rows(), self.vocab]);
            for t in 0..signal.rows() {
                let y = self.constant.unwrap_or(signal.at(t, 0) as usize);
                out.data_mut()[t * self.vocab + y] = 10.0;
            }
            Ok(out)
        }

        fn frame_labels(&self, labels: &[usize]) -> Result<Vec<usize>> {
            Ok(labels.to_vec())
        }
    }

    fn utts(labels: Vec<Vec<usize>>) -> Vec<Utterance> {
        labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| Utterance {
                id: format!("u{i}"),
                signal: TensorF64::new(vec![l.len(), 1], l.iter().map(|&y| y as f64).collect()).unwrap(),
                nominal_duration_s: l.len() as f64 / 100.0,
                labels: l,
            })
            .collect()
    }

    #[test]
    fn uniform_logits_loss_is_log_vocab() {
        let mut g = GraphF64::new();
        let z = g.constant(TensorF64::zeros(&[3, 4]));
        let loss = task_loss(&mut g, z, &[0, 1, 3]).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn peaked_logits_loss_vanishes() {
        let mut g = GraphF64::new();
        let z = g.constant(TensorF64::from_rows(&[vec![60.0, 0.0], vec![0.0, 60.0]]).unwrap());
        let loss = task_loss(&mut g, z, &[0, 1]).unwrap();
        assert!(g.value(loss).item() < 1e-20);
    }

    #[test]
    fn random_loss_matches_loop_oracle() {
        let data = [0.3, -1.1, 2.0, 0.7, 0.0, -0.4, 1.5, 1.4, -2.2];
        let labels = [2, 0, 1];
        let mut g = GraphF64::new();
        let z = g.constant(TensorF64::new(vec![3, 3], data.to_vec()).unwrap());
        let loss = task_loss(&mut g, z, &labels).unwrap();
        let mut expect = 0.0;
        for t in 0..3 {
            let row = &data[t * 3..t * 3 + 3];
            let denom: f64 = row.iter().map(|v: &f64| v.exp()).sum();
            expect -= (row[labels[t]].exp() / denom).ln();
        }
        expect /= 3.0;
        assert!((g.value(loss).item() - expect).abs() < 1e-14);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let mut g = GraphF64::new();
        let z = g.constant(TensorF64::zeros(&[1, 3]));
        assert!(matches!(task_loss(&mut g, z, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn majority_pooling() {
        assert_eq!(pool_labels(&[1, 1, 2, 0, 0, 3, 4], 2, 3), vec![1, 0, 0]);
        assert_eq!(pool_labels(&[5, 5, 5, 2], 4, 1), vec![5]);
        assert_eq!(pool_labels(&[3, 1, 1, 3], 4, 1), vec![1], "tie goes to the smaller class");
        assert_eq!(pool_labels(&[0, 1, 2, 3, 4], 2, 3), vec![0, 2, 4], "short final block");
        let l = vec![4, 2, 7, 7, 1];
        assert_eq!(pool_labels(&l, 1, 5), l);
    }

    #[test]
    fn exact_model_scores_zero_and_is_deterministic() {
        let split = utts(vec![vec![0, 1, 2, 2], vec![8, 3]]);
        let m = Oracle { vocab: 9, constant: None };
        let a = evaluate(&m, &split).unwrap();
        assert_eq!(a.frame_error_rate, 0.0);
        assert_eq!(a, evaluate(&m, &split).unwrap());
        let rows: Vec<u64> = a.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(rows, vec![1, 1, 2, 1, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn constant_class_model_on_uniform_labels() {
        let labels: Vec<Vec<usize>> = (0..20).map(|u| (0..45).map(|t| (t + u) % 9).collect()).collect();
        let m = Oracle { vocab: 9, constant: Some(4) };
        let fer = evaluate(&m, &utts(labels)).unwrap().frame_error_rate;
        assert!((fer - 8.0 / 9.0).abs() < 1e-12);
    }
}
