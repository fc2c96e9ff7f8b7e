//! Seeded mini-batch gradient descent shared by both training stages.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Bindings, ParamStore};
use crate::error::{Error, Result};
use crate::{GraphF64, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 600, batch_size: 8, lr: 0.1, clip: 5.0, seed: 7 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.clip > 0.0) {
            return Err(Error::Config("train.lr must be >= 0 and train.clip > 0".into()));
        }
        Ok(())
    }
}

/// Loss trace of a run: `losses[s]` is the loss evaluated before update `s`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

/// Deterministic epoch-shuffled batches of item indices.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(items: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..items).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, batch: batch.min(items), rng }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// Runs `cfg.steps` updates. `loss_fn` builds one forward pass for a batch of
/// item indices and returns the scalar loss node.
pub fn run_sgd<F>(params: &mut ParamStore, items: usize, cfg: &TrainConfig, mut loss_fn: F) -> Result<TrainLog>
where
    F: FnMut(&mut GraphF64, &Bindings, &[usize]) -> Result<Var>,
{
    cfg.validate()?;
    if items == 0 {
        return Err(Error::Data("no training items".into()));
    }
    let mut sampler = BatchSampler::new(items, cfg.batch_size, cfg.seed);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = sampler.next_batch();
        let mut g = GraphF64::new();
        let vars = params.bind(&mut g);
        let loss = loss_fn(&mut g, &vars, &batch)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became {value} at step {step} (lr {})",
                cfg.lr
            )));
        }
        g.backward(loss)?;
        let norm = params.sgd_step(&g, &vars, cfg.lr, cfg.clip).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m} at step {step}")),
            other => other,
        })?;
        log.losses.push(value);
        log.grad_norms.push(norm);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::TensorF64;

    #[test]
    fn sampler_covers_every_item_each_epoch() {
        let mut s = BatchSampler::new(10, 5, 3);
        let mut seen: Vec<usize> = s.next_batch().into_iter().chain(s.next_batch()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn divergence_aborts_with_step_and_lr() {
        let mut p = ParamStore::new();
        p.insert("w", TensorF64::scalar(1.0));
        let cfg = TrainConfig { steps: 50, batch_size: 1, lr: 1e300, clip: 1e308, seed: 0 };
        let err = run_sgd(&mut p, 1, &cfg, |g, vars, _| {
            let w = vars.get("w")?;
            let sq = g.mul(w, w)?;
            g.mul(sq, sq)
        })
        .unwrap_err()
        .to_string();
        assert!(err.contains("step") && err.contains("lr"), "{err}");
    }

    #[test]
    fn quadratic_descends() {
        let mut p = ParamStore::new();
        p.insert("w", TensorF64::scalar(3.0));
        let cfg = TrainConfig { steps: 100, batch_size: 1, lr: 0.1, clip: 5.0, seed: 0 };
        let log = run_sgd(&mut p, 1, &cfg, |g, vars, _| {
            let w = vars.get("w")?;
            g.mul(w, w)
        })
        .unwrap();
        assert!(log.losses.last().unwrap() < &1e-6);
    }
}
