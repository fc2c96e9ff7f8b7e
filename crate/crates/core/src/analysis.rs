//! Cross-encoder linear predictability: ridge regression with intercept and
//! the matrix coefficient of determination
//! `R^2 = 1 - ||Y - XW - b||_F^2 / ||Y - mean_rows(Y)||_F^2`.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoders::{build_encoder, extract_all};
use crate::error::{dim_err, Error, Result};
use crate::fusion::{effective_weights, logits_name, FrameAlignment};
use crate::numcore::linalg::{gram, solve_spd};
use crate::numcore::{Scalar, Tensor};
use crate::synth::Utterance;
use crate::TensorF64;

pub const DEFAULT_RIDGE: f64 = 1e-8;
pub const DEFAULT_SAMPLE_SIZE: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap<S: Scalar> {
    /// `[r_src x r_tgt]`
    pub w: Tensor<S>,
    /// `[r_tgt]`
    pub b: Tensor<S>,
}

fn check_pair<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<()> {
    if x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows() {
        return dim_err(format!("regression pair {:?} / {:?} is not row-aligned", x.shape(), y.shape()));
    }
    Ok(())
}

fn column_means<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c) = (x.rows(), x.cols());
    let mut m = vec![S::zero(); c];
    for i in 0..n {
        for (acc, &v) in m.iter_mut().zip(x.row(i)) {
            *acc += v;
        }
    }
    let inv = S::one() / S::of_usize(n);
    m.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![c], m).expect("nonzero width")
}

fn center<S: Scalar>(x: &Tensor<S>, means: &Tensor<S>) -> Tensor<S> {
    x.add_row(&means.scale(-S::one())).expect("matching width")
}

/// Minimizes `||Y - XW||_F^2 + eps ||W||_F^2` (no intercept).
pub fn ridge_through_origin<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>, ridge_eps: S) -> Result<Tensor<S>> {
    check_pair(x, y)?;
    let mut a = gram(x)?;
    let r = a.rows();
    for i in 0..r {
        a.data_mut()[i * r + i] += ridge_eps;
    }
    let rhs = x.transpose()?.matmul(y)?;
    solve_spd(&a, &rhs)
}

/// Least squares with an unpenalized intercept and ridge penalty on `W`.
pub fn fit_linear<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>, ridge_eps: S) -> Result<LinearMap<S>> {
    check_pair(x, y)?;
    if x.rows() <= x.cols() {
        return Err(Error::Contract(format!(
            "regression needs more rows than source features ({} <= {})",
            x.rows(),
            x.cols()
        )));
    }
    if ridge_eps < S::zero() {
        return Err(Error::Contract("ridge_eps must be >= 0".into()));
    }
    let (mx, my) = (column_means(x), column_means(y));
    let w = ridge_through_origin(&center(x, &mx), &center(y, &my), ridge_eps)?;
    let mxw = Tensor::new(vec![1, x.cols()], mx.into_data())?.matmul(&w)?;
    let b = my.sub(&mxw.reshape(vec![y.cols()])?)?;
    Ok(LinearMap { w, b })
}

pub fn r_squared<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>, map: &LinearMap<S>) -> Result<S> {
    check_pair(x, y)?;
    let resid = y.sub(&x.matmul(&map.w)?.add_row(&map.b)?)?.sq_norm();
    let total = center(y, &column_means(y)).sq_norm();
    if !(total > S::zero()) {
        return Err(Error::Numeric("target has zero variance; R^2 is undefined".into()));
    }
    Ok(S::one() - resid / total)
}

/// Square R^2 table; `values[i][j]` is how well encoder `i` predicts `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct R2Table {
    pub ids: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl R2Table {
    pub fn get(&self, input: &str, target: &str) -> Option<f64> {
        let i = self.ids.iter().position(|s| s == input)?;
        let j = self.ids.iter().position(|s| s == target)?;
        self.values[i][j]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["input".to_string()];
        header.extend(self.ids.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.ids.iter().zip(&self.values) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub sample_size: usize,
    pub seed: u64,
    pub ridge_eps: f64,
    /// Fit on the first half of the sample and score on the second.
    pub held_out: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { sample_size: DEFAULT_SAMPLE_SIZE, seed: 0, ridge_eps: DEFAULT_RIDGE, held_out: false }
    }
}

/// Stacks pooled rows of `src` and `tgt` over utterances for a stride pair.
fn aligned_pair(src: &[TensorF64], tgt: &[TensorF64], strides: [usize; 2], frames: &[usize]) -> Result<(TensorF64, TensorF64)> {
    let align = FrameAlignment::new(&strides)?;
    let mut xs = Vec::with_capacity(src.len());
    let mut ys = Vec::with_capacity(src.len());
    for ((x, y), &t) in src.iter().zip(tgt).zip(frames) {
        let n = align.common_frames(t);
        if n == 0 {
            continue;
        }
        xs.push(x.mean_pool_rows(align.factor(0), n)?);
        ys.push(y.mean_pool_rows(align.factor(1), n)?);
    }
    if xs.is_empty() {
        return Err(Error::Data("no utterance long enough to align".into()));
    }
    Ok((
        TensorF64::concat_rows(&xs.iter().collect::<Vec<_>>())?,
        TensorF64::concat_rows(&ys.iter().collect::<Vec<_>>())?,
    ))
}

/// Seeded subset of `n` indices out of `total`, in ascending order.
fn sample_indices(total: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n.min(total));
    idx.sort_unstable();
    idx
}

/// R^2 of every ordered encoder pair on weighted-sum features, using the
/// layer weights stored in `ckpt`.
pub fn predictability_table(ckpt: &Checkpoint, utts: &[Utterance], cfg: &ProbeConfig) -> Result<R2Table> {
    let specs = &ckpt.encoders;
    let encoders = specs.iter().map(build_encoder).collect::<Result<Vec<_>>>()?;
    let picked: Vec<Utterance> = sample_indices(utts.len(), cfg.sample_size, cfg.seed)
        .into_iter()
        .map(|i| utts[i].clone())
        .collect();
    if picked.is_empty() {
        return Err(Error::Data("no utterances to probe".into()));
    }
    let feats = extract_all(&encoders, &picked)?;
    let weights = specs
        .iter()
        .map(|s| Ok(effective_weights(ckpt.params.get(&logits_name(&s.id))?.data())))
        .collect::<Result<Vec<_>>>()?;
    // summed[enc][utt]
    let summed: Vec<Vec<TensorF64>> = (0..specs.len())
        .map(|e| {
            feats
                .iter()
                .map(|per_utt| {
                    let layers = &per_utt[e].layers;
                    let mut acc = layers[0].scale(weights[e][0]);
                    for (l, &w) in layers.iter().zip(&weights[e]).skip(1) {
                        acc = acc.add(&l.scale(w))?;
                    }
                    Ok(acc)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let frames: Vec<usize> = picked.iter().map(Utterance::frames).collect();
    let split = if cfg.held_out { picked.len() / 2 } else { picked.len() };
    if cfg.held_out && (split == 0 || split == picked.len()) {
        return Err(Error::Data("held-out probing needs at least two utterances".into()));
    }

    let n = specs.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).collect();
    let scores = pairs
        .par_iter()
        .map(|&(i, j)| {
            let strides = [specs[i].stride, specs[j].stride];
            let (fx, fy) = aligned_pair(&summed[i][..split], &summed[j][..split], strides, &frames[..split])?;
            let map = fit_linear(&fx, &fy, cfg.ridge_eps)?;
            if cfg.held_out {
                let (ex, ey) = aligned_pair(&summed[i][split..], &summed[j][split..], strides, &frames[split..])?;
                r_squared(&ex, &ey, &map)
            } else {
                r_squared(&fx, &fy, &map)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![vec![None; n]; n];
    for (&(i, j), s) in pairs.iter().zip(scores) {
        values[i][j] = Some(s);
    }
    Ok(R2Table { ids: specs.iter().map(|s| s.id.clone()).collect(), values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn random(rows: usize, cols: usize, seed: u64) -> TensorF64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        TensorF64::new(vec![rows, cols], (0..rows * cols).map(|_| n.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn self_regression_is_identity() {
        let x = random(50, 4, 1);
        let fit = fit_linear(&x, &x, 0.0).unwrap();
        assert!(fit.w.max_abs_diff(&TensorF64::eye(4)).unwrap() < 1e-8);
        assert!(fit.b.data().iter().all(|v| v.abs() < 1e-8));
        assert!((r_squared(&x, &x, &fit).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn recovers_affine_map() {
        let x = random(40, 3, 2);
        let a = random(3, 2, 3);
        let c = TensorF64::vector(vec![0.7, -1.9]).unwrap();
        let y = x.matmul(&a).unwrap().add_row(&c).unwrap();
        let fit = fit_linear(&x, &y, 0.0).unwrap();
        assert!(fit.w.max_abs_diff(&a).unwrap() < 1e-6);
        assert!(fit.b.max_abs_diff(&c).unwrap() < 1e-6);
    }

    #[test]
    fn too_few_rows_is_contract_error() {
        let x = random(3, 3, 4);
        assert!(matches!(fit_linear(&x, &x, 1e-8), Err(Error::Contract(_))));
    }

    #[test]
    fn intercept_only_map_scores_zero() {
        let x = random(30, 2, 5);
        let y = random(30, 3, 6);
        let map = LinearMap { w: TensorF64::zeros(&[2, 3]), b: column_means(&y) };
        assert!(r_squared(&x, &y, &map).unwrap().abs() < 1e-10);
    }

    #[test]
    fn constant_target_is_numeric_error() {
        let x = random(10, 2, 7);
        let y = TensorF64::full(&[10, 2], 3.0);
        let map = LinearMap { w: TensorF64::zeros(&[2, 2]), b: TensorF64::zeros(&[2]) };
        assert!(matches!(r_squared(&x, &y, &map), Err(Error::Numeric(_))));
    }

    #[test]
    fn generic_over_f32() {
        let x: Tensor<f32> = random(30, 2, 8).cast();
        let fit = fit_linear(&x, &x, 0.0f32).unwrap();
        assert!((r_squared(&x, &x, &fit).unwrap() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn csv_marks_diagonal() {
        let t = R2Table { ids: vec!["A".into(), "B".into()], values: vec![vec![None, Some(0.5)], vec![Some(0.25), None]] };
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "input,A,B\nA,NA,0.500000\nB,0.250000,NA\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fitted_map_beats_perturbed_map(seed in 0u64..1000, k in 0usize..6, delta in -0.5f64..0.5) {
            let x = random(30, 3, seed);
            let y = x.matmul(&random(3, 2, seed + 1)).unwrap().add(&random(30, 2, seed + 2).scale(0.3)).unwrap();
            let fit = fit_linear(&x, &y, 1e-8).unwrap();
            let mut other = fit.clone();
            other.w.data_mut()[k] += delta;
            prop_assert!(r_squared(&x, &y, &fit).unwrap() + 1e-6 >= r_squared(&x, &y, &other).unwrap());
        }

        #[test]
        fn intercept_never_lowers_r2(seed in 0u64..1000) {
            let x = random(25, 3, seed);
            let y = random(25, 2, seed + 7).add_row(&TensorF64::vector(vec![4.0, -2.0]).unwrap()).unwrap();
            let with = fit_linear(&x, &y, 1e-8).unwrap();
            let w0 = ridge_through_origin(&x, &y, 1e-8).unwrap();
            let without = LinearMap { w: w0, b: TensorF64::zeros(&[2]) };
            prop_assert!(r_squared(&x, &y, &with).unwrap() + 1e-9 >= r_squared(&x, &y, &without).unwrap());
        }

        #[test]
        fn rotation_of_targets_preserves_r2(seed in 0u64..1000, theta in 0.0f64..std::f64::consts::TAU) {
            let x = random(30, 3, seed);
            let y = random(30, 2, seed + 3).add(&x.matmul(&random(3, 2, seed + 4)).unwrap()).unwrap();
            let rot = TensorF64::from_rows(&[vec![theta.cos(), -theta.sin()], vec![theta.sin(), theta.cos()]]).unwrap();
            let yr = y.matmul(&rot).unwrap();
            let a = r_squared(&x, &y, &fit_linear(&x, &y, 0.0).unwrap()).unwrap();
            let b = r_squared(&x, &yr, &fit_linear(&x, &yr, 0.0).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
