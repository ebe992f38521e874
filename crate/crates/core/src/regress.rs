//! Pearson correlation, closed-form ridge regression, lifetime error metrics
//! and the seeded random-split evaluation protocol.
//!
//! Targets are `log10` Ah-throughput life; metrics are reported in linear Ah.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureRow;

/// PRNG behind every randomised split.
pub const SPLIT_RNG: &str = "ChaCha8 (rand_chacha), stream = split index";

/// Sample Pearson correlation coefficient, clamped to [-1, 1].
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "correlation needs 2 points, got {}",
            a.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let constant = |v: &[f64], ss: f64| ss == 0.0 || v.iter().all(|x| *x == v[0]);
    if constant(a, saa) || constant(b, sbb) {
        return Err(Error::ZeroVariance("correlation of a constant series".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Feature matrix (rows = cells) with log-life targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub ids: Vec<String>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>, ids: Vec<String>, feature_names: Vec<String>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::LengthMismatch(x.len(), y.len()));
        }
        if ids.len() != y.len() {
            return Err(Error::LengthMismatch(ids.len(), y.len()));
        }
        if y.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "dataset needs 2 cells, got {}",
                y.len()
            )));
        }
        let p = feature_names.len();
        for row in &x {
            if row.len() != p {
                return Err(Error::LengthMismatch(row.len(), p));
            }
        }
        if x.iter().flatten().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dataset contains non-finite values".into()));
        }
        Ok(Self {
            x,
            y,
            ids,
            feature_names,
        })
    }

    /// Three log features (variance, |mean|, |minimum|) against log life.
    pub fn from_feature_rows(rows: &[FeatureRow]) -> Result<Self> {
        Self::new(
            rows.iter().map(|r| r.features().to_vec()).collect(),
            rows.iter().map(|r| r.log_eol).collect(),
            rows.iter().map(|r| r.cell_id.clone()).collect(),
            FeatureRow::FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn n_cells(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Rows at `indices`, in that order. Duplicates are allowed.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: indices.iter().map(|&i| self.x[i].clone()).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub alpha: f64,
    /// In standardised-feature space.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
    pub feature_names: Vec<String>,
}

/// Solves the symmetric positive-definite system `a x = b` by Cholesky
/// factorisation. `a` is row-major `n × n`.
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let max_diag = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = max_diag * 1e-12;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > tol) {
                    return Err(Error::Singular);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * z[k]).sum();
        z[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (z[i] - s) / l[i * n + i];
    }
    Ok(x)
}

/// Ridge fit on standardised features and centred targets. The intercept is
/// the training mean of `y` and is not penalised.
pub fn fit_ridge(data: &Dataset, alpha: f64) -> Result<RidgeModel> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )));
    }
    let n = data.n_cells();
    if n < 2 {
        return Err(Error::InsufficientData(format!("ridge fit needs 2 cells, got {n}")));
    }
    let p = data.n_features();
    let nf = n as f64;
    let mut means = vec![0.0; p];
    let mut scales = vec![0.0; p];
    for j in 0..p {
        let col = data.x.iter().map(|r| r[j]);
        let m = col.clone().sum::<f64>() / nf;
        let var = col.clone().map(|v| (v - m) * (v - m)).sum::<f64>() / nf;
        if var == 0.0 || data.x.iter().all(|r| r[j] == data.x[0][j]) {
            return Err(Error::ZeroVariance(format!(
                "feature {} has zero variance",
                data.feature_names[j]
            )));
        }
        means[j] = m;
        scales[j] = var.sqrt();
    }
    let y_mean = data.y.iter().sum::<f64>() / nf;
    let z: Vec<Vec<f64>> = data
        .x
        .iter()
        .map(|r| (0..p).map(|j| (r[j] - means[j]) / scales[j]).collect())
        .collect();

    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    for (row, &y) in z.iter().zip(&data.y) {
        let yc = y - y_mean;
        for i in 0..p {
            rhs[i] += row[i] * yc;
            for j in 0..p {
                gram[i * p + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..p {
        gram[i * p + i] += alpha;
    }
    let weights = cholesky_solve(&gram, &rhs, p)?;
    Ok(RidgeModel {
        alpha,
        weights,
        intercept: y_mean,
        feature_means: means,
        feature_scales: scales,
        feature_names: data.feature_names.clone(),
    })
}

pub fn predict(model: &RidgeModel, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    let p = model.weights.len();
    x.iter()
        .map(|row| {
            if row.len() != p {
                return Err(Error::LengthMismatch(row.len(), p));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("non-finite feature value".into()));
            }
            Ok(row
                .iter()
                .enumerate()
                .map(|(j, v)| (v - model.feature_means[j]) / model.feature_scales[j] * model.weights[j])
                .sum::<f64>()
                + model.intercept)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Ah
    pub rmse: f64,
    /// percent
    pub mpe: f64,
}

/// RMSE and mean absolute percentage error of lives after undoing the log10.
pub fn metrics(y_hat_log: &[f64], y_log: &[f64]) -> Result<Metrics> {
    if y_hat_log.len() != y_log.len() {
        return Err(Error::LengthMismatch(y_hat_log.len(), y_log.len()));
    }
    if y_log.is_empty() {
        return Err(Error::InsufficientData("metrics need at least one value".into()));
    }
    let n = y_log.len() as f64;
    let (mut se, mut pe) = (0.0, 0.0);
    for (yh, y) in y_hat_log.iter().zip(y_log) {
        let truth = 10f64.powf(*y);
        let e = 10f64.powf(*yh) - truth;
        se += e * e;
        pe += e.abs() / truth;
    }
    Ok(Metrics {
        rmse: (se / n).sqrt(),
        mpe: 100.0 * pe / n,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub n_splits: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_count: 8,
            test_count: 4,
            n_splits: 100,
            alpha: 8.0,
            seed: 0,
        }
    }
}

/// `n_splits` uniformly random disjoint train/test draws. Split `k` uses its
/// own ChaCha8 stream `k` under `seed`, so any split can be regenerated alone.
pub fn random_splits(n_cells: usize, cfg: &SplitConfig) -> Result<Vec<Split>> {
    if cfg.train_count < 2 {
        return Err(Error::InvalidInput(format!(
            "train count must be >= 2, got {}",
            cfg.train_count
        )));
    }
    if cfg.test_count < 1 {
        return Err(Error::InvalidInput("test count must be >= 1".into()));
    }
    if cfg.train_count + cfg.test_count > n_cells {
        return Err(Error::InvalidInput(format!(
            "{} train + {} test exceeds {n_cells} cells",
            cfg.train_count, cfg.test_count
        )));
    }
    if cfg.n_splits == 0 {
        return Err(Error::InvalidInput("need at least one split".into()));
    }
    Ok((0..cfg.n_splits)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64);
            let picked = rand::seq::index::sample(&mut rng, n_cells, cfg.train_count + cfg.test_count).into_vec();
            Split {
                train: picked[..cfg.train_count].to_vec(),
                test: picked[cfg.train_count..].to_vec(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub train_rmse: f64,
    pub test_rmse: f64,
    pub train_mpe: f64,
    pub test_mpe: f64,
    pub n_splits: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Predictor {
    Ridge {
        alpha: f64,
    },
    /// Always predicts the training mean of the log life.
    TrainingMean,
}

fn split_metrics(data: &Dataset, split: &Split, predictor: Predictor) -> Result<(Metrics, Metrics)> {
    let train = data.subset(&split.train);
    let test = data.subset(&split.test);
    let (train_hat, test_hat) = match predictor {
        Predictor::Ridge { alpha } => {
            let model = fit_ridge(&train, alpha)?;
            (predict(&model, &train.x)?, predict(&model, &test.x)?)
        }
        Predictor::TrainingMean => {
            let m = train.y.iter().sum::<f64>() / train.y.len() as f64;
            (vec![m; train.y.len()], vec![m; test.y.len()])
        }
    };
    Ok((metrics(&train_hat, &train.y)?, metrics(&test_hat, &test.y)?))
}

/// Averages train/test metrics of `predictor` over explicit splits.
pub fn evaluate_splits(data: &Dataset, splits: &[Split], predictor: Predictor, seed: u64) -> Result<EvalReport> {
    if splits.is_empty() {
        return Err(Error::InvalidInput("no splits to evaluate".into()));
    }
    let per_split = splits
        .par_iter()
        .map(|s| split_metrics(data, s, predictor))
        .collect::<Result<Vec<_>>>()?;
    let k = per_split.len() as f64;
    let avg = |f: &dyn Fn(&(Metrics, Metrics)) -> f64| per_split.iter().map(f).sum::<f64>() / k;
    Ok(EvalReport {
        train_rmse: avg(&|m| m.0.rmse),
        test_rmse: avg(&|m| m.1.rmse),
        train_mpe: avg(&|m| m.0.mpe),
        test_mpe: avg(&|m| m.1.mpe),
        n_splits: per_split.len(),
        seed,
    })
}

pub fn split_evaluate(data: &Dataset, cfg: &SplitConfig) -> Result<EvalReport> {
    let splits = random_splits(data.n_cells(), cfg)?;
    evaluate_splits(data, &splits, Predictor::Ridge { alpha: cfg.alpha }, cfg.seed)
}

/// Same split sequence as [`split_evaluate`] under the same seed.
pub fn regress_to_mean_baseline(data: &Dataset, cfg: &SplitConfig) -> Result<EvalReport> {
    let splits = random_splits(data.n_cells(), cfg)?;
    evaluate_splits(data, &splits, Predictor::TrainingMean, cfg.seed)
}

/// Split evaluation at each alpha, sharing one split sequence.
pub fn alpha_grid(data: &Dataset, alphas: &[f64], cfg: &SplitConfig) -> Result<Vec<(f64, EvalReport)>> {
    let splits = random_splits(data.n_cells(), cfg)?;
    alphas
        .iter()
        .map(|&alpha| {
            Ok((
                alpha,
                evaluate_splits(data, &splits, Predictor::Ridge { alpha }, cfg.seed)?,
            ))
        })
        .collect()
}
