//! Measurement-domain classifiers, rate sweeps and critical sampling rates.
//!
//! Accuracies come from a linear softmax trained by plain gradient descent, so
//! every curve is an empirical lower bound on what an optimal recogniser could
//! achieve at that rate.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Result, SpxError};
use crate::patterns::{gen_speckle, select, PatternLibrary, SelectionPolicy};
use crate::rng::{derive_seed, streams, SpxRng};
use crate::sensing::MeasurementBatch;
use crate::spmx::KeyValues;
use crate::synthdata::{build_dataset, SynthSpec};

pub const DEFAULT_EPOCHS: usize = 500;
pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_L2: f64 = 1e-4;
pub const DEFAULT_TRIALS: usize = 10;
pub const CURVE_HEADER: &str = "rho,M,mean_accuracy,std_error,trials";
/// Recorded next to every curve.
pub const CURVE_CAVEAT: &str =
    "linear-softmax accuracy; an empirical lower bound on optimal recognisability";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Privacy = 0,
    Behavior = 1,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Privacy => "privacy",
            Self::Behavior => "behavior",
        })
    }
}

impl FromStr for Task {
    type Err = SpxError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "privacy" | "priv" => Ok(Self::Privacy),
            "behavior" | "behaviour" | "beh" => Ok(Self::Behavior),
            _ => Err(invalid(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

/// Feature rows with labels. Behaviour features are laid out as
/// `[means (m) ; mean |diff| (m)]`, privacy features as `y (m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMeasurementSet {
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub instance_seeds: Vec<u64>,
    pub k: usize,
    pub task: Task,
    pub rho: f64,
    /// Measurements per frame behind the features.
    pub m: usize,
    pub split: Split,
}

impl LabeledMeasurementSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.labels.len() {
            return Err(SpxError::InvalidDataset(format!(
                "{} feature rows vs {} labels",
                self.features.nrows(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.k) {
            return Err(SpxError::InvalidDataset(format!(
                "label {bad} outside 0..{}",
                self.k
            )));
        }
        let expected = match self.task {
            Task::Privacy => self.m,
            Task::Behavior => 2 * self.m,
        };
        if self.dim() != expected {
            return Err(SpxError::InvalidDataset(format!(
                "feature dimension {} does not match m = {}",
                self.dim(),
                self.m
            )));
        }
        Ok(())
    }

    /// Features of the nested prefix operator with `m` rows. Exact because
    /// measurements and their noise draws are prefix-nested.
    pub fn truncate_to(&self, m: usize, n_pixels: usize) -> Result<Self> {
        if m == 0 || m > self.m {
            return Err(invalid(format!("cannot truncate {} measurements to {m}", self.m)));
        }
        let features = match self.task {
            Task::Privacy => self.features.columns(0, m).into_owned(),
            Task::Behavior => {
                let mut f = DMatrix::zeros(self.len(), 2 * m);
                f.columns_mut(0, m).copy_from(&self.features.columns(0, m));
                f.columns_mut(m, m).copy_from(&self.features.columns(self.m, m));
                f
            }
        };
        Ok(Self {
            features,
            labels: self.labels.clone(),
            instance_seeds: self.instance_seeds.clone(),
            k: self.k,
            task: self.task,
            rho: m as f64 / n_pixels as f64,
            m,
            split: self.split,
        })
    }
}

/// Per-row temporal mean followed by per-row mean absolute first difference.
pub fn temporal_features(batch: &MeasurementBatch) -> Result<DVector<f64>> {
    temporal_features_of(&batch.values)
}

pub fn temporal_features_of(values: &DMatrix<f64>) -> Result<DVector<f64>> {
    let (m, t) = values.shape();
    if m == 0 || t == 0 {
        return Err(invalid("temporal features of an empty batch"));
    }
    let mut out = DVector::zeros(2 * m);
    for i in 0..m {
        let row = values.row(i);
        out[i] = row.sum() / t as f64;
        if t > 1 {
            let diff: f64 = (1..t).map(|j| (row[j] - row[j - 1]).abs()).sum();
            out[m + i] = diff / (t - 1) as f64;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxModel {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub task: Task,
    pub trained_rho: f64,
}

impl LinearSoftmaxModel {
    pub fn zeros(k: usize, dim: usize, task: Task) -> Self {
        Self {
            weights: DMatrix::zeros(k, dim),
            bias: DVector::zeros(k),
            task,
            trained_rho: 0.0,
        }
    }

    pub fn k(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let exp = logits.map(|v| (v - max).exp());
    let total = exp.sum();
    exp / total
}

/// Lowest index among the maxima.
pub fn argmax(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &LinearSoftmaxModel, features: &DVector<f64>) -> Result<(usize, DVector<f64>)> {
    if features.len() != model.dim() {
        return Err(invalid(format!(
            "feature length {} vs model dimension {}",
            features.len(),
            model.dim()
        )));
    }
    let logits = &model.weights * features + &model.bias;
    let probs = softmax(&logits);
    Ok((argmax(&logits), probs))
}

/// Replaces each row of `logits` by `softmax(row + bias)`.
fn softmax_rows(logits: &mut DMatrix<f64>, bias: &DVector<f64>) {
    for mut row in logits.row_iter_mut() {
        let mut max = f64::NEG_INFINITY;
        for (j, v) in row.iter_mut().enumerate() {
            *v += bias[j];
            max = max.max(*v);
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row /= total;
    }
}

/// Row-wise softmax probabilities of `features * W^T + 1 c^T`.
fn probabilities(weights: &DMatrix<f64>, bias: &DVector<f64>, features: &DMatrix<f64>) -> DMatrix<f64> {
    let mut logits = features * weights.transpose();
    softmax_rows(&mut logits, bias);
    logits
}

/// Mean cross-entropy plus `(l2/2)|W|_F^2`, with gradients for `W` and `c`.
pub fn softmax_loss_and_grad(
    weights: &DMatrix<f64>,
    bias: &DVector<f64>,
    features: &DMatrix<f64>,
    labels: &[usize],
    l2: f64,
) -> (f64, DMatrix<f64>, DVector<f64>) {
    let n = labels.len() as f64;
    let mut delta = probabilities(weights, bias, features);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        loss -= delta[(i, label)].max(f64::MIN_POSITIVE).ln();
        delta[(i, label)] -= 1.0;
    }
    loss = loss / n + 0.5 * l2 * weights.norm_squared();
    let grad_w = delta.transpose() * features / n + weights * l2;
    let grad_c = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum() / n));
    (loss, grad_w, grad_c)
}

/// Upper bound on the curvature of the softmax loss: half the top eigenvalue
/// of the bias-augmented second-moment matrix, plus `l2`.
fn curvature_bound(features: &DMatrix<f64>, l2: f64) -> f64 {
    let (n, d) = features.shape();
    // power iteration on [F 1]^T [F 1] / n without forming it
    let mut v = DVector::from_element(d + 1, 1.0 / ((d + 1) as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..50 {
        let fv = features * v.rows(0, d) + DVector::from_element(n, v[d]);
        let mut w = DVector::zeros(d + 1);
        w.rows_mut(0, d).copy_from(&(features.transpose() * &fv));
        w[d] = fv.sum();
        w /= n as f64;
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        let next = norm;
        v = w / norm;
        if (next - lambda).abs() <= 1e-6 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    0.5 * lambda * 1.01 + l2
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            lr: DEFAULT_LR,
            l2: DEFAULT_L2,
        }
    }
}

/// Full-batch gradient descent from zero on the regularised cross-entropy.
///
/// The step is `min(lr, 1 / curvature bound)` so that GD cannot diverge on
/// strongly correlated features. Training is deterministic; `seed` is recorded
/// for provenance only since initialisation is zero.
pub fn train_softmax(
    data: &LabeledMeasurementSet,
    epochs: usize,
    lr: f64,
    l2: f64,
    seed: u64,
) -> Result<LinearSoftmaxModel> {
    let _ = seed;
    data.validate()?;
    if data.k < 2 {
        return Err(SpxError::InvalidDataset("need at least two classes".into()));
    }
    let mut present = vec![false; data.k];
    for &l in &data.labels {
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(SpxError::InvalidDataset(
            "training data contains a single class".into(),
        ));
    }
    if !(lr > 0.0 && lr.is_finite()) || !(l2 >= 0.0 && l2.is_finite()) {
        return Err(invalid("learning rate must be positive and l2 nonnegative"));
    }
    let step = lr.min(1.0 / curvature_bound(&data.features, l2));
    let (n, d) = data.features.shape();
    let k = data.k;
    // Same iteration as `softmax_loss_and_grad`, with weights kept as d x K
    // and buffers reused across epochs.
    let features_t = data.features.transpose();
    let mut weights_t = DMatrix::<f64>::zeros(d, k);
    let mut bias = DVector::<f64>::zeros(k);
    let mut delta = DMatrix::<f64>::zeros(n, k);
    let mut grad_t = DMatrix::<f64>::zeros(d, k);
    let decay = 1.0 - step * l2;
    for _ in 0..epochs {
        delta.gemm(1.0, &data.features, &weights_t, 0.0);
        softmax_rows(&mut delta, &bias);
        for (i, &label) in data.labels.iter().enumerate() {
            delta[(i, label)] -= 1.0;
        }
        grad_t.gemm(1.0 / n as f64, &features_t, &delta, 0.0);
        weights_t.zip_apply(&grad_t, |w, g| *w = *w * decay - step * g);
        for (j, col) in delta.column_iter().enumerate() {
            bias[j] -= step * col.sum() / n as f64;
        }
    }
    let mut model = LinearSoftmaxModel::zeros(k, d, data.task);
    model.weights = weights_t.transpose();
    model.bias = bias;
    model.trained_rho = data.rho;
    if model.weights.iter().chain(model.bias.iter()).any(|v| !v.is_finite()) {
        return Err(SpxError::InvalidDataset("training produced non-finite weights".into()));
    }
    Ok(model)
}

/// Fraction of rows classified correctly.
pub fn accuracy(model: &LinearSoftmaxModel, data: &LabeledMeasurementSet) -> Result<f64> {
    if data.dim() != model.dim() {
        return Err(invalid("feature dimension does not match the model"));
    }
    if data.is_empty() {
        return Err(SpxError::InvalidDataset("empty evaluation set".into()));
    }
    let logits = &data.features * model.weights.transpose();
    let mut correct = 0usize;
    for (i, &label) in data.labels.iter().enumerate() {
        let row = logits.row(i).transpose() + &model.bias;
        if argmax(&row) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Per-feature z-scoring fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Standardizer {
    pub fn fit(features: &DMatrix<f64>) -> Self {
        let n = features.nrows().max(1) as f64;
        let mean = DVector::from_iterator(features.ncols(), features.column_iter().map(|c| c.sum() / n));
        let scale = DVector::from_iterator(
            features.ncols(),
            features.column_iter().zip(mean.iter()).map(|(c, &mu)| {
                let var = c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            }),
        );
        Self { mean, scale }
    }

    pub fn apply(&self, set: &LabeledMeasurementSet) -> LabeledMeasurementSet {
        let mut out = set.clone();
        for (j, mut col) in out.features.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.mean[j]);
            col /= self.scale[j];
        }
        out
    }

    /// Model acting on raw features equivalent to `model` on standardized ones.
    pub fn fold_into(&self, model: &LinearSoftmaxModel) -> LinearSoftmaxModel {
        let mut out = model.clone();
        for (j, mut col) in out.weights.column_iter_mut().enumerate() {
            col /= self.scale[j];
        }
        out.bias -= &out.weights * &self.mean;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub rho: f64,
    pub m: usize,
    pub mean_accuracy: f64,
    pub std_error: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyCurve {
    pub points: Vec<CurvePoint>,
    pub task: Task,
    pub k: usize,
}

impl AccuracyCurve {
    pub fn new(points: Vec<CurvePoint>, task: Task, k: usize) -> Result<Self> {
        for w in points.windows(2) {
            if w[1].rho <= w[0].rho {
                return Err(invalid("curve rates must be strictly increasing"));
            }
        }
        if points.iter().any(|p| !(0.0..=1.0).contains(&p.mean_accuracy)) {
            return Err(invalid("accuracies must lie in [0, 1]"));
        }
        Ok(Self { points, task, k })
    }

    pub fn rhos(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.rho).collect()
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean_accuracy).collect()
    }

    /// `rho,M,mean_accuracy,std_error,trials` rows.
    pub fn to_csv(&self) -> String {
        let mut text = String::from(CURVE_HEADER);
        text.push('\n');
        for p in &self.points {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                p.rho, p.m, p.mean_accuracy, p.std_error, p.trials
            ));
        }
        text
    }

    /// Sidecar carrying what the CSV cannot: task, class count and caveat.
    pub fn sidecar(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("task", self.task);
        kv.set("k", self.k);
        kv.set("caveat", CURVE_CAVEAT);
        kv
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        self.sidecar().write(crate::spmx::meta_path(path))
    }

    /// Parses a curve CSV; task and class count come from `sidecar` when
    /// given, otherwise `task_hint` and `k = 0`.
    pub fn parse_csv(text: &str, sidecar: Option<&KeyValues>, task_hint: Task) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default().trim();
        if header != CURVE_HEADER {
            return Err(SpxError::Format(format!("unexpected curve header `{header}`")));
        }
        let mut points = Vec::new();
        for (no, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != 5 {
                return Err(SpxError::Format(format!("curve line {}: expected 5 fields", no + 2)));
            }
            let bad = |e: &dyn fmt::Display| SpxError::Format(format!("curve line {}: {e}", no + 2));
            points.push(CurvePoint {
                rho: cells[0].parse().map_err(|e| bad(&e))?,
                m: cells[1].parse().map_err(|e| bad(&e))?,
                mean_accuracy: cells[2].parse().map_err(|e| bad(&e))?,
                std_error: cells[3].parse().map_err(|e| bad(&e))?,
                trials: cells[4].parse().map_err(|e| bad(&e))?,
            });
        }
        let (task, k) = match sidecar {
            Some(kv) => (kv.parse_value::<Task>("task")?, kv.parse_value::<usize>("k")?),
            None => (task_hint, 0),
        };
        Self::new(points, task, k)
    }

    pub fn read_csv(path: &Path, task_hint: Task) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let meta = crate::spmx::meta_path(path);
        let sidecar = if meta.exists() {
            Some(KeyValues::read(&meta)?)
        } else {
            None
        };
        Self::parse_csv(&text, sidecar.as_ref(), task_hint)
    }
}

/// Pointwise `mean_accuracy - 1/k`.
pub fn privacy_advantage(curve: &AccuracyCurve) -> Result<Vec<f64>> {
    if curve.k < 2 {
        return Err(invalid("advantage needs a class count of at least two"));
    }
    let chance = 1.0 / curve.k as f64;
    Ok(curve.points.iter().map(|p| p.mean_accuracy - chance).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticalMode {
    /// Largest sampled rate whose accuracy stays at or below the threshold.
    PrivSup,
    /// Smallest sampled rate whose accuracy reaches the threshold.
    BehInf,
}

/// Critical rate on the sampled grid; `None` when no grid point qualifies.
pub fn critical_rate(curve: &AccuracyCurve, threshold: f64, mode: CriticalMode) -> Option<f64> {
    match mode {
        CriticalMode::PrivSup => curve
            .points
            .iter()
            .rev()
            .find(|p| p.mean_accuracy <= threshold)
            .map(|p| p.rho),
        CriticalMode::BehInf => curve
            .points
            .iter()
            .find(|p| p.mean_accuracy >= threshold)
            .map(|p| p.rho),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeInterval {
    pub rho_beh_star: Option<f64>,
    pub rho_priv_star: Option<f64>,
    pub interval: Option<(f64, f64)>,
    pub alpha_beh: f64,
    pub beta_priv: f64,
}

impl SafeInterval {
    pub fn is_empty(&self) -> bool {
        self.interval.is_none()
    }

    pub fn to_key_values(&self) -> KeyValues {
        let opt = |v: Option<f64>| v.map_or_else(|| "ABSENT".to_string(), |r| r.to_string());
        let mut kv = KeyValues::new();
        kv.set("rho_beh_star", opt(self.rho_beh_star));
        kv.set("rho_priv_star", opt(self.rho_priv_star));
        kv.set(
            "interval",
            self.interval
                .map_or_else(|| "EMPTY".to_string(), |(lo, hi)| format!("{lo},{hi}")),
        );
        kv.set("alpha_beh", self.alpha_beh);
        kv.set("beta_priv", self.beta_priv);
        kv
    }
}

pub fn safe_interval(
    beh_curve: &AccuracyCurve,
    priv_curve: &AccuracyCurve,
    alpha: f64,
    beta: f64,
) -> Result<SafeInterval> {
    if beh_curve.rhos() != priv_curve.rhos() {
        return Err(invalid("behaviour and privacy curves use different rate grids"));
    }
    for (name, v) in [("alpha", alpha), ("beta", beta)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(invalid(format!("{name} must lie in (0, 1), got {v}")));
        }
    }
    let rho_beh_star = critical_rate(beh_curve, alpha, CriticalMode::BehInf);
    let rho_priv_star = critical_rate(priv_curve, beta, CriticalMode::PrivSup);
    let interval = match (rho_beh_star, rho_priv_star) {
        (Some(lo), Some(hi)) if lo <= hi => Some((lo, hi)),
        _ => None,
    };
    Ok(SafeInterval {
        rho_beh_star,
        rho_priv_star,
        interval,
        alpha_beh: alpha,
        beta_priv: beta,
    })
}

/// Everything a sweep depends on.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub task: Task,
    /// Strictly increasing measurement counts.
    pub rates: Vec<usize>,
    pub spec: SynthSpec,
    pub trials: usize,
    pub seed: u64,
    pub train: TrainConfig,
    /// Pattern library; a speckle library of `max(rates)` patterns seeded from
    /// `seed` when absent.
    pub library: Option<PatternLibrary>,
    /// Shuffle labels within each split (chance-level control).
    pub permute_labels: bool,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
}

impl SweepConfig {
    pub fn new(task: Task, rates: Vec<usize>, spec: SynthSpec, trials: usize, seed: u64) -> Self {
        Self {
            task,
            rates,
            spec,
            trials,
            seed,
            train: TrainConfig::default(),
            library: None,
            permute_labels: false,
            jobs: 1,
        }
    }
}

/// Master seed of trial `trial`'s data.
pub fn trial_seed(spec_seed: u64, seed: u64, trial: usize) -> u64 {
    derive_seed(
        derive_seed(spec_seed, streams::TRIAL),
        derive_seed(seed, trial as u64),
    )
}

/// Sweep with default training settings and a single worker.
pub fn sweep(task: Task, rates: &[usize], spec: &SynthSpec, trials: usize, seed: u64) -> Result<AccuracyCurve> {
    sweep_with(&SweepConfig::new(task, rates.to_vec(), spec.clone(), trials, seed))
}

pub fn sweep_with(cfg: &SweepConfig) -> Result<AccuracyCurve> {
    let per_trial = sweep_trials(cfg)?;
    let n = cfg.spec.n_pixels();
    let k = match cfg.task {
        Task::Privacy => cfg.spec.num_identities,
        Task::Behavior => cfg.spec.num_behaviors,
    };
    let points = cfg
        .rates
        .iter()
        .enumerate()
        .map(|(r, &m)| {
            let accs: Vec<f64> = per_trial.iter().map(|t| t[r]).collect();
            let (mean, se) = mean_and_se(&accs);
            CurvePoint {
                rho: m as f64 / n as f64,
                m,
                mean_accuracy: mean,
                std_error: se,
                trials: accs.len(),
            }
        })
        .collect();
    AccuracyCurve::new(points, cfg.task, k)
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`),
/// summed in a fixed order.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Test accuracies, `trials x rates`.
pub fn sweep_trials(cfg: &SweepConfig) -> Result<Vec<Vec<f64>>> {
    cfg.spec.validate()?;
    if cfg.rates.is_empty() {
        return Err(invalid("empty rate grid"));
    }
    if cfg.rates[0] == 0 || cfg.rates.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("rates must be positive and strictly increasing"));
    }
    if cfg.trials == 0 {
        return Err(invalid("need at least one trial"));
    }
    let max_m = *cfg.rates.last().unwrap();
    let generated;
    let library = match &cfg.library {
        Some(lib) => lib,
        None => {
            generated = gen_speckle(
                max_m,
                cfg.spec.height,
                cfg.spec.width,
                derive_seed(cfg.seed, streams::LIBRARY),
            )?;
            &generated
        }
    };
    if max_m > library.count() {
        return Err(invalid(format!(
            "rate {max_m} exceeds the library size {}",
            library.count()
        )));
    }
    let op = select(library, max_m, SelectionPolicy::Prefix)?;
    let run = |trial: usize| -> Result<Vec<f64>> {
        let spec = SynthSpec {
            master_seed: trial_seed(cfg.spec.master_seed, cfg.seed, trial),
            ..cfg.spec.clone()
        };
        let (mut train, _, mut test) = build_dataset(&spec, &op, cfg.task)?;
        if cfg.permute_labels {
            let mut rng = SpxRng::substream(spec.master_seed, streams::PERMUTE);
            rng.shuffle(&mut train.labels);
            rng.shuffle(&mut test.labels);
        }
        let n = spec.n_pixels();
        cfg.rates
            .iter()
            .map(|&m| {
                let tr = train.truncate_to(m, n)?;
                let te = test.truncate_to(m, n)?;
                let scaler = Standardizer::fit(&tr.features);
                let model = train_softmax(
                    &scaler.apply(&tr),
                    cfg.train.epochs,
                    cfg.train.lr,
                    cfg.train.l2,
                    spec.master_seed,
                )?;
                accuracy(&scaler.fold_into(&model), &te)
            })
            .collect()
    };
    let jobs = cfg.jobs.max(1);
    if jobs == 1 {
        (0..cfg.trials).map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| SpxError::ResourceLimit(format!("thread pool: {e}")))?;
        pool.install(|| (0..cfg.trials).into_par_iter().map(run).collect())
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &p in &idx[i..=j] {
                out[p] = avg;
            }
            i = j + 1;
        }
        out
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
