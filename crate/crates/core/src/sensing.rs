//! Forward bucket-detector model, frame stacking and the acquisition chain.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result, SpxError};
use crate::patterns::SensingOperator;
use crate::rng::{streams, SpxRng};
use crate::spmx::KeyValues;

/// Normalized reflectance image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub values: DVector<f64>,
}

impl Scene {
    pub fn new(height: usize, width: usize, values: DVector<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(invalid(format!(
                "scene has {} values for a {height}x{width} grid",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("scene has non-finite values"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: DVector::zeros(height * width),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// `N x T` matrix whose columns are frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    pub height: usize,
    pub width: usize,
    pub frames: DMatrix<f64>,
    pub frame_period: f64,
}

impl FrameBatch {
    pub fn new(height: usize, width: usize, frames: DMatrix<f64>, frame_period: f64) -> Result<Self> {
        if frames.nrows() != height * width {
            return Err(invalid(format!(
                "frames have {} rows for a {height}x{width} grid",
                frames.nrows()
            )));
        }
        if frames.ncols() == 0 {
            return Err(invalid("frame batch needs at least one frame"));
        }
        Ok(Self {
            height,
            width,
            frames,
            frame_period,
        })
    }

    pub fn from_scenes(scenes: &[Scene], frame_period: f64) -> Result<Self> {
        let first = scenes.first().ok_or_else(|| invalid("no scenes"))?;
        let n = first.values.len();
        if scenes.iter().any(|s| s.height != first.height || s.width != first.width) {
            return Err(invalid("scenes have different sizes"));
        }
        let frames = DMatrix::from_fn(n, scenes.len(), |i, t| scenes[t].values[i]);
        Self::new(first.height, first.width, frames, frame_period)
    }

    pub fn t(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame(&self, t: usize) -> Scene {
        Scene {
            height: self.height,
            width: self.width,
            values: self.frames.column(t).into_owned(),
        }
    }
}

/// Additive noise on effective measurements.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum NoiseModel {
    #[default]
    None,
    IidGaussian { sigma: f64 },
    /// Per-row variances.
    Diagonal { variances: Vec<f64> },
    /// Stationary AR(1) across rows: `Sigma_ij = sigma^2 * phi^|i-j|`.
    Ar1 { sigma: f64, phi: f64 },
}

impl NoiseModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::IidGaussian { .. } => "iid_gaussian",
            Self::Diagonal { .. } => "diagonal",
            Self::Ar1 { .. } => "ar1",
        }
    }

    /// Parameter sanity independent of `M`.
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::None => Ok(()),
            Self::IidGaussian { sigma } if sigma.is_finite() && *sigma >= 0.0 => Ok(()),
            Self::Diagonal { variances } if variances.iter().all(|v| v.is_finite() && *v >= 0.0) => {
                Ok(())
            }
            Self::Ar1 { sigma, phi }
                if sigma.is_finite() && *sigma >= 0.0 && phi.is_finite() && phi.abs() < 1.0 =>
            {
                Ok(())
            }
            other => Err(SpxError::InvalidNoiseModel(format!("{other}"))),
        }
    }

    /// Dense `M x M` covariance; `None` for the noiseless model.
    pub fn covariance(&self, m: usize) -> Result<Option<DMatrix<f64>>> {
        self.validate()?;
        Ok(match self {
            Self::None => None,
            Self::IidGaussian { sigma } => Some(DMatrix::from_diagonal_element(m, m, sigma * sigma)),
            Self::Diagonal { variances } => {
                self.check_len(m)?;
                Some(DMatrix::from_diagonal(&DVector::from_column_slice(variances)))
            }
            Self::Ar1 { sigma, phi } => Some(DMatrix::from_fn(m, m, |i, j| {
                sigma * sigma * phi.powi(i.abs_diff(j) as i32)
            })),
        })
    }

    fn check_len(&self, m: usize) -> Result<()> {
        if let Self::Diagonal { variances } = self {
            if variances.len() < m {
                return Err(invalid(format!(
                    "diagonal noise has {} variances for {m} measurements",
                    variances.len()
                )));
            }
        }
        Ok(())
    }

    /// Draws one noise column of length `m`. Row `i` only depends on rows
    /// `0..=i`, so a shorter draw is always a prefix of a longer one.
    pub fn sample(&self, m: usize, rng: &mut SpxRng) -> Result<DVector<f64>> {
        self.validate()?;
        self.check_len(m)?;
        Ok(match self {
            Self::None => DVector::zeros(m),
            Self::IidGaussian { sigma } => DVector::from_fn(m, |_, _| sigma * rng.normal()),
            Self::Diagonal { variances } => {
                DVector::from_fn(m, |i, _| variances[i].sqrt() * rng.normal())
            }
            Self::Ar1 { sigma, phi } => {
                let innovation = sigma * (1.0 - phi * phi).sqrt();
                let mut out = DVector::zeros(m);
                let mut prev = 0.0;
                for i in 0..m {
                    let e = if i == 0 {
                        sigma * rng.normal()
                    } else {
                        phi * prev + innovation * rng.normal()
                    };
                    out[i] = e;
                    prev = e;
                }
                out
            }
        })
    }

    pub fn to_key_values(&self, kv: &mut KeyValues, prefix: &str) {
        kv.set(format!("{prefix}kind"), self.kind_name());
        match self {
            Self::None => {}
            Self::IidGaussian { sigma } => {
                kv.set(format!("{prefix}sigma"), sigma);
            }
            Self::Diagonal { variances } => {
                let joined: Vec<String> = variances.iter().map(f64::to_string).collect();
                kv.set(format!("{prefix}variances"), joined.join(","));
            }
            Self::Ar1 { sigma, phi } => {
                kv.set(format!("{prefix}sigma"), sigma);
                kv.set(format!("{prefix}phi"), phi);
            }
        }
    }

    pub fn from_key_values(kv: &KeyValues, prefix: &str) -> Result<Self> {
        let key = |k: &str| format!("{prefix}{k}");
        let model = match kv.require(&key("kind"))? {
            "none" => Self::None,
            "iid_gaussian" => Self::IidGaussian {
                sigma: kv.parse_value(&key("sigma"))?,
            },
            "diagonal" => Self::Diagonal {
                variances: kv
                    .require(&key("variances"))?
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| SpxError::Format("bad diagonal variances".into()))?,
            },
            "ar1" => Self::Ar1 {
                sigma: kv.parse_value(&key("sigma"))?,
                phi: kv.parse_value(&key("phi"))?,
            },
            other => return Err(SpxError::Format(format!("unknown noise kind `{other}`"))),
        };
        Ok(model)
    }
}

impl fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "none"),
            Self::IidGaussian { sigma } => write!(f, "iid_gaussian(sigma={sigma})"),
            Self::Diagonal { variances } => write!(f, "diagonal(m={})", variances.len()),
            Self::Ar1 { sigma, phi } => write!(f, "ar1(sigma={sigma},phi={phi})"),
        }
    }
}

/// `Y` (`M x T`) with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBatch {
    pub values: DMatrix<f64>,
    pub operator_id: String,
    pub noise: NoiseModel,
    pub seed: u64,
    pub calibrated: bool,
    pub whitened: bool,
}

impl MeasurementBatch {
    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    pub fn t(&self) -> usize {
        self.values.ncols()
    }

    pub fn metadata(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("operator_id", &self.operator_id)
            .set("seed", self.seed)
            .set("calibrated", self.calibrated)
            .set("whitened", self.whitened)
            .set("m", self.m())
            .set("t", self.t());
        self.noise.to_key_values(&mut kv, "noise.");
        kv
    }

    pub fn from_parts(values: DMatrix<f64>, meta: &KeyValues) -> Result<Self> {
        Ok(Self {
            values,
            operator_id: meta.require("operator_id")?.to_string(),
            noise: NoiseModel::from_key_values(meta, "noise.")?,
            seed: meta.parse_value("seed")?,
            calibrated: meta.parse_value("calibrated")?,
            whitened: meta.parse_value("whitened")?,
        })
    }
}

/// Seed of the noise column for frame `t` of a batch measured under `seed`.
pub fn frame_noise_seed(seed: u64, t: usize) -> u64 {
    crate::rng::derive_seed(crate::rng::derive_seed(seed, streams::NOISE), t as u64)
}

fn check_grid(op: &SensingOperator, height: usize, width: usize) -> Result<()> {
    if op.height() * op.width() != height * width || op.n_pixels() != height * width {
        return Err(invalid(format!(
            "operator grid {}x{} does not match {height}x{width}",
            op.height(),
            op.width()
        )));
    }
    Ok(())
}

/// `y = Phi_M x + eps`; identical to column 0 of [`measure_batch`] with the same seed.
pub fn measure(
    op: &SensingOperator,
    scene: &Scene,
    noise: &NoiseModel,
    seed: u64,
) -> Result<DVector<f64>> {
    let batch = FrameBatch::new(
        scene.height,
        scene.width,
        DMatrix::from_column_slice(scene.values.len(), 1, scene.values.as_slice()),
        0.0,
    )?;
    Ok(measure_batch(op, &batch, noise, seed)?.values.column(0).into_owned())
}

/// `Y = Phi_M X + E` with independent noise columns (seeded per frame).
pub fn measure_batch(
    op: &SensingOperator,
    batch: &FrameBatch,
    noise: &NoiseModel,
    seed: u64,
) -> Result<MeasurementBatch> {
    check_grid(op, batch.height, batch.width)?;
    noise.validate()?;
    let mut values = op.apply_columns(&batch.frames);
    if !matches!(noise, NoiseModel::None) {
        for t in 0..values.ncols() {
            let mut rng = SpxRng::new(frame_noise_seed(seed, t));
            let e = noise.sample(op.m(), &mut rng)?;
            let mut col = values.column_mut(t);
            col += e;
        }
    }
    Ok(MeasurementBatch {
        values,
        operator_id: op.id(),
        noise: noise.clone(),
        seed,
        calibrated: true,
        whitened: op.is_whitened(),
    })
}

/// `vec(Phi_M X)` with column stacking: entry `t*M + i` is `(Phi_M X)[i, t]`.
/// Equivalent to `(I_T kron Phi_M) vec(X)` without forming the Kronecker product.
pub fn kron_vec_apply(op: &SensingOperator, batch: &FrameBatch) -> Result<DVector<f64>> {
    check_grid(op, batch.height, batch.width)?;
    let y = op.apply_columns(&batch.frames);
    // nalgebra storage is column-major, which is exactly the vec convention
    Ok(DVector::from_column_slice(y.as_slice()))
}

/// Diagonal gain and offset of the detector electronics.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionChain {
    pub gains: DVector<f64>,
    pub offsets: DVector<f64>,
}

impl AcquisitionChain {
    pub fn new(gains: DVector<f64>, offsets: DVector<f64>) -> Result<Self> {
        if gains.len() != offsets.len() {
            return Err(invalid("gain and offset lengths differ"));
        }
        if gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(invalid("gains must be finite and strictly positive"));
        }
        if offsets.iter().any(|o| !o.is_finite()) {
            return Err(invalid("offsets must be finite"));
        }
        Ok(Self { gains, offsets })
    }

    /// Random chain: gains uniform in `[gain_lo, gain_hi]`, offsets `N(0, offset_sd^2)`.
    pub fn random(m: usize, gain_lo: f64, gain_hi: f64, offset_sd: f64, seed: u64) -> Result<Self> {
        if !(gain_lo > 0.0 && gain_hi >= gain_lo) {
            return Err(invalid("gain range must satisfy 0 < lo <= hi"));
        }
        let mut rng = SpxRng::new(seed);
        let gains = DVector::from_fn(m, |_, _| rng.uniform_range(gain_lo, gain_hi));
        let offsets = DVector::from_fn(m, |_, _| offset_sd * rng.normal());
        Self::new(gains, offsets)
    }

    pub fn m(&self) -> usize {
        self.gains.len()
    }
}

/// `y_raw = G y + o`.
pub fn apply_chain(y: &DVector<f64>, chain: &AcquisitionChain) -> Result<DVector<f64>> {
    if y.len() != chain.m() {
        return Err(invalid(format!(
            "measurement length {} vs chain length {}",
            y.len(),
            chain.m()
        )));
    }
    Ok(y.component_mul(&chain.gains) + &chain.offsets)
}

/// [`apply_chain`] on every column; the result is flagged uncalibrated.
pub fn apply_chain_batch(meas: &MeasurementBatch, chain: &AcquisitionChain) -> Result<MeasurementBatch> {
    if meas.m() != chain.m() {
        return Err(invalid(format!(
            "batch has {} rows, chain has {}",
            meas.m(),
            chain.m()
        )));
    }
    let mut values = meas.values.clone();
    for mut col in values.column_iter_mut() {
        for i in 0..col.len() {
            col[i] = chain.gains[i] * col[i] + chain.offsets[i];
        }
    }
    Ok(MeasurementBatch {
        values,
        calibrated: false,
        ..meas.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{gen_hadamard, gen_speckle, select, SelectionPolicy};
    use proptest::prelude::*;

    fn two_by_two_op() -> SensingOperator {
        let m = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, -1.0, -1.0, -1.0, -1.0, 1.0, 1.0]);
        SensingOperator::from_dense(m, 2, 2).unwrap()
    }

    fn random_scene(h: usize, w: usize, rng: &mut SpxRng) -> Scene {
        Scene::new(h, w, DVector::from_fn(h * w, |_, _| rng.uniform())).unwrap()
    }

    #[test]
    fn inner_products() {
        let x = Scene::new(2, 2, DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = measure(&two_by_two_op(), &x, &NoiseModel::None, 0).unwrap();
        assert_eq!(y.as_slice(), &[-4.0, 4.0]);
    }

    #[test]
    fn zero_scene_gives_zero() {
        let op = select(&gen_speckle(10, 4, 4, 1).unwrap(), 10, SelectionPolicy::Prefix).unwrap();
        let y = measure(&op, &Scene::zeros(4, 4), &NoiseModel::None, 9).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let op = two_by_two_op();
        assert!(measure(&op, &Scene::zeros(3, 3), &NoiseModel::None, 0).is_err());
    }

    #[test]
    fn iid_noise_std() {
        let op = two_by_two_op();
        let x = Scene::new(2, 2, DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4])).unwrap();
        let noise = NoiseModel::IidGaussian { sigma: 0.1 };
        let n = 10_000;
        let ys: Vec<f64> = (0..n)
            .map(|s| measure(&op, &x, &noise, s as u64).unwrap()[0])
            .collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let sd = (ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd - 0.1).abs() < 0.003, "sd {sd}");
        assert!((mean + 0.4).abs() < 0.01);
    }

    #[test]
    fn batch_single_frame_matches_measure() {
        let mut rng = SpxRng::new(5);
        let op = select(&gen_speckle(8, 4, 4, 1).unwrap(), 8, SelectionPolicy::Prefix).unwrap();
        let x = random_scene(4, 4, &mut rng);
        let noise = NoiseModel::IidGaussian { sigma: 0.3 };
        let batch = FrameBatch::from_scenes(std::slice::from_ref(&x), 0.04).unwrap();
        let yb = measure_batch(&op, &batch, &noise, 77).unwrap();
        let y = measure(&op, &x, &noise, 77).unwrap();
        assert_eq!(yb.values.column(0).into_owned(), y);
        assert_eq!(yb.t(), 1);
    }

    #[test]
    fn identical_frames_identical_columns() {
        let mut rng = SpxRng::new(6);
        let op = select(&gen_speckle(8, 4, 4, 1).unwrap(), 8, SelectionPolicy::Prefix).unwrap();
        let x = random_scene(4, 4, &mut rng);
        let batch = FrameBatch::from_scenes(&[x.clone(), x], 0.04).unwrap();
        let y = measure_batch(&op, &batch, &NoiseModel::None, 0).unwrap();
        assert_eq!(y.values.column(0), y.values.column(1));
    }

    #[test]
    fn batch_matches_dense_product() {
        let mut rng = SpxRng::new(7);
        let op = select(&gen_hadamard(64, 8, 8).unwrap(), 64, SelectionPolicy::Prefix).unwrap();
        let scenes: Vec<Scene> = (0..5).map(|_| random_scene(8, 8, &mut rng)).collect();
        let batch = FrameBatch::from_scenes(&scenes, 0.04).unwrap();
        let y = measure_batch(&op, &batch, &NoiseModel::None, 0).unwrap();
        let phi = op.to_dense();
        for t in 0..5 {
            for i in 0..64 {
                let mut s = 0.0;
                for j in 0..64 {
                    s += phi[(i, j)] * batch.frames[(j, t)];
                }
                assert!((y.values[(i, t)] - s).abs() < 1e-12);
            }
        }
        // column t equals a single-frame measurement
        for t in 0..5 {
            let single = measure(&op, &scenes[t], &NoiseModel::None, 0).unwrap();
            assert!((y.values.column(t) - single).amax() < 1e-12);
        }
    }

    #[test]
    fn batch_noise_is_deterministic_and_column_independent() {
        let op = select(&gen_speckle(4, 2, 2, 1).unwrap(), 4, SelectionPolicy::Prefix).unwrap();
        let t = 10_000;
        let batch = FrameBatch::new(2, 2, DMatrix::zeros(4, t), 0.0).unwrap();
        let noise = NoiseModel::IidGaussian { sigma: 1.0 };
        let a = measure_batch(&op, &batch, &noise, 3).unwrap();
        let b = measure_batch(&op, &batch, &noise, 3).unwrap();
        assert_eq!(a.values, b.values);
        // correlation between consecutive columns, pooled over rows
        let xs: Vec<f64> = (0..t - 1).map(|k| a.values[(0, k)]).collect();
        let ys: Vec<f64> = (1..t).map(|k| a.values[(0, k)]).collect();
        assert!(pearson(&xs, &ys).abs() < 0.05);
        let c = measure_batch(&op, &batch, &noise, 4).unwrap();
        let xs: Vec<f64> = a.values.row(1).iter().copied().collect();
        let ys: Vec<f64> = c.values.row(1).iter().copied().collect();
        assert!(pearson(&xs, &ys).abs() < 0.05);
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn noise_draws_are_nested() {
        for noise in [
            NoiseModel::IidGaussian { sigma: 0.5 },
            NoiseModel::Ar1 { sigma: 1.0, phi: 0.8 },
            NoiseModel::Diagonal { variances: (1..=12).map(f64::from).collect() },
        ] {
            let long = noise.sample(12, &mut SpxRng::new(1)).unwrap();
            let short = noise.sample(5, &mut SpxRng::new(1)).unwrap();
            assert_eq!(short.as_slice(), &long.as_slice()[..5]);
        }
    }

    #[test]
    fn ar1_validation() {
        assert!(matches!(
            NoiseModel::Ar1 { sigma: 1.0, phi: 1.0 }.validate(),
            Err(SpxError::InvalidNoiseModel(_))
        ));
        assert!(NoiseModel::IidGaussian { sigma: -1.0 }.validate().is_err());
        let cov = NoiseModel::Ar1 { sigma: 2.0, phi: 0.5 }.covariance(3).unwrap().unwrap();
        assert_eq!(cov[(0, 2)], 1.0);
        assert_eq!(cov[(1, 1)], 4.0);
    }

    #[test]
    fn kron_single_frame() {
        let mut rng = SpxRng::new(8);
        let op = two_by_two_op();
        let x = random_scene(2, 2, &mut rng);
        let batch = FrameBatch::from_scenes(std::slice::from_ref(&x), 0.0).unwrap();
        assert_eq!(kron_vec_apply(&op, &batch).unwrap(), op.apply_columns(&batch.frames).column(0));
    }

    #[test]
    fn kron_reshape_matches_batch() {
        let mut rng = SpxRng::new(9);
        let op = select(&gen_speckle(6, 3, 3, 2).unwrap(), 6, SelectionPolicy::Prefix).unwrap();
        let scenes: Vec<Scene> = (0..4).map(|_| random_scene(3, 3, &mut rng)).collect();
        let batch = FrameBatch::from_scenes(&scenes, 0.0).unwrap();
        let v = kron_vec_apply(&op, &batch).unwrap();
        let y = measure_batch(&op, &batch, &NoiseModel::None, 0).unwrap();
        for t in 0..4 {
            for i in 0..6 {
                assert_eq!(v[t * 6 + i], y.values[(i, t)]);
            }
        }
    }

    #[test]
    fn chain_examples() {
        let y = DVector::from_vec(vec![3.0, 4.0]);
        let ident = AcquisitionChain::new(DVector::from_element(2, 1.0), DVector::zeros(2)).unwrap();
        assert_eq!(apply_chain(&y, &ident).unwrap(), y);
        let chain = AcquisitionChain::new(
            DVector::from_vec(vec![2.0, 2.0]),
            DVector::from_vec(vec![1.0, -1.0]),
        )
        .unwrap();
        assert_eq!(apply_chain(&y, &chain).unwrap().as_slice(), &[7.0, 7.0]);
        assert!(apply_chain(&DVector::zeros(3), &chain).is_err());
        assert!(AcquisitionChain::new(DVector::from_vec(vec![0.0]), DVector::zeros(1)).is_err());
    }

    #[test]
    fn metadata_roundtrip() {
        let meas = MeasurementBatch {
            values: DMatrix::zeros(2, 1),
            operator_id: "custom:2x2:m=2".into(),
            noise: NoiseModel::Ar1 { sigma: 0.5, phi: -0.25 },
            seed: 42,
            calibrated: false,
            whitened: false,
        };
        let kv = KeyValues::decode(&meas.metadata().encode()).unwrap();
        assert_eq!(MeasurementBatch::from_parts(meas.values.clone(), &kv).unwrap(), meas);
    }

    proptest! {
        #[test]
        fn measurement_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = SpxRng::new(seed);
            let op = select(&gen_speckle(12, 4, 4, seed).unwrap(), 12, SelectionPolicy::Prefix).unwrap();
            let x1 = random_scene(4, 4, &mut rng);
            let x2 = random_scene(4, 4, &mut rng);
            let combo = Scene::new(4, 4, &x1.values * a + &x2.values * b).unwrap();
            let lhs = measure(&op, &combo, &NoiseModel::None, 0).unwrap();
            let rhs = measure(&op, &x1, &NoiseModel::None, 0).unwrap() * a
                + measure(&op, &x2, &NoiseModel::None, 0).unwrap() * b;
            let scale = lhs.norm().max(rhs.norm()).max(1e-300);
            prop_assert!((lhs - rhs).norm() / scale < 1e-12);
        }

        #[test]
        fn chain_inverse_is_exact(seed in any::<u64>()) {
            let chain = AcquisitionChain::random(8, 0.5, 2.0, 1.0, seed).unwrap();
            let mut rng = SpxRng::new(seed ^ 1);
            let y = DVector::from_fn(8, |_, _| rng.normal() * 10.0);
            let raw = apply_chain(&y, &chain).unwrap();
            let back = (raw - &chain.offsets).component_div(&chain.gains);
            prop_assert!((back - &y).amax() <= 1e-12 * y.amax().max(1.0));
        }
    }
}
