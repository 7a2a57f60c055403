//! Acquisition-chain estimation, calibration and noise whitening.

use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{invalid, Result, SpxError};
use crate::patterns::SensingOperator;
use crate::sensing::{MeasurementBatch, NoiseModel};
use crate::spmx::{self, KeyValues};

/// Estimated offsets and gains of the acquisition chain.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProfile {
    pub offsets_hat: DVector<f64>,
    pub gains_hat: DVector<f64>,
    pub n_dark: usize,
    pub n_ref: usize,
}

impl CalibrationProfile {
    pub fn identity(m: usize) -> Self {
        Self {
            offsets_hat: DVector::zeros(m),
            gains_hat: DVector::from_element(m, 1.0),
            n_dark: 0,
            n_ref: 0,
        }
    }

    pub fn m(&self) -> usize {
        self.gains_hat.len()
    }

    /// Writes `path` (key=value) plus `<stem>.offsets.spmx` / `<stem>.gains.spmx`
    /// beside it; the text file references them by file name.
    pub fn write(&self, path: &Path) -> Result<()> {
        for (file, bytes) in self.encode_files(path)? {
            std::fs::write(file, bytes)?;
        }
        Ok(())
    }

    /// The files [`write`](Self::write) would create, as `(path, bytes)`.
    pub fn encode_files(&self, path: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| invalid("profile path has no file name"))?;
        let dir = path.parent().unwrap_or_else(|| Path::new(""));
        let offsets_name = format!("{stem}.offsets.spmx");
        let gains_name = format!("{stem}.gains.spmx");
        let mut kv = KeyValues::new();
        kv.set("m", self.m())
            .set("n_dark", self.n_dark)
            .set("n_ref", self.n_ref)
            .set("offsets", &offsets_name)
            .set("gains", &gains_name);
        Ok(vec![
            (dir.join(&offsets_name), spmx::encode(&column(&self.offsets_hat))),
            (dir.join(&gains_name), spmx::encode(&column(&self.gains_hat))),
            (path.to_path_buf(), kv.encode().into_bytes()),
        ])
    }

    pub fn read(path: &Path) -> Result<Self> {
        let kv = KeyValues::read(path)?;
        let dir = path.parent().unwrap_or_else(|| Path::new(""));
        let offsets = spmx::read(dir.join(kv.require("offsets")?))?;
        let gains = spmx::read(dir.join(kv.require("gains")?))?;
        let m: usize = kv.parse_value("m")?;
        if offsets.shape() != (m, 1) || gains.shape() != (m, 1) {
            return Err(SpxError::Format("profile vectors must be m x 1".into()));
        }
        Ok(Self {
            offsets_hat: offsets.column(0).into_owned(),
            gains_hat: gains.column(0).into_owned(),
            n_dark: kv.parse_value("n_dark")?,
            n_ref: kv.parse_value("n_ref")?,
        })
    }
}

fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn row_means(values: &DMatrix<f64>) -> DVector<f64> {
    let t = values.ncols() as f64;
    DVector::from_fn(values.nrows(), |i, _| values.row(i).iter().sum::<f64>() / t)
}

/// Offset estimate: per-row mean of dark-scene readings.
pub fn estimate_offset(dark: &MeasurementBatch) -> Result<DVector<f64>> {
    if dark.t() == 0 {
        return Err(invalid("dark batch has no frames"));
    }
    Ok(row_means(&dark.values))
}

/// `g_i = mean_t (raw_it - o_i) / ref_i`; any zero reference entry is an error.
pub fn estimate_gain(
    refmeas: &MeasurementBatch,
    ref_ideal: &DVector<f64>,
    offsets: &DVector<f64>,
) -> Result<DVector<f64>> {
    let est = estimate_gain_masked(refmeas, ref_ideal, offsets)?;
    if let Some(&i) = est.excluded.first() {
        return Err(SpxError::DegenerateReference(format!(
            "reference response of row {i} is zero ({} zero rows)",
            est.excluded.len()
        )));
    }
    Ok(est.gains)
}

/// Gain estimate that tolerates zero reference rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GainEstimate {
    pub gains: DVector<f64>,
    /// Rows whose ideal reference response is zero; their gain is set to 1.
    pub excluded: Vec<usize>,
}

pub fn estimate_gain_masked(
    refmeas: &MeasurementBatch,
    ref_ideal: &DVector<f64>,
    offsets: &DVector<f64>,
) -> Result<GainEstimate> {
    let m = refmeas.m();
    if ref_ideal.len() != m || offsets.len() != m {
        return Err(invalid(format!(
            "reference batch has {m} rows, ideal {} and offsets {}",
            ref_ideal.len(),
            offsets.len()
        )));
    }
    if refmeas.t() == 0 {
        return Err(invalid("reference batch has no frames"));
    }
    let means = row_means(&refmeas.values);
    let mut excluded = Vec::new();
    let gains = DVector::from_fn(m, |i, _| {
        if ref_ideal[i] == 0.0 {
            excluded.push(i);
            1.0
        } else {
            (means[i] - offsets[i]) / ref_ideal[i]
        }
    });
    if !excluded.is_empty() {
        warn!(
            "{} of {m} rows have a zero reference response; their gains default to 1",
            excluded.len()
        );
    }
    Ok(GainEstimate { gains, excluded })
}

/// Dark + reference estimation in one step. Rows with zero reference response
/// keep gain 1 and are returned alongside the profile.
pub fn estimate_profile(
    dark: &MeasurementBatch,
    refmeas: &MeasurementBatch,
    ref_ideal: &DVector<f64>,
) -> Result<(CalibrationProfile, Vec<usize>)> {
    let offsets = estimate_offset(dark)?;
    let est = estimate_gain_masked(refmeas, ref_ideal, &offsets)?;
    if let Some(i) = est.gains.iter().position(|g| !(g.is_finite() && *g > 0.0)) {
        return Err(SpxError::DegenerateReference(format!(
            "estimated gain of row {i} is {} (not positive)",
            est.gains[i]
        )));
    }
    Ok((
        CalibrationProfile {
            offsets_hat: offsets,
            gains_hat: est.gains,
            n_dark: dark.t(),
            n_ref: refmeas.t(),
        },
        est.excluded,
    ))
}

/// `y = G^-1 (y_raw - o)` row by row.
pub fn calibrate(raw: &MeasurementBatch, profile: &CalibrationProfile) -> Result<MeasurementBatch> {
    if let Some(i) = profile.gains_hat.iter().position(|g| !(*g > 0.0)) {
        return Err(SpxError::ContractViolation(format!(
            "profile gain {i} = {} is not positive",
            profile.gains_hat[i]
        )));
    }
    if raw.m() != profile.m() {
        return Err(invalid(format!(
            "batch has {} rows, profile has {}",
            raw.m(),
            profile.m()
        )));
    }
    let mut values = raw.values.clone();
    for mut col in values.column_iter_mut() {
        for i in 0..col.len() {
            col[i] = (col[i] - profile.offsets_hat[i]) / profile.gains_hat[i];
        }
    }
    Ok(MeasurementBatch {
        values,
        calibrated: true,
        ..raw.clone()
    })
}

/// Cholesky factor `L` of the noise covariance; whitening applies `L^-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    factor: DMatrix<f64>,
    source_noise: NoiseModel,
}

impl WhiteningTransform {
    pub fn from_noise(noise: &NoiseModel, m: usize) -> Result<Self> {
        let cov = noise
            .covariance(m)?
            .ok_or_else(|| SpxError::InvalidNoiseModel("noiseless model has no covariance".into()))?;
        let chol = Cholesky::new(cov).ok_or_else(|| {
            SpxError::InvalidNoiseModel(format!("covariance of {noise} is not positive definite"))
        })?;
        Ok(Self {
            factor: chol.l(),
            source_noise: noise.clone(),
        })
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn source_noise(&self) -> &NoiseModel {
        &self.source_noise
    }

    pub fn m(&self) -> usize {
        self.factor.nrows()
    }

    /// `L^-1 B` by forward substitution.
    pub fn apply(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.m() {
            return Err(invalid(format!(
                "whitening {} rows with an {}x{} factor",
                b.nrows(),
                self.m(),
                self.m()
            )));
        }
        self.factor
            .solve_lower_triangular(b)
            .ok_or_else(|| SpxError::InvalidNoiseModel("singular Cholesky factor".into()))
    }
}

/// Whitens measurements and operator together, `(L^-1 Y, L^-1 Phi_M)`.
pub fn whiten(
    meas: &MeasurementBatch,
    op: &SensingOperator,
    noise: &NoiseModel,
) -> Result<(MeasurementBatch, SensingOperator)> {
    if !meas.calibrated {
        return Err(SpxError::ContractViolation(
            "whitening requires calibrated measurements".into(),
        ));
    }
    if meas.m() != op.m() {
        return Err(invalid(format!(
            "batch has {} rows, operator has {}",
            meas.m(),
            op.m()
        )));
    }
    let transform = WhiteningTransform::from_noise(noise, op.m())?;
    let values = transform.apply(&meas.values)?;
    let matrix = transform.apply(&op.to_dense())?;
    let op_w = op.with_matrix(matrix, true);
    Ok((
        MeasurementBatch {
            values,
            operator_id: op_w.id(),
            whitened: true,
            ..meas.clone()
        },
        op_w,
    ))
}
