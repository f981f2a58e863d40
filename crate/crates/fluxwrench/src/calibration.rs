//! Calibration of the two linear maps behind the sensor: the flux-to-twist
//! matrix `A` (fitted by pseudoinverse against registration-derived twists)
//! and the stiffness matrix `K` (fitted against ground-truth gravity
//! wrenches). Also computes the ground-truth wrench a hanging calibration
//! mass applies at the sensor frame.

use crate::geometry::SensorGeometry;
use crate::magnetics::{FluxSample, PositionMap};
use crate::registration::{
    arun_register, deflection_twist, magnet_positions_in_center, Correspondences, RegistrationError,
};
use crate::se3::{self, Transform, Wrench};
use crate::sensitivity::{sensitivity_report, SensitivityReport};
use nalgebra::{DMatrix, DVector, Matrix6, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Standard gravity, m/s².
pub const GRAVITY_M_PER_S2: f64 = 9.81;

/// Relative singular-value cutoff for the Moore-Penrose pseudoinverse.
pub const PINV_REL_TOL: f64 = 1e-10;

/// Condition number above which a fit is flagged as rank-deficient.
pub const RANK_WARN_CONDITION: f64 = 1e8;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid dataset: {reason}")]
    InvalidDataset { reason: String },
    #[error("record {index}: {source}")]
    Record {
        index: usize,
        source: RegistrationError,
    },
    #[error("stiffness is unidentifiable: {what} has rank {rank} < 6")]
    RankDeficient { what: String, rank: usize },
}

/// Wrench the hanging mass applies at the sensor frame, from the flange pose.
///
/// The mass frame is world-aligned at the lever point, so its wrench is a
/// pure downward force `[0, 0, -m g]`; transporting it through the adjoint of
/// the (world-aligned, lever-offset) pose of the sensor frame yields the
/// force and lever moment felt at the sensor. The sensor base is taken rigid
/// with the flange.
pub fn gravity_wrench(flange: &Transform, lever_mm: &Vector3<f64>, mass_g: f64) -> Wrench {
    assert!(mass_g > 0.0, "mass must be positive");
    let weight = Wrench::new(
        Vector3::new(0.0, 0.0, -mass_g / 1000.0 * GRAVITY_M_PER_S2),
        Vector3::zeros(),
    );
    // pose of the sensor frame in the (world-aligned) mass frame
    let sensor_in_mass = Transform::new(flange.rotation, -(flange.rotation * *lever_mm));
    se3::transform_wrench(&sensor_in_mass, &weight)
}

/// One calibration record: where the robot held the sensor, what hung off it,
/// and the averaged flux stack that resulted.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    /// Flange pose in the robot world frame.
    pub flange: Transform,
    pub mass_g: f64,
    /// Mass center in the flange frame (CAD constant), mm.
    pub lever_mm: Vector3<f64>,
    /// Averaged flux stack, µT, sensor-major.
    pub flux_ut: DVector<f64>,
}

impl CalibrationRecord {
    pub fn ground_truth_wrench(&self) -> Wrench {
        gravity_wrench(&self.flange, &self.lever_mm, self.mass_g)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationDataset {
    pub records: Vec<CalibrationRecord>,
}

impl CalibrationDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Result of the pseudoinverse fit of the flux-to-twist matrix.
#[derive(Debug, Clone)]
pub struct TwistMatrixFit {
    /// 6 x 3n map from flux stack to deflection twist.
    pub a: DMatrix<f64>,
    /// Frobenius residual of `Xi - A B`.
    pub residual: f64,
    pub cond_b: f64,
    /// Set when `cond(B)` exceeds [`RANK_WARN_CONDITION`]; not fatal, the
    /// truncated pseudoinverse handles the redundancy.
    pub rank_deficient: bool,
}

struct Pinv {
    pinv: DMatrix<f64>,
    cond: f64,
    rank: usize,
}

/// SVD pseudoinverse with singular values below `PINV_REL_TOL * sigma_max`
/// truncated.
fn truncated_pinv(m: &DMatrix<f64>) -> Pinv {
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let sigma = &svd.singular_values;
    let sigma_max = sigma.max();
    let cutoff = PINV_REL_TOL * sigma_max;

    let mut rank = 0;
    let mut inv_sigma = DVector::zeros(sigma.len());
    for i in 0..sigma.len() {
        if sigma[i] > cutoff {
            inv_sigma[i] = 1.0 / sigma[i];
            rank += 1;
        }
    }
    let sigma_min = sigma.min();
    let cond = if sigma_min > 0.0 {
        sigma_max / sigma_min
    } else {
        f64::INFINITY
    };
    // pinv = V * Sigma^+ * U^T
    let mut scaled_ut = u.transpose();
    for (i, mut row) in scaled_ut.row_iter_mut().enumerate() {
        row *= inv_sigma[i];
    }
    Pinv {
        pinv: v_t.transpose() * scaled_ut,
        cond,
        rank,
    }
}

/// Fit `A = Xi B^+`, the least-squares flux-to-twist map.
pub fn fit_twist_matrix(b: &DMatrix<f64>, xi: &DMatrix<f64>) -> TwistMatrixFit {
    assert_eq!(b.ncols(), xi.ncols(), "B and Xi need matching columns");
    assert_eq!(xi.nrows(), 6, "twists are 6-vectors");
    let p = truncated_pinv(b);
    let a = xi * &p.pinv;
    let residual = (xi - &a * b).norm();
    TwistMatrixFit {
        a,
        residual,
        cond_b: p.cond,
        rank_deficient: p.cond > RANK_WARN_CONDITION,
    }
}

/// Result of the stiffness fit.
#[derive(Debug, Clone)]
pub struct StiffnessFit {
    pub k: Matrix6<f64>,
    /// Frobenius residual of `W - K (A B)`.
    pub residual: f64,
    pub cond_ab: f64,
}

/// Fit `K = W (A B)^+`. Fails when the predicted twists span fewer than six
/// directions, because the stiffness is then unidentifiable.
pub fn fit_stiffness(
    w: &DMatrix<f64>,
    ab: &DMatrix<f64>,
) -> Result<StiffnessFit, CalibrationError> {
    assert_eq!(w.ncols(), ab.ncols(), "W and AB need matching columns");
    assert_eq!(w.nrows(), 6);
    assert_eq!(ab.nrows(), 6);
    let p = truncated_pinv(ab);
    if p.rank < 6 {
        return Err(CalibrationError::RankDeficient {
            what: "A B (predicted twist matrix)".into(),
            rank: p.rank,
        });
    }
    let k_dyn = w * &p.pinv;
    let k = Matrix6::from_fn(|i, j| k_dyn[(i, j)]);
    let residual = (w - &k_dyn * ab).norm();
    Ok(StiffnessFit {
        k,
        residual,
        cond_ab: p.cond,
    })
}

/// Knobs for [`run_calibration`].
#[derive(Debug, Clone, Default)]
pub struct CalibrationOptions {
    /// Subtract this rest-flux stack from every record before fitting.
    /// Off by default: the fits operate on raw stacks and absorb any offset
    /// the pose sampling exposes.
    pub rest_flux_ut: Option<DVector<f64>>,
    /// Reserve every k-th record (1-indexed positions k, 2k, ...) from the
    /// fit and report held-out RMSE on them.
    pub holdout_every: Option<usize>,
}

/// JSON has no infinity literal; rank-deficient fits have infinite condition
/// numbers, so those fields pass through as null.
mod maybe_infinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Fit diagnostics serialized alongside the matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDiagnostics {
    pub records_used: usize,
    pub records_held_out: usize,
    /// Per-axis RMS of `w - K A b` over the training records (N, N, N, Nm, Nm, Nm).
    pub training_rms: [f64; 6],
    /// Per-axis RMS over the held-out records, when a holdout split was used.
    pub holdout_rms: Option<[f64; 6]>,
    /// Frobenius residual of the twist fit `Xi - A B`.
    pub twist_residual: f64,
    #[serde(with = "maybe_infinite")]
    pub cond_b: f64,
    #[serde(with = "maybe_infinite")]
    pub cond_ab: f64,
    pub rank_warning_b: bool,
}

/// Fitted calibration: the two maps plus diagnostics and sensitivity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "CalibrationResultDto", try_from = "CalibrationResultDto")]
pub struct CalibrationResult {
    /// Flux-to-twist map, 6 x 3n.
    pub a: DMatrix<f64>,
    /// Twist-to-wrench stiffness (N/mm, Nm/rad blocks).
    pub k: Matrix6<f64>,
    pub diagnostics: CalibrationDiagnostics,
    pub sensitivity: SensitivityReport,
}

impl CalibrationResult {
    /// The cached runtime map `K A`.
    pub fn ka(&self) -> DMatrix<f64> {
        DMatrix::from_fn(6, self.a.ncols(), |i, j| {
            (0..6).map(|l| self.k[(i, l)] * self.a[(l, j)]).sum()
        })
    }
}

/// Flat row-major JSON image of [`CalibrationResult`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResultDto {
    pub a_rows: usize,
    pub a_cols: usize,
    pub a_row_major: Vec<f64>,
    pub k_row_major: Vec<f64>,
    pub diagnostics: CalibrationDiagnostics,
    pub sensitivity: SensitivityReport,
}

impl From<CalibrationResult> for CalibrationResultDto {
    fn from(r: CalibrationResult) -> Self {
        CalibrationResultDto {
            a_rows: r.a.nrows(),
            a_cols: r.a.ncols(),
            a_row_major: r
                .a
                .row_iter()
                .flat_map(|row| row.iter().copied().collect::<Vec<_>>())
                .collect(),
            k_row_major: r
                .k
                .row_iter()
                .flat_map(|row| row.iter().copied().collect::<Vec<_>>())
                .collect(),
            diagnostics: r.diagnostics,
            sensitivity: r.sensitivity,
        }
    }
}

impl TryFrom<CalibrationResultDto> for CalibrationResult {
    type Error = String;

    fn try_from(dto: CalibrationResultDto) -> Result<Self, String> {
        if dto.a_row_major.len() != dto.a_rows * dto.a_cols {
            return Err(format!(
                "A has {} entries, expected {}x{}",
                dto.a_row_major.len(),
                dto.a_rows,
                dto.a_cols
            ));
        }
        if dto.k_row_major.len() != 36 {
            return Err(format!(
                "K has {} entries, expected 36",
                dto.k_row_major.len()
            ));
        }
        let a = DMatrix::from_row_slice(dto.a_rows, dto.a_cols, &dto.a_row_major);
        let k = Matrix6::from_row_slice(&dto.k_row_major);
        Ok(CalibrationResult {
            a,
            k,
            diagnostics: dto.diagnostics,
            sensitivity: dto.sensitivity,
        })
    }
}

fn validate_dataset(
    dataset: &CalibrationDataset,
    g: &SensorGeometry,
) -> Result<(), CalibrationError> {
    let fail = |reason: String| Err(CalibrationError::InvalidDataset { reason });
    let stack_len = 3 * g.sensor_count();
    if dataset.len() < stack_len {
        return fail(format!(
            "need at least {stack_len} records to determine A, got {}",
            dataset.len()
        ));
    }
    for (i, rec) in dataset.records.iter().enumerate() {
        if !rec.mass_g.is_finite() || rec.mass_g <= 0.0 {
            return fail(format!("record {i}: mass {} g is not positive", rec.mass_g));
        }
        if rec.flux_ut.len() != stack_len {
            return fail(format!(
                "record {i}: flux stack has {} entries, expected {stack_len}",
                rec.flux_ut.len()
            ));
        }
        if rec.flux_ut.iter().any(|v| !v.is_finite()) {
            return fail(format!("record {i}: non-finite flux"));
        }
    }
    Ok(())
}

fn unstack(flux: &DVector<f64>) -> Vec<Vector3<f64>> {
    (0..flux.len() / 3)
        .map(|i| Vector3::new(flux[3 * i], flux[3 * i + 1], flux[3 * i + 2]))
        .collect()
}

fn per_axis_rms(errors: &[nalgebra::Vector6<f64>]) -> [f64; 6] {
    let n = errors.len().max(1) as f64;
    std::array::from_fn(|axis| (errors.iter().map(|e| e[axis] * e[axis]).sum::<f64>() / n).sqrt())
}

/// Full calibration pipeline: reconstruct magnet points per record, register
/// the center pose, extract deflection twists, then fit `A` and `K` and
/// assemble diagnostics.
pub fn run_calibration(
    dataset: &CalibrationDataset,
    g: &SensorGeometry,
    map: &PositionMap,
    opts: &CalibrationOptions,
) -> Result<CalibrationResult, CalibrationError> {
    validate_dataset(dataset, g)?;
    let n = dataset.len();

    let mut stacks = Vec::with_capacity(n);
    let mut twists = Vec::with_capacity(n);
    let mut wrenches = Vec::with_capacity(n);
    for (index, rec) in dataset.records.iter().enumerate() {
        let mut flux = rec.flux_ut.clone();
        if let Some(rest) = &opts.rest_flux_ut {
            flux -= rest;
        }
        let sample = FluxSample::new(unstack(&flux), 0.0);
        let points = magnet_positions_in_center(g, map, &sample);
        let corr = Correspondences::new(points, g.magnet_positions.clone())
            .map_err(|source| CalibrationError::Record { index, source })?;
        let pose =
            arun_register(&corr).map_err(|source| CalibrationError::Record { index, source })?;
        let twist =
            deflection_twist(&pose).map_err(|source| CalibrationError::Record { index, source })?;
        stacks.push(flux);
        twists.push(twist.to_vector());
        wrenches.push(rec.ground_truth_wrench().to_vector());
    }

    let is_holdout = |i: usize| match opts.holdout_every {
        Some(k) if k > 0 => (i + 1).is_multiple_of(k),
        _ => false,
    };
    let train: Vec<usize> = (0..n).filter(|&i| !is_holdout(i)).collect();
    let held: Vec<usize> = (0..n).filter(|&i| is_holdout(i)).collect();

    let stack_len = 3 * g.sensor_count();
    let b = DMatrix::from_fn(stack_len, train.len(), |r, c| stacks[train[c]][r]);
    let xi = DMatrix::from_fn(6, train.len(), |r, c| twists[train[c]][r]);
    let w = DMatrix::from_fn(6, train.len(), |r, c| wrenches[train[c]][r]);

    let twist_fit = fit_twist_matrix(&b, &xi);
    let ab = &twist_fit.a * &b;
    let stiffness = fit_stiffness(&w, &ab)?;

    let ka = DMatrix::from_fn(6, stack_len, |i, j| {
        (0..6)
            .map(|l| stiffness.k[(i, l)] * twist_fit.a[(l, j)])
            .sum()
    });
    let residuals = |idx: &[usize]| -> Vec<nalgebra::Vector6<f64>> {
        idx.iter()
            .map(|&i| {
                let predicted = &ka * &stacks[i];
                nalgebra::Vector6::from_fn(|r, _| wrenches[i][r] - predicted[r])
            })
            .collect()
    };
    let training_rms = per_axis_rms(&residuals(&train));
    let holdout_rms = if held.is_empty() {
        None
    } else {
        Some(per_axis_rms(&residuals(&held)))
    };

    let sensitivity = sensitivity_report(&ka);
    Ok(CalibrationResult {
        a: twist_fit.a,
        k: stiffness.k,
        diagnostics: CalibrationDiagnostics {
            records_used: train.len(),
            records_held_out: held.len(),
            training_rms,
            holdout_rms,
            twist_residual: twist_fit.residual,
            cond_b: twist_fit.cond_b,
            cond_ab: stiffness.cond_ab,
            rank_warning_b: twist_fit.rank_deficient,
        },
        sensitivity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{Rotation, MM_PER_M};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gravity_wrench_at_coincident_frames() {
        let w = gravity_wrench(&Transform::identity(), &Vector3::zeros(), 100.0);
        assert_relative_eq!(
            w.to_vector().as_slice(),
            [0.0, 0.0, -0.981, 0.0, 0.0, 0.0].as_slice(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn gravity_wrench_lever_moment_oracle() {
        // lever [L, 0, 0] mm, axis-aligned frames: moment is +y with
        // magnitude m g L (expressed in Nm, so L converts to metres)
        let lever = Vector3::new(80.0, 0.0, 0.0);
        let mass = 150.0;
        let w = gravity_wrench(&Transform::identity(), &lever, mass);
        let f = mass / 1000.0 * GRAVITY_M_PER_S2;
        assert_relative_eq!(w.force, Vector3::new(0.0, 0.0, -f), epsilon = 1e-12);
        let expected = (lever / MM_PER_M).cross(&Vector3::new(0.0, 0.0, -f));
        assert_relative_eq!(w.moment, expected, epsilon = 1e-14);
        assert_relative_eq!(w.moment.y, f * 0.080, epsilon = 1e-14);
        assert_relative_eq!(w.moment.x, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn gravity_wrench_is_linear_in_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let flange = Transform::new(
            Rotation::exp(&Vector3::new(0.4, -0.2, 0.9)),
            Vector3::new(100.0, 50.0, 300.0),
        );
        let lever = Vector3::new(rng.gen_range(-50.0..50.0), 10.0, 60.0);
        let w50 = gravity_wrench(&flange, &lever, 50.0);
        let w200 = gravity_wrench(&flange, &lever, 200.0);
        assert_relative_eq!(w200.to_vector(), 4.0 * w50.to_vector(), epsilon = 1e-12);
    }

    #[test]
    fn gravity_wrench_rotated_flange() {
        // flange pitched 90 degrees about y: world -z maps to sensor -x... check
        // against the direct formula R^T f.
        let rot = Rotation::exp(&Vector3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0));
        let w = gravity_wrench(
            &Transform::new(rot, Vector3::zeros()),
            &Vector3::zeros(),
            1000.0,
        );
        let f_world = Vector3::new(0.0, 0.0, -GRAVITY_M_PER_S2);
        assert_relative_eq!(w.force, rot.inverse() * f_world, epsilon = 1e-12);
        assert_relative_eq!(w.force.x, GRAVITY_M_PER_S2, epsilon = 1e-12);
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
    }

    #[test]
    fn twist_fit_recovers_exact_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a0 = random_matrix(&mut rng, 6, 24, 1e-3);
        let b = random_matrix(&mut rng, 24, 40, 50.0);
        let xi = &a0 * &b;
        let fit = fit_twist_matrix(&b, &xi);
        assert!((fit.a - &a0).norm() / a0.norm() < 1e-8);
        assert!(!fit.rank_deficient);
    }

    #[test]
    fn duplicated_column_does_not_change_the_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a0 = random_matrix(&mut rng, 6, 24, 1e-3);
        let b = random_matrix(&mut rng, 24, 30, 50.0);
        let xi = &a0 * &b;
        let fit_plain = fit_twist_matrix(&b, &xi);

        let mut b_dup = b.clone().insert_column(30, 0.0);
        let mut xi_dup = xi.clone().insert_column(30, 0.0);
        b_dup.set_column(30, &b.column(7));
        xi_dup.set_column(30, &xi.column(7));
        let fit_dup = fit_twist_matrix(&b_dup, &xi_dup);

        assert!((&fit_plain.a - &fit_dup.a).norm() < 1e-9 * fit_plain.a.norm().max(1.0));
        assert!((fit_plain.residual - fit_dup.residual).abs() < 1e-9);
    }

    #[test]
    fn zero_twists_give_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let b = random_matrix(&mut rng, 24, 30, 50.0);
        let fit = fit_twist_matrix(&b, &DMatrix::zeros(6, 30));
        assert_eq!(fit.a.norm(), 0.0);
    }

    #[test]
    fn stiffness_fit_recovers_block_spd_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        // SPD-ish block stiffness
        let mut k0 = Matrix6::identity() * 8.0;
        for i in 3..6 {
            k0[(i, i)] = 2.0;
        }
        k0[(0, 1)] = 0.4;
        k0[(1, 0)] = 0.4;
        k0[(2, 4)] = 0.05;
        let a = random_matrix(&mut rng, 6, 24, 1e-3);
        let b = random_matrix(&mut rng, 24, 60, 50.0);
        let ab = &a * &b;
        let k0_dyn = DMatrix::from_fn(6, 6, |i, j| k0[(i, j)]);
        let w = &k0_dyn * &ab;
        let fit = fit_stiffness(&w, &ab).unwrap();
        assert!((fit.k - k0).norm() / k0.norm() < 1e-8);
    }

    #[test]
    fn six_independent_columns_interpolate_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let ab = random_matrix(&mut rng, 6, 6, 1.0);
        let w = random_matrix(&mut rng, 6, 6, 5.0);
        let fit = fit_stiffness(&w, &ab).unwrap();
        assert!(fit.residual < 1e-10 * w.norm());
    }

    #[test]
    fn rank_deficient_twists_are_fatal() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut ab = random_matrix(&mut rng, 6, 30, 1.0);
        // collapse to rank 2
        for r in 2..6 {
            let row0 = ab.row(0).into_owned();
            ab.set_row(r, &row0);
        }
        let w = random_matrix(&mut rng, 6, 30, 1.0);
        assert!(matches!(
            fit_stiffness(&w, &ab),
            Err(CalibrationError::RankDeficient { .. })
        ));
    }

    #[test]
    fn result_round_trips_through_json() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let result = CalibrationResult {
            a: random_matrix(&mut rng, 6, 24, 1e-3),
            k: Matrix6::from_fn(|_, _| rng.gen_range(-10.0..10.0)),
            diagnostics: CalibrationDiagnostics {
                records_used: 150,
                records_held_out: 43,
                training_rms: [1e-3; 6],
                holdout_rms: Some([2e-3; 6]),
                twist_residual: 1e-6,
                cond_b: 1e4,
                cond_ab: 1e2,
                rank_warning_b: false,
            },
            sensitivity: crate::sensitivity::sensitivity_report(&random_matrix(
                &mut rng, 6, 24, 1e-3,
            )),
        };
        let json = serde_json::to_string(&result).unwrap();
        let back: CalibrationResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back, result);
    }
}
