//! Magnetic forward model and flux handling: a point-dipole oracle for the
//! field each Hall-effect chip sees, the linear flux-to-position map used at
//! runtime, bench-sweep fitting of that map, and chip-level quantization.
//!
//! Units: positions mm, flux density µT, dipole moments A·mm². In these units
//! the dipole prefactor mu0/(4 pi) is exactly 100 µT·mm³ per A·mm².

use crate::geometry::SensorGeometry;
use crate::se3::Transform;
use nalgebra::{DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// mu0 / (4 pi) in µT·mm³ / (A·mm²).
pub const DIPOLE_PREFACTOR: f64 = 100.0;

/// Minimum magnet-to-sensor distance for the dipole model to be meaningful.
pub const MIN_FIELD_DISTANCE_MM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MagneticsError {
    #[error("sensor within {distance:.4} mm of the dipole; field is singular")]
    SingularField { distance: f64 },
    #[error("sweep axis {axis:?} has fewer than 2 distinct commanded positions")]
    DegenerateSweep { axis: Axis },
    #[error("invalid chip model: {reason}")]
    InvalidChip { reason: String },
}

/// One measurement axis of a sensor or sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::X => write!(f, "x"),
            Axis::Y => write!(f, "y"),
            Axis::Z => write!(f, "z"),
        }
    }
}

/// Per-axis linear map from flux density to magnet position: `p = M b + o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionMap {
    /// Diagonal of M, mm per µT.
    pub slopes_mm_per_ut: [f64; 3],
    /// Offset o, mm.
    pub offset_mm: [f64; 3],
}

impl PositionMap {
    pub fn new(slopes_mm_per_ut: [f64; 3], offset_mm: [f64; 3]) -> Self {
        PositionMap {
            slopes_mm_per_ut,
            offset_mm,
        }
    }

    pub fn identity() -> Self {
        PositionMap::new([1.0, 1.0, 1.0], [0.0, 0.0, 0.0])
    }

    /// Local linearization of the dipole field at an on-axis operating gap.
    ///
    /// The transverse field component responds at `3 k m / d^4` µT per mm and
    /// the axial one at `-6 k m / d^4`, so the position-per-flux slopes are
    /// their reciprocals. The offset places zero flux at the rest position
    /// `[0, 0, gap]`, which makes the linearized world read zero at rest.
    pub fn from_dipole_linearization(moment: f64, gap_mm: f64) -> Self {
        let d4 = gap_mm.powi(4);
        let transverse = d4 / (3.0 * DIPOLE_PREFACTOR * moment);
        let axial = -d4 / (6.0 * DIPOLE_PREFACTOR * moment);
        PositionMap::new([transverse, transverse, axial], [0.0, 0.0, gap_mm])
    }

    pub fn slope_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.slopes_mm_per_ut))
    }

    pub fn offset_vector(&self) -> Vector3<f64> {
        Vector3::from(self.offset_mm)
    }
}

/// `p = M b + o`.
pub fn position_from_flux(flux_ut: &Vector3<f64>, map: &PositionMap) -> Vector3<f64> {
    map.slope_matrix() * flux_ut + map.offset_vector()
}

/// MLX90393-style digitization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipModel {
    /// µT per least significant bit, per axis.
    pub resolution_ut_per_lsb: [f64; 3],
    pub sample_period_ms: f64,
    pub min_period_ms: f64,
}

impl Default for ChipModel {
    fn default() -> Self {
        ChipModel {
            resolution_ut_per_lsb: [6.009, 6.009, 9.680],
            sample_period_ms: 10.0,
            min_period_ms: 3.34,
        }
    }
}

impl ChipModel {
    pub fn new(
        resolution_ut_per_lsb: [f64; 3],
        sample_period_ms: f64,
        min_period_ms: f64,
    ) -> Result<Self, MagneticsError> {
        if resolution_ut_per_lsb.iter().any(|&r| r <= 0.0) {
            return Err(MagneticsError::InvalidChip {
                reason: "resolutions must be positive".into(),
            });
        }
        if sample_period_ms < min_period_ms {
            return Err(MagneticsError::InvalidChip {
                reason: format!(
                    "sample period {sample_period_ms} ms below minimum {min_period_ms} ms"
                ),
            });
        }
        Ok(ChipModel {
            resolution_ut_per_lsb,
            sample_period_ms,
            min_period_ms,
        })
    }
}

/// Round each axis to the nearest multiple of its LSB resolution
/// (ties away from zero). Idempotent.
pub fn quantize(flux_ut: &Vector3<f64>, chip: &ChipModel) -> Vector3<f64> {
    Vector3::from_fn(|i, _| {
        let lsb = chip.resolution_ut_per_lsb[i];
        (flux_ut[i] / lsb).round() * lsb
    })
}

/// A point dipole standing in for one magnet.
#[derive(Debug, Clone, PartialEq)]
pub struct DipoleSource {
    /// Moment magnitude in A·mm², directed along the pose's +z.
    pub moment: f64,
    /// Pose of the magnet frame in the world frame.
    pub pose: Transform,
}

impl DipoleSource {
    pub fn new(moment: f64, pose: Transform) -> Self {
        DipoleSource { moment, pose }
    }

    /// Moment of a cylindrical magnet from its remanence and dimensions,
    /// `m = Br * V / mu0`, returned in A·mm².
    pub fn cylinder_moment(remanence_t: f64, diameter_mm: f64, height_mm: f64) -> f64 {
        let volume_mm3 = std::f64::consts::PI * (diameter_mm / 2.0).powi(2) * height_mm;
        // Br[T] * V[m^3] / mu0, converted to A·mm²
        remanence_t * volume_mm3 / (4.0 * std::f64::consts::PI * 1e-4)
    }

    /// The 1/16" x 1/32" N52 cylinder used across the crate's defaults.
    ///
    /// Its surface field is not dipole-predictable; the moment is instead the
    /// far-field equivalent of the cylinder at Br = 1.48 T, about 1850 A·mm².
    pub fn default_magnet(pose: Transform) -> Self {
        DipoleSource::new(Self::cylinder_moment(1.48, 1.5875, 0.79375), pose)
    }

    /// One default magnet per sensor, fixed at the nominal positions with the
    /// sensor-frame orientation (magnetized toward the sensor, local -z side).
    pub fn ring_from_geometry(g: &SensorGeometry) -> Vec<DipoleSource> {
        g.sensor_frames
            .iter()
            .zip(&g.magnet_positions)
            .map(|(frame, p)| DipoleSource::default_magnet(Transform::new(frame.rotation, *p)))
            .collect()
    }
}

/// Flux density at a sensor from a point dipole, expressed in the sensor frame.
pub fn dipole_flux(
    src: &DipoleSource,
    sensor_frame: &Transform,
) -> Result<Vector3<f64>, MagneticsError> {
    let r = sensor_frame.translation - src.pose.translation;
    let dist = r.norm();
    if dist <= MIN_FIELD_DISTANCE_MM {
        return Err(MagneticsError::SingularField { distance: dist });
    }
    let m_world = src.pose.rotation * Vector3::new(0.0, 0.0, src.moment);
    let r_hat = r / dist;
    let b_world = DIPOLE_PREFACTOR * (3.0 * r_hat * m_world.dot(&r_hat) - m_world) / dist.powi(3);
    Ok(sensor_frame.rotation.inverse() * b_world)
}

/// Analytic spatial gradient of the dipole field with respect to the sensor
/// position, in world coordinates (µT per mm).
pub fn dipole_flux_gradient(src: &DipoleSource, sensor_pos: &Vector3<f64>) -> Matrix3<f64> {
    let r = sensor_pos - src.pose.translation;
    let dist = r.norm();
    let m = src.pose.rotation * Vector3::new(0.0, 0.0, src.moment);
    let mr = m.dot(&r);
    let r5 = dist.powi(5);
    let mut grad = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let delta = if i == j { 1.0 } else { 0.0 };
            grad[(i, j)] = 3.0 * DIPOLE_PREFACTOR / r5
                * (delta * mr + r[i] * m[j] + m[i] * r[j] - 5.0 * r[i] * r[j] * mr / (dist * dist));
        }
    }
    grad
}

/// One synchronized reading from all sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxSample {
    /// Per-sensor flux, µT, in sensor-local axes.
    pub fluxes_ut: Vec<Vector3<f64>>,
    pub timestamp_ms: f64,
}

impl FluxSample {
    pub fn new(fluxes_ut: Vec<Vector3<f64>>, timestamp_ms: f64) -> Self {
        FluxSample {
            fluxes_ut,
            timestamp_ms,
        }
    }

    /// Stacked form: sensor 0..n, axes x,y,z within each.
    pub fn stacked(&self) -> DVector<f64> {
        let mut out = DVector::zeros(3 * self.fluxes_ut.len());
        for (i, b) in self.fluxes_ut.iter().enumerate() {
            out[3 * i] = b.x;
            out[3 * i + 1] = b.y;
            out[3 * i + 2] = b.z;
        }
        out
    }
}

/// Simulate one reading: sensors ride the center piece (pose applied to their
/// frames), magnets stay fixed, each sensor sees only its paired magnet.
/// Gaussian noise is added before quantization. Deterministic given `seed`.
pub fn synthesize_sample(
    g: &SensorGeometry,
    center_pose: &Transform,
    sources: &[DipoleSource],
    chip: Option<&ChipModel>,
    noise_sigma_ut: f64,
    seed: u64,
    timestamp_ms: f64,
) -> Result<FluxSample, MagneticsError> {
    assert_eq!(sources.len(), g.sensor_count(), "one source per sensor");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut fluxes = Vec::with_capacity(g.sensor_count());
    for (frame, src) in g.sensor_frames.iter().zip(sources) {
        let moved = *center_pose * *frame;
        let mut b = dipole_flux(src, &moved)?;
        if noise_sigma_ut > 0.0 {
            b += noise_sigma_ut
                * Vector3::new(
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                );
        }
        if let Some(chip) = chip {
            b = quantize(&b, chip);
        }
        fluxes.push(b);
    }
    Ok(FluxSample::new(fluxes, timestamp_ms))
}

/// One bench-sweep measurement: the magnet commanded along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub axis: Axis,
    pub commanded_mm: f64,
    pub flux_ut: Vector3<f64>,
}

/// The commanded grid of the bench sweep: z over [1, 3] mm and x/y over
/// [-1, 1] mm, all in 0.2 mm increments (11 points per axis).
pub fn sweep_grid() -> Vec<(Axis, f64)> {
    let mut grid = Vec::new();
    for i in 0..=10 {
        grid.push((Axis::Z, 1.0 + 0.2 * i as f64));
    }
    for axis in [Axis::X, Axis::Y] {
        for i in 0..=10 {
            grid.push((axis, -1.0 + 0.2 * i as f64));
        }
    }
    grid
}

/// Magnet position for a commanded sweep coordinate.
///
/// The bench fixture holds the magnet in a silicone housing one device-layer
/// thickness (`standoff_mm`) above the chip face, mirroring the assembled
/// sensor. Commanded z adds separation on top of the standoff; x/y sweeps run
/// at the mid-range separation of 2 mm.
pub fn sweep_magnet_position(axis: Axis, commanded_mm: f64, standoff_mm: f64) -> Vector3<f64> {
    match axis {
        Axis::X => Vector3::new(commanded_mm, 0.0, standoff_mm + 2.0),
        Axis::Y => Vector3::new(0.0, commanded_mm, standoff_mm + 2.0),
        Axis::Z => Vector3::new(0.0, 0.0, standoff_mm + commanded_mm),
    }
}

/// Evaluate the dipole oracle over the sweep grid.
pub fn dipole_sweep(moment: f64, standoff_mm: f64) -> Vec<SweepPoint> {
    sweep_grid()
        .into_iter()
        .map(|(axis, commanded_mm)| {
            let pose =
                Transform::from_translation(sweep_magnet_position(axis, commanded_mm, standoff_mm));
            let src = DipoleSource::new(moment, pose);
            let flux = dipole_flux(&src, &Transform::identity())
                .expect("sweep positions are far from the sensor");
            SweepPoint {
                axis,
                commanded_mm,
                flux_ut: flux,
            }
        })
        .collect()
}

/// Least-squares fit of the per-axis position map from sweep data, with the
/// coefficient of determination of each axis's regression.
pub fn fit_position_map(sweep: &[SweepPoint]) -> Result<(PositionMap, [f64; 3]), MagneticsError> {
    let mut slopes = [0.0; 3];
    let mut offsets = [0.0; 3];
    let mut r2 = [0.0; 3];
    for axis in Axis::ALL {
        let i = axis.index();
        let pairs: Vec<(f64, f64)> = sweep
            .iter()
            .filter(|p| p.axis == axis)
            .map(|p| (p.flux_ut[i], p.commanded_mm))
            .collect();
        let distinct = {
            let mut c: Vec<f64> = pairs.iter().map(|&(_, p)| p).collect();
            c.sort_by(f64::total_cmp);
            c.dedup();
            c.len()
        };
        if distinct < 2 {
            return Err(MagneticsError::DegenerateSweep { axis });
        }
        let n = pairs.len() as f64;
        let mean_b = pairs.iter().map(|&(b, _)| b).sum::<f64>() / n;
        let mean_p = pairs.iter().map(|&(_, p)| p).sum::<f64>() / n;
        let mut cov = 0.0;
        let mut var_b = 0.0;
        let mut var_p = 0.0;
        for &(b, p) in &pairs {
            cov += (b - mean_b) * (p - mean_p);
            var_b += (b - mean_b) * (b - mean_b);
            var_p += (p - mean_p) * (p - mean_p);
        }
        let slope = cov / var_b;
        slopes[i] = slope;
        offsets[i] = mean_p - slope * mean_b;
        let ss_res: f64 = pairs
            .iter()
            .map(|&(b, p)| {
                let pred = slope * b + offsets[i];
                (p - pred) * (p - pred)
            })
            .sum();
        r2[i] = 1.0 - ss_res / var_p;
    }
    Ok((PositionMap::new(slopes, offsets), r2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_geometry, GeometryConfig};
    use crate::se3::{self, Twist};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    use crate::reference::BENCH_MAP;

    #[test]
    fn on_axis_flux_matches_closed_form() {
        let m = 1000.0;
        let d = 6.0;
        let src = DipoleSource::new(m, Transform::identity());
        let sensor = Transform::from_translation(Vector3::new(0.0, 0.0, d));
        let b = dipole_flux(&src, &sensor).unwrap();
        assert_relative_eq!(b.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(b.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(b.z, 2.0 * DIPOLE_PREFACTOR * m / d.powi(3), epsilon = 1e-9);
    }

    #[test]
    fn doubling_distance_divides_axial_flux_by_eight() {
        let src = DipoleSource::new(500.0, Transform::identity());
        let near = dipole_flux(
            &src,
            &Transform::from_translation(Vector3::new(0.0, 0.0, 4.0)),
        )
        .unwrap();
        let far = dipole_flux(
            &src,
            &Transform::from_translation(Vector3::new(0.0, 0.0, 8.0)),
        )
        .unwrap();
        assert_relative_eq!(near.z / far.z, 8.0, epsilon = 1e-12);
    }

    #[test]
    fn equatorial_magnitude_is_half_axial() {
        let d = 5.0;
        let src = DipoleSource::new(700.0, Transform::identity());
        let axial = dipole_flux(
            &src,
            &Transform::from_translation(Vector3::new(0.0, 0.0, d)),
        )
        .unwrap();
        let equatorial = dipole_flux(
            &src,
            &Transform::from_translation(Vector3::new(d, 0.0, 0.0)),
        )
        .unwrap();
        assert_relative_eq!(equatorial.norm(), axial.norm() / 2.0, epsilon = 1e-9);
        // the equatorial field opposes the moment
        assert!(equatorial.z < 0.0);
    }

    #[test]
    fn singular_field_below_minimum_distance() {
        let src = DipoleSource::new(100.0, Transform::identity());
        let sensor = Transform::from_translation(Vector3::new(0.05, 0.0, 0.0));
        assert!(matches!(
            dipole_flux(&src, &sensor),
            Err(MagneticsError::SingularField { .. })
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let src = DipoleSource::new(
            DipoleSource::cylinder_moment(1.48, 1.5875, 0.79375),
            Transform::identity(),
        );
        let pos = Vector3::new(1.5, -2.0, 6.0);
        let grad = dipole_flux_gradient(&src, &pos);
        let h = 1e-4;
        for j in 0..3 {
            let mut dp = Vector3::zeros();
            dp[j] = h;
            let plus = dipole_flux(&src, &Transform::from_translation(pos + dp)).unwrap();
            let minus = dipole_flux(&src, &Transform::from_translation(pos - dp)).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            for i in 0..3 {
                assert_relative_eq!(grad[(i, j)], fd[i], max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn gradient_is_traceless() {
        let src = DipoleSource::default_magnet(Transform::identity());
        let grad = dipole_flux_gradient(&src, &Vector3::new(2.0, 1.0, 5.0));
        assert_relative_eq!(grad.trace(), 0.0, epsilon = 1e-9 * grad.norm());
    }

    #[test]
    fn bench_map_golden_values() {
        // zero flux lands on the offset
        let p = position_from_flux(&Vector3::zeros(), &BENCH_MAP);
        assert_eq!(p, Vector3::new(-22.0, -18.0, 8.0));
        // unit x flux with zero offset picks up the x slope
        let no_offset = PositionMap::new(BENCH_MAP.slopes_mm_per_ut, [0.0; 3]);
        let p = position_from_flux(&Vector3::x(), &no_offset);
        assert_eq!(p, Vector3::new(0.4423, 0.0, 0.0));
    }

    #[test]
    fn identity_map_passes_flux_through() {
        let b = Vector3::new(3.5, -2.25, 0.75);
        assert_eq!(position_from_flux(&b, &PositionMap::identity()), b);
    }

    #[test]
    fn quantize_keeps_exact_lsb_multiples() {
        let chip = ChipModel::default();
        let b = Vector3::new(6.009, 6.009, 9.680);
        assert_relative_eq!(quantize(&b, &chip), b, epsilon = 1e-12);
    }

    #[test]
    fn quantize_rounds_half_lsb_down_to_zero() {
        // 3.0 / 6.009 = 0.4993 rounds to 0, not 1.
        let chip = ChipModel::default();
        let q = quantize(&Vector3::new(3.0, 0.0, 0.0), &chip);
        assert_eq!(q, Vector3::zeros());
    }

    #[test]
    fn chip_model_validation() {
        assert!(ChipModel::new([6.0, 6.0, 0.0], 10.0, 3.34).is_err());
        assert!(ChipModel::new([6.0, 6.0, 9.7], 2.0, 3.34).is_err());
        assert!(ChipModel::new([6.0, 6.0, 9.7], 10.0, 3.34).is_ok());
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent(
            bx in -5000.0..5000.0f64,
            by in -5000.0..5000.0f64,
            bz in -5000.0..5000.0f64,
        ) {
            let chip = ChipModel::default();
            let once = quantize(&Vector3::new(bx, by, bz), &chip);
            let twice = quantize(&once, &chip);
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn fit_recovers_exact_linear_map() {
        let truth = PositionMap::new([2.0e-3, -1.5e-3, 4.0e-4], [0.5, -0.25, 6.0]);
        // invert p = m b + o to produce flux for commanded positions
        let sweep: Vec<SweepPoint> = sweep_grid()
            .into_iter()
            .map(|(axis, c)| {
                let i = axis.index();
                let mut flux = Vector3::zeros();
                flux[i] = (c - truth.offset_mm[i]) / truth.slopes_mm_per_ut[i];
                SweepPoint {
                    axis,
                    commanded_mm: c,
                    flux_ut: flux,
                }
            })
            .collect();
        let (fitted, r2) = fit_position_map(&sweep).unwrap();
        for (i, r2_axis) in r2.iter().enumerate() {
            assert_relative_eq!(
                fitted.slopes_mm_per_ut[i],
                truth.slopes_mm_per_ut[i],
                max_relative = 1e-10
            );
            assert_relative_eq!(
                fitted.offset_mm[i],
                truth.offset_mm[i],
                max_relative = 1e-10
            );
            assert!(*r2_axis > 1.0 - 1e-12);
        }
    }

    #[test]
    fn dipole_sweep_is_nearly_linear_at_device_standoff() {
        let moment = DipoleSource::cylinder_moment(1.48, 1.5875, 0.79375);
        let sweep = dipole_sweep(moment, GeometryConfig::default().magnet_offset_mm);
        let (map, r2) = fit_position_map(&sweep).unwrap();
        for (axis, r2_axis) in Axis::ALL.iter().zip(r2) {
            assert!(r2_axis >= 0.98, "axis {axis} R^2 = {r2_axis}");
        }
        // flux magnitude decreases with distance, so the z slope is negative
        assert!(map.slopes_mm_per_ut[2] < 0.0);
        assert!(map.slopes_mm_per_ut[0] > 0.0);
    }

    #[test]
    fn noisy_sweep_slopes_within_five_percent() {
        let moment = DipoleSource::cylinder_moment(1.48, 1.5875, 0.79375);
        let clean = dipole_sweep(moment, 6.0);
        let (map0, _) = fit_position_map(&clean).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let normal = Normal::new(0.0, 6.009).unwrap(); // one x/y LSB of noise
        let noisy: Vec<SweepPoint> = clean
            .iter()
            .map(|p| SweepPoint {
                axis: p.axis,
                commanded_mm: p.commanded_mm,
                flux_ut: p.flux_ut
                    + Vector3::new(
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                    ),
            })
            .collect();
        let (map1, _) = fit_position_map(&noisy).unwrap();
        for i in 0..3 {
            let rel = (map1.slopes_mm_per_ut[i] - map0.slopes_mm_per_ut[i]).abs()
                / map0.slopes_mm_per_ut[i].abs();
            assert!(rel < 0.05, "axis {i} slope moved {:.2}%", rel * 100.0);
        }
    }

    #[test]
    fn degenerate_sweep_is_rejected() {
        let sweep = vec![
            SweepPoint {
                axis: Axis::X,
                commanded_mm: 1.0,
                flux_ut: Vector3::zeros(),
            };
            5
        ];
        assert!(matches!(
            fit_position_map(&sweep),
            Err(MagneticsError::DegenerateSweep { .. })
        ));
    }

    fn default_rig() -> (SensorGeometry, Vec<DipoleSource>) {
        let g = build_geometry(&GeometryConfig::default()).unwrap();
        let sources = DipoleSource::ring_from_geometry(&g);
        (g, sources)
    }

    #[test]
    fn synthesis_is_deterministic() {
        let (g, sources) = default_rig();
        let a = synthesize_sample(&g, &Transform::identity(), &sources, None, 0.0, 1, 0.0).unwrap();
        let b = synthesize_sample(&g, &Transform::identity(), &sources, None, 0.0, 1, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn translation_moves_every_sensor_and_reverses_cleanly() {
        let (g, sources) = default_rig();
        let rest =
            synthesize_sample(&g, &Transform::identity(), &sources, None, 0.0, 0, 0.0).unwrap();
        let shifted = se3::exp(&Twist::new(Vector3::new(0.0, 0.0, 0.5), Vector3::zeros()));
        let moved = synthesize_sample(&g, &shifted, &sources, None, 0.0, 0, 0.0).unwrap();
        for (a, b) in rest.fluxes_ut.iter().zip(&moved.fluxes_ut) {
            assert!((a - b).norm() > 1e-6, "sensor flux did not respond");
        }
        let back = shifted * shifted.inverse();
        let restored = synthesize_sample(&g, &back, &sources, None, 0.0, 0, 0.0).unwrap();
        for (a, b) in rest.fluxes_ut.iter().zip(&restored.fluxes_ut) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn noisy_means_agree_across_seeds() {
        let (g, sources) = default_rig();
        let sigma = 1.0;
        let mean_for = |base_seed: u64| {
            let mut acc = DVector::zeros(24);
            for t in 0..100 {
                let s = synthesize_sample(
                    &g,
                    &Transform::identity(),
                    &sources,
                    None,
                    sigma,
                    base_seed + t,
                    t as f64 * 10.0,
                )
                .unwrap();
                acc += s.stacked();
            }
            acc / 100.0
        };
        let m1 = mean_for(1_000);
        let m2 = mean_for(2_000);
        let diff = m1 - m2;
        // standard error of a mean over 100 draws, doubled for the difference
        let bound = 3.0 * sigma / 10.0 * (2.0f64).sqrt();
        for i in 0..24 {
            assert!(diff[i].abs() < bound, "component {i}: {}", diff[i]);
        }
        let s1 =
            synthesize_sample(&g, &Transform::identity(), &sources, None, sigma, 1, 0.0).unwrap();
        let s2 =
            synthesize_sample(&g, &Transform::identity(), &sources, None, sigma, 2, 0.0).unwrap();
        assert_ne!(s1, s2);
    }

    #[test]
    fn stacking_order_is_sensor_major() {
        let sample = FluxSample::new(
            vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(4.0, 5.0, 6.0)],
            0.0,
        );
        let stacked = sample.stacked();
        assert_eq!(stacked.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn inverse_map_round_trips_positions() {
        let map = PositionMap::new([2.0, -0.5, 0.25], [1.0, 2.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            // invert: b = M^-1 (p - o)
            let b = map.slope_matrix().try_inverse().unwrap() * (p - map.offset_vector());
            assert_relative_eq!(position_from_flux(&b, &map), p, epsilon = 1e-12);
        }
    }
}
