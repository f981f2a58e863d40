//! Deterministic synthetic worlds and pose sets for desk-scale experiments.
//!
//! Two generators feed the pipeline:
//!
//! * [`LinearWorld`] — flux is exactly linear in the applied wrench
//!   (first-order flux response x linear elasticity, zero rest flux). The
//!   calibration pipeline is exact on this world, which makes it the oracle
//!   for closed-loop equivalence tests.
//! * [`DipoleWorld`] — flux comes from the point-dipole oracle at the
//!   rigidly displaced sensor frames; the linear pipeline only approximates
//!   it, as on the physical device.
//!
//! Pose sets mimic the robot-held calibration routine: a deterministic grid
//! of tilts and rolls with hanging masses on a cycle of lever arms, padded
//! with seeded random poses up to the session size.

use crate::calibration::{gravity_wrench, CalibrationDataset, CalibrationRecord};
use crate::geometry::{build_geometry, GeometryConfig, SensorGeometry};
use crate::magnetics::{quantize, synthesize_sample, ChipModel, DipoleSource, PositionMap};
use crate::se3::{self, Rotation, Transform, Twist, Wrench};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Number of poses in a calibration session.
pub const CALIBRATION_POSE_COUNT: usize = 193;
/// Number of poses in a validation session.
pub const VALIDATION_POSE_COUNT: usize = 60;

/// Ground-truth stiffness used by both synthetic worlds: N/mm force blocks,
/// Nm/rad torque blocks, with mild cross-coupling.
pub fn default_stiffness() -> Matrix6<f64> {
    Matrix6::new(
        8.0, 0.3, 0.0, 0.0, 0.02, 0.0, //
        0.3, 8.0, 0.0, -0.02, 0.0, 0.0, //
        0.0, 0.0, 9.0, 0.0, 0.0, 0.01, //
        0.0, -0.004, 0.0, 2.0, 0.03, 0.0, //
        0.004, 0.0, 0.0, 0.03, 2.0, 0.0, //
        0.0, 0.0, 0.002, 0.0, 0.0, 2.2,
    )
}

/// First-order response of the stacked flux to a center-piece twist.
///
/// A twist `[v; w]` moves magnet `i` by `-(v + w x p_mi)` in the sensor's
/// world-aligned view, which the sensor sees through its mounting rotation
/// and the inverse position map: block `i` is `-M^-1 R_i^T [I | -hat(p_mi)]`.
pub fn flux_twist_jacobian(g: &SensorGeometry, map: &PositionMap) -> DMatrix<f64> {
    let m_inv = map
        .slope_matrix()
        .try_inverse()
        .expect("position map slopes are nonzero");
    let mut j = DMatrix::zeros(3 * g.sensor_count(), 6);
    for (i, (frame, magnet)) in g.sensor_frames.iter().zip(&g.magnet_positions).enumerate() {
        let rt = frame.rotation.inverse().matrix().to_owned();
        let lin: Matrix3<f64> = -m_inv * rt;
        let ang: Matrix3<f64> = m_inv * rt * se3::hat(magnet);
        for r in 0..3 {
            for c in 0..3 {
                j[(3 * i + r, c)] = lin[(r, c)];
                j[(3 * i + r, 3 + c)] = ang[(r, c)];
            }
        }
    }
    j
}

/// A world where flux is exactly linear in the applied wrench.
#[derive(Debug, Clone)]
pub struct LinearWorld {
    pub geometry: SensorGeometry,
    pub map: PositionMap,
    pub stiffness: Matrix6<f64>,
    compliance: Matrix6<f64>,
    flux_jacobian: DMatrix<f64>,
}

impl LinearWorld {
    pub fn new(geometry: SensorGeometry, map: PositionMap, stiffness: Matrix6<f64>) -> Self {
        let compliance = stiffness
            .try_inverse()
            .expect("ground-truth stiffness must be invertible");
        let flux_jacobian = flux_twist_jacobian(&geometry, &map);
        LinearWorld {
            geometry,
            map,
            stiffness,
            compliance,
            flux_jacobian,
        }
    }

    /// Default geometry, a dipole-scale position map linearized at the magnet
    /// offset (zero rest flux), and the default stiffness.
    pub fn with_defaults() -> Self {
        let geometry = build_geometry(&GeometryConfig::default()).expect("default config");
        let moment = DipoleSource::default_magnet(Transform::identity()).moment;
        let map = PositionMap::from_dipole_linearization(moment, geometry.config.magnet_offset_mm);
        LinearWorld::new(geometry, map, default_stiffness())
    }

    /// Deflection the elastomer takes under a wrench: `xi = K^-1 w`.
    pub fn twist_for(&self, w: &Wrench) -> Twist {
        Twist::from_vector(&(self.compliance * w.to_vector()))
    }

    /// Noise-free flux stack for an applied wrench.
    pub fn clean_flux(&self, w: &Wrench) -> DVector<f64> {
        &self.flux_jacobian * self.twist_for(w).to_vector()
    }
}

/// A world where flux comes from the dipole oracle at rigidly moved frames.
#[derive(Debug, Clone)]
pub struct DipoleWorld {
    pub geometry: SensorGeometry,
    pub sources: Vec<DipoleSource>,
    pub stiffness: Matrix6<f64>,
    compliance: Matrix6<f64>,
}

impl DipoleWorld {
    pub fn new(geometry: SensorGeometry, stiffness: Matrix6<f64>) -> Self {
        let sources = DipoleSource::ring_from_geometry(&geometry);
        let compliance = stiffness
            .try_inverse()
            .expect("ground-truth stiffness must be invertible");
        DipoleWorld {
            geometry,
            sources,
            stiffness,
            compliance,
        }
    }

    pub fn with_defaults() -> Self {
        let geometry = build_geometry(&GeometryConfig::default()).expect("default config");
        DipoleWorld::new(geometry, default_stiffness())
    }

    pub fn twist_for(&self, w: &Wrench) -> Twist {
        Twist::from_vector(&(self.compliance * w.to_vector()))
    }

    /// Rest flux stack (no load, no noise, no quantization).
    pub fn rest_flux(&self) -> DVector<f64> {
        synthesize_sample(
            &self.geometry,
            &Transform::identity(),
            &self.sources,
            None,
            0.0,
            0,
            0.0,
        )
        .expect("rest configuration is non-singular")
        .stacked()
    }
}

/// One robot pose with its hanging calibration mass.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadCase {
    /// Flange pose in the robot world frame.
    pub flange: Transform,
    pub mass_g: f64,
    /// Mass center in the flange frame, mm.
    pub lever_mm: Vector3<f64>,
}

impl LoadCase {
    pub fn wrench(&self) -> Wrench {
        gravity_wrench(&self.flange, &self.lever_mm, self.mass_g)
    }
}

/// Lever-arm attachments cycled across records. The transverse entries load
/// the axial torque axis, which a single on-axis rod never excites.
pub const LEVER_CYCLE_MM: [[f64; 3]; 4] = [
    [0.0, 0.0, 60.0],
    [25.0, 0.0, 60.0],
    [0.0, 25.0, 45.0],
    [-20.0, 15.0, 50.0],
];

fn rot_z(angle: f64) -> Rotation {
    Rotation::exp(&Vector3::new(0.0, 0.0, angle))
}

fn rot_y(angle: f64) -> Rotation {
    Rotation::exp(&Vector3::new(0.0, angle, 0.0))
}

fn random_orientation(rng: &mut ChaCha8Rng, max_angle: f64) -> Rotation {
    let axis = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    )
    .normalize();
    Rotation::exp(&(axis * rng.gen_range(0.0..max_angle)))
}

fn cases_from_orientations(
    orientations: Vec<Rotation>,
    masses: &[f64],
    rng: &mut ChaCha8Rng,
    total: usize,
) -> Vec<LoadCase> {
    let mut cases = Vec::with_capacity(total);
    for rot in &orientations {
        for &mass_g in masses {
            let lever = LEVER_CYCLE_MM[cases.len() % LEVER_CYCLE_MM.len()];
            cases.push(LoadCase {
                flange: Transform::new(
                    *rot,
                    Vector3::new(
                        rng.gen_range(200.0..400.0),
                        rng.gen_range(-100.0..100.0),
                        rng.gen_range(250.0..350.0),
                    ),
                ),
                mass_g,
                lever_mm: Vector3::from(lever),
            });
        }
    }
    while cases.len() < total {
        let rot = random_orientation(rng, 45f64.to_radians());
        let mass_g = masses[rng.gen_range(0..masses.len())];
        let lever = LEVER_CYCLE_MM[cases.len() % LEVER_CYCLE_MM.len()];
        cases.push(LoadCase {
            flange: Transform::new(
                rot,
                Vector3::new(
                    rng.gen_range(200.0..400.0),
                    rng.gen_range(-100.0..100.0),
                    rng.gen_range(250.0..350.0),
                ),
            ),
            mass_g,
            lever_mm: Vector3::from(lever),
        });
    }
    cases.truncate(total);
    cases
}

/// The 193-pose calibration session with 50 g and 200 g masses: two cone
/// angles x sixteen azimuths, eight rolls at the horizontal pose, the rest
/// pose, and seeded random padding.
pub fn calibration_poses(seed: u64) -> Vec<LoadCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut orientations = vec![Rotation::identity()];
    for cone_deg in [30.0f64, 60.0] {
        for k in 0..16 {
            let az = 2.0 * std::f64::consts::PI * k as f64 / 16.0;
            orientations.push(rot_z(az) * rot_y(cone_deg.to_radians()));
        }
    }
    for k in 0..8 {
        let roll = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
        orientations.push(rot_y(std::f64::consts::FRAC_PI_2) * rot_z(roll));
    }
    cases_from_orientations(
        orientations,
        &[50.0, 200.0],
        &mut rng,
        CALIBRATION_POSE_COUNT,
    )
}

/// A distinct validation session at a single mass (typically 100 g).
pub fn validation_poses(seed: u64, mass_g: f64) -> Vec<LoadCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut orientations = Vec::new();
    for cone_deg in [20.0f64, 45.0, 75.0] {
        for k in 0..12 {
            let az = 2.0 * std::f64::consts::PI * k as f64 / 12.0;
            orientations.push(rot_z(az) * rot_y(cone_deg.to_radians()));
        }
    }
    for k in 0..8 {
        let roll = std::f64::consts::FRAC_PI_8 + 2.0 * std::f64::consts::PI * k as f64 / 8.0;
        orientations.push(rot_y(std::f64::consts::FRAC_PI_2) * rot_z(roll));
    }
    cases_from_orientations(orientations, &[mass_g], &mut rng, VALIDATION_POSE_COUNT)
}

/// Measurement-chain corruption applied to synthetic flux.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    /// Per-axis Gaussian noise before quantization, µT.
    pub sigma_ut: f64,
    /// Digitize each raw sample at the chip's LSB resolutions.
    pub quantize: bool,
    /// Samples averaged per record (the chip streams at 100 Hz; sessions
    /// average a block per pose).
    pub window: usize,
}

impl NoiseSpec {
    /// Noise-free, unquantized, single-sample records.
    pub fn clean() -> Self {
        NoiseSpec {
            sigma_ut: 0.0,
            quantize: false,
            window: 1,
        }
    }

    /// The realistic chain: 1 µT noise, LSB quantization, 100-sample means.
    pub fn realistic() -> Self {
        NoiseSpec {
            sigma_ut: 1.0,
            quantize: true,
            window: 100,
        }
    }
}

fn averaged_stack<F>(
    noise: &NoiseSpec,
    chip: &ChipModel,
    rng: &mut ChaCha8Rng,
    clean: F,
) -> DVector<f64>
where
    F: Fn() -> DVector<f64>,
{
    let base = clean();
    let n_axes = base.len();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut acc = DVector::zeros(n_axes);
    for _ in 0..noise.window.max(1) {
        let mut sample = base.clone();
        if noise.sigma_ut > 0.0 {
            for v in sample.iter_mut() {
                *v += noise.sigma_ut * normal.sample(rng);
            }
        }
        if noise.quantize {
            for s in 0..n_axes / 3 {
                let q = quantize(
                    &Vector3::new(sample[3 * s], sample[3 * s + 1], sample[3 * s + 2]),
                    chip,
                );
                sample[3 * s] = q.x;
                sample[3 * s + 1] = q.y;
                sample[3 * s + 2] = q.z;
            }
        }
        acc += sample;
    }
    acc / noise.window.max(1) as f64
}

/// Synthesize a calibration dataset from the exactly-linear world.
pub fn linear_dataset(
    world: &LinearWorld,
    cases: &[LoadCase],
    noise: &NoiseSpec,
    seed: u64,
) -> CalibrationDataset {
    let chip = ChipModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = cases
        .iter()
        .map(|case| {
            let clean = world.clean_flux(&case.wrench());
            let flux = averaged_stack(noise, &chip, &mut rng, || clean.clone());
            CalibrationRecord {
                flange: case.flange,
                mass_g: case.mass_g,
                lever_mm: case.lever_mm,
                flux_ut: flux,
            }
        })
        .collect();
    CalibrationDataset { records }
}

/// Synthesize a calibration dataset from the dipole world: the center piece
/// deflects by Hooke's law and each sensor reads its magnet's dipole field.
pub fn dipole_dataset(
    world: &DipoleWorld,
    cases: &[LoadCase],
    noise: &NoiseSpec,
    seed: u64,
) -> CalibrationDataset {
    let chip = ChipModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = cases
        .iter()
        .map(|case| {
            let pose = se3::exp(&world.twist_for(&case.wrench()));
            let clean =
                synthesize_sample(&world.geometry, &pose, &world.sources, None, 0.0, 0, 0.0)
                    .expect("synthetic deflections stay far from the magnets")
                    .stacked();
            let flux = averaged_stack(noise, &chip, &mut rng, || clean.clone());
            CalibrationRecord {
                flange: case.flange,
                mass_g: case.mass_g,
                lever_mm: case.lever_mm,
                flux_ut: flux,
            }
        })
        .collect();
    CalibrationDataset { records }
}

/// Per-axis RMS error between estimated and ground-truth wrenches.
pub fn wrench_rms(errors: &[Vector6<f64>]) -> [f64; 6] {
    let n = errors.len().max(1) as f64;
    std::array::from_fn(|axis| (errors.iter().map(|e| e[axis] * e[axis]).sum::<f64>() / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pose_counts_and_masses() {
        let cal = calibration_poses(7);
        assert_eq!(cal.len(), CALIBRATION_POSE_COUNT);
        assert!(cal.iter().all(|c| c.mass_g == 50.0 || c.mass_g == 200.0));
        assert!(cal.iter().any(|c| c.mass_g == 50.0));
        assert!(cal.iter().any(|c| c.mass_g == 200.0));

        let val = validation_poses(8, 100.0);
        assert_eq!(val.len(), VALIDATION_POSE_COUNT);
        assert!(val.iter().all(|c| c.mass_g == 100.0));
    }

    #[test]
    fn pose_sets_are_deterministic() {
        assert_eq!(calibration_poses(42), calibration_poses(42));
        assert_ne!(calibration_poses(42), calibration_poses(43));
    }

    #[test]
    fn calibration_wrenches_span_six_axes() {
        let cases = calibration_poses(11);
        let w = DMatrix::from_fn(6, cases.len(), |r, c| cases[c].wrench().to_vector()[r]);
        let svd = w.svd(false, false);
        let sigma_min = svd.singular_values.min();
        let sigma_max = svd.singular_values.max();
        assert!(
            sigma_min > 1e-4 * sigma_max,
            "wrench set is rank-deficient: {sigma_min} vs {sigma_max}"
        );
    }

    #[test]
    fn linear_world_rest_flux_is_zero() {
        let world = LinearWorld::with_defaults();
        let zero = world.clean_flux(&Wrench::zero());
        assert_eq!(zero.norm(), 0.0);
    }

    #[test]
    fn jacobian_matches_exact_flux_response() {
        // Finite-difference the exact rigid reconstruction-inverse flux and
        // compare against the first-order model.
        let world = LinearWorld::with_defaults();
        let g = &world.geometry;
        let m_inv = world.map.slope_matrix().try_inverse().unwrap();
        let exact_flux = |xi: &Twist| -> DVector<f64> {
            let pose = se3::exp(xi);
            let mut out = DVector::zeros(3 * g.sensor_count());
            for (i, (frame, magnet)) in g.sensor_frames.iter().zip(&g.magnet_positions).enumerate()
            {
                let moved = pose * *frame;
                let local = moved.inverse().transform_point(magnet);
                let b = m_inv * (local - world.map.offset_vector());
                out[3 * i] = b.x;
                out[3 * i + 1] = b.y;
                out[3 * i + 2] = b.z;
            }
            out
        };
        let j = flux_twist_jacobian(g, &world.map);
        let eps = 1e-6;
        for axis in 0..6 {
            let mut v = Vector6::zeros();
            v[axis] = eps;
            let plus = exact_flux(&Twist::from_vector(&v));
            let minus = exact_flux(&Twist::from_vector(&(-v)));
            let fd = (plus - minus) / (2.0 * eps);
            let analytic = j.column(axis);
            for r in 0..fd.len() {
                assert_relative_eq!(fd[r], analytic[r], epsilon = 1e-4, max_relative = 1e-4);
            }
        }
    }

    #[test]
    fn linear_dataset_is_deterministic() {
        let world = LinearWorld::with_defaults();
        let cases = calibration_poses(3);
        let spec = NoiseSpec::realistic();
        let a = linear_dataset(&world, &cases[..30], &spec, 9);
        let b = linear_dataset(&world, &cases[..30], &spec, 9);
        assert_eq!(a, b);
        let c = linear_dataset(&world, &cases[..30], &spec, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn dipole_world_rest_flux_is_finite_and_large() {
        let world = DipoleWorld::with_defaults();
        let rest = world.rest_flux();
        assert!(rest.iter().all(|v| v.is_finite()));
        // each sensor sits 6 mm from its magnet; the axial component dominates
        assert!(rest.amax() > 500.0);
    }

    #[test]
    fn deflections_stay_small_under_calibration_loads() {
        let world = LinearWorld::with_defaults();
        for case in calibration_poses(1) {
            let xi = world.twist_for(&case.wrench());
            assert!(xi.linear.norm() < 1.0, "translation {:?}", xi.linear);
            assert!(xi.angular.norm() < 0.1, "rotation {:?}", xi.angular);
        }
    }
}
