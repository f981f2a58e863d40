//! Center-piece pose estimation: reconstruct per-magnet positions in the
//! center frame from flux readings, register them against the nominal magnet
//! positions with the SVD method of Arun et al., and reduce the pose to a
//! deflection twist.

use crate::geometry::SensorGeometry;
use crate::magnetics::{position_from_flux, FluxSample, PositionMap};
use crate::se3::{self, LieError, Rotation, Transform, Twist};
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("point sets have {source_len} source and {target_len} target points")]
    LengthMismatch {
        source_len: usize,
        target_len: usize,
    },
    #[error("need at least 3 correspondences, got {count}")]
    TooFewPoints { count: usize },
    #[error("cross-covariance is rank-deficient (singular values {sigma:?})")]
    DegenerateConfiguration { sigma: [f64; 3] },
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// Paired point sets: `source` in the center frame, `target` in the base frame.
#[derive(Debug, Clone)]
pub struct Correspondences {
    pub source: Vec<Vector3<f64>>,
    pub target: Vec<Vector3<f64>>,
}

impl Correspondences {
    pub fn new(
        source: Vec<Vector3<f64>>,
        target: Vec<Vector3<f64>>,
    ) -> Result<Self, RegistrationError> {
        if source.len() != target.len() {
            return Err(RegistrationError::LengthMismatch {
                source_len: source.len(),
                target_len: target.len(),
            });
        }
        if source.len() < 3 {
            return Err(RegistrationError::TooFewPoints {
                count: source.len(),
            });
        }
        Ok(Correspondences { source, target })
    }
}

/// Reconstruct each magnet's position in the center frame by composing the
/// sensor-local position estimate through the sensor's fixed mounting:
/// `p_c = p_c_si + R_c_si * (M b_i + o)`.
pub fn magnet_positions_in_center(
    g: &SensorGeometry,
    map: &PositionMap,
    sample: &FluxSample,
) -> Vec<Vector3<f64>> {
    assert_eq!(
        sample.fluxes_ut.len(),
        g.sensor_count(),
        "one flux vector per sensor"
    );
    g.sensor_frames
        .iter()
        .zip(&sample.fluxes_ut)
        .map(|(frame, flux)| frame.transform_point(&position_from_flux(flux, map)))
        .collect()
}

/// Closed-form least-squares rigid registration: returns the pose `(R, p)`
/// minimizing `sum_i || target_i - (R source_i + p) ||^2`.
///
/// `det(R) = +1` is enforced by flipping the sign of V's last column when the
/// raw `V U^T` comes out as a reflection.
pub fn arun_register(c: &Correspondences) -> Result<Transform, RegistrationError> {
    let n = c.source.len() as f64;
    let src_centroid: Vector3<f64> = c.source.iter().sum::<Vector3<f64>>() / n;
    let tgt_centroid: Vector3<f64> = c.target.iter().sum::<Vector3<f64>>() / n;

    let mut h = Matrix3::zeros();
    for (s, t) in c.source.iter().zip(&c.target) {
        h += (s - src_centroid) * (t - tgt_centroid).transpose();
    }

    let svd = h.svd(true, true);
    let sigma = svd.singular_values;
    if sigma[1] <= 1e-9 * sigma[0].max(1e-300) {
        return Err(RegistrationError::DegenerateConfiguration {
            sigma: [sigma[0], sigma[1], sigma[2]],
        });
    }
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let mut v = v_t.transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        // reflection case: negate the column of V paired with the smallest
        // singular value (the third; nalgebra sorts descending)
        v.column_mut(2).neg_mut();
        r = v * u.transpose();
    }

    let rotation = Rotation::from_matrix(r).map_err(RegistrationError::Lie)?;
    let translation = tgt_centroid - rotation * src_centroid;
    Ok(Transform::new(rotation, translation))
}

/// Deflection twist of a center-piece pose: the vectorized matrix logarithm.
pub fn deflection_twist(t: &Transform) -> Result<Twist, RegistrationError> {
    Ok(se3::log(t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_geometry, GeometryConfig};
    use crate::magnetics::FluxSample;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn default_geometry() -> SensorGeometry {
        build_geometry(&GeometryConfig::default()).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, max_angle_rad: f64, max_trans_mm: f64) -> Transform {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.gen_range(0.0..max_angle_rad);
        let trans = Vector3::new(
            rng.gen_range(-max_trans_mm..max_trans_mm),
            rng.gen_range(-max_trans_mm..max_trans_mm),
            rng.gen_range(-max_trans_mm..max_trans_mm),
        );
        Transform::new(Rotation::exp(&(axis * angle)), trans)
    }

    /// `p = M b + o` inverted so the reconstruction recovers `p` exactly.
    fn flux_for_position(p: &Vector3<f64>, map: &PositionMap) -> Vector3<f64> {
        map.slope_matrix().try_inverse().unwrap() * (p - map.offset_vector())
    }

    /// Sample whose reconstruction lands exactly on the magnet positions the
    /// given center pose would produce.
    fn sample_at_pose(g: &SensorGeometry, map: &PositionMap, pose: &Transform) -> FluxSample {
        let fluxes = g
            .sensor_frames
            .iter()
            .zip(&g.magnet_positions)
            .map(|(frame, magnet)| {
                let moved = *pose * *frame;
                let local = moved.inverse().transform_point(magnet);
                flux_for_position(&local, map)
            })
            .collect();
        FluxSample::new(fluxes, 0.0)
    }

    #[test]
    fn rest_flux_recovers_nominal_positions() {
        let g = default_geometry();
        let map = PositionMap::new([1.0, 1.0, 1.0], [0.0, 0.0, 0.0]);
        let sample = sample_at_pose(&g, &map, &Transform::identity());
        let points = magnet_positions_in_center(&g, &map, &sample);
        for (p, nominal) in points.iter().zip(&g.magnet_positions) {
            assert_relative_eq!(p, nominal, epsilon = 1e-10);
        }
    }

    #[test]
    fn reconstruction_matches_rigid_forward_model() {
        let g = default_geometry();
        let map = PositionMap::new([2.3e-3, 2.3e-3, -1.2e-3], [0.0, 0.0, 6.0]);
        let pose = se3::exp(&Twist::new(
            Vector3::new(0.3, -0.1, 0.2),
            Vector3::new(0.01, -0.005, 0.02),
        ));
        let sample = sample_at_pose(&g, &map, &pose);
        let points = magnet_positions_in_center(&g, &map, &sample);
        // forward model: p_c_mi = R^T (p_0_mi - p_c)
        let inv = pose.inverse();
        for (p, magnet) in points.iter().zip(&g.magnet_positions) {
            assert_relative_eq!(p, &inv.transform_point(magnet), epsilon = 1e-9);
        }
    }

    #[test]
    fn one_flux_perturbation_moves_exactly_one_point() {
        let g = default_geometry();
        let map = PositionMap::identity();
        let mut sample = sample_at_pose(&g, &map, &Transform::identity());
        let baseline = magnet_positions_in_center(&g, &map, &sample);
        sample.fluxes_ut[3].x += 1.0;
        let perturbed = magnet_positions_in_center(&g, &map, &sample);
        for i in 0..baseline.len() {
            let moved = (perturbed[i] - baseline[i]).norm();
            if i == 3 {
                assert!(moved > 0.5);
            } else {
                assert_eq!(moved, 0.0);
            }
        }
    }

    #[test]
    fn identical_clouds_register_to_identity() {
        let g = default_geometry();
        let c =
            Correspondences::new(g.magnet_positions.clone(), g.magnet_positions.clone()).unwrap();
        let t = arun_register(&c).unwrap();
        assert!((t.rotation.matrix() - Matrix3::identity()).norm() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_random_poses_exactly() {
        let g = default_geometry();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let truth = random_pose(&mut rng, 10f64.to_radians(), 3.0);
            let target: Vec<_> = g
                .magnet_positions
                .iter()
                .map(|p| truth.transform_point(p))
                .collect();
            let c = Correspondences::new(g.magnet_positions.clone(), target).unwrap();
            let est = arun_register(&c).unwrap();
            assert!((est.rotation.matrix() - truth.rotation.matrix()).norm() < 1e-9);
            assert!((est.translation - truth.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn coplanar_points_never_yield_reflections() {
        // Coplanar clouds make H rank 2; the raw V U^T can come out with
        // det -1, which the sign-correction branch must repair while still
        // recovering the true proper rotation.
        let square = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
            Vector3::new(0.5, 0.5, 0.0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let truth = random_pose(&mut rng, std::f64::consts::PI - 0.2, 2.0);
            let target: Vec<_> = square.iter().map(|p| truth.transform_point(p)).collect();
            let c = Correspondences::new(square.clone(), target).unwrap();
            let est = arun_register(&c).unwrap();
            assert!(est.rotation.matrix().determinant() > 0.0);
            assert!(
                (est.rotation.matrix() - truth.rotation.matrix()).norm() < 1e-8,
                "failed to recover coplanar rotation"
            );
        }
    }

    #[test]
    fn reflected_target_still_returns_proper_rotation() {
        // A mirrored cloud admits no exact rigid fit; the estimate must still
        // be a proper rotation.
        let pts = vec![
            Vector3::new(1.0, 0.2, -0.3),
            Vector3::new(-0.5, 1.0, 0.4),
            Vector3::new(0.3, -0.8, 1.0),
            Vector3::new(-1.0, -0.5, -0.9),
        ];
        let mirrored: Vec<_> = pts.iter().map(|p| Vector3::new(p.x, p.y, -p.z)).collect();
        let c = Correspondences::new(pts, mirrored).unwrap();
        let est = arun_register(&c).unwrap();
        assert!(est.rotation.matrix().determinant() > 0.0);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let line: Vec<_> = (0..5)
            .map(|i| Vector3::new(i as f64, 2.0 * i as f64, -i as f64))
            .collect();
        let c = Correspondences::new(line.clone(), line).unwrap();
        assert!(matches!(
            arun_register(&c),
            Err(RegistrationError::DegenerateConfiguration { .. })
        ));
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let pts = vec![Vector3::new(1.0, 1.0, 1.0); 4];
        let c = Correspondences::new(pts.clone(), pts).unwrap();
        assert!(matches!(
            arun_register(&c),
            Err(RegistrationError::DegenerateConfiguration { .. })
        ));
    }

    #[test]
    fn registration_is_equivariant_under_rigid_motion() {
        let g = default_geometry();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let base = random_pose(&mut rng, 0.3, 2.0);
            let extra = random_pose(&mut rng, 0.4, 3.0);
            let target: Vec<_> = g
                .magnet_positions
                .iter()
                .map(|p| base.transform_point(p))
                .collect();
            let moved: Vec<_> = target.iter().map(|p| extra.transform_point(p)).collect();
            let plain =
                arun_register(&Correspondences::new(g.magnet_positions.clone(), target).unwrap())
                    .unwrap();
            let shifted =
                arun_register(&Correspondences::new(g.magnet_positions.clone(), moved).unwrap())
                    .unwrap();
            let composed = extra * plain;
            assert!((shifted.rotation.matrix() - composed.rotation.matrix()).norm() < 1e-9);
            assert!((shifted.translation - composed.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn translation_noise_rms_stays_within_bound() {
        let g = default_geometry();
        let n = g.magnet_positions.len() as f64;
        let sigma = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
        let mut sum_sq = 0.0;
        let trials = 500;
        for _ in 0..trials {
            let truth = random_pose(&mut rng, 0.2, 1.0);
            let target: Vec<_> = g
                .magnet_positions
                .iter()
                .map(|p| {
                    truth.transform_point(p)
                        + Vector3::new(
                            rand_distr::Distribution::sample(&normal, &mut rng),
                            rand_distr::Distribution::sample(&normal, &mut rng),
                            rand_distr::Distribution::sample(&normal, &mut rng),
                        )
                })
                .collect();
            let est =
                arun_register(&Correspondences::new(g.magnet_positions.clone(), target).unwrap())
                    .unwrap();
            sum_sq += (est.translation - truth.translation).norm_squared();
        }
        let rms = (sum_sq / trials as f64).sqrt();
        let expected = 2.0 * sigma / n.sqrt();
        let hard = 3.0 * sigma / n.sqrt();
        if rms > expected {
            eprintln!(
                "note: registration noise RMS {rms:.3e} above 2 sigma/sqrt(n) {expected:.3e}"
            );
        }
        assert!(rms <= hard, "RMS {rms} above {hard}");
    }

    #[test]
    fn estimate_is_a_local_residual_minimum() {
        let g = default_geometry();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let truth = random_pose(&mut rng, 0.2, 1.5);
        let normal = rand_distr::Normal::new(0.0, 0.02).unwrap();
        let target: Vec<_> = g
            .magnet_positions
            .iter()
            .map(|p| {
                truth.transform_point(p)
                    + Vector3::new(
                        rand_distr::Distribution::sample(&normal, &mut rng),
                        rand_distr::Distribution::sample(&normal, &mut rng),
                        rand_distr::Distribution::sample(&normal, &mut rng),
                    )
            })
            .collect();
        let c = Correspondences::new(g.magnet_positions.clone(), target).unwrap();
        let est = arun_register(&c).unwrap();
        let ssr = |t: &Transform| -> f64 {
            c.source
                .iter()
                .zip(&c.target)
                .map(|(s, tg)| (tg - t.transform_point(s)).norm_squared())
                .sum()
        };
        let base = ssr(&est);
        for _ in 0..100 {
            let nudge = random_pose(&mut rng, 0.01, 0.05);
            let perturbed = nudge * est;
            assert!(ssr(&perturbed) >= base - 1e-12);
        }
    }

    #[test]
    fn deflection_twist_of_identity_is_zero() {
        let xi = deflection_twist(&Transform::identity()).unwrap();
        assert_eq!(xi.to_vector().norm(), 0.0);
    }

    #[test]
    fn deflection_twist_of_pure_translation() {
        let t = Transform::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let xi = deflection_twist(&t).unwrap();
        assert_relative_eq!(
            xi.to_vector().as_slice(),
            [0.1, 0.0, 0.0, 0.0, 0.0, 0.0].as_slice(),
            epsilon = 1e-13
        );
    }

    #[test]
    fn deflection_twist_round_trips_small_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..100 {
            let pose = random_pose(&mut rng, 0.05, 0.5);
            let xi = deflection_twist(&pose).unwrap();
            let back = se3::exp(&xi);
            assert!((back.rotation.matrix() - pose.rotation.matrix()).norm() < 1e-12);
            assert!((back.translation - pose.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn deflection_twist_propagates_angle_at_pi() {
        let t = Transform::new(
            Rotation::exp(&Vector3::new(std::f64::consts::PI, 0.0, 0.0)),
            Vector3::zeros(),
        );
        assert!(matches!(
            deflection_twist(&t),
            Err(RegistrationError::Lie(LieError::AngleAtPi { .. }))
        ));
    }
}
