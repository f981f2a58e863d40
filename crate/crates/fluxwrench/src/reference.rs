//! Constants from the original bench characterization of this sensor design,
//! kept verbatim as regression fixtures.
//!
//! The bench stiffness matrix carries metre/radian twist units (unlike the
//! rest of this crate, which works in mm), and the bench position map's
//! offset has a unit convention of its own. Both are treated as opaque
//! golden values: tests compare products and structure against them, never
//! re-derive them.

use crate::magnetics::PositionMap;
use crate::se3::Rotation;
use nalgebra::{DMatrix, Matrix6, Vector3};

/// Bench-fitted flux-to-position map (slopes mm/µT, offsets as recorded).
pub const BENCH_MAP: PositionMap = PositionMap {
    slopes_mm_per_ut: [0.4423, 0.3678, -0.0645],
    offset_mm: [-22.0, -18.0, 8.0],
};

/// Bench-fitted 6x6 stiffness, N and Nm per metre/radian of twist.
pub fn bench_stiffness() -> Matrix6<f64> {
    1.0e3
        * Matrix6::new(
            -8.82, -11.33, -17.41, 0.03, 0.14, 0.02, //
            1.53, 12.77, 0.65, -0.21, -0.02, -0.06, //
            39.70, 27.12, -6.50, -0.03, 0.10, -0.04, //
            -0.13, -0.43, -0.02, 0.01, 0.00, 0.00, //
            -0.76, -0.54, -0.92, 0.00, 0.01, 0.00, //
            0.08, 0.02, 0.03, 0.00, 0.00, 0.01,
        )
}

/// Deflection limits matching the bench stiffness units: 6/6/3 mm expressed
/// in metres, plus 0.02 rad for each torsional axis (the rotational travel
/// implied by the bench stiffness diagonal and the claimed torque range).
pub const BENCH_DEFLECTION_LIMITS: [f64; 6] = [0.006, 0.006, 0.003, 0.02, 0.02, 0.02];

/// The same travel limits in this crate's mm/rad twist units.
pub const DEFLECTION_LIMITS_MM_RAD: [f64; 6] = [6.0, 6.0, 3.0, 0.02, 0.02, 0.02];

/// Claimed full-scale ranges of the design: +/-50 N in X/Y, +/-20 N in Z,
/// +/-0.2 Nm for all torques.
pub const CLAIMED_RANGES: [f64; 6] = [50.0, 50.0, 20.0, 0.2, 0.2, 0.2];

/// Published force-block singular values of `KA`, N/µT.
pub const FORCE_SIGMA_MAX: f64 = 6.07e-3;
pub const FORCE_SIGMA_MIN: f64 = 2.88e-3;
/// Published torque-block singular values of `KA`, Nm/µT.
pub const TORQUE_SIGMA_MAX: f64 = 2.26e-3;
pub const TORQUE_SIGMA_MIN: f64 = 1.48e-3;

/// A deterministic 6x24 sensitivity map constructed to have exactly the
/// published force and torque block singular values (isotropy 0.47 and 0.65).
pub fn sensitivity_fixture() -> DMatrix<f64> {
    let force_sigma = [FORCE_SIGMA_MAX, 4.4e-3, FORCE_SIGMA_MIN];
    let torque_sigma = [TORQUE_SIGMA_MAX, 1.9e-3, TORQUE_SIGMA_MIN];
    let u_force = Rotation::exp(&Vector3::new(0.3, -0.5, 0.8));
    let u_torque = Rotation::exp(&Vector3::new(-0.7, 0.2, 0.4));

    let mut ka = DMatrix::zeros(6, 24);
    // force block spans flux columns 0..3, torque block columns 3..6
    for (r, c, u, sigma) in [(0, 0, u_force, force_sigma), (3, 3, u_torque, torque_sigma)] {
        for i in 0..3 {
            for j in 0..3 {
                ka[(r + i, c + j)] = u.matrix()[(i, j)] * sigma[j];
            }
        }
    }
    ka
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_stiffness_spot_entries() {
        let k = bench_stiffness();
        assert_eq!(k[(0, 0)], -8.82e3);
        assert_eq!(k[(2, 0)], 39.70e3);
        assert_eq!(k[(3, 3)], 0.01e3);
    }

    #[test]
    fn fixture_blocks_have_exact_singular_values() {
        let ka = sensitivity_fixture();
        let f = ka.rows(0, 3).into_owned().svd(false, false);
        let t = ka.rows(3, 3).into_owned().svd(false, false);
        let fs: Vec<f64> = f.singular_values.iter().copied().collect();
        let ts: Vec<f64> = t.singular_values.iter().copied().collect();
        assert!((fs[0] - FORCE_SIGMA_MAX).abs() < 1e-15);
        assert!((fs[2] - FORCE_SIGMA_MIN).abs() < 1e-15);
        assert!((ts[0] - TORQUE_SIGMA_MAX).abs() < 1e-15);
        assert!((ts[2] - TORQUE_SIGMA_MIN).abs() < 1e-15);
    }
}
