//! Error propagation from flux noise to wrench estimates: spectral-norm
//! bounds, per-block singular values and isotropy indices, and diagonal
//! range estimates.
//!
//! The combined map `KA` sends a flux stack (µT) to a wrench, so any flux
//! perturbation is amplified by at most its largest singular value. The force
//! rows (1-3) and torque rows (4-6) are analysed as separate blocks because
//! their units differ (N/µT vs Nm/µT).

use nalgebra::{DMatrix, Matrix6};
use serde::{Deserialize, Serialize};

/// Singular-value summary of one 3-row block of `KA`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSensitivity {
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// `sigma_min / sigma_max`, in (0, 1]; 1 means direction-independent gain.
    pub isotropy: f64,
}

fn block_sensitivity(block: &DMatrix<f64>) -> BlockSensitivity {
    let svd = block.clone().svd(false, false);
    let mut sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    sigma.sort_by(f64::total_cmp);
    let sigma_max = *sigma.last().unwrap();
    let sigma_min = sigma[0];
    BlockSensitivity {
        sigma_max,
        sigma_min,
        isotropy: if sigma_max > 0.0 {
            sigma_min / sigma_max
        } else {
            0.0
        },
    }
}

/// Sensitivity of a calibrated sensor (and optionally of a two-sensor rig).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// Rows 1-3 of `KA`, N/µT.
    pub force: BlockSensitivity,
    /// Rows 4-6 of `KA`, Nm/µT.
    pub torque: BlockSensitivity,
    /// Largest singular value of the full 6-row map.
    pub overall_sigma_max: f64,
    /// Largest singular value of a stacked two-sensor tip map, when built.
    #[serde(default)]
    pub tip_sigma_max: Option<f64>,
}

/// Upper bound on the wrench error produced by a flux perturbation of the
/// given Euclidean norm: `sigma_max(KA) * |delta_b|`.
pub fn wrench_error_bound(ka: &DMatrix<f64>, delta_b_norm_ut: f64) -> f64 {
    assert!(delta_b_norm_ut >= 0.0, "perturbation norm must be >= 0");
    let svd = ka.clone().svd(false, false);
    svd.singular_values.max() * delta_b_norm_ut
}

/// Block-wise singular values and isotropy indices of a 6x3n sensitivity map.
pub fn sensitivity_report(ka: &DMatrix<f64>) -> SensitivityReport {
    assert_eq!(ka.nrows(), 6, "sensitivity map must have 6 wrench rows");
    let force = block_sensitivity(&ka.rows(0, 3).into_owned());
    let torque = block_sensitivity(&ka.rows(3, 3).into_owned());
    let svd = ka.clone().svd(false, false);
    SensitivityReport {
        force,
        torque,
        overall_sigma_max: svd.singular_values.max(),
        tip_sigma_max: None,
    }
}

/// Force/torque span reachable before the elastomer hits its deflection
/// limits: `range_i = |K_ii| * max_deflection_i` per axis.
///
/// Units follow the stiffness matrix: if `K` maps mm/rad twists to N/Nm
/// wrenches, pass the limits in mm and rad.
pub fn range_estimate(k: &Matrix6<f64>, max_deflection: &[f64; 6]) -> [f64; 6] {
    assert!(
        max_deflection.iter().all(|&d| d >= 0.0),
        "deflection limits must be non-negative"
    );
    std::array::from_fn(|i| k[(i, i)].abs() * max_deflection[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_ka(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(6, 24, |_, _| rng.gen_range(-1.0..1.0) * 1e-3)
    }

    #[test]
    fn zero_perturbation_gives_zero_bound() {
        let ka = DMatrix::from_element(6, 24, 0.5);
        assert_eq!(wrench_error_bound(&ka, 0.0), 0.0);
    }

    #[test]
    fn identity_padded_map_has_unit_gain() {
        let mut ka = DMatrix::zeros(6, 24);
        for i in 0..6 {
            ka[(i, i)] = 1.0;
        }
        assert_relative_eq!(wrench_error_bound(&ka, 2.5), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn bound_holds_for_random_perturbations_and_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let ka = random_ka(&mut rng);
        let svd = ka.clone().svd(false, true);
        let sigma_max = svd.singular_values.max();
        let v_t = svd.v_t.unwrap();
        let top_direction: DVector<f64> = v_t.row(0).transpose();

        let mut sup: f64 = 0.0;
        for _ in 0..1000 {
            let delta = DVector::from_fn(24, |_, _| rng.gen_range(-1.0..1.0)).normalize();
            let amplified = (&ka * &delta).norm();
            assert!(amplified <= sigma_max * (1.0 + 1e-12));
            sup = sup.max(amplified);
        }
        // equality is approached along the top right-singular vector
        let along_top = (&ka * &top_direction).norm();
        assert_relative_eq!(along_top, sigma_max, max_relative = 1e-10);
        assert!(sup <= along_top * (1.0 + 1e-12));
    }

    #[test]
    fn orthonormal_force_rows_have_unit_isotropy() {
        let c = 3.25e-3;
        let mut ka = DMatrix::zeros(6, 24);
        for i in 0..3 {
            ka[(i, i)] = c;
            ka[(i + 3, i + 6)] = 0.5 * c;
        }
        let report = sensitivity_report(&ka);
        assert_relative_eq!(report.force.sigma_max, c, epsilon = 1e-15);
        assert_relative_eq!(report.force.sigma_min, c, epsilon = 1e-15);
        assert_relative_eq!(report.force.isotropy, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn reference_fixture_reproduces_published_isotropy() {
        let ka = reference::sensitivity_fixture();
        let report = sensitivity_report(&ka);
        assert_relative_eq!(report.force.sigma_max, 6.07e-3, max_relative = 1e-9);
        assert_relative_eq!(report.force.sigma_min, 2.88e-3, max_relative = 1e-9);
        assert_relative_eq!(report.force.isotropy, 0.47, epsilon = 5e-3);
        assert_relative_eq!(report.torque.sigma_max, 2.26e-3, max_relative = 1e-9);
        assert_relative_eq!(report.torque.sigma_min, 1.48e-3, max_relative = 1e-9);
        assert_relative_eq!(report.torque.isotropy, 0.65, epsilon = 5e-3);
    }

    #[test]
    fn block_sigmas_never_exceed_overall() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let ka = random_ka(&mut rng);
            let report = sensitivity_report(&ka);
            let tol = 1.0 + 1e-12;
            assert!(report.force.sigma_max <= report.overall_sigma_max * tol);
            assert!(report.torque.sigma_max <= report.overall_sigma_max * tol);
            assert!(report.force.isotropy > 0.0 && report.force.isotropy <= 1.0);
            assert!(report.torque.isotropy > 0.0 && report.torque.isotropy <= 1.0);
        }
    }

    #[test]
    fn empirical_supremum_reaches_sigma_max() {
        // power-iteration style sanity: dense random sampling plus the top
        // direction itself reaches the spectral norm
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ka = random_ka(&mut rng);
        let svd = ka.clone().svd(false, true);
        let sigma_max = svd.singular_values.max();
        let mut sup: f64 = 0.0;
        for _ in 0..10_000 {
            let delta = DVector::from_fn(24, |_, _| {
                rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
            });
            sup = sup.max((&ka * &delta).norm() / delta.norm());
        }
        let top: DVector<f64> = svd.v_t.unwrap().row(0).transpose();
        sup = sup.max((&ka * &top).norm());
        assert!(sup >= 0.99 * sigma_max);
    }

    #[test]
    fn range_estimate_reference_values() {
        let k = reference::bench_stiffness();
        let ranges = range_estimate(&k, &reference::BENCH_DEFLECTION_LIMITS);
        // the bench stiffness carries metre/radian twist units
        assert_relative_eq!(ranges[0], 8.82e3 * 0.006, epsilon = 1e-9);
        assert_relative_eq!(ranges[2], 6.50e3 * 0.003, epsilon = 1e-9);
        assert_relative_eq!(ranges[3], 0.2, epsilon = 1e-9);
    }

    #[test]
    fn zero_deflection_means_zero_range() {
        let k = reference::bench_stiffness();
        assert_eq!(range_estimate(&k, &[0.0; 6]), [0.0; 6]);
    }

    #[test]
    fn doubling_a_diagonal_doubles_that_range() {
        let mut k = reference::bench_stiffness();
        let limits = reference::BENCH_DEFLECTION_LIMITS;
        let base = range_estimate(&k, &limits);
        k[(1, 1)] *= 2.0;
        let doubled = range_estimate(&k, &limits);
        assert_relative_eq!(doubled[1], 2.0 * base[1], epsilon = 1e-12);
        assert_relative_eq!(doubled[0], base[0], epsilon = 1e-12);
    }
}
