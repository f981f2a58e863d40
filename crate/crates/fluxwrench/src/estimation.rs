//! Runtime wrench estimation: apply the calibrated `K A` map to incoming
//! flux stacks, stream at the chip cadence with optional block averaging,
//! and compose two sensors on a shared tool shaft into a tool-tip wrench.

use crate::calibration::CalibrationResult;
use crate::magnetics::FluxSample;
use crate::se3::{hat, Wrench, MM_PER_M};
use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("tip rig lever arms must be distinct, both are {lever:?} mm")]
    IdenticalLevers { lever: [f64; 3] },
    #[error("flux stack has {got} entries, estimator expects {expected}")]
    StackSize { got: usize, expected: usize },
}

/// Immutable runtime estimator: `w = (K A) b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimator {
    a: DMatrix<f64>,
    k: Matrix6<f64>,
    ka: DMatrix<f64>,
    /// Block-averaging window used by [`Estimator::stream`], in samples.
    pub window: usize,
}

impl Estimator {
    pub fn new(a: DMatrix<f64>, k: Matrix6<f64>) -> Self {
        assert_eq!(a.nrows(), 6, "A maps flux stacks to 6-vector twists");
        let ka = DMatrix::from_fn(6, a.ncols(), |i, j| {
            (0..6).map(|l| k[(i, l)] * a[(l, j)]).sum()
        });
        Estimator {
            a,
            k,
            ka,
            window: 1,
        }
    }

    pub fn from_calibration(result: &CalibrationResult) -> Self {
        Estimator::new(result.a.clone(), result.k)
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window.max(1);
        self
    }

    pub fn ka(&self) -> &DMatrix<f64> {
        &self.ka
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn k(&self) -> &Matrix6<f64> {
        &self.k
    }

    pub fn stack_len(&self) -> usize {
        self.ka.ncols()
    }

    /// `w = K A b`.
    pub fn estimate(&self, flux_stack_ut: &DVector<f64>) -> Result<Wrench, EstimationError> {
        if flux_stack_ut.len() != self.stack_len() {
            return Err(EstimationError::StackSize {
                got: flux_stack_ut.len(),
                expected: self.stack_len(),
            });
        }
        let w = &self.ka * flux_stack_ut;
        Ok(Wrench::from_vector(&Vector6::from_fn(|i, _| w[i])))
    }

    /// Lazily map a sample stream to timestamped wrenches; see [`WrenchStream`].
    pub fn stream<I>(&self, samples: I, nominal_period_ms: f64) -> WrenchStream<'_, I::IntoIter>
    where
        I: IntoIterator<Item = FluxSample>,
    {
        WrenchStream {
            estimator: self,
            samples: samples.into_iter(),
            nominal_period_ms,
            last_timestamp: None,
        }
    }
}

/// One streamed estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedWrench {
    /// Timestamp of the last sample in the window.
    pub timestamp_ms: f64,
    pub wrench: Wrench,
    /// Set when any inter-sample gap in this window exceeded twice the
    /// nominal period. Non-fatal; the estimate is still emitted.
    pub gap_detected: bool,
}

/// Line record for streamed output: `timestamp_ms,fx,fy,fz,mx,my,mz,flags`.
pub fn format_record(t: &TimedWrench) -> String {
    let w = t.wrench;
    format!(
        "{},{},{},{},{},{},{},{}",
        t.timestamp_ms,
        w.force.x,
        w.force.y,
        w.force.z,
        w.moment.x,
        w.moment.y,
        w.moment.z,
        if t.gap_detected { "gap" } else { "" }
    )
}

/// Iterator adapter emitting one wrench per non-overlapping window of
/// `estimator.window` samples. Never reorders; a trailing partial window is
/// dropped.
pub struct WrenchStream<'a, I> {
    estimator: &'a Estimator,
    samples: I,
    nominal_period_ms: f64,
    last_timestamp: Option<f64>,
}

impl<I> Iterator for WrenchStream<'_, I>
where
    I: Iterator<Item = FluxSample>,
{
    type Item = TimedWrench;

    fn next(&mut self) -> Option<TimedWrench> {
        let window = self.estimator.window.max(1);
        let mut acc: Option<DVector<f64>> = None;
        let mut gap = false;
        let mut timestamp = 0.0;
        for _ in 0..window {
            let sample = self.samples.next()?;
            if let Some(prev) = self.last_timestamp {
                if sample.timestamp_ms - prev > 2.0 * self.nominal_period_ms {
                    gap = true;
                }
            }
            self.last_timestamp = Some(sample.timestamp_ms);
            timestamp = sample.timestamp_ms;
            let stacked = sample.stacked();
            acc = Some(match acc {
                Some(a) => a + stacked,
                None => stacked,
            });
        }
        let mean = acc? / window as f64;
        let wrench = self
            .estimator
            .estimate(&mean)
            .expect("stream samples must match the estimator's stack size");
        Some(TimedWrench {
            timestamp_ms: timestamp,
            wrench,
            gap_detected: gap,
        })
    }
}

/// Two estimators mounted on one tool shaft, composed at the tool tip.
///
/// All three frames (tip and both sensor centers) are axis-parallel; the rig
/// only carries the translational lever arms from the tip to each sensor,
/// expressed in the tip frame in mm.
#[derive(Debug, Clone)]
pub struct TipRig {
    pub first: Estimator,
    pub second: Estimator,
    pub lever1_mm: Vector3<f64>,
    pub lever2_mm: Vector3<f64>,
}

impl TipRig {
    pub fn new(
        first: Estimator,
        second: Estimator,
        lever1_mm: Vector3<f64>,
        lever2_mm: Vector3<f64>,
    ) -> Result<Self, EstimationError> {
        if lever1_mm == lever2_mm {
            return Err(EstimationError::IdenticalLevers {
                lever: [lever1_mm.x, lever1_mm.y, lever1_mm.z],
            });
        }
        Ok(TipRig {
            first,
            second,
            lever1_mm,
            lever2_mm,
        })
    }

    /// Tip wrench from both flux stacks: forces add, moments add plus the
    /// lever cross terms `p_i x f_i`.
    pub fn estimate_tip_wrench(
        &self,
        flux1_ut: &DVector<f64>,
        flux2_ut: &DVector<f64>,
    ) -> Result<Wrench, EstimationError> {
        let w1 = self.first.estimate(flux1_ut)?;
        let w2 = self.second.estimate(flux2_ut)?;
        let p1 = self.lever1_mm / MM_PER_M;
        let p2 = self.lever2_mm / MM_PER_M;
        Ok(Wrench {
            force: w1.force + w2.force,
            moment: w1.moment + w2.moment + p1.cross(&w1.force) + p2.cross(&w2.force),
        })
    }

    /// The equivalent single linear map `[Ad1 K1 A1 | Ad2 K2 A2]` acting on
    /// the concatenated flux stacks.
    pub fn stacked_map(&self) -> DMatrix<f64> {
        let blocks = [
            (&self.first, self.lever1_mm / MM_PER_M),
            (&self.second, self.lever2_mm / MM_PER_M),
        ];
        let total = self.first.stack_len() + self.second.stack_len();
        let mut out = DMatrix::zeros(6, total);
        let mut col0 = 0;
        for (est, p_m) in blocks {
            let ka = est.ka();
            let px = hat(&p_m);
            for j in 0..ka.ncols() {
                let f = Vector3::new(ka[(0, j)], ka[(1, j)], ka[(2, j)]);
                let m = Vector3::new(ka[(3, j)], ka[(4, j)], ka[(5, j)]);
                let tip_m = m + px * f;
                for r in 0..3 {
                    out[(r, col0 + j)] = f[r];
                    out[(r + 3, col0 + j)] = tip_m[r];
                }
            }
            col0 += ka.ncols();
        }
        out
    }

    /// Largest singular value of the stacked tip map: the worst-case tip
    /// wrench error per unit of joint flux perturbation `[db1; db2]`. Slots
    /// into a `SensitivityReport`'s `tip_sigma_max`.
    pub fn sensitivity_sigma_max(&self) -> f64 {
        self.stacked_map().svd(false, false).singular_values.max()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_estimator(rng: &mut ChaCha8Rng) -> Estimator {
        let a = DMatrix::from_fn(6, 24, |_, _| rng.gen_range(-1.0..1.0) * 1e-3);
        let k = Matrix6::from_fn(|i, j| {
            if i == j {
                rng.gen_range(2.0..10.0)
            } else {
                rng.gen_range(-0.2..0.2)
            }
        });
        Estimator::new(a, k)
    }

    /// An estimator whose `K A` is `[I6 | 0]`: the first six stack entries
    /// pass straight through as the wrench.
    fn passthrough_estimator() -> Estimator {
        let mut a = DMatrix::zeros(6, 24);
        for i in 0..6 {
            a[(i, i)] = 1.0;
        }
        Estimator::new(a, Matrix6::identity())
    }

    fn stack_from_wrench(w: &Wrench) -> DVector<f64> {
        let mut b = DVector::zeros(24);
        for i in 0..6 {
            b[i] = w.to_vector()[i];
        }
        b
    }

    #[test]
    fn cached_product_matches_k_times_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = random_estimator(&mut rng);
        let explicit = DMatrix::from_fn(6, 24, |i, j| {
            (0..6).map(|l| est.k()[(i, l)] * est.a()[(l, j)]).sum()
        });
        assert!((est.ka() - explicit).norm() < 1e-12);
    }

    #[test]
    fn zero_flux_estimates_zero_wrench() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est = random_estimator(&mut rng);
        let w = est.estimate(&DVector::zeros(24)).unwrap();
        assert_eq!(w.to_vector(), Vector6::zeros());
    }

    #[test]
    fn estimate_is_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est = random_estimator(&mut rng);
        let b = DVector::from_fn(24, |_, _| rng.gen_range(-100.0..100.0));
        let w1 = est.estimate(&b).unwrap();
        let w2 = est.estimate(&(2.0 * &b)).unwrap();
        assert_relative_eq!(w2.to_vector(), 2.0 * w1.to_vector(), epsilon = 1e-12);
    }

    #[test]
    fn wrong_stack_size_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let est = random_estimator(&mut rng);
        assert!(matches!(
            est.estimate(&DVector::zeros(23)),
            Err(EstimationError::StackSize {
                got: 23,
                expected: 24
            })
        ));
    }

    #[test]
    fn tip_rig_rejects_identical_levers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lever = Vector3::new(0.0, 0.0, 50.0);
        assert!(matches!(
            TipRig::new(
                random_estimator(&mut rng),
                random_estimator(&mut rng),
                lever,
                lever
            ),
            Err(EstimationError::IdenticalLevers { .. })
        ));
    }

    #[test]
    fn zero_inputs_give_zero_tip_wrench() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rig = TipRig::new(
            random_estimator(&mut rng),
            random_estimator(&mut rng),
            Vector3::new(0.0, 0.0, 40.0),
            Vector3::new(0.0, 0.0, 120.0),
        )
        .unwrap();
        let z = DVector::zeros(24);
        let w = rig.estimate_tip_wrench(&z, &z).unwrap();
        assert_eq!(w.to_vector(), Vector6::zeros());
    }

    #[test]
    fn tip_moment_hand_oracle() {
        // sensor 1 reports a pure x force F with lever [0, 0, L]; sensor 2
        // reports nothing: the tip moment is [0, L F, 0] with L in metres.
        let rig = TipRig::new(
            passthrough_estimator(),
            passthrough_estimator(),
            Vector3::new(0.0, 0.0, 80.0),
            Vector3::new(0.0, 0.0, 200.0),
        )
        .unwrap();
        let f = 3.0;
        let b1 = stack_from_wrench(&Wrench::new(Vector3::new(f, 0.0, 0.0), Vector3::zeros()));
        let b2 = DVector::zeros(24);
        let w = rig.estimate_tip_wrench(&b1, &b2).unwrap();
        assert_relative_eq!(w.force, Vector3::new(f, 0.0, 0.0), epsilon = 1e-14);
        assert_relative_eq!(w.moment, Vector3::new(0.0, 0.080 * f, 0.0), epsilon = 1e-14);
    }

    #[test]
    fn sum_form_and_stacked_form_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rig = TipRig::new(
            random_estimator(&mut rng),
            random_estimator(&mut rng),
            Vector3::new(5.0, -10.0, 60.0),
            Vector3::new(0.0, 15.0, 150.0),
        )
        .unwrap();
        let stacked_map = rig.stacked_map();
        for _ in 0..100 {
            let b1 = DVector::from_fn(24, |_, _| rng.gen_range(-200.0..200.0));
            let b2 = DVector::from_fn(24, |_, _| rng.gen_range(-200.0..200.0));
            let explicit = rig.estimate_tip_wrench(&b1, &b2).unwrap();
            let mut joint = DVector::zeros(48);
            joint.rows_mut(0, 24).copy_from(&b1);
            joint.rows_mut(24, 24).copy_from(&b2);
            let via_matrix = &stacked_map * &joint;
            assert_relative_eq!(
                explicit.to_vector(),
                Vector6::from_fn(|i, _| via_matrix[i]),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn tip_sensitivity_bounds_joint_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rig = TipRig::new(
            random_estimator(&mut rng),
            random_estimator(&mut rng),
            Vector3::new(0.0, -5.0, 45.0),
            Vector3::new(10.0, 0.0, 160.0),
        )
        .unwrap();
        let sigma = rig.sensitivity_sigma_max();
        let zero = DVector::zeros(24);
        for _ in 0..200 {
            let d1: DVector<f64> = DVector::from_fn(24, |_, _| rng.gen_range(-1.0..1.0));
            let d2: DVector<f64> = DVector::from_fn(24, |_, _| rng.gen_range(-1.0..1.0));
            let joint_norm = (d1.norm_squared() + d2.norm_squared()).sqrt();
            let base = rig.estimate_tip_wrench(&zero, &zero).unwrap();
            let moved = rig.estimate_tip_wrench(&d1, &d2).unwrap();
            let delta = (moved.to_vector() - base.to_vector()).norm();
            assert!(delta <= sigma * joint_norm * (1.0 + 1e-12));
        }
        // a report can carry the rig bound alongside the per-sensor blocks
        let mut report = crate::sensitivity::sensitivity_report(rig.first.ka());
        report.tip_sigma_max = Some(sigma);
        assert!(report.tip_sigma_max.unwrap() > 0.0);
    }

    #[test]
    fn equilibrium_consistent_splits_agree_at_the_tip() {
        // Any split of a tip load into two sensor wrenches that respects
        // static equilibrium must produce the same tip estimate.
        let rig = TipRig::new(
            passthrough_estimator(),
            passthrough_estimator(),
            Vector3::new(0.0, 0.0, 50.0),
            Vector3::new(0.0, 0.0, 140.0),
        )
        .unwrap();
        let p1 = rig.lever1_mm / MM_PER_M;
        let p2 = rig.lever2_mm / MM_PER_M;
        let applied = Wrench::new(Vector3::new(1.5, -0.5, 2.0), Vector3::new(0.05, 0.1, -0.02));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut outputs = Vec::new();
        for _ in 0..5 {
            // arbitrary share for sensor 1, remainder for sensor 2
            let w1 = Wrench::new(
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen(),
                ),
                Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 0.0),
            );
            let f2 = applied.force - w1.force;
            let m2 = applied.moment - w1.moment - p1.cross(&w1.force) - p2.cross(&f2);
            let w2 = Wrench::new(f2, m2);
            let out = rig
                .estimate_tip_wrench(&stack_from_wrench(&w1), &stack_from_wrench(&w2))
                .unwrap();
            outputs.push(out);
        }
        for out in &outputs {
            assert_relative_eq!(out.to_vector(), applied.to_vector(), epsilon = 1e-9);
        }
    }

    fn constant_samples(n: usize, period: f64, flux: f64) -> Vec<FluxSample> {
        (0..n)
            .map(|i| FluxSample::new(vec![Vector3::new(flux, 0.0, 0.0); 8], i as f64 * period))
            .collect()
    }

    #[test]
    fn constant_input_streams_constant_wrenches() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let est = random_estimator(&mut rng);
        let out: Vec<_> = est.stream(constant_samples(10, 10.0, 50.0), 10.0).collect();
        assert_eq!(out.len(), 10);
        for pair in out.windows(2) {
            assert_eq!(pair[0].wrench, pair[1].wrench);
            assert!(!pair[1].gap_detected);
        }
    }

    #[test]
    fn windowed_stream_reduces_noise_by_sqrt_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let est = random_estimator(&mut rng);
        let windowed = est.clone().with_window(100);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let noisy_samples = |count: usize, rng: &mut ChaCha8Rng| -> Vec<FluxSample> {
            (0..count)
                .map(|i| {
                    FluxSample::new(
                        (0..8)
                            .map(|_| {
                                Vector3::new(
                                    normal.sample(rng),
                                    normal.sample(rng),
                                    normal.sample(rng),
                                )
                            })
                            .collect(),
                        i as f64 * 10.0,
                    )
                })
                .collect()
        };
        let n_out = 300;
        let raw: Vec<f64> = est
            .stream(noisy_samples(n_out, &mut rng), 10.0)
            .map(|t| t.wrench.force.x)
            .collect();
        let averaged: Vec<f64> = windowed
            .stream(noisy_samples(n_out * 100, &mut rng), 10.0)
            .map(|t| t.wrench.force.x)
            .collect();
        let std = |xs: &[f64]| {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64).sqrt()
        };
        let ratio = std(&averaged) / std(&raw);
        assert!(
            (0.06..0.16).contains(&ratio),
            "expected ~0.1 noise ratio, got {ratio}"
        );
    }

    #[test]
    fn gap_is_flagged_on_next_emission() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let est = random_estimator(&mut rng);
        let mut samples = constant_samples(5, 10.0, 10.0);
        // open a 25 ms gap before the fourth sample
        for s in samples.iter_mut().skip(3) {
            s.timestamp_ms += 15.0;
        }
        let out: Vec<_> = est.stream(samples, 10.0).collect();
        assert_eq!(
            out.iter().map(|t| t.gap_detected).collect::<Vec<_>>(),
            vec![false, false, false, true, false]
        );
    }

    #[test]
    fn streaming_is_deterministic_and_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let est = random_estimator(&mut rng).with_window(3);
        let samples = constant_samples(10, 10.0, 25.0);
        let a: Vec<_> = est.stream(samples.clone(), 10.0).collect();
        let b: Vec<_> = est.stream(samples, 10.0).collect();
        assert_eq!(a, b);
        // 10 samples / window 3 -> 3 emissions, trailing partial dropped
        assert_eq!(a.len(), 3);
        assert!(a.windows(2).all(|p| p[0].timestamp_ms < p[1].timestamp_ms));
        assert_eq!(a[0].timestamp_ms, 20.0);
    }

    #[test]
    fn record_format_is_csv_like() {
        let t = TimedWrench {
            timestamp_ms: 120.0,
            wrench: Wrench::new(Vector3::new(1.5, 0.0, -2.0), Vector3::new(0.0, 0.25, 0.0)),
            gap_detected: true,
        };
        assert_eq!(format_record(&t), "120,1.5,0,-2,0,0.25,0,gap");
        let quiet = TimedWrench {
            gap_detected: false,
            ..t
        };
        assert!(format_record(&quiet).ends_with(','));
    }
}
