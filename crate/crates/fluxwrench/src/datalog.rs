//! Data ingestion and persistence: raw serial capture parsing, frame
//! averaging, and the CSV formats for sweeps and calibration datasets.
//!
//! # Serial line grammar
//!
//! One line per sensor reading, whitespace-tolerant:
//!
//! ```text
//! [t=<ms>] S<i>: <bx> <by> <bz>
//! ```
//!
//! A frame is complete when every sensor index `0..sensor_count` has reported
//! once; a repeated index before that closes the current frame as dropped.
//! Lines whose three values are all integers are LSB counts (scaled by the
//! chip resolutions); any decimal point or exponent means the values are
//! already in µT. An explicit [`UnitMode`] overrides the heuristic.
//! All files are UTF-8 with LF line endings and `.` decimals.

use crate::calibration::{CalibrationDataset, CalibrationRecord};
use crate::magnetics::{Axis, ChipModel, FluxSample, SweepPoint};
use crate::se3::{Rotation, Transform};
use nalgebra::{DVector, Matrix3, Vector3};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatalogError {
    #[error("log contained no complete frames ({} bad lines, {} dropped frames)", report.bad_lines, report.frames_dropped)]
    EmptyLog { report: ParseReport },
    #[error("need {need} samples to average, have {have}")]
    InsufficientSamples { have: usize, need: usize },
    #[error("row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// How to interpret the numeric values of serial lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnitMode {
    /// Integers are LSB counts, decimals are µT.
    #[default]
    Auto,
    /// Everything is an LSB count.
    Lsb,
    /// Everything is already µT.
    MicroTesla,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseOptions {
    pub sensor_count: usize,
    pub units: UnitMode,
    pub chip: ChipModel,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            sensor_count: 8,
            units: UnitMode::Auto,
            chip: ChipModel::default(),
        }
    }
}

/// Bookkeeping from a parse: every frame boundary is accounted for in
/// `frames_parsed + frames_dropped`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParseReport {
    pub frames_parsed: usize,
    pub frames_dropped: usize,
    pub bad_lines: usize,
}

/// One parsed serial line.
struct SerialLine {
    sensor: usize,
    flux_ut: Vector3<f64>,
    timestamp_ms: Option<f64>,
}

fn parse_line(line: &str, opts: &ParseOptions) -> Option<SerialLine> {
    let mut tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.is_empty() {
        return None;
    }
    let mut timestamp_ms = None;
    if let Some(rest) = tokens[0].strip_prefix("t=") {
        timestamp_ms = Some(rest.parse::<f64>().ok()?);
        tokens.remove(0);
    }
    if tokens.len() != 4 {
        return None;
    }
    let head = tokens[0];
    let head = head.strip_suffix(':').unwrap_or(head);
    let index_str = head.strip_prefix('S').or_else(|| head.strip_prefix('s'))?;
    let sensor = index_str.parse::<usize>().ok()?;
    if sensor >= opts.sensor_count {
        return None;
    }

    let values = &tokens[1..4];
    let all_integers = values
        .iter()
        .all(|v| !v.contains('.') && !v.contains('e') && !v.contains('E'));
    let mut flux = Vector3::zeros();
    for (i, v) in values.iter().enumerate() {
        // tolerate unicode minus from terminal captures
        let v = v.replace('\u{2212}', "-");
        flux[i] = v.parse::<f64>().ok()?;
        if !flux[i].is_finite() {
            return None;
        }
    }
    let as_lsb = match opts.units {
        UnitMode::Auto => all_integers,
        UnitMode::Lsb => true,
        UnitMode::MicroTesla => false,
    };
    if as_lsb {
        for i in 0..3 {
            flux[i] *= opts.chip.resolution_ut_per_lsb[i];
        }
    }
    Some(SerialLine {
        sensor,
        flux_ut: flux,
        timestamp_ms,
    })
}

/// Parse a raw serial capture into complete frames. Total: malformed lines
/// are skipped and counted, never fatal; the only error is an empty result.
pub fn parse_serial_log(
    text: &str,
    opts: &ParseOptions,
) -> Result<(Vec<FluxSample>, ParseReport), DatalogError> {
    let mut report = ParseReport::default();
    let mut samples = Vec::new();
    let mut slots: Vec<Option<Vector3<f64>>> = vec![None; opts.sensor_count];
    let mut filled = 0usize;
    let mut frame_timestamp: Option<f64> = None;

    for raw_line in text.lines() {
        if raw_line.trim().is_empty() {
            continue;
        }
        let Some(line) = parse_line(raw_line, opts) else {
            report.bad_lines += 1;
            continue;
        };
        if slots[line.sensor].is_some() {
            // next frame started before this one completed
            report.frames_dropped += 1;
            slots.iter_mut().for_each(|s| *s = None);
            filled = 0;
            frame_timestamp = None;
        }
        slots[line.sensor] = Some(line.flux_ut);
        filled += 1;
        if line.timestamp_ms.is_some() {
            frame_timestamp = line.timestamp_ms;
        }
        if filled == opts.sensor_count {
            let fluxes = slots.iter_mut().map(|s| s.take().unwrap()).collect();
            let timestamp = frame_timestamp.unwrap_or(report.frames_parsed as f64);
            samples.push(FluxSample::new(fluxes, timestamp));
            report.frames_parsed += 1;
            filled = 0;
            frame_timestamp = None;
        }
    }
    if filled > 0 {
        // partial trailing frame
        report.frames_dropped += 1;
    }
    if samples.is_empty() {
        return Err(DatalogError::EmptyLog { report });
    }
    Ok((samples, report))
}

/// Arithmetic mean of the first `n` samples, per sensor per axis; the result
/// carries the timestamp of the last averaged sample.
pub fn average_frames(samples: &[FluxSample], n: usize) -> Result<FluxSample, DatalogError> {
    if samples.len() < n || n == 0 {
        return Err(DatalogError::InsufficientSamples {
            have: samples.len(),
            need: n.max(1),
        });
    }
    let sensors = samples[0].fluxes_ut.len();
    let mut acc = vec![Vector3::zeros(); sensors];
    for sample in &samples[..n] {
        for (a, b) in acc.iter_mut().zip(&sample.fluxes_ut) {
            *a += b;
        }
    }
    for a in acc.iter_mut() {
        *a /= n as f64;
    }
    Ok(FluxSample::new(acc, samples[n - 1].timestamp_ms))
}

/// 17-significant-digit decimal: round-trips every finite f64 bit-exactly.
fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str, line: u64) -> Result<f64, DatalogError> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| DatalogError::MalformedRow {
            line,
            reason: format!("bad float {s:?}: {e}"),
        })
}

const SENSORS_IN_FILE: usize = 8;

fn dataset_header() -> Vec<String> {
    let mut cols = Vec::new();
    for r in 0..3 {
        for c in 0..4 {
            cols.push(format!("t{r}{c}"));
        }
    }
    cols.push("mass_g".into());
    for axis in ["x", "y", "z"] {
        cols.push(format!("lever_{axis}_mm"));
    }
    for s in 0..SENSORS_IN_FILE {
        for axis in ["x", "y", "z"] {
            cols.push(format!("s{s}_b{axis}"));
        }
    }
    cols
}

/// Write a dataset as CSV: 12 row-major pose entries, mass, lever, and the
/// 24 flux values per record.
pub fn write_dataset(path: &Path, dataset: &CalibrationDataset) -> Result<(), DatalogError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(dataset_header())?;
    for rec in &dataset.records {
        let mut row: Vec<String> = Vec::with_capacity(40);
        let r = rec.flange.rotation.matrix();
        for i in 0..3 {
            for j in 0..3 {
                row.push(format_f64(r[(i, j)]));
            }
            row.push(format_f64(rec.flange.translation[i]));
        }
        row.push(format_f64(rec.mass_g));
        for i in 0..3 {
            row.push(format_f64(rec.lever_mm[i]));
        }
        for v in rec.flux_ut.iter() {
            row.push(format_f64(*v));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset written by [`write_dataset`]; the round trip is
/// bit-identical field for field.
pub fn read_dataset(path: &Path) -> Result<CalibrationDataset, DatalogError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let expected = dataset_header();
    {
        let headers = reader.headers()?;
        if headers.len() != expected.len() {
            return Err(DatalogError::SchemaMismatch {
                expected: format!("{} columns", expected.len()),
                found: format!("{} columns", headers.len()),
            });
        }
        for (found, want) in headers.iter().zip(&expected) {
            if found != want {
                return Err(DatalogError::SchemaMismatch {
                    expected: want.clone(),
                    found: found.to_string(),
                });
            }
        }
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != expected.len() {
            return Err(DatalogError::SchemaMismatch {
                expected: format!("{} columns", expected.len()),
                found: format!("{} columns at line {line}", row.len()),
            });
        }
        let get = |i: usize| parse_f64(&row[i], line);
        let mut rot = Matrix3::zeros();
        let mut trans = Vector3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                rot[(i, j)] = get(4 * i + j)?;
            }
            trans[i] = get(4 * i + 3)?;
        }
        let rotation = Rotation::from_matrix(rot).map_err(|e| DatalogError::MalformedRow {
            line,
            reason: format!("pose rotation: {e}"),
        })?;
        let mass_g = get(12)?;
        let lever_mm = Vector3::new(get(13)?, get(14)?, get(15)?);
        let mut flux = DVector::zeros(3 * SENSORS_IN_FILE);
        for i in 0..3 * SENSORS_IN_FILE {
            flux[i] = get(16 + i)?;
        }
        records.push(CalibrationRecord {
            flange: Transform::new(rotation, trans),
            mass_g,
            lever_mm,
            flux_ut: flux,
        });
    }
    Ok(CalibrationDataset { records })
}

/// Write sweep measurements: `axis, commanded_mm, bx_uT, by_uT, bz_uT`.
pub fn write_sweep(path: &Path, sweep: &[SweepPoint]) -> Result<(), DatalogError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["axis", "commanded_mm", "bx_uT", "by_uT", "bz_uT"])?;
    for p in sweep {
        w.write_record([
            p.axis.to_string(),
            format_f64(p.commanded_mm),
            format_f64(p.flux_ut.x),
            format_f64(p.flux_ut.y),
            format_f64(p.flux_ut.z),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepPoint>, DatalogError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != 5 {
            return Err(DatalogError::SchemaMismatch {
                expected: "5 columns".into(),
                found: format!("{} columns at line {line}", row.len()),
            });
        }
        let axis = match row[0].trim() {
            "x" => Axis::X,
            "y" => Axis::Y,
            "z" => Axis::Z,
            other => {
                return Err(DatalogError::MalformedRow {
                    line,
                    reason: format!("unknown axis {other:?}"),
                })
            }
        };
        out.push(SweepPoint {
            axis,
            commanded_mm: parse_f64(&row[1], line)?,
            flux_ut: Vector3::new(
                parse_f64(&row[2], line)?,
                parse_f64(&row[3], line)?,
                parse_f64(&row[4], line)?,
            ),
        });
    }
    Ok(out)
}

/// Write line-delimited streaming records to any sink.
pub fn write_stream_records<W: Write>(
    mut sink: W,
    records: impl IntoIterator<Item = crate::estimation::TimedWrench>,
) -> Result<(), DatalogError> {
    for record in records {
        writeln!(sink, "{}", crate::estimation::format_record(&record))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{calibration_poses, linear_dataset, LinearWorld, NoiseSpec};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn frame_lines(frame: usize, corrupt_line: Option<usize>) -> String {
        let mut out = String::new();
        for s in 0..8 {
            if corrupt_line == Some(s) {
                out.push_str("S?: garbage here\n");
            } else {
                out.push_str(&format!("S{s}: {} {} {}\n", frame, s, frame + s));
            }
        }
        out
    }

    #[test]
    fn eight_lines_make_one_sample() {
        let (samples, report) =
            parse_serial_log(&frame_lines(1, None), &ParseOptions::default()).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(report.frames_parsed, 1);
        assert_eq!(report.frames_dropped, 0);
        assert_eq!(report.bad_lines, 0);
    }

    #[test]
    fn corrupt_line_drops_exactly_one_frame() {
        let text = format!("{}{}", frame_lines(1, None), frame_lines(2, Some(3)));
        let (samples, report) = parse_serial_log(&text, &ParseOptions::default()).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(report.frames_parsed, 1);
        assert_eq!(report.frames_dropped, 1);
        assert_eq!(report.bad_lines, 1);
    }

    #[test]
    fn lsb_counts_scale_by_chip_resolution() {
        let mut text = String::new();
        for s in 0..8 {
            if s == 3 {
                text.push_str("S3: 1 0 -2\n");
            } else {
                text.push_str(&format!("S{s}: 0 0 0\n"));
            }
        }
        let (samples, _) = parse_serial_log(&text, &ParseOptions::default()).unwrap();
        assert_relative_eq!(
            samples[0].fluxes_ut[3],
            Vector3::new(6.009, 0.0, -19.36),
            epsilon = 1e-12
        );
    }

    #[test]
    fn decimals_are_microtesla_and_timestamps_are_kept() {
        let mut text = String::new();
        for s in 0..8 {
            text.push_str(&format!("t={} S{s}: 1.5 -2.25 3.0\n", 100 + s));
        }
        let (samples, _) = parse_serial_log(&text, &ParseOptions::default()).unwrap();
        assert_eq!(samples[0].fluxes_ut[0], Vector3::new(1.5, -2.25, 3.0));
        assert_eq!(samples[0].timestamp_ms, 107.0);
    }

    #[test]
    fn unit_mode_override_beats_heuristic() {
        let mut text = String::new();
        for s in 0..8 {
            text.push_str(&format!("S{s}: 1 1 1\n"));
        }
        let opts = ParseOptions {
            units: UnitMode::MicroTesla,
            ..ParseOptions::default()
        };
        let (samples, _) = parse_serial_log(&text, &opts).unwrap();
        assert_eq!(samples[0].fluxes_ut[0], Vector3::new(1.0, 1.0, 1.0));
    }

    #[test]
    fn repeated_sensor_index_closes_the_frame() {
        // sensor 0 twice: the first (incomplete) frame is dropped
        let text = "S0: 1 1 1\nS0: 2 2 2\n";
        match parse_serial_log(text, &ParseOptions::default()) {
            Err(DatalogError::EmptyLog { report }) => {
                assert_eq!(report.frames_dropped, 2); // restart + trailing partial
                assert_eq!(report.frames_parsed, 0);
            }
            other => panic!("expected EmptyLog, got {other:?}"),
        }
    }

    #[test]
    fn parser_is_total_on_fuzzed_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        for _ in 0..2000 {
            let len = rng.gen_range(0..200);
            let junk: String = (0..len)
                .map(|_| char::from(rng.gen_range(9u8..127)))
                .collect();
            // must never panic; EmptyLog is fine
            let _ = parse_serial_log(&junk, &ParseOptions::default());
        }
    }

    #[test]
    fn averaging_identical_samples_is_identity() {
        let s = FluxSample::new(vec![Vector3::new(1.0, 2.0, 3.0); 8], 5.0);
        let avg = average_frames(&[s.clone(), s.clone(), s.clone()], 3).unwrap();
        assert_eq!(avg.fluxes_ut, s.fluxes_ut);
        assert_eq!(avg.timestamp_ms, 5.0);
    }

    #[test]
    fn two_sample_mean() {
        let a = FluxSample::new(vec![Vector3::zeros(); 8], 0.0);
        let b = FluxSample::new(vec![Vector3::new(2.0, 2.0, 2.0); 8], 10.0);
        let avg = average_frames(&[a, b], 2).unwrap();
        assert_eq!(avg.fluxes_ut[0], Vector3::new(1.0, 1.0, 1.0));
        assert_eq!(avg.timestamp_ms, 10.0);
    }

    #[test]
    fn hundred_noisy_samples_average_near_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let truth = Vector3::new(50.0, -20.0, 80.0);
        let samples: Vec<FluxSample> = (0..100)
            .map(|i| {
                FluxSample::new(
                    (0..8)
                        .map(|_| {
                            truth
                                + Vector3::new(
                                    normal.sample(&mut rng),
                                    normal.sample(&mut rng),
                                    normal.sample(&mut rng),
                                )
                        })
                        .collect(),
                    i as f64 * 10.0,
                )
            })
            .collect();
        let avg = average_frames(&samples, 100).unwrap();
        for b in &avg.fluxes_ut {
            assert!((b - truth).amax() < 0.3, "mean strayed: {b:?}");
        }
    }

    #[test]
    fn averaging_is_permutation_invariant_to_reassociation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<FluxSample> = (0..50)
            .map(|i| {
                FluxSample::new(
                    (0..8)
                        .map(|_| {
                            Vector3::new(
                                rng.gen_range(-100.0..100.0),
                                rng.gen_range(-100.0..100.0),
                                rng.gen_range(-100.0..100.0),
                            )
                        })
                        .collect(),
                    i as f64,
                )
            })
            .collect();
        let forward = average_frames(&samples, 50).unwrap();
        let mut reversed = samples.clone();
        reversed.reverse();
        let backward = average_frames(&reversed, 50).unwrap();
        for (a, b) in forward.fluxes_ut.iter().zip(&backward.fluxes_ut) {
            assert_relative_eq!(a, b, epsilon = 1e-12 * a.norm().max(1.0));
        }
    }

    #[test]
    fn insufficient_samples_error() {
        let s = FluxSample::new(vec![Vector3::zeros(); 8], 0.0);
        assert!(matches!(
            average_frames(&[s], 2),
            Err(DatalogError::InsufficientSamples { have: 1, need: 2 })
        ));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        write_dataset(&path, &CalibrationDataset::default()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1, "header only");
        let back = read_dataset(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn full_session_round_trips_bit_identically() {
        let world = LinearWorld::with_defaults();
        let dataset = linear_dataset(&world, &calibration_poses(31), &NoiseSpec::realistic(), 31);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        write_dataset(&path, &dataset).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.len(), dataset.len());
        for (a, b) in dataset.records.iter().zip(&back.records) {
            assert_eq!(
                a.flange.rotation.matrix(),
                b.flange.rotation.matrix(),
                "rotation bits changed"
            );
            assert_eq!(a.flange.translation, b.flange.translation);
            assert_eq!(a.mass_g, b.mass_g);
            assert_eq!(a.lever_mm, b.lever_mm);
            assert_eq!(a.flux_ut, b.flux_ut);
        }
    }

    #[test]
    fn wrong_flux_column_count_is_schema_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.csv");
        // header with 23 flux columns instead of 24
        let mut cols = dataset_header();
        cols.pop();
        std::fs::write(&path, cols.join(",") + "\n").unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(DatalogError::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let world = LinearWorld::with_defaults();
        let dataset = linear_dataset(&world, &calibration_poses(1)[..30], &NoiseSpec::clean(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        write_dataset(&path, &dataset).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        // corrupt a float on data line 3 (file line 4)
        let lines: Vec<&str> = text.lines().collect();
        let mut broken = lines[3].to_string();
        broken = broken.replacen("e", "x", 1);
        text = lines
            .iter()
            .enumerate()
            .map(|(i, l)| if i == 3 { broken.as_str() } else { *l })
            .collect::<Vec<_>>()
            .join("\n");
        std::fs::write(&path, text).unwrap();
        match read_dataset(&path) {
            Err(DatalogError::MalformedRow { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected MalformedRow, got {other:?}"),
        }
    }

    #[test]
    fn sweep_round_trips() {
        let sweep = crate::magnetics::dipole_sweep(1850.0, 6.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep(&path, &sweep).unwrap();
        let back = read_sweep(&path).unwrap();
        assert_eq!(back.len(), sweep.len());
        for (a, b) in sweep.iter().zip(&back) {
            assert_eq!(a.axis, b.axis);
            assert_eq!(a.commanded_mm, b.commanded_mm);
            assert_eq!(a.flux_ut, b.flux_ut);
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("axis,commanded_mm,bx_uT,by_uT,bz_uT"));
    }
}
