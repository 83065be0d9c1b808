//! Synthetic conditional datasets with known ground truth.
//!
//! Each condition (class, pitch, velocity) owns a Gaussian whose mean is
//! `centroid[class] + pitch_offset * pitch_axis + vel_offset * vel_axis`.
//! With `modes_per_condition = 2` the Gaussian splits into an equal mixture
//! shifted by +/- separation/2 along an ambiguity axis, which is what makes
//! velocity-field ambiguity measurable: near the midline both targets are
//! reachable, so a single regressed mean must fall between the modes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DfmError, Result};
use crate::linalg;
use crate::net::ConditionSet;
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub d: usize,
    pub classes: usize,
    pub pitches: usize,
    pub velocities: usize,
    /// One centroid per class, each of length `d`.
    pub class_centroids: Vec<Vec<f64>>,
    /// Unit vector along which pitch offsets are applied.
    pub pitch_axis: Vec<f64>,
    pub pitch_offsets: Vec<f64>,
    /// Unit vector along which velocity offsets are applied.
    pub vel_axis: Vec<f64>,
    pub vel_offsets: Vec<f64>,
    pub sigma_data: f64,
    /// 1 for a plain Gaussian per condition, 2 for the bimodal fixture.
    pub modes_per_condition: usize,
    /// Mode separation of the bimodal fixture (distance between mode means).
    pub separation: f64,
    /// Unit vector the two modes split along; only used when bimodal.
    pub ambiguity_axis: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteSample {
    pub x: Vec<f64>,
    pub cond: ConditionSet,
}

fn is_unit(v: &[f64]) -> bool {
    (linalg::norm2(v) - 1.0).abs() < 1e-9
}

impl DatasetSpec {
    /// Four classes on a circle of radius 2, twelve pitches stepping 0.25
    /// along the first axis, three velocity levels stepping 0.5 along the
    /// second; unimodal with `sigma_data = 0.1`. Small enough to train
    /// against in minutes, structured enough to exercise every condition
    /// table.
    pub fn default_spec(seed: u64) -> DatasetSpec {
        let classes = 4;
        let pitches = 12;
        let velocities = 3;
        let class_centroids = (0..classes)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
                vec![2.0 * angle.cos(), 2.0 * angle.sin()]
            })
            .collect();
        DatasetSpec {
            d: 2,
            classes,
            pitches,
            velocities,
            class_centroids,
            pitch_axis: vec![1.0, 0.0],
            pitch_offsets: (0..pitches)
                .map(|p| (p as f64 - (pitches as f64 - 1.0) / 2.0) * 0.25)
                .collect(),
            vel_axis: vec![0.0, 1.0],
            vel_offsets: (0..velocities)
                .map(|v| (v as f64 - (velocities as f64 - 1.0) / 2.0) * 0.5)
                .collect(),
            sigma_data: 0.1,
            modes_per_condition: 1,
            separation: 0.0,
            ambiguity_axis: vec![0.0, 1.0],
            seed,
        }
    }

    /// One-dimensional bimodal fixture: class centroids spaced 4.0 apart on
    /// the line, each condition an equal mixture of two modes `separation`
    /// apart. This is the dataset on which a mean-regression velocity field
    /// collapses to the midline while a distributional one does not.
    pub fn bimodal_line(classes: usize, separation: f64, sigma_data: f64, seed: u64) -> DatasetSpec {
        DatasetSpec {
            d: 1,
            classes,
            pitches: 1,
            velocities: 1,
            class_centroids: (0..classes).map(|k| vec![k as f64 * 4.0]).collect(),
            pitch_axis: vec![1.0],
            pitch_offsets: vec![0.0],
            vel_axis: vec![1.0],
            vel_offsets: vec![0.0],
            sigma_data,
            modes_per_condition: 2,
            separation,
            ambiguity_axis: vec![1.0],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DfmError::InputDomain(msg));
        if self.d == 0 {
            return fail("d must be >= 1".into());
        }
        if self.classes == 0 || self.pitches == 0 || self.velocities == 0 {
            return fail("classes, pitches, velocities must all be >= 1".into());
        }
        if self.class_centroids.len() != self.classes {
            return fail(format!(
                "expected {} class centroids, got {}",
                self.classes,
                self.class_centroids.len()
            ));
        }
        if self.class_centroids.iter().any(|c| c.len() != self.d) {
            return fail("every class centroid must have length d".into());
        }
        for i in 0..self.classes {
            for j in (i + 1)..self.classes {
                if self.class_centroids[i] == self.class_centroids[j] {
                    return fail(format!("class centroids {i} and {j} coincide"));
                }
            }
        }
        if self.pitch_axis.len() != self.d || self.vel_axis.len() != self.d {
            return fail("pitch and velocity axes must have length d".into());
        }
        if !is_unit(&self.pitch_axis) || !is_unit(&self.vel_axis) {
            return fail("pitch and velocity axes must be unit vectors".into());
        }
        if self.pitch_offsets.len() != self.pitches || self.vel_offsets.len() != self.velocities {
            return fail("offset lists must match table sizes".into());
        }
        if !(self.sigma_data > 0.0) {
            return fail(format!("sigma_data must be > 0, got {}", self.sigma_data));
        }
        match self.modes_per_condition {
            1 => {}
            2 => {
                if !(self.separation > 0.0) {
                    return fail("bimodal spec needs separation > 0".into());
                }
                if self.ambiguity_axis.len() != self.d || !is_unit(&self.ambiguity_axis) {
                    return fail("bimodal spec needs a unit ambiguity axis of length d".into());
                }
            }
            m => return fail(format!("modes_per_condition must be 1 or 2, got {m}")),
        }
        Ok(())
    }

    /// Mean of the (pre-split) conditional Gaussian.
    pub fn condition_mean(&self, cond: ConditionSet) -> Result<Vec<f64>> {
        self.check_cond(cond)?;
        let mut mean = self.class_centroids[cond.class_id].clone();
        linalg::axpy(&mut mean, self.pitch_offsets[cond.pitch_id], &self.pitch_axis);
        linalg::axpy(&mut mean, self.vel_offsets[cond.velocity_id], &self.vel_axis);
        Ok(mean)
    }

    /// The one or two mode means of a condition's distribution.
    pub fn mode_means(&self, cond: ConditionSet) -> Result<Vec<Vec<f64>>> {
        let mean = self.condition_mean(cond)?;
        if self.modes_per_condition == 1 {
            return Ok(vec![mean]);
        }
        let half = self.separation / 2.0;
        let mut hi = mean.clone();
        let mut lo = mean;
        linalg::axpy(&mut hi, half, &self.ambiguity_axis);
        linalg::axpy(&mut lo, -half, &self.ambiguity_axis);
        Ok(vec![hi, lo])
    }

    pub fn check_cond(&self, cond: ConditionSet) -> Result<()> {
        if cond.class_id >= self.classes
            || cond.pitch_id >= self.pitches
            || cond.velocity_id >= self.velocities
        {
            return Err(DfmError::InputDomain(format!(
                "condition ({}, {}, {}) out of bounds for spec ({}, {}, {})",
                cond.class_id, cond.pitch_id, cond.velocity_id, self.classes, self.pitches, self.velocities
            )));
        }
        Ok(())
    }

    /// All conditions in (class, pitch, velocity) lexicographic order.
    pub fn conditions(&self) -> Vec<ConditionSet> {
        let mut out = Vec::with_capacity(self.classes * self.pitches * self.velocities);
        for c in 0..self.classes {
            for p in 0..self.pitches {
                for v in 0..self.velocities {
                    out.push(ConditionSet::new(c, p, v));
                }
            }
        }
        out
    }

    /// Smallest distance between any two class centroids.
    pub fn min_class_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.classes {
            for j in (i + 1)..self.classes {
                best = best.min(linalg::euclidean(&self.class_centroids[i], &self.class_centroids[j]));
            }
        }
        best
    }
}

/// Generate `n_per_condition` samples for every condition. Each condition
/// draws from its own seed-derived stream, so adding conditions or changing
/// `n_per_condition` never perturbs another condition's draws. In the bimodal
/// case samples alternate modes by index, giving an exactly balanced mixture
/// for even n.
pub fn make_dataset(spec: &DatasetSpec, n_per_condition: usize) -> Result<Vec<NoteSample>> {
    spec.validate()?;
    if n_per_condition == 0 {
        return Err(DfmError::InputDomain("n_per_condition must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(spec.classes * spec.pitches * spec.velocities * n_per_condition);
    for cond in spec.conditions() {
        let mean = spec.condition_mean(cond)?;
        let mut r = rng::derive_rng(
            spec.seed,
            &[tag::DATAGEN, cond.class_id as u64, cond.pitch_id as u64, cond.velocity_id as u64],
        );
        for i in 0..n_per_condition {
            let mut x = mean.clone();
            let noise = rng::standard_normal_vec(&mut r, spec.d);
            linalg::axpy(&mut x, spec.sigma_data, &noise);
            if spec.modes_per_condition == 2 {
                let shift = if i % 2 == 0 { 0.5 } else { -0.5 } * spec.separation;
                linalg::axpy(&mut x, shift, &spec.ambiguity_axis);
            }
            out.push(NoteSample { x, cond });
        }
    }
    Ok(out)
}

/// One exact draw from a condition's distribution, using the caller's rng
/// stream. Bimodal conditions pick a mode uniformly (the same equal-weight
/// mixture `make_dataset` stratifies over).
pub fn ground_truth_sampler<R: Rng>(spec: &DatasetSpec, cond: ConditionSet, r: &mut R) -> Result<NoteSample> {
    spec.validate()?;
    let mut x = spec.condition_mean(cond)?;
    let noise = rng::standard_normal_vec(r, spec.d);
    linalg::axpy(&mut x, spec.sigma_data, &noise);
    if spec.modes_per_condition == 2 {
        let shift = if r.gen::<f64>() < 0.5 { 0.5 } else { -0.5 } * spec.separation;
        linalg::axpy(&mut x, shift, &spec.ambiguity_axis);
    }
    Ok(NoteSample { x, cond })
}

/// Write a dataset as CSV: a `# spec:` header line holding the generating
/// spec as JSON, a column header, then one row per sample. Floats use Rust's
/// shortest-roundtrip formatting, so read_csv restores them bit-exactly.
pub fn write_csv(path: &Path, spec: &DatasetSpec, samples: &[NoteSample]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let spec_json = serde_json::to_string(spec)
        .map_err(|e| DfmError::Validation(format!("spec not serializable: {e}")))?;
    writeln!(w, "# spec: {spec_json}")?;
    let cols: Vec<String> = (0..spec.d)
        .map(|i| format!("x{i}"))
        .chain(["class_id".into(), "pitch_id".into(), "velocity_id".into()])
        .collect();
    writeln!(w, "{}", cols.join(","))?;
    for s in samples {
        let mut fields: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
        fields.push(s.cond.class_id.to_string());
        fields.push(s.cond.pitch_id.to_string());
        fields.push(s.cond.velocity_id.to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<(DatasetSpec, Vec<NoteSample>)> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| DfmError::Validation("empty dataset file".into()))??;
    let spec_json = header
        .strip_prefix("# spec: ")
        .ok_or_else(|| DfmError::Validation("first line must be a '# spec:' header".into()))?;
    let spec: DatasetSpec = serde_json::from_str(spec_json)
        .map_err(|e| DfmError::Validation(format!("bad spec header: {e}")))?;
    spec.validate()?;
    let columns = lines
        .next()
        .ok_or_else(|| DfmError::Validation("missing column header".into()))??;
    let expected_cols = spec.d + 3;
    if columns.split(',').count() != expected_cols {
        return Err(DfmError::Validation(format!(
            "column header has {} fields, spec implies {expected_cols}",
            columns.split(',').count()
        )));
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(DfmError::Validation(format!(
                "line {}: {} fields, expected {expected_cols}",
                lineno + 3,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| DfmError::Validation(format!("line {}: bad float {s:?}", lineno + 3)))
        };
        let parse_u = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| DfmError::Validation(format!("line {}: bad id {s:?}", lineno + 3)))
        };
        let x: Vec<f64> = fields[..spec.d].iter().map(|s| parse_f(s)).collect::<Result<_>>()?;
        let cond = ConditionSet::new(
            parse_u(fields[spec.d])?,
            parse_u(fields[spec.d + 1])?,
            parse_u(fields[spec.d + 2])?,
        );
        spec.check_cond(cond)?;
        samples.push(NoteSample { x, cond });
    }
    Ok((spec, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid_and_well_separated() {
        let spec = DatasetSpec::default_spec(7);
        spec.validate().unwrap();
        assert!(spec.min_class_separation() > 6.0 * spec.sigma_data);
        // Pitch offsets strictly monotone.
        for w in spec.pitch_offsets.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn degenerate_noise_collapses_to_condition_mean() {
        let mut spec = DatasetSpec::default_spec(3);
        spec.sigma_data = 1e-300;
        let samples = make_dataset(&spec, 4).unwrap();
        for s in &samples {
            let mean = spec.condition_mean(s.cond).unwrap();
            for i in 0..spec.d {
                // Exactly-zero mean components keep a ~1e-300 noise residue.
                assert!((s.x[i] - mean[i]).abs() < 1e-250);
            }
        }
    }

    #[test]
    fn bimodal_line_moments_match_mixture_identity() {
        // Equal mixture at +/- 1 with sigma 0.05: variance (delta/2)^2 + sigma^2
        // = 1.0025, so std = 1.00124921972503928638...
        let spec = DatasetSpec::bimodal_line(1, 2.0, 0.05, 11);
        let n = 20_000;
        let samples = make_dataset(&spec, n).unwrap();
        let mean = samples.iter().map(|s| s.x[0]).sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s.x[0] - mean) * (s.x[0] - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean = {mean}");
        assert!((var.sqrt() - 1.0012492197250392863848606074161303).abs() < 0.02, "std = {}", var.sqrt());
    }

    #[test]
    fn bimodal_alternation_is_exactly_balanced() {
        let spec = DatasetSpec::bimodal_line(1, 2.0, 0.05, 13);
        let samples = make_dataset(&spec, 1000).unwrap();
        let above = samples.iter().filter(|s| s.x[0] > 0.0).count();
        // sigma = 0.05 vs mode offset 1.0: no draw plausibly crosses the midline.
        assert_eq!(above, 500);
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = DatasetSpec::default_spec(21);
        let a = make_dataset(&spec, 8).unwrap();
        let b = make_dataset(&spec, 8).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed = 22;
        let c = make_dataset(&other, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn per_condition_streams_are_stable_under_n_changes() {
        let spec = DatasetSpec::default_spec(5);
        let small = make_dataset(&spec, 2).unwrap();
        let big = make_dataset(&spec, 5).unwrap();
        // The first two draws of each condition are unchanged.
        for cond in spec.conditions() {
            let s: Vec<_> = small.iter().filter(|s| s.cond == cond).collect();
            let b: Vec<_> = big.iter().filter(|s| s.cond == cond).collect();
            assert_eq!(s[0], b[0]);
            assert_eq!(s[1], b[1]);
        }
    }

    #[test]
    fn ground_truth_mean_within_clt_bound() {
        let spec = DatasetSpec::default_spec(31);
        let cond = ConditionSet::new(2, 3, 1);
        let mean = spec.condition_mean(cond).unwrap();
        let mut r = rng::derive_rng(31, &[tag::GROUND_TRUTH]);
        let n = 10_000;
        let mut acc = vec![0.0; spec.d];
        for _ in 0..n {
            let s = ground_truth_sampler(&spec, cond, &mut r).unwrap();
            linalg::axpy(&mut acc, 1.0 / n as f64, &s.x);
        }
        for i in 0..spec.d {
            assert!(
                (acc[i] - mean[i]).abs() < 3.0 * spec.sigma_data / 100.0,
                "axis {i}: {} vs {}",
                acc[i],
                mean[i]
            );
        }
    }

    #[test]
    fn ground_truth_is_stream_deterministic() {
        let spec = DatasetSpec::bimodal_line(2, 1.0, 0.1, 9);
        let cond = ConditionSet::new(1, 0, 0);
        let mut r1 = rng::derive_rng(9, &[tag::GROUND_TRUTH, 4]);
        let mut r2 = rng::derive_rng(9, &[tag::GROUND_TRUTH, 4]);
        for _ in 0..50 {
            assert_eq!(
                ground_truth_sampler(&spec, cond, &mut r1).unwrap(),
                ground_truth_sampler(&spec, cond, &mut r2).unwrap()
            );
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = DatasetSpec::default_spec(1);
        s.sigma_data = 0.0;
        assert!(s.validate().is_err());

        let mut s = DatasetSpec::default_spec(1);
        s.class_centroids[1] = s.class_centroids[0].clone();
        assert!(s.validate().is_err());

        let mut s = DatasetSpec::default_spec(1);
        s.pitch_axis = vec![1.0, 1.0];
        assert!(s.validate().is_err());

        let mut s = DatasetSpec::default_spec(1);
        s.modes_per_condition = 3;
        assert!(s.validate().is_err());

        let mut s = DatasetSpec::bimodal_line(1, 1.0, 0.1, 0);
        s.separation = 0.0;
        assert!(s.validate().is_err());

        assert!(make_dataset(&DatasetSpec::default_spec(0), 0).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let spec = DatasetSpec::bimodal_line(2, 1.5, 0.07, 17);
        let samples = make_dataset(&spec, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_csv(&path, &spec, &samples).unwrap();
        let (spec2, samples2) = read_csv(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(samples, samples2);
    }

    #[test]
    fn csv_rejects_malformed_rows() {
        let spec = DatasetSpec::bimodal_line(1, 1.0, 0.1, 3);
        let samples = make_dataset(&spec, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_csv(&path, &spec, &samples).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("oops,0,0,0\n");
        std::fs::write(&path, &text).unwrap();
        assert!(read_csv(&path).is_err());

        std::fs::write(&path, "not a header\n").unwrap();
        assert!(read_csv(&path).is_err());
    }
}
