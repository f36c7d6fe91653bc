//! Datasets: synthetic Gaussian clusters, CSV I/O, the `.noise` sidecar,
//! stratified splitting, feature standardization and jitter augmentation.
//!
//! # CSV layout
//!
//! ```text
//! f0,f1,...,f{d-1},label
//! 0.25,-1.5,...,2
//! ```
//!
//! UTF-8, `.` decimal point, 0-based integer labels. Reals are written in the
//! shortest form that parses back to the same bits.
//!
//! # Noise sidecar
//!
//! Same stem as the CSV with a `.noise` extension: a header `index,clean,noisy`
//! followed by one row per sample.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoiseReport;
use crate::numerics::{norm, Mat, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Mat,
    pub clean_labels: Vec<usize>,
    pub noisy_labels: Vec<usize>,
    pub flip_mask: Vec<bool>,
    pub num_classes: usize,
}

impl Dataset {
    /// Clean dataset: noisy labels equal clean labels.
    pub fn new(features: Mat, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimInconsistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: num_classes,
            });
        }
        if features.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::DimInconsistency("non-finite feature value".into()));
        }
        Ok(Dataset {
            flip_mask: vec![false; labels.len()],
            noisy_labels: labels.clone(),
            clean_labels: labels,
            features,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.clean_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Replace the observed labels, recomputing the flip mask.
    pub fn set_noisy_labels(&mut self, noisy: Vec<usize>) -> Result<NoiseReport> {
        let report = NoiseReport::from_labels(&self.clean_labels, &noisy, self.num_classes)?;
        self.noisy_labels = noisy;
        self.flip_mask = report.flip_mask.clone();
        Ok(report)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Dataset {
            features: Mat::from_vec(indices.len(), self.dim(), data).expect("row lengths"),
            clean_labels: indices.iter().map(|&i| self.clean_labels[i]).collect(),
            noisy_labels: indices.iter().map(|&i| self.noisy_labels[i]).collect(),
            flip_mask: indices.iter().map(|&i| self.flip_mask[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self, labels: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Minimum distance between cluster centers.
    pub separation: f64,
    /// Within-class standard deviation per coordinate.
    pub spread: f64,
    pub seed: u64,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadSynthSpec(m.to_string()));
        if self.num_classes < 1 {
            return bad("need at least one class");
        }
        if self.per_class < 2 {
            return bad("per_class must be at least 2");
        }
        if self.dim < 1 {
            return bad("dim must be positive");
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad("separation must be positive");
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return bad("spread must be positive");
        }
        Ok(())
    }
}

const MAX_PLACEMENT_TRIES: usize = 10_000;

/// Isotropic Gaussian clusters, one per class, rows grouped by class.
///
/// Centers sit at `separation` times a random unit direction; a candidate is
/// rejected if it lands closer than `separation` to an accepted center.
pub fn synth_clusters(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    let mut tries = 0;
    while centers.len() < spec.num_classes {
        tries += 1;
        if tries > MAX_PLACEMENT_TRIES {
            return Err(Error::PlacementFailure(spec.num_classes));
        }
        let dir: Vec<f64> = (0..spec.dim).map(|_| rng.standard_normal()).collect();
        let n = norm(&dir);
        if n == 0.0 {
            continue;
        }
        let candidate: Vec<f64> = dir.iter().map(|x| spec.separation * x / n).collect();
        let far_enough = centers.iter().all(|c| {
            let d2: f64 = c.iter().zip(&candidate).map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() >= spec.separation
        });
        if far_enough {
            centers.push(candidate);
        }
    }

    let n = spec.num_classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            for c in center {
                data.push(c + spec.spread * rng.standard_normal());
            }
            labels.push(class);
        }
    }
    Dataset::new(Mat::from_vec(n, spec.dim, data)?, labels, spec.num_classes)
}

pub fn one_hot(label: usize, num_classes: usize) -> Result<Vec<f64>> {
    if label >= num_classes {
        return Err(Error::IndexOutOfRange {
            index: label,
            len: num_classes,
        });
    }
    let mut v = vec![0.0; num_classes];
    v[label] = 1.0;
    Ok(v)
}

/// `x` plus independent `N(0, jitter_std²)` noise per coordinate.
pub fn augment(x: &[f64], jitter_std: f64, rng: &mut Rng) -> Vec<f64> {
    if jitter_std == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .map(|v| v + jitter_std * rng.standard_normal())
        .collect()
}

pub fn csv_string(dataset: &Dataset) -> String {
    let mut out = String::new();
    for k in 0..dataset.dim() {
        let _ = write!(out, "f{k},");
    }
    out.push_str("label\n");
    for i in 0..dataset.len() {
        for v in dataset.row(i) {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{}", dataset.clean_labels[i]);
    }
    out
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, csv_string(dataset)).map_err(|e| Error::io(path, e))
}

/// Parse the CSV layout described in the module docs. The class count is
/// `max label + 1`.
pub fn parse_csv(text: &str, path: &Path) -> Result<Dataset> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    let dim = cols.len().saturating_sub(1);
    let header_ok = dim >= 1
        && cols[dim] == "label"
        && cols[..dim]
            .iter()
            .enumerate()
            .all(|(k, c)| *c == format!("f{k}"));
    if !header_ok {
        return Err(parse_err(
            1,
            format!("expected header f0,...,f{{d-1}},label, got {header:?}"),
        ));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::DimInconsistency(format!(
                "{}:{line_no}: expected {} fields, found {}",
                path.display(),
                dim + 1,
                fields.len()
            )));
        }
        for f in &fields[..dim] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad number {f:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("non-finite value {f:?}")));
            }
            data.push(v);
        }
        let label: usize = fields[dim]
            .trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad label {:?}", fields[dim])))?;
        labels.push(label);
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let rows = labels.len();
    Dataset::new(Mat::from_vec(rows, dim, data)?, labels, num_classes)
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

/// `d.csv` → `d.noise`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("noise")
}

pub fn sidecar_string(clean: &[usize], noisy: &[usize]) -> String {
    let mut out = String::from("index,clean,noisy\n");
    for (i, (c, n)) in clean.iter().zip(noisy).enumerate() {
        let _ = writeln!(out, "{i},{c},{n}");
    }
    out
}

pub fn save_sidecar(path: &Path, clean: &[usize], noisy: &[usize]) -> Result<()> {
    fs::write(path, sidecar_string(clean, noisy)).map_err(|e| Error::io(path, e))
}

/// Read a sidecar and check it against the dataset's clean labels. Returns the
/// noisy labels in row order.
pub fn load_sidecar(path: &Path, dataset: &Dataset) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    match lines.next() {
        Some((_, "index,clean,noisy")) => {}
        _ => return Err(parse_err(1, "expected header index,clean,noisy".into())),
    }
    let mut noisy = vec![usize::MAX; dataset.len()];
    for (line_no, line) in lines {
        if line.is_empty() {
            continue;
        }
        let nums: Vec<usize> = line
            .split(',')
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(line_no, format!("bad row {line:?}")))?;
        let [index, clean, label] = nums[..] else {
            return Err(parse_err(line_no, "expected three fields".into()));
        };
        if index >= dataset.len() {
            return Err(parse_err(line_no, format!("index {index} out of range")));
        }
        if dataset.clean_labels[index] != clean {
            return Err(parse_err(
                line_no,
                format!("clean label {clean} disagrees with dataset row {index}"),
            ));
        }
        if label >= dataset.num_classes {
            return Err(parse_err(line_no, format!("label {label} out of range")));
        }
        noisy[index] = label;
    }
    if let Some(missing) = noisy.iter().position(|&l| l == usize::MAX) {
        return Err(Error::DimInconsistency(format!(
            "{}: no entry for row {missing}",
            path.display()
        )));
    }
    Ok(noisy)
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    /// Row indices into the source dataset, ascending.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Stratified split on the clean label; each class sends
/// `round(test_fraction · n_c)` samples to the test side.
pub fn split(dataset: &Dataset, test_fraction: f64, rng: &mut Rng) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::BadFraction(test_fraction));
    }
    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    for class in 0..dataset.num_classes {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.clean_labels[i] == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        let n_test = (test_fraction * members.len() as f64).round() as usize;
        if n_test == 0 || n_test == members.len() {
            return Err(Error::ClassTooSmall {
                class,
                count: members.len(),
            });
        }
        rng.shuffle(&mut members);
        test_indices.extend_from_slice(&members[..n_test]);
        train_indices.extend_from_slice(&members[n_test..]);
    }
    train_indices.sort_unstable();
    test_indices.sort_unstable();
    Ok(Split {
        train: dataset.subset(&train_indices),
        test: dataset.subset(&test_indices),
        train_indices,
        test_indices,
    })
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit on `dataset`; constant columns keep a scale of 1.
    pub fn fit(dataset: &Dataset) -> Self {
        let (n, d) = (dataset.len() as f64, dataset.dim());
        let mut mean = vec![0.0; d];
        for row in dataset.features.iter_rows() {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in dataset.features.iter_rows() {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, dataset: &Dataset) -> Dataset {
        let mut out = dataset.clone();
        for r in 0..out.len() {
            let row = out.features.row_mut(r);
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        out
    }

    /// Root-mean-square of the per-dimension scales.
    pub fn rms_scale(&self) -> f64 {
        (self.std.iter().map(|s| s * s).sum::<f64>() / self.std.len() as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::argmax;

    fn spec(per_class: usize, spread: f64) -> SynthSpec {
        SynthSpec {
            num_classes: 3,
            per_class,
            dim: 4,
            separation: 10.0,
            spread,
            seed: 5,
        }
    }

    #[test]
    fn synth_counts_and_determinism() {
        let d = synth_clusters(&spec(100, 1.0)).unwrap();
        assert_eq!(d.len(), 300);
        assert_eq!(d.class_counts(&d.clean_labels), vec![100, 100, 100]);
        assert_eq!(d.noisy_labels, d.clean_labels);
        assert!(d.flip_mask.iter().all(|f| !f));
        let again = synth_clusters(&spec(100, 1.0)).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn synth_tiny_spread_collapses_to_centers() {
        let d = synth_clusters(&spec(5, 1e-300)).unwrap();
        for class in 0..3 {
            let first = d.row(class * 5).to_vec();
            for i in 0..5 {
                assert_eq!(d.row(class * 5 + i), first.as_slice());
            }
            assert!((norm(&first) - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn synth_centers_respect_separation() {
        let spec = SynthSpec {
            num_classes: 6,
            per_class: 2,
            dim: 8,
            separation: 3.0,
            spread: 1e-300,
            seed: 1,
        };
        let d = synth_clusters(&spec).unwrap();
        for a in 0..6 {
            for b in a + 1..6 {
                let dist: f64 = d
                    .row(2 * a)
                    .iter()
                    .zip(d.row(2 * b))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist >= 3.0 - 1e-9);
            }
        }
    }

    #[test]
    fn synth_placement_failure() {
        // nine classes cannot be 60 degrees apart on a circle
        let spec = SynthSpec {
            num_classes: 9,
            per_class: 2,
            dim: 2,
            separation: 1.0,
            spread: 1.0,
            seed: 1,
        };
        assert!(matches!(
            synth_clusters(&spec),
            Err(Error::PlacementFailure(9))
        ));
        assert!(matches!(
            synth_clusters(&SynthSpec {
                per_class: 1,
                ..spec
            }),
            Err(Error::BadSynthSpec(_))
        ));
    }

    #[test]
    fn well_separated_clusters_are_nearest_centroid_separable() {
        let d = synth_clusters(&SynthSpec {
            num_classes: 4,
            per_class: 200,
            dim: 8,
            separation: 10.0,
            spread: 1.0,
            seed: 3,
        })
        .unwrap();
        let s = split(&d, 0.5, &mut Rng::new(4)).unwrap();
        // nearest-centroid oracle fitted on the train half
        let mut centroids = vec![vec![0.0; 8]; 4];
        let counts = s.train.class_counts(&s.train.clean_labels);
        for i in 0..s.train.len() {
            let c = s.train.clean_labels[i];
            for (acc, x) in centroids[c].iter_mut().zip(s.train.row(i)) {
                *acc += x / counts[c] as f64;
            }
        }
        let correct = (0..s.test.len())
            .filter(|&i| {
                let neg_dist: Vec<f64> = centroids
                    .iter()
                    .map(|c| {
                        -c.iter()
                            .zip(s.test.row(i))
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>()
                    })
                    .collect();
                argmax(&neg_dist) == s.test.clean_labels[i]
            })
            .count();
        assert!(correct as f64 / s.test.len() as f64 >= 0.99);
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(0, 3).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(one_hot(2, 3).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(one_hot(4, 7).unwrap().iter().sum::<f64>(), 1.0);
        assert!(matches!(one_hot(3, 3), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn csv_small_file() {
        let text = "f0,f1,label\n1.5,2,0\n-3,4e-2,1\n";
        let d = parse_csv(text, Path::new("x.csv")).unwrap();
        assert_eq!((d.features.rows(), d.features.cols()), (2, 2));
        assert_eq!(d.features.as_slice(), &[1.5, 2.0, -3.0, 0.04]);
        assert_eq!(d.clean_labels, vec![0, 1]);
        assert_eq!(d.num_classes, 2);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let err = parse_csv("f0,f2,label\n1,2,0\n", Path::new("bad.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let err = parse_csv("f0,label\n1,0\nx,1\n", Path::new("bad.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_csv("f0,label\n1,0\n1,2,1\n", Path::new("bad.csv")).unwrap_err();
        assert!(matches!(err, Error::DimInconsistency(_)), "{err}");
        let err = parse_csv("f0,label\n1,-1\n", Path::new("bad.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let d = synth_clusters(&spec(20, 0.7)).unwrap();
        let back = parse_csv(&csv_string(&d), Path::new("mem.csv")).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn sidecar_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_clusters(&spec(4, 1.0)).unwrap();
        let mut noisy = d.clean_labels.clone();
        noisy[0] = 2;
        noisy[5] = 0;
        let path = dir.path().join("d.noise");
        save_sidecar(&path, &d.clean_labels, &noisy).unwrap();
        assert_eq!(load_sidecar(&path, &d).unwrap(), noisy);
        assert_eq!(sidecar_path(Path::new("a/d.csv")), Path::new("a/d.noise"));

        fs::write(&path, "index,clean,noisy\n0,1,1\n").unwrap();
        assert!(matches!(
            load_sidecar(&path, &d),
            Err(Error::Parse { line: 2, .. })
        ));
        fs::write(&path, "index,clean,noisy\n0,0,1\n").unwrap();
        assert!(matches!(
            load_sidecar(&path, &d),
            Err(Error::DimInconsistency(_))
        ));
    }

    #[test]
    fn augment_examples() {
        let x = [1.0, -2.0, 0.5];
        assert_eq!(augment(&x, 0.0, &mut Rng::new(1)), x.to_vec());
        let a = augment(&x, 0.3, &mut Rng::new(2));
        let b = augment(&x, 0.3, &mut Rng::new(2));
        assert_eq!(a, b);
        let mut rng = Rng::new(3);
        let n = 10_000;
        let mut mean = [0.0; 3];
        for _ in 0..n {
            for (m, v) in mean.iter_mut().zip(augment(&x, 0.3, &mut rng)) {
                *m += v / n as f64;
            }
        }
        // standard error 0.3/100; allow three of them
        for k in 0..3 {
            assert!((mean[k] - x[k]).abs() < 3.0 * 0.3 / 100.0);
        }
    }

    #[test]
    fn split_is_stratified_disjoint_and_seeded() {
        let d = synth_clusters(&spec(100, 1.0)).unwrap();
        let s = split(&d, 0.2, &mut Rng::new(8)).unwrap();
        assert_eq!(s.train.class_counts(&s.train.clean_labels), vec![80; 3]);
        assert_eq!(s.test.class_counts(&s.test.clean_labels), vec![20; 3]);
        let mut all: Vec<usize> = s
            .train_indices
            .iter()
            .chain(&s.test_indices)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
        let again = split(&d, 0.2, &mut Rng::new(8)).unwrap();
        assert_eq!(again.test_indices, s.test_indices);
        assert!(matches!(
            split(
                &synth_clusters(&spec(2, 1.0)).unwrap(),
                0.1,
                &mut Rng::new(1)
            ),
            Err(Error::ClassTooSmall { .. })
        ));
    }

    #[test]
    fn standardizer_moments() {
        let d = synth_clusters(&spec(50, 2.0)).unwrap();
        let st = Standardizer::fit(&d);
        let z = st.apply(&d);
        let refit = Standardizer::fit(&z);
        for k in 0..z.dim() {
            assert!(refit.mean[k].abs() < 1e-12);
            assert!((refit.std[k] - 1.0).abs() < 1e-12);
        }
    }
}
