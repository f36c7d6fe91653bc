//! Per-class embedding centroids and the similarity soft labels built from
//! them.
//!
//! Each epoch the centroid of class `c` is the normalized mean of the raw
//! embeddings of the `⌈f·n_c⌉` samples labeled `c` with the smallest outlier
//! discount `u`, where the keep fraction `f` falls linearly from 1 to
//! `final_fraction` over the run.
//!
//! Snapshots written by [`ClassEmbeddings::write_snapshot`] follow the model
//! checkpoint conventions: little-endian, magic `NCODCEN\0`, u32 version (1),
//! u64 class count, u64 embedding dim, u64 epoch, one u64 used count per class,
//! then the centroid vectors row-major as raw f64 bits.

use std::cmp::Ordering;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{read_u32, read_u64};
use crate::numerics::{dot_unchecked, l2_normalize};

const SNAPSHOT_MAGIC: &[u8; 8] = b"NCODCEN\0";
const SNAPSHOT_VERSION: u32 = 1;

/// Share of each class used for its centroid at `epoch` (0-based).
pub fn keep_fraction(epoch: usize, total_epochs: usize, final_fraction: f64) -> Result<f64> {
    if !(final_fraction > 0.0 && final_fraction <= 1.0) {
        return Err(Error::BadFraction(final_fraction));
    }
    if epoch >= total_epochs {
        return Err(Error::IndexOutOfRange {
            index: epoch,
            len: total_epochs,
        });
    }
    if total_epochs == 1 {
        return Ok(1.0);
    }
    let t = epoch as f64 / (total_epochs - 1) as f64;
    Ok(1.0 - (1.0 - final_fraction) * t)
}

/// `⌈fraction · n⌉`, tolerant of products like `0.7 · 10 = 7.000000000000001`.
fn subset_size(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let size = (raw - 1e-9 * raw.abs().max(1.0)).ceil() as usize;
    size.clamp(1, n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    vectors: Vec<Vec<f64>>,
    used_counts: Vec<usize>,
    epoch: usize,
}

impl ClassEmbeddings {
    /// Centroids for `num_classes` classes from per-sample embeddings.
    pub fn compute(
        embeddings: &[Vec<f64>],
        labels: &[usize],
        u: &[f64],
        fraction: f64,
        num_classes: usize,
        epoch: usize,
    ) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::BadFraction(fraction));
        }
        for len in [labels.len(), u.len()] {
            if len != embeddings.len() {
                return Err(Error::LengthMismatch {
                    left: embeddings.len(),
                    right: len,
                });
            }
        }
        let dim = embeddings.first().map_or(0, Vec::len);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (i, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(Error::IndexOutOfRange {
                    index: label,
                    len: num_classes,
                });
            }
            if embeddings[i].len() != dim {
                return Err(Error::LengthMismatch {
                    left: embeddings[i].len(),
                    right: dim,
                });
            }
            members[label].push(i);
        }

        let mut vectors = Vec::with_capacity(num_classes);
        let mut used_counts = Vec::with_capacity(num_classes);
        for (class, mut idx) in members.into_iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::EmptyClass(class));
            }
            let keep = subset_size(fraction, idx.len());
            idx.sort_by(|&a, &b| match u[a].total_cmp(&u[b]) {
                Ordering::Equal => a.cmp(&b),
                ord => ord,
            });
            idx.truncate(keep);
            idx.sort_unstable();

            let mut mean = vec![0.0; dim];
            for &i in &idx {
                for (m, e) in mean.iter_mut().zip(&embeddings[i]) {
                    *m += e;
                }
            }
            let inv = 1.0 / keep as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
            let unit = l2_normalize(&mean).map_err(|_| Error::DegenerateCentroid(class))?;
            vectors.push(unit);
            used_counts.push(keep);
        }
        Ok(ClassEmbeddings {
            vectors,
            used_counts,
            epoch,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn vector(&self, class: usize) -> &[f64] {
        &self.vectors[class]
    }

    pub fn used_counts(&self) -> &[usize] {
        &self.used_counts
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Cosine similarity of a unit vector `h` with the centroid of `class`.
    pub fn similarity(&self, h: &[f64], class: usize) -> f64 {
        dot_unchecked(h, &self.vectors[class])
    }

    pub fn write_snapshot<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        out.write_all(&(self.num_classes() as u64).to_le_bytes())?;
        out.write_all(&(self.dim() as u64).to_le_bytes())?;
        out.write_all(&(self.epoch as u64).to_le_bytes())?;
        for &c in &self.used_counts {
            out.write_all(&(c as u64).to_le_bytes())?;
        }
        for v in self.vectors.iter().flatten() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut input: R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(bad)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Checkpoint("bad centroid snapshot magic".into()));
        }
        if read_u32(&mut input).map_err(bad)? != SNAPSHOT_VERSION {
            return Err(Error::Checkpoint(
                "unsupported centroid snapshot version".into(),
            ));
        }
        let classes = read_u64(&mut input).map_err(bad)? as usize;
        let dim = read_u64(&mut input).map_err(bad)? as usize;
        let epoch = read_u64(&mut input).map_err(bad)? as usize;
        if classes > 1 << 20 || dim > 1 << 24 {
            return Err(Error::Checkpoint(
                "implausible centroid snapshot size".into(),
            ));
        }
        let used_counts = (0..classes)
            .map(|_| read_u64(&mut input).map(|c| c as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(bad)?;
        let mut vectors = Vec::with_capacity(classes);
        for _ in 0..classes {
            let v = (0..dim)
                .map(|_| read_u64(&mut input).map(f64::from_bits))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(bad)?;
            vectors.push(v);
        }
        Ok(ClassEmbeddings {
            vectors,
            used_counts,
            epoch,
        })
    }
}

/// One-hot-shaped soft label: a single weight on the labeled class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftLabel {
    pub class_index: usize,
    pub weight: f64,
    pub num_classes: usize,
}

impl SoftLabel {
    pub fn one_hot(class_index: usize, num_classes: usize) -> Self {
        SoftLabel {
            class_index,
            weight: 1.0,
            num_classes,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_classes];
        v[self.class_index] = self.weight;
        v
    }
}

/// Clamped similarity between normalized embedding `h` and its class centroid.
pub fn soft_label(h: &[f64], label: usize, centroids: &ClassEmbeddings) -> SoftLabel {
    SoftLabel {
        class_index: label,
        weight: centroids.similarity(h, label).max(0.0),
        num_classes: centroids.num_classes(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{norm, Rng};
    use proptest::prelude::*;

    #[test]
    fn keep_fraction_schedule() {
        assert_eq!(keep_fraction(0, 10, 0.5).unwrap(), 1.0);
        assert_eq!(keep_fraction(9, 10, 0.5).unwrap(), 0.5);
        // 1 - 0.5 * 150/300
        assert!((keep_fraction(150, 301, 0.5).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(keep_fraction(0, 1, 0.5).unwrap(), 1.0);
        assert!(matches!(
            keep_fraction(0, 5, 0.0),
            Err(Error::BadFraction(_))
        ));
        assert!(matches!(
            keep_fraction(0, 5, 1.5),
            Err(Error::BadFraction(_))
        ));
        assert!(keep_fraction(5, 5, 0.5).is_err());
    }

    #[test]
    fn subset_size_rounds_up_robustly() {
        assert_eq!(subset_size(0.5, 10), 5);
        assert_eq!(subset_size(0.7, 10), 7);
        assert_eq!(subset_size(0.51, 10), 6);
        assert_eq!(subset_size(0.01, 3), 1);
        assert_eq!(subset_size(1.0, 7), 7);
    }

    #[test]
    fn single_sample_classes() {
        let emb = vec![vec![3.0, 4.0], vec![0.0, 2.0]];
        let c = ClassEmbeddings::compute(&emb, &[0, 1], &[0.0, 0.0], 1.0, 2, 0).unwrap();
        assert_eq!(c.vector(0), &[0.6, 0.8]);
        assert_eq!(c.vector(1), &[0.0, 1.0]);
        assert_eq!(c.used_counts(), &[1, 1]);
    }

    #[test]
    fn two_sample_mean() {
        let emb = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![5.0, 5.0]];
        let c = ClassEmbeddings::compute(&emb, &[0, 0, 1], &[0.0; 3], 1.0, 2, 0).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((c.vector(0)[0] - r).abs() < 1e-15);
        assert!((c.vector(0)[1] - r).abs() < 1e-15);
    }

    #[test]
    fn lowest_u_subset_matches_sort_oracle() {
        let mut rng = Rng::new(12);
        let emb: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..3).map(|_| rng.uniform() + 0.1).collect())
            .collect();
        let u: Vec<f64> = (0..10).map(|_| rng.uniform()).collect();
        let labels = vec![0; 10];
        let got = ClassEmbeddings::compute(&emb, &labels, &u, 0.5, 1, 3).unwrap();
        assert_eq!(got.used_counts(), &[5]);
        assert_eq!(got.epoch(), 3);

        // oracle: sort (u, index) pairs, take five, average, normalize
        let mut pairs: Vec<(f64, usize)> = u.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let chosen: Vec<usize> = pairs[..5].iter().map(|p| p.1).collect();
        let mut mean = [0.0; 3];
        for &i in &chosen {
            for (m, e) in mean.iter_mut().zip(&emb[i]) {
                *m += e / 5.0;
            }
        }
        let n = (mean[0] * mean[0] + mean[1] * mean[1] + mean[2] * mean[2]).sqrt();
        for (g, m) in got.vector(0).iter().zip(&mean) {
            assert!((g - m / n).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_break_by_index() {
        let emb = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ];
        let c = ClassEmbeddings::compute(&emb, &[0; 4], &[0.0; 4], 0.25, 1, 0).unwrap();
        assert_eq!(c.vector(0), &[1.0, 0.0]);
    }

    #[test]
    fn errors() {
        let emb = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            ClassEmbeddings::compute(&emb, &[0, 0], &[0.0; 2], 1.0, 2, 0),
            Err(Error::EmptyClass(1))
        ));
        let emb = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert!(matches!(
            ClassEmbeddings::compute(&emb, &[0, 0], &[0.0; 2], 1.0, 1, 0),
            Err(Error::DegenerateCentroid(0))
        ));
        assert!(matches!(
            ClassEmbeddings::compute(&emb, &[0, 0], &[0.0; 2], 0.0, 1, 0),
            Err(Error::BadFraction(_))
        ));
    }

    #[test]
    fn soft_label_examples() {
        let emb = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let c = ClassEmbeddings::compute(&emb, &[0, 1], &[0.0; 2], 1.0, 2, 0).unwrap();
        assert_eq!(soft_label(&[1.0, 0.0], 0, &c).values(), vec![1.0, 0.0]);
        assert_eq!(soft_label(&[0.0, 1.0], 0, &c).values(), vec![0.0, 0.0]);
        let s = soft_label(&[-1.0, 0.0], 0, &c);
        assert_eq!(s.weight, 0.0);
        assert_eq!(SoftLabel::one_hot(2, 3).values(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut rng = Rng::new(2);
        let emb: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..4).map(|_| rng.standard_normal()).collect())
            .collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let c = ClassEmbeddings::compute(&emb, &labels, &[0.0; 12], 1.0, 3, 7).unwrap();
        let mut buf = Vec::new();
        c.write_snapshot(&mut buf).unwrap();
        assert_eq!(ClassEmbeddings::read_snapshot(buf.as_slice()).unwrap(), c);
    }

    fn sample_set() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, Vec<f64>)> {
        (4usize..24).prop_flat_map(|n| {
            (
                proptest::collection::vec(proptest::collection::vec(0.05f64..2.0, 3), n),
                proptest::collection::vec(0usize..2, n),
                proptest::collection::vec(0.0f64..1.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn full_fraction_equals_plain_class_mean((emb, mut labels, u) in sample_set()) {
            labels[0] = 0;
            labels[1] = 1;
            let c = ClassEmbeddings::compute(&emb, &labels, &u, 1.0, 2, 0).unwrap();
            for class in 0..2 {
                let members: Vec<&Vec<f64>> =
                    emb.iter().zip(&labels).filter(|(_, l)| **l == class).map(|(e, _)| e).collect();
                let mut phi = vec![0.0; 3];
                for e in &members {
                    for (p, x) in phi.iter_mut().zip(e.iter()) { *p += x; }
                }
                for p in &mut phi { *p /= members.len() as f64; }
                let n = norm(&phi);
                for (v, p) in c.vector(class).iter().zip(&phi) {
                    prop_assert!((v - p / n).abs() < 1e-12);
                }
                prop_assert!((norm(c.vector(class)) - 1.0).abs() < 1e-9);
                prop_assert_eq!(c.used_counts()[class], members.len());
            }
        }

        #[test]
        fn selection_ignores_sample_order(
            (emb, mut labels, u) in sample_set(),
            fraction in 0.1f64..1.0,
            seed in 0u64..1000,
        ) {
            labels[0] = 0;
            labels[1] = 1;
            let base = ClassEmbeddings::compute(&emb, &labels, &u, fraction, 2, 0).unwrap();
            let mut perm: Vec<usize> = (0..emb.len()).collect();
            Rng::new(seed).shuffle(&mut perm);
            let pe: Vec<Vec<f64>> = perm.iter().map(|&i| emb[i].clone()).collect();
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let pu: Vec<f64> = perm.iter().map(|&i| u[i]).collect();
            let permuted = ClassEmbeddings::compute(&pe, &pl, &pu, fraction, 2, 0).unwrap();
            prop_assert_eq!(base.used_counts(), permuted.used_counts());
            for class in 0..2 {
                for k in 0..3 {
                    prop_assert!((base.vector(class)[k] - permuted.vector(class)[k]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn soft_label_bounded(
            a in proptest::collection::vec(-1.0f64..1.0, 3),
            b in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let c = ClassEmbeddings::compute(std::slice::from_ref(&b), &[0], &[0.0], 1.0, 1, 0).unwrap();
            let h = l2_normalize(&a).unwrap();
            let s = soft_label(&h, 0, &c);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s.weight));
        }

        #[test]
        fn keep_fraction_monotone(total in 2usize..500, final_fraction in 0.05f64..1.0) {
            let mut prev = 1.0;
            for e in 0..total {
                let f = keep_fraction(e, total, final_fraction).unwrap();
                prop_assert!(f <= prev + 1e-15);
                prop_assert!(f >= final_fraction - 1e-15 && f <= 1.0);
                prev = f;
            }
        }
    }
}
