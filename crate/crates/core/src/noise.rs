//! Label-noise injection.
//!
//! Symmetric noise moves a label to a uniformly chosen *different* class;
//! asymmetric noise moves class `c` to its fixed partner `pair_map[c]`. By
//! default each sample flips independently with probability `rate`; the
//! exact-count mode instead flips exactly `round(rate · n)` samples (per mapped
//! class for asymmetric noise), chosen by a seeded shuffle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
}

/// Partial function `class -> partner class`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairMap {
    targets: Vec<Option<usize>>,
}

impl PairMap {
    /// `c -> (c + 1) mod C` for every class.
    pub fn cyclic(num_classes: usize) -> Self {
        PairMap {
            targets: (0..num_classes)
                .map(|c| Some((c + 1) % num_classes))
                .collect(),
        }
    }

    pub fn from_pairs(num_classes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut targets = vec![None; num_classes];
        for &(from, to) in pairs {
            if from >= num_classes || to >= num_classes {
                return Err(Error::BadPairMap(format!(
                    "pair ({from}, {to}) outside 0..{num_classes}"
                )));
            }
            if from == to {
                return Err(Error::BadPairMap(format!("class {from} mapped to itself")));
            }
            if targets[from].replace(to).is_some() {
                return Err(Error::BadPairMap(format!("class {from} mapped twice")));
            }
        }
        Ok(PairMap { targets })
    }

    pub fn num_classes(&self) -> usize {
        self.targets.len()
    }

    pub fn target(&self, class: usize) -> Option<usize> {
        self.targets.get(class).copied().flatten()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.targets
            .iter()
            .enumerate()
            .filter_map(|(c, t)| t.map(|t| (c, t)))
            .collect()
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.targets.len() != num_classes {
            return Err(Error::BadPairMap(format!(
                "map covers {} classes, data has {num_classes}",
                self.targets.len()
            )));
        }
        for (c, t) in self.targets.iter().enumerate() {
            match t {
                Some(t) if *t == c => {
                    return Err(Error::BadPairMap(format!("class {c} mapped to itself")))
                }
                Some(t) if *t >= num_classes => {
                    return Err(Error::BadPairMap(format!("class {c} mapped to {t}")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Asymmetric only; `None` means [`PairMap::cyclic`].
    pub pair_map: Option<PairMap>,
    pub exact_count: bool,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate,
            pair_map: None,
            exact_count: false,
        }
    }

    pub fn asymmetric(rate: f64, pair_map: Option<PairMap>) -> Self {
        NoiseSpec {
            kind: NoiseKind::Asymmetric,
            rate,
            pair_map,
            exact_count: false,
        }
    }

    pub fn apply(
        &self,
        labels: &[usize],
        num_classes: usize,
        rng: &mut Rng,
    ) -> Result<(Vec<usize>, NoiseReport)> {
        match self.kind {
            NoiseKind::Symmetric => {
                inject_symmetric_with(labels, num_classes, self.rate, self.exact_count, rng)
            }
            NoiseKind::Asymmetric => {
                let cyclic;
                let map = match &self.pair_map {
                    Some(m) => m,
                    None => {
                        cyclic = PairMap::cyclic(num_classes);
                        &cyclic
                    }
                };
                inject_asymmetric_with(labels, num_classes, self.rate, map, self.exact_count, rng)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseReport {
    pub flip_mask: Vec<bool>,
    /// `confusion[observed][clean]`.
    pub confusion: Vec<Vec<usize>>,
    pub realized_rate: f64,
}

impl NoiseReport {
    pub fn from_labels(clean: &[usize], noisy: &[usize], num_classes: usize) -> Result<Self> {
        if clean.len() != noisy.len() {
            return Err(Error::LengthMismatch {
                left: clean.len(),
                right: noisy.len(),
            });
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        let mut flip_mask = Vec::with_capacity(clean.len());
        for (&c, &o) in clean.iter().zip(noisy) {
            let len = num_classes;
            if c >= len {
                return Err(Error::IndexOutOfRange { index: c, len });
            }
            if o >= len {
                return Err(Error::IndexOutOfRange { index: o, len });
            }
            confusion[o][c] += 1;
            flip_mask.push(c != o);
        }
        let flipped = flip_mask.iter().filter(|f| **f).count();
        let realized_rate = if clean.is_empty() {
            0.0
        } else {
            flipped as f64 / clean.len() as f64
        };
        Ok(NoiseReport {
            flip_mask,
            confusion,
            realized_rate,
        })
    }

    pub fn num_flipped(&self) -> usize {
        self.flip_mask.iter().filter(|f| **f).count()
    }
}

fn check_inputs(labels: &[usize], num_classes: usize, rate: f64) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::SingleClass(num_classes));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::BadRate(rate));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: num_classes,
        });
    }
    Ok(())
}

/// Pick which of `candidates` to flip.
fn choose_flips(candidates: &[usize], rate: f64, exact: bool, rng: &mut Rng) -> Vec<usize> {
    if exact {
        let k = (rate * candidates.len() as f64).round() as usize;
        let mut order = candidates.to_vec();
        rng.shuffle(&mut order);
        let mut chosen = order[..k].to_vec();
        chosen.sort_unstable();
        chosen
    } else {
        candidates
            .iter()
            .copied()
            .filter(|_| rng.bernoulli(rate))
            .collect()
    }
}

pub fn inject_symmetric(
    labels: &[usize],
    num_classes: usize,
    rate: f64,
    rng: &mut Rng,
) -> Result<(Vec<usize>, NoiseReport)> {
    inject_symmetric_with(labels, num_classes, rate, false, rng)
}

pub fn inject_symmetric_with(
    labels: &[usize],
    num_classes: usize,
    rate: f64,
    exact_count: bool,
    rng: &mut Rng,
) -> Result<(Vec<usize>, NoiseReport)> {
    check_inputs(labels, num_classes, rate)?;
    let mut noisy = labels.to_vec();
    let all: Vec<usize> = (0..labels.len()).collect();
    for i in choose_flips(&all, rate, exact_count, rng) {
        let other = rng.below(num_classes - 1);
        noisy[i] = if other >= labels[i] { other + 1 } else { other };
    }
    let report = NoiseReport::from_labels(labels, &noisy, num_classes)?;
    Ok((noisy, report))
}

pub fn inject_asymmetric(
    labels: &[usize],
    num_classes: usize,
    rate: f64,
    pair_map: &PairMap,
    rng: &mut Rng,
) -> Result<(Vec<usize>, NoiseReport)> {
    inject_asymmetric_with(labels, num_classes, rate, pair_map, false, rng)
}

pub fn inject_asymmetric_with(
    labels: &[usize],
    num_classes: usize,
    rate: f64,
    pair_map: &PairMap,
    exact_count: bool,
    rng: &mut Rng,
) -> Result<(Vec<usize>, NoiseReport)> {
    check_inputs(labels, num_classes, rate)?;
    pair_map.validate(num_classes)?;
    let mut noisy = labels.to_vec();
    for (class, target) in pair_map.pairs() {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        for i in choose_flips(&members, rate, exact_count, rng) {
            noisy[i] = target;
        }
    }
    let report = NoiseReport::from_labels(labels, &noisy, num_classes)?;
    Ok((noisy, report))
}

/// True when, within every observed class, the correctly labeled samples
/// outnumber (or tie) each group of samples from any single other clean class.
pub fn check_learnability(report: &NoiseReport) -> bool {
    report.confusion.iter().enumerate().all(|(c, row)| {
        let own = row[c];
        row.iter().all(|&n| n <= own)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n: usize, classes: usize) -> Vec<usize> {
        (0..n).map(|i| i % classes).collect()
    }

    #[test]
    fn symmetric_rate_zero_is_identity() {
        let labels = balanced(1000, 5);
        let (noisy, rep) = inject_symmetric(&labels, 5, 0.0, &mut Rng::new(1)).unwrap();
        assert_eq!(noisy, labels);
        assert!(rep.flip_mask.iter().all(|f| !f));
        assert_eq!(rep.realized_rate, 0.0);
        assert!(check_learnability(&rep));
    }

    #[test]
    fn symmetric_concentration() {
        let labels = balanced(100_000, 10);
        let (noisy, rep) = inject_symmetric(&labels, 10, 0.5, &mut Rng::new(2)).unwrap();
        assert!(
            (0.49..=0.51).contains(&rep.realized_rate),
            "{}",
            rep.realized_rate
        );
        for i in 0..labels.len() {
            assert_eq!(rep.flip_mask[i], noisy[i] != labels[i]);
        }
        // diagonal share ~0.5 vs ~0.056 per off-class
        assert!(check_learnability(&rep));
    }

    #[test]
    fn symmetric_off_diagonal_mass_is_uniform() {
        let (n, c, r) = (100_000, 10, 0.3);
        let labels = balanced(n, c);
        let (_, rep) = inject_symmetric(&labels, c, r, &mut Rng::new(8)).unwrap();
        // each clean class has n/C samples; each off-class cell ~ Binomial(n/C, r/(C-1))
        let per_class = (n / c) as f64;
        let p = r / (c - 1) as f64;
        let sd = (per_class * p * (1.0 - p)).sqrt();
        for obs in 0..c {
            for clean in 0..c {
                if obs != clean {
                    let got = rep.confusion[obs][clean] as f64;
                    assert!(
                        (got - per_class * p).abs() < 4.0 * sd,
                        "{obs},{clean}: {got}"
                    );
                }
            }
        }
    }

    #[test]
    fn high_symmetric_noise_on_two_classes_breaks_learnability() {
        let labels = balanced(100_000, 2);
        let (_, rep) = inject_symmetric(&labels, 2, 0.95, &mut Rng::new(3)).unwrap();
        assert!(!check_learnability(&rep));
    }

    #[test]
    fn confusion_margins_match_counts() {
        let labels = balanced(999, 3);
        let (noisy, rep) = inject_symmetric(&labels, 3, 0.4, &mut Rng::new(4)).unwrap();
        for c in 0..3 {
            let col: usize = rep.confusion.iter().map(|row| row[c]).sum();
            let row: usize = rep.confusion[c].iter().sum();
            assert_eq!(col, labels.iter().filter(|&&l| l == c).count());
            assert_eq!(row, noisy.iter().filter(|&&l| l == c).count());
        }
    }

    #[test]
    fn symmetric_errors() {
        assert!(matches!(
            inject_symmetric(&[0, 0], 1, 0.1, &mut Rng::new(0)),
            Err(Error::SingleClass(1))
        ));
        assert!(matches!(
            inject_symmetric(&[0, 1], 2, 1.0, &mut Rng::new(0)),
            Err(Error::BadRate(_))
        ));
        assert!(inject_symmetric(&[0, 3], 2, 0.1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn exact_count_mode_flips_exactly() {
        let labels = balanced(1000, 4);
        let spec = NoiseSpec {
            exact_count: true,
            ..NoiseSpec::symmetric(0.37)
        };
        let (_, rep) = spec.apply(&labels, 4, &mut Rng::new(5)).unwrap();
        assert_eq!(rep.num_flipped(), 370);
        let spec = NoiseSpec {
            exact_count: true,
            ..NoiseSpec::asymmetric(0.25, None)
        };
        let (_, rep) = spec.apply(&labels, 4, &mut Rng::new(5)).unwrap();
        assert_eq!(rep.num_flipped(), 4 * 63); // round(0.25 * 250) per class
    }

    #[test]
    fn asymmetric_cyclic_concentration() {
        let c = 10;
        let labels = balanced(100_000, c);
        let map = PairMap::cyclic(c);
        let (noisy, _) = inject_asymmetric(&labels, c, 0.4, &map, &mut Rng::new(6)).unwrap();
        for class in 0..c {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            let flipped = members.iter().filter(|&&i| noisy[i] != class).count();
            let rate = flipped as f64 / members.len() as f64;
            assert!((0.38..=0.42).contains(&rate), "class {class}: {rate}");
            assert!(members
                .iter()
                .all(|&i| noisy[i] == class || noisy[i] == (class + 1) % c));
        }
    }

    #[test]
    fn asymmetric_scoping_and_identity() {
        let labels = balanced(10_000, 4);
        let map = PairMap::from_pairs(4, &[(0, 2)]).unwrap();
        let (noisy, _) = inject_asymmetric(&labels, 4, 0.0, &map, &mut Rng::new(7)).unwrap();
        assert_eq!(noisy, labels);
        let (noisy, rep) = inject_asymmetric(&labels, 4, 0.3, &map, &mut Rng::new(7)).unwrap();
        for i in 0..labels.len() {
            if labels[i] != 0 {
                assert_eq!(noisy[i], labels[i]);
            }
        }
        assert!(rep.num_flipped() > 0);
    }

    #[test]
    fn bad_pair_maps() {
        assert!(matches!(
            PairMap::from_pairs(3, &[(1, 1)]),
            Err(Error::BadPairMap(_))
        ));
        assert!(PairMap::from_pairs(3, &[(0, 3)]).is_err());
        assert!(PairMap::from_pairs(3, &[(0, 1), (0, 2)]).is_err());
        let map = PairMap::cyclic(3);
        assert!(matches!(
            inject_asymmetric(&[0, 1], 4, 0.1, &map, &mut Rng::new(0)),
            Err(Error::BadPairMap(_))
        ));
    }

    #[test]
    fn injection_is_deterministic() {
        let labels = balanced(5000, 7);
        let a = inject_symmetric(&labels, 7, 0.45, &mut Rng::new(99)).unwrap();
        let b = inject_symmetric(&labels, 7, 0.45, &mut Rng::new(99)).unwrap();
        assert_eq!(a, b);
    }
}
