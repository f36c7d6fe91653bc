//! Diagnostics collected per epoch and their CSV / JSON-lines serialization.
//!
//! # CSV trace columns
//!
//! In order: `epoch, test_accuracy, loss_l1, loss_l2, loss_c, loss_b,
//! loss_total, mean_similarity_clean, mean_similarity_noisy, mean_u_clean,
//! mean_u_noisy, u_auc, keep_fraction`.
//!
//! Reals use `{:.16e}` (17 significant digits, locale independent), which
//! parses back to the identical `f64`. Statistics that need both clean and
//! noisy samples are left empty when the training set has no flipped labels.
//!
//! # JSON-lines trace
//!
//! One object per epoch with the same field names; empty statistics are
//! `null`.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 13] = [
    "epoch",
    "test_accuracy",
    "loss_l1",
    "loss_l2",
    "loss_c",
    "loss_b",
    "loss_total",
    "mean_similarity_clean",
    "mean_similarity_noisy",
    "mean_u_clean",
    "mean_u_noisy",
    "u_auc",
    "keep_fraction",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub test_accuracy: f64,
    pub loss_l1: f64,
    pub loss_l2: f64,
    pub loss_c: f64,
    pub loss_b: f64,
    pub loss_total: f64,
    pub mean_similarity_clean: Option<f64>,
    pub mean_similarity_noisy: Option<f64>,
    pub mean_u_clean: Option<f64>,
    pub mean_u_noisy: Option<f64>,
    pub u_auc: Option<f64>,
    pub keep_fraction: f64,
}

impl EpochRecord {
    fn fields(&self) -> [Option<f64>; 12] {
        [
            Some(self.test_accuracy),
            Some(self.loss_l1),
            Some(self.loss_l2),
            Some(self.loss_c),
            Some(self.loss_b),
            Some(self.loss_total),
            self.mean_similarity_clean,
            self.mean_similarity_noisy,
            self.mean_u_clean,
            self.mean_u_noisy,
            self.u_auc,
            Some(self.keep_fraction),
        ]
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{}", r.epoch);
            for f in r.fields() {
                match f {
                    Some(v) => {
                        let _ = write!(out, ",{v:.16e}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_jsonl_string(&self) -> String {
        self.records
            .iter()
            .map(|r| r.to_json_line() + "\n")
            .collect()
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: "<trace>".into(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, h)) if h == CSV_COLUMNS.join(",") => {}
            _ => return Err(err(1, "unexpected trace header".into())),
        }
        let mut records = Vec::new();
        for (n, line) in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != CSV_COLUMNS.len() {
                return Err(err(n, format!("expected {} columns", CSV_COLUMNS.len())));
            }
            let epoch = cells[0]
                .parse()
                .map_err(|_| err(n, format!("bad epoch {:?}", cells[0])))?;
            let mut vals = [None; 12];
            for (slot, cell) in vals.iter_mut().zip(&cells[1..]) {
                if !cell.is_empty() {
                    *slot = Some(
                        cell.parse::<f64>()
                            .map_err(|_| err(n, format!("bad number {cell:?}")))?,
                    );
                }
            }
            let req =
                |i: usize| vals[i].ok_or_else(|| err(n, format!("missing {}", CSV_COLUMNS[i + 1])));
            records.push(EpochRecord {
                epoch,
                test_accuracy: req(0)?,
                loss_l1: req(1)?,
                loss_l2: req(2)?,
                loss_c: req(3)?,
                loss_b: req(4)?,
                loss_total: req(5)?,
                mean_similarity_clean: vals[6],
                mean_similarity_noisy: vals[7],
                mean_u_clean: vals[8],
                mean_u_noisy: vals[9],
                u_auc: vals[10],
                keep_fraction: req(11)?,
            });
        }
        Ok(TrainReport { records })
    }
}

pub fn emit_csv(report: &TrainReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_csv_string()).map_err(|e| Error::io(path, e))
}

pub fn emit_jsonl(report: &TrainReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_jsonl_string()).map_err(|e| Error::io(path, e))
}

/// Means of the entries where `mask` is true and where it is false.
pub fn group_mean(values: &[f64], mask: &[bool]) -> Result<(f64, f64)> {
    if values.len() != mask.len() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: mask.len(),
        });
    }
    let (mut sum_t, mut n_t, mut sum_f, mut n_f) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in values.iter().zip(mask) {
        if m {
            sum_t += v;
            n_t += 1;
        } else {
            sum_f += v;
            n_f += 1;
        }
    }
    if n_t == 0 || n_f == 0 {
        return Err(Error::EmptyGroup);
    }
    Ok((sum_t / n_t as f64, sum_f / n_f as f64))
}

/// Mann–Whitney AUC: the probability that a random positive outscores a random
/// negative, ties counting one half.
pub fn detection_auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: positives.len(),
        });
    }
    let n_pos = positives.iter().filter(|p| **p).count() as u128;
    let n_neg = positives.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the U statistic, kept in integers so it is exact.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len()
            && scores[order[end]].total_cmp(&scores[order[start]]) == Ordering::Equal
        {
            end += 1;
        }
        let pos_here = order[start..end].iter().filter(|&&i| positives[i]).count() as u128;
        let neg_here = (end - start) as u128 - pos_here;
        twice_u += pos_here * (2 * neg_below + neg_here);
        neg_below += neg_here;
        start = end;
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}
