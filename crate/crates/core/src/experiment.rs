//! End-to-end experiments driven by a TOML file: build or load data, split,
//! corrupt the training labels, standardize, train, and write traces.
//!
//! See `configs/ncod.toml` at the repository root for an annotated config.
//! Relative paths inside a config are resolved against the config file's
//! directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Standardizer, SynthSpec};
use crate::error::{Error, Result};
use crate::loss::Mode;
use crate::metrics::{emit_csv, TrainReport};
use crate::noise::{NoiseKind, NoiseSpec, PairMap};
use crate::numerics::Rng;
use crate::trainer::{train_observed, Execution, TrainConfig};

/// Environment variable that replaces the built-in default output directory.
pub const OUT_DIR_ENV: &str = "NCOD_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "ncod-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synth {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
        spread: f64,
        seed: u64,
    },
    Csv {
        path: PathBuf,
        /// `index,clean,noisy` sidecar; replaces the `[noise]` section.
        #[serde(default)]
        sidecar: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Standardize features with training-split statistics.
    #[serde(default = "yes")]
    pub standardize: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: default_test_fraction(),
            seed: 0,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseChoice {
    #[default]
    None,
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub kind: NoiseChoice,
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Asymmetric `[from, to]` pairs; defaults to `c -> c+1 mod C`.
    #[serde(default)]
    pub pairs: Option<Vec<[usize; 2]>>,
    #[serde(default)]
    pub exact_count: bool,
}

impl NoiseConfig {
    pub fn to_spec(&self, num_classes: usize) -> Result<Option<NoiseSpec>> {
        let kind = match self.kind {
            NoiseChoice::None => return Ok(None),
            NoiseChoice::Symmetric => NoiseKind::Symmetric,
            NoiseChoice::Asymmetric => NoiseKind::Asymmetric,
        };
        let pair_map = match (&self.pairs, kind) {
            (Some(p), NoiseKind::Asymmetric) => {
                let pairs: Vec<(usize, usize)> = p.iter().map(|[a, b]| (*a, *b)).collect();
                Some(PairMap::from_pairs(num_classes, &pairs)?)
            }
            (Some(_), NoiseKind::Symmetric) => {
                return Err(Error::ConfigInvalid(
                    "noise.pairs is only valid for asymmetric noise".into(),
                ))
            }
            (None, _) => None,
        };
        Ok(Some(NoiseSpec {
            kind,
            rate: self.rate,
            pair_map,
            exact_count: self.exact_count,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: Mode,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lr_u")]
    pub lr_u: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_wd_u")]
    pub weight_decay_u: f64,
    #[serde(default)]
    pub lambda_c: f64,
    #[serde(default)]
    pub lambda_b: f64,
    #[serde(default = "default_final_keep")]
    pub final_keep_fraction: f64,
    /// In standardized feature units. Defaults to half the within-class
    /// spread.
    #[serde(default)]
    pub jitter_std: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub lr_gamma: f64,
    #[serde(default)]
    pub execution: Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory; falls back to `$NCOD_OUT_DIR`, then `ncod-out`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Write `u_trace.csv` (epoch, index, u, noisy) every epoch.
    #[serde(default)]
    pub dump_u: bool,
    /// Write `centroids_eNNNN.bin` snapshots every epoch.
    #[serde(default)]
    pub dump_centroids: bool,
    /// Save the final model to `model.bin`.
    #[serde(default)]
    pub checkpoint: bool,
}

fn default_test_fraction() -> f64 {
    0.2
}
fn yes() -> bool {
    true
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.02
}
fn default_lr_u() -> f64 {
    0.1
}
fn default_wd() -> f64 {
    5e-4
}
fn default_wd_u() -> f64 {
    1e-8
}
fn default_final_keep() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    0.1
}

/// One-line `section.key (line N): message` rendering of a parse error.
fn describe_toml_error(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().trim().replace('\n', " ");
    let Some(span) = e.span() else {
        return msg;
    };
    let start = span.start.min(text.len());
    let line_no = text[..start].matches('\n').count() + 1;
    let mut section = None;
    for line in text.lines().take(line_no) {
        let t = line.trim();
        if t.starts_with('[') && t.ends_with(']') {
            section = Some(t.trim_matches(|c| c == '[' || c == ']').trim().to_string());
        }
    }
    let line = text.lines().nth(line_no - 1).unwrap_or("").trim();
    let key = line.split_once('=').map(|(k, _)| k.trim().to_string());
    let field = match (section, key) {
        (Some(s), Some(k)) => format!("{s}.{k}"),
        (Some(s), None) => s,
        (None, Some(k)) => k,
        (None, None) => String::from("config"),
    };
    format!("{field} (line {line_no}): {msg}")
}

pub const TRACE_CSV: &str = "trace.csv";
pub const TRACE_JSONL: &str = "trace.jsonl";
pub const U_TRACE: &str = "u_trace.csv";
pub const CHECKPOINT: &str = "model.bin";

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigInvalid(describe_toml_error(text, &e)))
    }

    /// Parse a config file, resolving its relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetSource::Csv { path, sidecar } = &mut cfg.dataset {
            if path.is_relative() {
                *path = base.join(&*path);
            }
            if let Some(s) = sidecar {
                if s.is_relative() {
                    *s = base.join(&*s);
                }
            }
        }
        if let Some(dir) = &mut cfg.output.dir {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(cfg)
    }

    /// Checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Synth {
            classes,
            per_class,
            dim,
            separation,
            spread,
            seed,
        } = &self.dataset
        {
            let spec = SynthSpec {
                num_classes: *classes,
                per_class: *per_class,
                dim: *dim,
                separation: *separation,
                spread: *spread,
                seed: *seed,
            };
            if spec.num_classes < 2 || spec.per_class < 2 || spec.dim == 0 {
                return Err(Error::ConfigInvalid(
                    "dataset: need classes >= 2, per_class >= 2, dim >= 1".into(),
                ));
            }
        }
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "split.test_fraction must lie in (0, 1), got {}",
                self.split.test_fraction
            )));
        }
        if self.noise.kind != NoiseChoice::None && !(0.0..1.0).contains(&self.noise.rate) {
            return Err(Error::ConfigInvalid(format!(
                "noise.rate must lie in [0, 1), got {}",
                self.noise.rate
            )));
        }
        if matches!(
            self.dataset,
            DatasetSource::Csv {
                sidecar: Some(_),
                ..
            }
        ) && self.noise.kind != NoiseChoice::None
        {
            return Err(Error::ConfigInvalid(
                "dataset.sidecar and a [noise] kind are mutually exclusive".into(),
            ));
        }
        let t = &self.train;
        if t.mode != Mode::NcodPlus && (t.lambda_c != 0.0 || t.lambda_b != 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "train.lambda_c / train.lambda_b require mode ncod_plus (mode is {})",
                t.mode.as_str()
            )));
        }
        if t.hidden.contains(&0) {
            return Err(Error::ConfigInvalid(
                "train.hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.dir.clone().unwrap_or_else(|| {
            std::env::var_os(OUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
        })
    }

    pub fn train_config(
        &self,
        input_dim: usize,
        num_classes: usize,
        jitter_std: f64,
    ) -> TrainConfig {
        let t = &self.train;
        let mut layer_dims = vec![input_dim];
        layer_dims.extend_from_slice(&t.hidden);
        layer_dims.push(num_classes);
        TrainConfig {
            mode: t.mode,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_theta: t.lr,
            lr_u: t.lr_u,
            weight_decay_theta: t.weight_decay,
            weight_decay_u: t.weight_decay_u,
            lambda_c: t.lambda_c,
            lambda_b: t.lambda_b,
            final_keep_fraction: t.final_keep_fraction,
            jitter_std: t.jitter_std.unwrap_or(jitter_std),
            seed: t.seed,
            layer_dims,
            momentum: t.momentum,
            lr_milestones: t.lr_milestones.clone(),
            lr_gamma: t.lr_gamma,
            execution: t.execution,
        }
    }
}

/// Train/test data ready for [`crate::trainer::train`].
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub realized_noise_rate: f64,
    /// Default NCOD+ jitter in standardized units.
    pub jitter_std: f64,
}

/// Pooled within-class standard deviation (by observed label), averaged over
/// dimensions in quadrature.
fn within_class_spread(set: &Dataset) -> f64 {
    let (c, d) = (set.num_classes, set.dim());
    let mut sums = vec![vec![0.0; d]; c];
    let counts = set.class_counts(&set.noisy_labels);
    for i in 0..set.len() {
        for (s, x) in sums[set.noisy_labels[i]].iter_mut().zip(set.row(i)) {
            *s += x;
        }
    }
    let mut ss = 0.0;
    for i in 0..set.len() {
        let l = set.noisy_labels[i];
        for (k, x) in set.row(i).iter().enumerate() {
            let m = sums[l][k] / counts[l] as f64;
            ss += (x - m) * (x - m);
        }
    }
    (ss / (set.len() * d) as f64).sqrt()
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let (full, sidecar, known_spread) = match &cfg.dataset {
        DatasetSource::Synth {
            classes,
            per_class,
            dim,
            separation,
            spread,
            seed,
        } => {
            let spec = SynthSpec {
                num_classes: *classes,
                per_class: *per_class,
                dim: *dim,
                separation: *separation,
                spread: *spread,
                seed: *seed,
            };
            (data::synth_clusters(&spec)?, None, Some(*spread))
        }
        DatasetSource::Csv { path, sidecar } => {
            let set = data::load_csv(path)?;
            let noisy = match sidecar {
                Some(s) => Some(data::load_sidecar(s, &set)?),
                None => None,
            };
            (set, noisy, None)
        }
    };

    let split = data::split(
        &full,
        cfg.split.test_fraction,
        &mut Rng::new(cfg.split.seed),
    )?;
    let mut train = split.train;
    let test = split.test;

    let realized_noise_rate = if let Some(noisy_all) = sidecar {
        let noisy: Vec<usize> = split.train_indices.iter().map(|&i| noisy_all[i]).collect();
        train.set_noisy_labels(noisy)?.realized_rate
    } else if let Some(spec) = cfg.noise.to_spec(full.num_classes)? {
        let (noisy, _) = spec.apply(
            &train.clean_labels,
            train.num_classes,
            &mut Rng::new(cfg.noise.seed),
        )?;
        train.set_noisy_labels(noisy)?.realized_rate
    } else {
        0.0
    };

    let (train, test, jitter_std) = if cfg.split.standardize {
        let st = Standardizer::fit(&train);
        let jitter = match known_spread {
            Some(s) => 0.5 * s / st.rms_scale(),
            None => 0.0,
        };
        (st.apply(&train), st.apply(&test), jitter)
    } else {
        (train, test, known_spread.map_or(0.0, |s| 0.5 * s))
    };
    let jitter_std = if known_spread.is_some() {
        jitter_std
    } else {
        0.5 * within_class_spread(&train)
    };
    Ok(PreparedData {
        train,
        test,
        realized_noise_rate,
        jitter_std,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub report: TrainReport,
    pub final_accuracy: f64,
    pub final_u_auc: Option<f64>,
    pub realized_noise_rate: f64,
    pub out_dir: PathBuf,
}

/// Run `cfg` and write traces into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    let prepared = prepare_data(cfg)?;
    let tc = cfg.train_config(
        prepared.train.dim(),
        prepared.train.num_classes,
        prepared.jitter_std,
    );
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let jsonl_path = out_dir.join(TRACE_JSONL);
    let mut jsonl =
        BufWriter::new(fs::File::create(&jsonl_path).map_err(|e| Error::io(&jsonl_path, e))?);
    let u_path = out_dir.join(U_TRACE);
    let mut u_out = if cfg.output.dump_u {
        let mut w = BufWriter::new(fs::File::create(&u_path).map_err(|e| Error::io(&u_path, e))?);
        writeln!(w, "epoch,index,u,noisy").map_err(|e| Error::io(&u_path, e))?;
        Some(w)
    } else {
        None
    };

    let train_set = &prepared.train;
    let (model, _, report) = train_observed(train_set, &prepared.test, &tc, |trainer, record| {
        writeln!(jsonl, "{}", record.to_json_line())
            .and_then(|_| jsonl.flush())
            .map_err(|e| Error::io(&jsonl_path, e))?;
        if let Some(w) = u_out.as_mut() {
            for (i, (u, noisy)) in trainer
                .u()
                .values()
                .iter()
                .zip(&train_set.flip_mask)
                .enumerate()
            {
                writeln!(w, "{},{i},{u:.16e},{}", record.epoch, u8::from(*noisy))
                    .map_err(|e| Error::io(&u_path, e))?;
            }
        }
        if cfg.output.dump_centroids {
            if let Some(c) = trainer.centroids() {
                let p = out_dir.join(format!("centroids_e{:04}.bin", record.epoch));
                let mut buf = Vec::new();
                c.write_snapshot(&mut buf).map_err(|e| Error::io(&p, e))?;
                fs::write(&p, buf).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(())
    })?;
    if let Some(mut w) = u_out {
        w.flush().map_err(|e| Error::io(&u_path, e))?;
    }
    emit_csv(&report, &out_dir.join(TRACE_CSV))?;
    if cfg.output.checkpoint {
        model.save(&out_dir.join(CHECKPOINT))?;
    }
    let last = report.last().expect("at least one epoch");
    Ok(ExperimentSummary {
        final_accuracy: last.test_accuracy,
        final_u_auc: last.u_auc,
        realized_noise_rate: prepared.realized_noise_rate,
        out_dir: out_dir.to_path_buf(),
        report,
    })
}
