//! The training loop for the cross-entropy baseline, NCOD and NCOD+.
//!
//! Each epoch:
//!
//! 1. embed every training sample under the current parameters (the sweep
//!    from the end of the previous epoch is reused);
//! 2. rebuild the class centroids from the lowest-`u` share of each class;
//! 3. walk a seeded shuffle in minibatches: forward, soft labels against the
//!    frozen centroids, one SGD step on θ, then one step on each `u_i` using
//!    the probabilities from before the θ step;
//! 4. sweep the training set again for diagnostics, evaluate on the test set
//!    and emit an [`EpochRecord`].
//!
//! Per-sample work inside a batch runs on the rayon pool when the `parallel`
//! feature is enabled and [`Execution::Parallel`] is selected. Gradients are
//! always summed in batch order, so both execution modes give bitwise
//! identical results.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::centroids::{keep_fraction, soft_label, ClassEmbeddings, SoftLabel};
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::loss::{
    class_balance_grad_logits, class_balance_reg, consistency_grad_logits, consistency_reg,
    grad_l1_logits, loss_l1, loss_l2, total_loss, LossTerms, Mode, SampleLoss, UStore,
};
use crate::metrics::{detection_auc, group_mean, EpochRecord, TrainReport};
use crate::model::{ForwardCache, ForwardOutput, Gradients, MlpModel};
use crate::numerics::{argmax, l2_normalize, Rng};

// Independent generator streams derived from the run seed.
const STREAM_MODEL: u64 = 1;
const STREAM_U: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_AUGMENT: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    /// Falls back to sequential when built without the `parallel` feature.
    #[default]
    Parallel,
}

impl Execution {
    /// Whether work actually runs on the rayon pool in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// `(0..n).map(f)` in order, optionally on the rayon pool.
pub(crate) fn map_indices<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Run `f(row_index, row)` over the `cols`-wide rows of `data`.
fn for_each_row<F>(exec: Execution, data: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(o, row)| f(o, row));
        return;
    }
    let _ = exec;
    data.chunks_mut(cols)
        .enumerate()
        .for_each(|(o, row)| f(o, row));
}

/// `Σ_t δ_t ⊗ input_t` over backward passes `t`, per layer. Each output entry
/// is accumulated in term order, so the result does not depend on `exec`.
fn accumulate_gradients(
    exec: Execution,
    model: &MlpModel,
    terms: &[(&ForwardCache, &Vec<Vec<f64>>)],
) -> Gradients {
    let mut total = Gradients::zeros_like(model);
    for (l, (w, b)) in total.weights.iter_mut().zip(&mut total.biases).enumerate() {
        let cols = w.cols();
        for_each_row(exec, w.as_mut_slice(), cols, |o, row| {
            for (cache, deltas) in terms {
                let d = deltas[l][o];
                for (x, a) in row.iter_mut().zip(cache.layer_input(l)) {
                    *x += d * a;
                }
            }
        });
        for (_, deltas) in terms {
            for (x, d) in b.iter_mut().zip(&deltas[l]) {
                *x += d;
            }
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_u: f64,
    pub weight_decay_theta: f64,
    pub weight_decay_u: f64,
    pub lambda_c: f64,
    pub lambda_b: f64,
    pub final_keep_fraction: f64,
    /// Standard deviation of the Gaussian jitter used for the NCOD+ view.
    pub jitter_std: f64,
    pub seed: u64,
    /// Full layer widths `[input, hidden…, classes]`.
    pub layer_dims: Vec<usize>,
    /// Heavy-ball momentum on θ; 0 gives plain SGD.
    pub momentum: f64,
    /// Epochs at which the θ learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Ncod,
            epochs: 60,
            batch_size: 32,
            lr_theta: 0.02,
            lr_u: 0.1,
            weight_decay_theta: 5e-4,
            weight_decay_u: 1e-8,
            lambda_c: 0.0,
            lambda_b: 0.0,
            final_keep_fraction: 0.5,
            jitter_std: 0.5,
            seed: 0,
            layer_dims: vec![2, 32, 2],
            momentum: 0.0,
            lr_milestones: Vec::new(),
            lr_gamma: 0.1,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_theta > 0.0) {
            return bad(format!("lr_theta must be positive, got {}", self.lr_theta));
        }
        if !(self.lr_u >= 0.0) {
            return bad(format!("lr_u must be non-negative, got {}", self.lr_u));
        }
        for (name, v) in [
            ("weight_decay_theta", self.weight_decay_theta),
            ("weight_decay_u", self.weight_decay_u),
            ("lambda_c", self.lambda_c),
            ("lambda_b", self.lambda_b),
            ("jitter_std", self.jitter_std),
            ("momentum", self.momentum),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if self.momentum >= 1.0 {
            return bad(format!("momentum must be below 1, got {}", self.momentum));
        }
        if !(self.final_keep_fraction > 0.0 && self.final_keep_fraction <= 1.0) {
            return bad(format!(
                "final_keep_fraction must lie in (0, 1], got {}",
                self.final_keep_fraction
            ));
        }
        if !(self.lr_gamma > 0.0) {
            return bad(format!("lr_gamma must be positive, got {}", self.lr_gamma));
        }
        if self.mode != Mode::NcodPlus && (self.lambda_c != 0.0 || self.lambda_b != 0.0) {
            return bad(format!(
                "lambda_c and lambda_b apply only to ncod_plus (mode is {})",
                self.mode.as_str()
            ));
        }
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return bad(format!("bad layer_dims {:?}", self.layer_dims));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr_theta * self.lr_gamma.powi(drops as i32)
    }
}

/// Argmax class of the model's probabilities; ties go to the lower index.
pub fn predict(model: &MlpModel, x: &[f64]) -> Result<usize> {
    Ok(argmax(&model.predict_proba(x)?))
}

/// Fraction of samples whose prediction equals the clean label.
pub fn evaluate(model: &MlpModel, test_set: &Dataset) -> Result<f64> {
    evaluate_with(model, test_set, Execution::Sequential)
}

pub fn evaluate_with(model: &MlpModel, test_set: &Dataset, exec: Execution) -> Result<f64> {
    if test_set.dim() != model.input_dim() {
        return Err(Error::DimMismatch {
            expected: model.input_dim(),
            got: test_set.dim(),
        });
    }
    if test_set.is_empty() {
        return Ok(0.0);
    }
    let hits = map_indices(exec, test_set.len(), |i| {
        predict(model, test_set.row(i)).map(|p| p == test_set.clean_labels[i])
    })
    .into_iter()
    .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / test_set.len() as f64)
}

/// Clamped cosine similarity of an embedding with a class centroid; a zero
/// embedding has similarity 0.
fn similarity_weight(embedding: &[f64], label: usize, centroids: &ClassEmbeddings) -> SoftLabel {
    match l2_normalize(embedding) {
        Ok(h) => soft_label(&h, label, centroids),
        Err(_) => SoftLabel {
            class_index: label,
            weight: 0.0,
            num_classes: centroids.num_classes(),
        },
    }
}

struct SampleForward {
    orig: ForwardOutput,
    aug: Option<ForwardOutput>,
}

struct SampleBackward {
    orig: Vec<Vec<f64>>,
    aug: Option<Vec<Vec<f64>>>,
    loss: SampleLoss,
}

/// Stateful trainer; [`train`] drives it for a full run.
pub struct Trainer<'a> {
    config: TrainConfig,
    train_set: &'a Dataset,
    model: MlpModel,
    u: UStore,
    centroids: Option<ClassEmbeddings>,
    embeddings: Option<Vec<Vec<f64>>>,
    velocity: Option<Gradients>,
    shuffle_rng: Rng,
    augment_rng: Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(train_set: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dims = &config.layer_dims;
        if dims[0] != train_set.dim() {
            return Err(Error::ConfigInvalid(format!(
                "layer_dims start with {} but features have dimension {}",
                dims[0],
                train_set.dim()
            )));
        }
        if *dims.last().unwrap() != train_set.num_classes {
            return Err(Error::ConfigInvalid(format!(
                "layer_dims end with {} but the data has {} classes",
                dims.last().unwrap(),
                train_set.num_classes
            )));
        }
        if train_set.is_empty() {
            return Err(Error::ConfigInvalid("empty training set".into()));
        }
        let model = MlpModel::new(dims, &mut Rng::with_stream(config.seed, STREAM_MODEL))?;
        let u = match config.mode {
            Mode::Ce => UStore::zeros(train_set.len()),
            _ => UStore::init(
                train_set.len(),
                config.lr_u,
                config.weight_decay_u,
                &mut Rng::with_stream(config.seed, STREAM_U),
            ),
        };
        Ok(Trainer {
            shuffle_rng: Rng::with_stream(config.seed, STREAM_SHUFFLE),
            augment_rng: Rng::with_stream(config.seed, STREAM_AUGMENT),
            config,
            train_set,
            model,
            u,
            centroids: None,
            embeddings: None,
            velocity: None,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn u(&self) -> &UStore {
        &self.u
    }

    pub fn centroids(&self) -> Option<&ClassEmbeddings> {
        self.centroids.as_ref()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn into_parts(self) -> (MlpModel, UStore) {
        (self.model, self.u)
    }

    fn sweep_embeddings(&self) -> Result<Vec<Vec<f64>>> {
        let set = self.train_set;
        map_indices(self.config.execution, set.len(), |i| {
            self.model.forward(set.row(i)).map(|o| o.embedding)
        })
        .into_iter()
        .collect()
    }

    fn current_keep_fraction(&self) -> Result<f64> {
        match self.config.mode {
            Mode::Ce => Ok(1.0),
            _ => keep_fraction(
                self.epoch,
                self.config.epochs,
                self.config.final_keep_fraction,
            ),
        }
    }

    /// Refresh the centroids for the current epoch and return the keep
    /// fraction used.
    pub fn begin_epoch(&mut self) -> Result<f64> {
        let embeddings = match self.embeddings.take() {
            Some(e) => e,
            None => self.sweep_embeddings()?,
        };
        let fraction = self.current_keep_fraction()?;
        self.centroids = Some(ClassEmbeddings::compute(
            &embeddings,
            &self.train_set.noisy_labels,
            self.u.values(),
            fraction,
            self.train_set.num_classes,
            self.epoch,
        )?);
        Ok(fraction)
    }

    fn soft_target(&self, embedding: &[f64], label: usize) -> Result<SoftLabel> {
        match self.config.mode {
            Mode::Ce => Ok(SoftLabel::one_hot(label, self.train_set.num_classes)),
            _ => {
                let centroids = self.centroids.as_ref().ok_or_else(|| {
                    Error::ConfigInvalid("begin_epoch must run before training steps".into())
                })?;
                Ok(similarity_weight(embedding, label, centroids))
            }
        }
    }

    /// One minibatch update of θ followed by the `u` updates of its samples.
    pub fn step(&mut self, batch: &[usize]) -> Result<LossTerms> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = self.train_set.len();
        if let Some(&bad) = batch.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let plus = self.config.mode == Mode::NcodPlus;
        let exec = self.config.execution;
        let set = self.train_set;

        // Augmented views are drawn up front, in batch order.
        let views: Vec<Vec<f64>> = if plus {
            batch
                .iter()
                .map(|&i| augment(set.row(i), self.config.jitter_std, &mut self.augment_rng))
                .collect()
        } else {
            Vec::new()
        };

        let model = &self.model;
        let forwards = map_indices(exec, batch.len(), |k| -> Result<SampleForward> {
            let orig = model.forward(set.row(batch[k]))?;
            let aug = if plus {
                Some(model.forward(&views[k])?)
            } else {
                None
            };
            Ok(SampleForward { orig, aug })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let targets = forwards
            .iter()
            .zip(batch)
            .map(|(f, &i)| self.soft_target(&f.orig.embedding, set.noisy_labels[i]))
            .collect::<Result<Vec<_>>>()?;

        let (l_b, balance_grads) = if plus {
            let probs: Vec<Vec<f64>> = forwards.iter().map(|f| f.orig.probs.clone()).collect();
            (
                class_balance_reg(&probs)?,
                Some(class_balance_grad_logits(&probs)?),
            )
        } else {
            (0.0, None)
        };

        let batch_len = batch.len() as f64;
        let (lambda_c, lambda_b) = (self.config.lambda_c, self.config.lambda_b);
        let u = &self.u;
        // Every per-sample gradient below is later scaled by 1/B; the balance
        // gradient already carries that factor, hence the `* batch_len`.
        let per_sample = map_indices(exec, batch.len(), |k| -> Result<SampleBackward> {
            let f = &forwards[k];
            let i = batch[k];
            let probs = &f.orig.probs;
            let label = set.noisy_labels[i];
            let u_i = u.get(i);
            let soft = &targets[k];
            let mut dlogits = grad_l1_logits(probs, u_i, soft);
            if let Some(bg) = &balance_grads {
                for (d, g) in dlogits.iter_mut().zip(&bg[k]) {
                    *d += lambda_b * batch_len * g;
                }
            }
            let mut out = SampleBackward {
                orig: model.backward_deltas(&f.orig.cache, &dlogits)?,
                aug: None,
                loss: SampleLoss {
                    l1: loss_l1(probs, u_i, soft),
                    l2: loss_l2(probs, u_i, label),
                    l_c: 0.0,
                },
            };
            if let Some(aug) = &f.aug {
                out.loss.l_c = consistency_reg(probs, &aug.probs);
                let daug: Vec<f64> = consistency_grad_logits(probs, &aug.probs)
                    .into_iter()
                    .map(|g| lambda_c * g)
                    .collect();
                out.aug = Some(model.backward_deltas(&aug.cache, &daug)?);
            }
            Ok(out)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let mut terms = Vec::with_capacity(2 * batch.len());
        for (f, s) in forwards.iter().zip(&per_sample) {
            terms.push((&f.orig.cache, &s.orig));
            if let (Some(fa), Some(sa)) = (&f.aug, &s.aug) {
                terms.push((&fa.cache, sa));
            }
        }
        let mut total = accumulate_gradients(exec, model, &terms);
        total.scale(1.0 / batch_len);
        let losses: Vec<SampleLoss> = per_sample.iter().map(|s| s.loss).collect();
        drop(terms);

        self.apply_theta_update(&total)?;

        if self.config.mode != Mode::Ce {
            for (f, &i) in forwards.iter().zip(batch) {
                let label = set.noisy_labels[i];
                self.u.update(i, f.orig.probs[label])?;
            }
        }

        Ok(total_loss(
            &losses,
            l_b,
            lambda_c,
            lambda_b,
            self.config.mode,
        ))
    }

    fn apply_theta_update(&mut self, grads: &Gradients) -> Result<()> {
        let lr = self.config.lr_at(self.epoch);
        let wd = self.config.weight_decay_theta;
        if self.config.momentum == 0.0 {
            return self.model.sgd_step(grads, lr, wd);
        }
        // v ← μ v + (g + wd θ);  θ ← θ − lr v
        let mut step = grads.clone();
        for (g, w) in step.weights.iter_mut().zip(self.model.weights()) {
            for (a, p) in g.as_mut_slice().iter_mut().zip(w.as_slice()) {
                *a += wd * p;
            }
        }
        for (g, b) in step.biases.iter_mut().zip(self.model.biases()) {
            for (a, p) in g.iter_mut().zip(b) {
                *a += wd * p;
            }
        }
        let velocity = match self.velocity.take() {
            Some(mut v) => {
                v.scale(self.config.momentum);
                v.add_assign(&step)?;
                v
            }
            None => step,
        };
        self.model.sgd_step(&velocity, lr, 0.0)?;
        self.velocity = Some(velocity);
        Ok(())
    }

    /// Train one full epoch and summarize it.
    pub fn run_epoch(&mut self, test_set: &Dataset) -> Result<EpochRecord> {
        if self.epoch >= self.config.epochs {
            return Err(Error::ConfigInvalid("all epochs already run".into()));
        }
        let fraction = self.begin_epoch()?;
        let mut order: Vec<usize> = (0..self.train_set.len()).collect();
        self.shuffle_rng.shuffle(&mut order);

        let mut sums = LossTerms::default();
        let mut batches = 0usize;
        for batch in order.chunks(self.config.batch_size) {
            let t = self.step(batch)?;
            sums.l1 += t.l1;
            sums.l2 += t.l2;
            sums.l_c += t.l_c;
            sums.l_b += t.l_b;
            sums.total += t.total;
            batches += 1;
        }
        let inv = 1.0 / batches as f64;

        let embeddings = self.sweep_embeddings()?;
        let centroids = self.centroids.as_ref().expect("set by begin_epoch");
        let set = self.train_set;
        let sims: Vec<f64> = embeddings
            .iter()
            .zip(&set.noisy_labels)
            .map(|(e, &l)| similarity_weight(e, l, centroids).weight)
            .collect();
        let (sim_noisy, sim_clean) = split_means(&sims, &set.flip_mask);
        let (u_noisy, u_clean) = split_means(self.u.values(), &set.flip_mask);
        let u_auc = detection_auc(self.u.values(), &set.flip_mask).ok();
        self.embeddings = Some(embeddings);

        let record = EpochRecord {
            epoch: self.epoch,
            test_accuracy: evaluate_with(&self.model, test_set, self.config.execution)?,
            loss_l1: sums.l1 * inv,
            loss_l2: sums.l2 * inv,
            loss_c: sums.l_c * inv,
            loss_b: sums.l_b * inv,
            loss_total: sums.total * inv,
            mean_similarity_clean: sim_clean,
            mean_similarity_noisy: sim_noisy,
            mean_u_clean: u_clean,
            mean_u_noisy: u_noisy,
            u_auc,
            keep_fraction: fraction,
        };
        self.epoch += 1;
        Ok(record)
    }
}

/// `(mean over mask, mean over !mask)`, each `None` when its group is empty.
fn split_means(values: &[f64], mask: &[bool]) -> (Option<f64>, Option<f64>) {
    match group_mean(values, mask) {
        Ok((t, f)) => (Some(t), Some(f)),
        Err(_) => {
            let mean = |m: bool| {
                let v: Vec<f64> = values
                    .iter()
                    .zip(mask)
                    .filter(|(_, &k)| k == m)
                    .map(|(v, _)| *v)
                    .collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            (mean(true), mean(false))
        }
    }
}

/// Full training run.
pub fn train(
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
) -> Result<(MlpModel, UStore, TrainReport)> {
    train_streaming(train_set, test_set, config, std::io::sink())
}

/// Like [`train`], additionally writing each epoch record to `sink` as one
/// JSON line as soon as the epoch finishes.
pub fn train_streaming<W: Write>(
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    mut sink: W,
) -> Result<(MlpModel, UStore, TrainReport)> {
    train_observed(train_set, test_set, config, |_, record| {
        writeln!(sink, "{}", record.to_json_line())
            .and_then(|_| sink.flush())
            .map_err(|e| Error::io("<jsonl sink>", e))
    })
}

/// Like [`train`], calling `observe` after every epoch with the trainer state.
pub fn train_observed<F>(
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    mut observe: F,
) -> Result<(MlpModel, UStore, TrainReport)>
where
    F: FnMut(&Trainer<'_>, &EpochRecord) -> Result<()>,
{
    if test_set.dim() != train_set.dim() {
        return Err(Error::DimMismatch {
            expected: train_set.dim(),
            got: test_set.dim(),
        });
    }
    let mut trainer = Trainer::new(train_set, config.clone())?;
    let mut report = TrainReport::default();
    for _ in 0..config.epochs {
        let record = trainer.run_epoch(test_set)?;
        observe(&trainer, &record)?;
        report.records.push(record);
    }
    let (model, u) = trainer.into_parts();
    Ok((model, u, report))
}
