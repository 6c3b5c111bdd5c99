use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{max_norm_deviation, PreparedSet};
use crate::data::{stratified_batches, DatasetSpec, Label};
use crate::error::{Error, Result};
use crate::losses::{total_loss, BatchPartition, LossWeights};
use crate::model::{save_checkpoint, Mode, ModelConfig, RcdnModel};
use crate::tensor::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Evaluate on the held-out set every this many epochs; 0 disables.
    pub eval_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Drives weight initialization (it replaces `model.seed`) and batch order.
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            eval_every: 0,
            checkpoint_path: None,
            seed: 1,
            model: ModelConfig::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 4 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_size must be even and at least 4, got {}",
                self.batch_size
            )));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        self.model_config().validate()?;
        self.dataset.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.dataset.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "dataset image_size {} differs from model image_size {}",
                self.dataset.image_size, self.model.image_size
            )));
        }
        Ok(())
    }

    /// Model configuration with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }
}

/// Per-epoch means of the training batches. The loss fields average batch
/// values; the distance means average over samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_center: f64,
    pub l_sep: f64,
    pub total: f64,
    pub mean_d_real: f64,
    pub mean_d_fake: f64,
    pub train_accuracy: f64,
    pub max_norm_deviation: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: RcdnModel,
    pub trace: Vec<EpochRecord>,
    /// Largest `| ||z|| - 1 |` over every embedding produced during training.
    pub max_norm_deviation: f64,
}

/// Trains on a set holding both real and forged samples. Deterministic for a
/// fixed configuration and set.
pub fn train(config: &TrainConfig, set: &PreparedSet, held_out: Option<&PreparedSet>) -> Result<TrainOutcome> {
    config.validate()?;
    if set.size != config.model.image_size {
        return Err(Error::dim(
            "train",
            "height/width",
            format!(
                "set has {0}x{0} images, model expects {1}",
                set.size, config.model.image_size
            ),
        ));
    }
    let mut model = RcdnModel::new(config.model_config())?;
    let weights = LossWeights::from(model.config());
    let mut adam = Adam::new(config.optimizer);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut worst_norm = 0.0f64;

    for epoch in 0..config.epochs {
        let batches = stratified_batches(&set.labels, config.batch_size, config.seed, epoch as u64)?;
        if batches.is_empty() {
            return Err(Error::Validation(
                "training set too small for one stratified batch".into(),
            ));
        }
        let mut sums = [0.0; 4];
        let (mut d_real, mut n_real, mut d_fake, mut n_fake) = (0.0, 0usize, 0.0, 0usize);
        let (mut correct, mut seen) = (0usize, 0usize);
        let mut epoch_norm = 0.0f64;

        for (b, rows) in batches.iter().enumerate() {
            let (images, spectra) = set.batch(rows)?;
            let labels: Vec<Label> = rows.iter().map(|&r| set.labels[r]).collect();
            let part = BatchPartition::from_labels(&labels);

            let mut pass = model.pass(Mode::Train);
            let x = pass.input(&images)?;
            let s = pass.input(&spectra)?;
            let out = pass.embed(x, s)?;
            let dist = pass.distances(out.unit)?;
            let (loss, br) = total_loss(&mut pass.tape, out.logits, &labels, dist, &part, weights)?;
            let abort = |detail: String| Error::NonFinite {
                epoch: epoch + 1,
                batch: b,
                sample_ids: rows.iter().map(|&r| set.ids[r]).collect(),
                breakdown: detail,
            };
            if !br.is_finite() {
                return Err(abort(serde_json::to_string(&br)?));
            }

            let tape = &pass.tape;
            epoch_norm = epoch_norm.max(max_norm_deviation(tape.value(out.unit), model.config().embed_dim));
            for (&label, &d) in labels.iter().zip(tape.value(dist)) {
                match label {
                    Label::Real => (d_real, n_real) = (d_real + d, n_real + 1),
                    Label::Fake => (d_fake, n_fake) = (d_fake + d, n_fake + 1),
                }
            }
            for (l, &label) in tape.value(out.logits).chunks_exact(2).zip(&labels) {
                let predicted = if l[1] > l[0] { Label::Fake } else { Label::Real };
                correct += (predicted == label) as usize;
                seen += 1;
            }
            for (acc, v) in sums.iter_mut().zip([br.l_cls, br.l_center, br.l_sep, br.total]) {
                *acc += v;
            }

            let (mut tape, vars, updates) = pass.finish();
            tape.backward(loss)?;
            model.load_grads(&tape, &vars)?;
            if model
                .params()
                .iter()
                .any(|p| p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
            {
                return Err(abort("non-finite gradient".into()));
            }
            adam.step(model.tensors_mut())?;
            model.apply_bn_updates(&updates);
        }

        let nb = batches.len() as f64;
        let eval_accuracy = match held_out {
            Some(h) if config.eval_every > 0 && (epoch + 1) % config.eval_every == 0 => {
                Some(super::evaluate(&model, h)?.accuracy)
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            l_cls: sums[0] / nb,
            l_center: sums[1] / nb,
            l_sep: sums[2] / nb,
            total: sums[3] / nb,
            mean_d_real: d_real / n_real.max(1) as f64,
            mean_d_fake: d_fake / n_fake.max(1) as f64,
            train_accuracy: correct as f64 / seen as f64,
            max_norm_deviation: epoch_norm,
            eval_accuracy,
        };
        log::info!(
            "epoch {:>3}: total {:.4} (cls {:.4}, center {:.4}, sep {:.4}), d_real {:.3}, d_fake {:.3}, acc {:.4}",
            record.epoch,
            record.total,
            record.l_cls,
            record.l_center,
            record.l_sep,
            record.mean_d_real,
            record.mean_d_fake,
            record.train_accuracy
        );
        worst_norm = worst_norm.max(epoch_norm);
        trace.push(record);
    }

    if let Some(path) = &config.checkpoint_path {
        save_checkpoint(&model, path)?;
    }
    Ok(TrainOutcome {
        model,
        trace,
        max_norm_deviation: worst_norm,
    })
}
