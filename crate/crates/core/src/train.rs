//! Supervised training of the matching network on labelled pairs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MelStore, PairExample};
use crate::embeddings::{EmbeddingLayerTag, EmbeddingStore};
use crate::error::{Error, Result};
use crate::metrics::{auc, ScoredPair};
use crate::model::{KwsModel, ModelConfig, PairInput};
use crate::numerics::{
    bce_loss, derive_seed, Adam, Gradients, Graph, Mode, ParamId, Tensor, BCE_CLAMP_EPS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_p: f64,
    pub max_epochs: usize,
    /// Epochs without a validation-AUC improvement before stopping.
    pub patience: usize,
    pub rng_seed: u64,
    pub embedding_tag: EmbeddingLayerTag,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            dropout_p: 0.2,
            max_epochs: 50,
            patience: 10,
            rng_seed: 0,
            embedding_tag: EmbeddingLayerTag::E3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(
                "learning_rate",
                "> 0",
                self.learning_rate,
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::validation("dropout_p", "in [0, 1)", self.dropout_p));
        }
        if self.batch_size < 2 {
            return Err(Error::validation("batch_size", ">= 2", self.batch_size));
        }
        if self.max_epochs == 0 {
            return Err(Error::validation("max_epochs", ">= 1", self.max_epochs));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::format("train config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Fraction in [0, 1].
    pub val_auc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

pub const LOSS_LOG_HEADER: &str = "epoch,train_loss,val_loss,val_auc";

impl LossLog {
    /// CSV with nine significant digits per value.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOSS_LOG_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.8e},{:.8e},{:.8e}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_auc
            ));
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim_end) != Some(LOSS_LOG_HEADER) {
            return Err(Error::format(
                "header",
                format!("expected `{LOSS_LOG_HEADER}`"),
            ));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 4 {
                return Err(Error::format(
                    "columns",
                    format!("line {}: expected 4, found {}", i + 2, c.len()),
                ));
            }
            let num = |j: usize| -> Result<f64> {
                c[j].trim()
                    .parse()
                    .map_err(|_| Error::format("value", format!("line {}: {:?}", i + 2, c[j])))
            };
            let epoch: usize = c[0]
                .trim()
                .parse()
                .map_err(|_| Error::format("epoch", format!("line {}: {:?}", i + 2, c[0])))?;
            if epoch != rows.len() + 1 {
                return Err(Error::validation(
                    format!("epoch (line {})", i + 2),
                    rows.len() + 1,
                    epoch,
                ));
            }
            rows.push(LossRow {
                epoch,
                train_loss: num(1)?,
                val_loss: num(2)?,
                val_auc: num(3)?,
            });
        }
        Ok(LossLog { rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.rows.is_empty() {
            return Err(Error::InvalidArgument(
                "refusing to export an empty loss log".into(),
            ));
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}

/// Result of [`train_model`]: the model holds the parameters of `best_epoch`.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: KwsModel,
    pub log: LossLog,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

/// Mean loss, parameter gradients and batch-norm buffer updates of one batch.
pub type BatchGradients = (f64, Gradients, Vec<(ParamId, Tensor)>);

/// Mean BCE of one batch with its parameter gradients and pending batch-norm updates.
/// Nothing in the model changes.
pub fn batch_gradients(
    model: &KwsModel,
    pairs: &[PairInput<'_>],
    labels: &[f64],
    mode: Mode,
) -> Result<BatchGradients> {
    let mut g = Graph::new(model.store(), mode);
    let p = model.forward_batch(&mut g, pairs)?;
    let loss = g.bce(p, labels, BCE_CLAMP_EPS)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    let updates = g.take_buffer_updates();
    Ok((value, grads, updates))
}

/// One optimizer step: gradients, Adam update, gradient reset, then running-statistic updates.
/// Returns the batch loss measured before the update.
pub fn train_step(
    model: &mut KwsModel,
    opt: &Adam,
    pairs: &[PairInput<'_>],
    labels: &[f64],
    mode: Mode,
) -> Result<f64> {
    let (loss, grads, updates) = batch_gradients(model, pairs, labels, mode)?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    let store = model.store_mut();
    store.accumulate(&grads);
    opt.step(store)?;
    store.zero_grad();
    store.apply_updates(updates);
    Ok(loss)
}

fn inputs<'a>(
    pairs: &[&PairExample],
    mels: &'a MelStore,
    emb: &'a EmbeddingStore,
) -> Result<Vec<PairInput<'a>>> {
    pairs
        .iter()
        .map(|p| {
            Ok(PairInput {
                mel: mels.get(&p.audio_id)?.values(),
                text: emb.get(&p.keyword)?.values(),
            })
        })
        .collect()
}

/// Eval-mode probabilities for `pairs`, scored `chunk` at a time.
pub fn score_pairs(
    model: &KwsModel,
    pairs: &[PairExample],
    mels: &MelStore,
    embeddings: &EmbeddingStore,
    chunk: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for c in pairs.chunks(chunk.max(1)) {
        let refs: Vec<&PairExample> = c.iter().collect();
        out.extend(model.score_batch(&inputs(&refs, mels, embeddings)?, Mode::Eval)?);
    }
    Ok(out)
}

/// Trains a fresh full-size model and returns the parameters of the epoch with the highest
/// validation AUC. Calls `on_epoch` after each epoch.
pub fn train_model_with(
    config: &TrainConfig,
    train: &[PairExample],
    val: &[PairExample],
    mels: &MelStore,
    embeddings: &EmbeddingStore,
    on_epoch: &mut dyn FnMut(&LossRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = KwsModel::new(ModelConfig::for_tag(config.embedding_tag), config.rng_seed)?;
    fit_model(model, config, train, val, mels, embeddings, on_epoch)
}

/// [`train_model_with`] starting from `model`, whose tag must match the config.
pub fn fit_model(
    mut model: KwsModel,
    config: &TrainConfig,
    train: &[PairExample],
    val: &[PairExample],
    mels: &MelStore,
    embeddings: &EmbeddingStore,
    on_epoch: &mut dyn FnMut(&LossRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation pairs must be non-empty".into(),
        ));
    }
    if model.config().embedding_tag != config.embedding_tag {
        return Err(Error::validation(
            "embedding_tag",
            config.embedding_tag,
            model.config().embedding_tag,
        ));
    }
    if let Some(tag) = embeddings.tag() {
        if tag != config.embedding_tag {
            return Err(Error::validation(
                "embedding_tag",
                config.embedding_tag,
                tag,
            ));
        }
    }
    let opt = Adam::new(config.learning_rate)?;
    let val_labels: Vec<f64> = val.iter().map(|p| f64::from(p.label)).collect();

    let mut log = LossLog::default();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let mut order: Vec<&PairExample> = train.iter().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.rng_seed,
            &[0x7368, epoch as u64],
        )));
        let (mut loss_sum, mut seen) = (0.0, 0);
        // a lone trailing pair cannot form batch statistics
        for (b, chunk) in order
            .chunks(config.batch_size)
            .filter(|c| c.len() >= 2)
            .enumerate()
        {
            let batch = inputs(chunk, mels, embeddings)?;
            let labels: Vec<f64> = chunk.iter().map(|p| f64::from(p.label)).collect();
            let mode = Mode::Train {
                dropout_p: config.dropout_p,
                seed: derive_seed(config.rng_seed, &[0x6470, epoch as u64, b as u64]),
            };
            let loss = train_step(&mut model, &opt, &batch, &labels, mode)?;
            history.push(loss);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    history,
                });
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(Error::InvalidArgument(
                "no training batch with at least two pairs".into(),
            ));
        }

        let scores = score_pairs(&model, val, mels, embeddings, config.batch_size)?;
        let val_loss = bce_loss(&scores, &val_labels, BCE_CLAMP_EPS)?;
        let scored = val
            .iter()
            .zip(&scores)
            .map(|(p, s)| ScoredPair::from_pair(p, *s))
            .collect::<Result<Vec<_>>>()?;
        let val_auc = auc(&scored)? / 100.0;
        let row = LossRow {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss,
            val_auc,
        };
        log.rows.push(row);
        on_epoch(&row);

        if best.as_ref().is_none_or(|(_, a, _)| val_auc > *a) {
            best = Some((epoch, val_auc, model.store().snapshot()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_auc, values) = best.expect("at least one epoch ran");
    model.store_mut().restore(&values);
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_auc,
    })
}

pub fn train_model(
    config: &TrainConfig,
    train: &[PairExample],
    val: &[PairExample],
    mels: &MelStore,
    embeddings: &EmbeddingStore,
) -> Result<TrainOutcome> {
    train_model_with(config, train, val, mels, embeddings, &mut |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_round_trip() {
        let cfg = TrainConfig {
            batch_size: 32,
            embedding_tag: EmbeddingLayerTag::E1,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert!(cfg.to_json().contains("\"embedding_tag\": \"E1\""));
        let partial = TrainConfig::from_json(r#"{"batch_size": 16}"#).unwrap();
        assert_eq!(partial.batch_size, 16);
        assert_eq!(partial.learning_rate, 1e-4);
        assert!(matches!(
            TrainConfig::from_json(r#"{"lr": 1}"#),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            TrainConfig::from_json(r#"{"dropout_p": 1.0}"#),
            Err(Error::Validation { .. })
        ));
    }
}
