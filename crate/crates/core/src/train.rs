//! Minibatch AdamW training with per-epoch validation and early stopping
//! on validation F1.

use std::io::Write;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::io::{Dataset, EmbeddingTable};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{AomdModel, ModelConfig, PreparedPost};
use crate::nn::{adamw_step, OptimConfig, ParameterStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without a validation-F1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Decision threshold on the offensive probability.
    pub threshold: f64,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            patience: 20,
            seed: 0,
            threshold: 0.5,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "train.threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        self.optim.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the train split after the epoch's updates.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_f1: f64,
}

pub struct TrainOutcome {
    pub model: AomdModel,
    /// Parameters from the epoch with the best validation F1.
    pub store: ParameterStore,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub history: Vec<EpochRecord>,
}

/// Prepares the labelled posts of one split.
pub fn prepare_split(
    model: &AomdModel,
    ds: &Dataset,
    table: &EmbeddingTable,
    split: Split,
) -> Result<Vec<PreparedPost>> {
    let posts = ds.split(split);
    if let Some(p) = posts.iter().find(|p| p.label.is_none()) {
        return Err(Error::InvalidPost {
            id: p.id.clone(),
            reason: "unlabelled post in a labelled split".into(),
        });
    }
    posts.into_iter().map(|p| model.prepare(p, table)).collect()
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Model config with data-dependent widths filled in from `ds` and `table`.
pub fn resolve_config(
    mut config: ModelConfig,
    ds: &Dataset,
    table: &EmbeddingTable,
) -> Result<ModelConfig> {
    config.resolve_dims(table.dim(), ds.header.global_dim, ds.header.object_dim)?;
    Ok(config)
}

/// Trains on the dataset's train split with validation on its val split.
pub fn train(
    ds: &Dataset,
    table: &EmbeddingTable,
    model: ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model_config = resolve_config(model, ds, table)?;
    let (model, store) = AomdModel::init(model_config, config.seed)?;
    let train_posts = prepare_split(&model, ds, table, Split::Train)?;
    let val_posts = prepare_split(&model, ds, table, Split::Val)?;
    fit(model, store, &train_posts, &val_posts, config)
}

/// Scores and evaluates labelled posts.
pub fn evaluate_posts(
    model: &AomdModel,
    store: &ParameterStore,
    posts: &[PreparedPost],
    threshold: f64,
) -> Result<(EvalReport, Vec<f64>)> {
    let scores = posts
        .iter()
        .map(|p| model.predict(store, p))
        .collect::<Result<Vec<_>>>()?;
    let labels = posts
        .iter()
        .map(|p| {
            p.label.ok_or_else(|| Error::InvalidPost {
                id: p.id.clone(),
                reason: "evaluation requires a label".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((evaluate(&scores, &labels, threshold)?, scores))
}

fn mean_loss_and_accuracy(
    model: &AomdModel,
    store: &ParameterStore,
    posts: &[PreparedPost],
    threshold: f64,
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for p in posts {
        let y_hat = model.predict(store, p)?;
        let y = p.label.unwrap_or(0);
        loss += crate::nn::ops::cross_entropy(y_hat, y);
        correct += (((y_hat >= threshold) as u8) == y) as usize;
    }
    let n = posts.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Stream offset for the shuffle schedule, kept clear of the streams used
/// for initialisation.
const SHUFFLE_STREAM: u64 = 1 << 32;

/// Trains from an initialised (or resumed) store. The shuffle of each
/// epoch is derived from the seed and the store's step counter, so a
/// resumed run continues the same schedule.
pub fn fit(
    model: AomdModel,
    mut store: ParameterStore,
    train: &[PreparedPost],
    val: &[PreparedPost],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit(split_name(Split::Train)));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit(split_name(Split::Val)));
    }
    let opt = &config.optim;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParameterStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SHUFFLE_STREAM + store.step());
        order.shuffle(&mut rng);
        for batch in order.chunks(opt.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (_, _, grads) = model
                    .loss_and_grads(&store, &train[i], scale)
                    .map_err(|e| diverged(e, epoch))?;
                store.accumulate(&grads, 1.0);
            }
            store.clip_grad_norm(opt.clip_norm);
            adamw_step(&mut store, opt);
        }

        let (train_loss, train_accuracy) =
            mean_loss_and_accuracy(&model, &store, train, config.threshold)
                .map_err(|e| diverged(e, epoch))?;
        if !train_loss.is_finite() {
            return Err(diverged(Error::Numeric { op: "train_loss" }, epoch));
        }
        let (report, _) = evaluate_posts(&model, &store, val, config.threshold)
            .map_err(|e| diverged(e, epoch))?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            val_accuracy: report.accuracy,
            val_f1: report.f1,
        };
        debug!(
            "epoch {epoch}: loss {train_loss:.6} train acc {train_accuracy:.4} val acc {:.4} val f1 {:.4}",
            rec.val_accuracy, rec.val_f1
        );
        history.push(rec);

        match &best {
            Some((_, f1, _)) if report.f1 <= *f1 => {}
            _ => best = Some((epoch, report.f1, store.clone())),
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= config.patience {
            info!(
                "early stop at epoch {epoch}; best val F1 {:.4} at epoch {best_epoch}",
                best.as_ref().unwrap().1
            );
            break;
        }
    }

    let (best_epoch, best_val_f1, store) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        store,
        best_epoch,
        best_val_f1,
        history,
    })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numeric { op } => {
            log::error!("training diverged in epoch {epoch}: non-finite value in {op}");
            Error::Numeric { op }
        }
        other => other,
    }
}

pub fn write_history_csv(w: impl Write, history: &[EpochRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for rec in history {
        out.serialize(rec)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synthetic::{generate, SyntheticSpec};
    use crate::model::save_model;

    fn small() -> (crate::io::SyntheticCorpus, ModelConfig) {
        let spec = SyntheticSpec {
            n_posts: 60,
            seed: 3,
            object_dim: 6,
            global_dim: 5,
            embed_dim: 6,
            vocab_size: 30,
            ..Default::default()
        };
        let model = ModelConfig {
            d: 6,
            h: 6,
            mlp_hidden: 12,
            ..Default::default()
        };
        (generate(&spec).unwrap(), model)
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            patience: 1000,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn memorises_a_single_post() {
        let (c, m) = small();
        let m = resolve_config(m, &c.dataset, &c.embeddings).unwrap();
        let (model, store) = AomdModel::init(m, 1).unwrap();
        let one = vec![model.prepare(&c.dataset.posts[0], &c.embeddings).unwrap()];
        let mut cfg = quick(500);
        cfg.optim.batch_size = 1;
        let out = fit(model, store, &one, &one, &cfg).unwrap();
        assert_eq!(out.history.len(), 500);
        assert!(
            out.history.last().unwrap().train_loss < 0.01,
            "{:?}",
            out.history.last()
        );
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let (c, m) = small();
        let run = || {
            let out = train(&c.dataset, &c.embeddings, m.clone(), &quick(4)).unwrap();
            let mut ckpt = Vec::new();
            save_model(&mut ckpt, &out.model, &out.store).unwrap();
            let mut hist = Vec::new();
            write_history_csv(&mut hist, &out.history).unwrap();
            (
                ckpt,
                hist,
                out.history
                    .iter()
                    .map(|r| r.train_loss.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn small_learning_rate_loss_is_nonincreasing() {
        let (c, m) = small();
        let mut cfg = quick(15);
        cfg.optim.learning_rate /= 10.0;
        cfg.optim.batch_size = 1000;
        let out = train(&c.dataset, &c.embeddings, m, &cfg).unwrap();
        for w in out.history.windows(2) {
            assert!(
                w[1].train_loss <= w[0].train_loss + 1e-6,
                "{:?}",
                out.history
            );
        }
    }

    #[test]
    fn early_stopping_keeps_the_best_checkpoint() {
        let (c, m) = small();
        let mut cfg = quick(40);
        cfg.patience = 3;
        let out = train(&c.dataset, &c.embeddings, m, &cfg).unwrap();
        let max_f1 = out
            .history
            .iter()
            .map(|r| r.val_f1)
            .fold(f64::MIN, f64::max);
        assert_eq!(out.best_val_f1, max_f1);
        assert_eq!(out.history[out.best_epoch - 1].val_f1, max_f1);
        assert!(out.history.len() <= out.best_epoch + cfg.patience);
        let val = prepare_split(&out.model, &c.dataset, &c.embeddings, Split::Val).unwrap();
        let (report, _) = evaluate_posts(&out.model, &out.store, &val, 0.5).unwrap();
        assert_eq!(report.f1, max_f1);
    }

    #[test]
    fn resume_continues_the_step_counter() {
        let (c, m) = small();
        let out = train(&c.dataset, &c.embeddings, m, &quick(2)).unwrap();
        let step = out.store.step();
        assert!(step > 0);
        let tr = prepare_split(&out.model, &c.dataset, &c.embeddings, Split::Train).unwrap();
        let val = prepare_split(&out.model, &c.dataset, &c.embeddings, Split::Val).unwrap();
        let batches = tr.len().div_ceil(32) as u64;
        let again = fit(out.model, out.store, &tr, &val, &quick(1)).unwrap();
        assert_eq!(again.store.step(), step + batches);
    }

    #[test]
    fn empty_splits_are_rejected() {
        let (c, m) = small();
        let m = resolve_config(m, &c.dataset, &c.embeddings).unwrap();
        let (model, store) = AomdModel::init(m, 1).unwrap();
        let one = vec![model.prepare(&c.dataset.posts[0], &c.embeddings).unwrap()];
        assert!(matches!(
            fit(model.clone(), store.clone(), &[], &one, &quick(1)),
            Err(Error::EmptySplit("train"))
        ));
        assert!(matches!(
            fit(model, store, &one, &[], &quick(1)),
            Err(Error::EmptySplit("val"))
        ));
    }

    #[test]
    fn history_csv_columns() {
        let mut buf = Vec::new();
        let rec = EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            train_accuracy: 0.75,
            val_accuracy: 0.5,
            val_f1: 0.25,
        };
        write_history_csv(&mut buf, &[rec]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,train_accuracy,val_accuracy,val_f1\n1,0.5,0.75,0.5,0.25\n"
        );
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            threshold: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        let c: TrainConfig =
            serde_json::from_str(r#"{"epochs": 3, "optim": {"batch_size": 4}}"#).unwrap();
        assert_eq!((c.epochs, c.optim.batch_size, c.patience), (3, 4, 20));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }
}
