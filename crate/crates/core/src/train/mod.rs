//! Training loop, optimizer state and checkpoints.

pub mod checkpoint;
pub mod optim;
pub mod schedule;

use std::time::Instant;

use log::{error, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use routecast_tensor::{Real, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{Config, Precision};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::lds::{weighted_mse, LdsTable};
use crate::metrics::{pearson, Correlations, KendallVariant};
use crate::model::Model;

pub use checkpoint::Checkpoint;
pub use optim::{clip_global_norm, global_norm, AdamW};
pub use schedule::Schedule;

/// Element types the trainer can run in.
pub trait Precise: Real {
    const PRECISION: Precision;
}

impl Precise for f32 {
    const PRECISION: Precision = Precision::F32;
}

impl Precise for f64 {
    const PRECISION: Precision = Precision::F64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val: Correlations,
    /// Learning rate of the last update in the epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    precision: Precision,
    epoch: usize,
    step: u64,
    dataset_len: usize,
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    best_score: Option<f64>,
}

struct Best<T> {
    epoch: usize,
    score: f64,
    params: Vec<Tensor<T>>,
}

/// Seeded split of `0..n` into training and validation indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let val = if n < 2 || val_fraction <= 0.0 {
        0
    } else {
        ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1)
    };
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    idx.shuffle(&mut rng);
    let train = idx.split_off(val);
    let mut val_idx = idx;
    val_idx.sort_unstable();
    let mut train = train;
    train.sort_unstable();
    (train, val_idx)
}

/// Training order for one epoch; depends only on the seed and epoch number.
pub fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

pub struct Trainer<T> {
    config: Config,
    model: Model<T>,
    adam: AdamW<T>,
    lds: Option<LdsTable>,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    dataset_len: usize,
    epoch: usize,
    history: Vec<EpochRecord>,
    best: Option<Best<T>>,
}

impl<T: Precise> Trainer<T> {
    pub fn new(config: &Config, data: &[Sample]) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.train.seed)?;
        Self::with_model(config, model, data)
    }

    fn with_model(config: &Config, model: Model<T>, data: &[Sample]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let res = config.model.resolution();
        for s in data {
            if (s.label.width, s.label.height) != (res.width, res.height) {
                return Err(Error::Data(format!(
                    "{}: label is {}x{} but the model predicts {res}",
                    s.name, s.label.width, s.label.height
                )));
            }
        }
        let t = &config.train;
        let (train_idx, val_idx) = split_indices(data.len(), t.val_fraction, t.seed);
        let lds = if t.lds {
            Some(LdsTable::from_labels(
                train_idx.iter().map(|&i| &data[i].label),
                &t.lds_config,
            )?)
        } else {
            None
        };
        let adam = AdamW::new(model.params().tensors(), t.weight_decay);
        Ok(Self {
            config: config.clone(),
            model,
            adam,
            lds,
            train_idx,
            val_idx,
            dataset_len: data.len(),
            epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }

    /// Restore full training state from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, data: &[Sample]) -> Result<Self> {
        let config: Config = ckpt.json("config")?;
        config.validate()?;
        let meta: Meta = ckpt.json("meta")?;
        if meta.precision != T::PRECISION {
            return Err(Error::Compat(format!(
                "checkpoint was trained in {:?}, resuming in {:?}",
                meta.precision,
                T::PRECISION
            )));
        }
        if meta.dataset_len != data.len() {
            return Err(Error::Compat(format!(
                "checkpoint saw {} samples, dataset has {}",
                meta.dataset_len,
                data.len()
            )));
        }
        let model = Model::from_named(&config.model, &ckpt.tensors("params")?)?;
        let mut tr = Self::with_model(&config, model, data)?;
        if ckpt.get("lds").is_some() {
            tr.lds = Some(ckpt.json("lds")?);
        }
        let moments = |name: &str| -> Result<Vec<Tensor<T>>> {
            let named = ckpt.tensors(name)?;
            let mut store = tr.model.params().clone();
            store.load_named(&named.into_iter().map(|(n, t)| (n, t.cast::<T>())).collect::<Vec<_>>())?;
            Ok(store.tensors().to_vec())
        };
        tr.adam.m = moments("adam.m")?;
        tr.adam.v = moments("adam.v")?;
        tr.adam.step = meta.step;
        tr.epoch = meta.epoch;
        tr.history = meta.history;
        if let (Some(epoch), Some(score)) = (meta.best_epoch, meta.best_score) {
            let named: Vec<_> = ckpt.tensors("best")?;
            tr.best = Some(Best {
                epoch,
                score,
                params: named.iter().map(|(_, t)| t.cast::<T>()).collect(),
            });
        }
        Ok(tr)
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<T> {
        &mut self.model
    }

    pub fn lds(&self) -> Option<&LdsTable> {
        self.lds.as_ref()
    }

    pub fn set_lds(&mut self, table: Option<LdsTable>) {
        self.lds = table;
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val_idx
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.epoch)
    }

    pub fn schedule(&self) -> Schedule {
        let t = &self.config.train;
        let per_epoch = self.train_idx.len().div_ceil(t.batch_size) as u64;
        Schedule::new(
            t.base_lr,
            t.warmup_epochs as u64 * per_epoch,
            t.epochs as u64 * per_epoch,
        )
    }

    fn sample_gradient(&self, s: &Sample) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let b = self.model.bind(&mut tape, true);
        let pred = self.model.forward(&mut tape, &b, &s.nodes)?;
        let loss = weighted_mse(&mut tape, pred, &s.label, self.lds.as_ref())?;
        let lv = tape.value(loss).item()?.f64();
        if !lv.is_finite() {
            return Ok((lv, Vec::new()));
        }
        tape.backward(loss)?;
        let grads = b
            .vars()
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect();
        Ok((lv, grads))
    }

    fn member_results(&self, data: &[Sample], members: &[usize]) -> Result<Vec<(f64, Vec<Tensor<T>>)>> {
        let threads = self.config.train.threads.clamp(1, members.len().max(1));
        if threads == 1 {
            return members.iter().map(|&i| self.sample_gradient(&data[i])).collect();
        }
        let chunk = members.len().div_ceil(threads);
        let parts: Vec<Result<Vec<_>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = members
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|&i| self.sample_gradient(&data[i])).collect()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(members.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Per-member losses and the member-averaged gradient, reduced in member order.
    pub fn batch_gradients(&self, data: &[Sample], members: &[usize]) -> Result<(Vec<f64>, Vec<Tensor<T>>)> {
        let results = self.member_results(data, members)?;
        let losses: Vec<f64> = results.iter().map(|r| r.0).collect();
        if losses.iter().any(|l| !l.is_finite()) {
            return Ok((losses, Vec::new()));
        }
        let mut iter = results.into_iter();
        let (_, mut acc) = iter.next().ok_or_else(|| Error::Data("empty batch".into()))?;
        for (_, g) in iter {
            for (a, b) in acc.iter_mut().zip(&g) {
                a.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x += y);
            }
        }
        let inv = T::of(1.0 / members.len() as f64);
        for a in &mut acc {
            a.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
        Ok((losses, acc))
    }

    /// One optimizer update on `members`; returns their mean loss.
    pub fn train_step(&mut self, data: &[Sample], members: &[usize]) -> Result<f64> {
        let (losses, mut grads) = self.batch_gradients(data, members)?;
        if losses.iter().any(|l| !l.is_finite()) {
            let batch: Vec<String> = members.iter().map(|&i| data[i].name.clone()).collect();
            error!("non-finite loss in batch {batch:?}: {losses:?}");
            return Err(Error::NonFinite {
                epoch: self.epoch,
                step: self.adam.step as usize,
                batch,
                losses,
            });
        }
        if let Some(max) = self.config.train.grad_clip {
            clip_global_norm(&mut grads, max);
        }
        let lr = self.schedule().lr_at(self.adam.step + 1);
        self.adam.update(self.model.params_mut().tensors_mut(), &grads, lr);
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Mean loss and correlations over `indices` without updating anything.
    pub fn evaluate(&self, data: &[Sample], indices: &[usize]) -> Result<(f64, Correlations)> {
        let mut loss = 0.0;
        let (mut ps, mut ss, mut ks) = (Vec::new(), Vec::new(), Vec::new());
        for &i in indices {
            let s = &data[i];
            let mut tape = Tape::new().with_finite_checks(false);
            let b = self.model.bind(&mut tape, false);
            let pred = self.model.forward(&mut tape, &b, &s.nodes)?;
            let l = weighted_mse(&mut tape, pred, &s.label, self.lds.as_ref())?;
            loss += tape.value(l).item()?.f64();
            let p: Vec<f64> = tape.value(pred).data().iter().map(|v| v.f64()).collect();
            let c = Correlations::compute(&p, &s.label.to_f64(), KendallVariant::TauB);
            ps.extend(c.pearson);
            ss.extend(c.spearman);
            ks.extend(c.kendall);
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let n = indices.len().max(1) as f64;
        Ok((
            loss / n,
            Correlations {
                pearson: mean(&ps),
                spearman: mean(&ss),
                kendall: mean(&ks),
            },
        ))
    }

    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<EpochRecord> {
        if data.len() != self.dataset_len {
            return Err(Error::Compat(format!(
                "trainer was set up for {} samples, got {}",
                self.dataset_len,
                data.len()
            )));
        }
        let start = Instant::now();
        let order = epoch_order(&self.train_idx, self.config.train.seed, self.epoch);
        let mut total = 0.0;
        for batch in order.chunks(self.config.train.batch_size) {
            total += self.train_step(data, batch)? * batch.len() as f64;
        }
        let train_loss = total / order.len() as f64;
        let (val_loss, val) = if self.val_idx.is_empty() {
            (None, Correlations::default())
        } else {
            let (l, c) = self.evaluate(data, &self.val_idx)?;
            (Some(l), c)
        };
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss,
            val_loss,
            val,
            lr: self.schedule().lr_at(self.adam.step),
            seconds: start.elapsed().as_secs_f64(),
        };
        let score = if self.val_idx.is_empty() {
            -train_loss
        } else {
            val.pearson.unwrap_or(f64::NEG_INFINITY)
        };
        if self.best.as_ref().is_none_or(|b| score > b.score) {
            self.best = Some(Best {
                epoch: self.epoch,
                score,
                params: self.model.params().tensors().to_vec(),
            });
        }
        info!(
            "epoch {} loss {:.6} val pearson {} lr {:.3e} ({:.1}s)",
            record.epoch,
            record.train_loss,
            record.val.pearson.map_or("n/a".into(), |p| format!("{p:.4}")),
            record.lr,
            record.seconds
        );
        self.epoch += 1;
        self.history.push(record.clone());
        Ok(record)
    }

    /// Train until `until` epochs are complete (capped at the configured
    /// count), calling `on_epoch` after each one.
    pub fn run(
        &mut self,
        data: &[Sample],
        until: usize,
        mut on_epoch: impl FnMut(&Self, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.config.train.epochs);
        while self.epoch < until {
            let rec = self.train_epoch(data)?;
            on_epoch(self, &rec)?;
        }
        Ok(())
    }

    fn named(&self, tensors: &[Tensor<T>]) -> Vec<(String, Tensor<T>)> {
        self.model
            .params()
            .names()
            .iter()
            .cloned()
            .zip(tensors.iter().cloned())
            .collect()
    }

    fn meta(&self) -> Meta {
        Meta {
            precision: T::PRECISION,
            epoch: self.epoch,
            step: self.adam.step,
            dataset_len: self.dataset_len,
            history: self.history.clone(),
            best_epoch: self.best.as_ref().map(|b| b.epoch),
            best_score: self.best.as_ref().map(|b| b.score),
        }
    }

    /// Full resumable state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put_json("config", &self.config);
        c.put_json("meta", &self.meta());
        c.put_tensors("params", &self.model.params().to_named());
        c.put_tensors("adam.m", &self.named(&self.adam.m));
        c.put_tensors("adam.v", &self.named(&self.adam.v));
        if let Some(b) = &self.best {
            c.put_tensors("best", &self.named(&b.params));
        }
        if let Some(t) = &self.lds {
            c.put_json("lds", t);
        }
        c
    }

    /// Inference checkpoint holding the best parameters seen so far.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put_json("config", &self.config);
        c.put_json("meta", &self.meta());
        let params = self.best.as_ref().map_or(self.model.params().tensors(), |b| &b.params);
        c.put_tensors("params", &self.named(params));
        if let Some(t) = &self.lds {
            c.put_json("lds", t);
        }
        c
    }

    /// Replace the live parameters with the best ones seen.
    pub fn restore_best(&mut self) {
        if let Some(b) = &self.best {
            self.model.params_mut().tensors_mut().clone_from_slice(&b.params);
        }
    }
}

/// Load a model for inference from any checkpoint with `config` and `params`.
pub fn load_model<T: Real>(ckpt: &Checkpoint) -> Result<Model<T>> {
    let config: Config = ckpt.json("config")?;
    Model::from_named(&config.model, &ckpt.tensors("params")?)
}

/// Mean per-sample Pearson of a model over `samples`.
pub fn mean_pearson<T: Real>(model: &Model<T>, samples: &[&Sample]) -> Result<Option<f64>> {
    let mut vals = Vec::new();
    for s in samples {
        let pred = model.predict(&s.nodes)?;
        vals.extend(pearson(&pred.to_f64(), &s.label.to_f64()));
    }
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = split_indices(200, 0.1, 5);
        assert_eq!((t.len(), v.len()), (180, 20));
        assert!(v.iter().all(|i| !t.contains(i)));
        assert_eq!(split_indices(200, 0.1, 5), (t.clone(), v.clone()));
        assert_ne!(split_indices(200, 0.1, 6).1, v);
        assert_eq!(split_indices(1, 0.1, 0).1.len(), 0);
        assert_eq!(split_indices(4, 0.0, 0).0.len(), 4);
    }

    #[test]
    fn epoch_order_depends_on_epoch_only() {
        let idx: Vec<usize> = (0..50).collect();
        assert_eq!(epoch_order(&idx, 1, 3), epoch_order(&idx, 1, 3));
        assert_ne!(epoch_order(&idx, 1, 3), epoch_order(&idx, 1, 4));
    }
}
