//! Composite loss, Adam training loop and checkpoints.

mod checkpoint;
mod loss;
mod optim;

pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry, TensorGroup};
pub use loss::{composite_loss, composite_loss_graph, Labels, LossParts, LossWeights};
pub use optim::{clip_global_norm, global_norm, Adam};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::stream_rng;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Graph, Tensor};
use crate::textnum::{MixedSequence, TokenizerState};

/// Base stream for per-epoch shuffles; epoch `e` uses `SHUFFLE_STREAM + e`.
const SHUFFLE_STREAM: u64 = 1 << 32;

/// An encoded `(source, target)` pair.
pub type Pair = (MixedSequence, MixedSequence);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda_route: f64,
    pub lambda_num: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-4,
            batch_size: 32,
            lambda_route: 1.0,
            lambda_num: 1.0,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lambda_route >= 0.0 && self.lambda_num >= 0.0) {
            return bad("loss weights must be >= 0");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size and eval_every must be >= 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            route: self.lambda_route,
            num: self.lambda_num,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: LossParts,
}

/// What [`Trainer::fit`] reports after each epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train: LossParts,
    pub val: Option<LossParts>,
    /// The validation loss is the best seen so far.
    pub improved: bool,
}

/// Training state: model, optimizer and bookkeeping.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    adam: Adam,
    epoch: usize,
    best_val: Option<(usize, f64)>,
    log: Vec<LogRow>,
    tokenizer: Option<TokenizerState>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(model.params().tensors().iter().map(Tensor::numel));
        Ok(Trainer {
            model,
            cfg,
            adam,
            epoch: 0,
            best_val: None,
            log: Vec::new(),
            tokenizer: None,
        })
    }

    /// Attaches the tokenizer so checkpoints are self-contained.
    pub fn with_tokenizer(mut self, state: TokenizerState) -> Self {
        self.tokenizer = Some(state);
        self
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        Ok(Trainer {
            model: ckpt.model,
            cfg: ckpt.train,
            adam: ckpt.adam,
            epoch: ckpt.epoch,
            best_val: ckpt.best_val,
            log: ckpt.log,
            tokenizer: ckpt.tokenizer,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.cfg.clone(),
            tokenizer: self.tokenizer.clone(),
            epoch: self.epoch,
            best_val: self.best_val,
            log: self.log.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Replaces the training configuration, e.g. to extend `epochs` on resume.
    pub fn set_config(&mut self, cfg: TrainConfig) -> Result<()> {
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.adam.t
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn best_val(&self) -> Option<(usize, f64)> {
        self.best_val
    }

    /// Loss and per-parameter gradients of one packed batch.
    pub fn gradients(&self, batch: &[&Pair]) -> Result<(LossParts, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let b = self.model.bind(&mut g, true);
        let pairs: Vec<(&MixedSequence, &MixedSequence)> = batch.iter().map(|p| (&p.0, &p.1)).collect();
        let heads = self.model.forward_graph(&mut g, &b, &pairs)?;
        let tgts: Vec<&MixedSequence> = batch.iter().map(|p| &p.1).collect();
        let labels = Labels::new(&tgts, self.model.config().scheme);
        let [total, text, route, num] = composite_loss_graph(&mut g, heads, &labels, self.cfg.weights())?;
        let parts = LossParts {
            total: g.value(total).item(),
            text: g.value(text).item(),
            route: g.value(route).item(),
            num: g.value(num).item(),
        };
        if let Some(component) = parts.non_finite() {
            return Err(Error::NonFinite {
                component,
                epoch: self.epoch + 1,
                step: self.adam.t as usize + 1,
            });
        }
        g.backward(total)?;
        let grads = b
            .vars()
            .iter()
            .zip(self.model.params().tensors())
            .map(|(v, t)| g.take_grad(*v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        Ok((parts, grads))
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &[&Pair]) -> Result<LossParts> {
        let (parts, mut grads) = self.gradients(batch)?;
        clip_global_norm(&mut grads, self.cfg.grad_clip);
        let mut slices: Vec<&mut [f64]> = self
            .model
            .params_mut()
            .tensors_mut()
            .iter_mut()
            .map(|t| t.data_mut())
            .collect();
        self.adam.step(&mut slices, &grads, self.cfg.lr);
        Ok(parts)
    }

    /// Example order for epoch `epoch` (1-based), fixed by the seed.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, SHUFFLE_STREAM + epoch as u64));
        order
    }

    /// One pass over `train`; returns the example-weighted mean batch loss.
    pub fn train_epoch(&mut self, train: &[Pair]) -> Result<LossParts> {
        if train.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let order = self.epoch_order(train.len(), self.epoch + 1);
        let mut acc = LossParts::default();
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Pair> = chunk.iter().map(|&i| &train[i]).collect();
            let parts = self.step(&batch)?;
            accumulate(&mut acc, &parts, chunk.len() as f64 / train.len() as f64);
        }
        self.epoch += 1;
        Ok(acc)
    }

    /// Mean loss over `set` without updating anything.
    pub fn loss_on(&self, set: &[Pair]) -> Result<LossParts> {
        if set.is_empty() {
            return Err(Error::Input("empty evaluation set".into()));
        }
        let mut acc = LossParts::default();
        for chunk in set.chunks(self.cfg.batch_size) {
            let mut g = Graph::new();
            let b = self.model.bind(&mut g, false);
            let pairs: Vec<(&MixedSequence, &MixedSequence)> = chunk.iter().map(|p| (&p.0, &p.1)).collect();
            let heads = self.model.forward_graph(&mut g, &b, &pairs)?;
            let tgts: Vec<&MixedSequence> = chunk.iter().map(|p| &p.1).collect();
            let labels = Labels::new(&tgts, self.model.config().scheme);
            let [total, text, route, num] = composite_loss_graph(&mut g, heads, &labels, self.cfg.weights())?;
            let parts = LossParts {
                total: g.value(total).item(),
                text: g.value(text).item(),
                route: g.value(route).item(),
                num: g.value(num).item(),
            };
            accumulate(&mut acc, &parts, chunk.len() as f64 / set.len() as f64);
        }
        Ok(acc)
    }

    /// Trains until `epochs` are complete. The first call logs an epoch-0
    /// row of losses before any update. `on_epoch` runs after every epoch,
    /// e.g. to write checkpoints.
    pub fn fit(
        &mut self,
        train: &[Pair],
        val: &[Pair],
        mut on_epoch: impl FnMut(&Trainer, &EpochReport) -> Result<()>,
    ) -> Result<()> {
        if self.epoch == 0 && self.log.is_empty() {
            let t = self.loss_on(train)?;
            self.push_log(0, Split::Train, t)?;
            if !val.is_empty() {
                let v = self.loss_on(val)?;
                self.push_log(0, Split::Val, v)?;
            }
        }
        while self.epoch < self.cfg.epochs {
            let t = self.train_epoch(train)?;
            self.push_log(self.epoch, Split::Train, t)?;
            let due = self.epoch.is_multiple_of(self.cfg.eval_every) || self.epoch == self.cfg.epochs;
            let mut report = EpochReport {
                epoch: self.epoch,
                train: t,
                val: None,
                improved: false,
            };
            if due && !val.is_empty() {
                let v = self.loss_on(val)?;
                self.push_log(self.epoch, Split::Val, v)?;
                report.val = Some(v);
                if self.best_val.is_none_or(|(_, b)| v.total < b) {
                    self.best_val = Some((self.epoch, v.total));
                    report.improved = true;
                }
            }
            on_epoch(self, &report)?;
        }
        Ok(())
    }

    fn push_log(&mut self, epoch: usize, split: Split, loss: LossParts) -> Result<()> {
        if let Some(component) = loss.non_finite() {
            return Err(Error::NonFinite {
                component,
                epoch,
                step: self.adam.t as usize,
            });
        }
        self.log.push(LogRow { epoch, split, loss });
        Ok(())
    }
}

fn accumulate(acc: &mut LossParts, p: &LossParts, w: f64) {
    acc.total += w * p.total;
    acc.text += w * p.text;
    acc.route += w * p.route;
    acc.num += w * p.num;
}

/// Writes the loss log as CSV: `epoch,split,loss_total,loss_text,loss_route,loss_num`.
pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,split,loss_total,loss_text,loss_route,loss_num\n");
    for r in rows {
        let split = match r.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        out.push_str(&format!(
            "{},{split},{},{},{},{}\n",
            r.epoch, r.loss.total, r.loss.text, r.loss.route, r.loss.num
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
