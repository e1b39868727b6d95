//! Training loop, Adam, the step learning-rate schedule and checkpoints.
//!
//! Training is deterministic given the configs and the dataset: the epoch
//! shuffle comes from a ChaCha stream stored in the checkpoint, and every
//! parallel kernel splits work into fixed chunks.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{upsample, Tape, Tensor};
use crate::degradation::{HsiCube, Sample};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig};
use crate::metrics::MetricReport;
use crate::model::{HsrKanModel, ModelConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const CSV_HEADER: &str = "step,epoch,lr,l1,sparse_l1,sparse_entropy,total,val_psnr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimiser steps, if any.
    pub max_steps: Option<usize>,
    pub sparse_loss_enabled: bool,
    pub loss: LossConfig,
    pub seed: u64,
    /// Validate every this many epochs (0 disables periodic validation).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 4e-4,
            decay_factor: 0.1,
            decay_every: 100,
            batch_size: 4,
            epochs: 200,
            max_steps: None,
            sparse_loss_enabled: true,
            loss: LossConfig::default(),
            seed: 0,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.decay_every == 0 || self.decay_factor.is_nan() || self.decay_factor <= 0.0 {
            return Err(Error::config("decay_every and decay_factor must be positive"));
        }
        self.loss.validate()
    }
}

/// `lr0 * decay_factor ^ floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// First and second moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Option<&[f64]>], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adam_step", params.len(), grads.len()));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (k, p) in params.iter_mut().enumerate() {
        let n = p.len();
        if state.m[k].len() != n || grads[k].is_some_and(|g| g.len() != n) {
            return Err(Error::shape("adam_step", n, state.m[k].len()));
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let data = p.data_mut();
        for i in 0..n {
            let g = grads[k].map_or(0.0, |g| g[i]);
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            data[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Samples converted to tensors once.
#[derive(Clone, Debug)]
pub struct Dataset {
    x: Vec<Tensor>,
    y: Vec<Tensor>,
    z: Vec<Tensor>,
}

impl Dataset {
    pub fn new(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config("dataset is empty"));
        }
        Ok(Self {
            x: samples.iter().map(|s| s.x.to_tensor()).collect(),
            y: samples.iter().map(|s| s.y.to_tensor()).collect(),
            z: samples.iter().map(|s| s.z.to_tensor()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// `(X, Y, Z)` batches for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let pick = |v: &[Tensor]| Tensor::stack(&idx.iter().map(|&i| &v[i]).collect::<Vec<_>>());
        Ok((pick(&self.x)?, pick(&self.y)?, pick(&self.z)?))
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l1: f64,
    /// Weighted `lambda * mu1 * sum |Phi|_1`; zero when the sparse loss is off.
    pub sparse_l1: f64,
    pub sparse_entropy: f64,
    pub total: f64,
    pub val_psnr: Option<f64>,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let val = self.val_psnr.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.l1, self.sparse_l1, self.sparse_entropy, self.total, val
        )
    }
}

/// Model, optimiser and data-order state; resumable from a [`Checkpoint`].
pub struct Trainer {
    model: HsrKanModel,
    cfg: TrainConfig,
    adam: AdamState,
    step: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = HsrKanModel::new(model_cfg)?;
        let sizes: Vec<usize> = model.named_parameters().iter().map(|(_, t)| t.len()).collect();
        Ok(Self {
            adam: AdamState::new(&sizes),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            step: 0,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        Ok(Self {
            model: ckpt.model,
            cfg: ckpt.train,
            adam: ckpt.adam,
            step: ckpt.step,
            epoch: ckpt.epoch,
            cursor: ckpt.cursor,
            order: ckpt.order,
            rng: ckpt.rng,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.cfg.clone(),
            adam: self.adam.clone(),
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor,
            order: self.order.clone(),
            rng: self.rng.clone(),
        }
    }

    pub fn model(&self) -> &HsrKanModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// True once the configured epoch or step budget is used up.
    pub fn finished(&self) -> bool {
        self.epoch as usize >= self.cfg.epochs || self.cfg.max_steps.is_some_and(|m| self.step as usize >= m)
    }

    /// One optimiser step on the next batch. The epoch counter advances
    /// after the last batch of a pass.
    pub fn step(&mut self, data: &Dataset) -> Result<StepRecord> {
        let n = data.len();
        if self.cursor == 0 || self.order.len() != n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.cfg.batch_size).min(n);
        let (x, y, z) = data.batch(&self.order[self.cursor..end])?;
        let lr = lr_at(self.epoch as usize, &self.cfg);

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let zv = tape.constant(z);
        let sparse = self.cfg.sparse_loss_enabled;
        let pass = self.model.forward(&mut tape, xv, yv, sparse)?;
        let norms: Vec<_> = pass.edge_norms.iter().map(|l| l.norms).collect();
        let terms = total_loss(&mut tape, pass.output, zv, sparse.then_some(&norms[..]), &self.cfg.loss)?;
        if let Some(err) = tape.first_non_finite() {
            return Err(err);
        }
        let value = |v: Option<_>| v.map_or(0.0, |v| tape.value(v).item());
        let record = StepRecord {
            step: self.step + 1,
            epoch: self.epoch,
            lr,
            l1: tape.value(terms.l1).item(),
            sparse_l1: value(terms.sparse_l1),
            sparse_entropy: value(terms.sparse_entropy),
            total: tape.value(terms.total).item(),
            val_psnr: None,
        };
        let grads = tape.backward(terms.total)?;
        let vars = pass.params.all();
        let g: Vec<Option<&[f64]>> = vars.iter().map(|&v| grads.get(v)).collect();
        if sparse {
            self.model.record_stats(&tape, &pass);
        }
        adam_step(&mut self.model.parameters_mut(), &g, &mut self.adam, lr)?;
        if let Some(k) = self.model.named_parameters().iter().position(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite {
                op: "adam_step",
                node: vars[k].index(),
            });
        }

        self.step += 1;
        self.cursor = end;
        if self.cursor >= n {
            self.cursor = 0;
            self.epoch += 1;
        }
        Ok(record)
    }
}

/// Mean metrics of a model (or of the upsampled input when `model` is
/// `None`) over a set of samples.
pub fn evaluate(model: Option<&HsrKanModel>, samples: &[Sample], scale: usize) -> Result<MetricReport> {
    let preds = predict_all(model, samples, scale)?;
    let mut acc = MetricReport { psnr: 0.0, ssim: 0.0, sam: 0.0, ergas: 0.0 };
    for (p, s) in preds.iter().zip(samples) {
        let r = MetricReport::compute(p, &s.z, scale)?;
        acc.psnr += r.psnr;
        acc.ssim += r.ssim;
        acc.sam += r.sam;
        acc.ergas += r.ergas;
    }
    let n = samples.len().max(1) as f64;
    Ok(MetricReport {
        psnr: acc.psnr / n,
        ssim: acc.ssim / n,
        sam: acc.sam / n,
        ergas: acc.ergas / n,
    })
}

/// Mean whole-cube PSNR over samples.
pub fn mean_psnr(model: Option<&HsrKanModel>, samples: &[Sample], scale: usize) -> Result<f64> {
    let preds = predict_all(model, samples, scale)?;
    let mut acc = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        acc += crate::metrics::psnr(p, &s.z, 1.0)?;
    }
    Ok(acc / samples.len().max(1) as f64)
}

/// Reconstructions for every sample, one forward pass each.
pub fn predict_all(model: Option<&HsrKanModel>, samples: &[Sample], scale: usize) -> Result<Vec<HsiCube>> {
    samples
        .iter()
        .map(|s| {
            let batch1 = |c: &HsiCube| c.to_tensor().reshape([1, c.bands(), c.height(), c.width()]);
            let y = batch1(&s.y)?;
            let out = match model {
                Some(m) => m.predict(&batch1(&s.x)?, &y)?,
                None => upsample(&y, scale, Default::default())?,
            };
            HsiCube::from_tensor(&out)
        })
        .collect()
}

/// Everything [`train`] produces.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    /// Final validation metrics, when a validation split was given.
    pub val_report: Option<MetricReport>,
}

/// Runs the configured number of epochs, validating every `eval_every`
/// epochs. Rows are streamed to `csv` (header first) when given.
pub fn train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    csv: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let trainer = Trainer::new(model_cfg, cfg)?;
    run(trainer, train_set, val_set, csv, true)
}

/// Continues training from a checkpoint; the CSV receives only new rows.
pub fn resume(ckpt: Checkpoint, train_set: &[Sample], val_set: &[Sample], csv: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    run(Trainer::from_checkpoint(ckpt)?, train_set, val_set, csv, false)
}

fn run(
    mut trainer: Trainer,
    train_set: &[Sample],
    val_set: &[Sample],
    mut csv: Option<&mut dyn Write>,
    header: bool,
) -> Result<TrainOutcome> {
    let data = Dataset::new(train_set)?;
    let scale = trainer.model().config().scale;
    if header {
        if let Some(w) = csv.as_deref_mut() {
            writeln!(w, "{CSV_HEADER}")?;
        }
    }
    let mut log = Vec::new();
    while !trainer.finished() {
        let before = trainer.epoch();
        let mut rec = trainer.step(&data)?;
        let every = trainer.config().eval_every;
        let epoch_done = trainer.epoch() != before;
        if epoch_done && every > 0 && trainer.epoch().is_multiple_of(every as u64) && !val_set.is_empty() {
            rec.val_psnr = Some(mean_psnr(Some(trainer.model()), val_set, scale)?);
        }
        if let Some(w) = csv.as_deref_mut() {
            writeln!(w, "{}", rec.csv_row())?;
        }
        log.push(rec);
    }
    let val_report = if val_set.is_empty() {
        None
    } else {
        Some(evaluate(Some(trainer.model()), val_set, scale)?)
    };
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        log,
        val_report,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HSRKAN01";

/// Serialisable training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: HsrKanModel,
    pub train: TrainConfig,
    pub adam: AdamState,
    pub step: u64,
    pub epoch: u64,
    pub cursor: usize,
    pub order: Vec<usize>,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: String,
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
    rng: ChaCha8Rng,
    adam_t: u64,
    /// Parameters; the payload holds each tensor, then every first moment,
    /// then every second moment.
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Fresh state around an existing model (no optimiser history).
    pub fn from_model(model: HsrKanModel, train: TrainConfig) -> Self {
        let sizes: Vec<usize> = model.named_parameters().iter().map(|(_, t)| t.len()).collect();
        Self {
            model,
            adam: AdamState::new(&sizes),
            rng: ChaCha8Rng::seed_from_u64(train.seed),
            train,
            step: 0,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.named_parameters();
        let manifest = Manifest {
            version: crate::VERSION.to_string(),
            model: self.model.config().clone(),
            train: self.train.clone(),
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor,
            order: self.order.clone(),
            rng: self.rng.clone(),
            adam_t: self.adam.t,
            tensors: params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let slices = params
            .iter()
            .map(|(_, t)| t.data())
            .chain(self.adam.m.iter().map(|v| v.as_slice()))
            .chain(self.adam.v.iter().map(|v| v.as_slice()));
        for s in slices {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            what: "checkpoint",
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing HSRKAN01 magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        let mut model = HsrKanModel::new(manifest.model.clone())?;
        let mut payload = bytes[16 + len..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = payload.by_ref().take(n).collect();
            if v.len() != n {
                return Err(bad("truncated payload"));
            }
            Ok(v)
        };
        let names: Vec<(String, Vec<usize>)> =
            model.named_parameters().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        if names.len() != manifest.tensors.len() {
            return Err(bad("parameter count does not match the model config"));
        }
        for ((name, shape), entry) in names.iter().zip(&manifest.tensors) {
            if *name != entry.name || *shape != entry.shape {
                return Err(bad(&format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
            }
        }
        let sizes: Vec<usize> = names.iter().map(|(_, s)| s.iter().product()).collect();
        for (p, &n) in model.parameters_mut().into_iter().zip(&sizes) {
            p.data_mut().copy_from_slice(&take(n)?);
        }
        let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
        let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
        if payload.next().is_some() || !(bytes.len() - 16 - len).is_multiple_of(8) {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            model,
            train: manifest.train,
            adam: AdamState { t: manifest.adam_t, m, v },
            step: manifest.step,
            epoch: manifest.epoch,
            cursor: manifest.cursor,
            order: manifest.order,
            rng: manifest.rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
