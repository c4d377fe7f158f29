//! Training recipe: AdamW with decoupled decay, warmup + cosine schedule,
//! epoch loops, evaluation, checkpointing, and the metrics CSV.

use crate::capsule::{margin_loss, predict};
use crate::data::{batch_to, epoch_batches, stream_rng, AugmentPolicy, Dataset, StreamDomain};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Mode, ParamId, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

/// The three seeds that determine every stochastic choice of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub dropout: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 0,
            shuffle: 1,
            dropout: 2,
        }
    }
}

// ── optimizer ────────────────────────────────────────────────────────────

/// AdamW with decoupled weight decay applied before the moment update.
pub struct AdamW<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    ids: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let ids = store.trainable_ids();
        let m = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        let v = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            ids,
            m,
            v,
        }
    }

    /// One update over every trainable parameter. `grads` maps bound
    /// parameter ids to their accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &HashMap<usize, Tensor<T>>) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bias1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bias2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let wd = T::from_f64(self.lr * self.weight_decay);

        for (slot, &id) in self.ids.iter().enumerate() {
            let grad = grads
                .get(&id.0)
                .ok_or_else(|| Error::Contract(format!("missing gradient for `{}`", store.entry(id).name)))?;
            let decay = store.entry(id).decay;
            let param = store.get_mut(id);
            let p = param.data_mut();
            let g = grad.data();
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for i in 0..p.len() {
                if decay {
                    p[i] -= wd * p[i];
                }
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>, &Tensor<T>)> {
        self.ids
            .iter()
            .enumerate()
            .map(move |(slot, &id)| (id, &self.m[slot], &self.v[slot]))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor<T>, v: Tensor<T>) -> Result<()> {
        let slot = self
            .ids
            .iter()
            .position(|&i| i == id)
            .ok_or_else(|| Error::Contract("unknown parameter in optimizer state".into()))?;
        self.m[slot] = m;
        self.v[slot] = v;
        Ok(())
    }
}

// ── schedule ─────────────────────────────────────────────────────────────

/// Linear warmup from a fraction of the base rate, then cosine annealing to
/// the floor, advanced per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_fraction: f64,
    pub total_epochs: usize,
    pub min_lr: f64,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, total_epochs: usize, steps_per_epoch: usize) -> Self {
        Schedule {
            base_lr,
            warmup_epochs: 5,
            warmup_start_fraction: 0.1,
            total_epochs,
            min_lr: 1e-6,
            steps_per_epoch,
        }
    }

    pub fn lr_at(&self, global_step: u64) -> f64 {
        let warmup = (self.warmup_epochs * self.steps_per_epoch) as u64;
        let total = (self.total_epochs * self.steps_per_epoch) as u64;
        if global_step < warmup {
            let f = self.warmup_start_fraction;
            return self.base_lr * (f + (1.0 - f) * global_step as f64 / warmup as f64);
        }
        if total <= warmup + 1 {
            return self.base_lr;
        }
        let span = (total - 1 - warmup) as f64;
        let progress = ((global_step - warmup) as f64 / span).min(1.0);
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

// ── epoch loops ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct EpochMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub struct Trainer<T: Scalar> {
    pub opt: AdamW<T>,
    pub schedule: Schedule,
    pub seeds: Seeds,
    pub batch_size: usize,
    pub epoch: u64,
    pub global_step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: &Model<T>, schedule: Schedule, weight_decay: f64, seeds: Seeds, batch_size: usize) -> Self {
        let opt = AdamW::new(&model.store, schedule.base_lr, weight_decay);
        Trainer {
            opt,
            schedule,
            seeds,
            batch_size,
            epoch: 0,
            global_step: 0,
        }
    }

    /// Runs one full training epoch (forward, margin loss, backward, AdamW)
    /// and advances the epoch counter.
    pub fn train_epoch(&mut self, model: &mut Model<T>, data: &Dataset, policy: &AugmentPolicy) -> Result<EpochMetrics> {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut lr = self.opt.lr;

        for batch in epoch_batches(
            data,
            policy,
            self.batch_size,
            Some(self.seeds.shuffle),
            Some(self.seeds.shuffle),
            self.epoch,
        ) {
            lr = self.schedule.lr_at(self.global_step);
            self.opt.lr = lr;

            let mut graph = Graph::new();
            let x = graph.leaf(batch_to::<T>(&batch.images), false);
            let labels: Vec<usize> = batch.labels.iter().map(|&l| l as usize).collect();
            let mut rng = stream_rng(self.seeds.dropout, self.global_step, 0, StreamDomain::Dropout);
            let pass = model.forward_pass(&mut graph, x, Mode::Train, Some(&mut rng), true)?;
            let loss = margin_loss(&mut graph, pass.class_caps, &labels)?;
            let loss_val = graph.value(loss).data()[0].as_f64();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss_val} at step {} (lr {lr:.3e})",
                    self.global_step
                )));
            }
            graph.backward(loss)?;

            let mut grads: HashMap<usize, Tensor<T>> = HashMap::new();
            for (id, var) in &pass.bindings {
                if let Some(g) = graph.grad(*var) {
                    grads.insert(id.0, g);
                }
            }
            let preds = predict(graph.value(pass.class_caps))?;
            drop(graph);
            self.opt.step(&mut model.store, &grads)?;

            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            seen += labels.len();
            loss_sum += loss_val * labels.len() as f64;
            self.global_step += 1;
        }
        self.epoch += 1;
        Ok(EpochMetrics {
            loss: loss_sum / seen.max(1) as f64,
            accuracy: correct as f64 / seen.max(1) as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

/// Deterministic evaluation: resize + normalize only, running statistics,
/// no dropout.
pub fn evaluate<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    policy: &AugmentPolicy,
    batch_size: usize,
    limit: Option<usize>,
) -> Result<EvalMetrics> {
    let started = Instant::now();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let cap = limit.unwrap_or(usize::MAX);

    for batch in epoch_batches(data, policy, batch_size, None, None, 0) {
        if seen >= cap {
            break;
        }
        let take = batch.labels.len().min(cap - seen);
        let (images, labels) = if take == batch.labels.len() {
            (batch.images, batch.labels)
        } else {
            let (c, h, w) = {
                let s = batch.images.shape();
                (s[1], s[2], s[3])
            };
            let data = batch.images.data()[..take * c * h * w].to_vec();
            (
                Tensor::new(vec![take, c, h, w], data)?,
                batch.labels[..take].to_vec(),
            )
        };
        let mut graph = Graph::new();
        let x = graph.leaf(batch_to::<T>(&images), false);
        let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let caps = model.forward(&mut graph, x, Mode::Eval, None, false)?;
        let loss = margin_loss(&mut graph, caps, &labels)?;
        loss_sum += graph.value(loss).data()[0].as_f64() * labels.len() as f64;
        let preds = predict(graph.value(caps))?;
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        seen += labels.len();
    }
    Ok(EvalMetrics {
        loss: loss_sum / seen.max(1) as f64,
        accuracy: correct as f64 / seen.max(1) as f64,
        seconds: started.elapsed().as_secs_f64(),
    })
}

// ── metrics csv ──────────────────────────────────────────────────────────

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,lr,seconds";

pub struct MetricsWriter {
    file: std::fs::File,
}

impl MetricsWriter {
    /// Creates (or truncates) the CSV and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { file })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(MetricsWriter { file })
    }

    pub fn row(&mut self, epoch: u64, split: &str, loss: f64, accuracy: f64, lr: f64, seconds: f64) -> Result<()> {
        writeln!(self.file, "{epoch},{split},{loss},{accuracy},{lr},{seconds:.3}")?;
        Ok(())
    }
}

// ── checkpointing ────────────────────────────────────────────────────────

pub const CKPT_MAGIC: &[u8; 4] = b"MSPC";
pub const CKPT_VERSION: u32 = 1;

/// First 8 bytes of the SHA-256 of the canonical config JSON.
pub fn config_fingerprint(config: &ModelConfig) -> u64 {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn write_tensor<T: Scalar>(out: &mut impl Write, name: &str, t: &Tensor<T>) -> Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

struct TensorReader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> TensorReader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| Error::Format {
            offset: self.offset,
            msg: format!("reading {what}: {e}"),
        })?;
        self.offset += n;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name_len = self.u32("tensor name length")? as usize;
        let name = String::from_utf8(self.bytes(name_len, "tensor name")?)
            .map_err(|_| Error::Format {
                offset: self.offset,
                msg: "tensor name is not utf-8".into(),
            })?;
        let rank = self.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.bytes(numel * 4, "tensor payload")?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

/// Writes the versioned checkpoint container: params (including running
/// statistics), optimizer moments, epoch, schedule position, and the seed
/// triple (the derived-stream RNG state).
pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, trainer: &Trainer<T>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CKPT_MAGIC)?;
    out.write_all(&CKPT_VERSION.to_le_bytes())?;
    out.write_all(&config_fingerprint(&model.config).to_le_bytes())?;
    out.write_all(&trainer.epoch.to_le_bytes())?;
    out.write_all(&trainer.global_step.to_le_bytes())?;
    out.write_all(&trainer.opt.step_count.to_le_bytes())?;
    out.write_all(&trainer.seeds.init.to_le_bytes())?;
    out.write_all(&trainer.seeds.shuffle.to_le_bytes())?;
    out.write_all(&trainer.seeds.dropout.to_le_bytes())?;

    let n_params = model.store.len();
    let n_moments = trainer.opt.moments().count() * 2;
    out.write_all(&((n_params + n_moments) as u32).to_le_bytes())?;
    for (_, entry) in model.store.iter() {
        write_tensor(&mut out, &entry.name, &entry.value)?;
    }
    for (id, m, v) in trainer.opt.moments() {
        let name = &model.store.entry(id).name;
        write_tensor(&mut out, &format!("{name}.adam_m"), m)?;
        write_tensor(&mut out, &format!("{name}.adam_v"), v)?;
    }
    out.flush()?;
    Ok(())
}

pub struct CheckpointHeader {
    pub fingerprint: u64,
    pub epoch: u64,
    pub global_step: u64,
    pub opt_steps: u64,
    pub seeds: Seeds,
}

fn read_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointHeader, HashMap<String, Tensor<T>>)> {
    let file = std::fs::File::open(path)?;
    let mut r = TensorReader {
        inner: std::io::BufReader::new(file),
        offset: 0,
    };
    let magic = r.bytes(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad checkpoint magic {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version}, this build reads {CKPT_VERSION}"
        )));
    }
    let header = CheckpointHeader {
        fingerprint: r.u64("fingerprint")?,
        epoch: r.u64("epoch")?,
        global_step: r.u64("global step")?,
        opt_steps: r.u64("optimizer steps")?,
        seeds: Seeds {
            init: r.u64("init seed")?,
            shuffle: r.u64("shuffle seed")?,
            dropout: r.u64("dropout seed")?,
        },
    };
    let count = r.u32("tensor count")? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        tensors.insert(name, t);
    }
    Ok((header, tensors))
}

fn check_fingerprint(header: &CheckpointHeader, config: &ModelConfig) -> Result<()> {
    let want = config_fingerprint(config);
    if header.fingerprint != want {
        return Err(Error::Incompatible(format!(
            "config fingerprint {:016x} != checkpoint {:016x}",
            want, header.fingerprint
        )));
    }
    Ok(())
}

/// Restores parameters only (for evaluation and attacks).
pub fn load_model<T: Scalar>(path: &Path, model: &mut Model<T>) -> Result<CheckpointHeader> {
    let (header, mut tensors) = read_checkpoint::<T>(path)?;
    check_fingerprint(&header, &model.config)?;
    let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name = model.store.entry(id).name.clone();
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint is missing tensor `{name}`")))?;
        if t.shape() != model.store.get(id).shape() {
            return Err(Error::Incompatible(format!(
                "tensor `{name}` has shape {:?}, model wants {:?}",
                t.shape(),
                model.store.get(id).shape()
            )));
        }
        *model.store.get_mut(id) = t;
    }
    Ok(header)
}

/// Restores parameters plus optimizer/schedule position for exact resumption.
pub fn load_checkpoint<T: Scalar>(path: &Path, model: &mut Model<T>, trainer: &mut Trainer<T>) -> Result<()> {
    let (header, mut tensors) = read_checkpoint::<T>(path)?;
    check_fingerprint(&header, &model.config)?;
    let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name = model.store.entry(id).name.clone();
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint is missing tensor `{name}`")))?;
        *model.store.get_mut(id) = t;
    }
    for id in model.store.trainable_ids() {
        let name = model.store.entry(id).name.clone();
        let m = tensors
            .remove(&format!("{name}.adam_m"))
            .ok_or_else(|| Error::Incompatible(format!("missing optimizer moment for `{name}`")))?;
        let v = tensors
            .remove(&format!("{name}.adam_v"))
            .ok_or_else(|| Error::Incompatible(format!("missing optimizer moment for `{name}`")))?;
        trainer.opt.set_moments(id, m, v)?;
    }
    trainer.epoch = header.epoch;
    trainer.global_step = header.global_step;
    trainer.opt.step_count = header.opt_steps;
    trainer.seeds = header.seeds;
    Ok(())
}
