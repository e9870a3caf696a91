//! Adam optimiser and the seeded mini-batch training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container::{self, NamedTensors};
use crate::datasets::{FeatureDataset, UNLABELED};
use crate::error::{Error, Result};
use crate::flow::{save_checkpoint, FlowModel};
use crate::loss::{build_loss, LossConfig, LossValues};
use crate::nd::{Bindings, Graph, Tensor};
use crate::rng::{self, Rng};

pub const STATE_MAGIC: &[u8; 4] = b"FCOS";
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 penalty, folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub config: AdamConfig,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamState { step: 0, m, v, config }
    }
}

/// One Adam update with bias correction. The step counter advances even
/// when every gradient is zero.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.m.len() != state.v.len() {
        return Err(Error::invalid(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::invalid(format!(
                "parameter {i}: shape {:?}, gradient {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((theta, &gk), mk), vk) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gk = gk + weight_decay * *theta;
            *mk = beta1 * *mk + (1.0 - beta1) * gk;
            *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
            let m_hat = *mk / c1;
            let v_hat = *vk / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    /// Save a checkpoint every this many epochs; 0 disables periodic saves.
    pub checkpoint_every: usize,
    /// Emit a step record every this many optimiser steps; 0 logs epochs only.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 700,
            batch_size: 64,
            seed: 0,
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            checkpoint_every: 0,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        self.loss.validate()?;
        self.optimizer.validate()
    }
}

/// Batch-size weighted loss means over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub rows: usize,
    pub l_total: f64,
    pub l_con: f64,
    pub l_flow: f64,
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    pub l_total: f64,
    pub l_con: f64,
    pub l_flow: f64,
    pub wallclock_ms: u64,
}

/// Loss values and per-parameter gradients for one labelled batch.
pub fn loss_and_grads(
    model: &FlowModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(LossValues, Vec<Tensor>)> {
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let input = g.leaf("x");
    b.insert(input, x.clone());
    let params = model.register_params(&mut g, true, &mut b);
    let nodes = model.build_forward(&mut g, input, &params);
    let loss = build_loss(&mut g, &nodes, labels, model.d, cfg)?;
    g.evaluate(b)?;
    let values = LossValues {
        total: g.value(loss.total).item(),
        l_con: g.value(loss.l_con).item(),
        l_flow: g.value(loss.l_flow).item(),
    };
    let mut grads = g.gradients(loss.total)?;
    let grads = params
        .iter()
        .zip(model.params())
        .map(|(id, p)| grads.remove(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((values, grads))
}

fn training_labels(data: &FeatureDataset) -> Result<Vec<usize>> {
    if data.labels.contains(&UNLABELED) {
        return Err(Error::invalid("training data contains unlabeled rows"));
    }
    Ok(data.labels.iter().map(|&l| l as usize).collect())
}

fn check_dims(model: &FlowModel, data: &FeatureDataset) -> Result<()> {
    if data.dim != model.d {
        return Err(Error::invalid(format!(
            "dataset dimension {} does not match model dimension {}",
            data.dim, model.d
        )));
    }
    Ok(())
}

/// One pass over `data` in an order drawn from `rng`. A trailing batch with
/// fewer than two rows is dropped. On a numeric failure the model keeps the
/// parameters of the last successful step.
pub fn train_epoch(
    model: &mut FlowModel,
    optimizer: &mut AdamState,
    data: &FeatureDataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<EpochMetrics> {
    train_epoch_logged(model, optimizer, data, cfg, rng, 0, &mut |_: &LossValues| Ok(()))
}

fn train_epoch_logged(
    model: &mut FlowModel,
    optimizer: &mut AdamState,
    data: &FeatureDataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
    epoch: usize,
    on_step: &mut dyn FnMut(&LossValues) -> Result<()>,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    check_dims(model, data)?;
    let labels = training_labels(data)?;
    if optimizer.m.len() != model.num_tensors() {
        return Err(Error::State("optimizer state does not match the model".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut metrics = EpochMetrics {
        epoch,
        steps: 0,
        rows: 0,
        l_total: 0.0,
        l_con: 0.0,
        l_flow: 0.0,
    };
    for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
        if idx.len() < 2 {
            continue;
        }
        let x = data.gather(idx);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let wrap = |e: Error| Error::Batch {
            batch,
            source: Box::new(e),
        };
        let (values, grads) = loss_and_grads(model, &x, &y, &cfg.loss).map_err(wrap)?;
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        adam_step(&mut model.params_mut(), &grad_refs, optimizer)?;
        let w = idx.len() as f64;
        metrics.steps += 1;
        metrics.rows += idx.len();
        metrics.l_total += w * values.total;
        metrics.l_con += w * values.l_con;
        metrics.l_flow += w * values.l_flow;
        on_step(&values)?;
    }
    if metrics.rows > 0 {
        let n = metrics.rows as f64;
        metrics.l_total /= n;
        metrics.l_con /= n;
        metrics.l_flow /= n;
    }
    Ok(metrics)
}

/// Model, optimiser and progress counter; everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: FlowModel,
    pub optimizer: AdamState,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(model: FlowModel, optimizer: AdamConfig) -> Self {
        let optimizer = AdamState::new(model.params(), optimizer);
        TrainState {
            model,
            optimizer,
            epochs_done: 0,
        }
    }

    /// Model checkpoint at `path` plus the optimiser state next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_checkpoint(&self.model, path)?;
        save_optimizer_state(self, &state_path(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let model = crate::flow::load_checkpoint(path)?;
        let (optimizer, epochs_done) = load_optimizer_state(&model, &state_path(path))?;
        Ok(TrainState {
            model,
            optimizer,
            epochs_done,
        })
    }
}

/// Optimiser-state file that accompanies a checkpoint.
pub fn state_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("fcos")
}

pub fn encode_optimizer_state(state: &TrainState) -> Result<Vec<u8>> {
    let model = &state.model;
    let opt = &state.optimizer;
    let c = opt.config;
    let mut entries = vec![
        ("step".to_string(), Tensor::scalar(opt.step as f64)),
        ("epochs_done".to_string(), Tensor::scalar(state.epochs_done as f64)),
        (
            "config".to_string(),
            Tensor::vector(vec![c.lr, c.beta1, c.beta2, c.eps, c.weight_decay]),
        ),
    ];
    for (name, (m, v)) in model.param_names().into_iter().zip(opt.m.iter().zip(&opt.v)) {
        entries.push((format!("m.{name}"), m.clone()));
        entries.push((format!("v.{name}"), v.clone()));
    }
    container::encode_named(
        STATE_MAGIC,
        &NamedTensors {
            version: STATE_VERSION,
            header: [
                container::len_u32(model.d, "d")?,
                container::len_u32(model.blocks.len(), "K")?,
                container::len_u32(model.hidden, "h")?,
            ],
            entries,
        },
    )
}

pub fn decode_optimizer_state(model: &FlowModel, bytes: &[u8]) -> Result<(AdamState, usize)> {
    let doc = container::decode_named(bytes, STATE_MAGIC, STATE_VERSION)?;
    let bad = |detail: String| Error::Format { offset: 0, detail };
    if doc.header != [model.d as u32, model.blocks.len() as u32, model.hidden as u32] {
        return Err(bad(format!("optimizer state for shape {:?} does not match the model", doc.header)));
    }
    let names = model.param_names();
    if doc.entries.len() != 3 + 2 * names.len() {
        return Err(bad(format!("unexpected entry count {}", doc.entries.len())));
    }
    let mut it = doc.entries.into_iter();
    let mut scalar = |want: &str| -> Result<Tensor> {
        let (name, t) = it.next().expect("count checked");
        if name != want {
            return Err(bad(format!("expected entry {want}, found {name}")));
        }
        Ok(t)
    };
    let step = scalar("step")?.item();
    let epochs_done = scalar("epochs_done")?.item();
    let cfg = scalar("config")?;
    let [lr, beta1, beta2, eps, weight_decay] = cfg.data() else {
        return Err(bad("config entry must hold five values".into()));
    };
    let config = AdamConfig {
        lr: *lr,
        beta1: *beta1,
        beta2: *beta2,
        eps: *eps,
        weight_decay: *weight_decay,
    };
    let mut state = AdamState::new(model.params(), config);
    state.step = step as u64;
    for (i, (name, p)) in names.iter().zip(model.params()).enumerate() {
        for (prefix, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
            let t = scalar(&format!("{prefix}.{name}"))?;
            if t.shape() != p.shape() {
                return Err(bad(format!("{prefix}.{name} has shape {:?}", t.shape())));
            }
            *slot = t;
        }
    }
    Ok((state, epochs_done as usize))
}

pub fn save_optimizer_state(state: &TrainState, path: &Path) -> Result<()> {
    container::write_file(path, &encode_optimizer_state(state)?)
}

pub fn load_optimizer_state(model: &FlowModel, path: &Path) -> Result<(AdamState, usize)> {
    decode_optimizer_state(model, &container::read_file(path)?)
}

/// Where and how `fit` persists progress.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Periodic checkpoints are written here as `epoch_NNNN.fckp` (+ `.fcos`).
    pub checkpoint_dir: Option<PathBuf>,
}

/// Runs epochs `state.epochs_done .. cfg.epochs`. Each epoch shuffles with its
/// own substream, so a resumed run replays the uninterrupted one exactly.
/// On error `state` holds the last successfully updated parameters.
pub fn fit(
    state: &mut TrainState,
    data: &FeatureDataset,
    cfg: &TrainConfig,
    opts: &FitOptions,
    log: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    check_dims(&state.model, data)?;
    training_labels(data)?;
    let start = Instant::now();
    let mut history = Vec::new();
    while state.epochs_done < cfg.epochs {
        let epoch = state.epochs_done + 1;
        let mut rng = rng::indexed_substream(cfg.seed, rng::SHUFFLE, epoch as u64);
        let log_every = cfg.log_every as u64;
        let TrainState { model, optimizer, .. } = state;
        let mut step_records = Vec::new();
        let metrics = train_epoch_logged(model, optimizer, data, cfg, &mut rng, epoch, &mut |v: &LossValues| {
            step_records.push(*v);
            Ok(())
        })?;
        if log_every > 0 {
            let first = state.optimizer.step - step_records.len() as u64;
            for (i, v) in step_records.iter().enumerate() {
                let step = first + i as u64 + 1;
                if step.is_multiple_of(log_every) {
                    log(&LogRecord {
                        epoch,
                        step,
                        l_total: v.total,
                        l_con: v.l_con,
                        l_flow: v.l_flow,
                        wallclock_ms: start.elapsed().as_millis() as u64,
                    })?;
                }
            }
        }
        state.epochs_done = epoch;
        log(&LogRecord {
            epoch,
            step: state.optimizer.step,
            l_total: metrics.l_total,
            l_con: metrics.l_con,
            l_flow: metrics.l_flow,
            wallclock_ms: start.elapsed().as_millis() as u64,
        })?;
        log::debug!("epoch {epoch}: total {:.6}", metrics.l_total);
        history.push(metrics);
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch.is_multiple_of(cfg.checkpoint_every) {
                state.save(dir.join(format!("epoch_{epoch:04}.fckp")))?;
            }
        }
    }
    Ok(history)
}
