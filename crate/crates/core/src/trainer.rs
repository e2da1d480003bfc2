//! Deterministic mini-batch training of a projection head.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::param_digest;
use crate::data::EmbeddingDataset;
use crate::ecm::EcmConfig;
use crate::error::{Error, Result};
use crate::heads::{block_forward, pool, stack_samples, HeadConfig, HeadKind, HeadParams};
use crate::losses::{loss_var, LossConfig, LossKind};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub scheduler: Scheduler,
    pub loss: LossKind,
    pub head: HeadKind,
    pub tau: f64,
    pub margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            epochs: 15,
            batch_size: 128,
            seed: 42,
            scheduler: Scheduler::Constant,
            loss: LossKind::Sincere,
            head: HeadKind::Ngpt,
            tau: 0.05,
            margin: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        self.loss_config().validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            margin: self.margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Largest weight-slice norm deviation after the step (nGPT only).
    pub weight_norm_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epoch_means: Vec<f64>,
    pub wall_clock_secs: f64,
    pub checksum: String,
}

impl TrainLog {
    /// `step,epoch,loss` rows; steps and epochs count from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{}\n", s.step, s.epoch, s.loss));
        }
        out
    }

    pub fn max_weight_norm_error(&self) -> Option<f64> {
        self.steps
            .iter()
            .filter_map(|s| s.weight_norm_error)
            .reduce(f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub log: TrainLog,
}

/// Label-stratified shuffled batches over `labels`, deterministic in `(seed, epoch)`.
///
/// Each label's samples are shuffled and cut into pairs (a leftover joins the last pair), the
/// pairs are shuffled together and packed into batches of at most `batch_size`.
pub fn make_batches(labels: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
    }
    if labels.is_empty() {
        return Err(Error::Contract("cannot batch an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);

    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); n_labels];
    for (i, &l) in labels.iter().enumerate() {
        by_label[l].push(i);
    }
    let mut chunks: Vec<Vec<usize>> = Vec::new();
    for mut pool in by_label {
        pool.shuffle(&mut rng);
        let mut pairs: Vec<Vec<usize>> = pool.chunks(2).map(<[usize]>::to_vec).collect();
        if batch_size >= 3 && pairs.len() >= 2 && pairs.last().is_some_and(|c| c.len() == 1) {
            let single = pairs.pop().expect("non-empty");
            pairs.last_mut().expect("at least one pair").extend(single);
        }
        chunks.extend(pairs);
    }
    chunks.shuffle(&mut rng);

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for chunk in chunks {
        if !current.is_empty() && current.len() + chunk.len() > batch_size {
            batches.push(std::mem::take(&mut current));
        }
        current.extend(chunk);
    }
    if !current.is_empty() {
        match batches.last_mut() {
            Some(last) if current.len() < 2 => last.extend(current),
            _ => batches.push(current),
        }
    }
    Ok(batches)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update in place. Nothing is modified when a gradient is non-finite.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Dimension(format!("parameter {i}: shape mismatch")));
        }
    }
    let step = state.t as usize + 1;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step,
            detail: format!("non-finite gradient for parameter {i}"),
            last_good: None,
        });
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
            *w -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Loss and parameter gradients for one batch of dataset records.
pub fn batch_loss_and_grads(
    params: &HeadParams,
    head_cfg: &HeadConfig,
    dataset: &EmbeddingDataset,
    batch: &[usize],
    kind: LossKind,
    loss_cfg: &LossConfig,
    ecm: &EcmConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::training();
    let (bound, leaves) = params.bind(&tape);
    let records = dataset.records();
    let samples: Vec<&Tensor> = batch.iter().map(|&i| &records[i].tokens).collect();
    let labels: Vec<usize> = batch.iter().map(|&i| records[i].label_index).collect();
    let (x, lens) = stack_samples(&tape, &samples, head_cfg.d)?;
    let trace = block_forward(&bound, head_cfg, x, &lens)?;
    let emb = pool(trace.output, &lens, head_cfg.pooling)?;
    let loss = loss_var(kind, emb, &labels, loss_cfg, ecm)?;
    let value = loss.item();
    let grads = tape.backward(loss)?;
    Ok((value, leaves.iter().map(|&v| grads.wrt(v)).collect()))
}

pub fn train(
    dataset: &EmbeddingDataset,
    cfg: &TrainConfig,
    ecm: &EcmConfig,
    head_cfg: &HeadConfig,
) -> Result<TrainOutcome> {
    let init = HeadParams::init(cfg.head, head_cfg, cfg.seed)?;
    train_from(init, dataset, cfg, ecm, head_cfg)
}

/// Trains starting from `params`, whose kind must match `cfg.head`.
pub fn train_from(
    mut params: HeadParams,
    dataset: &EmbeddingDataset,
    cfg: &TrainConfig,
    ecm: &EcmConfig,
    head_cfg: &HeadConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    head_cfg.validate()?;
    if params.kind() != cfg.head {
        return Err(Error::Config(format!(
            "initial parameters are {} but the run asks for {}",
            params.kind(),
            cfg.head
        )));
    }
    if dataset.d() != head_cfg.d {
        return Err(Error::Dimension(format!(
            "dataset d = {} but head d = {}",
            dataset.d(),
            head_cfg.d
        )));
    }
    dataset.check_labels(ecm)?;
    let loss_cfg = cfg.loss_config();
    let labels = dataset.labels();
    let started = Instant::now();
    let mut state = AdamState::new(&params.tensors());
    let mut steps = Vec::new();
    let mut epoch_means = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(&labels, cfg.batch_size, cfg.seed, epoch)?;
        let mut total = 0.0;
        for batch in &batches {
            step += 1;
            let diverged = |detail: String, last_good: &HeadParams| Error::Divergence {
                step,
                detail,
                last_good: Some(Box::new(last_good.clone())),
            };
            let (loss, grads) =
                match batch_loss_and_grads(&params, head_cfg, dataset, batch, cfg.loss, &loss_cfg, ecm) {
                    Ok(r) => r,
                    Err(e) if e.is_numerical() => return Err(diverged(e.to_string(), &params)),
                    Err(e) => return Err(e),
                };
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss} in epoch {epoch}"), &params));
            }
            let last_good = params.clone();
            if let Err(e) = adam_step(&mut params.tensors_mut(), &grads, &mut state, cfg.learning_rate) {
                return Err(diverged(e.to_string(), &last_good));
            }
            let weight_norm_error = match &mut params {
                HeadParams::Ngpt(p) => {
                    if let Err(e) = p.renormalize() {
                        return Err(diverged(e.to_string(), &last_good));
                    }
                    Some(p.max_slice_norm_error())
                }
                HeadParams::Gpt(_) => None,
            };
            if !params.is_finite() {
                return Err(diverged("parameters became non-finite".into(), &last_good));
            }
            total += loss;
            steps.push(StepRecord {
                step,
                epoch,
                loss,
                weight_norm_error,
            });
        }
        epoch_means.push(total / batches.len() as f64);
    }

    let checksum = param_digest(&params);
    Ok(TrainOutcome {
        params,
        log: TrainLog {
            steps,
            epoch_means,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            checksum,
        },
    })
}
