//! Base pretraining and adapter fine-tuning.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelInput, PeftConfig};
use crate::tensor::Matrix;
use crate::trainer::checkpoint::subset_digest;
use crate::trainer::optim::AdamW;
use crate::trainer::partition::{partition_params, Group, ParamPartition, Phase};
use crate::trainer::sampling::{sample_pair, LoadedSequence, SampleConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Learning rate of the base network during pretraining.
    pub lr_base: f64,
    pub lr_hei_has: f64,
    pub lr_ham: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub sample: SampleConfig,
}

impl Default for TrainConfig {
    /// §IV-A-1 values; `lr_base` and `steps_per_epoch` are desk-scale
    /// inventions.
    fn default() -> Self {
        Self {
            lr_base: 1e-3,
            lr_hei_has: 1e-4,
            lr_ham: 1e-5,
            weight_decay: 1e-4,
            batch_size: 24,
            epochs: 30,
            steps_per_epoch: 10,
            decay_epoch: 24,
            decay_factor: 0.1,
            seed: 0,
            clip_norm: 0.0,
            sample: SampleConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reads `{prefix}.*` keys (e.g. `pretrain.lr_base`) over `d`, plus the
    /// shared sampling keys.
    pub fn from_kv(kv: &KvConfig, prefix: &str, d: &Self, seed: u64) -> Result<Self> {
        let k = |name: &str| format!("{prefix}.{name}");
        let cfg = Self {
            lr_base: kv.get(&k("lr_base"), d.lr_base)?,
            lr_hei_has: kv.get(&k("lr_hei_has"), d.lr_hei_has)?,
            lr_ham: kv.get(&k("lr_ham"), d.lr_ham)?,
            weight_decay: kv.get(&k("weight_decay"), d.weight_decay)?,
            batch_size: kv.get(&k("batch_size"), d.batch_size)?,
            epochs: kv.get(&k("epochs"), d.epochs)?,
            steps_per_epoch: kv.get(&k("steps_per_epoch"), d.steps_per_epoch)?,
            decay_epoch: kv.get(&k("decay_epoch"), d.decay_epoch)?,
            decay_factor: kv.get(&k("decay_factor"), d.decay_factor)?,
            clip_norm: kv.get(&k("clip_norm"), d.clip_norm)?,
            seed,
            sample: SampleConfig::from_kv(kv)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_base > 0.0 && self.lr_hei_has > 0.0 && self.lr_ham > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 || !(self.decay_factor > 0.0) {
            return Err(Error::config("weight decay and clip norm must be ≥ 0, decay factor > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.decay_epoch >= self.epochs {
            return Err(Error::config(format!(
                "decay epoch {} must precede the last epoch ({} epochs)",
                self.decay_epoch, self.epochs
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    fn lr(&self, group: Group, step: usize) -> f64 {
        let base = match group {
            Group::Base => self.lr_base,
            Group::HeiHas => self.lr_hei_has,
            Group::Ham => self.lr_ham,
        };
        let epoch = step / self.steps_per_epoch.max(1);
        if epoch >= self.decay_epoch {
            base * self.decay_factor
        } else {
            base
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the final `k` steps.
    pub fn tail_mean(&self, k: usize) -> f64 {
        let k = k.min(self.losses.len()).max(1);
        self.losses.iter().rev().take(k).sum::<f64>() / k as f64
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-sample RNG, independent of thread scheduling.
pub fn sample_rng(seed: u64, step: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ 0xA5A5_0000) ^ step as u64) ^ index as u64)
}

/// Draws a usable pair, retrying when the jittered crop loses the target.
pub fn draw_sample(
    data: &[LoadedSequence],
    cfg: &TrainConfig,
    mc: &ModelConfig,
    step: usize,
    index: usize,
) -> Result<(ModelInput, [usize; 4])> {
    let mut rng = sample_rng(cfg.seed, step, index);
    for _ in 0..32 {
        if let Some(s) = sample_pair(data, &cfg.sample, mc, &mut rng)? {
            return Ok(s);
        }
    }
    Err(Error::data("could not draw a training pair whose target lies inside the search region"))
}

/// Shared optimization loop over the trainable side of `partition`.
pub fn train_loop(
    model: &mut Model,
    partition: &ParamPartition,
    data: &[LoadedSequence],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<(TrainReport, AdamW)> {
    let trainable = partition.trainable_names();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut report = TrainReport::default();
    for step in 0..cfg.total_steps() {
        let m: &Model = model;
        let results: Vec<(f64, BTreeMap<String, Matrix>)> = (0..cfg.batch_size)
            .into_par_iter()
            .map(|i| {
                let (input, targets) = draw_sample(data, cfg, &m.cfg, step, i)?;
                m.loss_and_grads(&input, &targets, &trainable, None)
            })
            .collect::<Result<_>>()?;
        let n = results.len() as f64;
        let mut loss = 0.0;
        let mut grads: BTreeMap<String, Matrix> = BTreeMap::new();
        for (l, g) in results {
            loss += l;
            for (name, gm) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&gm),
                    None => {
                        grads.insert(name, gm);
                    }
                }
            }
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss {loss} at step {step}")));
        }
        let mut sq = 0.0;
        for g in grads.values_mut() {
            *g = g.scale(1.0 / n);
            sq += g.as_slice().iter().map(|v| v * v).sum::<f64>();
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient norm at step {step} (loss {loss:.4})")));
        }
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            grads.values_mut().for_each(|g| *g = g.scale(s));
        }
        opt.step(&mut model.params, &grads, |name| cfg.lr(partition.trainable[name], step))?;
        report.losses.push(loss);
        on_step(step, loss);
    }
    Ok((report, opt))
}

/// Trains the base tracker (false-color path, head, encoder) from scratch.
pub fn pretrain_base(
    data: &[LoadedSequence],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<(Model, TrainReport)> {
    let mut model = Model::new_base(model_cfg, cfg.seed)?;
    let partition = partition_params(&model.params, Phase::Pretrain)?;
    let (report, _) = train_loop(&mut model, &partition, data, cfg, on_step)?;
    model.params.round_to_f32();
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub train: TrainReport,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub trainable_params: usize,
    pub total_params: usize,
    pub optimizer_state: Vec<String>,
}

/// Attaches `peft` to a copy of `base` and optimizes only the PEFT tensors.
pub fn finetune(
    base: &Model,
    peft: PeftConfig,
    data: &[LoadedSequence],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<(Model, FinetuneReport)> {
    let mut model = base.base_only();
    model.attach_peft(peft, cfg.seed)?;
    let partition = partition_params(&model.params, Phase::Finetune)?;
    let before = subset_digest(&model.params, &partition.frozen)?;
    let (train, opt) = train_loop(&mut model, &partition, data, cfg, on_step)?;
    for name in partition.trainable.keys() {
        model.params.get_mut(name)?.round_to_f32();
    }
    let after = subset_digest(&model.params, &partition.frozen)?;
    if before != after {
        return Err(Error::FrozenModified(format!("frozen digest changed from {before} to {after}")));
    }
    let report = FinetuneReport {
        train,
        frozen_digest_before: before,
        frozen_digest_after: after,
        trainable_params: partition.trainable_count(&model.params),
        total_params: model.params.scalar_count(),
        optimizer_state: opt.state_names().cloned().collect(),
    };
    Ok((model, report))
}
