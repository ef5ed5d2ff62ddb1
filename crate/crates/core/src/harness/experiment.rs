//! Desk-scale metamer experiment (acceptance criterion 8): a false-color
//! base cannot tell the target from its metamer distractor; the adapters
//! see the spectra and can.

use std::path::Path;
use std::time::Instant;

use crate::config::KvConfig;
use crate::error::Result;
use crate::harness::ablation::{grid, run_ablation, AblationCell, AblationConfig, GridCell};
use crate::hsdata::synth::{sequence_seed, synth_sequence, DistractorMode, SynthSpec};
use crate::model::{Model, ModelConfig};
use crate::tracker::TrackConfig;
use crate::trainer::{pretrain_base, save_checkpoint, LoadedSequence, SampleConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Shape of every generated sequence. The experiment overrides the
    /// distractor mode per split; `gen-data` uses it as given (metamer).
    pub synth: SynthSpec,
    pub pretrain_sequences: usize,
    /// Pretraining sequences are short: many distinct target colors matter
    /// more than long trajectories.
    pub pretrain_frames: usize,
    /// Share of pretraining sequences with a clutter distractor (the rest
    /// have none); clutter teaches the base to discriminate by color.
    pub pretrain_clutter: f64,
    pub finetune_sequences: usize,
    pub eval_sequences: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub track: TrackConfig,
    pub hei_residual: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sample = SampleConfig::default();
        Self {
            seed: 0,
            model: ModelConfig::desk(),
            synth: SynthSpec {
                distractor: DistractorMode::Metamer,
                distractor_radius: 8.0,
                distractor_orbit_speed: 0.15,
                ..SynthSpec::default()
            },
            pretrain_sequences: 160,
            pretrain_frames: 10,
            pretrain_clutter: 0.75,
            finetune_sequences: 320,
            eval_sequences: 10,
            pretrain: TrainConfig {
                lr_base: 2e-3,
                weight_decay: 1e-4,
                batch_size: 16,
                epochs: 10,
                steps_per_epoch: 600,
                decay_epoch: 8,
                sample: sample.clone(),
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                lr_hei_has: 1e-2,
                lr_ham: 1e-3,
                batch_size: 16,
                epochs: 10,
                steps_per_epoch: 160,
                decay_epoch: 8,
                sample,
                ..TrainConfig::default()
            },
            track: TrackConfig::default(),
            hei_residual: true,
        }
    }
}

impl ExperimentConfig {
    /// Reads `experiment.*`, `pretrain.*`, `finetune.*`, `track.*`,
    /// `synth.*` and `model.*` keys over the defaults.
    pub fn from_kv(kv: &KvConfig, seed: u64) -> Result<Self> {
        let d = Self::default();
        let pretrain = TrainConfig::from_kv(kv, "pretrain", &d.pretrain, seed)?;
        let finetune = TrainConfig::from_kv(kv, "finetune", &d.finetune, seed)?;
        let model = ModelConfig::from_kv(kv)?;
        Ok(Self {
            seed,
            model,
            synth: SynthSpec::from_kv_over(kv, &d.synth)?,
            pretrain_sequences: kv.get("experiment.pretrain_sequences", d.pretrain_sequences)?,
            pretrain_frames: kv.get("experiment.pretrain_frames", d.pretrain_frames)?,
            pretrain_clutter: kv.get("experiment.pretrain_clutter", d.pretrain_clutter)?,
            finetune_sequences: kv.get("experiment.finetune_sequences", d.finetune_sequences)?,
            eval_sequences: kv.get("experiment.eval_sequences", d.eval_sequences)?,
            pretrain,
            finetune,
            track: TrackConfig::from_kv(kv)?,
            hei_residual: kv.get("experiment.hei_residual", d.hei_residual)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub cells: Vec<AblationCell>,
    /// `None` when the base was supplied rather than pretrained.
    pub pretrain_final_loss: Option<f64>,
    pub seconds: f64,
}

impl ExperimentReport {
    fn auc(&self, label: &str) -> f64 {
        self.cells.iter().find(|c| c.label == label).map_or(f64::NAN, |c| c.auc)
    }

    pub fn baseline_auc(&self) -> f64 {
        self.auc("baseline")
    }

    pub fn full_auc(&self) -> f64 {
        self.auc("+HEI+HAS+HAM")
    }

    /// Finetuned AUC ≥ baseline + 0.10.
    pub fn gain_ok(&self) -> bool {
        self.full_auc() >= self.baseline_auc() + 0.10
    }

    /// AUC(+HEI+HAS+HAM) ≥ AUC(+HEI+HAS) ≥ AUC(baseline) − 0.02.
    pub fn monotone_ok(&self) -> bool {
        self.full_auc() >= self.auc("+HEI+HAS") && self.auc("+HEI+HAS") >= self.baseline_auc() - 0.02
    }
}

/// Generates `count` sequences; seeds are disjoint per `split`.
pub fn generate(spec: &SynthSpec, mode: DistractorMode, count: usize, seed: u64, split: u64) -> Result<Vec<LoadedSequence>> {
    let spec = SynthSpec { distractor: mode, ..spec.clone() };
    (0..count)
        .map(|i| {
            let s = synth_sequence(&spec, sequence_seed(seed ^ (split << 48), i))?;
            Ok(LoadedSequence {
                name: format!("{}_{i:03}", mode.to_string().to_lowercase()),
                meta: s.meta,
                frames: s.frames,
                groundtruth: s.groundtruth,
            })
        })
        .collect()
}

/// Pieces of an experiment supplied by the caller; anything missing is
/// generated (data) or pretrained (base) from the [`ExperimentConfig`].
#[derive(Clone, Debug, Default)]
pub struct ExperimentInputs {
    pub base: Option<Model>,
    pub finetune: Option<Vec<LoadedSequence>>,
    pub eval: Option<Vec<LoadedSequence>>,
}

/// Pretraining set: distractor-free and clutter sequences (splits 1, 2).
pub fn pretrain_data(cfg: &ExperimentConfig) -> Result<Vec<LoadedSequence>> {
    let clutter = ((cfg.pretrain_sequences as f64) * cfg.pretrain_clutter).round() as usize;
    let plain = cfg.pretrain_sequences - clutter.min(cfg.pretrain_sequences);
    let short = SynthSpec { frame_count: cfg.pretrain_frames, ..cfg.synth.clone() };
    let mut pre = generate(&short, DistractorMode::None, plain, cfg.seed, 1)?;
    pre.extend(generate(&short, DistractorMode::Clutter, cfg.pretrain_sequences - plain, cfg.seed, 2)?);
    Ok(pre)
}

/// Metamer fine-tuning set (split 3).
pub fn finetune_data(cfg: &ExperimentConfig) -> Result<Vec<LoadedSequence>> {
    generate(&cfg.synth, DistractorMode::Metamer, cfg.finetune_sequences, cfg.seed, 3)
}

/// Metamer evaluation benchmark (split 4), disjoint from fine-tuning.
pub fn eval_data(cfg: &ExperimentConfig) -> Result<Vec<LoadedSequence>> {
    generate(&cfg.synth, DistractorMode::Metamer, cfg.eval_sequences, cfg.seed, 4)
}

/// Runs an ablation grid from a shared base. Without a supplied base, a
/// false-color base is pretrained (and saved as `base.ckpt` under `out`).
pub fn run_experiment(
    cfg: &ExperimentConfig,
    cells: &[GridCell],
    inputs: ExperimentInputs,
    out: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<ExperimentReport> {
    let start = Instant::now();
    let ft = match inputs.finetune {
        Some(d) => d,
        None => finetune_data(cfg)?,
    };
    let ev = match inputs.eval {
        Some(d) => d,
        None => eval_data(cfg)?,
    };
    let (base, pretrain_final_loss) = match inputs.base {
        Some(b) => (b, None),
        None => {
            let pre = pretrain_data(cfg)?;
            log(&format!("generated {} pretrain sequences", pre.len()));
            let total = cfg.pretrain.total_steps();
            let (base, report) = pretrain_base(&pre, &cfg.model, &cfg.pretrain, &mut |step, loss| {
                if step % 100 == 0 || step + 1 == total {
                    log(&format!("pretrain step {step}/{total} loss {loss:.4}"));
                }
            })?;
            let loss = report.tail_mean(20);
            log(&format!("pretrained base: final loss {loss:.4} ({:.1}s)", start.elapsed().as_secs_f64()));
            if let Some(dir) = out {
                save_checkpoint(&base, &dir.join("base.ckpt"))?;
            }
            (base, Some(loss))
        }
    };
    log(&format!("fine-tuning on {} sequences, evaluating on {}", ft.len(), ev.len()));
    let acfg = AblationConfig { train: cfg.finetune.clone(), track: cfg.track.clone(), hei_residual: cfg.hei_residual };
    let cells = run_ablation(cells, &base, &ft, &ev, &acfg, out, log)?;
    Ok(ExperimentReport { cells, pretrain_final_loss, seconds: start.elapsed().as_secs_f64() })
}

/// Criterion 8: pretrains a false-color base on distractor-free and clutter
/// sequences, then runs the Table 4 grid fine-tuned on metamer sequences and
/// evaluated on a disjoint metamer benchmark.
pub fn run_metamer_experiment(cfg: &ExperimentConfig, out: Option<&Path>, log: &mut dyn FnMut(&str)) -> Result<ExperimentReport> {
    run_experiment(cfg, &grid("table4")?, ExperimentInputs::default(), out, log)
}
