//! `hyat` command-line interface: data generation, base pretraining, PEFT
//! fine-tuning, tracking, evaluation, ablation grids and the two
//! verification commands (`gradcheck`, `paramcount`).
//!
//! Exit codes: 0 success, 1 validation failure (bad flags, config or data; a
//! failed check), 2 internal error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use hyat::config::KvConfig;
use hyat::harness::experiment::{run_experiment, ExperimentConfig, ExperimentInputs};
use hyat::harness::{aggregate, evaluate, grid, table_csv};
use hyat::hsdata::sequence::{list_sequences, Sequence};
use hyat::hsdata::synth::write_benchmark;
use hyat::model::{Model, ModelConfig, PeftConfig};
use hyat::tracker::{read_results, run_sequence, write_results};
use hyat::trainer::{
    finetune, grad_check, load_checkpoint, load_sequences, pretrain_base, save_checkpoint, tiny_setup,
    TrainReport, GRADCHECK_SEED,
};
use hyat::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "hyat", version, about = "Desk-scale HyA-T hyperspectral PEFT tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key=value config file, or a model preset name (desk, tiny, full).
    #[arg(long)]
    config: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic hyperspectral benchmark (`synth.*` keys).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of sequences (overrides `data.count`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pretrain the false-color base on a sequence directory.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune PEFT modules (`peft.*` keys) on top of a frozen base.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Track every sequence under a directory.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score result files against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run an ablation grid (table4, table5, table6, table8 or Table 4 labels).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "table4")]
        grid: String,
        /// Shared base checkpoint; pretrained from the config when omitted.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Fine-tuning sequences; generated metamer data when omitted.
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Evaluation sequences; generated metamer data when omitted.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Finite-difference gradient check of every trainable tensor.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Use the tiny configuration (N=4, D=8, L=2, r=2, B=4).
        #[arg(long)]
        tiny: bool,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Trainable / total parameter ratio (fails if ≥ 0.05).
    Paramcount {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Finetune { common, .. }
            | Command::Track { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::Paramcount { common } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Track { .. } => "track",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Paramcount { .. } => "paramcount",
        }
    }
}

/// Outcome of a subcommand that ran to completion.
enum Outcome {
    Ok,
    /// A check ran but did not pass (exit 1).
    CheckFailed(String),
}

const PRESETS: [&str; 3] = ["desk", "tiny", "full"];

fn load_config(spec: Option<&str>) -> Result<KvConfig> {
    match spec {
        None => Ok(KvConfig::new()),
        Some(name) if PRESETS.contains(&name) && !Path::new(name).exists() => {
            let mut kv = KvConfig::new();
            kv.set("model.preset", name);
            Ok(kv)
        }
        Some(path) => KvConfig::load(Path::new(path)),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn loss_csv(r: &TrainReport) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in r.losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

/// Parses every config section a subcommand uses, rejects unknown keys,
/// writes `resolved_config.txt`, then runs the subcommand.
fn run(cmd: &Command) -> Result<Outcome> {
    let common = cmd.common();
    let mut kv = load_config(common.config.as_deref())?;
    if let Command::GenData { count: Some(n), .. } = cmd {
        kv.set("data.count", n);
    }
    let seed = common.seed;
    let out = common.out.as_path();
    let log = |m: &str| eprintln!("[hyat {}] {m}", cmd.name());

    // Phase 1: resolve every config section (so one file can serve all
    // subcommands while misspelt keys are still rejected); no side effects.
    let exp = ExperimentConfig::from_kv(&kv, seed)?;
    let peft = PeftConfig::from_kv(&kv, PeftConfig { hei_residual: exp.hei_residual, ..PeftConfig::full() })?;
    let count: usize = kv.get("data.count", 10)?;
    kv.finish()?;
    let inputs: Vec<&Path> = match cmd {
        Command::Pretrain { data, .. } => vec![data],
        Command::Finetune { base, data, .. } => vec![base, data],
        Command::Track { model, data, .. } => vec![model, data],
        Command::Eval { results, data, .. } => vec![results, data],
        Command::Ablate { base, train_data, eval_data, .. } => {
            [base, train_data, eval_data].into_iter().flatten().map(PathBuf::as_path).collect()
        }
        _ => vec![],
    };
    if let Some(missing) = inputs.iter().find(|p| !p.exists()) {
        return Err(Error::input(format!("{} does not exist", missing.display())));
    }
    let mut resolved = format!("# hyat {}\nseed={seed}\n", cmd.name());
    resolved.push_str(&kv.resolved_text());
    write_file(&out.join("resolved_config.txt"), &resolved)?;
    log(&format!("resolved config written to {}", out.join("resolved_config.txt").display()));

    // Phase 2: execute.
    let start = Instant::now();
    let outcome = match cmd {
        Command::GenData { .. } => {
            let dirs = write_benchmark(&exp.synth, count, seed, out)?;
            log(&format!("wrote {} sequences ({} distractor) under {}", dirs.len(), exp.synth.distractor, out.display()));
            Outcome::Ok
        }
        Command::Pretrain { data, .. } => {
            let train = &exp.pretrain;
            let seqs = load_sequences(data)?;
            let total = train.total_steps();
            let (model, report) = pretrain_base(&seqs, &exp.model, train, &mut |step, loss| {
                if step % 100 == 0 || step + 1 == total {
                    log(&format!("step {step}/{total} loss {loss:.4}"));
                }
            })?;
            save_checkpoint(&model, &out.join("base.ckpt"))?;
            write_file(&out.join("loss.csv"), &loss_csv(&report))?;
            log(&format!("base saved; final loss {:.4}", report.tail_mean(20)));
            Outcome::Ok
        }
        Command::Finetune { base, data, .. } => {
            let train = &exp.finetune;
            let (base, _) = load_checkpoint(base)?;
            let seqs = load_sequences(data)?;
            let total = train.total_steps();
            let (model, report) = finetune(&base, peft, &seqs, train, &mut |step, loss| {
                if step % 50 == 0 || step + 1 == total {
                    log(&format!("step {step}/{total} loss {loss:.4}"));
                }
            })?;
            save_checkpoint(&model, &out.join("model.ckpt"))?;
            write_file(&out.join("loss.csv"), &loss_csv(&report.train))?;
            let ratio = report.trainable_params as f64 / report.total_params as f64;
            write_file(
                &out.join("finetune_report.txt"),
                &format!(
                    "peft={peft}\ntrainable_params={}\ntotal_params={}\nratio={ratio:.6}\nfrozen_digest_before={}\nfrozen_digest_after={}\nfinal_loss={}\n",
                    report.trainable_params,
                    report.total_params,
                    report.frozen_digest_before,
                    report.frozen_digest_after,
                    report.train.tail_mean(20),
                ),
            )?;
            log(&format!("fine-tuned {peft}: {} trainable params, frozen digest unchanged", report.trainable_params));
            Outcome::Ok
        }
        Command::Track { model, data, .. } => {
            let (model, _) = load_checkpoint(model)?;
            for dir in list_sequences(data)? {
                let name = Sequence::open(&dir)?.name();
                let r = run_sequence(&dir, &model, &exp.track)?;
                write_results(&out.join("results").join(format!("{name}.txt")), &r)?;
                log(&format!("{name}: {} frames, {} template updates", r.boxes.len(), r.updates));
            }
            Outcome::Ok
        }
        Command::Eval { results, data, .. } => {
            let mut per = std::collections::BTreeMap::new();
            let mut attrs = std::collections::BTreeMap::new();
            for dir in list_sequences(data)? {
                let seq = Sequence::open(&dir)?;
                let name = seq.name();
                let pred: Vec<_> = read_results(&results.join(format!("{name}.txt")))?.into_iter().map(|(b, _)| b).collect();
                per.insert(name.clone(), evaluate(&pred, &seq.groundtruth)?);
                attrs.insert(name, seq.meta.attributes.iter().copied().collect());
            }
            let e = aggregate(per, &attrs)?;
            e.write(&out.join("metrics"))?;
            println!("auc={:.6} dp20={:.6} sequences={}", e.auc, e.dp20, e.sequences.len());
            Outcome::Ok
        }
        Command::Ablate { grid: name, base, train_data, eval_data, .. } => {
            let cells = grid(name)?;
            let inputs = ExperimentInputs {
                base: base.as_deref().map(load_checkpoint).transpose()?.map(|(m, _)| m),
                finetune: train_data.as_deref().map(load_sequences).transpose()?,
                eval: eval_data.as_deref().map(load_sequences).transpose()?,
            };
            let report = run_experiment(&exp, &cells, inputs, Some(out), &mut |m| log(m))?;
            print!("{}", table_csv(&report.cells));
            Outcome::Ok
        }
        Command::Gradcheck { tiny, step, tol, .. } => {
            let (model, input, targets) = if *tiny {
                tiny_setup(GRADCHECK_SEED)?
            } else {
                let cfg = ModelConfig { peft: PeftConfig::none(), ..exp.model.clone() };
                let mut m = Model::new_base(&cfg, seed)?;
                m.attach_peft(peft, seed.wrapping_add(1))?;
                (m, hyat::model::random_input(&cfg, seed.wrapping_add(2)), [0, 1, 2, 3].map(|b: usize| b % cfg.bins))
            };
            let report = grad_check(&model, &input, &targets, *step, *tol, None)?;
            write_file(&out.join("gradcheck.txt"), &report.to_string())?;
            println!(
                "gradcheck: {} tensors, max relative error {:.3e} (tol {tol:e}) -> {}",
                report.tensors.len(),
                report.max_rel_error(),
                if report.passed() { "PASS" } else { "FAIL" }
            );
            if report.passed() {
                Outcome::Ok
            } else {
                Outcome::CheckFailed(format!("gradient check failed for: {}", report.failures().join(", ")))
            }
        }
        Command::Paramcount { .. } => {
            let cfg = &exp.model;
            let (trainable, total) = cfg.param_counts();
            let ratio = trainable as f64 / total as f64;
            let text = format!("peft={}\ntrainable_params={trainable}\ntotal_params={total}\nratio={ratio:.6}\n", cfg.peft);
            write_file(&out.join("paramcount.txt"), &text)?;
            print!("{text}");
            if ratio < 0.05 {
                Outcome::Ok
            } else {
                Outcome::CheckFailed(format!("trainable ratio {ratio:.4} is not below 0.05"))
            }
        }
    };
    log(&format!("done in {:.1}s", start.elapsed().as_secs_f64()));
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed(msg)) => {
            eprintln!("hyat {}: {msg}", cli.command.name());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("hyat {}: {e}", cli.command.name());
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
