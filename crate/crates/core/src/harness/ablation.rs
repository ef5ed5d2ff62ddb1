//! Ablation grids mirroring Tables 4, 5, 6 and 8, and the cell runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::metrics::{aggregate, evaluate, BenchmarkEvaluation};
use crate::hei::HeiVariant;
use crate::model::{Model, PeftConfig};
use crate::tracker::{run_frames, write_results, TrackConfig, TrackResult};
use crate::trainer::{finetune, save_checkpoint, LoadedSequence, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub label: String,
    pub peft: PeftConfig,
}

impl GridCell {
    pub fn new(peft: PeftConfig) -> Self {
        Self { label: peft.to_string(), peft }
    }
}

pub const GRIDS: [&str; 4] = ["table4", "table5", "table6", "table8"];

/// Named grid, or a comma-separated list of Table 4 row labels.
/// Deltas are reported against the first row of the grid.
pub fn grid(name: &str) -> Result<Vec<GridCell>> {
    let full = PeftConfig::full();
    Ok(match name {
        "table4" => ["baseline", "+HEI", "+HEI+HAS", "+HEI+HAS+HAM"]
            .iter()
            .map(|l| PeftConfig::table4(l).map(GridCell::new))
            .collect::<Result<_>>()?,
        "table5" => HeiVariant::ALL.iter().map(|&v| GridCell::new(PeftConfig { hei: Some(v), ..full })).collect(),
        "table6" => (0..8u8)
            .map(|m| GridCell::new(PeftConfig { has_q: m & 1 != 0, has_k: m & 2 != 0, has_v: m & 4 != 0, ..full }))
            .collect(),
        "table8" => [(false, false), (true, false), (false, true), (true, true)]
            .iter()
            .map(|&(s, p)| GridCell::new(PeftConfig { ham_seq: s, ham_par: p, ..full }))
            .collect(),
        list => list
            .split(',')
            .map(|l| PeftConfig::table4(l.trim()).map(GridCell::new))
            .collect::<Result<_>>()
            .map_err(|e| Error::config(format!("unknown grid `{list}` (expected one of {GRIDS:?} or Table 4 labels): {e}")))?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub label: String,
    pub auc: f64,
    pub dp20: f64,
    pub d_auc: f64,
    pub d_dp20: f64,
    pub trainable_params: usize,
    pub final_loss: Option<f64>,
}

pub fn table_csv(cells: &[AblationCell]) -> String {
    let mut s = String::from("label,auc,dp20,d_auc,d_dp20\n");
    for c in cells {
        let _ = writeln!(s, "{},{:.6},{:.6},{:+.6},{:+.6}", c.label, c.auc, c.dp20, c.d_auc, c.d_dp20);
    }
    s
}

/// Tracks every sequence (in parallel, each independently deterministic).
pub fn track_all(model: &Model, seqs: &[LoadedSequence], cfg: &TrackConfig) -> Result<Vec<TrackResult>> {
    seqs.par_iter()
        .map(|s| run_frames(&s.frames, &s.groundtruth[0], model, &s.meta.cmf, cfg))
        .collect()
}

pub fn score(seqs: &[LoadedSequence], results: &[TrackResult]) -> Result<BenchmarkEvaluation> {
    let mut per = BTreeMap::new();
    let mut attrs = BTreeMap::new();
    for (s, r) in seqs.iter().zip(results) {
        per.insert(s.name.clone(), evaluate(&r.boxes, &s.groundtruth)?);
        attrs.insert(s.name.clone(), s.meta.attributes.iter().copied().collect());
    }
    aggregate(per, &attrs)
}

pub fn evaluate_model(model: &Model, seqs: &[LoadedSequence], cfg: &TrackConfig) -> Result<BenchmarkEvaluation> {
    score(seqs, &track_all(model, seqs, cfg)?)
}

fn sanitize(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect::<String>().trim_matches('_').to_string()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub track: TrackConfig,
    /// Applied to every cell that enables HEI.
    pub hei_residual: bool,
}

/// Fine-tunes each cell from the shared base with the same seed and budget,
/// tracks the evaluation set and tabulates AUC / DP@20P. When `out` is given
/// each cell writes its checkpoint, results and metrics under
/// `out/cells/<label>/`.
pub fn run_ablation(
    cells: &[GridCell],
    base: &Model,
    train_data: &[LoadedSequence],
    eval_data: &[LoadedSequence],
    cfg: &AblationConfig,
    out: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<AblationCell>> {
    if cells.is_empty() {
        return Err(Error::config("empty ablation grid"));
    }
    let base = base.base_only();
    let mut rows: Vec<AblationCell> = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut peft = cell.peft;
        if peft.hei.is_some() {
            peft.hei_residual = cfg.hei_residual;
        }
        let (model, trainable, final_loss) = if peft.is_empty() {
            (base.clone(), 0, None)
        } else {
            let (m, r) = finetune(&base, peft, train_data, &cfg.train, &mut |_, _| {})?;
            let tail = r.train.tail_mean(20);
            (m, r.trainable_params, (!r.train.losses.is_empty()).then_some(tail))
        };
        let results = track_all(&model, eval_data, &cfg.track)?;
        let eval = score(eval_data, &results)?;
        if let Some(dir) = out {
            let cell_dir = dir.join("cells").join(sanitize(&cell.label));
            save_checkpoint(&model, &cell_dir.join("model.ckpt"))?;
            for (s, r) in eval_data.iter().zip(&results) {
                write_results(&cell_dir.join("results").join(format!("{}.txt", s.name)), r)?;
            }
            eval.write(&cell_dir.join("metrics"))?;
        }
        let (b_auc, b_dp) = rows.first().map_or((eval.auc, eval.dp20), |r| (r.auc, r.dp20));
        log(&format!(
            "cell {:<16} auc {:.4} dp20 {:.4} trainable {} loss {}",
            cell.label,
            eval.auc,
            eval.dp20,
            trainable,
            final_loss.map_or("-".into(), |l| format!("{l:.4}"))
        ));
        rows.push(AblationCell {
            label: cell.label.clone(),
            auc: eval.auc,
            dp20: eval.dp20,
            d_auc: eval.auc - b_auc,
            d_dp20: eval.dp20 - b_dp,
            trainable_params: trainable,
            final_loss,
        });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let p = dir.join("ablation.csv");
        fs::write(&p, table_csv(&rows)).map_err(Error::io(&p))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_expected_rows() {
        let t4: Vec<String> = grid("table4").unwrap().into_iter().map(|c| c.label).collect();
        assert_eq!(t4, ["baseline", "+HEI", "+HEI+HAS", "+HEI+HAS+HAM"]);
        assert_eq!(grid("table5").unwrap().len(), 4);
        let t6 = grid("table6").unwrap();
        assert_eq!(t6.len(), 8);
        let mut labels: Vec<&str> = t6.iter().map(|c| c.label.as_str()).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 8);
        assert_eq!(grid("table8").unwrap().len(), 4);
        assert_eq!(grid("baseline").unwrap().len(), 1);
        assert!(matches!(grid("+FOO"), Err(Error::Config(_))));
    }

    #[test]
    fn table_csv_layout() {
        let c = AblationCell {
            label: "baseline".into(),
            auc: 0.5,
            dp20: 0.25,
            d_auc: 0.0,
            d_dp20: 0.0,
            trainable_params: 0,
            final_loss: None,
        };
        assert_eq!(table_csv(&[c]), "label,auc,dp20,d_auc,d_dp20\nbaseline,0.500000,0.250000,+0.000000,+0.000000\n");
    }
}
