//! Fine-tune diagnostics from a saved base: `ft <base.ckpt> <label> <lr_hei_has> <steps> [k=v...]`.
use hyat::config::KvConfig;
use hyat::harness::evaluate_model;
use hyat::harness::experiment::{eval_data, finetune_data, ExperimentConfig};
use hyat::model::PeftConfig;
use hyat::trainer::{finetune, load_checkpoint};

fn main() -> hyat::Result<()> {
    let a: Vec<String> = std::env::args().collect();
    let (base, _) = load_checkpoint(a[1].as_ref())?;
    let kv = KvConfig::parse(&a[5..].join("\n"))?;
    let seed = std::env::var("SEED").map_or(0, |s| s.parse().unwrap());
    let mut cfg = ExperimentConfig::from_kv(&kv, seed)?;
    let ft = finetune_data(&cfg)?;
    let ev = eval_data(&cfg)?;
    let steps: usize = a[4].parse().unwrap();
    cfg.finetune.lr_hei_has = a[3].parse().unwrap();
    cfg.finetune.epochs = 10;
    cfg.finetune.steps_per_epoch = steps / 10;
    let mut peft = PeftConfig::from_kv(&kv, PeftConfig::table4(&a[2])?)?;
    if peft.hei.is_some() { peft.hei_residual = cfg.hei_residual; }
    let b = evaluate_model(&base, &ev, &cfg.track)?;
    let t = std::time::Instant::now();
    let (m, r) = finetune(&base, peft, &ft, &cfg.finetune, &mut |s, l| if s % 50 == 0 { eprintln!("  step {s} loss {l:.4}") })?;
    for (n, t) in m.params.iter().filter(|(n, _)| n.starts_with("hei.")) { eprintln!("{n} {:?}", t.as_slice().iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()); }
    if peft.hei.is_some() {
        let (inp, _) = hyat::trainer::train::draw_sample(&ev, &cfg.finetune, &m.cfg, 0, 0)?;
        let p = hyat::hei::HeiParams::new(m.params.get("hei.w_down")?.clone(), m.params.get("hei.w_up")?.clone())?;
        let sa = hyat::hei::spectral_attention(&inp.search.hs, &p)?;
        let ve = hyat::hei::image_fusion(&inp.search.fc, &sa)?;
        eprintln!("|V_SA|max {:.4e} |V_E|max {:.4e} fc max {:.3}", sa.max_abs(), ve.max_abs(), inp.search.fc.max_abs());
    }
    let e = evaluate_model(&m, &ev, &cfg.track)?;
    let eft = evaluate_model(&m, &ft[..10], &cfg.track)?;
    println!("{} lr {} steps {steps}: base auc {:.4} -> {:.4} (dp {:.3}); train-set auc {:.4}; tail loss {:.4}; {:.0}s",
        a[2], a[3], b.auc, e.auc, e.dp20, eft.auc, r.train.tail_mean(20), t.elapsed().as_secs_f64());
    Ok(())
}
